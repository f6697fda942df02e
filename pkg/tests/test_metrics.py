import itertools
import math

import pytest
from hypothesis import given, settings, strategies as st

from culvertd.metrics import (
    CorpusTooSmall,
    EmptyCorpus,
    ZeroBaseline,
    bleu,
    cider,
    cider_scores,
    cosine_similarity,
    evaluate_corpus,
    lcs_length,
    meteor,
    quality_gate,
    rouge_l,
    rouge_n,
    tokenize,
)

words = st.lists(st.sampled_from("a b c d e f".split()), min_size=0, max_size=10)


class TestTokenize:
    def test_lowercase_and_splits_punctuation(self):
        assert tokenize("The cat, sat!") == ("the", "cat", "sat")

    def test_digits_kept(self):
        assert tokenize("chainage 3.5 m") == ("chainage", "3", "5", "m")

    def test_empty(self):
        assert tokenize("  ...  ") == ()


class TestRouge:
    def test_identical_is_one(self):
        t = tokenize("a perfect match of text")
        for n in (1, 2):
            prf = rouge_n(t, t, n)
            assert prf.precision == prf.recall == prf.f1 == 1.0
        assert rouge_l(t, t).f1 == 1.0

    def test_rouge1_hand_case(self):
        # [a,b,c] vs [a,c,d]: overlap 2, both length 3 -> P=R=F1=2/3.
        prf = rouge_n(("a", "b", "c"), ("a", "c", "d"), 1)
        assert prf.f1 == pytest.approx(2 / 3, abs=1e-9)

    def test_rouge1_clipping(self):
        # hyp repeats "a" three times; ref has it once -> clipped overlap 1.
        prf = rouge_n(("a", "a", "a"), ("a", "b"), 1)
        assert prf.precision == pytest.approx(1 / 3)
        assert prf.recall == pytest.approx(1 / 2)

    def test_rouge_l_cat_mat_case(self):
        hyp = tokenize("the cat sat")
        ref = tokenize("the cat sat on the mat")
        prf = rouge_l(hyp, ref)
        assert prf.precision == pytest.approx(1.0, abs=1e-9)
        assert prf.recall == pytest.approx(0.5, abs=1e-9)
        assert prf.f1 == pytest.approx(2 / 3, abs=1e-9)

    def test_disjoint_is_zero(self):
        assert rouge_n(("a",), ("b",), 1).f1 == 0.0
        assert rouge_l(("a",), ("b",)).f1 == 0.0

    def test_empty_inputs(self):
        assert rouge_n((), ("a",), 1).f1 == 0.0
        assert rouge_l((), ()).f1 == 0.0

    @given(words, words)
    @settings(max_examples=100)
    def test_rouge_l_bounded(self, h, r):
        prf = rouge_l(tuple(h), tuple(r))
        assert 0.0 <= prf.precision <= 1.0
        assert 0.0 <= prf.recall <= 1.0

    @given(words)
    @settings(max_examples=50)
    def test_corruption_never_outscores_original(self, r):
        # Replacing hypothesis tokens with out-of-vocabulary noise can
        # never raise ROUGE-L recall.
        ref = tuple(r)
        hyp = ref
        base = rouge_l(hyp, ref).recall
        for i in range(len(hyp)):
            corrupted = hyp[:i] + ("zzz",) + hyp[i + 1 :]
            assert rouge_l(corrupted, ref).recall <= base + 1e-12


class TestLcs:
    def _oracle(self, a, b):
        # Exhaustive: longest subsequence of a that is a subsequence of b.
        best = 0
        for k in range(len(a), best, -1):
            for idxs in itertools.combinations(range(len(a)), k):
                sub = [a[i] for i in idxs]
                it = iter(b)
                if all(tok in it for tok in sub):
                    return k
        return best

    def test_equals_exhaustive_oracle_up_to_length_10(self):
        import random

        rng = random.Random(5)
        alphabet = "abc"
        for _ in range(200):
            a = [rng.choice(alphabet) for _ in range(rng.randint(0, 10))]
            b = [rng.choice(alphabet) for _ in range(rng.randint(0, 10))]
            assert lcs_length(a, b) == self._oracle(a, b)

    def test_known_cases(self):
        assert lcs_length("abcde", "ace") == 3
        assert lcs_length("", "abc") == 0
        assert lcs_length("abc", "abc") == 3


class TestBleu:
    def test_identical_is_one(self):
        t = tokenize("the quick brown fox jumps over it")
        assert bleu([(t, [t])]) == pytest.approx(1.0, abs=1e-9)

    def test_brevity_penalty_e_minus_one(self):
        # c=4, r=8, all n-gram precisions 1 -> BLEU = exp(1 - 8/4) = 1/e.
        hyp = tokenize("a b c d")
        ref = tokenize("a b c d e f g h")
        assert bleu([(hyp, [ref])]) == pytest.approx(math.exp(-1.0), abs=1e-9)

    def test_zero_when_no_fourgram_match(self):
        hyp = tokenize("a b c x")
        ref = tokenize("a b c d")
        assert bleu([(hyp, [ref])]) == 0.0

    def test_corpus_level_pools_counts(self):
        a = (tokenize("a b c d"), [tokenize("a b c d")])
        b = (tokenize("e f g h"), [tokenize("e f g h")])
        assert bleu([a, b]) == pytest.approx(1.0, abs=1e-9)

    def test_closest_reference_length(self):
        # Two refs of lengths 4 and 8; hypothesis of 5 picks r=4 -> BP=1.
        hyp = tokenize("a b c d e")
        refs = [tokenize("a b c d"), tokenize("a b c d e f g h")]
        assert bleu([(hyp, refs)]) > 0.0

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            bleu([])


class TestMeteor:
    def test_identical_length_10(self):
        t = tuple("abcdefghij")
        # matches=10, chunks=1 -> 1 - 0.5/1000.
        assert meteor(t, t) == pytest.approx(1.0 - 0.5 / 1000.0, abs=1e-9)

    def test_swap_case_is_half(self):
        # [a,b] vs [b,a]: matches 2, chunks 2 -> F_mean 1, penalty 0.5.
        assert meteor(("a", "b"), ("b", "a")) == pytest.approx(0.5, abs=1e-9)

    def test_no_matches_is_zero(self):
        assert meteor(("a",), ("b",)) == 0.0

    def test_alignment_prefers_run_continuation(self):
        # "a b" against "a b a": continuing the run gives 1 chunk.
        score_contig = meteor(("a", "b"), ("a", "b"))
        score_broken = meteor(("a", "b"), ("b", "x", "a"))
        assert score_contig > score_broken

    @given(words, words)
    @settings(max_examples=100)
    def test_bounded(self, h, r):
        s = meteor(tuple(h), tuple(r)) if h and r else 0.0
        assert 0.0 <= s <= 1.0


class TestCosine:
    def test_zero_vector(self):
        assert cosine_similarity({}, {"a": 1.0}) == 0.0

    def test_identical_is_one(self):
        v = {"a": 2.0, "b": 3.0}
        assert cosine_similarity(v, v) == pytest.approx(1.0)

    @given(
        st.dictionaries(st.sampled_from("abcd"), st.floats(0.1, 5.0), min_size=1, max_size=4),
        st.dictionaries(st.sampled_from("abcd"), st.floats(0.1, 5.0), min_size=1, max_size=4),
        st.floats(0.1, 100.0),
    )
    @settings(max_examples=100)
    def test_scale_invariance(self, u, v, k):
        base = cosine_similarity(u, v)
        scaled = cosine_similarity({g: k * x for g, x in u.items()}, v)
        assert scaled == pytest.approx(base, abs=1e-9)


class TestCider:
    def test_per_item_scores(self):
        corpus = [
            (tokenize("a b c d e"), [tokenize("a b c d e")]),
            (tokenize("v w x y z"), [tokenize("p q r s t")]),
        ]
        scores = cider_scores(corpus)
        # Exact match with a unique reference -> cosine 1 at every n -> 10;
        # fully disjoint -> 0.
        assert scores[0] == pytest.approx(10.0, abs=1e-9)
        assert scores[1] == 0.0
        assert cider(corpus) == pytest.approx(5.0, abs=1e-9)

    def test_needs_two_items(self):
        with pytest.raises(CorpusTooSmall):
            cider_scores([(tokenize("a"), [tokenize("a")])])

    def test_common_ngrams_downweighted(self):
        # "the" appears in every reference, so matching it scores less than
        # matching a rare word.
        common = [
            (("the",), [("the", "cat")]),
            (("the",), [("the", "dog")]),
            (("rat",), [("the", "rat")]),
        ]
        scores = cider_scores(common)
        assert scores[2] > scores[0]


class TestEvaluateCorpusAndGate:
    def _corpus(self):
        return [
            (tokenize("cracking visible in the wall"), [tokenize("cracking visible in the wall")]),
            (tokenize("root intrusion at the joint"), [tokenize("root intrusion near the joint")]),
        ]

    def test_report_structure(self):
        report = evaluate_corpus(self._corpus())
        d = report.to_dict()
        assert set(d) == {"rouge1", "rouge2", "rougeL", "bleu", "meteor", "cider"}
        assert 0.0 <= report.rougeL.f1 <= 1.0
        assert report.bleu > 0.0

    def test_empty_raises(self):
        with pytest.raises(EmptyCorpus):
            evaluate_corpus([])

    def test_gate_threshold(self):
        baseline = evaluate_corpus(self._corpus())

        def with_ratio(ratio):
            class Fake:
                class rougeL:
                    f1 = baseline.rougeL.f1 * ratio

            return Fake

        assert quality_gate(with_ratio(0.70), baseline) == "pass"
        assert quality_gate(with_ratio(0.699), baseline) == "recalibrate"
        assert quality_gate(baseline, baseline) == "pass"

    def test_zero_baseline(self):
        class Zero:
            class rougeL:
                f1 = 0.0

        with pytest.raises(ZeroBaseline):
            quality_gate(Zero, Zero)
