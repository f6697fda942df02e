"""Summarization evaluation metrics implemented from scratch: ROUGE-1/2/L,
unsmoothed corpus BLEU, exact-match METEOR, CIDEr, and the quality gate
comparing a candidate against its full-precision baseline.

All scores are pure functions of token sequences; no model weights or
external corpora are involved. METEOR runs without stemming or synonym
modules ("METEOR-exact"); BLEU is unsmoothed, so any zero n-gram precision
yields 0.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence


class EmptyCorpus(ValueError):
    pass


class CorpusTooSmall(ValueError):
    pass


class ZeroBaseline(ValueError):
    pass


TokenSeq = tuple[str, ...]

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> TokenSeq:
    """Lowercase and split on any non-alphanumeric run."""
    return tuple(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricReport:
    """Scores for one hypothesis set against its references."""

    rouge1: PRF
    rouge2: PRF
    rougeL: PRF
    bleu: float
    meteor: float
    cider: float

    def to_dict(self) -> dict:
        return {
            "rouge1": vars(self.rouge1),
            "rouge2": vars(self.rouge2),
            "rougeL": vars(self.rougeL),
            "bleu": self.bleu,
            "meteor": self.meteor,
            "cider": self.cider,
        }


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _prf(overlap: float, hyp_total: float, ref_total: float) -> PRF:
    p = overlap / hyp_total if hyp_total else 0.0
    r = overlap / ref_total if ref_total else 0.0
    f1 = 2 * p * r / (p + r) if (p + r) else 0.0
    return PRF(p, r, f1)


def rouge_n(hyp: Sequence[str], ref: Sequence[str], n: int) -> PRF:
    """Clipped n-gram overlap precision/recall/F1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    hyp_ng = _ngrams(hyp, n)
    ref_ng = _ngrams(ref, n)
    overlap = sum((hyp_ng & ref_ng).values())
    return _prf(overlap, sum(hyp_ng.values()), sum(ref_ng.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length by dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0]
        for j, y in enumerate(b, start=1):
            curr.append(prev[j - 1] + 1 if x == y else max(prev[j], curr[j - 1]))
        prev = curr
    return prev[-1]


def rouge_l(hyp: Sequence[str], ref: Sequence[str]) -> PRF:
    """LCS-based precision/recall/F1."""
    lcs = lcs_length(hyp, ref)
    return _prf(lcs, len(hyp), len(ref))


def bleu(corpus: Sequence[tuple[Sequence[str], Sequence[Sequence[str]]]]) -> float:
    """Corpus-level BLEU-4: geometric mean of clipped n-gram precisions
    (n = 1..4, uniform weights) times the brevity penalty. Unsmoothed: a
    zero precision at any order gives 0."""
    if not corpus:
        raise EmptyCorpus("BLEU needs at least one (hypothesis, references) pair")
    match = [0] * 4
    total = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, refs in corpus:
        hyp = list(hyp)
        hyp_len += len(hyp)
        # Effective reference length: closest to the hypothesis (shorter wins ties).
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            hyp_ng = _ngrams(hyp, n)
            clipped: Counter = Counter()
            for r in refs:
                clipped |= hyp_ng & _ngrams(r, n)
            match[n - 1] += sum(clipped.values())
            total[n - 1] += sum(hyp_ng.values())
    if any(m == 0 or t == 0 for m, t in zip(match, total)):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(match, total)) / 4
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_precision)


def _align(hyp: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """Exact-unigram one-to-one alignment; returns (matches, chunks).

    Match count is maximal (per-word min of counts). Chunk counting scans
    the hypothesis left to right, preferring the reference position that
    continues the current run.
    """
    positions: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        positions.setdefault(w, []).append(j)
    available = {w: list(js) for w, js in positions.items()}
    matches = 0
    chunks = 0
    prev_j = None
    for w in hyp:
        js = available.get(w)
        if not js:
            prev_j = None
            continue
        if prev_j is not None and prev_j + 1 in js:
            j = prev_j + 1
        else:
            j = js[0]
            chunks += 1
        js.remove(j)
        matches += 1
        prev_j = j
    return matches, chunks


def meteor(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Exact-match METEOR: F_mean = 10PR/(R+9P), fragmentation penalty
    0.5 * (chunks/matches)^3."""
    matches, chunks = _align(hyp, ref)
    if matches == 0:
        return 0.0
    p = matches / len(hyp)
    r = matches / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1 - penalty)


def cosine_similarity(u: dict, v: dict) -> float:
    """Cosine of two sparse vectors; 0 when either is zero."""
    u_norm = math.sqrt(sum(x * x for x in u.values()))
    v_norm = math.sqrt(sum(x * x for x in v.values()))
    if u_norm == 0 or v_norm == 0:
        return 0.0
    dot = sum(x * v.get(g, 0.0) for g, x in u.items())
    return dot / (u_norm * v_norm)


def cider_scores(
    corpus: Sequence[tuple[Sequence[str], Sequence[Sequence[str]]]]
) -> list[float]:
    """Per-item CIDEr: TF-IDF weighted n-gram cosine (n = 1..4), averaged
    over references and orders, scaled by 10.

    IDF comes from the reference side of the evaluation corpus itself:
    idf(g) = log((N + 1) / (1 + df(g))) with N corpus items and df the
    number of items whose reference set contains g (the +1 terms keep
    weights positive for in-corpus n-grams).
    """
    if len(corpus) < 2:
        raise CorpusTooSmall("CIDEr needs at least 2 corpus items for document frequencies")
    n_items = len(corpus)
    totals = [0.0] * n_items
    for n in range(1, 5):
        df: Counter = Counter()
        for _, refs in corpus:
            seen = set()
            for r in refs:
                seen.update(_ngrams(r, n).keys())
            df.update(seen)
        idf = {g: math.log((n_items + 1) / (1 + d)) for g, d in df.items()}
        oov = math.log(n_items + 1)  # n-gram unseen in any reference

        def weighted(tf: Counter) -> dict:
            return {g: c * idf.get(g, oov) for g, c in tf.items()}

        for i, (hyp, refs) in enumerate(corpus):
            h_vec = weighted(_ngrams(hyp, n))
            sims = [cosine_similarity(h_vec, weighted(_ngrams(r, n))) for r in refs]
            totals[i] += sum(sims) / len(sims) if sims else 0.0
    return [10.0 * t / 4.0 for t in totals]


def cider(corpus: Sequence[tuple[Sequence[str], Sequence[Sequence[str]]]]) -> float:
    """Corpus CIDEr: mean of the per-item scores."""
    scores = cider_scores(corpus)
    return sum(scores) / len(scores)


def evaluate_corpus(
    pairs: Sequence[tuple[Sequence[str], Sequence[Sequence[str]]]]
) -> MetricReport:
    """Aggregate every metric over a corpus of (hyp, refs) pairs.

    ROUGE and METEOR average the per-item score against the first
    reference; BLEU and CIDEr are corpus-level by definition.
    """
    if not pairs:
        raise EmptyCorpus("cannot evaluate an empty corpus")

    def avg_prf(fn) -> PRF:
        scores = [fn(hyp, refs[0]) for hyp, refs in pairs]
        k = len(scores)
        return PRF(
            sum(s.precision for s in scores) / k,
            sum(s.recall for s in scores) / k,
            sum(s.f1 for s in scores) / k,
        )

    return MetricReport(
        rouge1=avg_prf(lambda h, r: rouge_n(h, r, 1)),
        rouge2=avg_prf(lambda h, r: rouge_n(h, r, 2)),
        rougeL=avg_prf(rouge_l),
        bleu=bleu(pairs),
        meteor=sum(meteor(h, refs[0]) for h, refs in pairs) / len(pairs),
        cider=cider(pairs) if len(pairs) >= 2 else 0.0,
    )


QUALITY_GATE_THRESHOLD = 0.70


def quality_gate(
    candidate: MetricReport, baseline: MetricReport, threshold: float = QUALITY_GATE_THRESHOLD
) -> str:
    """Compare candidate ROUGE-L F1 against the baseline.

    Returns "pass" when the ratio reaches the threshold (a ratio of exactly
    0.70 passes), otherwise "recalibrate".
    """
    if baseline.rougeL.f1 <= 0:
        raise ZeroBaseline("baseline ROUGE-L F1 must be > 0")
    ratio = candidate.rougeL.f1 / baseline.rougeL.f1
    return "pass" if ratio >= threshold else "recalibrate"
