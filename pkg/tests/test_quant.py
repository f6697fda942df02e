import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from culvertd import quant
from culvertd.orchestrator import BudgetSpec
from culvertd.quant import (
    MAX_GATE_RETRIES,
    NF4_CODEBOOK,
    NF4_ZERO_INDEX,
    GateFailedAfterRetries,
    GateResult,
    InvalidProbability,
    LoraAdapter,
    ModelConfig,
    ModelDescriptor,
    NoFeasibleCandidate,
    NonFiniteInput,
    NonPositiveScale,
    ObjectiveWeights,
    QuantSpec,
    QuantizedTensor,
    ShapeMismatch,
    affine_dequantize,
    affine_quantize,
    calibrate_symmetric_per_channel,
    dequantize,
    load_quantized,
    merge_lora,
    nf4_dequantize,
    nf4_quantize,
    nlg_loss,
    optimize_pipeline,
    round_half_away_from_zero,
    save_quantized,
    select_configuration,
    total_objective,
)


class TestRounding:
    @pytest.mark.parametrize(
        "x,expected",
        [(0.5, 1.0), (-0.5, -1.0), (1.5, 2.0), (2.5, 3.0), (-2.5, -3.0), (0.49, 0.0), (63.5, 64.0)],
    )
    def test_half_away_from_zero(self, x, expected):
        assert round_half_away_from_zero(np.array([x]))[0] == expected

    @given(st.integers(-1000, 1000))
    def test_integers_fixed(self, n):
        assert round_half_away_from_zero(np.array([float(n)]))[0] == n


class TestAffine:
    def test_round_trip_error_bound(self):
        # 10,000 uniform values in [-1, 1] at s = 1/127.
        rng = np.random.default_rng(1)
        v = rng.uniform(-1.0, 1.0, size=10_000)
        s = 1.0 / 127.0
        err = np.abs(affine_dequantize(affine_quantize(v, s, 0)) - v)
        assert err.max() <= s / 2 + 1e-15

    def test_clamps_out_of_range(self):
        q = affine_quantize(np.array([100.0, -100.0]), 0.1, 0)
        assert q.codes.tolist() == [127, -128]

    def test_zero_point_shift(self):
        q = affine_quantize(np.array([0.0]), 0.5, 10)
        assert q.codes.tolist() == [10]
        assert affine_dequantize(q).tolist() == [0.0]

    def test_nonpositive_scale(self):
        with pytest.raises(NonPositiveScale):
            affine_quantize(np.array([1.0]), 0.0, 0)

    def test_nonfinite_input(self):
        with pytest.raises(NonFiniteInput):
            affine_quantize(np.array([np.nan]), 0.1, 0)

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=50), st.floats(0.01, 1.0))
    @settings(max_examples=100)
    def test_round_trip_property(self, values, s):
        v = np.array(values)
        lo, hi = -128 * s, 127 * s
        v = np.clip(v, lo, hi)
        err = np.abs(affine_dequantize(affine_quantize(v, s, 0)) - v)
        assert err.max() <= s / 2 + 1e-12


class TestInt8PerChannel:
    def test_worked_example_exact(self):
        w = np.array([[-0.4, 0.2, 0.1]])
        spec, q = calibrate_symmetric_per_channel(w)
        assert q.codes.tolist() == [[-127, 64, 32]]
        assert spec.scale[0] == pytest.approx(0.4 / 127.0)
        assert spec.zero_point == 0

    def test_all_zero_channel_sentinel(self):
        w = np.array([[0.0, 0.0], [1.0, -1.0]])
        spec, q = calibrate_symmetric_per_channel(w)
        assert spec.scale[0] == 1.0
        assert q.codes[0].tolist() == [0, 0]
        assert q.codes[1].tolist() == [127, -127]

    def test_round_trip_bound_per_channel(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(16, 64))
        spec, q = calibrate_symmetric_per_channel(w)
        recon = affine_dequantize(q)
        for c in range(w.shape[0]):
            assert np.abs(recon[c] - w[c]).max() <= spec.scale[c] / 2 + 1e-12

    def test_rejects_non_matrix(self):
        with pytest.raises(ShapeMismatch):
            calibrate_symmetric_per_channel(np.zeros(3))

    def test_codes_symmetric_range(self):
        rng = np.random.default_rng(3)
        _, q = calibrate_symmetric_per_channel(rng.normal(size=(8, 32)))
        assert q.codes.min() >= -127 and q.codes.max() <= 127


class TestNf4:
    def test_codebook_structure(self):
        assert len(NF4_CODEBOOK) == 16
        assert NF4_CODEBOOK[0] == -1.0 and NF4_CODEBOOK[-1] == 1.0
        assert NF4_CODEBOOK[NF4_ZERO_INDEX] == 0.0
        assert all(a < b for a, b in zip(NF4_CODEBOOK, NF4_CODEBOOK[1:]))

    def test_reproduces_all_levels_exactly(self):
        absmax = 3.7
        v = np.array(NF4_CODEBOOK) * absmax
        q = nf4_quantize(v, block_size=16)
        assert q.codes.tolist() == list(range(16))
        assert np.array_equal(nf4_dequantize(q), v)

    def test_all_zero_block(self):
        q = nf4_quantize(np.zeros(8), block_size=4)
        assert q.absmax.tolist() == [1.0, 1.0]
        assert set(q.codes.tolist()) == {NF4_ZERO_INDEX}
        assert np.array_equal(nf4_dequantize(q), np.zeros(8))

    def test_tie_snaps_to_lower_index(self):
        # Midpoint between levels 7 (0.0) and 8 (0.0795...) with absmax 1.
        mid = (NF4_CODEBOOK[7] + NF4_CODEBOOK[8]) / 2.0
        q = nf4_quantize(np.array([1.0, mid]), block_size=2)
        assert q.codes[1] == 7

    def test_idempotent_on_quantizer_output(self):
        rng = np.random.default_rng(4)
        v = rng.normal(size=256)
        q1 = nf4_quantize(v, block_size=64)
        recon = nf4_dequantize(q1)
        q2 = nf4_quantize(recon, block_size=64)
        assert np.array_equal(q1.codes, q2.codes)
        assert np.allclose(q1.absmax, q2.absmax)
        assert np.array_equal(nf4_dequantize(q2), recon)

    def test_error_bounded_by_half_gap(self):
        rng = np.random.default_rng(5)
        v = rng.uniform(-2, 2, size=512)
        q = nf4_quantize(v, block_size=64)
        recon = nf4_dequantize(q)
        levels = np.array(NF4_CODEBOOK)
        max_half_gap = np.diff(levels).max() / 2.0
        block_absmax = q.absmax[np.arange(v.size) // 64]
        assert (np.abs(recon - v) <= max_half_gap * block_absmax + 1e-12).all()

    def test_shape_preserved(self):
        v = np.arange(12, dtype=float).reshape(3, 4)
        assert nf4_dequantize(nf4_quantize(v, block_size=5)).shape == (3, 4)


class TestQuantSpecValidation:
    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            QuantSpec(scheme="int3", bits=8, scale=1.0)

    def test_symmetric_requires_zero_zero_point(self):
        with pytest.raises(ValueError):
            QuantSpec(scheme="symmetric_per_channel", bits=8, scale=np.array([1.0]), zero_point=np.array([1]))

    def test_codes_range_checked(self):
        spec = QuantSpec(scheme="affine", bits=8, scale=1.0)
        with pytest.raises(ValueError):
            QuantizedTensor(spec=spec, codes=np.array([200]), shape=(1,))


class TestLora:
    def test_small_worked_example(self):
        w0 = np.array([[1.0, 0.0], [0.0, 1.0]])
        adapter = LoraAdapter(B=np.array([[1.0], [0.0]]), A=np.array([[0.0, 1.0]]), rank=1, alpha=2.0)
        merged = merge_lora(w0, adapter)
        assert np.array_equal(merged, np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_matches_dense_oracle_64x64(self):
        rng = np.random.default_rng(6)
        w0 = rng.normal(size=(64, 64))
        b = rng.normal(size=(64, 16))
        a = rng.normal(size=(16, 64))
        adapter = LoraAdapter(B=b, A=a, rank=16, alpha=32.0)
        oracle = w0 + 2.0 * (b @ a)
        assert np.abs(merge_lora(w0, adapter) - oracle).max() < 1e-6

    def test_zero_update_is_identity(self):
        rng = np.random.default_rng(7)
        w0 = rng.normal(size=(64, 64))
        adapter = LoraAdapter(B=np.zeros((64, 16)), A=rng.normal(size=(16, 64)), rank=16, alpha=32.0)
        assert np.array_equal(merge_lora(w0, adapter), w0)

    def test_quantized_base_dequantized_first(self):
        rng = np.random.default_rng(8)
        w0 = rng.normal(size=(8, 8))
        _, q = calibrate_symmetric_per_channel(w0)
        adapter = LoraAdapter(B=np.zeros((8, 2)), A=np.zeros((2, 8)), rank=2, alpha=4.0)
        assert np.array_equal(merge_lora(q, adapter), dequantize(q))

    def test_shape_mismatch(self):
        adapter = LoraAdapter(B=np.zeros((4, 2)), A=np.zeros((2, 4)), rank=2, alpha=1.0)
        with pytest.raises(ShapeMismatch):
            merge_lora(np.zeros((5, 5)), adapter)

    def test_rank_bounds(self):
        with pytest.raises(ShapeMismatch):
            LoraAdapter(B=np.zeros((4, 3)), A=np.zeros((2, 4)), rank=2, alpha=1.0)
        with pytest.raises(ValueError):
            LoraAdapter(B=np.zeros((2, 4)), A=np.zeros((4, 2)), rank=4, alpha=1.0)


class TestObjective:
    def test_nlg_loss(self):
        assert nlg_loss([1.0, 1.0]) == 0.0
        assert nlg_loss([np.exp(-1.0)]) == pytest.approx(1.0)
        with pytest.raises(InvalidProbability):
            nlg_loss([0.0])
        with pytest.raises(InvalidProbability):
            nlg_loss([1.1])

    def test_total_objective_is_weighted_sum(self):
        cfg = ModelConfig(name="c", param_count=10.0, latency_s=2.0, memory_gb=4.0, nlg_loss_proxy=1.0)
        w = ObjectiveWeights(lambda_params=0.1, lambda_latency=1.0, lambda_memory=0.5)
        assert total_objective(cfg, w) == pytest.approx(1.0 + 1.0 + 2.0 + 2.0)

    def _table_candidates(self):
        return [
            ModelConfig(name="full-precision", param_count=67e6, latency_s=8.7, memory_gb=12.4),
            ModelConfig(name="fp16", param_count=67e6, latency_s=4.1, memory_gb=6.2),
            ModelConfig(name="int8", param_count=67e6, latency_s=2.3, memory_gb=4.2),
        ]

    def test_budget_fixture_excludes_full_precision(self):
        budgets = BudgetSpec(t_max_s=5.0, m_max_gb=8.0, p_max=100e6)
        chosen = select_configuration(
            self._table_candidates(), budgets, ObjectiveWeights(lambda_latency=1.0)
        )
        assert chosen.name == "int8"
        # Full precision violates both the 5 s and 8 GB limits.
        only_full = self._table_candidates()[:1]
        with pytest.raises(NoFeasibleCandidate):
            select_configuration(only_full, budgets, ObjectiveWeights())

    def test_feasibility_is_strict(self):
        budgets = BudgetSpec(t_max_s=5.0, m_max_gb=8.0, p_max=100e6)
        boundary = ModelConfig(name="edge", param_count=100e6, latency_s=1.0, memory_gb=1.0)
        with pytest.raises(NoFeasibleCandidate):
            select_configuration([boundary], budgets, ObjectiveWeights())

    def test_tie_breaks_latency_then_name(self):
        budgets = BudgetSpec(t_max_s=5.0, m_max_gb=8.0, p_max=100e6)
        a = ModelConfig(name="b", param_count=1.0, latency_s=2.0, memory_gb=1.0)
        b = ModelConfig(name="a", param_count=1.0, latency_s=1.0, memory_gb=1.0)
        c = ModelConfig(name="a0", param_count=1.0, latency_s=1.0, memory_gb=1.0)
        chosen = select_configuration([a, b, c], budgets, ObjectiveWeights())
        assert chosen.name == "a"

    def test_empty_candidates(self):
        with pytest.raises(NoFeasibleCandidate):
            select_configuration([], BudgetSpec(), ObjectiveWeights())


class TestArtifactFile:
    def test_affine_round_trip(self, tmp_path):
        q = affine_quantize(np.array([[0.5, -0.5]]), 0.25, 3)
        path = tmp_path / "a.cqtz"
        save_quantized(path, q)
        q2 = load_quantized(path)
        assert np.array_equal(q2.codes, q.codes)
        assert q2.spec.scale == pytest.approx(q.spec.scale)
        assert q2.spec.zero_point == q.spec.zero_point
        assert q2.shape == q.shape

    def test_int8_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        _, q = calibrate_symmetric_per_channel(rng.normal(size=(4, 8)))
        path = tmp_path / "w.cqtz"
        save_quantized(path, q)
        q2 = load_quantized(path)
        assert np.array_equal(q2.codes, q.codes)
        assert np.allclose(q2.spec.scale, q.spec.scale, rtol=1e-6)

    def test_nf4_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        q = nf4_quantize(rng.normal(size=130), block_size=64)
        path = tmp_path / "n.cqtz"
        save_quantized(path, q)
        q2 = load_quantized(path)
        assert np.array_equal(q2.codes, q.codes)
        assert np.allclose(q2.absmax, q.absmax, rtol=1e-6)
        assert np.allclose(nf4_dequantize(q2), nf4_dequantize(q), rtol=1e-5, atol=1e-6)

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bad.cqtz"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError):
            load_quantized(path)

    def test_header_layout(self, tmp_path):
        q = affine_quantize(np.array([1.0]), 0.5, 0)
        path = tmp_path / "h.cqtz"
        save_quantized(path, q)
        raw = path.read_bytes()
        assert raw[:4] == b"CQTZ"
        import struct

        version, hdrlen = struct.unpack("<HI", raw[4:10])
        assert version == 1
        import json

        header = json.loads(raw[10 : 10 + hdrlen])
        assert header["scheme"] == "affine"
        assert header["n_codes"] == 1


def _descriptor(rng):
    return ModelDescriptor(
        name="m",
        layers={
            "vision.proj": rng.normal(size=(8, 8)),
            "language.mlp": rng.normal(size=(8, 8)),
        },
        layer_groups={"vision.proj": "vision", "language.mlp": "language"},
        adapter_target="language.mlp",
    )


def _adapter():
    return LoraAdapter(B=np.zeros((8, 2)), A=np.zeros((2, 8)), rank=2, alpha=4.0)


class TestOptimizePipeline:
    def test_pass_first_attempt(self):
        rng = np.random.default_rng(20)
        art = optimize_pipeline(_descriptor(rng), _adapter(), [rng.normal(size=4)], gate=lambda a: 0.9)
        assert art.calibration_passes == 1
        assert art.gate_ratio == 0.9
        assert art.precision_policy == {"vision.proj": "fp16", "language.mlp": "int8"}
        assert set(art.weights) == {"language.mlp"}

    def test_activation_scales_are_absmax_over_127(self):
        rng = np.random.default_rng(21)
        calib = [np.array([0.0, -2.54]), np.zeros(3)]
        art = optimize_pipeline(_descriptor(rng), _adapter(), calib, gate=lambda a: 1.0)
        assert art.activation_scales[0] == pytest.approx(2.54 / 127.0)
        assert art.activation_scales[1] == 1.0  # all-zero sentinel

    def test_retry_augments_calibration(self):
        rng = np.random.default_rng(22)
        seen = []

        def gate(artifact):
            seen.append(len(artifact.activation_scales))
            if len(seen) < 3:
                return GateResult(ratio=0.5, failing_samples=(np.ones(2),))
            return GateResult(ratio=0.8)

        art = optimize_pipeline(_descriptor(rng), _adapter(), [rng.normal(size=4)], gate=gate)
        assert seen == [1, 2, 3]
        assert art.calibration_passes == 3
        assert art.gate_ratio == 0.8

    def test_gate_threshold_boundary(self):
        rng = np.random.default_rng(23)
        art = optimize_pipeline(_descriptor(rng), _adapter(), [rng.normal(size=4)], gate=lambda a: 0.70)
        assert art.gate_ratio == 0.70
        with pytest.raises(GateFailedAfterRetries):
            optimize_pipeline(_descriptor(rng), _adapter(), [rng.normal(size=4)], gate=lambda a: 0.699)

    def test_at_most_three_retries(self):
        rng = np.random.default_rng(24)
        calls = []

        def gate(artifact):
            calls.append(artifact.calibration_passes)
            return 0.0

        with pytest.raises(GateFailedAfterRetries):
            optimize_pipeline(_descriptor(rng), _adapter(), [rng.normal(size=4)], gate=gate)
        assert calls == [1, 2, 3, 4]
        assert len(calls) == 1 + MAX_GATE_RETRIES

    def test_merged_adapter_visible_in_weights(self):
        rng = np.random.default_rng(25)
        desc = _descriptor(rng)
        adapter = LoraAdapter(
            B=rng.normal(size=(8, 2)), A=rng.normal(size=(2, 8)), rank=2, alpha=4.0
        )
        art = optimize_pipeline(desc, adapter, [rng.normal(size=4)], gate=lambda a: 1.0)
        merged = merge_lora(desc.layers["language.mlp"], adapter)
        expected_codes = calibrate_symmetric_per_channel(merged)[1].codes
        assert np.array_equal(art.weights["language.mlp"].codes, expected_codes)

    def test_empty_calibration_rejected(self):
        rng = np.random.default_rng(26)
        with pytest.raises(ValueError):
            optimize_pipeline(_descriptor(rng), _adapter(), [], gate=lambda a: 1.0)
