"""Model-optimization math: affine and NF4 quantization, symmetric
per-channel INT8 calibration, low-rank adapter merging, the composite
efficiency objective, constrained configuration selection and the
three-stage optimization loop with its quality gate.

Rounding is half-away-from-zero everywhere, for determinism across
platforms. All functions are pure over immutable inputs; only
``optimize_pipeline`` carries loop state, and it is single-flight per model
descriptor by construction (no shared mutable state).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Optional, Sequence, Union

import numpy as np

if TYPE_CHECKING:
    from .orchestrator import BudgetSpec


class NonPositiveScale(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class InvalidProbability(ValueError):
    pass


class NoFeasibleCandidate(RuntimeError):
    pass


class GateFailedAfterRetries(RuntimeError):
    pass


#: The 16 NormalFloat4 quantile levels (strictly increasing, endpoints +-1,
#: zero at index 7), embedded as constants.
NF4_CODEBOOK: tuple[float, ...] = (
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
)

NF4_ZERO_INDEX = NF4_CODEBOOK.index(0.0)


def round_half_away_from_zero(x: np.ndarray) -> np.ndarray:
    """Deterministic rounding: .5 always rounds away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_finite(values: np.ndarray) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteInput("input tensor contains non-finite values")


@dataclass(frozen=True)
class QuantSpec:
    """Quantization parameters: scheme, bit width, scale(s), zero point(s),
    and for NF4 the block size and codebook."""

    scheme: str  # affine | symmetric_per_channel | nf4_block
    bits: int
    scale: Union[float, np.ndarray]
    zero_point: Union[int, np.ndarray] = 0
    block_size: Optional[int] = None
    codebook: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.scheme not in ("affine", "symmetric_per_channel", "nf4_block"):
            raise ValueError(f"unknown quantization scheme: {self.scheme!r}")
        if self.bits not in (4, 8):
            raise ValueError(f"bits must be 4 or 8, got {self.bits}")
        scales = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        if not (scales > 0).all():
            raise NonPositiveScale("all scale factors must be > 0")
        if self.scheme == "symmetric_per_channel":
            if np.any(np.atleast_1d(np.asarray(self.zero_point)) != 0):
                raise ValueError("symmetric scheme requires zero_point = 0")
        if self.scheme == "nf4_block":
            if self.block_size is None or self.block_size < 1:
                raise ValueError("nf4_block requires block_size >= 1")
            cb = np.asarray(self.codebook, dtype=np.float64)
            if cb.shape != (16,) or not (np.diff(cb) > 0).all():
                raise ValueError("nf4 codebook must be 16 strictly increasing levels")
            if cb[0] != -1.0 or cb[-1] != 1.0 or 0.0 not in cb:
                raise ValueError("nf4 codebook must contain 0 and endpoints +-1")


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus the metadata needed to reconstruct the tensor."""

    spec: QuantSpec
    codes: np.ndarray
    shape: tuple[int, ...]
    absmax: Optional[np.ndarray] = None  # per-block, nf4 only

    def __post_init__(self) -> None:
        if self.spec.scheme == "nf4_block":
            lo, hi = 0, 15
            if self.absmax is None or not (np.asarray(self.absmax) > 0).all():
                raise ValueError("nf4 tensors need positive per-block absmax")
        else:
            lo = -(2 ** (self.spec.bits - 1))
            hi = 2 ** (self.spec.bits - 1) - 1
        if self.codes.min(initial=0) < lo or self.codes.max(initial=0) > hi:
            raise ValueError(f"codes out of range [{lo}, {hi}]")


def affine_quantize(
    t: np.ndarray, s: float, z: int, bits: int = 8
) -> QuantizedTensor:
    """Map real values to integer codes: clamp(round(v / s) + z)."""
    values = np.asarray(t, dtype=np.float64)
    _check_finite(values)
    if s <= 0:
        raise NonPositiveScale(f"scale must be > 0, got {s}")
    lo = -(2 ** (bits - 1))
    hi = 2 ** (bits - 1) - 1
    codes = round_half_away_from_zero(values / s) + z
    codes = np.clip(codes, lo, hi).astype(np.int32)
    spec = QuantSpec(scheme="affine", bits=bits, scale=float(s), zero_point=int(z))
    return QuantizedTensor(spec=spec, codes=codes, shape=values.shape)


def affine_dequantize(q: QuantizedTensor) -> np.ndarray:
    """Inverse affine map: (code - z) * s."""
    if q.spec.scheme not in ("affine", "symmetric_per_channel"):
        raise ValueError(f"affine_dequantize cannot handle scheme {q.spec.scheme!r}")
    if q.spec.scheme == "symmetric_per_channel":
        scale = np.asarray(q.spec.scale, dtype=np.float64)[:, None]
        return q.codes.astype(np.float64) * scale
    return (q.codes.astype(np.float64) - q.spec.zero_point) * float(q.spec.scale)


def calibrate_symmetric_per_channel(
    w: np.ndarray, bits: int = 8
) -> tuple[QuantSpec, QuantizedTensor]:
    """Symmetric per-channel calibration of a C x N weight matrix.

    Per channel c: s_c = max|w_c| / (2^(bits-1) - 1), zero point 0. An
    all-zero channel gets the sentinel scale 1 so its codes are all zero.
    """
    values = np.asarray(w, dtype=np.float64)
    _check_finite(values)
    if values.ndim != 2:
        raise ShapeMismatch(f"expected a C x N matrix, got shape {values.shape}")
    qmax = 2 ** (bits - 1) - 1
    absmax = np.abs(values).max(axis=1)
    scales = np.where(absmax > 0, absmax / qmax, 1.0)
    # v * qmax / absmax, not v / scale: the fused form keeps exact halves
    # (e.g. 63.5) representable so half-away-from-zero rounding is faithful.
    codes = round_half_away_from_zero(values * qmax / np.where(absmax > 0, absmax, 1.0)[:, None])
    codes = np.clip(codes, -qmax, qmax).astype(np.int32)
    spec = QuantSpec(scheme="symmetric_per_channel", bits=bits, scale=scales, zero_point=0)
    return spec, QuantizedTensor(spec=spec, codes=codes, shape=values.shape)


def nf4_quantize(t: np.ndarray, block_size: int = 64) -> QuantizedTensor:
    """Blockwise NF4 quantization with per-block absmax normalization.

    Each block is scaled into [-1, 1] by its absmax and every value snaps to
    the nearest codebook level (ties resolve to the lower index). An
    all-zero block stores absmax 1 and the zero level.
    """
    values = np.asarray(t, dtype=np.float64)
    _check_finite(values)
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    flat = values.reshape(-1)
    levels = np.asarray(NF4_CODEBOOK)
    n_blocks = (flat.size + block_size - 1) // block_size
    codes = np.empty(flat.size, dtype=np.int32)
    absmax = np.empty(n_blocks, dtype=np.float64)
    for b in range(n_blocks):
        block = flat[b * block_size : (b + 1) * block_size]
        m = np.abs(block).max() if block.size else 0.0
        if m == 0.0:
            absmax[b] = 1.0
            codes[b * block_size : b * block_size + block.size] = NF4_ZERO_INDEX
            continue
        absmax[b] = m
        u = block / m
        # argmin returns the first (lower) index on exact ties
        idx = np.abs(u[:, None] - levels[None, :]).argmin(axis=1)
        codes[b * block_size : b * block_size + block.size] = idx
    spec = QuantSpec(
        scheme="nf4_block",
        bits=4,
        scale=1.0,
        block_size=block_size,
        codebook=NF4_CODEBOOK,
    )
    return QuantizedTensor(spec=spec, codes=codes, shape=values.shape, absmax=absmax)


def nf4_dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct codebook[code] * block absmax."""
    if q.spec.scheme != "nf4_block":
        raise ValueError(f"nf4_dequantize cannot handle scheme {q.spec.scheme!r}")
    levels = np.asarray(q.spec.codebook)
    flat = levels[q.codes]
    block_ids = np.arange(flat.size) // q.spec.block_size
    flat = flat * q.absmax[block_ids]
    return flat.reshape(q.shape)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Scheme-dispatching dequantization."""
    if q.spec.scheme == "nf4_block":
        return nf4_dequantize(q)
    return affine_dequantize(q)


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank update factors: d x r @ r x k, scaled by alpha / rank."""

    B: np.ndarray
    A: np.ndarray
    rank: int
    alpha: float

    def __post_init__(self) -> None:
        d, r_b = self.B.shape
        r_a, k = self.A.shape
        if r_b != self.rank or r_a != self.rank:
            raise ShapeMismatch(
                f"factor inner dims {r_b}/{r_a} do not match rank {self.rank}"
            )
        if not 1 <= self.rank <= min(d, k):
            raise ValueError(f"rank must be in [1, min(d,k)], got {self.rank}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def merge_lora(
    w0: Union[np.ndarray, QuantizedTensor], adapter: LoraAdapter
) -> np.ndarray:
    """Fold the low-rank update into the base weights in full precision.

    Quantized bases are dequantized first; the merged result is always a
    dense full-precision matrix W0 + (alpha / rank) * B @ A.
    """
    base = dequantize(w0) if isinstance(w0, QuantizedTensor) else np.asarray(w0, dtype=np.float64)
    d, k = base.shape
    if adapter.B.shape[0] != d or adapter.A.shape[1] != k:
        raise ShapeMismatch(
            f"adapter {adapter.B.shape}x{adapter.A.shape} does not fit base {base.shape}"
        )
    return base + adapter.scaling * (adapter.B @ adapter.A)


def nlg_loss(token_probs: Sequence[float]) -> float:
    """Token-level cross entropy: -sum(ln p_t) over the sequence."""
    total = 0.0
    for p in token_probs:
        if not 0.0 < p <= 1.0:
            raise InvalidProbability(f"token probability must be in (0, 1], got {p}")
        total -= float(np.log(p))
    return total


@dataclass(frozen=True)
class ModelConfig:
    """One deployable configuration with its measured characteristics.

    Units: param_count is a raw parameter count, latency_s seconds,
    memory_gb gigabytes; nlg_loss_proxy is dimensionless.
    """

    name: str
    param_count: float
    latency_s: float
    memory_gb: float
    nlg_loss_proxy: float = 0.0
    quality_ratio: float = 1.0  # ROUGE-L vs full-precision baseline

    def __post_init__(self) -> None:
        for fname in ("param_count", "latency_s", "memory_gb", "nlg_loss_proxy", "quality_ratio"):
            if getattr(self, fname) < 0:
                raise ValueError(f"{fname} must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "param_count": self.param_count,
            "latency_s": self.latency_s,
            "memory_gb": self.memory_gb,
            "nlg_loss_proxy": self.nlg_loss_proxy,
            "quality_ratio": self.quality_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            name=d["name"],
            param_count=float(d["param_count"]),
            latency_s=float(d["latency_s"]),
            memory_gb=float(d["memory_gb"]),
            nlg_loss_proxy=float(d.get("nlg_loss_proxy", 0.0)),
            quality_ratio=float(d.get("quality_ratio", 1.0)),
        )


@dataclass(frozen=True)
class ObjectiveWeights:
    """Regularization weights for parameter count, latency and memory."""

    lambda_params: float = 0.0
    lambda_latency: float = 0.0
    lambda_memory: float = 0.0

    def __post_init__(self) -> None:
        if min(self.lambda_params, self.lambda_latency, self.lambda_memory) < 0:
            raise ValueError("objective weights must be nonnegative")


def total_objective(cfg: ModelConfig, w: ObjectiveWeights) -> float:
    """Composite loss: nlg proxy + weighted parameter/latency/memory terms."""
    return (
        cfg.nlg_loss_proxy
        + w.lambda_params * cfg.param_count
        + w.lambda_latency * cfg.latency_s
        + w.lambda_memory * cfg.memory_gb
    )


def select_configuration(
    candidates: Sequence[ModelConfig],
    budgets: "BudgetSpec",
    w: ObjectiveWeights,
) -> ModelConfig:
    """Pick the feasible candidate minimizing the composite objective.

    Feasibility is strict: latency < T_max, memory < M_max and parameter
    count < P_max. Ties break by lowest latency, then lexicographic name.
    """
    if not candidates:
        raise NoFeasibleCandidate("candidate list is empty")
    feasible = [
        c
        for c in candidates
        if c.latency_s < budgets.t_max_s
        and c.memory_gb < budgets.m_max_gb
        and c.param_count < budgets.p_max
    ]
    if not feasible:
        raise NoFeasibleCandidate(
            f"all {len(candidates)} candidates violate the deployment budgets"
        )
    return min(feasible, key=lambda c: (total_objective(c, w), c.latency_s, c.name))


# --- quantized artifact file -------------------------------------------------
#
# Byte layout (all multi-byte values little-endian):
#   magic   4 bytes  b"CQTZ"
#   version u16      1
#   hdrlen  u32      length of the UTF-8 JSON header that follows
#   header  JSON     {scheme, bits, shape, block_size, n_codes, n_scales,
#                     n_absmax, zero_point}
#   codes   n_codes  int8
#   scales  n_scales float32
#   absmax  n_absmax float32

_MAGIC = b"CQTZ"
_VERSION = 1


def save_quantized(path: str | Path, q: QuantizedTensor) -> None:
    """Write a QuantizedTensor in the documented artifact layout."""
    scales = np.atleast_1d(np.asarray(q.spec.scale, dtype=np.float32))
    absmax = (
        np.asarray(q.absmax, dtype=np.float32) if q.absmax is not None else np.empty(0, np.float32)
    )
    header = {
        "scheme": q.spec.scheme,
        "bits": q.spec.bits,
        "shape": list(q.shape),
        "block_size": q.spec.block_size,
        "n_codes": int(q.codes.size),
        "n_scales": int(scales.size),
        "n_absmax": int(absmax.size),
        "zero_point": int(np.atleast_1d(np.asarray(q.spec.zero_point))[0]),
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HI", _VERSION, len(blob)))
        f.write(blob)
        f.write(q.codes.astype("<i1").tobytes())
        f.write(scales.astype("<f4").tobytes())
        f.write(absmax.astype("<f4").tobytes())


def load_quantized(path: str | Path) -> QuantizedTensor:
    """Read a QuantizedTensor written by :func:`save_quantized`."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a quantized artifact file")
        version, hdrlen = struct.unpack("<HI", f.read(6))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported artifact version {version}")
        header = json.loads(f.read(hdrlen).decode("utf-8"))
        codes = np.frombuffer(f.read(header["n_codes"]), dtype="<i1").astype(np.int32)
        scales = np.frombuffer(f.read(4 * header["n_scales"]), dtype="<f4").astype(np.float64)
        absmax = np.frombuffer(f.read(4 * header["n_absmax"]), dtype="<f4").astype(np.float64)
    shape = tuple(header["shape"])
    scheme = header["scheme"]
    if scheme == "nf4_block":
        spec = QuantSpec(
            scheme=scheme,
            bits=header["bits"],
            scale=1.0,
            block_size=header["block_size"],
            codebook=NF4_CODEBOOK,
        )
        return QuantizedTensor(spec=spec, codes=codes.reshape(-1), shape=shape, absmax=absmax)
    scale: Union[float, np.ndarray]
    scale = scales if scheme == "symmetric_per_channel" else float(scales[0])
    spec = QuantSpec(scheme=scheme, bits=header["bits"], scale=scale, zero_point=header["zero_point"])
    return QuantizedTensor(spec=spec, codes=codes.reshape(shape), shape=shape)


# --- three-stage optimization loop ------------------------------------------


@dataclass(frozen=True)
class ModelDescriptor:
    """A model as named weight matrices plus layer-group assignment.

    layer_groups maps each layer name to "vision" or "language";
    adapter_target names the layer the low-rank adapter applies to.
    """

    name: str
    layers: dict[str, np.ndarray]
    layer_groups: dict[str, str]
    adapter_target: str

    def __post_init__(self) -> None:
        if self.adapter_target not in self.layers:
            raise ValueError(f"adapter target {self.adapter_target!r} is not a layer")
        for lname in self.layers:
            if self.layer_groups.get(lname) not in ("vision", "language"):
                raise ValueError(f"layer {lname!r} missing a vision/language group")


@dataclass(frozen=True)
class GateResult:
    """Quality-gate verdict: ROUGE-L ratio vs the full-precision baseline
    plus the samples that scored worst (fed back into calibration)."""

    ratio: float
    failing_samples: tuple[np.ndarray, ...] = ()


@dataclass(frozen=True)
class OptimizedArtifact:
    """Output of the optimization loop: INT8 weights, activation scales and
    the mixed-precision policy descriptor."""

    name: str
    weights: dict[str, QuantizedTensor]
    activation_scales: tuple[float, ...]
    precision_policy: dict[str, str]  # layer name -> "fp16" | "int8"
    calibration_passes: int
    gate_ratio: float


GateFn = Callable[[OptimizedArtifact], Union[GateResult, float]]

QUALITY_GATE_THRESHOLD = 0.70
MAX_GATE_RETRIES = 3


def _activation_scales(calib: Sequence[np.ndarray]) -> tuple[float, ...]:
    # Per-tensor dynamic range: absmax over each calibration tensor / 127.
    scales = []
    for t in calib:
        m = float(np.abs(np.asarray(t, dtype=np.float64)).max())
        scales.append(m / 127.0 if m > 0 else 1.0)
    return tuple(scales)


def optimize_pipeline(
    base: ModelDescriptor,
    adapter: LoraAdapter,
    calib: Sequence[np.ndarray],
    gate: GateFn,
    threshold: float = QUALITY_GATE_THRESHOLD,
) -> OptimizedArtifact:
    """Three-stage optimization: merge the adapter, quantize weights INT8
    per-channel with activation scales from the calibration set, then emit a
    mixed-precision policy (vision layers full precision, language layers
    reduced).

    When the gate reports a quality ratio below the threshold the
    calibration stage re-runs with the gate's failing samples appended, at
    most :data:`MAX_GATE_RETRIES` times.
    """
    if not calib:
        raise ValueError("calibration set must be non-empty")

    # Stage 1: adapter consolidation, full precision.
    merged_layers = dict(base.layers)
    merged_layers[base.adapter_target] = merge_lora(base.layers[base.adapter_target], adapter)

    policy = {
        lname: ("int8" if base.layer_groups[lname] == "language" else "fp16")
        for lname in merged_layers
    }

    calib_set = list(calib)
    for attempt in range(1 + MAX_GATE_RETRIES):
        # Stage 2: weight quantization + activation range estimation.
        weights = {
            lname: calibrate_symmetric_per_channel(w, bits=8)[1]
            for lname, w in merged_layers.items()
            if policy[lname] == "int8"
        }
        # Stage 3: the precision-policy descriptor is the deployable artifact.
        artifact = OptimizedArtifact(
            name=base.name,
            weights=weights,
            activation_scales=_activation_scales(calib_set),
            precision_policy=policy,
            calibration_passes=attempt + 1,
            gate_ratio=float("nan"),
        )
        verdict = gate(artifact)
        if not isinstance(verdict, GateResult):
            verdict = GateResult(ratio=float(verdict))
        if verdict.ratio >= threshold:
            return OptimizedArtifact(
                name=artifact.name,
                weights=artifact.weights,
                activation_scales=artifact.activation_scales,
                precision_policy=artifact.precision_policy,
                calibration_passes=artifact.calibration_passes,
                gate_ratio=verdict.ratio,
            )
        calib_set.extend(np.asarray(s, dtype=np.float64) for s in verdict.failing_samples)
    raise GateFailedAfterRetries(
        f"quality gate stayed below {threshold} after {MAX_GATE_RETRIES} recalibrations"
    )
