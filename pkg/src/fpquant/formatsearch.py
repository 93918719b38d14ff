"""Per-tensor encoding and bias selection by exhaustive MSE grid search.

For each candidate encoding (e.g. E2M5/E3M4/E4M3/E5M2 for 8-bit) the
clipping maximum is swept over n evenly spaced magnitudes up to max|data|,
each converted to an exponent bias; the (encoding, bias) pair with the
lowest quantization MSE wins. Ties keep the earliest candidate in
enumeration order, so results are independent of evaluation scheduling.

Model-level assignment walks the layer list in order and fixes each
conv/linear weight and input-activation choice before moving on; with
full-precision captured activations the per-tensor objectives are
separable, so the greedy pass equals independent per-tensor search.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fpcodec import FpFormat, bias_from_cmax, default_bias, make_format, quantize_fp
from .tensorstore import CalibSet, QuantManifest, QuantRecord, Tensor

__all__ = [
    "SearchSpace",
    "SearchResult",
    "FP8_ENCODINGS",
    "FP4_ENCODINGS",
    "fp8_space",
    "fp4_space",
    "space_for_bitwidth",
    "bias_candidates",
    "search_tensor",
    "assign_model",
]

FP8_ENCODINGS: tuple[tuple[int, int], ...] = ((2, 5), (3, 4), (4, 3), (5, 2))
FP4_ENCODINGS: tuple[tuple[int, int], ...] = ((1, 2), (2, 1))

DEFAULT_BIAS_CANDIDATES = 111


@dataclass(frozen=True)
class SearchSpace:
    """Ordered encoding candidates and the bias grid resolution."""

    encodings: tuple[tuple[int, int], ...]
    n_bias: int = DEFAULT_BIAS_CANDIDATES

    def __post_init__(self) -> None:
        if self.n_bias < 1:
            raise ValueError("n_bias must be >= 1")
        if not self.encodings:
            raise ValueError("search space needs at least one encoding")

    @property
    def candidate_count(self) -> int:
        return len(self.encodings) * self.n_bias


def fp8_space(n_bias: int = DEFAULT_BIAS_CANDIDATES) -> SearchSpace:
    return SearchSpace(FP8_ENCODINGS, n_bias)


def fp4_space(n_bias: int = DEFAULT_BIAS_CANDIDATES) -> SearchSpace:
    return SearchSpace(FP4_ENCODINGS, n_bias)


def space_for_bitwidth(bitwidth: int, n_bias: int = DEFAULT_BIAS_CANDIDATES) -> SearchSpace:
    if bitwidth == 8:
        return fp8_space(n_bias)
    if bitwidth == 4:
        return fp4_space(n_bias)
    raise ValueError(f"unsupported bitwidth {bitwidth}, expected 4 or 8")


@dataclass(frozen=True)
class SearchResult:
    format: FpFormat
    mse: float
    candidate_index: int


def bias_candidates(data, encoding: tuple[int, int], n: int = DEFAULT_BIAS_CANDIDATES) -> list[float]:
    """Bias grid for one encoding: clipping maxima k*A/n for k=1..n with
    A = max|data|, each inverted to a bias. Strictly decreasing in k.

    An all-zero tensor yields the single default bias plus a warning.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    e, m = encoding
    arr = np.asarray(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("bias_candidates requires non-empty data")
    amax = float(np.max(np.abs(arr)))
    if amax == 0.0:
        warnings.warn("all-zero tensor: using the default bias", stacklevel=2)
        return [default_bias(e)]
    return [bias_from_cmax(e, m, k * amax / n) for k in range(1, n + 1)]


def search_tensor(data, space: SearchSpace) -> SearchResult:
    """Evaluate every (encoding, bias) candidate and return the MSE minimizer.

    The best-MSE accumulator starts at +inf and only strict improvement
    replaces it, so ties keep the earliest candidate (outer loop encodings
    in listed order, inner loop biases in generated order).
    """
    arr = np.asarray(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("search_tensor requires non-empty data")
    flat = arr.ravel()
    best_mse = math.inf
    best_fmt: FpFormat | None = None
    best_idx = -1
    idx = 0
    for e, m in space.encodings:
        for bias in bias_candidates(flat, (e, m), space.n_bias):
            fmt = make_format(e, m, bias)
            q = quantize_fp(flat, fmt).astype(np.float64)
            err = float(np.mean((q - flat) ** 2))
            if err < best_mse:
                best_mse = err
                best_fmt = fmt
                best_idx = idx
            idx += 1
    assert best_fmt is not None
    return SearchResult(best_fmt, best_mse, best_idx)


_QUANTIZABLE_OPS = ("conv2d", "linear")
_PASSTHROUGH_OPS = ("groupnorm", "silu")


def _layer_weight_names(layer: dict) -> list[str]:
    names = []
    for key in ("w", "gamma", "beta"):
        if layer.get(key):
            names.append(layer[key])
    return names


def assign_model(
    weights: list[Tensor],
    init_acts: CalibSet,
    order: list[dict],
    space_w: SearchSpace,
    space_a: SearchSpace,
) -> QuantManifest:
    """Assign per-tensor formats layer by layer, in the order given.

    Conv/linear layers get an fp record for their weight tensor (searched
    against the weight's own values) and for their input activation
    (searched against the pooled initialization samples captured under
    ``<layer>.in``). Skip-concat layers get separate records for the saved
    and incoming halves (``<layer>.skip`` / ``<layer>.in``). Normalization
    and activation-function tensors are recorded as passthrough.
    """
    by_name = {t.name: t for t in weights}
    records: list[QuantRecord] = []

    def activation_record(act_name: str) -> QuantRecord:
        try:
            pooled = init_acts.pooled(act_name)
        except KeyError as exc:
            raise KeyError(f"no initialization activations for {act_name!r}") from exc
        res = search_tensor(pooled, space_a)
        return QuantRecord(
            act_name, "activation", "fp",
            e_bits=res.format.e_bits, m_bits=res.format.m_bits, bias=res.format.bias,
        )

    prev_op = None
    for layer in order:
        op = layer["op"]
        if op in _QUANTIZABLE_OPS:
            wname = layer["w"]
            if wname not in by_name:
                raise KeyError(f"weight tensor {wname!r} not found in model")
            res = search_tensor(by_name[wname], space_w)
            records.append(
                QuantRecord(
                    wname, "weight", "fp",
                    e_bits=res.format.e_bits, m_bits=res.format.m_bits, bias=res.format.bias,
                )
            )
            # a layer fed directly by a skip concat consumes the
            # split-quantized halves; it gets no input record of its own
            if prev_op != "skip_concat":
                records.append(activation_record(f"{layer['name']}.in"))
        elif op == "skip_concat":
            records.append(activation_record(f"{layer['name']}.skip"))
            records.append(activation_record(f"{layer['name']}.in"))
        elif op in _PASSTHROUGH_OPS:
            for wname in _layer_weight_names(layer):
                if wname not in by_name:
                    raise KeyError(f"weight tensor {wname!r} not found in model")
                records.append(QuantRecord(wname, "weight", "passthrough"))
        elif op == "skip_save":
            continue  # leaves the flowing tensor unchanged; prev_op keeps its value
        else:
            raise ValueError(f"unknown layer op {op!r}")
        prev_op = op
    return QuantManifest(records)
