"""Exact simulation of minifloat and uniform integer quantization.

A minifloat format has one sign bit, ``e_bits`` exponent bits, ``m_bits``
mantissa bits and a real-valued exponent bias. The exponent field ``p``
runs from 0 (subnormals) to ``2**e_bits - 1``; no codes are reserved for
infinity or NaN, so the largest representable magnitude is

    c = (2 - 2**-m_bits) * 2**(2**e_bits - bias - 1)

Quantization snaps a value to the nearest grid point (ties to even on the
mantissa-grid index), after clipping to [-c, c]. All scales and code
values are derived from a single per-format power of two (``2**-bias``)
shifted with ``ldexp``, which keeps the arithmetic self-consistent: every
quantized output is bit-identical to a member of ``enumerate_codes`` and
quantization is idempotent, including for non-integer biases.

Tensors are stored as 32-bit floats; all internal arithmetic is 64-bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FpFormat",
    "IntQuantConfig",
    "make_format",
    "default_bias",
    "max_representable",
    "bias_from_cmax",
    "enumerate_codes",
    "element_scale",
    "element_scales",
    "quantize_fp",
    "quantize_fp_masked",
    "quantize_int",
]


@dataclass(frozen=True)
class FpFormat:
    """A minifloat encoding: exponent bits, mantissa bits, real exponent bias."""

    e_bits: int
    m_bits: int
    bias: float

    def __post_init__(self) -> None:
        if not isinstance(self.e_bits, int) or self.e_bits < 1:
            raise ValueError(f"e_bits must be an integer >= 1, got {self.e_bits!r}")
        if not isinstance(self.m_bits, int) or self.m_bits < 0:
            raise ValueError(f"m_bits must be an integer >= 0, got {self.m_bits!r}")
        object.__setattr__(self, "bias", float(self.bias))
        if not math.isfinite(self.bias):
            raise ValueError("bias must be finite")

    @property
    def nominal_bits(self) -> int:
        """Total bitwidth including the sign bit."""
        return 1 + self.e_bits + self.m_bits

    @property
    def name(self) -> str:
        return f"E{self.e_bits}M{self.m_bits}"

    def __str__(self) -> str:
        return f"{self.name}(bias={self.bias:g})"


@dataclass(frozen=True)
class IntQuantConfig:
    """Uniform affine integer quantization to ``bits`` levels."""

    bits: int

    def __post_init__(self) -> None:
        if not isinstance(self.bits, int) or self.bits < 2:
            raise ValueError(f"bits must be an integer >= 2, got {self.bits!r}")


def default_bias(e_bits: int) -> float:
    """Conventional exponent bias for an ``e_bits``-bit exponent field."""
    return float(2 ** (e_bits - 1))


def make_format(e_bits: int, m_bits: int, bias: float | None = None) -> FpFormat:
    """Build a validated format; ``bias=None`` selects the default 2**(e-1)."""
    if not isinstance(e_bits, int) or e_bits < 1:
        raise ValueError(f"e_bits must be an integer >= 1, got {e_bits!r}")
    if not isinstance(m_bits, int) or m_bits < 0:
        raise ValueError(f"m_bits must be an integer >= 0, got {m_bits!r}")
    if bias is None:
        bias = default_bias(e_bits)
    return FpFormat(e_bits, m_bits, float(bias))


def _pow2_neg_bias(bias: float) -> float:
    """2**-bias, split so that integer bias shifts stay exact ldexp shifts."""
    ip = math.floor(bias)
    frac = bias - ip
    return math.ldexp(2.0 ** -frac, -int(ip))


def max_representable(fmt: FpFormat) -> float:
    """Largest magnitude the format can hold (its clipping maximum)."""
    unit = _pow2_neg_bias(fmt.bias)
    top = (1 << fmt.e_bits) - 1
    return math.ldexp(unit, top - fmt.m_bits) * float((1 << (fmt.m_bits + 1)) - 1)


def bias_from_cmax(e_bits: int, m_bits: int, cmax: float) -> float:
    """Exponent bias that makes ``cmax`` the format's clipping maximum.

    Analytically ``(2**e - 1) - log2(cmax / (2 - 2**-m))``; the result is
    then polished over neighbouring floats so it is the best representable
    inverse of :func:`max_representable` (exact when ``cmax`` is itself a
    representable maximum).
    """
    if not cmax > 0:
        raise ValueError(f"cmax must be > 0, got {cmax!r}")
    b0 = (2.0 ** e_bits - 1.0) - math.log2(cmax / (2.0 - 2.0 ** -m_bits))

    def cmax_of(b: float) -> float:
        return max_representable(FpFormat(e_bits, m_bits, b))

    # bisect to the best representable bias: cmax_of is strictly decreasing
    # in b, and the analytic seed can be off by ~ulp(log2 cmax), which is
    # many float steps when |b| is small
    tol = 2.0 ** -44 * max(2.0 ** e_bits, abs(b0), 1.0)
    lo, hi = b0 - tol, b0 + tol
    while cmax_of(lo) < cmax:
        lo -= tol
    while cmax_of(hi) > cmax:
        hi += tol
    while True:
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if cmax_of(mid) >= cmax:
            lo = mid
        else:
            hi = mid
    return lo if abs(cmax_of(lo) - cmax) <= abs(cmax_of(hi) - cmax) else hi


def enumerate_codes(fmt: FpFormat) -> np.ndarray:
    """All representable values of ``fmt``, sorted ascending.

    Subnormals are ``+-2**(1-bias) * k/2**m`` for k in [0, 2**m), normals
    ``+-2**(p-bias) * (1 + k/2**m)`` for p in [1, 2**e). Intended for small
    formats (payloads of about 10 bits or fewer).
    """
    unit = _pow2_neg_bias(fmt.bias)
    m = fmt.m_bits
    pos: list[float] = []
    sub_scale = math.ldexp(unit, 1 - m)
    pos.extend(sub_scale * k for k in range(1 << m))
    for p in range(1, 1 << fmt.e_bits):
        s_p = math.ldexp(unit, p - m)
        pos.extend(s_p * ((1 << m) + k) for k in range(1 << m))
    arr = np.asarray(pos, dtype=np.float64)
    return np.unique(np.concatenate([-arr, arr]))


def element_scales(x: np.ndarray, fmt: FpFormat) -> np.ndarray:
    """Per-element grid step for already-clipped values (vectorized).

    The step is ``2**(t - bias - m)`` with ``t = floor(log2|x| + bias)``
    when that exceeds 1, else the subnormal step ``2**(1 - bias - m)``;
    zero takes the subnormal branch.
    """
    arr = np.asarray(x, dtype=np.float64)
    ax = np.abs(arr)
    man, ex = np.frexp(ax)
    t = np.ones_like(ax)
    nz = ax > 0.0
    # log2|x| = ex + log2(man) with man in [0.5, 1); the split keeps t
    # stable when data and bias are shifted by the same power of two.
    t[nz] = np.floor((ex[nz] + fmt.bias) + np.log2(man[nz]))
    t = np.maximum(t, 1.0)
    unit = _pow2_neg_bias(fmt.bias)
    return np.ldexp(unit, t.astype(np.int64) - fmt.m_bits)


def element_scale(x: float, fmt: FpFormat) -> float:
    """Scalar convenience wrapper around :func:`element_scales`."""
    return float(element_scales(np.asarray([x]), fmt)[0])


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{op} requires finite inputs")


def quantize_fp(x: np.ndarray, fmt: FpFormat) -> np.ndarray:
    """Quantize to the format grid: clip to [-c, c], round to nearest code.

    Rounding is ties-to-even on the mantissa-grid index. Output dtype is
    float32; every output element is a member of ``enumerate_codes(fmt)``.
    """
    arr = np.array(x, dtype=np.float64)
    _check_finite(arr, "quantize_fp")
    c = max_representable(fmt)
    np.clip(arr, -c, c, out=arr)
    s = element_scales(arr, fmt)
    q = np.rint(arr / s) * s
    np.clip(q, -c, c, out=q)
    return q.astype(np.float32)


def quantize_fp_masked(x: np.ndarray, fmt: FpFormat, round_up: np.ndarray) -> np.ndarray:
    """Quantize with an explicit per-element rounding direction.

    ``round_up`` holds 0 (floor) or 1 (ceil) per element; the value becomes
    ``clamp(s * (floor(x'/s) + round_up), -c, c)`` on the same grid that
    :func:`quantize_fp` uses.
    """
    arr = np.array(x, dtype=np.float64)
    _check_finite(arr, "quantize_fp_masked")
    up = np.asarray(round_up, dtype=np.float64)
    if up.shape != arr.shape:
        raise ValueError(f"mask shape {up.shape} != data shape {arr.shape}")
    if not np.all((up == 0.0) | (up == 1.0)):
        raise ValueError("rounding mask must contain only 0 or 1")
    c = max_representable(fmt)
    np.clip(arr, -c, c, out=arr)
    s = element_scales(arr, fmt)
    q = (np.floor(arr / s) + up) * s
    np.clip(q, -c, c, out=q)
    return q.astype(np.float32)


def quantize_int(x: np.ndarray, cfg: IntQuantConfig) -> np.ndarray:
    """Uniform affine integer quantization over the tensor's min/max range.

    ``s = (max - min) / (2**bits - 1)``, ``z = -round(min / s)``, output
    ``s * (clamp(round(x/s) + z; 0, 2**bits - 1) - z)`` with ties-to-even
    rounding. A constant tensor is returned unchanged with a
    "degenerate range" warning.
    """
    arr = np.array(x, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("quantize_int requires a non-empty tensor")
    _check_finite(arr, "quantize_int")
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        warnings.warn("degenerate range: constant tensor returned unchanged", stacklevel=2)
        return np.array(x, dtype=np.float32)
    levels = float(2 ** cfg.bits - 1)
    s = (hi - lo) / levels
    z = -np.rint(lo / s)
    q = np.clip(np.rint(arr / s) + z, 0.0, levels) - z
    return (s * q).astype(np.float32)
