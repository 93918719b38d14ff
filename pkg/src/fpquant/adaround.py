"""Learned rounding for low-bitwidth weight quantization.

Rounding to nearest is replaced by floor plus a sigmoid gate: each weight
element gets a free parameter alpha, and the soft-quantized weight is

    clamp(s_i * (floor(w'_i / s_i) + sigmoid(alpha_i)); -c, c)

with per-element scales s_i and floors frozen from the clipped
full-precision weights. Alphas are optimized by stochastic gradient
descent on the layer-output MSE against the full-precision layer, plus a
regularizer ``sum(1 - (2*|sigmoid(alpha) - 0.5|)**20)`` that pushes each
gate toward 0 or 1. At the end, gates below 0.5 round down and the rest
round up, which lands every weight back on the format grid.

Elements clipped at +-c are pinned: they get zero data gradient and are
excluded from the regularizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fpcodec import FpFormat, element_scales, max_representable
from .netsim import _im2col
from .tensorstore import CalibSet, Tensor

__all__ = [
    "RoundingState",
    "LearnConfig",
    "init_state",
    "soft_quantize",
    "reg_term",
    "loss_and_grad",
    "train",
    "finalize",
]

_FRAC_CLAMP = 1e-4


@dataclass
class RoundingState:
    """Per-element rounding parameters for one weight tensor."""

    alpha: np.ndarray
    fmt: FpFormat
    frozen_scale: np.ndarray
    frozen_floor: np.ndarray
    clip_mask: np.ndarray
    trace: list = field(default_factory=list, repr=False, compare=False)


@dataclass(frozen=True)
class LearnConfig:
    # the per-alpha curvature of the data term is ~1e-3 at desk scale, so
    # useful steps need a step size near its inverse; the small reg weight
    # keeps the boundary push from overruling data-driven corrections
    iterations: int = 6000
    step_size: float = 500.0
    batch_size: int = 16
    reg_weight: float = 1.5e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def init_state(w, fmt: FpFormat) -> RoundingState:
    """Freeze scales/floors from the clipped weights; set each alpha to the
    logit of the fractional remainder so the soft weight starts at the
    clipped full-precision value."""
    arr = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    c = max_representable(fmt)
    clipped = np.clip(arr, -c, c)
    s = element_scales(clipped, fmt)
    ratio = clipped / s
    floor = np.floor(ratio)
    frac = np.clip(ratio - floor, _FRAC_CLAMP, 1.0 - _FRAC_CLAMP)
    alpha = np.log(frac / (1.0 - frac))
    clip_mask = (np.abs(arr) > c).astype(np.float64)
    return RoundingState(alpha, fmt, s, floor, clip_mask)


def soft_quantize(state: RoundingState) -> np.ndarray:
    """Soft-quantized weights: floor plus the sigmoid gate, clamped to the
    format range; clipped elements are pinned at +-c regardless of alpha."""
    c = max_representable(state.fmt)
    gate = _sigmoid(state.alpha)
    val = np.clip(state.frozen_scale * (state.frozen_floor + gate), -c, c)
    pinned = state.frozen_scale * state.frozen_floor
    return np.where(state.clip_mask == 1.0, pinned, val)


def reg_term(alpha: np.ndarray, reg_weight: float) -> float:
    """``reg_weight * sum(1 - (2*|sigmoid(alpha) - 0.5|)**20)``."""
    gate = _sigmoid(np.asarray(alpha, dtype=np.float64))
    return float(reg_weight * np.sum(1.0 - (2.0 * np.abs(gate - 0.5)) ** 20))


def _stack_batch(a_batch) -> np.ndarray:
    arrs = [np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in a_batch]
    if not arrs:
        raise ValueError("empty activation batch")
    return np.concatenate(arrs, axis=0)


def _delta_forward_and_wgrad(delta_w, a, layer):
    """Layer output difference D = f(W + delta) - f(W) for a layer linear in
    its weights, and the operator mapping dL/dD back to dL/d(delta_w)."""
    op = layer["op"]
    if op == "linear":
        if a.ndim == 4:
            # channel-wise linear on feature maps: fold spatial dims into batch
            a = np.moveaxis(a, 1, -1).reshape(-1, a.shape[1])
        d = a @ delta_w.T

        def wgrad(g):
            return g.T @ a

        return d, wgrad
    if op == "conv2d":
        stride = layer.get("stride", 1)
        padding = layer.get("padding", 0)
        co, ci, kh, kw = delta_w.shape
        b, ci_a, h, wd = a.shape
        if ci != ci_a:
            raise ValueError(f"conv2d channel mismatch: weight {ci}, input {ci_a}")
        oh = (h + 2 * padding - kh) // stride + 1
        ow = (wd + 2 * padding - kw) // stride + 1
        if oh < 1 or ow < 1:
            raise ValueError("kernel does not fit padded input")
        a_pad = np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        col = _im2col(a_pad, kh, kw, stride, oh, ow).reshape(b * oh * ow, ci * kh * kw)
        d = (col @ delta_w.reshape(co, -1).T).reshape(b, oh, ow, co)

        def wgrad(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, co)
            return (g2.T @ col).reshape(co, ci, kh, kw)

        return d.transpose(0, 3, 1, 2), wgrad
    raise ValueError(f"rounding learning supports linear/conv2d layers, not {op!r}")


def loss_and_grad(
    state: RoundingState,
    w,
    a_batch,
    layer: dict,
    cfg: LearnConfig,
) -> tuple[float, np.ndarray]:
    """Objective and its exact derivative with respect to alpha.

    Objective: mean((f(W_soft) - f(W))**2) over the batch outputs, plus the
    boundary regularizer over non-clipped elements. The data gradient flows
    through the layer's linearity in the weights times s_i * sigmoid'(alpha_i),
    and is zero for clipped or clamp-saturated elements.
    """
    w64 = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if w64.shape != state.alpha.shape:
        raise ValueError(f"weight shape {w64.shape} != state shape {state.alpha.shape}")
    a = _stack_batch(a_batch)
    gate = _sigmoid(state.alpha)
    soft = soft_quantize(state)
    d, wgrad = _delta_forward_and_wgrad(soft - w64, a, layer)
    n = d.size
    loss_data = float(np.sum(d * d) / n)

    dl_dw = wgrad(2.0 * d / n)
    c = max_representable(state.fmt)
    raw = state.frozen_scale * (state.frozen_floor + gate)
    live = (state.clip_mask == 0.0) & (raw > -c) & (raw < c)
    sig_prime = gate * (1.0 - gate)
    grad = np.where(live, dl_dw * state.frozen_scale * sig_prime, 0.0)

    free = state.clip_mask == 0.0
    dev = 2.0 * np.abs(gate - 0.5)
    loss_reg = float(cfg.reg_weight * np.sum(np.where(free, 1.0 - dev ** 20, 0.0)))
    reg_grad = -cfg.reg_weight * 20.0 * dev ** 19 * 2.0 * np.sign(gate - 0.5) * sig_prime
    grad = grad + np.where(free, reg_grad, 0.0)
    return loss_data + loss_reg, grad


def _snapped_data_loss(state: RoundingState, w64, a, layer: dict) -> float:
    """Layer-output MSE of the hard-rounded weights over ``a``."""
    wq, _ = finalize(state)
    d, _ = _delta_forward_and_wgrad(wq.astype(np.float64) - w64, a, layer)
    return float(np.sum(d * d) / d.size)


def train(
    state: RoundingState,
    w,
    calib: CalibSet,
    layer: dict,
    cfg: LearnConfig,
) -> RoundingState:
    """Stochastic gradient descent over the calibration set.

    Each iteration draws ``batch_size`` samples with the seeded generator
    and takes one fixed-size step. The full calibration set serves as a
    fixed evaluation set: the soft objective is recorded per iteration in
    ``trace``, and the returned state carries the alphas whose hard-rounded
    weights scored the lowest calibration output error. The initial state
    is always a candidate, and its hard rounding equals round-to-nearest,
    so the result never finalizes worse than round-to-nearest on the
    calibration data.
    """
    input_name = f"{layer['name']}.in"
    keys = sorted(k for k in calib.entries if k[0] == input_name)
    if not keys:
        raise ValueError(f"calibration set has no samples for {input_name!r}")
    samples = [calib.entries[k] for k in keys]
    full = _stack_batch(samples)
    w64 = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)

    cur = replace(state, alpha=state.alpha.copy(), trace=[])
    obj0, _ = loss_and_grad(cur, w, [full], layer, cfg)
    cur.trace.append(obj0)
    best_alpha = cur.alpha.copy()
    best_snap = _snapped_data_loss(cur, w64, full, layer)
    replace_draws = cfg.batch_size > len(samples)
    for _ in range(cfg.iterations):
        idx = rng.choice(len(samples), size=cfg.batch_size, replace=replace_draws)
        batch = [samples[i] for i in idx]
        _, grad = loss_and_grad(cur, w, batch, layer, cfg)
        cur.alpha -= cfg.step_size * grad
        obj, _ = loss_and_grad(cur, w, [full], layer, cfg)
        cur.trace.append(obj)
        snap = _snapped_data_loss(cur, w64, full, layer)
        if snap < best_snap:
            best_snap = snap
            best_alpha = cur.alpha.copy()
    return replace(cur, alpha=best_alpha)


def finalize(state: RoundingState) -> tuple[np.ndarray, np.ndarray]:
    """Snap gates to hard rounding decisions.

    mask is 1 where sigmoid(alpha) >= 0.5 (round up) else 0; the quantized
    weight is ``clamp(s * (floor + mask), -c, c)``, a representable code.
    Returns (weights float32, mask float32).
    """
    c = max_representable(state.fmt)
    mask = (_sigmoid(state.alpha) >= 0.5).astype(np.float64)
    wq = np.clip(state.frozen_scale * (state.frozen_floor + mask), -c, c)
    return wq.astype(np.float32), mask.astype(np.float32)
