"""Reference forward pipeline: linear, conv2d, SiLU, group norm, and
U-Net-style skip save/concat, with optional simulated quantization.

Layer math accumulates in 64-bit and stores 32-bit. A quantized run
quantizes conv/linear weights per their manifest records (applying a
learned rounding mask when referenced) and each conv/linear input per its
activation record; at a skip concatenation the saved tensor and the
incoming tensor are quantized separately with their own records, and the
following layer consumes the concatenation as-is. Normalization and SiLU
always run in full precision.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import fpcodec
from .tensorstore import QuantManifest, QuantRecord, mse as _mse, sqnr_db as _sqnr, sparsity as _sparsity

__all__ = [
    "PipelineDesc",
    "LayerStat",
    "RunReport",
    "linear_forward",
    "conv2d_forward",
    "silu",
    "group_norm",
    "run_pipeline",
    "forward_capture",
]

_OPS = ("linear", "conv2d", "silu", "groupnorm", "skip_save", "skip_concat")


@dataclass
class PipelineDesc:
    """Ordered layer records; see module docstring for quantization points."""

    layers: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        for layer in self.layers:
            op = layer.get("op")
            if op not in _OPS:
                raise ValueError(f"unknown layer op {op!r}")
            if "name" not in layer:
                raise ValueError(f"layer {layer} has no name")
            if op in ("linear", "conv2d") and "w" not in layer:
                raise ValueError(f"layer {layer['name']!r} has no weight reference")
            if op in ("skip_save", "skip_concat") and "slot" not in layer:
                raise ValueError(f"layer {layer['name']!r} has no slot")

    def save(self, path: str | os.PathLike) -> None:
        tmp = f"{os.fspath(path)}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"version": 1, "layers": self.layers}, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PipelineDesc":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(doc["layers"])


@dataclass
class LayerStat:
    step: int
    name: str
    mse: float
    sqnr_db: float
    output_sparsity: float


@dataclass
class RunReport:
    layers: list[LayerStat]
    per_step_mse: list[float]
    output: np.ndarray
    reference_output: np.ndarray


def linear_forward(w: np.ndarray, bias: np.ndarray | None, a: np.ndarray) -> np.ndarray:
    """Affine map: a (batch, in) times w (out, in) transposed, plus bias."""
    w64 = np.asarray(w, dtype=np.float64)
    a64 = np.asarray(a, dtype=np.float64)
    if a64.ndim != 2 or w64.ndim != 2 or a64.shape[1] != w64.shape[1]:
        raise ValueError(f"linear shapes incompatible: w{w64.shape}, a{a64.shape}")
    out = a64 @ w64.T
    if bias is not None:
        b64 = np.asarray(bias, dtype=np.float64)
        if b64.shape != (w64.shape[0],):
            raise ValueError(f"bias shape {b64.shape} != ({w64.shape[0]},)")
        out = out + b64
    return out.astype(np.float32)


def _im2col(a_pad: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather conv patches: (b, ci, h, w) -> (b, oh, ow, ci*kh*kw)."""
    b, ci = a_pad.shape[:2]
    col = np.empty((b, ci, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = a_pad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(b, oh, ow, ci * kh * kw)


def conv2d_forward(
    w: np.ndarray,
    bias: np.ndarray | None,
    a: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Cross-correlation with zero padding; output spatial dims follow
    floor((h + 2p - kh)/stride) + 1."""
    w64 = np.asarray(w, dtype=np.float64)
    a64 = np.asarray(a, dtype=np.float64)
    if w64.ndim != 4 or a64.ndim != 4:
        raise ValueError(f"conv2d expects 4-d tensors, got w{w64.shape}, a{a64.shape}")
    co, ci, kh, kw = w64.shape
    b, ci_a, h, wd = a64.shape
    if ci != ci_a:
        raise ValueError(f"conv2d channel mismatch: weight {ci}, input {ci_a}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit padded input {h}x{wd}")
    a_pad = np.pad(a64, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = _im2col(a_pad, kh, kw, stride, oh, ow)
    out = col @ w64.reshape(co, ci * kh * kw).T
    if bias is not None:
        b64 = np.asarray(bias, dtype=np.float64)
        if b64.shape != (co,):
            raise ValueError(f"bias shape {b64.shape} != ({co},)")
        out = out + b64
    return out.transpose(0, 3, 1, 2).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), always full precision."""
    x64 = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x64)
    pos = x64 >= 0
    out[pos] = x64[pos] / (1.0 + np.exp(-x64[pos]))
    ex = np.exp(x64[~pos])
    out[~pos] = x64[~pos] * ex / (1.0 + ex)
    return out.astype(np.float32)


def group_norm(
    x: np.ndarray,
    groups: int,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Normalize per (sample, group) to zero mean / unit variance, then
    scale and shift per channel. Never quantized."""
    x64 = np.asarray(x, dtype=np.float64)
    if x64.ndim < 2:
        raise ValueError("group_norm expects at least (batch, channels)")
    c = x64.shape[1]
    if c % groups != 0:
        raise ValueError(f"groups={groups} does not divide channels={c}")
    shape = x64.shape
    grouped = x64.reshape(shape[0], groups, c // groups, *shape[2:])
    axes = tuple(range(2, grouped.ndim))
    mean = grouped.mean(axis=axes, keepdims=True)
    var = grouped.var(axis=axes, keepdims=True)
    normed = ((grouped - mean) / np.sqrt(var + eps)).reshape(shape)
    bshape = (1, c) + (1,) * (x64.ndim - 2)
    g64 = np.asarray(gamma, dtype=np.float64).reshape(bshape)
    b64 = np.asarray(beta, dtype=np.float64).reshape(bshape)
    return (normed * g64 + b64).astype(np.float32)


def _linear_on(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """Linear over the channel axis; 4-d inputs fold spatial dims into batch."""
    if x.ndim == 2:
        return linear_forward(w, bias, x)
    if x.ndim == 4:
        b, c, h, wd = x.shape
        flat = np.moveaxis(x, 1, -1).reshape(b * h * wd, c)
        out = linear_forward(w, bias, flat)
        return np.moveaxis(out.reshape(b, h, wd, -1), -1, 1)
    raise ValueError(f"linear layer cannot consume rank-{x.ndim} input")


def _quantize_by_record(x: np.ndarray, rec: QuantRecord | None,
                        mask: np.ndarray | None = None) -> np.ndarray:
    if rec is None or rec.mode == "passthrough":
        return np.asarray(x, dtype=np.float32)
    if rec.mode == "fp":
        fmt = fpcodec.make_format(rec.e_bits, rec.m_bits, rec.bias)
        if mask is not None:
            return fpcodec.quantize_fp_masked(x, fmt, mask)
        return fpcodec.quantize_fp(x, fmt)
    return fpcodec.quantize_int(x, fpcodec.IntQuantConfig(rec.bits))


def _resolve_quantized_weights(
    weights: dict[str, np.ndarray],
    manifest: QuantManifest,
    masks: dict[str, np.ndarray] | None,
) -> dict[str, np.ndarray]:
    out = dict(weights)
    for rec in manifest.records:
        if rec.kind != "weight" or rec.name not in weights:
            continue
        mask = None
        if rec.rounding_mask_ref is not None:
            if masks is None or rec.rounding_mask_ref not in masks:
                raise KeyError(f"rounding mask {rec.rounding_mask_ref!r} not provided")
            mask = masks[rec.rounding_mask_ref]
        out[rec.name] = _quantize_by_record(weights[rec.name], rec, mask)
    return out


def _forward_once(
    layers: list[dict],
    weights: dict[str, np.ndarray],
    recs: dict[str, QuantRecord] | None,
    x: np.ndarray,
    capture: dict[str, np.ndarray] | None = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """One pass over the layer list. ``recs`` non-None quantizes activations
    at conv/linear inputs and at skip-concat halves. ``capture`` collects
    pre-quantization inputs by record name."""

    def wref(name: str) -> np.ndarray:
        if name not in weights:
            raise KeyError(f"weight tensor {name!r} not found")
        return weights[name]

    def maybe_quant(val: np.ndarray, rec_name: str) -> np.ndarray:
        if capture is not None:
            capture[rec_name] = np.asarray(val, dtype=np.float32).copy()
        if recs is None:
            return val
        return _quantize_by_record(val, recs.get(rec_name))

    slots: dict[str, np.ndarray] = {}
    outputs: dict[str, np.ndarray] = {}
    fresh_from_concat = False
    for layer in layers:
        op = layer["op"]
        name = layer["name"]
        if op == "linear" or op == "conv2d":
            if not fresh_from_concat:
                x = maybe_quant(x, f"{name}.in")
            bias = wref(layer["b"]) if layer.get("b") else None
            if op == "linear":
                x = _linear_on(x, wref(layer["w"]), bias)
            else:
                x = conv2d_forward(
                    wref(layer["w"]), bias, x,
                    stride=layer.get("stride", 1), padding=layer.get("padding", 0),
                )
            outputs[name] = x
            fresh_from_concat = False
        elif op == "silu":
            x = silu(x)
            fresh_from_concat = False
        elif op == "groupnorm":
            x = group_norm(x, layer["groups"], wref(layer["gamma"]), wref(layer["beta"]))
            fresh_from_concat = False
        elif op == "skip_save":
            slots[layer["slot"]] = x
        elif op == "skip_concat":
            slot = layer["slot"]
            if slot not in slots:
                raise ValueError(f"skip_concat {name!r}: slot {slot!r} was never saved")
            saved = maybe_quant(slots[slot], f"{name}.skip")
            incoming = maybe_quant(x, f"{name}.in")
            x = np.concatenate([saved, incoming], axis=layer.get("axis", 1))
            # the following conv/linear consumes the split-quantized concat
            fresh_from_concat = recs is not None
    return np.asarray(x, dtype=np.float32), outputs


def run_pipeline(
    desc: PipelineDesc,
    weights: dict[str, np.ndarray],
    manifest: QuantManifest | None,
    input: np.ndarray,
    steps: int = 1,
    masks: dict[str, np.ndarray] | None = None,
) -> RunReport:
    """Run the pipeline quantized per ``manifest`` (or full precision when
    None) against an internal full-precision reference on identical inputs.

    With steps > 1 each run feeds its own output back as the next step's
    input; per-step output MSE is recorded against the reference trajectory.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    recs = manifest.by_name() if manifest is not None else None
    q_weights = (
        _resolve_quantized_weights(weights, manifest, masks) if manifest is not None else weights
    )
    x_ref = np.asarray(input, dtype=np.float32)
    x_q = x_ref
    stats: list[LayerStat] = []
    per_step: list[float] = []
    for step in range(steps):
        x_ref, ref_outs = _forward_once(desc.layers, weights, None, x_ref)
        x_q, q_outs = _forward_once(desc.layers, q_weights, recs, x_q)
        for name, ref_out in ref_outs.items():
            q_out = q_outs[name]
            if ref_out.shape != q_out.shape:
                raise ValueError(f"layer {name!r}: output shape diverged")
            try:
                s = _sqnr(ref_out, q_out)
            except ValueError:
                s = math.nan
            stats.append(LayerStat(step, name, _mse(ref_out, q_out), s, _sparsity(q_out)))
        per_step.append(_mse(x_ref, x_q))
    return RunReport(stats, per_step, x_q, x_ref)


def forward_capture(
    desc: PipelineDesc,
    weights: dict[str, np.ndarray],
    manifest: QuantManifest | None,
    input: np.ndarray,
) -> dict[str, np.ndarray]:
    """Pre-quantization inputs of every conv/linear layer and skip-concat
    half, keyed by record name, under an optionally quantized run."""
    recs = manifest.by_name() if manifest is not None else None
    q_weights = (
        _resolve_quantized_weights(weights, manifest, None) if manifest is not None else weights
    )
    capture: dict[str, np.ndarray] = {}
    _forward_once(desc.layers, q_weights, recs, np.asarray(input, dtype=np.float32), capture)
    return capture
