"""Bundled synthetic fixtures: a toy "mini U-Net" (conv -> silu ->
skip_save -> conv -> skip_concat -> linear head) with seeded weights, plus
iterated-denoising activation capture. Lets the whole toolkit run without
any external model files."""

from __future__ import annotations

import numpy as np

from .netsim import PipelineDesc, _forward_once
from .tensorstore import CalibSet, Tensor

__all__ = [
    "mini_unet_desc",
    "mini_unet_weights",
    "make_inputs",
    "capture_timesteps",
    "weights_as_tensors",
]

IN_CHANNELS = 2
HIDDEN_CHANNELS = 4


def mini_unet_desc(with_silu: bool = True) -> PipelineDesc:
    """Toy U-Net pipeline; output shape equals input shape so the pipeline
    can be iterated. ``with_silu=False`` gives the all-affine variant whose
    arithmetic stays exact on integer-valued tensors."""
    layers = [
        {"op": "conv2d", "name": "conv1", "w": "conv1.w", "stride": 1, "padding": 1},
    ]
    if with_silu:
        layers.append({"op": "silu", "name": "act1"})
    layers += [
        {"op": "skip_save", "name": "save0", "slot": "s0"},
        {"op": "conv2d", "name": "conv2", "w": "conv2.w", "stride": 1, "padding": 1},
        {"op": "skip_concat", "name": "cat0", "slot": "s0", "axis": 1},
        {"op": "linear", "name": "head", "w": "head.w"},
    ]
    return PipelineDesc(layers)


def mini_unet_weights(seed: int = 0, gain: float = 1.0) -> dict[str, np.ndarray]:
    """Seeded Gaussian weights, normalized so one pass keeps signal scale
    roughly constant (stable under iteration)."""
    rng = np.random.default_rng(seed)
    c_in, c_h = IN_CHANNELS, HIDDEN_CHANNELS
    conv1 = rng.normal(size=(c_h, c_in, 3, 3)) / np.sqrt(9 * c_in)
    conv2 = rng.normal(size=(c_h, c_h, 3, 3)) / np.sqrt(9 * c_h)
    head = rng.normal(size=(c_in, 2 * c_h)) / np.sqrt(2 * c_h)
    return {
        "conv1.w": (gain * conv1).astype(np.float32),
        "conv2.w": (gain * conv2).astype(np.float32),
        "head.w": (gain * head).astype(np.float32),
    }


def make_inputs(seed: int, n: int, height: int = 6, width: int = 6) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [
        rng.normal(size=(1, IN_CHANNELS, height, width)).astype(np.float32)
        for _ in range(n)
    ]


def capture_timesteps(
    desc: PipelineDesc,
    weights: dict[str, np.ndarray],
    inputs: list[np.ndarray],
    timesteps: int,
) -> CalibSet:
    """Run each input through ``timesteps`` full-precision iterations,
    recording every conv/linear input and skip-concat half per step."""
    cs = CalibSet()
    for j, x0 in enumerate(inputs):
        x = np.asarray(x0, dtype=np.float32)
        for t in range(timesteps):
            capture: dict[str, np.ndarray] = {}
            x, _ = _forward_once(desc.layers, weights, None, x, capture)
            for name, data in capture.items():
                cs.add(name, t, j, data)
    return cs


def weights_as_tensors(weights: dict[str, np.ndarray]) -> list[Tensor]:
    return [Tensor(name, data) for name, data in sorted(weights.items())]
