"""Shared fixtures: a synthetic mini U-Net model exported to disk."""

import numpy as np
import pytest

from fpquant.synthetic import (
    capture_timesteps,
    make_inputs,
    mini_unet_desc,
    mini_unet_weights,
    weights_as_tensors,
)
from fpquant.tensorstore import Tensor, write_container


@pytest.fixture(scope="session")
def synth_model(tmp_path_factory):
    """Paths to a complete on-disk toy model: weights, pipeline, init and
    calibration activation sets, and one input sample."""
    root = tmp_path_factory.mktemp("synth")
    desc = mini_unet_desc()
    weights = mini_unet_weights(seed=11)
    inputs = make_inputs(seed=5, n=4)

    model_path = root / "model.fpqt"
    write_container(model_path, weights_as_tensors(weights))

    pipe_path = root / "pipeline.json"
    desc.save(pipe_path)

    init = capture_timesteps(desc, weights, inputs[:2], timesteps=6)
    init_path = root / "init.fpqt"
    init.save(init_path)

    calib = capture_timesteps(desc, weights, inputs, timesteps=8)
    calib_path = root / "calib.fpqt"
    calib.save(calib_path)

    input_path = root / "input.fpqt"
    write_container(input_path, [Tensor("input", inputs[0])])

    return {
        "root": root,
        "desc": desc,
        "weights": weights,
        "model": str(model_path),
        "pipeline": str(pipe_path),
        "init": str(init_path),
        "calib": str(calib_path),
        "input": str(input_path),
    }
