"""Post-training quantization toolkit: minifloat/integer codecs, per-tensor
format search, learned rounding for 4-bit weights, and a reference layer
pipeline simulator."""

from .fpcodec import (
    FpFormat,
    IntQuantConfig,
    bias_from_cmax,
    default_bias,
    element_scale,
    element_scales,
    enumerate_codes,
    make_format,
    max_representable,
    quantize_fp,
    quantize_fp_masked,
    quantize_int,
)

__version__ = "0.1.0"

__all__ = [
    "FpFormat",
    "IntQuantConfig",
    "bias_from_cmax",
    "default_bias",
    "element_scale",
    "element_scales",
    "enumerate_codes",
    "make_format",
    "max_representable",
    "quantize_fp",
    "quantize_fp_masked",
    "quantize_int",
    "__version__",
]
