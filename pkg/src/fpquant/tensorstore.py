"""Tensor container I/O, calibration datasets, and error/sparsity metrics.

Container format (binary, little-endian): magic ``FPQT``, u32 version = 1,
u64 tensor count; then per tensor: u32 name byte length, UTF-8 name,
u8 dtype (0 = float32), u8 rank, rank x u64 dims, row-major float32
payload. Calibration sets reuse the container with entries named
``tensor@t<timestep>#<sample>``. Quantization manifests are JSON; the
real-valued exponent bias is written with 17 significant digits so it
round-trips exactly.
"""

from __future__ import annotations

import json
import math
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "CalibSet",
    "QuantRecord",
    "QuantManifest",
    "ContainerError",
    "BadMagicError",
    "VersionError",
    "TruncatedError",
    "ShapeError",
    "ManifestError",
    "write_container",
    "read_container",
    "write_manifest",
    "read_manifest",
    "mse",
    "sqnr_db",
    "sparsity",
    "sample_uniform",
]

MAGIC = b"FPQT"
VERSION = 1
_DTYPE_F32 = 0


class ContainerError(Exception):
    """Base error for malformed tensor containers."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ShapeError(ContainerError):
    """Shape/length inconsistency in a tensor or its payload."""


class ManifestError(Exception):
    """Malformed quantization manifest."""


@dataclass
class Tensor:
    """Named n-dimensional float32 array, row-major."""

    name: str
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {self.name!r} contains non-finite elements")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def _as_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def write_container(path: str | os.PathLike, tensors: list[Tensor]) -> None:
    """Write tensors to ``path`` atomically (temp file + rename)."""
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<IQ", VERSION, len(tensors))
    for t in tensors:
        if not isinstance(t, Tensor):
            t = Tensor(getattr(t, "name", "unnamed"), _as_array(t))
        name = t.name.encode("utf-8")
        arr = t.data
        payload += struct.pack("<I", len(name))
        payload += name
        payload += struct.pack("<BB", _DTYPE_F32, arr.ndim)
        for dim in arr.shape:
            payload += struct.pack("<Q", dim)
        payload += arr.astype("<f4", copy=False).tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(payload))
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"container truncated: need {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str | os.PathLike) -> list[Tensor]:
    """Read a container; raises a distinct error per corruption mode."""
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    if cur.take(4) != MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    (version,) = cur.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    (count,) = cur.unpack("<Q")
    out: list[Tensor] = []
    for _ in range(count):
        (name_len,) = cur.unpack("<I")
        name = cur.take(name_len).decode("utf-8")
        dtype, rank = cur.unpack("<BB")
        if dtype != _DTYPE_F32:
            raise ShapeError(f"tensor {name!r}: unsupported dtype code {dtype}")
        dims = [cur.unpack("<Q")[0] for _ in range(rank)]
        n = 1
        for d in dims:
            if d <= 0:
                raise ShapeError(f"tensor {name!r}: non-positive dim {d}")
            n *= d
        raw = cur.take(4 * n)
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims)
        out.append(Tensor(name, arr.copy()))
    if cur.pos != len(cur.buf):
        raise ShapeError(f"{len(cur.buf) - cur.pos} trailing bytes after last tensor")
    return out


# ---------------------------------------------------------------------------
# calibration sets

_CALIB_NAME = re.compile(r"^(?P<name>.+)@t(?P<step>\d+)#(?P<sample>\d+)$")


class CalibSet:
    """Activation samples indexed by (tensor name, timestep, sample index).

    All entries sharing a tensor name must share a shape.
    """

    def __init__(self) -> None:
        self.entries: dict[tuple[str, int, int], np.ndarray] = {}
        self._shapes: dict[str, tuple[int, ...]] = {}

    def add(self, name: str, timestep: int, sample: int, data: np.ndarray) -> None:
        if timestep < 0 or sample < 0:
            raise ValueError("timestep and sample index must be >= 0")
        arr = np.ascontiguousarray(data, dtype=np.float32)
        known = self._shapes.get(name)
        if known is not None and known != arr.shape:
            raise ValueError(
                f"shape {arr.shape} for {name!r} conflicts with existing {known}"
            )
        self._shapes[name] = arr.shape
        self.entries[(name, timestep, sample)] = arr

    def names(self) -> list[str]:
        return sorted(self._shapes)

    def timesteps(self, name: str) -> list[int]:
        return sorted({t for (n, t, _) in self.entries if n == name})

    def samples_at(self, name: str, timestep: int) -> list[int]:
        return sorted(s for (n, t, s) in self.entries if n == name and t == timestep)

    def get(self, name: str, timestep: int, sample: int) -> np.ndarray:
        return self.entries[(name, timestep, sample)]

    def pooled(self, name: str) -> np.ndarray:
        """All samples for a tensor, concatenated flat (search pooling)."""
        keys = sorted(k for k in self.entries if k[0] == name)
        if not keys:
            raise KeyError(f"no calibration entries for {name!r}")
        return np.concatenate([self.entries[k].ravel() for k in keys])

    def __len__(self) -> int:
        return len(self.entries)

    def to_tensors(self) -> list[Tensor]:
        out = []
        for (name, t, s) in sorted(self.entries):
            out.append(Tensor(f"{name}@t{t}#{s}", self.entries[(name, t, s)]))
        return out

    @classmethod
    def from_tensors(cls, tensors: list[Tensor]) -> "CalibSet":
        cs = cls()
        for t in tensors:
            m = _CALIB_NAME.match(t.name)
            if m is None:
                raise ValueError(f"tensor name {t.name!r} is not a calibration entry")
            cs.add(m["name"], int(m["step"]), int(m["sample"]), t.data)
        return cs

    def save(self, path: str | os.PathLike) -> None:
        write_container(path, self.to_tensors())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CalibSet":
        return cls.from_tensors(read_container(path))


def sample_uniform(cs: CalibSet, tensor_name: str, n: int, seed: int = 0) -> list[Tensor]:
    """Draw ``n`` samples with timesteps evenly spaced over the available range.

    Full passes over all timesteps are taken first (round-robin over the
    sample index within each timestep); a remainder of r samples uses the
    evenly spaced timestep indices floor(k*(T-1)/(r-1)). Deterministic; the
    seed parameter is accepted for interface stability but the even-spacing
    rule leaves nothing random.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    steps = cs.timesteps(tensor_name)
    if not steps:
        raise KeyError(f"no calibration entries for {tensor_name!r}")
    t_count = len(steps)
    rounds, rem = divmod(n, t_count)
    next_sample = {t: 0 for t in steps}

    def take(timestep: int) -> Tensor:
        avail = cs.samples_at(tensor_name, timestep)
        idx = avail[next_sample[timestep] % len(avail)]
        next_sample[timestep] += 1
        data = cs.get(tensor_name, timestep, idx)
        return Tensor(f"{tensor_name}@t{timestep}#{idx}", data)

    out: list[Tensor] = []
    for _ in range(rounds):
        for t in steps:
            out.append(take(t))
    if rem == 1:
        out.append(take(steps[0]))
    elif rem > 1:
        for k in range(rem):
            out.append(take(steps[k * (t_count - 1) // (rem - 1)]))
    return out


# ---------------------------------------------------------------------------
# quantization manifest

_MODES = ("fp", "int", "passthrough")
_KINDS = ("weight", "activation")


@dataclass
class QuantRecord:
    """Per-tensor quantization decision."""

    name: str
    kind: str
    mode: str
    e_bits: int | None = None
    m_bits: int | None = None
    bias: float | None = None
    bits: int | None = None
    rounding_mask_ref: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ManifestError(f"record {self.name!r}: bad kind {self.kind!r}")
        if self.mode not in _MODES:
            raise ManifestError(f"record {self.name!r}: bad mode {self.mode!r}")
        if self.mode == "fp" and (
            self.e_bits is None or self.m_bits is None or self.bias is None
        ):
            raise ManifestError(f"record {self.name!r}: fp mode needs e_bits/m_bits/bias")
        if self.mode == "int" and self.bits is None:
            raise ManifestError(f"record {self.name!r}: int mode needs bits")


@dataclass
class QuantManifest:
    records: list[QuantRecord] = field(default_factory=list)

    def by_name(self) -> dict[str, QuantRecord]:
        return {r.name: r for r in self.records}

    def get(self, name: str) -> QuantRecord | None:
        for r in self.records:
            if r.name == name:
                return r
        return None


def _record_json(r: QuantRecord) -> str:
    parts = [f'"name": {json.dumps(r.name)}', f'"kind": "{r.kind}"', f'"mode": "{r.mode}"']
    if r.mode == "fp":
        parts.append(f'"e_bits": {r.e_bits}')
        parts.append(f'"m_bits": {r.m_bits}')
        parts.append(f'"bias": {format(r.bias, ".17g")}')
    if r.mode == "int":
        parts.append(f'"bits": {r.bits}')
    if r.rounding_mask_ref is not None:
        parts.append(f'"rounding_mask_ref": {json.dumps(r.rounding_mask_ref)}')
    return "    {" + ", ".join(parts) + "}"


def write_manifest(path: str | os.PathLike, manifest: QuantManifest) -> None:
    """Write manifest JSON atomically; biases carry 17 significant digits."""
    body = ",\n".join(_record_json(r) for r in manifest.records)
    doc = '{\n  "version": 1,\n  "tensors": [\n' + body + "\n  ]\n}\n"
    if not manifest.records:
        doc = '{\n  "version": 1,\n  "tensors": []\n}\n'
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(doc)
    os.replace(tmp, path)


def read_manifest(path: str | os.PathLike) -> QuantManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict) or "tensors" not in doc:
        raise ManifestError(f"{path}: missing 'tensors' array")
    records = []
    for raw in doc["tensors"]:
        try:
            records.append(
                QuantRecord(
                    name=raw["name"],
                    kind=raw["kind"],
                    mode=raw["mode"],
                    e_bits=raw.get("e_bits"),
                    m_bits=raw.get("m_bits"),
                    bias=raw.get("bias"),
                    bits=raw.get("bits"),
                    rounding_mask_ref=raw.get("rounding_mask_ref"),
                )
            )
        except KeyError as exc:
            raise ManifestError(f"{path}: record missing field {exc}") from exc
    return QuantManifest(records)


def validate_masks(manifest: QuantManifest, weights: dict[str, np.ndarray],
                   masks: dict[str, np.ndarray]) -> None:
    """Check that every referenced rounding mask exists, matches its weight's
    shape, and contains only 0/1."""
    for r in manifest.records:
        if r.rounding_mask_ref is None:
            continue
        if r.rounding_mask_ref not in masks:
            raise ManifestError(f"mask {r.rounding_mask_ref!r} not found")
        mask = masks[r.rounding_mask_ref]
        w = weights.get(r.name)
        if w is not None and mask.shape != w.shape:
            raise ManifestError(
                f"mask {r.rounding_mask_ref!r} shape {mask.shape} != weight shape {w.shape}"
            )
        if not np.all((mask == 0) | (mask == 1)):
            raise ManifestError(f"mask {r.rounding_mask_ref!r} has values outside 0/1")


# ---------------------------------------------------------------------------
# metrics


def mse(a, b) -> float:
    """Mean squared elementwise difference."""
    x = _as_array(a).astype(np.float64)
    y = _as_array(b).astype(np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


def sqnr_db(ref, test) -> float:
    """Signal-to-quantization-noise ratio, 10*log10(sum ref^2 / sum err^2).

    Returns +inf when test equals ref exactly; rejects an all-zero reference.
    """
    r = _as_array(ref).astype(np.float64)
    t = _as_array(test).astype(np.float64)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {t.shape}")
    sig = float(np.sum(r * r))
    if sig == 0.0:
        raise ValueError("sqnr_db undefined for an all-zero reference")
    noise = float(np.sum((r - t) ** 2))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(sig / noise)


def sparsity(t) -> float:
    """Fraction of exactly-zero elements."""
    arr = _as_array(t)
    if arr.size == 0:
        return 0.0
    return float(np.count_nonzero(arr == 0) / arr.size)
