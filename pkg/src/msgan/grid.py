"""Scalar 2D/3D volumes: NDIMG file I/O, factor-2 resampling and edge maps.

Volumes carry float32 data in the canonical intensity range [-1, 1]; edge maps
are binary and stored as 0.0/1.0.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from msgan.textkv import KeyValueError, format_kv, parse_kv, split_header

__all__ = [
    "Volume",
    "EdgeConfig",
    "NdimgError",
    "MalformedHeaderError",
    "TruncatedPayloadError",
    "TrailingDataError",
    "UnsupportedNdimError",
    "UnsupportedDtypeError",
    "as_array",
    "load_volume",
    "save_volume",
    "rescale",
    "downsample2",
    "upsample2",
    "extract_edges",
]


@dataclass(frozen=True, eq=False)
class Volume:
    """A single-channel 2D or 3D grid with per-axis spacing (mm).

    ``data`` is converted to a C-contiguous float32 array and marked
    read-only, so a Volume can be shared freely.
    """

    data: np.ndarray
    spacing: tuple = field(default=None)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim not in (2, 3):
            raise UnsupportedNdimError(f"ndim must be 2 or 3, got {arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data contains non-finite values")
        if arr is self.data:
            arr = arr.copy()
        arr.flags.writeable = False
        spacing = self.spacing
        if spacing is None:
            spacing = (1.0,) * arr.ndim
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != arr.ndim:
            raise ValueError(f"spacing has {len(spacing)} entries for a {arr.ndim}D volume")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.spacing == other.spacing
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return f"Volume(shape={self.shape}, spacing={self.spacing})"


@dataclass(frozen=True)
class EdgeConfig:
    percentile: float = 90.0

    def __post_init__(self):
        if not 0.0 < self.percentile < 100.0:
            raise ValueError(f"percentile must lie strictly inside (0, 100), got {self.percentile}")


VolumeLike = Union[Volume, np.ndarray]


def as_array(v: VolumeLike) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def _spacing_of(v: VolumeLike, factor: float = 1.0):
    if isinstance(v, Volume):
        return tuple(s * factor for s in v.spacing)
    return None


# --------------------------------------------------------------------------
# NDIMG I/O

class NdimgError(ValueError):
    """Base class for NDIMG parse failures. ``field`` names the offending header key."""

    def __init__(self, message: str, field: str):
        super().__init__(message)
        self.field = field


class MalformedHeaderError(NdimgError):
    pass


class TruncatedPayloadError(NdimgError):
    pass


class TrailingDataError(NdimgError):
    pass


class UnsupportedNdimError(NdimgError):
    def __init__(self, message: str, field: str = "ndim"):
        super().__init__(message, field)


class UnsupportedDtypeError(NdimgError):
    def __init__(self, message: str, field: str = "dtype"):
        super().__init__(message, field)


_DTYPE = "f32le"


def encode_volume(v: Volume) -> bytes:
    header = format_kv([
        ("ndim", v.ndim),
        ("shape", " ".join(str(n) for n in v.shape)),
        ("spacing", " ".join(repr(s) for s in v.spacing)),
        ("dtype", _DTYPE),
    ])
    return header.encode("utf-8") + b"data:\n" + v.data.astype("<f4").tobytes()


def decode_volume(blob: bytes) -> Volume:
    try:
        text, payload = split_header(blob)
        kv = parse_kv(text)
    except (KeyValueError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"malformed header: {exc}", "header") from exc
    for key in ("ndim", "shape", "spacing", "dtype"):
        if key not in kv:
            raise MalformedHeaderError(f"missing header field {key!r}", key)
    unknown = set(kv) - {"ndim", "shape", "spacing", "dtype"}
    if unknown:
        key = sorted(unknown)[0]
        raise MalformedHeaderError(f"unknown header field {key!r}", key)

    try:
        ndim = int(kv["ndim"])
    except ValueError:
        raise MalformedHeaderError(f"ndim is not an integer: {kv['ndim']!r}", "ndim") from None
    if ndim not in (2, 3):
        raise UnsupportedNdimError(f"unsupported ndim {ndim}; expected 2 or 3")
    if kv["dtype"] != _DTYPE:
        raise UnsupportedDtypeError(f"unsupported dtype {kv['dtype']!r}; expected {_DTYPE!r}")
    try:
        shape = tuple(int(t) for t in kv["shape"].split())
    except ValueError:
        raise MalformedHeaderError(f"shape is not a list of integers: {kv['shape']!r}", "shape") from None
    if len(shape) != ndim or any(n < 1 for n in shape):
        raise MalformedHeaderError(f"shape {shape} inconsistent with ndim {ndim}", "shape")
    try:
        spacing = tuple(float(t) for t in kv["spacing"].split())
    except ValueError:
        raise MalformedHeaderError(f"spacing is not a list of floats: {kv['spacing']!r}", "spacing") from None
    if len(spacing) != ndim:
        raise MalformedHeaderError(f"spacing has {len(spacing)} entries for ndim {ndim}", "spacing")

    expected = 4 * int(np.prod(shape))
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, shape {shape} needs {expected}", "data")
    if len(payload) > expected:
        raise TrailingDataError(
            f"payload holds {len(payload)} bytes, shape {shape} needs only {expected}", "data")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return Volume(data.astype(np.float32), spacing)


def load_volume(path: Union[str, os.PathLike], source_range: Sequence[float] = None) -> Volume:
    """Read an NDIMG file.

    If ``source_range`` is given as ``(lo, hi)`` the intensities are mapped
    linearly from that range onto [-1, 1].
    """
    with open(path, "rb") as fh:
        v = decode_volume(fh.read())
    if source_range is not None:
        v = rescale(v, *source_range)
    return v


def save_volume(v: Volume, path: Union[str, os.PathLike]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_volume(v))


def rescale(v: VolumeLike, lo: float, hi: float) -> Volume:
    """Map intensities linearly from [lo, hi] to [-1, 1], clipping outliers."""
    if not hi > lo:
        raise ValueError("source range must satisfy hi > lo")
    x = as_array(v).astype(np.float64)
    out = np.clip(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    return Volume(out, _spacing_of(v))


# --------------------------------------------------------------------------
# resampling

def downsample2(v: VolumeLike) -> Volume:
    """Halve every axis by averaging non-overlapping 2^ndim blocks."""
    x = as_array(v)
    if any(n % 2 for n in x.shape):
        raise ValueError(f"downsample2 needs even extents, got shape {x.shape}")
    blocks = x.astype(np.float64).reshape([d for n in x.shape for d in (n // 2, 2)])
    out = blocks.mean(axis=tuple(range(1, 2 * x.ndim, 2)))
    return Volume(out, _spacing_of(v, 2.0))


def _upsample_axis(x: np.ndarray, axis: int) -> np.ndarray:
    # Half-voxel aligned: output j samples input coordinate (j + 0.5) / 2 - 0.5,
    # clamped to the domain, so even outputs mix with the left neighbour and
    # odd outputs with the right one.
    x = np.moveaxis(x, axis, 0)
    left = np.concatenate([x[:1], x[:-1]], axis=0)
    right = np.concatenate([x[1:], x[-1:]], axis=0)
    out = np.empty((2 * x.shape[0],) + x.shape[1:], dtype=np.float64)
    out[0::2] = 0.75 * x + 0.25 * left
    out[1::2] = 0.75 * x + 0.25 * right
    return np.moveaxis(out, 0, axis)


def upsample2(v: VolumeLike) -> Volume:
    """Double every axis with multilinear, half-voxel aligned interpolation."""
    x = as_array(v).astype(np.float64)
    for axis in range(x.ndim):
        x = _upsample_axis(x, axis)
    return Volume(x, _spacing_of(v, 0.5))


# --------------------------------------------------------------------------
# edges

def gradient_magnitude(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = np.zeros_like(x)
    for axis in range(x.ndim):
        g = ndimage.sobel(x, axis=axis, mode="reflect")
        sq += g * g
    return np.sqrt(sq)


def extract_edges(v: VolumeLike, cfg: EdgeConfig = EdgeConfig()) -> Volume:
    """Binary edge map: Sobel magnitude at or above a percentile of the nonzero magnitudes."""
    mag = gradient_magnitude(as_array(v))
    nonzero = mag[mag > 0]
    if nonzero.size == 0:
        return Volume(np.zeros(mag.shape, np.float32), _spacing_of(v))
    threshold = np.percentile(nonzero, cfg.percentile)
    edges = (mag >= threshold) & (mag > 0)
    return Volume(edges.astype(np.float32), _spacing_of(v))
