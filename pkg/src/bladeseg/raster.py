"""Core raster value types, flip transforms, quantization and bit-exact file I/O.

Three immutable grid types cover every artifact the refinement pipeline
touches: :class:`FloatRaster` (probability maps and raw network scores),
:class:`BinaryMask` (segmentation masks) and :class:`RgbImage` (photographs).
Backing arrays are marked read-only so instances are safe to share across
threads. The origin is the top-left pixel; rows grow downward and data is
row-major everywhere, matching the on-disk layouts.

Supported on-disk formats, all byte-exact (see README.md for full layouts):

* ``bpr_float`` -- ``BPR1`` magic, height then width as unsigned 32-bit
  little-endian, then height*width IEEE-754 binary32 little-endian values
  in row-major order. No padding, no trailer.
* ``pgm_mask``  -- binary PGM (``P5``), maxval 255; 255 = foreground,
  0 = background, anything else is rejected.
* ``ppm``       -- binary PPM (``P6``), maxval 255.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

__all__ = [
    "PROBABILITY",
    "LOGIT",
    "FORMAT_BPR_FLOAT",
    "FORMAT_PGM_MASK",
    "FORMAT_PPM",
    "RasterFormatError",
    "FlipTransform",
    "FloatRaster",
    "BinaryMask",
    "RgbImage",
    "apply_flip",
    "quantize",
    "load_raster",
    "store_raster",
]

#: FloatRaster tag: every value must lie in [0, 1].
PROBABILITY = "probability"
#: FloatRaster tag: values are unbounded but finite (pre-sigmoid scores,
#: gradients, and other real-valued grids).
LOGIT = "logit"

FORMAT_BPR_FLOAT = "bpr_float"
FORMAT_PGM_MASK = "pgm_mask"
FORMAT_PPM = "ppm"

# Refuse to allocate rasters beyond this many pixels when trusting a header.
MAX_PIXELS = 1 << 28

_BPR_MAGIC = b"BPR1"


class RasterFormatError(ValueError):
    """A raster file does not match its declared on-disk format."""


class FlipTransform(Enum):
    """The four axis-aligned flip transforms used for test-time augmentation.

    Each member is an involution: applying the same transform twice restores
    the original raster bit for bit.
    """

    IDENTITY = "id"
    FLIP_HORIZONTAL = "fh"
    FLIP_VERTICAL = "fv"
    FLIP_BOTH = "fhv"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_2d(arr: np.ndarray, what: str) -> None:
    if arr.ndim != 2:
        raise ValueError(f"{what} must be a 2-D grid, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{what} must have height >= 1 and width >= 1, got {arr.shape}")


@dataclass(frozen=True, eq=False)
class FloatRaster:
    """H x W grid of real values, tagged ``probability`` or ``logit``.

    Probability rasters must lie in [0, 1]; logit rasters are unbounded but
    must be finite. Values are held as float64 in memory; the BPR file format
    stores binary32.
    """

    values: np.ndarray
    kind: str = PROBABILITY

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        _check_2d(arr, "FloatRaster")
        if self.kind == PROBABILITY:
            if not np.all(np.isfinite(arr)):
                raise ValueError("probability raster contains NaN or infinite values")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError("probability raster has values outside [0, 1]")
        elif self.kind == LOGIT:
            if not np.all(np.isfinite(arr)):
                raise ValueError("logit raster contains NaN or infinite values")
        else:
            raise ValueError(f"unknown raster kind {self.kind!r}")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """H x W boolean grid; True marks foreground (blade)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.dtype != np.bool_:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValueError("mask values must be boolean or 0/1 integers")
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("integer mask values must be 0 or 1")
            arr = arr.astype(bool)
        _check_2d(arr, "BinaryMask")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class RgbImage:
    """H x W x 3 image with 8-bit channels in RGB order."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"RgbImage must have shape (H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("RgbImage must have height >= 1 and width >= 1")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValueError("image channels must be integers in [0, 255]")
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError("image channels must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


Raster = Union[FloatRaster, BinaryMask, RgbImage]


def _flip_array(arr: np.ndarray, transform: FlipTransform) -> np.ndarray:
    # Column index w maps to W-1-w under FLIP_HORIZONTAL, row index h to
    # H-1-h under FLIP_VERTICAL; FLIP_BOTH composes the two.
    if transform is FlipTransform.IDENTITY:
        return arr
    if transform is FlipTransform.FLIP_HORIZONTAL:
        return arr[:, ::-1]
    if transform is FlipTransform.FLIP_VERTICAL:
        return arr[::-1, :]
    if transform is FlipTransform.FLIP_BOTH:
        return arr[::-1, ::-1]
    raise ValueError(f"unknown transform {transform!r}")


def apply_flip(raster: Raster, transform: FlipTransform) -> Raster:
    """Return the raster with pixels rearranged by the given flip transform.

    The result has the same type and shape; the identity transform returns
    the input object itself (rasters are immutable).
    """
    if transform is FlipTransform.IDENTITY:
        return raster
    flipped = _flip_array(raster.values, transform)
    if isinstance(raster, FloatRaster):
        return FloatRaster(flipped, raster.kind)
    if isinstance(raster, BinaryMask):
        return BinaryMask(flipped)
    if isinstance(raster, RgbImage):
        return RgbImage(flipped)
    raise TypeError(f"not a raster type: {type(raster).__name__}")


def quantize(prob: FloatRaster, threshold: float) -> BinaryMask:
    """Binarize a probability raster: foreground wherever value >= threshold.

    The comparison is inclusive, so a pixel exactly at the threshold counts
    as foreground. ``threshold`` must lie strictly inside (0, 1).
    """
    if prob.kind != PROBABILITY:
        raise ValueError("quantize expects a probability raster")
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return BinaryMask(prob.values >= threshold)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _read_token(f: BinaryIO, path: Path) -> bytes:
    """Read one whitespace-delimited netpbm header token, skipping comments."""
    token = b""
    while True:
        c = f.read(1)
        if c == b"":
            raise RasterFormatError(f"{path}: truncated header")
        if c == b"#":
            while c not in (b"\n", b"\r", b""):
                c = f.read(1)
            continue
        if c.isspace():
            if token:
                return token
            continue
        token += c


def _read_netpbm(path: Path, magic: bytes) -> tuple[int, int, bytes]:
    with open(path, "rb") as f:
        got = f.read(2)
        if got != magic:
            raise RasterFormatError(
                f"{path}: bad magic {got!r}, expected {magic.decode()}"
            )
        try:
            width = int(_read_token(f, path))
            height = int(_read_token(f, path))
            maxval = int(_read_token(f, path))
        except ValueError as exc:
            raise RasterFormatError(f"{path}: malformed header") from exc
        if width < 1 or height < 1:
            raise RasterFormatError(f"{path}: invalid dimensions {width}x{height}")
        if height * width > MAX_PIXELS:
            raise RasterFormatError(f"{path}: dimension overflow ({height}x{width})")
        if maxval != 255:
            raise RasterFormatError(f"{path}: unsupported maxval {maxval}, expected 255")
        payload = f.read()
    return height, width, payload


def _load_pgm_mask(path: Path) -> BinaryMask:
    height, width, payload = _read_netpbm(path, b"P5")
    expected = height * width
    if len(payload) < expected:
        raise RasterFormatError(f"{path}: truncated payload")
    if len(payload) > expected:
        raise RasterFormatError(f"{path}: trailing data after pixel payload")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    bad = (data != 0) & (data != 255)
    if bad.any():
        value = int(data[bad][0])
        raise RasterFormatError(f"{path}: non-binary mask value {value}")
    return BinaryMask(data == 255)


def _load_ppm(path: Path) -> RgbImage:
    height, width, payload = _read_netpbm(path, b"P6")
    expected = height * width * 3
    if len(payload) < expected:
        raise RasterFormatError(f"{path}: truncated payload")
    if len(payload) > expected:
        raise RasterFormatError(f"{path}: trailing data after pixel payload")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return RgbImage(data)


def _load_bpr(path: Path, kind: str) -> FloatRaster:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _BPR_MAGIC:
            raise RasterFormatError(f"{path}: bad magic {magic!r}, expected BPR1")
        header = f.read(8)
        if len(header) < 8:
            raise RasterFormatError(f"{path}: truncated header")
        height, width = struct.unpack("<II", header)
        if height < 1 or width < 1:
            raise RasterFormatError(f"{path}: invalid dimensions {height}x{width}")
        if height * width > MAX_PIXELS:
            raise RasterFormatError(f"{path}: dimension overflow ({height}x{width})")
        payload = f.read()
    expected = height * width * 4
    if len(payload) < expected:
        raise RasterFormatError(f"{path}: truncated payload")
    if len(payload) > expected:
        raise RasterFormatError(f"{path}: trailing data after pixel payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return FloatRaster(data.astype(np.float64), kind)


def load_raster(path: str | Path, fmt: str, *, kind: str = PROBABILITY) -> Raster:
    """Load a raster from disk.

    ``fmt`` selects the on-disk layout and the returned type: ``ppm`` ->
    :class:`RgbImage`, ``pgm_mask`` -> :class:`BinaryMask`, ``bpr_float`` ->
    :class:`FloatRaster`. For ``bpr_float`` the caller declares via ``kind``
    whether the file holds probabilities or unbounded scores, since the
    format itself carries no tag.
    """
    path = Path(path)
    if fmt == FORMAT_PPM:
        return _load_ppm(path)
    if fmt == FORMAT_PGM_MASK:
        return _load_pgm_mask(path)
    if fmt == FORMAT_BPR_FLOAT:
        return _load_bpr(path, kind)
    raise ValueError(f"unknown raster format {fmt!r}")


def store_raster(raster: Raster, path: str | Path, fmt: str) -> None:
    """Write a raster to disk byte-exactly; ``load_raster`` inverts it.

    BPR payloads are binary32, so float values that are not exactly
    representable in binary32 are rounded on write.
    """
    path = Path(path)
    if fmt == FORMAT_PPM:
        if not isinstance(raster, RgbImage):
            raise ValueError("ppm format requires an RgbImage")
        header = f"P6\n{raster.width} {raster.height}\n255\n".encode("ascii")
        path.write_bytes(header + raster.values.tobytes())
    elif fmt == FORMAT_PGM_MASK:
        if not isinstance(raster, BinaryMask):
            raise ValueError("pgm_mask format requires a BinaryMask")
        header = f"P5\n{raster.width} {raster.height}\n255\n".encode("ascii")
        payload = np.where(raster.values, np.uint8(255), np.uint8(0))
        path.write_bytes(header + payload.tobytes())
    elif fmt == FORMAT_BPR_FLOAT:
        if not isinstance(raster, FloatRaster):
            raise ValueError("bpr_float format requires a FloatRaster")
        header = _BPR_MAGIC + struct.pack("<II", raster.height, raster.width)
        path.write_bytes(header + raster.values.astype("<f4").tobytes())
    else:
        raise ValueError(f"unknown raster format {fmt!r}")
