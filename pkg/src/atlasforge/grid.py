"""Raster containers, ROI handling, smoothing and file I/O.

Rasters are stored row-major as ``data[y, x]``.  Pixel ``(x, y)`` sits at the
physical position ``(x * sx, y * sy)`` in millimetres; there is no origin
offset, so cropping re-bases coordinates at the crop corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, GeometryError, NumericError

LABELS = (0, 1, 2)
BACKGROUND, BLOOD_POOL, MYOCARDIUM = LABELS
ENDO = frozenset({BLOOD_POOL})
EPI = frozenset({BLOOD_POOL, MYOCARDIUM})

DEFAULT_ROI_MARGIN = 10


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _check_spacing(spacing) -> tuple[float, float]:
    sx, sy = (float(s) for s in spacing)
    if not (sx > 0 and sy > 0 and math.isfinite(sx) and math.isfinite(sy)):
        raise ConfigError(f"spacing must be strictly positive, got {spacing!r}")
    return sx, sy


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Dense 2D intensity raster with physical pixel spacing (mm)."""

    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise GeometryError(f"image data must be a non-empty 2D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("image contains non-finite intensities")
        object.__setattr__(self, "data", _readonly(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def same_geometry(self, other) -> bool:
        return self.shape == other.shape and self.spacing == other.spacing

    def with_data(self, data) -> "ImageGrid":
        return ImageGrid(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return self.same_geometry(other) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Label raster: 0 background, 1 blood pool, 2 myocardium."""

    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.size == 0:
            raise GeometryError(f"label data must be a non-empty 2D array, got shape {arr.shape}")
        if arr.dtype.kind == "f" and not np.all(arr == np.round(arr)):
            raise ConfigError("label data must be integral")
        if arr.size and (arr.min() < 0 or arr.max() > 2):
            raise ConfigError("labels must lie in {0, 1, 2}")
        object.__setattr__(self, "data", _readonly(arr.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def same_geometry(self, other) -> bool:
        return self.shape == other.shape and self.spacing == other.spacing

    def with_data(self, data) -> "LabelMap":
        return LabelMap(data, self.spacing)

    def mask(self, label_set=EPI) -> np.ndarray:
        """Boolean mask of pixels whose label is in ``label_set``."""
        return np.isin(self.data, sorted(label_set))

    @classmethod
    def zeros_like(cls, other) -> "LabelMap":
        return cls(np.zeros(other.shape, dtype=np.uint8), other.spacing)

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.same_geometry(other) and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class RoiBox:
    """Pixel box, inclusive ``x0, y0`` and exclusive ``x1, y1``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise GeometryError(f"degenerate roi {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def fits(self, shape: tuple[int, int]) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= shape[1] and self.y1 <= shape[0]

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def full(cls, raster) -> "RoiBox":
        return cls(0, 0, raster.width, raster.height)


@dataclass(frozen=True)
class AtlasPair:
    intensity: ImageGrid
    labels: LabelMap
    id: str = ""

    def __post_init__(self):
        if not self.intensity.same_geometry(self.labels):
            raise GeometryError(f"atlas {self.id!r}: intensity and labels differ in geometry")


@dataclass(frozen=True)
class AtlasSet:
    phase: str
    pairs: tuple[AtlasPair, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.phase not in ("ED", "ES"):
            raise ConfigError(f"atlas phase must be ED or ES, got {self.phase!r}")
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.pairs:
            raise ConfigError("atlas set is empty")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.pairs]


Raster = TypeVar("Raster", ImageGrid, LabelMap)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

_DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "u1"}


def _header_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix != ".hdr":
        path = path.with_suffix(".hdr")
    return path, path.with_suffix(".raw")


def save_image(raster: ImageGrid | LabelMap, path) -> Path:
    """Write ``<name>.hdr`` plus a raw little-endian payload; returns the header path.

    Intensities go out as f32 when that is lossless and as f64 otherwise, so a
    round trip is always bit-exact.
    """
    hdr, raw = _header_paths(path)
    if isinstance(raster, LabelMap):
        dtype = "u8"
    else:
        as32 = raster.data.astype("<f4")
        dtype = "f32" if np.array_equal(as32.astype(np.float64), raster.data) else "f64"
    payload = np.ascontiguousarray(raster.data, dtype=_DTYPES[dtype])
    hdr.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(payload.tobytes())
    sx, sy = raster.spacing
    hdr.write_text(
        f"width {raster.width}\n"
        f"height {raster.height}\n"
        f"spacing {sx!r} {sy!r}\n"
        f"dtype {dtype}\n"
        f"data {raw.name}\n"
    )
    return hdr


def _parse_header(hdr: Path) -> dict:
    if not hdr.is_file():
        raise FormatError(f"no such header: {hdr}")
    fields = {}
    for lineno, line in enumerate(hdr.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(" ")
        fields[key] = value.strip()
    missing = {"width", "height", "spacing", "dtype", "data"} - fields.keys()
    if missing:
        raise FormatError(f"{hdr}: missing header fields {sorted(missing)}")
    try:
        width, height = int(fields["width"]), int(fields["height"])
        spacing = tuple(float(v) for v in fields["spacing"].split())
    except ValueError as exc:
        raise FormatError(f"{hdr}: {exc}") from None
    if width < 1 or height < 1 or len(spacing) != 2:
        raise FormatError(f"{hdr}: bad dimensions or spacing")
    if fields["dtype"] not in _DTYPES:
        raise FormatError(f"{hdr}: unsupported dtype {fields['dtype']!r}")
    return {
        "width": width,
        "height": height,
        "spacing": spacing,
        "dtype": fields["dtype"],
        "data": hdr.parent / fields["data"],
    }


def _load(path):
    hdr, _ = _header_paths(path)
    info = _parse_header(hdr)
    if not info["data"].is_file():
        raise FormatError(f"{hdr}: payload {info['data']} not found")
    payload = np.frombuffer(info["data"].read_bytes(), dtype=_DTYPES[info["dtype"]])
    n = info["width"] * info["height"]
    if payload.size != n or payload.nbytes != info["data"].stat().st_size:
        raise FormatError(
            f"{hdr}: header declares {info['width']}x{info['height']} = {n} values, "
            f"payload holds {payload.size}"
        )
    return info, payload.reshape(info["height"], info["width"])


def load_image(path) -> ImageGrid:
    info, arr = _load(path)
    if info["dtype"] == "u8":
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return ImageGrid(arr.astype(np.float64), info["spacing"])


def load_labels(path) -> LabelMap:
    info, arr = _load(path)
    if info["dtype"] != "u8":
        raise FormatError(f"{path}: label rasters must use dtype u8")
    if arr.max() > 2:
        raise FormatError(f"{path}: label values outside {{0, 1, 2}}")
    return LabelMap(arr, info["spacing"])


def import_pgm(path) -> ImageGrid:
    """Read a binary (P5) PGM, 8 or 16 bit; spacing defaults to 1 mm."""
    blob = Path(path).read_bytes()
    if blob[:2] != b"P5":
        raise FormatError(f"{path}: only binary P5 PGM is supported (magic {blob[:2]!r})")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval <= 65535:
        raise FormatError(f"{path}: invalid PGM header values (maxval {maxval})")
    dtype = "u1" if maxval < 256 else ">u2"
    n = width * height
    if len(blob) - pos < n * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: PGM payload too short")
    raster = np.frombuffer(blob, dtype=dtype, count=n, offset=pos)
    return ImageGrid(raster.reshape(height, width).astype(np.float64))


# ---------------------------------------------------------------------------
# Smoothing and pyramids
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter with edge replication, on a bare array."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    arr = np.asarray(arr, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(arr, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def gaussian_smooth(image: ImageGrid, sigma: float) -> ImageGrid:
    return image.with_data(smooth_array(image.data, sigma))


def downsample2x(image: ImageGrid) -> ImageGrid:
    if image.width < 2 or image.height < 2:
        raise GeometryError(f"image {image.width}x{image.height} too small to downsample")
    sx, sy = image.spacing
    return ImageGrid(smooth_array(image.data, 1.0)[::2, ::2], (2 * sx, 2 * sy))


# ---------------------------------------------------------------------------
# ROI handling
# ---------------------------------------------------------------------------

def mask_bounding_box(labels: LabelMap | np.ndarray, margin: int = DEFAULT_ROI_MARGIN) -> RoiBox:
    """Tightest box around the non-zero pixels, grown by ``margin`` and clamped."""
    arr = labels.data if isinstance(labels, LabelMap) else np.asarray(labels)
    if margin < 0:
        raise ConfigError("roi margin must be >= 0")
    ys, xs = np.nonzero(arr)
    if xs.size == 0:
        raise NumericError("cannot bound an all-background label map")
    h, w = arr.shape
    return RoiBox(
        max(int(xs.min()) - margin, 0),
        max(int(ys.min()) - margin, 0),
        min(int(xs.max()) + 1 + margin, w),
        min(int(ys.max()) + 1 + margin, h),
    )


def crop_to_roi(raster: Raster, roi: RoiBox) -> Raster:
    if not roi.fits(raster.shape):
        raise GeometryError(f"roi {roi} outside {raster.width}x{raster.height} raster")
    return raster.with_data(raster.data[roi.slices])


def embed_roi(patch: Raster, roi: RoiBox, canvas: Raster) -> Raster:
    """Inverse of :func:`crop_to_roi`: paste ``patch`` into a copy of ``canvas``."""
    if not roi.fits(canvas.shape) or patch.shape != (roi.height, roi.width):
        raise GeometryError("patch does not match the roi")
    out = np.array(canvas.data, copy=True)
    out[roi.slices] = patch.data
    return canvas.with_data(out)


def check_same_geometry(rasters: Sequence, what: str = "rasters") -> None:
    first = rasters[0]
    for r in rasters[1:]:
        if not first.same_geometry(r):
            raise GeometryError(f"{what} differ in geometry: {first.shape}/{first.spacing} vs {r.shape}/{r.spacing}")
