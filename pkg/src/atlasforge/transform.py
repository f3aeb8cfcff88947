"""Rigid, affine and cubic B-spline transforms, displacement fields, resampling.

Every transform maps reference (target) coordinates to floating (atlas)
coordinates, in millimetres.  A :class:`DisplacementField` stores
``T(p) - p`` at each reference pixel centre and is the common currency for
composition and resampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError, NumericError
from .grid import ImageGrid, LabelMap


def pixel_coords(shape: tuple[int, int], spacing) -> tuple[np.ndarray, np.ndarray]:
    """Physical x and y coordinates of every pixel centre, each of ``shape``."""
    h, w = shape
    sx, sy = spacing
    x = np.arange(w, dtype=np.float64) * sx
    y = np.arange(h, dtype=np.float64) * sy
    return np.broadcast_to(x, (h, w)), np.broadcast_to(y[:, None], (h, w))


def physical_center(raster) -> tuple[float, float]:
    sx, sy = raster.spacing
    return (raster.width - 1) * sx / 2.0, (raster.height - 1) * sy / 2.0


def _wrap_angle(theta: float) -> float:
    theta = math.fmod(theta, 2 * math.pi)
    if theta <= -math.pi:
        theta += 2 * math.pi
    elif theta > math.pi:
        theta -= 2 * math.pi
    return theta


@dataclass(frozen=True)
class Rigid2D:
    """Rotation by ``theta`` about ``center``, then translation by ``(tx, ty)``."""

    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "theta", _wrap_angle(float(self.theta)))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def as_affine(self) -> "Affine2D":
        c, s = math.cos(self.theta), math.sin(self.theta)
        m = np.array([[c, -s], [s, c]])
        ctr = np.asarray(self.center)
        t = ctr - m @ ctr + np.array([self.tx, self.ty])
        return Affine2D(m, t)

    def apply(self, x, y):
        return self.as_affine().apply(x, y)


@dataclass(frozen=True, eq=False)
class Affine2D:
    """``p -> m @ p + t``."""

    m: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(2, 2)
        t = np.array(self.t, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(t))):
            raise NumericError("affine parameters are not finite")
        m.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(np.eye(2), np.zeros(2))

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.m))

    def as_affine(self) -> "Affine2D":
        return self

    def apply(self, x, y):
        m, t = self.m, self.t
        return m[0, 0] * x + m[0, 1] * y + t[0], m[1, 0] * x + m[1, 1] * y + t[1]

    def then(self, other: "Affine2D") -> "Affine2D":
        """Affine for ``p -> other(self(p))``."""
        return Affine2D(other.m @ self.m, other.m @ self.t + other.t)

    def shifted(self, offset) -> "Affine2D":
        """Same mapping expressed for reference coordinates re-based by ``-offset``."""
        offset = np.asarray(offset, dtype=np.float64)
        return Affine2D(self.m, self.t + self.m @ offset)

    def __eq__(self, other):
        if not isinstance(other, Affine2D):
            return NotImplemented
        return np.array_equal(self.m, other.m) and np.array_equal(self.t, other.t)


def apply_point(transform: Rigid2D | Affine2D, p) -> tuple[float, float]:
    x, y = transform.apply(float(p[0]), float(p[1]))
    return float(x), float(y)


# ---------------------------------------------------------------------------
# Cubic B-spline free-form deformation
# ---------------------------------------------------------------------------

def bspline_weights(t: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline weights for local coordinate ``t`` in [0, 1]; shape (..., 4)."""
    t = np.asarray(t, dtype=np.float64)
    t2, t3 = t * t, t * t * t
    return np.stack(
        [
            (1 - t) ** 3 / 6.0,
            (3 * t3 - 6 * t2 + 4) / 6.0,
            (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0,
            t3 / 6.0,
        ],
        axis=-1,
    )


def lattice_size(extent: float, spacing: float) -> int:
    # control point k sits at (k - 1) * spacing; one extra point beyond the far edge
    return int(math.ceil(extent / spacing - 1e-9)) + 3


def _cell(u: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.floor(u).astype(np.int64)
    i = np.clip(i, 0, n - 4)
    return i, u - i


def basis_matrix(positions: np.ndarray, spacing: float, n: int) -> np.ndarray:
    """Dense (len(positions), n) matrix of B-spline weights along one axis."""
    u = np.asarray(positions, dtype=np.float64) / spacing
    i, t = _cell(u, n)
    w = bspline_weights(t)
    out = np.zeros((u.size, n))
    rows = np.arange(u.size)
    for j in range(4):
        out[rows, i + j] = w[:, j]
    return out


@dataclass(frozen=True, eq=False)
class BSplineFFD:
    """Control lattice of (dx, dy) mm displacements, shape ``(ny, nx, 2)``.

    ``domain`` is the physical extent ``(ex, ey)`` of the reference grid the
    lattice covers; control point ``(k, l)`` sits at ``((k-1)·δ, (l-1)·δ)``.
    """

    grid_spacing: float
    control_points: np.ndarray
    domain: tuple[float, float]

    def __post_init__(self):
        cp = np.array(self.control_points, dtype=np.float64)
        if self.grid_spacing <= 0:
            raise GeometryError("control-point spacing must be > 0")
        ex, ey = (float(v) for v in self.domain)
        expected = (lattice_size(ey, self.grid_spacing), lattice_size(ex, self.grid_spacing), 2)
        if cp.shape != expected:
            raise GeometryError(f"lattice shape {cp.shape} inconsistent with domain, expected {expected}")
        if not np.all(np.isfinite(cp)):
            raise NumericError("control displacements are not finite")
        cp.setflags(write=False)
        object.__setattr__(self, "control_points", cp)
        object.__setattr__(self, "domain", (ex, ey))
        object.__setattr__(self, "grid_spacing", float(self.grid_spacing))

    @classmethod
    def zeros(cls, reference, grid_spacing: float) -> "BSplineFFD":
        ex, ey = _extent(reference)
        shape = (lattice_size(ey, grid_spacing), lattice_size(ex, grid_spacing), 2)
        return cls(grid_spacing, np.zeros(shape), (ex, ey))

    def with_points(self, control_points) -> "BSplineFFD":
        return BSplineFFD(self.grid_spacing, control_points, self.domain)

    @property
    def lattice_shape(self) -> tuple[int, int]:
        return self.control_points.shape[:2]

    def basis(self, reference) -> tuple[np.ndarray, np.ndarray]:
        """Row (y) and column (x) basis matrices for a reference pixel grid."""
        sx, sy = reference.spacing
        ny, nx = self.lattice_shape
        wy = basis_matrix(np.arange(reference.height) * sy, self.grid_spacing, ny)
        wx = basis_matrix(np.arange(reference.width) * sx, self.grid_spacing, nx)
        return wy, wx

    def dense(self, reference) -> np.ndarray:
        """Displacement at every pixel of ``reference``, shape ``(h, w, 2)``."""
        wy, wx = self.basis(reference)
        return dense_from_lattice(self.control_points, wy, wx)


def _extent(reference) -> tuple[float, float]:
    sx, sy = reference.spacing
    return (reference.width - 1) * sx, (reference.height - 1) * sy


def dense_from_lattice(cp: np.ndarray, wy: np.ndarray, wx: np.ndarray) -> np.ndarray:
    return np.stack([wy @ cp[..., 0] @ wx.T, wy @ cp[..., 1] @ wx.T], axis=-1)


def lattice_adjoint(g: np.ndarray, wy: np.ndarray, wx: np.ndarray) -> np.ndarray:
    """Transpose of :func:`dense_from_lattice`: per-pixel gradients to control points."""
    return np.stack([wy.T @ g[..., 0] @ wx, wy.T @ g[..., 1] @ wx], axis=-1)


def ffd_displacement(ffd: BSplineFFD, p) -> tuple[float, float]:
    x, y = float(p[0]), float(p[1])
    ex, ey = ffd.domain
    tol = 1e-9 * max(ex, ey, 1.0)
    if not (-tol <= x <= ex + tol and -tol <= y <= ey + tol):
        raise GeometryError(f"point {p} outside FFD domain [0,{ex}]x[0,{ey}]")
    ny, nx = ffd.lattice_shape
    ix, tx = _cell(np.array([x / ffd.grid_spacing]), nx)
    iy, ty = _cell(np.array([y / ffd.grid_spacing]), ny)
    wx, wy = bspline_weights(tx)[0], bspline_weights(ty)[0]
    patch = ffd.control_points[iy[0] : iy[0] + 4, ix[0] : ix[0] + 4]
    d = np.einsum("j,i,jic->c", wy, wx, patch)
    return float(d[0]), float(d[1])


def refine_ffd(ffd: BSplineFFD) -> BSplineFFD:
    """Exact subdivision to half the control spacing (same displacement field)."""
    half = ffd.grid_spacing / 2.0
    ex, ey = ffd.domain
    out = _refine_axis(ffd.control_points, 1, lattice_size(ex, half))
    out = _refine_axis(out, 0, lattice_size(ey, half))
    return BSplineFFD(half, out, ffd.domain)


def _refine_axis(c: np.ndarray, axis: int, n_new: int) -> np.ndarray:
    c = np.moveaxis(c, axis, 0)
    n = c.shape[0]
    out = np.empty((n_new,) + c.shape[1:])
    for m in range(n_new):
        k = (m + 1) // 2
        if m % 2 == 0:
            out[m] = (c[k] + c[k + 1]) / 2.0
        else:
            out[m] = (c[k - 1] + 6.0 * c[k] + c[k + 1]) / 8.0
    assert n_new <= 2 * n - 3
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# Bending energy
# ---------------------------------------------------------------------------

def _second_differences(c: np.ndarray):
    dxx = c[:, :-2] - 2.0 * c[:, 1:-1] + c[:, 2:]
    dyy = c[:-2, :] - 2.0 * c[1:-1, :] + c[2:, :]
    dxy = c[1:, 1:] - c[1:, :-1] - c[:-1, 1:] + c[:-1, :-1]
    return dxx, dyy, dxy


def bending_energy(ffd: BSplineFFD) -> float:
    """Mean squared second derivative of the lattice, in units of 1/δ².

    Zero exactly when each displacement component is affine over the lattice.
    """
    dxx, dyy, dxy = _second_differences(ffd.control_points)
    total = np.sum(dxx**2) + np.sum(dyy**2) + 2.0 * np.sum(dxy**2)
    n = ffd.control_points.shape[0] * ffd.control_points.shape[1]
    return float(total / (n * ffd.grid_spacing**2))


def bending_gradient(ffd: BSplineFFD) -> np.ndarray:
    c = ffd.control_points
    dxx, dyy, dxy = _second_differences(c)
    g = np.zeros_like(c)
    g[:, :-2] += dxx
    g[:, 1:-1] -= 2.0 * dxx
    g[:, 2:] += dxx
    g[:-2, :] += dyy
    g[1:-1, :] -= 2.0 * dyy
    g[2:, :] += dyy
    g[1:, 1:] += 2.0 * dxy
    g[1:, :-1] -= 2.0 * dxy
    g[:-1, 1:] -= 2.0 * dxy
    g[:-1, :-1] += 2.0 * dxy
    n = c.shape[0] * c.shape[1]
    return 2.0 * g / (n * ffd.grid_spacing**2)


# ---------------------------------------------------------------------------
# Dense displacement fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-pixel ``(dx, dy)`` in mm, ``data`` shape ``(h, w, 2)``."""

    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise GeometryError(f"displacement field must have shape (h, w, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("displacement field contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def same_geometry(self, other) -> bool:
        return self.shape == other.shape and self.spacing == other.spacing

    @classmethod
    def zeros(cls, reference) -> "DisplacementField":
        return cls(np.zeros(reference.shape + (2,)), reference.spacing)

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        """Absolute mapped positions ``p + field[p]`` in mm."""
        x, y = pixel_coords(self.shape, self.spacing)
        return x + self.data[..., 0], y + self.data[..., 1]

    def __add__(self, other: "DisplacementField") -> "DisplacementField":
        if not self.same_geometry(other):
            raise GeometryError("displacement fields differ in geometry")
        return DisplacementField(self.data + other.data, self.spacing)

    def max_norm(self) -> float:
        return float(np.max(np.hypot(self.data[..., 0], self.data[..., 1])))


def to_field(transform, reference) -> DisplacementField:
    if isinstance(transform, DisplacementField):
        if not transform.same_geometry(reference):
            raise GeometryError("field does not match the reference grid")
        return transform
    if isinstance(transform, BSplineFFD):
        return DisplacementField(transform.dense(reference), reference.spacing)
    x, y = pixel_coords(reference.shape, reference.spacing)
    qx, qy = transform.apply(x, y)
    return DisplacementField(np.stack([qx - x, qy - y], axis=-1), reference.spacing)


def bilinear(arr: np.ndarray, xi: np.ndarray, yi: np.ndarray, gradient: bool = False):
    """Bilinear samples of ``arr`` at fractional indices, with border replication.

    With ``gradient=True`` also returns the derivatives with respect to the
    index coordinates (zero along any axis where the sample was clamped).
    """
    h, w = arr.shape
    xc = np.clip(xi, 0.0, w - 1.0)
    yc = np.clip(yi, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    v00, v01 = arr[y0, x0], arr[y0, x1]
    v10, v11 = arr[y1, x0], arr[y1, x1]
    # weighted form keeps samples exact at both fx == 0 and fx == 1
    top = (1.0 - fx) * v00 + fx * v01
    bot = (1.0 - fx) * v10 + fx * v11
    val = (1.0 - fy) * top + fy * bot
    if not gradient:
        return val
    gx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    gy = bot - top
    gx = np.where((xi < 0) | (xi > w - 1), 0.0, gx)
    gy = np.where((yi < 0) | (yi > h - 1), 0.0, gy)
    return val, gx, gy


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """``result[p] = inner(p + outer[p]) + outer[p]`` (outer applied first)."""
    if not outer.same_geometry(inner):
        raise GeometryError("cannot compose fields of different geometry")
    qx, qy = outer.positions()
    sx, sy = inner.spacing
    ix, iy = qx / sx, qy / sy
    dx = bilinear(inner.data[..., 0], ix, iy) + outer.data[..., 0]
    dy = bilinear(inner.data[..., 1], ix, iy) + outer.data[..., 1]
    return DisplacementField(np.stack([dx, dy], axis=-1), outer.spacing)


def resample_intensity(moving: ImageGrid, field: DisplacementField) -> ImageGrid:
    """Pull ``moving`` back onto the field's grid with bilinear interpolation."""
    qx, qy = field.positions()
    sx, sy = moving.spacing
    return ImageGrid(bilinear(moving.data, qx / sx, qy / sy), field.spacing)


def resample_labels(moving: LabelMap, field: DisplacementField) -> LabelMap:
    """Nearest-neighbour pull-back; samples falling outside ``moving`` become background."""
    qx, qy = field.positions()
    sx, sy = moving.spacing
    ix = np.floor(qx / sx + 0.5).astype(np.int64)
    iy = np.floor(qy / sy + 0.5).astype(np.int64)
    inside = (ix >= 0) & (ix < moving.width) & (iy >= 0) & (iy < moving.height)
    out = np.zeros(field.shape, dtype=np.uint8)
    out[inside] = moving.data[iy[inside], ix[inside]]
    return LabelMap(out, field.spacing)


def shift_field(field: DisplacementField, offset) -> DisplacementField:
    """Re-express a cropped field so positions stay in the uncropped moving frame.

    A crop at pixel offset ``(ox, oy)`` re-bases reference coordinates; adding
    the physical offset to every displacement compensates.
    """
    ox, oy = offset
    data = np.array(field.data)
    data[..., 0] += ox
    data[..., 1] += oy
    return DisplacementField(data, field.spacing)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_transform(transform, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(transform, Rigid2D):
        cx, cy = transform.center
        path.write_text(f"rigid {transform.theta!r} {transform.tx!r} {transform.ty!r} {cx!r} {cy!r}\n")
    elif isinstance(transform, Affine2D):
        vals = list(transform.m.ravel()) + list(transform.t)
        path.write_text("affine " + " ".join(repr(float(v)) for v in vals) + "\n")
    elif isinstance(transform, BSplineFFD):
        raw = path.with_suffix(".raw")
        raw.write_bytes(np.ascontiguousarray(transform.control_points, dtype="<f8").tobytes())
        ny, nx = transform.lattice_shape
        ex, ey = transform.domain
        path.write_text(
            "ffd\n"
            f"lattice {nx} {ny}\n"
            f"spacing {transform.grid_spacing!r}\n"
            f"domain {ex!r} {ey!r}\n"
            f"data {raw.name}\n"
        )
    else:
        raise TypeError(f"cannot serialize {type(transform).__name__}")
    return path


def load_transform(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no such transform file: {path}")
    lines = [ln.split() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty transform file")
    kind = lines[0][0]
    try:
        if kind == "rigid":
            vals = [float(v) for v in lines[0][1:]]
            if len(vals) not in (3, 5):
                raise FormatError(f"{path}: rigid needs 3 or 5 values")
            center = tuple(vals[3:5]) if len(vals) == 5 else (0.0, 0.0)
            return Rigid2D(vals[0], vals[1], vals[2], center)
        if kind == "affine":
            vals = [float(v) for v in lines[0][1:]]
            if len(vals) != 6:
                raise FormatError(f"{path}: affine needs 6 values")
            return Affine2D(np.array(vals[:4]).reshape(2, 2), vals[4:])
        if kind == "ffd":
            fields = {ln[0]: ln[1:] for ln in lines[1:]}
            nx, ny = (int(v) for v in fields["lattice"])
            spacing = float(fields["spacing"][0])
            domain = tuple(float(v) for v in fields["domain"])
            raw = path.parent / fields["data"][0]
            cp = np.frombuffer(raw.read_bytes(), dtype="<f8")
            if cp.size != ny * nx * 2:
                raise FormatError(f"{path}: payload size mismatch")
            return BSplineFFD(spacing, cp.reshape(ny, nx, 2), domain)
    except (KeyError, ValueError, IndexError, OSError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    raise FormatError(f"{path}: unknown transform kind {kind!r}")
