"""Similarity measures, block-matching linear registration and B-spline FFD registration.

All registrations estimate the mapping from reference (target) coordinates to
floating (atlas) coordinates, so floating images and labels are pulled back
onto the reference grid with a single resampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, GeometryError, NumericError, RegistrationError
from .grid import ImageGrid, LabelMap, downsample2x, smooth_array
from .transform import (
    Affine2D,
    BSplineFFD,
    DisplacementField,
    Rigid2D,
    bending_energy,
    bending_gradient,
    bilinear,
    dense_from_lattice,
    lattice_adjoint,
    physical_center,
    pixel_coords,
    refine_ffd,
    resample_intensity,
    to_field,
)

log = logging.getLogger(__name__)

DET_RANGE = (0.2, 5.0)


@dataclass(frozen=True)
class BlockMatchParams:
    block_size: int = 8
    search_radius: int = 4
    variance_keep_fraction: float = 0.5
    lts_keep_fraction: float = 0.5
    levels: int = 3
    iters_per_level: int = 5

    def __post_init__(self):
        if self.block_size < 2 or self.search_radius < 1:
            raise ConfigError("block_size must be >= 2 and search_radius >= 1")
        for name in ("variance_keep_fraction", "lts_keep_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.levels < 1 or self.iters_per_level < 1:
            raise ConfigError("levels and iters_per_level must be >= 1")


@dataclass(frozen=True)
class FfdParams:
    """Non-rigid registration settings.

    ``control_spacing`` is in mm; ``None`` means eight times the finest pixel
    spacing.  ``min_improvement`` ends a level once an accepted step lowers
    the objective by less than that amount.
    """

    control_spacing: float | None = None
    levels: int = 3
    max_iters_per_level: int = 300
    bending_weight: float = 0.01
    step_tolerance: float = 1e-6
    similarity: str = "NCC"
    min_improvement: float = 1e-6

    def __post_init__(self):
        if self.control_spacing is not None and self.control_spacing <= 0:
            raise ConfigError("control_spacing must be > 0")
        if self.bending_weight < 0:
            raise ConfigError("bending_weight must be >= 0")
        if self.similarity not in ("NCC", "SSD"):
            raise ConfigError(f"similarity must be NCC or SSD, got {self.similarity!r}")
        if self.levels < 1 or self.max_iters_per_level < 0:
            raise ConfigError("levels must be >= 1 and max_iters_per_level >= 0")


@dataclass(frozen=True)
class Correspondence:
    ref_point: tuple[float, float]
    flo_point: tuple[float, float]
    score: float


def _array(img) -> np.ndarray:
    return img.data if isinstance(img, (ImageGrid, LabelMap)) else np.asarray(img, dtype=np.float64)


def _mask_array(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    arr = mask.data if isinstance(mask, LabelMap) else np.asarray(mask)
    if arr.shape != shape:
        raise GeometryError(f"mask shape {arr.shape} does not match image shape {shape}")
    return arr != 0


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def ncc(a, b, mask=None) -> float:
    """Pearson correlation over the masked pixels; 0 if either side is flat."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise GeometryError(f"ncc: shapes differ {a.shape} vs {b.shape}")
    m = _mask_array(mask, a.shape)
    if m is not None:
        a, b = a[m], b[m]
    else:
        a, b = a.ravel(), b.ravel()
    if a.size < 2:
        raise NumericError("ncc needs at least two pixels")
    ac = a - a.mean()
    bc = b - b.mean()
    va, vb = np.dot(ac, ac), np.dot(bc, bc)
    if va <= 0 or vb <= 0:
        return 0.0
    return float(np.clip(np.dot(ac, bc) / math.sqrt(va * vb), -1.0, 1.0))


def lncc_map(a, b, sigma: float = 2.0) -> np.ndarray:
    """Gaussian-windowed local correlation at every pixel, in [-1, 1]."""
    if sigma <= 0:
        raise ConfigError("lncc sigma must be > 0")
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise GeometryError(f"lncc: shapes differ {a.shape} vs {b.shape}")
    ma, mb = smooth_array(a, sigma), smooth_array(b, sigma)
    va = smooth_array(a * a, sigma) - ma * ma
    vb = smooth_array(b * b, sigma) - mb * mb
    cov = smooth_array(a * b, sigma) - ma * mb
    ok = (va >= 1e-12) & (vb >= 1e-12)
    out = np.zeros_like(a)
    out[ok] = cov[ok] / np.sqrt(va[ok] * vb[ok])
    return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Block matching
# ---------------------------------------------------------------------------

def _shift_order(radius: int) -> np.ndarray:
    shifts = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    shifts.sort(key=lambda s: (s[0] ** 2 + s[1] ** 2, s[0], s[1]))
    return np.array(shifts, dtype=np.int64)


def block_match(ref, flo, params: BlockMatchParams | None = None, mask=None) -> list[Correspondence]:
    """Best-NCC displacement for the most textured reference blocks.

    ``flo`` must already live on the reference grid (same shape and spacing).
    Candidate blocks must lie fully inside ``flo``.  Ties in score go to the
    smallest displacement, then to lexicographic ``(dy, dx)``.
    """
    params = params or BlockMatchParams()
    spacing = ref.spacing if isinstance(ref, ImageGrid) else (1.0, 1.0)
    r, f = _array(ref), _array(flo)
    if r.shape != f.shape:
        raise GeometryError("block_match: reference and floating images must share a grid")
    m = _mask_array(mask, r.shape)
    b, rad = params.block_size, params.search_radius
    h, w = r.shape
    ys, xs = np.meshgrid(np.arange(0, h - b + 1, b), np.arange(0, w - b + 1, b), indexing="ij")
    ys, xs = ys.ravel(), xs.ravel()
    if ys.size == 0:
        raise NumericError("image smaller than one block")

    blocks = sliding_window_view(r, (b, b))[ys, xs]  # (nb, b, b)
    if m is not None:
        frac = sliding_window_view(m, (b, b))[ys, xs].mean(axis=(1, 2))
        inside = frac >= 0.5
        ys, xs, blocks = ys[inside], xs[inside], blocks[inside]
    var = blocks.reshape(len(blocks), -1).var(axis=1)
    textured = var > 1e-10 * max(1.0, float(np.abs(r).max()) ** 2)
    order = np.flatnonzero(textured)
    if order.size == 0:
        raise NumericError("no blocks survive the variance filter")
    keep = max(1, math.ceil(params.variance_keep_fraction * order.size - 1e-9))
    order = order[np.argsort(-var[order], kind="stable")[:keep]]
    order.sort()
    ys, xs, blocks = ys[order], xs[order], blocks[order]

    shifts = _shift_order(rad)
    padded = np.pad(f, rad, mode="constant", constant_values=np.nan)
    windows = sliding_window_view(padded, (b, b))
    iy = ys[:, None] + shifts[None, :, 0] + rad
    ix = xs[:, None] + shifts[None, :, 1] + rad
    cand = windows[iy, ix]  # (nb, ns, b, b)

    rc = blocks - blocks.mean(axis=(1, 2), keepdims=True)
    fc = cand - cand.mean(axis=(2, 3), keepdims=True)
    cov = np.einsum("nij,nsij->ns", rc, fc)
    vr = np.einsum("nij,nij->n", rc, rc)
    vf = np.einsum("nsij,nsij->ns", fc, fc)
    with np.errstate(invalid="ignore", divide="ignore"):
        score = cov / np.sqrt(vr[:, None] * vf)
    score = np.where(vf > 0, score, 0.0)
    score = np.where(np.isnan(cand[:, :, 0, 0]) | np.isnan(cand[:, :, -1, -1]), -np.inf, score)
    score = np.clip(score, -1.0, 1.0)
    best = np.argmax(score, axis=1)
    column = {(int(dy), int(dx)): j for j, (dy, dx) in enumerate(shifts)}

    sx, sy = spacing
    out = []
    for k in range(len(ys)):
        dy, dx = (int(v) for v in shifts[best[k]])
        s = score[k, best[k]]
        if not np.isfinite(s):
            continue
        row = score[k]
        if s >= 1.0 - 1e-9:
            fx = fy = 0.0  # exact match: the peak is on the integer grid
        else:
            fx = _parabolic(row, column, (dy, dx - 1), (dy, dx + 1), s)
            fy = _parabolic(row, column, (dy - 1, dx), (dy + 1, dx), s)
        cx = (xs[k] + (b - 1) / 2.0) * sx
        cy = (ys[k] + (b - 1) / 2.0) * sy
        out.append(Correspondence((cx, cy), (cx + (dx + fx) * sx, cy + (dy + fy) * sy), float(s)))
    if not out:
        raise NumericError("no block found a valid match")
    return out


def _parabolic(row, column, lo, hi, center) -> float:
    """Sub-pixel offset of a score peak from a three-point parabola; 0 at the search edge."""
    if lo not in column or hi not in column:
        return 0.0
    a, c = row[column[lo]], row[column[hi]]
    if not (np.isfinite(a) and np.isfinite(c)):
        return 0.0
    curv = a - 2.0 * center + c
    if curv >= 0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / curv, -0.5, 0.5))


# ---------------------------------------------------------------------------
# Robust transform fitting
# ---------------------------------------------------------------------------

def _fit_rigid(p: np.ndarray, q: np.ndarray, center) -> Rigid2D:
    pm, qm = p.mean(axis=0), q.mean(axis=0)
    a, b = p - pm, q - qm
    num = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    den = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    theta = math.atan2(num, den)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    ctr = np.asarray(center, dtype=np.float64)
    t = qm - rot @ pm + rot @ ctr - ctr
    return Rigid2D(theta, t[0], t[1], tuple(ctr))


def _fit_affine(p: np.ndarray, q: np.ndarray) -> Affine2D:
    x = np.column_stack([p, np.ones(len(p))])
    ata = x.T @ x
    if np.linalg.matrix_rank(ata) < 3 or np.linalg.cond(ata) > 1e12:
        raise NumericError("degenerate (collinear) correspondences for an affine fit")
    beta = np.linalg.solve(ata, x.T @ q)  # (3, 2)
    return Affine2D(beta[:2].T, beta[2])


def _residuals(t, p, q) -> np.ndarray:
    x, y = t.apply(p[:, 0], p[:, 1])
    return np.hypot(x - q[:, 0], y - q[:, 1])


_MIN_POINTS = {"rigid": 3, "affine": 4}


def fit_transform_lts(
    corrs: Sequence[Correspondence] | tuple[np.ndarray, np.ndarray],
    model: str = "rigid",
    keep_fraction: float = 0.5,
    center=(0.0, 0.0),
    max_iter: int = 10,
) -> Rigid2D | Affine2D:
    """Iterated least-trimmed-squares fit of a rigid or affine model.

    Fits on everything, keeps the ``keep_fraction`` of pairs with the smallest
    residual (plus any tied with the cutoff), refits, and repeats until the
    kept set stops changing.
    """
    if model not in _MIN_POINTS:
        raise ConfigError(f"model must be rigid or affine, got {model!r}")
    if isinstance(corrs, tuple):
        p, q = (np.asarray(v, dtype=np.float64) for v in corrs)
    else:
        p = np.array([c.ref_point for c in corrs], dtype=np.float64).reshape(-1, 2)
        q = np.array([c.flo_point for c in corrs], dtype=np.float64).reshape(-1, 2)
    n = len(p)
    need = _MIN_POINTS[model]
    if n < need:
        raise NumericError(f"{model} fit needs at least {need} correspondences, got {n}")

    def fit(idx):
        if model == "rigid":
            return _fit_rigid(p[idx], q[idx], center)
        return _fit_affine(p[idx], q[idx])

    keep = min(n, max(need, math.ceil(keep_fraction * n - 1e-9)))
    idx = np.arange(n)
    t = fit(idx)
    for _ in range(max_iter):
        res = _residuals(t, p, q)
        cutoff = np.partition(res, keep - 1)[keep - 1]
        # pairs tied with the cutoff stay in, so exact fits are not trimmed arbitrarily
        new_idx = np.flatnonzero(res <= cutoff + 1e-9)
        if np.array_equal(new_idx, idx):
            break
        idx = new_idx
        t = fit(idx)
    return t


# ---------------------------------------------------------------------------
# Multi-resolution block-matching registration
# ---------------------------------------------------------------------------

def _pyramid(img: ImageGrid, levels: int) -> list[ImageGrid]:
    out = [img]
    for _ in range(levels - 1):
        out.append(downsample2x(out[-1]))
    return out


def _usable_levels(shape, params: BlockMatchParams) -> int:
    n = 1
    while n < params.levels and min(shape) // (2**n) >= 4 * params.block_size:
        n += 1
    return n


def _check_plausible(t: Affine2D) -> None:
    det = t.det
    if not (DET_RANGE[0] <= abs(det) <= DET_RANGE[1]) or det <= 0:
        raise RegistrationError(f"implausible transform (det {det:.3g})")


def block_match_register(
    ref: ImageGrid,
    flo: ImageGrid,
    model: str = "rigid",
    params: BlockMatchParams | None = None,
    mask=None,
    init: Rigid2D | Affine2D | None = None,
) -> Rigid2D | Affine2D:
    """Global rigid or affine registration by iterated block matching.

    Rigid rotations are parametrised about the physical centre of ``ref``.
    """
    params = params or BlockMatchParams()
    if model not in _MIN_POINTS:
        raise ConfigError(f"model must be rigid or affine, got {model!r}")
    center = physical_center(ref)
    m = _mask_array(mask, ref.shape)
    n_levels = _usable_levels(ref.shape, params)
    refs = _pyramid(ref, n_levels)
    flos = _pyramid(flo, n_levels)

    if init is None:
        current: Rigid2D | Affine2D = Rigid2D(center=center) if model == "rigid" else Affine2D.identity()
    elif model == "rigid" and isinstance(init, Affine2D):
        current = _fit_rigid_to_affine(init, ref, center)
    elif model == "affine":
        current = init.as_affine()
    else:
        current = init

    for level in reversed(range(n_levels)):
        ref_l, flo_l = refs[level], flos[level]
        m_l = None if m is None else m[:: 2**level, :: 2**level]
        for _ in range(params.iters_per_level):
            aff = current.as_affine()
            warped = resample_intensity(flo_l, to_field(aff, ref_l))
            try:
                corrs = block_match(ref_l, warped, params, m_l)
                p = np.array([c.ref_point for c in corrs])
                q = np.array([c.flo_point for c in corrs])
                qx, qy = aff.apply(q[:, 0], q[:, 1])
                new = fit_transform_lts((p, np.column_stack([qx, qy])), model, params.lts_keep_fraction, center)
            except NumericError as exc:
                if level > 0:
                    # too little structure at this scale: leave it to finer levels
                    break
                raise RegistrationError(f"block matching failed at level {level}: {exc}") from exc
            change = _max_corner_change(current.as_affine(), new.as_affine(), ref)
            current = new
            if change < 1e-3 * min(ref_l.spacing):
                break

    aff = current.as_affine()
    if not (np.all(np.isfinite(aff.m)) and np.all(np.isfinite(aff.t))):
        raise RegistrationError("non-finite transform parameters")
    _check_plausible(aff)
    return current


def _max_corner_change(a: Affine2D, b: Affine2D, ref) -> float:
    ex, ey = (ref.width - 1) * ref.spacing[0], (ref.height - 1) * ref.spacing[1]
    cx = np.array([0.0, ex, 0.0, ex])
    cy = np.array([0.0, 0.0, ey, ey])
    ax, ay = a.apply(cx, cy)
    bx, by = b.apply(cx, cy)
    return float(np.max(np.hypot(ax - bx, ay - by)))


def _fit_rigid_to_affine(aff: Affine2D, ref, center) -> Rigid2D:
    x, y = pixel_coords(ref.shape, ref.spacing)
    p = np.column_stack([x.ravel()[::7], y.ravel()[::7]])
    qx, qy = aff.apply(p[:, 0], p[:, 1])
    return _fit_rigid(p, np.column_stack([qx, qy]), center)


# ---------------------------------------------------------------------------
# B-spline free-form deformation
# ---------------------------------------------------------------------------

@dataclass
class FfdResult:
    ffd: BSplineFFD
    field: DisplacementField
    objective_trace: list[list[float]] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return sum(max(len(t) - 1, 0) for t in self.objective_trace)


class _Objective:
    """Objective and analytic gradient for one resolution level."""

    def __init__(self, ref: ImageGrid, flo: ImageGrid, init: np.ndarray, mask, ffd: BSplineFFD, params: FfdParams):
        self.ref = ref
        self.flo = flo.data
        self.fsx, self.fsy = flo.spacing
        x, y = pixel_coords(ref.shape, ref.spacing)
        self.base_x = x + init[..., 0]
        self.base_y = y + init[..., 1]
        self.mask = np.ones(ref.shape, dtype=bool) if mask is None else mask
        if self.mask.sum() < 2:
            raise NumericError("registration mask selects fewer than two pixels")
        self.a = ref.data[self.mask]
        self.ac = self.a - self.a.mean()
        self.va = float(np.dot(self.ac, self.ac)) / self.a.size
        self.wy, self.wx = ffd.basis(ref)
        self.template = ffd
        self.params = params

    def __call__(self, cp: np.ndarray, gradient: bool = True):
        d = dense_from_lattice(cp, self.wy, self.wx)
        qx = (self.base_x + d[..., 0]) / self.fsx
        qy = (self.base_y + d[..., 1]) / self.fsy
        if gradient:
            w, gx, gy = bilinear(self.flo, qx, qy, gradient=True)
        else:
            w = bilinear(self.flo, qx, qy)
        wm = w[self.mask]
        n = wm.size
        if self.params.similarity == "NCC":
            wc = wm - wm.mean()
            vw = float(np.dot(wc, wc)) / n
            if self.va <= 0 or vw <= 0:
                sim, dsim = 0.0, np.zeros(n)
            else:
                sd = math.sqrt(self.va * vw)
                sim = float(np.dot(self.ac, wc)) / n / sd
                dsim = self.ac / (n * sd) - sim * wc / (n * vw)
            value = -sim
            dval = -dsim
        else:
            diff = wm - self.a
            value = float(np.dot(diff, diff)) / n
            dval = 2.0 * diff / n
        ffd = self.template.with_points(cp) if self.params.bending_weight else None
        if ffd is not None:
            value += self.params.bending_weight * bending_energy(ffd)
        if not math.isfinite(value):
            raise RegistrationError("non-finite registration objective")
        if not gradient:
            return value
        g = np.zeros(self.ref.shape + (2,))
        g[self.mask, 0] = dval * gx[self.mask] / self.fsx
        g[self.mask, 1] = dval * gy[self.mask] / self.fsy
        grad = lattice_adjoint(g, self.wy, self.wx)
        if ffd is not None:
            grad += self.params.bending_weight * bending_gradient(ffd)
        return value, grad


def ffd_objective(ref: ImageGrid, flo: ImageGrid, ffd: BSplineFFD, init: DisplacementField | None = None,
                  params: FfdParams | None = None, mask=None) -> tuple[float, np.ndarray]:
    """Objective value and its analytic gradient with respect to the control points."""
    params = params or FfdParams()
    init_data = np.zeros(ref.shape + (2,)) if init is None else init.data
    obj = _Objective(ref, flo, init_data, _mask_array(mask, ref.shape), ffd, params)
    return obj(ffd.control_points)


def _optimise(obj: _Objective, cp: np.ndarray, params: FfdParams, spacing: float, pixel: float):
    value, grad = obj(cp)
    trace = [value]
    direction = -grad
    step = pixel
    max_step = spacing / 2.0
    for _ in range(params.max_iters_per_level):
        norm = float(np.max(np.abs(direction)))
        if norm < 1e-14:
            break
        unit = direction / norm
        alpha, accepted = step, None
        while alpha / spacing >= params.step_tolerance:
            trial = cp + alpha * unit
            tv = obj(trial, gradient=False)
            if tv < value:
                accepted = trial
                break
            alpha *= 0.5
        if accepted is None:
            break
        new_value, new_grad = obj(accepted)
        improvement = value - new_value
        cp, value = accepted, new_value
        trace.append(value)
        gg = float(np.sum(grad * grad))
        beta = max(0.0, float(np.sum(new_grad * (new_grad - grad))) / gg) if gg > 0 else 0.0
        direction = -new_grad + beta * direction
        if np.sum(direction * new_grad) >= 0:
            direction = -new_grad
        grad = new_grad
        step = min(alpha * 2.0, max_step)
        if improvement < params.min_improvement * max(1.0, abs(value)):
            break
    return cp, trace


def ffd_register(
    ref: ImageGrid,
    flo: ImageGrid,
    init: DisplacementField | None = None,
    params: FfdParams | None = None,
    mask=None,
) -> FfdResult:
    """Multi-resolution B-spline registration of ``flo`` onto ``ref``.

    The deformation is added to ``init``: a reference pixel ``p`` samples
    ``flo`` at ``p + init[p] + ffd(p)``.  Control spacing doubles (and the
    images halve) at each coarser level; lattices are carried to the next
    level by exact B-spline subdivision.  If the result does not beat the
    unmodified ``init`` at full resolution, a zero deformation is returned.
    """
    params = params or FfdParams()
    if init is None:
        init = DisplacementField.zeros(ref)
    if not init.same_geometry(ref):
        raise GeometryError("initial field does not match the reference grid")
    m = _mask_array(mask, ref.shape)
    if m is not None and m.sum() < 2:
        raise NumericError("registration mask is empty")
    spacing = params.control_spacing or 8.0 * min(ref.spacing)

    n_levels = params.levels
    while n_levels > 1 and min(ref.shape) // (2 ** (n_levels - 1)) < 8:
        n_levels -= 1
    refs = _pyramid(ref, n_levels)
    flos = _pyramid(flo, n_levels)

    coarse = spacing * 2 ** (n_levels - 1)
    ffd = BSplineFFD.zeros(ref, coarse)
    traces = []
    for level in reversed(range(n_levels)):
        s = 2**level
        ref_l = refs[level]
        init_l = init.data[::s, ::s]
        m_l = None if m is None else m[::s, ::s]
        obj = _Objective(ref_l, flos[level], init_l, m_l, ffd, params)
        cp, trace = _optimise(obj, np.array(ffd.control_points), params, ffd.grid_spacing, min(ref_l.spacing))
        ffd = ffd.with_points(cp)
        traces.append(trace)
        if level > 0:
            ffd = refine_ffd(ffd)

    # coarse levels see smoothed, decimated images and can drift from an
    # already-perfect init; never return something worse than the init itself
    zero = np.zeros_like(ffd.control_points)
    if obj(zero, gradient=False) <= obj(np.asarray(ffd.control_points), gradient=False):
        ffd = ffd.with_points(zero)
        traces.append([float(obj(zero, gradient=False))])

    dense = DisplacementField(ffd.dense(ref), ref.spacing)
    return FfdResult(ffd, init + dense, traces)
