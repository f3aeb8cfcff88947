"""Synthetic short-axis slices with a crescent right ventricle.

Each phantom holds a circular left ventricle (myocardial ring around a blood
pool, labelled background) and an elliptical right ventricle whose cavity is
cut by the left ventricle into a crescent.  Cohorts add seeded geometric
jitter; held-out test slices are additionally warped by a known smooth
B-spline deformation so registration and fusion can be scored against truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grid import AtlasPair, AtlasSet, ImageGrid, LabelMap, save_image
from .transform import BSplineFFD, DisplacementField, resample_intensity, resample_labels, save_transform, to_field

BORDER = 8


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry in pixels, intensities in arbitrary units.

    ``rv_radii`` are the semi-axes of the RV cavity ellipse before the LV cut;
    ``rotation`` turns the whole heart about the image centre.
    """

    image_size: tuple[int, int] = (128, 128)
    rv_center: tuple[float, float] = (54.0, 62.0)
    rv_radii: tuple[float, float] = (24.0, 28.0)
    rv_wall: float = 3.0
    lv_center: tuple[float, float] = (78.0, 64.0)
    lv_radius: float = 18.0
    lv_wall: float = 6.0
    rotation: float = 0.0
    background: float = 30.0
    myocardium: float = 90.0
    blood: float = 210.0
    noise_sigma: float = 0.0
    spacing: tuple[float, float] = (1.0, 1.0)
    rng_seed: int = 0

    def validate(self) -> None:
        w, h = self.image_size
        if self.rv_wall < 2:
            raise ConfigError(f"rv wall thickness must be >= 2 px, got {self.rv_wall}")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if min(self.rv_radii) <= 0 or self.lv_radius <= self.lv_wall or self.lv_wall <= 0:
            raise ConfigError("non-positive radii or LV wall thicker than LV")
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        reach = []
        for (px, py), (rx, ry) in (
            (self.rv_center, (self.rv_radii[0] + self.rv_wall, self.rv_radii[1] + self.rv_wall)),
            (self.lv_center, (self.lv_radius, self.lv_radius)),
        ):
            dx, dy = px - cx, py - cy
            qx, qy = cx + c * dx - s * dy, cy + s * dx + c * dy
            r = max(rx, ry)
            reach.append((qx - r, qy - r, qx + r, qy + r))
        x0 = min(b[0] for b in reach)
        y0 = min(b[1] for b in reach)
        x1 = max(b[2] for b in reach)
        y1 = max(b[3] for b in reach)
        if x0 < BORDER or y0 < BORDER or x1 > w - 1 - BORDER or y1 > h - 1 - BORDER:
            raise ConfigError("phantom shapes do not fit inside the image with an 8 px border")

    def scaled(self, factor: float, about: tuple[float, float] | None = None) -> "PhantomSpec":
        """Shrink or grow the heart about ``about`` (default: the LV centre); walls are kept."""
        ax, ay = about if about is not None else self.lv_center

        def move(p):
            return (ax + (p[0] - ax) * factor, ay + (p[1] - ay) * factor)

        lv_r = max(self.lv_radius * factor, self.lv_wall + 2.0)
        return replace(
            self,
            rv_center=move(self.rv_center),
            rv_radii=(self.rv_radii[0] * factor, self.rv_radii[1] * factor),
            lv_center=move(self.lv_center),
            lv_radius=lv_r,
        )


def _local_coords(spec: PhantomSpec):
    w, h = spec.image_size
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    # rotate sample positions backwards so shapes appear rotated forwards
    dx, dy = x - cx, y - cy
    return cx + c * dx + s * dy, cy - s * dx + c * dy


def _regions(spec: PhantomSpec):
    x, y = _local_coords(spec)
    (rcx, rcy), (rx, ry), wall = spec.rv_center, spec.rv_radii, spec.rv_wall
    lcx, lcy = spec.lv_center
    d_lv = np.hypot(x - lcx, y - lcy)

    def ellipse(ax, ay):
        return ((x - rcx) / ax) ** 2 + ((y - rcy) / ay) ** 2 <= 1.0

    rv_cavity = ellipse(rx, ry) & (d_lv > spec.lv_radius + wall)
    rv_epi = ellipse(rx + wall, ry + wall) & (d_lv > spec.lv_radius)
    lv_epi = d_lv <= spec.lv_radius
    lv_cavity = d_lv <= spec.lv_radius - spec.lv_wall
    return rv_cavity, rv_epi, lv_epi, lv_cavity


def render(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free intensity raster and label raster."""
    spec.validate()
    rv_cavity, rv_epi, lv_epi, lv_cavity = _regions(spec)
    img = np.full(rv_cavity.shape, spec.background, dtype=np.float64)
    img[lv_epi | rv_epi] = spec.myocardium
    img[lv_cavity | rv_cavity] = spec.blood
    labels = np.zeros(rv_cavity.shape, dtype=np.uint8)
    labels[rv_epi] = 2
    labels[rv_cavity] = 1
    return img, labels


def _quantise(arr: np.ndarray) -> np.ndarray:
    # f32-representable intensities keep the on-disk format compact and lossless
    return arr.astype(np.float32).astype(np.float64)


def make_phantom(spec: PhantomSpec) -> tuple[AtlasPair, LabelMap]:
    """Rasterise one slice; returns the atlas pair and its ground-truth labels."""
    img, labels = render(spec)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.rng_seed)
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    truth = LabelMap(labels, spec.spacing)
    pair = AtlasPair(ImageGrid(_quantise(img), spec.spacing), truth, f"phantom-{spec.rng_seed}")
    return pair, truth


def lens_area(r1: float, r2: float, d: float) -> float:
    """Area of the intersection of two discs."""
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    a1 = r1 * r1 * math.acos((d * d + r1 * r1 - r2 * r2) / (2 * d * r1))
    a2 = r2 * r2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2 * d * r2))
    k = 0.5 * math.sqrt((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
    return a1 + a2 - k


def analytic_areas(spec: PhantomSpec) -> tuple[float, float]:
    """Exact (blood pool, epicardium) areas in px² for a circular RV (``rx == ry``)."""
    rx, ry = spec.rv_radii
    if rx != ry:
        raise ConfigError("closed-form areas need a circular RV cavity")
    d = math.dist(spec.rv_center, spec.lv_center)
    w = spec.rv_wall
    cavity = math.pi * rx**2 - lens_area(rx, spec.lv_radius + w, d)
    epi = math.pi * (rx + w) ** 2 - lens_area(rx + w, spec.lv_radius, d)
    return cavity, epi


# ---------------------------------------------------------------------------
# Cohorts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Variability:
    """Jitter ranges (uniform, symmetric) and deformation settings for a cohort.

    ``warp_magnitude`` is the largest displacement (px) of the smooth warp
    applied to held-out test slices; ``es_scale`` shrinks end-systolic hearts;
    ``slice_span`` shrinks apical slices relative to basal ones.
    """

    center_jitter: float = 3.0
    radius_jitter: float = 0.1
    wall_jitter: float = 0.5
    lv_jitter: float = 0.1
    rotation_jitter: float = 0.08
    intensity_jitter: float = 0.05
    subject_scale_jitter: float = 0.1
    warp_magnitude: float = 5.0
    warp_spacing: float = 24.0
    es_scale: float = 0.8
    slice_span: float = 0.2
    noise_fraction: float = 0.05

    @classmethod
    def none(cls) -> "Variability":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 24.0, 1.0, 0.0, 0.0)

    def validate(self) -> None:
        if min(self.center_jitter, self.radius_jitter, self.wall_jitter, self.lv_jitter, self.rotation_jitter,
               self.intensity_jitter, self.subject_scale_jitter, self.warp_magnitude, self.noise_fraction) < 0:
            raise ConfigError("jitter ranges must be non-negative")
        if self.radius_jitter >= 1 or self.lv_jitter >= 1 or self.subject_scale_jitter >= 1:
            raise ConfigError("relative jitter must be < 1")
        if not 0 < self.es_scale <= 1.5 or not 0 <= self.slice_span < 1 or self.warp_spacing <= 0:
            raise ConfigError("invalid es_scale, slice_span or warp_spacing")


@dataclass
class PhantomSlice:
    image: ImageGrid
    truth: LabelMap
    field: DisplacementField | None = None
    ffd: BSplineFFD | None = None


@dataclass
class PhantomCase:
    case_id: str
    slice_thickness: float
    phases: dict[str, list[PhantomSlice]] = field(default_factory=dict)


@dataclass
class Cohort:
    atlases: dict[str, AtlasSet]
    cases: list[PhantomCase]
    base: PhantomSpec
    variability: Variability


def _u(rng, span: float) -> float:
    return float(rng.uniform(-span, span)) if span > 0 else 0.0


def _subject(base: PhantomSpec, var: Variability, rng) -> PhantomSpec:
    dx, dy = _u(rng, var.center_jitter), _u(rng, var.center_jitter)
    scale = 1.0 + _u(rng, var.subject_scale_jitter)
    rx = base.rv_radii[0] * (1.0 + _u(rng, var.radius_jitter))
    ry = base.rv_radii[1] * (1.0 + _u(rng, var.radius_jitter))
    gain = 1.0 + _u(rng, var.intensity_jitter)
    spec = replace(
        base,
        rv_center=(base.rv_center[0] + dx, base.rv_center[1] + dy),
        rv_radii=(rx, ry),
        rv_wall=max(2.0, base.rv_wall + _u(rng, var.wall_jitter)),
        lv_center=(base.lv_center[0] + dx, base.lv_center[1] + dy),
        lv_radius=base.lv_radius * (1.0 + _u(rng, var.lv_jitter)),
        rotation=base.rotation + _u(rng, var.rotation_jitter),
        myocardium=base.myocardium * gain,
        blood=base.blood * gain,
    )
    return spec.scaled(scale) if scale != 1.0 else spec


def _phase_slice(spec: PhantomSpec, var: Variability, phase: str, level: float) -> PhantomSpec:
    factor = (var.es_scale if phase == "ES" else 1.0) * (1.0 - var.slice_span * level)
    return spec.scaled(factor) if factor != 1.0 else spec


def random_warp(reference: ImageGrid, magnitude: float, spacing: float, rng) -> BSplineFFD:
    """Smooth random B-spline warp whose largest displacement equals ``magnitude`` (mm)."""
    ffd = BSplineFFD.zeros(reference, spacing)
    if magnitude <= 0:
        return ffd
    cp = rng.normal(size=ffd.control_points.shape)
    peak = np.max(np.hypot(*ffd.with_points(cp).dense(reference).transpose(2, 0, 1)))
    return ffd.with_points(cp * magnitude / peak)


def make_cohort(
    n: int,
    base: PhantomSpec | None = None,
    variability: Variability | None = None,
    seed: int = 0,
    n_cases: int = 2,
    slices_per_phase: int = 2,
    slice_thickness: float = 8.0,
) -> Cohort:
    """``n`` atlas slices per phase plus ``n_cases`` held-out warped test cases.

    Every atlas and test subject draws its own jitter from a generator keyed
    on ``(seed, role, index)``, so members do not depend on generation order.
    """
    if n < 3:
        raise ConfigError("a cohort needs at least 3 atlases")
    base = base or PhantomSpec()
    var = variability or Variability()
    var.validate()
    base.validate()
    contrast = abs(base.blood - base.background)
    sigma = var.noise_fraction * contrast

    atlases = {}
    for phase_no, phase in enumerate(("ED", "ES")):
        pairs = []
        for k in range(n):
            rng = np.random.default_rng([seed, 0, k])
            subject = _subject(base, var, rng)
            level = float(rng.uniform(0.0, 1.0))
            spec = _phase_slice(subject, var, phase, level)
            spec = replace(spec, noise_sigma=sigma, rng_seed=_child_seed(seed, 1 + phase_no, k))
            pair, _ = make_phantom(spec)
            pairs.append(AtlasPair(pair.intensity, pair.labels, f"atlas{k:03d}_{phase}"))
        atlases[phase] = AtlasSet(phase, pairs)

    cases = []
    for c in range(n_cases):
        rng = np.random.default_rng([seed, 3, c])
        subject = _subject(base, var, rng)
        case = PhantomCase(f"case{c}", slice_thickness)
        for phase in ("ED", "ES"):
            slices = []
            for s in range(slices_per_phase):
                level = s / (slices_per_phase - 1) if slices_per_phase > 1 else 0.0
                spec = _phase_slice(subject, var, phase, level)
                img, labels = render(spec)
                ref = ImageGrid(img, spec.spacing)
                warp = random_warp(ref, var.warp_magnitude * float(rng.uniform(0.6, 1.0)), var.warp_spacing, rng)
                fld = to_field(warp, ref)
                warped = resample_intensity(ref, fld).data
                if sigma > 0:
                    warped = warped + rng.normal(0.0, sigma, warped.shape)
                truth = resample_labels(LabelMap(labels, spec.spacing), fld)
                slices.append(PhantomSlice(ImageGrid(_quantise(warped), spec.spacing), truth, fld, warp))
            case.phases[phase] = slices
        cases.append(case)
    return Cohort(atlases, cases, base, var)


def _child_seed(seed: int, role: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, role, index]).generate_state(1)[0])


def write_cohort(cohort: Cohort, out_dir) -> dict[str, Path]:
    """Write rasters, true warps and manifests; returns manifest paths by name."""
    from .pipeline import write_atlas_manifest, write_case_manifest

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {"atlas": write_atlas_manifest(cohort.atlases, out / "atlas.json")}
    for case in cohort.cases:
        phases = {}
        for phase, slices in case.phases.items():
            entries = []
            for s, sl in enumerate(slices):
                stem = out / case.case_id / f"{phase}_s{s}"
                img = save_image(sl.image, stem.with_name(stem.name + "_img"))
                lab = save_image(sl.truth, stem.with_name(stem.name + "_lab"))
                entry = {"image": img, "labels": lab}
                if sl.ffd is not None:
                    entry["true_warp"] = save_transform(sl.ffd, stem.with_name(stem.name + "_warp.ffd"))
                entries.append(entry)
            phases[phase] = entries
        spacing = next(iter(case.phases.values()))[0].image.spacing
        written[case.case_id] = write_case_manifest(
            case.case_id, phases, case.slice_thickness, spacing, out / f"{case.case_id}.json"
        )
    return written


def fusion_trial(seed: int, n_misaligned: int = 5, spec: PhantomSpec | None = None,
                 warp_range: tuple[float, float] = (4.0, 6.0), warp_spacing: float = 24.0,
                 noise_fraction: float = 0.05):
    """One well-aligned and ``n_misaligned`` randomly warped noisy copies of a phantom.

    Returns ``(target, warped, truth)`` where ``warped`` is a list of
    ``(image, labels)`` pairs already on the target grid; the aligned copy is first.
    """
    spec = spec or PhantomSpec()
    rng = np.random.default_rng([seed, 11])
    clean, labels = render(spec)
    img = ImageGrid(clean, spec.spacing)
    truth = LabelMap(labels, spec.spacing)
    sigma = noise_fraction * (spec.blood - spec.background)
    target = ImageGrid(clean + rng.normal(0.0, sigma, clean.shape), spec.spacing)
    warped = [(ImageGrid(clean + rng.normal(0.0, sigma, clean.shape), spec.spacing), truth)]
    for _ in range(n_misaligned):
        ffd = random_warp(img, rng.uniform(*warp_range), warp_spacing, rng)
        fld = to_field(ffd, img)
        moved = resample_intensity(img, fld).data
        warped.append((ImageGrid(moved + rng.normal(0.0, sigma, clean.shape), spec.spacing),
                       resample_labels(truth, fld)))
    return target, warped, truth
