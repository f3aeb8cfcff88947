"""Three-phase coarse-to-fine segmentation of per-case slice stacks.

Phase I localises the heart (rigid block matching, majority vote, bounding box);
Phase II produces a rough segmentation inside that box (linear + FFD
registration, globally ranked STEPS); Phase III refines it (label-to-mask
affine alignment, majority-vote mask, FFD registration, locally ranked STEPS).
Each slice is processed independently against the atlas set of its cardiac
phase.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import AtlasForgeError, ConfigError, FormatError, NumericError, RegistrationError
from .fusion import FusionConfig, FusionReport, majority_vote, steps_fuse
from .grid import (
    DEFAULT_ROI_MARGIN,
    EPI,
    AtlasPair,
    AtlasSet,
    ImageGrid,
    LabelMap,
    RoiBox,
    crop_to_roi,
    embed_roi,
    load_image,
    load_labels,
    mask_bounding_box,
    save_image,
    smooth_array,
)
from .metrics import (
    MYOCARDIAL_DENSITY,
    ef_out_of_range,
    ejection_fraction,
    stack_volume,
    ventricular_mass,
)
from .grid import ENDO
from .registration import BlockMatchParams, FfdParams, block_match_register, ffd_register, ncc
from .transform import Affine2D, DisplacementField, resample_intensity, resample_labels, to_field

log = logging.getLogger(__name__)

PHASES = ("ED", "ES")
Trace = Callable[[str, dict], None]


@dataclass(frozen=True)
class PipelineConfig:
    block_match: BlockMatchParams = field(default_factory=BlockMatchParams)
    ffd: FfdParams = field(default_factory=FfdParams)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    roi_margin: int = DEFAULT_ROI_MARGIN
    phase2_model: str = "affine"
    density: float = MYOCARDIAL_DENSITY

    def __post_init__(self):
        if self.phase2_model not in ("rigid", "affine"):
            raise ConfigError(f"phase2_model must be rigid or affine, got {self.phase2_model!r}")
        if self.roi_margin < 0 or self.density <= 0:
            raise ConfigError("roi_margin must be >= 0 and density > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data or {})
        sub = {"block_match": BlockMatchParams, "ffd": FfdParams, "fusion": FusionConfig}
        kwargs = {}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys {sorted(unknown)}")
        for name, value in data.items():
            if name in sub:
                try:
                    kwargs[name] = sub[name](**(value or {}))
                except TypeError as exc:
                    raise ConfigError(f"{name}: {exc}") from None
            else:
                kwargs[name] = value
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SliceEntry:
    image: Path
    labels: Path | None = None


@dataclass(frozen=True)
class PhaseEntry:
    slices: tuple[SliceEntry, ...]
    slice_thickness: float
    spacing: tuple[float, float] | None = None


@dataclass(frozen=True)
class CaseManifest:
    case_id: str
    phases: dict[str, PhaseEntry]

    def __post_init__(self):
        if not self.phases:
            raise ConfigError(f"case {self.case_id!r} lists no phases")
        for name, entry in self.phases.items():
            if name not in PHASES:
                raise ConfigError(f"unknown phase {name!r}")
            if not entry.slices:
                raise ConfigError(f"case {self.case_id!r} phase {name} has no slices")
            if entry.slice_thickness <= 0:
                raise ConfigError("slice thickness must be > 0")


def _rel(path: Path, root: Path) -> str:
    try:
        return Path(path).resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(Path(path).resolve())


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no such manifest: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def write_atlas_manifest(atlases: dict[str, AtlasSet], path, write_rasters: bool = True) -> Path:
    """Write ``atlas.json`` (and the atlas rasters next to it)."""
    path = Path(path)
    root = path.parent
    doc = {"format": "atlasforge-atlas/1", "phases": {}}
    for phase, aset in atlases.items():
        entries = []
        for pair in aset:
            stem = root / "atlas" / pair.id
            img = stem.with_name(pair.id + "_img.hdr")
            lab = stem.with_name(pair.id + "_lab.hdr")
            if write_rasters:
                save_image(pair.intensity, img)
                save_image(pair.labels, lab)
            entries.append({"id": pair.id, "image": _rel(img, root), "labels": _rel(lab, root)})
        doc["phases"][phase] = entries
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_atlas_manifest(path) -> dict[str, AtlasSet]:
    path = Path(path)
    doc = _read_json(path)
    phases = doc.get("phases")
    if not isinstance(phases, dict) or not phases:
        raise ConfigError(f"{path}: atlas manifest needs a non-empty 'phases' object")
    out = {}
    for phase, entries in phases.items():
        pairs = []
        for i, e in enumerate(entries):
            try:
                img = load_image(path.parent / e["image"])
                lab = load_labels(path.parent / e["labels"])
            except KeyError as exc:
                raise ConfigError(f"{path}: atlas entry {i} lacks {exc}") from None
            pairs.append(AtlasPair(img, lab, str(e.get("id", f"{phase}{i}"))))
        out[phase] = AtlasSet(phase, pairs)
    return out


def write_case_manifest(case_id: str, phases: dict[str, list[dict]], slice_thickness: float, spacing, path) -> Path:
    path = Path(path)
    root = path.parent
    doc = {"format": "atlasforge-case/1", "case_id": case_id, "phases": {}}
    for phase, entries in phases.items():
        rows = []
        for e in entries:
            row = {"image": _rel(e["image"], root)}
            for key in ("labels", "true_warp"):
                if e.get(key) is not None:
                    row[key] = _rel(e[key], root)
            rows.append(row)
        doc["phases"][phase] = {
            "slice_thickness": float(slice_thickness),
            "pixel_spacing": [float(s) for s in spacing],
            "slices": rows,
        }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_case_manifest(path) -> CaseManifest:
    path = Path(path)
    doc = _read_json(path)
    try:
        case_id = str(doc["case_id"])
        phases = {}
        for phase, entry in doc["phases"].items():
            slices = tuple(
                SliceEntry(path.parent / s["image"], (path.parent / s["labels"]) if s.get("labels") else None)
                for s in entry["slices"]
            )
            spacing = tuple(float(v) for v in entry["pixel_spacing"]) if "pixel_spacing" in entry else None
            phases[phase] = PhaseEntry(slices, float(entry["slice_thickness"]), spacing)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed case manifest ({exc!r})") from None
    return CaseManifest(case_id, phases)


# ---------------------------------------------------------------------------
# Per-slice phases
# ---------------------------------------------------------------------------

@dataclass
class SliceDiagnostics:
    roi: list[int] | None = None
    refine_roi: list[int] | None = None
    phase2_selected: list[str] = field(default_factory=list)
    phase3_ranking: list[str] = field(default_factory=list)
    failures: dict[str, list[str]] = field(default_factory=dict)
    error: str | None = None

    def fail(self, stage: str, atlas_id: str, reason: str) -> None:
        log.info("%s registration failed for %s: %s", stage, atlas_id, reason)
        self.failures.setdefault(stage, []).append(f"{atlas_id}: {reason}")


def _trace(trace: Trace | None, event: str, **payload) -> None:
    if trace is not None:
        trace(event, payload)


def _phase1(target: ImageGrid, atlases: AtlasSet, config: PipelineConfig, diag: SliceDiagnostics):
    if len(atlases) == 0:
        raise ConfigError("phase I needs at least one atlas")
    transforms: list = []
    props = []
    for pair in atlases:
        try:
            t = block_match_register(target, pair.intensity, "rigid", config.block_match)
        except RegistrationError as exc:
            diag.fail("phase1", pair.id, str(exc))
            transforms.append(None)
            continue
        transforms.append(t)
        props.append(resample_labels(pair.labels, to_field(t, target)))
    if not props:
        raise RegistrationError("phase I: every atlas registration failed")
    vote = majority_vote(props)
    if not vote.data.any():
        raise NumericError("phase I: majority vote is all background")
    return mask_bounding_box(vote, config.roi_margin), transforms


def phase1_localize(target: ImageGrid, atlases: AtlasSet, config: PipelineConfig | None = None,
                    diagnostics: SliceDiagnostics | None = None) -> RoiBox:
    """Heart ROI from globally (rigidly) propagated and majority-voted atlas labels."""
    roi, _ = _phase1(target, atlases, config or PipelineConfig(), diagnostics or SliceDiagnostics())
    return roi


def _offset(roi: RoiBox, spacing) -> np.ndarray:
    return np.array([roi.x0 * spacing[0], roi.y0 * spacing[1]])


def _register_pair(target_c: ImageGrid, pair: AtlasPair, init: Affine2D, config: PipelineConfig, model: str):
    lin = block_match_register(target_c, pair.intensity, model, config.block_match, init=init)
    res = ffd_register(target_c, pair.intensity, to_field(lin.as_affine(), target_c), config.ffd)
    return lin.as_affine(), res.field


def _warp_pair(pair: AtlasPair, fld: DisplacementField) -> tuple[ImageGrid, LabelMap]:
    return resample_intensity(pair.intensity, fld), resample_labels(pair.labels, fld)


def _exact_duplicate(target_c: ImageGrid, warped) -> int | None:
    """Index of a warped atlas whose intensities reproduce the target exactly, if any."""
    tol = 1e-6 * max(1.0, float(np.abs(target_c.data).max()))
    for i, (img, _) in enumerate(warped):
        if np.abs(img.data - target_c.data).max() <= tol:
            return i
    return None


def _fuse(target_c, warped, config, mode, report):
    # an atlas that matches the target pixel for pixel is the target itself
    dup = _exact_duplicate(target_c, warped)
    if dup is not None:
        report.method = f"steps/{mode}/exact-duplicate"
        report.selected = [dup]
        report.ranking = [dup] + [i for i in range(len(warped)) if i != dup]
        return warped[dup][1]
    return steps_fuse(target_c, warped, config.fusion, mode, report=report)


def _phase2(target, roi, atlases, config, diag, init_transforms=None):
    target_c = crop_to_roi(target, roi)
    off = _offset(roi, target.spacing)
    warped, kept, linear = [], [], [None] * len(atlases)
    for i, pair in enumerate(atlases):
        init = init_transforms[i] if init_transforms is not None else None
        init_c = (init.as_affine() if init is not None else Affine2D.identity()).shifted(off)
        try:
            lin_c, fld = _register_pair(target_c, pair, init_c, config, config.phase2_model)
        except RegistrationError as exc:
            diag.fail("phase2", pair.id, str(exc))
            continue
        linear[i] = lin_c.shifted(-off)
        warped.append(_warp_pair(pair, fld))
        kept.append(i)
    if len(warped) < 2:
        raise RegistrationError(
            f"phase II: only {len(warped)} successful registrations; failures: {diag.failures.get('phase2', [])}"
        )
    report = FusionReport("steps/global_top")
    fused = _fuse(target_c, warped, config, "global_top", report)
    diag.phase2_selected = [atlases[kept[i]].id for i in report.selected]
    rough = embed_roi(fused, roi, LabelMap.zeros_like(target))
    return rough, linear


def phase2_rough(target: ImageGrid, roi: RoiBox, atlases: AtlasSet, config: PipelineConfig | None = None,
                 diagnostics: SliceDiagnostics | None = None, init_transforms=None) -> LabelMap:
    """Rough segmentation inside ``roi``; background elsewhere."""
    rough, _ = _phase2(target, roi, atlases, config or PipelineConfig(), diagnostics or SliceDiagnostics(),
                       init_transforms)
    return rough


def label_intensity(labels: LabelMap) -> ImageGrid:
    """Binary epicardium mask rendered as a lightly smoothed intensity image."""
    return ImageGrid(smooth_array(labels.mask(EPI).astype(np.float64) * 100.0, 1.0), labels.spacing)


def _phase3(target, rough, atlases, config, diag, init_transforms=None, phase2_linear=None):
    if not rough.data.any():
        raise NumericError("phase III: rough segmentation is all background")
    rough_img = label_intensity(rough)
    aligned, label_aff = [], [None] * len(atlases)
    for i, pair in enumerate(atlases):
        init = init_transforms[i] if init_transforms is not None else None
        try:
            aff = block_match_register(rough_img, label_intensity(pair.labels), "affine", config.block_match,
                                       init=init)
        except RegistrationError as exc:
            diag.fail("phase3-labels", pair.id, str(exc))
            continue
        label_aff[i] = aff.as_affine()
        aligned.append(resample_labels(pair.labels, to_field(aff, target)))
    if not aligned:
        raise RegistrationError("phase III: every label-to-mask registration failed")
    vote = majority_vote(aligned)
    if not vote.data.any():
        raise NumericError("phase III: refinement mask is empty")
    roi = mask_bounding_box(vote, config.roi_margin)
    diag.refine_roi = roi.as_list()
    target_c = crop_to_roi(target, roi)
    off = _offset(roi, target.spacing)

    warped, kept = [], []
    for i, pair in enumerate(atlases):
        candidates = [t for t in (label_aff[i], phase2_linear[i] if phase2_linear else None) if t is not None]
        if not candidates:
            continue
        init = _best_init(target_c, pair, [c.shifted(off) for c in candidates])
        try:
            res = ffd_register(target_c, pair.intensity, to_field(init, target_c), config.ffd)
        except RegistrationError as exc:
            diag.fail("phase3", pair.id, str(exc))
            continue
        warped.append(_warp_pair(pair, res.field))
        kept.append(i)
    if len(warped) < 2:
        raise RegistrationError(f"phase III: only {len(warped)} successful registrations")
    report = FusionReport("steps/local_n")
    fused = _fuse(target_c, warped, config, "local_n", report)
    diag.phase3_ranking = [atlases[kept[i]].id for i in report.ranking]
    return embed_roi(fused, roi, LabelMap.zeros_like(target))


def _best_init(target_c: ImageGrid, pair: AtlasPair, candidates: list[Affine2D]) -> Affine2D:
    # first candidate (label-to-mask affine) wins ties
    best, best_score = candidates[0], -np.inf
    for cand in candidates:
        score = ncc(target_c, resample_intensity(pair.intensity, to_field(cand, target_c)))
        if score > best_score:
            best, best_score = cand, score
    return best


def phase3_refine(target: ImageGrid, rough: LabelMap, atlases: AtlasSet, config: PipelineConfig | None = None,
                  diagnostics: SliceDiagnostics | None = None, init_transforms=None, phase2_linear=None) -> LabelMap:
    """Refined segmentation from locally ranked STEPS inside the refinement mask box."""
    return _phase3(target, rough, atlases, config or PipelineConfig(), diagnostics or SliceDiagnostics(),
                   init_transforms, phase2_linear)


@dataclass
class SliceResult:
    labels: LabelMap
    rough: LabelMap | None
    diagnostics: SliceDiagnostics


def segment_slice(target: ImageGrid, atlases: AtlasSet, config: PipelineConfig | None = None,
                  trace: Trace | None = None) -> SliceResult:
    """Run phases I-III on one slice; failures degrade to a background map."""
    config = config or PipelineConfig()
    diag = SliceDiagnostics()
    rough = None
    try:
        roi, rigid = _phase1(target, atlases, config, diag)
        diag.roi = roi.as_list()
        _trace(trace, "phase1", roi=roi)
        _trace(trace, "phase2_input", roi=roi)
        rough, linear = _phase2(target, roi, atlases, config, diag, rigid)
        _trace(trace, "phase2", rough=rough)
        _trace(trace, "phase3_input", rough=rough)
        final = _phase3(target, rough, atlases, config, diag, rigid, linear)
        _trace(trace, "phase3", labels=final)
    except AtlasForgeError as exc:
        log.warning("slice segmentation failed: %s", exc)
        diag.error = f"{type(exc).__name__}: {exc}"
        final = LabelMap.zeros_like(target)
    return SliceResult(final, rough, diag)


# ---------------------------------------------------------------------------
# Cases
# ---------------------------------------------------------------------------

@dataclass
class CaseResult:
    case_id: str
    labels: dict[str, list[LabelMap]]
    volumes: dict[str, dict[str, float]]
    ef: float | None
    vm: float | None
    slice_thickness: dict[str, float]
    diagnostics: dict[str, list[SliceDiagnostics]]
    flags: list[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    rough: dict[str, list[LabelMap | None]] = field(default_factory=dict)

    def report(self) -> dict:
        """JSON-ready summary; wall-clock time is left out so reports are reproducible."""
        return {
            "case_id": self.case_id,
            "volumes_ml": self.volumes,
            "ef": self.ef,
            "vm_g": self.vm,
            "slice_thickness_mm": self.slice_thickness,
            "spacing_mm": {p: list(lm[0].spacing) for p, lm in self.labels.items() if lm},
            "flags": self.flags,
            "slices": {
                phase: [asdict(d) for d in diags] for phase, diags in self.diagnostics.items()
            },
        }


def _slice_job(args):
    target, atlases, config = args
    return segment_slice(target, atlases, config)


def case_quantities(labels: dict[str, list[LabelMap]], thickness: dict[str, float], density: float):
    """Volumes per phase, EF and VM, plus any flags raised on the way."""
    volumes = {
        phase: {
            "endo": stack_volume(maps, ENDO, thickness[phase]),
            "epi": stack_volume(maps, EPI, thickness[phase]),
        }
        for phase, maps in labels.items()
    }
    flags = []
    ef = None
    if "ED" in volumes and "ES" in volumes:
        edv, esv = volumes["ED"]["endo"], volumes["ES"]["endo"]
        if edv > 0:
            ef = ejection_fraction(edv, esv)
            if ef_out_of_range(edv, esv):
                flags.append("ef_clamped")
        else:
            flags.append("ef_unavailable_zero_edv")
    else:
        flags.append("ef_unavailable_missing_phase")
    vm = None
    for phase in PHASES:
        if phase in volumes:
            vm = ventricular_mass(volumes[phase]["epi"], volumes[phase]["endo"], density)
            break
    return volumes, ef, vm, flags


def segment_case(
    manifest: CaseManifest | str | Path,
    atlases_ed: AtlasSet | None,
    atlases_es: AtlasSet | None,
    config: PipelineConfig | None = None,
    jobs: int = 1,
    trace: Trace | None = None,
) -> CaseResult:
    """Segment every slice of a case with the atlas set of its cardiac phase."""
    config = config or PipelineConfig()
    if not isinstance(manifest, CaseManifest):
        manifest = load_case_manifest(manifest)
    atlas_by_phase = {"ED": atlases_ed, "ES": atlases_es}
    start = time.perf_counter()

    work, keys, thickness = [], [], {}
    for phase in PHASES:
        entry = manifest.phases.get(phase)
        if entry is None:
            continue
        aset = atlas_by_phase[phase]
        if aset is None:
            raise ConfigError(f"case {manifest.case_id}: no {phase} atlas set")
        if aset.phase != phase:
            raise ConfigError(f"atlas set phase {aset.phase} used for {phase} slices")
        thickness[phase] = entry.slice_thickness
        for k, sl in enumerate(entry.slices):
            target = load_image(sl.image)
            if entry.spacing is not None and tuple(entry.spacing) != target.spacing:
                raise ConfigError(f"{sl.image}: spacing {target.spacing} disagrees with manifest {entry.spacing}")
            work.append((target, aset, config))
            keys.append((phase, k))
    if not work:
        raise ConfigError(f"case {manifest.case_id}: both phases empty")

    if trace is not None or jobs <= 1:
        results = [segment_slice(t, a, c, trace) for t, a, c in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_slice_job, work))

    labels: dict[str, list[LabelMap]] = {}
    rough: dict[str, list] = {}
    diags: dict[str, list[SliceDiagnostics]] = {}
    for (phase, _), res in zip(keys, results):
        labels.setdefault(phase, []).append(res.labels)
        rough.setdefault(phase, []).append(res.rough)
        diags.setdefault(phase, []).append(res.diagnostics)

    volumes, ef, vm, flags = case_quantities(labels, thickness, config.density)
    if any(d.error for ds in diags.values() for d in ds):
        flags.append("slice_failures")
    elapsed = time.perf_counter() - start
    log.info("case %s segmented in %.1f s", manifest.case_id, elapsed)
    return CaseResult(manifest.case_id, labels, volumes, ef, vm, thickness, diags, flags, elapsed, rough)


def write_case_outputs(result: CaseResult, out_dir) -> Path:
    """Per-slice label rasters under ``out_dir/<case_id>/`` plus ``report.json``."""
    root = Path(out_dir) / result.case_id
    root.mkdir(parents=True, exist_ok=True)
    for phase, maps in result.labels.items():
        for k, lm in enumerate(maps):
            save_image(lm, root / f"{phase}_s{k}_seg.hdr")
    report = root / "report.json"
    report.write_text(json.dumps(result.report(), indent=2, sort_keys=True) + "\n")
    return report


def prediction_path(out_dir, case_id: str, phase: str, index: int) -> Path:
    return Path(out_dir) / case_id / f"{phase}_s{index}_seg.hdr"
