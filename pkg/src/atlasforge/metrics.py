"""Image-based (Dice, Hausdorff) and patient-based (volumes, EF, VM) evaluation."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GeometryError, NumericError
from .grid import ENDO, EPI, LabelMap

MYOCARDIAL_DENSITY = 1.05  # g/mL

STRUCTURES = {"endocardium": ENDO, "epicardium": EPI}


def _masks(a: LabelMap, b: LabelMap, label_set) -> tuple[np.ndarray, np.ndarray]:
    if not a.same_geometry(b):
        raise GeometryError("label maps differ in geometry")
    return a.mask(label_set), b.mask(label_set)


def dice(a: LabelMap, b: LabelMap, label_set=ENDO) -> float:
    """Dice overlap of the binarised masks; 1.0 when both are empty."""
    ma, mb = _masks(a, b, label_set)
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (the image border counts as outside)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~interior


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> float:
    # distance from every pixel to the nearest dst boundary pixel, read at src boundary pixels
    dist = ndimage.distance_transform_edt(~dst, sampling=(spacing[1], spacing[0]))
    return float(dist[src].max())


def hausdorff(a: LabelMap, b: LabelMap, label_set=ENDO) -> float:
    """Symmetric Hausdorff distance (mm) between the 4-connected mask boundaries."""
    ma, mb = _masks(a, b, label_set)
    if not ma.any() or not mb.any():
        raise NumericError("Hausdorff distance needs two non-empty masks")
    ba, bb = boundary(ma), boundary(mb)
    return max(_directed(ba, bb, a.spacing), _directed(bb, ba, a.spacing))


def stack_volume(slices: Sequence[LabelMap], label_set=ENDO, slice_thickness: float = 1.0) -> float:
    """Summed slab volume in mL (mm³ / 1000)."""
    if slice_thickness <= 0:
        raise ConfigError("slice thickness must be > 0")
    total = 0.0
    for lm in slices:
        sx, sy = lm.spacing
        total += int(lm.mask(label_set).sum()) * sx * sy
    return total * slice_thickness / 1000.0


def ejection_fraction(edv: float, esv: float) -> float:
    """``(edv - esv) / edv``, clamped to [0, 1]; use :func:`ef_out_of_range` to flag clamping."""
    if edv <= 0:
        raise NumericError("ejection fraction needs a positive end-diastolic volume")
    return min(1.0, max(0.0, (edv - esv) / edv))


def ef_out_of_range(edv: float, esv: float) -> bool:
    return esv < 0 or esv > edv


def ventricular_mass(epi_vol: float, endo_vol: float, density: float = MYOCARDIAL_DENSITY) -> float:
    if endo_vol < 0 or epi_vol < endo_vol:
        raise NumericError(f"epicardial volume {epi_vol} below endocardial volume {endo_vol}")
    return (epi_vol - endo_vol) * density


def linear_regression(pairs: Iterable[tuple[float, float]]) -> tuple[float, float, float]:
    """OLS of truth on estimate: ``truth ≈ slope * estimate + intercept``, plus Pearson r."""
    arr = np.asarray(list(pairs), dtype=np.float64).reshape(-1, 2)
    if len(arr) < 2:
        raise NumericError("regression needs at least two pairs")
    est, truth = arr[:, 0], arr[:, 1]
    ec, tc = est - est.mean(), truth - truth.mean()
    sxx = float(np.dot(ec, ec))
    if sxx <= 0:
        raise NumericError("estimates have zero variance")
    slope = float(np.dot(ec, tc)) / sxx
    intercept = float(truth.mean() - slope * est.mean())
    syy = float(np.dot(tc, tc))
    r = float(np.dot(ec, tc) / math.sqrt(sxx * syy)) if syy > 0 else 0.0
    return slope, intercept, r


def error_stats(estimates: Sequence[float], truths: Sequence[float], mode: str = "relative") -> tuple[float, float]:
    """Mean and population standard deviation of per-case errors."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    if est.shape != tru.shape or est.size == 0:
        raise ConfigError("estimates and truths must be non-empty and of equal length")
    err = np.abs(est - tru)
    if mode == "relative":
        if np.any(tru == 0):
            raise NumericError("relative error undefined for a zero truth value")
        err = err / np.abs(tru)
    elif mode != "absolute":
        raise ConfigError(f"mode must be relative or absolute, got {mode!r}")
    return float(err.mean()), float(err.std())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("case", "phase", "slice", "structure", "dice", "hausdorff_mm")


def slice_rows(case_id: str, phase: str, index: int, pred: LabelMap, truth: LabelMap) -> list[dict]:
    rows = []
    for name, labels in STRUCTURES.items():
        try:
            hd = hausdorff(pred, truth, labels)
        except NumericError:
            hd = float("nan")
        rows.append(
            {
                "case": case_id,
                "phase": phase,
                "slice": index,
                "structure": name,
                "dice": dice(pred, truth, labels),
                "hausdorff_mm": hd,
            }
        )
    return rows


def write_metrics_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in CSV_COLUMNS})
    return path


def cohort_summary(rows: Sequence[dict]) -> dict:
    """Mean/std of Dice and Hausdorff per (phase, structure), NaN Hausdorff values skipped."""
    out: dict[str, dict] = {}
    for row in rows:
        key = f"{row['phase']}/{row['structure']}"
        out.setdefault(key, {"dice": [], "hausdorff_mm": []})
        out[key]["dice"].append(row["dice"])
        if not math.isnan(row["hausdorff_mm"]):
            out[key]["hausdorff_mm"].append(row["hausdorff_mm"])
    summary = {}
    for key in sorted(out):
        entry = {}
        for metric, vals in out[key].items():
            arr = np.asarray(vals, dtype=np.float64)
            entry[metric] = {
                "mean": float(arr.mean()) if arr.size else None,
                "std": float(arr.std()) if arr.size else None,
                "n": int(arr.size),
            }
        summary[key] = entry
    return summary
