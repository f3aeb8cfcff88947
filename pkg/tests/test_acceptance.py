"""Acceptance suite: one check per headline criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly as a script with
``python3 tests/test_acceptance.py``.
"""

import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from support import (  # noqa: E402
    dice_oracle,
    hausdorff_oracle,
    noisy_raters,
    random_mask_pair,
    ring_truth,
    textured,
    vote_oracle,
    warp_pair,
)

from atlasforge.cli import main as cli_main  # noqa: E402
from atlasforge.fusion import FusionConfig, global_prior, majority_vote, staple_multilabel, steps_fuse  # noqa: E402
from atlasforge.grid import ENDO, EPI, LabelMap, save_image  # noqa: E402
from atlasforge.metrics import (  # noqa: E402
    dice,
    ejection_fraction,
    hausdorff,
    linear_regression,
    stack_volume,
    ventricular_mass,
)
from atlasforge.phantom import PhantomSpec, Variability, fusion_trial, make_cohort, write_cohort  # noqa: E402
from atlasforge.pipeline import CaseManifest, PhaseEntry, PipelineConfig, SliceEntry, segment_case  # noqa: E402
from atlasforge.registration import FfdParams, block_match_register, ffd_objective, ffd_register  # noqa: E402
from atlasforge.transform import Affine2D, BSplineFFD, Rigid2D, physical_center, resample_intensity, to_field  # noqa: E402

STRUCTURES = {"blood_pool": ENDO, "epicardium": EPI}
COHORT_SEED = 7


def report(name, ok, detail, capsys=None):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    return ok


# ---------------------------------------------------------------------------
# checks; each returns (ok, detail)
# ---------------------------------------------------------------------------

def check_fixpoint(tmp):
    """Targets drawn from the atlas set itself must be reproduced exactly."""
    cohort = make_cohort(16, seed=COHORT_SEED, n_cases=0)
    worst_dice, worst_hd, worst_t = 1.0, 0.0, 0.0
    for k in (0, 7, 15):
        phases = {}
        for phase in ("ED", "ES"):
            pair = cohort.atlases[phase][k]
            img = save_image(pair.intensity, Path(tmp) / f"fix{k}_{phase}")
            phases[phase] = PhaseEntry((SliceEntry(img),), 8.0, pair.intensity.spacing)
        t0 = time.perf_counter()
        result = segment_case(CaseManifest(f"self{k}", phases), cohort.atlases["ED"], cohort.atlases["ES"])
        worst_t = max(worst_t, time.perf_counter() - t0)
        for phase in ("ED", "ES"):
            truth = cohort.atlases[phase][k].labels
            for labels in STRUCTURES.values():
                worst_dice = min(worst_dice, dice(result.labels[phase][0], truth, labels))
                worst_hd = max(worst_hd, hausdorff(result.labels[phase][0], truth, labels))
    ok = worst_dice == 1.0 and worst_hd == 0.0 and worst_t < 30.0
    return ok, f"3 cases, min Dice {worst_dice:.4f}, max HD {worst_hd:.3f} mm, slowest case {worst_t:.1f} s"


def run_cohort(tmp):
    """Segment 8 held-out phantom cases against a 16-atlas set."""
    var = Variability()
    assert var.warp_magnitude <= 5.0 and var.noise_fraction == 0.05
    cohort = make_cohort(16, PhantomSpec(), var, seed=COHORT_SEED, n_cases=8)
    written = write_cohort(cohort, tmp)
    t0 = time.perf_counter()
    out = {"dice": {s: [] for s in STRUCTURES}, "hd": [], "phase2": [], "phase3": [],
           "volumes": {"ED": [], "ES": []}, "errors": 0}
    for case in cohort.cases:
        result = segment_case(written[case.case_id], cohort.atlases["ED"], cohort.atlases["ES"])
        for phase, slices in case.phases.items():
            truths = [sl.truth for sl in slices]
            out["errors"] += sum(d.error is not None for d in result.diagnostics[phase])
            for pred, rough, truth in zip(result.labels[phase], result.rough[phase], truths):
                for name, labels in STRUCTURES.items():
                    d3 = dice(pred, truth, labels)
                    out["dice"][name].append(d3)
                    out["hd"].append(hausdorff(pred, truth, labels))
                    out["phase3"].append(d3)
                    out["phase2"].append(dice(rough, truth, labels) if rough is not None else 0.0)
            est = stack_volume(result.labels[phase], ENDO, case.slice_thickness)
            out["volumes"][phase].append((est, stack_volume(truths, ENDO, case.slice_thickness)))
    out["seconds"] = time.perf_counter() - t0
    return out


def check_cohort(res):
    bp, epi = np.mean(res["dice"]["blood_pool"]), np.mean(res["dice"]["epicardium"])
    hd = np.mean(res["hd"])
    ok = bp >= 0.85 and epi >= 0.85 and hd <= 3.0 and res["seconds"] <= 600
    return ok, (f"8 cases, blood-pool Dice {bp:.3f}, epicardium Dice {epi:.3f}, mean HD {hd:.2f} mm, "
                f"{res['errors']} failed slices, {res['seconds']:.0f} s")


def check_monotone(res):
    m2, m3 = np.median(res["phase2"]), np.median(res["phase3"])
    return m3 >= m2, f"median Dice phase II {m2:.4f}, phase III {m3:.4f}"


def check_regression(res):
    rs = {p: linear_regression(v)[2] for p, v in res["volumes"].items()}
    return all(r >= 0.95 for r in rs.values()), ", ".join(f"{p} r = {r:.4f}" for p, r in rs.items())


def check_fusion_superiority(trials=50):
    wins = 0
    for seed in range(trials):
        target, warped, truth = fusion_trial(seed, 5)
        fused = steps_fuse(target, warped, FusionConfig(), "local_n")
        mv = majority_vote([w[1] for w in warped])
        s = np.mean([dice(fused, truth, l) for l in STRUCTURES.values()])
        m = np.mean([dice(mv, truth, l) for l in STRUCTURES.values()])
        wins += s >= m
    return wins >= 0.9 * trials, f"steps >= majority in {wins}/{trials} trials (1 aligned + 5 misaligned)"


def check_staple():
    truth = ring_truth(32)
    arr = noisy_raters(truth, n=5, p=0.1, seed=0)
    post, theta, _ = staple_multilabel(arr, np.ones(truth.shape, bool), global_prior(arr), FusionConfig())
    agree = (post.argmax(axis=0) == truth).mean()
    dev = max(float(np.abs(np.diag(t) - 0.9).max()) for t in theta)
    return agree >= 0.98 and dev <= 0.05, f"agreement {agree:.4f}, max |diag - 0.90| = {dev:.4f}"


def check_registration():
    img = textured()
    t_err = 0.0
    for shift in [(5.0, 0.0), (0.0, -5.0), (3.0, 4.0), (-2.5, 1.5), (-3.5, -3.5), (1.0, 2.0)]:
        flo = resample_intensity(img, to_field(Rigid2D(0, -shift[0], -shift[1]), img))
        t = block_match_register(img, flo, "rigid")
        t_err = max(t_err, abs(t.tx - shift[0]), abs(t.ty - shift[1]))
    r_err = 0.0
    c = physical_center(img)
    for theta in (0.2, -0.2, 0.1, -0.05):
        flo = resample_intensity(img, to_field(Rigid2D(-theta, 0, 0, c), img))
        r_err = max(r_err, abs(block_match_register(img, flo, "rigid").theta - theta))
    f_err = 0.0
    for seed in range(3):
        ref, flo, true = warp_pair(3.0, seed=seed)
        res = ffd_register(ref, flo)
        err = np.hypot(*(res.field.data - true.data).transpose(2, 0, 1))
        f_err = max(f_err, err[8:-8, 8:-8].mean())
    ok = t_err <= 0.5 and r_err <= 0.02 and f_err <= 0.5
    return ok, f"translation err {t_err:.3f} px, rotation err {r_err:.4f} rad, FFD mean residual {f_err:.3f} px"


def check_metric_oracles():
    hd_bad = 0
    for seed in range(100):
        a, b, spacing = random_mask_pair(1000 + seed, max_size=64)
        got = hausdorff(LabelMap(a.astype(np.uint8), spacing), LabelMap(b.astype(np.uint8), spacing))
        hd_bad += abs(got - hausdorff_oracle(a, b, spacing)) > 1e-9
    dice_bad = vote_bad = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a, b = rng.integers(0, 3, (2, 12, 12))
        for labels in STRUCTURES.values():
            dice_bad += abs(dice(LabelMap(a.astype(np.uint8)), LabelMap(b.astype(np.uint8)), labels)
                            - dice_oracle(a, b, labels)) > 1e-12
        stack = rng.integers(0, 3, size=(int(rng.integers(1, 8)), 10, 10))
        mv = majority_vote([LabelMap(s.astype(np.uint8)) for s in stack]).data
        vote_bad += sum(mv[y, x] != vote_oracle(stack[:, y, x].tolist())
                        for y, x in itertools.product(range(10), range(10)))
    ef, vm = ejection_fraction(120, 60), ventricular_mass(180, 120, 1.05)
    ok = hd_bad == 0 and dice_bad == 0 and vote_bad == 0 and ef == 0.5 and abs(vm - 63.0) < 1e-9
    return ok, (f"Hausdorff mismatches {hd_bad}/100, Dice mismatches {dice_bad}, vote mismatches {vote_bad}, "
                f"EF(120,60) = {ef}, VM(180,120,1.05) = {vm:.6f} g")


def check_gradient():
    worst = 0.0
    for similarity, weight in itertools.product(("NCC", "SSD"), (0.0, 0.05)):
        params = FfdParams(similarity=similarity, bending_weight=weight)
        ref, flo, _ = warp_pair(shape=(32, 32), seed=6)
        rng = np.random.default_rng(6)
        ffd = BSplineFFD.zeros(ref, 8.0)
        ffd = ffd.with_points(rng.normal(scale=0.5, size=ffd.control_points.shape))
        init = to_field(Affine2D.identity().shifted((0.3, -0.2)), ref)
        _, grad = ffd_objective(ref, flo, ffd, init, params)
        cp = np.array(ffd.control_points)
        fd = np.zeros_like(cp)
        h = 1e-4
        for idx in np.ndindex(cp.shape):
            a, b = cp.copy(), cp.copy()
            a[idx] += h
            b[idx] -= h
            fa, _ = ffd_objective(ref, flo, ffd.with_points(a), init, params)
            fb, _ = ffd_objective(ref, flo, ffd.with_points(b), init, params)
            fd[idx] = (fa - fb) / (2 * h)
        worst = max(worst, np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    return worst <= 1e-3, f"worst relative error {worst:.2e} over NCC/SSD with and without bending"


def check_determinism(tmp):
    tmp = Path(tmp)
    for run in ("a", "b"):
        assert cli_main(["phantom", "--n", "16", "--cases", "1", "--seed", "3", "--out", str(tmp / run)]) == 0
    same_data = all(p.read_bytes() == (tmp / "b" / p.relative_to(tmp / "a")).read_bytes()
                    for p in (tmp / "a").rglob("*") if p.is_file())
    digests = {}
    for jobs in ("1", "2", "8"):
        out = tmp / f"seg{jobs}"
        args = ["segment", "--atlases", str(tmp / "a" / "atlas.json"), "--case", str(tmp / "a" / "case0.json"),
                "--out", str(out), "--jobs", jobs, "--seed", "3"]
        assert cli_main(args) == 0
        digests[jobs] = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    same_out = digests["1"] == digests["2"] == digests["8"]
    n = len(digests["1"])
    report_ok = json.loads((tmp / "seg1" / "case0" / "report.json").read_text())["case_id"] == "case0"
    return same_data and same_out and report_ok, (
        f"phantom output identical across runs: {same_data}; {n} segment outputs identical for jobs 1/2/8: {same_out}")


# ---------------------------------------------------------------------------
# pytest entry points
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cohort_results(tmp_path_factory):
    return run_cohort(tmp_path_factory.mktemp("cohort"))


def test_fixpoint(tmp_path, capsys):
    assert report("fixpoint", *check_fixpoint(tmp_path), capsys)


def test_phantom_cohort(cohort_results, capsys):
    assert report("phantom cohort accuracy", *check_cohort(cohort_results), capsys)


def test_refinement_monotonicity(cohort_results, capsys):
    assert report("refinement monotonicity", *check_monotone(cohort_results), capsys)


def test_fusion_superiority(capsys):
    assert report("fusion superiority", *check_fusion_superiority(), capsys)


def test_staple_oracle(capsys):
    assert report("STAPLE oracle", *check_staple(), capsys)


def test_registration_recovery(capsys):
    assert report("registration recovery", *check_registration(), capsys)


def test_metric_oracles(capsys):
    assert report("metric oracles", *check_metric_oracles(), capsys)


def test_gradient_check(capsys):
    assert report("gradient check", *check_gradient(), capsys)


def test_volume_regression(cohort_results, capsys):
    assert report("endocardial volume regression", *check_regression(cohort_results), capsys)


def test_determinism(tmp_path, capsys):
    assert report("determinism", *check_determinism(tmp_path), capsys)


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cohort = run_cohort(tmp / "cohort")
        results = [
            report("fixpoint", *check_fixpoint(tmp)),
            report("phantom cohort accuracy", *check_cohort(cohort)),
            report("refinement monotonicity", *check_monotone(cohort)),
            report("fusion superiority", *check_fusion_superiority()),
            report("STAPLE oracle", *check_staple()),
            report("registration recovery", *check_registration()),
            report("metric oracles", *check_metric_oracles()),
            report("gradient check", *check_gradient()),
            report("endocardial volume regression", *check_regression(cohort)),
            report("determinism", *check_determinism(tmp / "det")),
        ]
    sys.exit(0 if all(results) else 1)
