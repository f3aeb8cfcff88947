"""``atlasforge`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import AtlasForgeError, ConfigError, FormatError
from .fusion import FusionReport, majority_vote, staple_fuse, steps_fuse
from .grid import load_image, load_labels, save_image
from .metrics import (
    error_stats,
    cohort_summary,
    linear_regression,
    slice_rows,
    write_metrics_csv,
)
from .phantom import PhantomSpec, Variability, make_cohort, write_cohort
from .pipeline import (
    PipelineConfig,
    case_quantities,
    load_atlas_manifest,
    load_case_manifest,
    prediction_path,
    segment_case,
    write_case_outputs,
)
from .registration import block_match_register, ffd_register
from .transform import load_transform, save_transform, to_field

log = logging.getLogger("atlasforge")


def _setup_logging(verbose: int) -> None:
    level = os.environ.get("ATLASFORGE_LOG")
    if level:
        lvl = getattr(logging, level.upper(), None)
        if not isinstance(lvl, int):
            raise ConfigError(f"ATLASFORGE_LOG: unknown level {level!r}")
    else:
        lvl = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=lvl, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def load_config(args) -> PipelineConfig:
    """JSON config file (if any) with command-line overrides on top."""
    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FormatError(f"no such config file: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = PipelineConfig.from_dict(data)
    if getattr(args, "phase2_model", None):
        cfg = replace(cfg, phase2_model=args.phase2_model)
    fusion = cfg.fusion
    if getattr(args, "top_fraction", None) is not None:
        fusion = replace(fusion, top_fraction=args.top_fraction)
    if getattr(args, "local_n", None) is not None:
        fusion = replace(fusion, local_n=args.local_n)
    if getattr(args, "mrf_beta", None) is not None:
        fusion = replace(fusion, mrf_beta=args.mrf_beta)
    return replace(cfg, fusion=fusion)


def _jobs(args) -> int:
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return args.jobs


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_segment(args) -> int:
    cfg = load_config(args)
    jobs = _jobs(args)
    atlases = load_atlas_manifest(args.atlases)
    out = Path(args.out)
    for case_path in args.case:
        manifest = load_case_manifest(case_path)
        result = segment_case(manifest, atlases.get("ED"), atlases.get("ES"), cfg, jobs=jobs)
        report = write_case_outputs(result, out)
        log.info("case %s: %.1f s, report %s", result.case_id, result.wall_clock_s, report)
        print(f"{result.case_id}: wrote {report}")
    return 0


def cmd_register(args) -> int:
    cfg = load_config(args)
    ref, flo = load_image(args.ref), load_image(args.flo)
    init = load_transform(args.init) if args.init else None
    if args.model in ("rigid", "affine"):
        t = block_match_register(ref, flo, args.model, cfg.block_match, init=init)
        save_transform(t, args.out)
    else:
        init_field = to_field(init, ref) if init is not None else None
        res = ffd_register(ref, flo, init_field, cfg.ffd)
        save_transform(res.ffd, args.out)
        if init is not None:
            log.warning("FFD written without its initial transform; apply %s first", args.init)
    print(f"wrote {args.out}")
    return 0


def cmd_fuse(args) -> int:
    cfg = load_config(args)
    labels = [load_labels(p) for p in args.labels]
    if not labels:
        raise ConfigError("fuse needs at least one --labels map")
    report = FusionReport(args.method)
    if args.method == "majority":
        out = majority_vote(labels)
    elif args.method == "staple":
        out = staple_fuse(labels, cfg.fusion)
    else:
        if not args.target or len(args.images) != len(labels):
            raise ConfigError("steps fusion needs --target and one --images per --labels")
        target = load_image(args.target)
        images = [load_image(p) for p in args.images]
        mode = "local_n" if args.method == "steps-local" else "global_top"
        out = steps_fuse(target, list(zip(images, labels)), cfg.fusion, mode, report=report)
    save_image(out, args.out)
    if args.report:
        Path(args.report).write_text(report.to_text())
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    rows, per_case = [], {}
    for case_path in args.case:
        manifest = load_case_manifest(case_path)
        preds, truths, thick = {}, {}, {}
        for phase, entry in manifest.phases.items():
            thick[phase] = entry.slice_thickness
            for k, sl in enumerate(entry.slices):
                if sl.labels is None:
                    raise ConfigError(f"{case_path}: slice {phase}/{k} has no truth labels")
                truth = load_labels(sl.labels)
                pred = load_labels(prediction_path(args.pred, manifest.case_id, phase, k))
                rows.extend(slice_rows(manifest.case_id, phase, k, pred, truth))
                preds.setdefault(phase, []).append(pred)
                truths.setdefault(phase, []).append(truth)
        est = case_quantities(preds, thick, cfg.density)
        ref = case_quantities(truths, thick, cfg.density)
        per_case[manifest.case_id] = {
            "estimate": {"volumes_ml": est[0], "ef": est[1], "vm_g": est[2]},
            "truth": {"volumes_ml": ref[0], "ef": ref[1], "vm_g": ref[2]},
        }
    out = Path(args.out)
    write_metrics_csv(rows, out / "metrics.csv")
    summary = {"image_based": cohort_summary(rows), "cases": per_case, "patient_based": _patient_stats(per_case)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'metrics.csv'} and {out / 'summary.json'}")
    return 0


def _patient_stats(per_case: dict) -> dict:
    stats = {}
    quantities = {
        "EDV": lambda d: d["volumes_ml"].get("ED", {}).get("endo"),
        "ESV": lambda d: d["volumes_ml"].get("ES", {}).get("endo"),
        "EF": lambda d: d["ef"],
        "VM": lambda d: d["vm_g"],
    }
    for name, get in quantities.items():
        pairs = [(get(c["estimate"]), get(c["truth"])) for c in per_case.values()]
        pairs = [(e, t) for e, t in pairs if e is not None and t is not None]
        entry: dict = {"n": len(pairs)}
        if pairs and all(t != 0 for _, t in pairs):
            mean, std = error_stats([e for e, _ in pairs], [t for _, t in pairs], "relative")
            entry["relative_error"] = {"mean": mean, "std": std}
        if len(pairs) >= 2 and np.ptp([e for e, _ in pairs]) > 0:
            slope, intercept, r = linear_regression(pairs)
            entry["regression"] = {"slope": slope, "intercept": intercept, "r": r}
        stats[name] = entry
    return stats


def cmd_phantom(args) -> int:
    var = Variability(warp_magnitude=args.warp) if args.warp is not None else Variability()
    cohort = make_cohort(args.n, PhantomSpec(), var, seed=args.seed, n_cases=args.cases,
                         slices_per_phase=args.slices)
    written = write_cohort(cohort, args.out)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def cmd_validate(args) -> int:
    if not args.atlases and not args.case:
        raise ConfigError("validate needs --atlases and/or --case")
    if args.config:
        load_config(args)
    if args.atlases:
        sets = load_atlas_manifest(args.atlases)
        for phase, aset in sets.items():
            print(f"atlas set {phase}: {len(aset)} pairs ok")
    for case_path in args.case or []:
        manifest = load_case_manifest(case_path)
        for phase, entry in manifest.phases.items():
            for sl in entry.slices:
                img = load_image(sl.image)
                if entry.spacing is not None and tuple(entry.spacing) != img.spacing:
                    raise ConfigError(f"{sl.image}: spacing disagrees with manifest")
                if sl.labels is not None and not load_labels(sl.labels).same_geometry(img):
                    raise ConfigError(f"{sl.labels}: geometry differs from {sl.image}")
        print(f"case {manifest.case_id}: {sum(len(e.slices) for e in manifest.phases.values())} slices ok")
    return 0


# ---------------------------------------------------------------------------

def _fusion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--top-fraction", type=float, help="fraction of globally ranked atlases fused in phase II")
    p.add_argument("--local-n", type=int, help="atlases voting per pixel in phase III (default max(2, M // 3))")
    p.add_argument("--mrf-beta", type=float, help="MRF coupling strength (0 disables)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atlasforge", description="Multi-atlas right-ventricle segmentation.")
    parser.add_argument("--verbose", "-v", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--verbose", "-v", action="count", default=argparse.SUPPRESS)
        if config:
            p.add_argument("--config", help="JSON pipeline configuration; flags override it")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("segment", help="run the three-phase pipeline on case manifests")
    common(p)
    p.add_argument("--atlases", required=True)
    p.add_argument("--case", required=True, action="append")
    p.add_argument("--out", default="out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--phase2-model", choices=("rigid", "affine"))
    _fusion_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("register", help="register one image pair")
    common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--flo", required=True)
    p.add_argument("--model", choices=("rigid", "affine", "ffd"), default="rigid")
    p.add_argument("--init", help="initial transform file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("fuse", help="fuse a stack of label maps")
    common(p)
    p.add_argument("--method", choices=("majority", "staple", "steps-global", "steps-local"), default="majority")
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--images", nargs="*", default=[])
    p.add_argument("--target")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write the fusion diagnostic report here")
    _fusion_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="score predictions against manifest truths")
    common(p)
    p.add_argument("--case", required=True, action="append")
    p.add_argument("--pred", required=True, help="directory written by segment --out")
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", help="generate a synthetic atlas cohort and test cases")
    common(p, config=False)
    p.add_argument("--n", type=int, default=16, help="atlases per phase")
    p.add_argument("--cases", type=int, default=2)
    p.add_argument("--slices", type=int, default=2, help="slices per phase per case")
    p.add_argument("--warp", type=float, help="maximum true warp (px)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("validate", help="check manifests and the files they reference")
    common(p)
    p.add_argument("--atlases")
    p.add_argument("--case", action="append")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging(args.verbose)
        return args.func(args)
    except AtlasForgeError as exc:
        print(f"atlasforge: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"atlasforge: error: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
