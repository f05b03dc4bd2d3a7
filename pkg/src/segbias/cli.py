"""Command-line entry point: ``segbias <subcommand> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from segbias.audit import (
    DEFAULT_ERROR_MODELS,
    AuditConfig,
    ErrorExperimentConfig,
    audit_subjects,
    default_output_dir,
    run_audit,
    run_error_experiment,
)
from segbias.errors import ValidationError
from segbias.errorsim import KINDS, calibrate_strength, perturb_all
from segbias.io import load_volume, save_volume
from segbias.metrics import auc_from_groups
from segbias.phantom import (
    CohortSpec,
    PhantomSpec,
    assign_group_resolutions,
    generate_cohort,
    load_cohort,
    write_cohort,
)
from segbias.resample import geometry_for_voxel_size, resample_intensity, resample_labels_majority, vinn_rescale
from segbias.volume import VoxelGeometry

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_VALIDATION, f"\n{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from None


def cmd_phantom(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    pdict = dict(cfg.get("phantom", {}))
    cdict = dict(cfg.get("cohort", {}))
    if args.kind:
        pdict["kind"] = args.kind
    if args.voxel_mm is not None or args.dims is not None:
        base = PhantomSpec.from_dict(pdict).geometry
        dims = tuple(args.dims) if args.dims else base.dims
        pdict["geometry"] = VoxelGeometry.isotropic(dims, args.voxel_mm or base.voxel_size[0])
    for key in ("n_per_group", "effect", "jitter", "jitter_mode", "seed"):
        value = getattr(args, key)
        if value is not None:
            cdict[key] = value
    try:
        pspec, cspec = PhantomSpec.from_dict(pdict), CohortSpec(**cdict)
    except TypeError as exc:
        raise ValidationError(f"bad phantom/cohort settings: {exc}") from None
    cohort = generate_cohort(pspec, cspec)
    pair = args.pair or cfg.get("resolution_pair")
    if pair:
        cohort = assign_group_resolutions(cohort, tuple(pair))
    path = write_cohort(cohort, args.out or default_output_dir(), suffix=args.suffix)
    print(path)
    return EXIT_OK


def cmd_resample(args) -> int:
    kind = "label" if args.labels else "intensity"
    vol = load_volume(args.input, kind=kind)
    if args.target_mm is not None:
        target = geometry_for_voxel_size(vol.geometry, args.target_mm)
        factor = tuple(v / args.target_mm for v in vol.geometry.voxel_size)
    else:
        target = factor = args.factor
    if args.labels:
        out = resample_labels_majority(vol, target)
    elif args.vinn:
        out = vinn_rescale(vol, factor)
    else:
        out = resample_intensity(vol, target)
    save_volume(out, args.out)
    g = out.geometry
    print(json.dumps({"dims": list(g.dims), "voxel_size": list(g.voxel_size)}))
    return EXIT_OK


def cmd_simulate_error(args) -> int:
    cohort = load_cohort(args.manifest, load_images=False)
    subjects = sorted(cohort.subjects, key=lambda s: s.id)
    refs = [s.reference for s in subjects]
    p = args.p
    if args.target_bias is not None:
        p = calibrate_strength(refs, args.kind, args.target_bias, args.seed, args.label)
    if p is None:
        raise ValidationError("give --p or --target-bias")
    preds = perturb_all(refs, args.kind, p, args.seed)
    out = Path(args.out or default_output_dir())
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    for s, q in zip(subjects, preds):
        save_volume(q, out / "predictions" / f"{s.id}{args.suffix}")
    records = audit_subjects([(s.id, s.group, q, s.reference) for s, q in zip(subjects, preds)],
                             [args.label], "native")
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "group", "kind", "p", "dsc", "volume_bias"])
        for r in records:
            w.writerow([r.subject_id, r.group, args.kind, repr(float(p)), repr(r.dsc), repr(r.volume_bias)])
    print(out / "errors.csv")
    return EXIT_OK


def cmd_metrics(args) -> int:
    pred = load_volume(args.pred, kind="label")
    ref = load_volume(args.ref, kind="label")
    records = audit_subjects([("subject", "H", pred, ref)], args.label, args.space)
    rows = [{"label": r.label, "dsc": r.dsc, "volume_pred_mm3": r.volume_pred_mm3,
             "volume_ref_mm3": r.volume_ref_mm3, "volume_bias": r.volume_bias} for r in records]
    print(json.dumps({"metric_space": args.space, "labels": rows}, indent=2))
    return EXIT_OK


def cmd_auc(args) -> int:
    with open(args.csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError(f"{args.csv} has no rows")
    column = args.column or ("volume_pred_mm3" if "volume_pred_mm3" in rows[0] else "volume")
    for c in ("group", column):
        if c not in rows[0]:
            raise ValidationError(f"{args.csv} lacks column {c!r}")
    if args.label is not None and "label" in rows[0]:
        rows = [r for r in rows if int(r["label"]) == args.label]
    try:
        pos = [float(r[column]) for r in rows if r["group"] == args.positive_group]
        neg = [float(r[column]) for r in rows if r["group"] != args.positive_group]
    except ValueError as exc:
        raise ValidationError(f"non-numeric value in column {column!r}: {exc}") from None
    print(repr(auc_from_groups(pos, neg)))
    return EXIT_OK


def cmd_audit(args) -> int:
    d = _read_json(args.config)
    if args.out:
        d["output_dir"] = args.out
    if args.seed is not None:
        d["seed"] = args.seed
    # relative manifest paths are taken relative to the config file
    manifest = Path(d.get("manifest", ""))
    if d.get("manifest") and not manifest.is_absolute():
        d["manifest"] = str(Path(args.config).parent / manifest)
    config = AuditConfig.from_dict(d)
    report = run_audit(config)
    for lab, auc in report.auc.items():
        print(f"label {lab}: AUC predicted={auc['predicted']:.4f} reference={auc['reference']:.4f}")
    print(Path(config.output_dir) / "summary.json")
    return EXIT_OK


def cmd_fig1(args) -> int:
    d = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.n is not None:
        d["n_subjects"] = args.n
    if args.models:
        d["models"] = args.models
    if args.out:
        d["output_dir"] = args.out
    cfg = ErrorExperimentConfig.from_dict(d)
    result = run_error_experiment(cfg)
    cal = result.summary["calibration"]
    print(f"p_random={cal['p_random']:.4f} p_dilate={cal['p_dilate']:.4f} "
          f"dsc_gap={cal['dsc_gap']:.4f} bias_gap={cal['bias_gap']:.4f}")
    for name, m in result.summary["models"].items():
        print(f"{name}: mean DSC {m['mean_dsc']:.4f}, median volume bias {m['median_volume_bias']:+.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segbias", description="Audit resolution-induced bias in segmentations.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic two-group cohort")
    p.add_argument("--config", help="JSON with optional 'phantom', 'cohort', 'resolution_pair' objects")
    p.add_argument("--kind", choices=("ribbon", "ellipsoid"))
    p.add_argument("--dims", type=int, nargs="+")
    p.add_argument("--voxel-mm", type=float)
    p.add_argument("--n-per-group", type=int)
    p.add_argument("--effect", type=float)
    p.add_argument("--jitter", type=float)
    p.add_argument("--jitter-mode", choices=("random", "quantile"))
    p.add_argument("--pair", type=float, nargs=2, metavar=("HIGH_MM", "LOW_MM"))
    p.add_argument("--seed", type=int)
    p.add_argument("--suffix", default=".nii.gz", choices=(".nii.gz", ".nii", ".json"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("resample", help="resample an image or label map")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    kind = p.add_mutually_exclusive_group()
    kind.add_argument("--labels", action="store_true", help="majority-vote label resampling")
    kind.add_argument("--vinn", action="store_true", help="channel-wise feature rescaling")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--target-mm", type=float)
    target.add_argument("--factor", type=float, help="source voxel size / target voxel size")
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("simulate-error", help="perturb cohort references with an error model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=KINDS, required=True)
    strength = p.add_mutually_exclusive_group(required=True)
    strength.add_argument("--p", type=float)
    strength.add_argument("--target-bias", type=float, help="calibrate p to this median volume bias")
    p.add_argument("--label", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suffix", default=".nii.gz", choices=(".nii.gz", ".nii", ".json"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate_error)

    p = sub.add_parser("metrics", help="DSC and volume bias of one prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--label", type=int, nargs="+", default=[1])
    p.add_argument("--space", choices=("resample-to-reference", "native"), default="resample-to-reference")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("auc", help="group AUC from a CSV with 'group' and volume columns")
    p.add_argument("--csv", required=True)
    p.add_argument("--positive-group", default="L")
    p.add_argument("--column", help="default: volume_pred_mm3, else volume")
    p.add_argument("--label", type=int)
    p.set_defaults(func=cmd_auc)

    p = sub.add_parser("audit", help="audit predictions of a cohort")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("fig1", help="random vs. systematic errors and downsampling on ribbon phantoms")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--models", nargs="+", help=f"default: {' '.join(DEFAULT_ERROR_MODELS)}")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fig1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"segbias {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"segbias {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
