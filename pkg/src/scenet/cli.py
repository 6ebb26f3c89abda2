"""Command-line entry point.

One binary with subcommands; a JSON config file is the source of truth
and individual flags override single values.  Every run echoes its fully
resolved configuration into the output directory so results are
reproducible from artifacts alone.  Report-producing verbs write both a
tab-separated report and a rendered PNG figure.

Exit codes: 0 success, 2 usage, 3 bad input/config/checkpoint,
4 numeric failure, 5 filesystem failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import evaluation, figures
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_feature_table,
    load_fitb,
    load_outfits,
    load_triplets,
    save_feature_table,
    save_fitb,
    save_outfits,
    save_triplets,
    write_text,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    InputError,
    IoError,
    NumericError,
    SceError,
)
from .losses import gradient_suite
from .model import load_model, save_model
from .training import TrainConfig, build_model, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc


def _dump_json(payload: dict, path) -> None:
    write_text(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _ensure_out(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _merged_train_config(args) -> TrainConfig:
    cfg = _load_json(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "n_masks": args.n_masks,
        "d_dim": args.d_dim,
        "mode": args.mode,
        "weighting": args.weighting,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "noise_fraction": args.noise_fraction,
        "val_fraction": args.val_fraction,
        "margin": args.margin,
        "use_vse_sim": args.use_vse_sim,
    }
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return TrainConfig.from_dict(cfg)


def _add_train_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--n-masks", type=int, default=None, dest="n_masks")
    p.add_argument("--d-dim", type=int, default=None, dest="d_dim")
    p.add_argument("--mode", default=None)
    p.add_argument("--weighting", default=None, choices=["per-pair", "shared-triplet"])
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--noise-fraction", type=float, default=None, dest="noise_fraction")
    p.add_argument("--val-fraction", type=float, default=None, dest="val_fraction")
    p.add_argument("--margin", type=float, default=None)
    p.add_argument(
        "--use-vse-sim",
        type=lambda s: {"true": True, "false": False}[s.lower()],
        default=None,
        dest="use_vse_sim",
        metavar="{true,false}",
    )


def _history_tsv(history) -> str:
    by_epoch = {s["epoch"]: s for s in history.snapshots}
    lines = ["epoch\ttrain_loss\tval_error"]
    for epoch, loss in zip(history.epochs, history.train_loss):
        val = by_epoch.get(epoch, {}).get("val_error")
        lines.append(f"{epoch}\t{loss!r}\t{'' if val is None else repr(val)}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------- verbs --


def cmd_gen_synthetic(args) -> int:
    spec_dict = _load_json(args.config)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SyntheticSpec.from_dict(spec_dict)
    out = _ensure_out(args.out)
    bundle = generate_synthetic(spec)
    _dump_json(spec.to_dict(), os.path.join(out, "synthetic_spec.json"))
    save_feature_table(bundle.items, os.path.join(out, "features.tsv"))
    written = ["synthetic_spec.json", "features.tsv"]
    if len(bundle.triplets):
        save_triplets(bundle.triplets, os.path.join(out, "triplets.txt"))
        written.append("triplets.txt")
    if len(bundle.outfits):
        save_outfits(bundle.outfits, os.path.join(out, "outfits.txt"))
        written.append("outfits.txt")
    if len(bundle.fitb):
        save_fitb(bundle.fitb, os.path.join(out, "fitb.txt"))
        written.append("fitb.txt")
    print(f"wrote {', '.join(written)} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _merged_train_config(args)
    items = load_feature_table(args.features)
    triplets = load_triplets(args.triplets, items)
    out = _ensure_out(args.out)
    _dump_json(config.to_dict(), os.path.join(out, "train_config.json"))
    model = build_model(config, items.f_dim, items.t_dim)
    model, history = train(model, items, triplets, config)
    save_model(model, os.path.join(out, "checkpoint.json"))
    _dump_json(history.to_dict(), os.path.join(out, "history.json"))
    write_text(os.path.join(out, "history.tsv"), _history_tsv(history))
    figures.save_history_figure(history, os.path.join(out, "history.png"))
    final = history.val_errors()[-1] if history.val_errors() else float("nan")
    print(f"trained {config.epochs} epochs; final val error {final:.4f}; wrote {out}")
    return EXIT_OK


def _check_config_matches(model, config: TrainConfig) -> None:
    mismatches = []
    if model.n_masks != config.n_masks:
        mismatches.append(f"n_masks {model.n_masks} != {config.n_masks}")
    if model.d_dim != config.d_dim:
        mismatches.append(f"d_dim {model.d_dim} != {config.d_dim}")
    if model.mode != config.mode:
        mismatches.append(f"mode {model.mode!r} != {config.mode!r}")
    if mismatches:
        raise InputError("checkpoint does not match config: " + "; ".join(mismatches))


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    items = load_feature_table(args.features)
    if args.config:
        _check_config_matches(model, _merged_train_config(args))
    triplets = load_triplets(args.triplets, items) if args.triplets else None
    outfits = load_outfits(args.outfits, items) if args.outfits else None
    fitb = load_fitb(args.fitb, items) if args.fitb else None
    out = _ensure_out(args.out)
    meta = {
        "verb": "eval",
        "checkpoint": os.path.basename(args.checkpoint),
        "mode": model.mode,
        "n_masks": model.n_masks,
    }
    report = evaluation.evaluate(
        model, items, triplets, outfits, fitb, weighting=args.weighting, metadata=meta
    )
    _dump_json(
        {k: getattr(args, k) for k in ("checkpoint", "features", "triplets", "outfits", "fitb", "weighting")},
        os.path.join(out, "eval_config.json"),
    )
    evaluation.write_report(report, os.path.join(out, "report.tsv"))
    figures.save_report_figure(report, os.path.join(out, "report.png"))
    for name, value in report.rows:
        print(f"{name}\t{value!r}")
    print(f"wrote report.tsv and report.png to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _merged_train_config(args)
    items = load_feature_table(args.features)
    triplets = load_triplets(args.triplets, items)
    axis = args.axis.replace("-", "_")
    if axis == "n_masks":
        values = [int(v) for v in args.values.split(",")]
    elif axis == "noise_fraction":
        values = [float(v) for v in args.values.split(",")]
    elif axis == "train_size":
        values = [int(v) for v in args.values.split(",")]
    else:
        raise InputError(f"unknown ablation axis {args.axis!r}")
    if not 0 < args.eval_fraction < 1:
        raise InputError(f"eval fraction must lie in (0, 1), got {args.eval_fraction}")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(triplets))
    n_eval = int(np.floor(args.eval_fraction * len(triplets)))
    if n_eval == 0 or n_eval == len(triplets):
        raise InputError("eval fraction leaves an empty split")
    eval_set = triplets.subset(perm[:n_eval])
    train_pool = triplets.subset(perm[n_eval:])
    out = _ensure_out(args.out)
    _dump_json(
        {"axis": axis, "values": values, "eval_fraction": args.eval_fraction,
         "train_config": config.to_dict()},
        os.path.join(out, "ablate_config.json"),
    )
    result = evaluation.ablation_sweep(config, axis, values, items, train_pool, eval_set)
    report = result.to_report({"config_hash": config.config_hash(), "seed": config.seed})
    evaluation.write_report(report, os.path.join(out, "ablation.tsv"))
    figures.save_ablation_figure(result, os.path.join(out, "ablation.png"))
    for value, err in zip(result.values, result.errors):
        print(f"{axis}={value}\terror={err:.4f}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    config = _merged_train_config(args)
    items = load_feature_table(args.features)
    triplets = load_triplets(args.triplets, items)
    out = _ensure_out(args.out)
    baseline_seed = config.seed if args.baseline_seed is None else args.baseline_seed
    model = evaluation.make_baseline(
        args.kind, config, seed=baseline_seed, f_dim=items.f_dim, t_dim=items.t_dim
    )
    if args.kind == "single-embedding":
        config = replace(config, n_masks=1)
    _dump_json(
        {"kind": args.kind, "baseline_seed": baseline_seed, "train_config": config.to_dict()},
        os.path.join(out, "baseline_config.json"),
    )
    model, history = train(model, items, triplets, config)
    save_model(model, os.path.join(out, "checkpoint.json"))
    outfits = load_outfits(args.outfits, items) if args.outfits else None
    fitb = load_fitb(args.fitb, items) if args.fitb else None
    meta = {"verb": "baseline", "kind": args.kind, "config_hash": config.config_hash()}
    report = evaluation.EvalReport()
    for k, v in meta.items():
        report.add_meta(k, v)
    if history.val_errors():
        report.add("val_triplet_error", history.val_errors()[-1])
    if outfits is not None:
        report.add("compatibility_auc", evaluation.compatibility_auc(model, outfits, items))
    if fitb is not None:
        report.add("fitb_accuracy", evaluation.fitb_accuracy(model, fitb, items))
    if not report.rows:
        raise InputError("baseline run produced no metrics; provide eval sets or val_fraction > 0")
    evaluation.write_report(report, os.path.join(out, "report.tsv"))
    figures.save_report_figure(report, os.path.join(out, "report.png"))
    for name, value in report.rows:
        print(f"{name}\t{value!r}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model = load_model(args.checkpoint)
    items = load_feature_table(args.features)
    out = _ensure_out(args.out)
    _dump_json(
        {"checkpoint": args.checkpoint, "features": args.features},
        os.path.join(out, "export_config.json"),
    )
    path = os.path.join(out, "condition_embeddings.tsv")
    evaluation.export_condition_embeddings(model, items, path)
    print(f"wrote {len(items) * model.n_masks} rows to {path}")
    return EXIT_OK


def cmd_check_grads(args) -> int:
    modes = args.modes.split(",") if args.modes else None
    out = _ensure_out(args.out)
    _dump_json(
        {"seed": args.seed, "modes": modes, "eps": args.eps, "tol": args.tol},
        os.path.join(out, "gradcheck_config.json"),
    )
    results = gradient_suite(seed=args.seed, modes=modes, eps=args.eps, tol=args.tol)
    lines = [f"# eps\t{args.eps!r}", f"# tol\t{args.tol!r}", "case\tparameter\tmax_rel_error\tstatus"]
    for name, report in results:
        for entry in report.entries:
            status = "FAIL" if entry.flagged else "ok"
            lines.append(f"{name}\t{entry.name}\t{entry.max_rel_error!r}\t{status}")
    write_text(os.path.join(out, "gradcheck.tsv"), "\n".join(lines) + "\n")
    figures.save_gradcheck_figure(results, args.tol, os.path.join(out, "gradcheck.png"))
    all_ok = True
    for name, report in results:
        verdict = "pass" if report.passed else "FAIL"
        print(f"{name}\tmax_rel_error={report.max_rel_error:.3e}\t{verdict}")
        all_ok = all_ok and report.passed
    if not all_ok:
        print("error: gradient check failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ------------------------------------------------------------------ parser --


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenet",
        description="Similarity-condition embeddings: train, evaluate, ablate.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a planted-condition dataset")
    p.add_argument("--config", required=True, help="synthetic spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--features", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--out", required=True)
    _add_train_override_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--triplets", default=None)
    p.add_argument("--outfits", default=None)
    p.add_argument("--fitb", default=None)
    p.add_argument("--config", default=None, help="optional config to cross-check dims")
    p.add_argument("--out", required=True)
    _add_train_override_flags(p)  # supplies --weighting and the other shared flags
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one training axis")
    p.add_argument("--config", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--axis", required=True, choices=["n-masks", "noise-fraction", "train-size"])
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--eval-fraction", type=float, default=0.2, dest="eval_fraction")
    p.add_argument("--out", required=True)
    _add_train_override_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baseline", help="train and evaluate a baseline variant")
    p.add_argument("--kind", required=True, choices=list(evaluation.BASELINE_KINDS))
    p.add_argument("--config", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--outfits", default=None)
    p.add_argument("--fitb", default=None)
    p.add_argument("--baseline-seed", type=int, default=None, dest="baseline_seed")
    p.add_argument("--out", required=True)
    _add_train_override_flags(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("export-embeddings", help="write per-condition masked embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("check-grads", help="finite-difference check of all gradients")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--modes", default=None, help="comma-separated branch modes")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_check_grads)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, ConfigError, ContractError, DimensionError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
