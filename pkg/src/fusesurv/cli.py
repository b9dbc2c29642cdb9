"""Command-line entry point: synth, train, cv, predict, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io
from ._validation import make_survival_y
from .config import ConfigError, RunConfig
from .cv import summarize
from .encoders.clinical import ClinicalSchema
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .optim import BETA1, BETA2, EPS
from .pipeline import (
    GRID_COLUMNS,
    FoldModels,
    column_label,
    desk_config,
    late_ensemble,
    predict_cohort,
    run_grid,
    run_kfold_train,
)
from .survival import concordance_index, roc_auc
from .synth import SynthConfig, generate_cohort

log = logging.getLogger("fusesurv")
SEED_ENV = "PROFUSE_SEED"


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _resolve_seed(flag, config_seed=0):
    """Flag beats the environment variable, which beats the config file."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            seed = int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an unsigned integer, got {env!r}") from None
        if seed < 0:
            raise UsageError(f"{SEED_ENV} must be an unsigned integer, got {env!r}")
        return seed
    return config_seed


def _load_config(args):
    if args.config is None:
        cfg = RunConfig()
    elif args.config == "desk":
        cfg = desk_config()
    else:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = RunConfig.load(args.config)
    return cfg.with_seed(_resolve_seed(args.seed, cfg.seed))


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _write_text(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_curves(path, result):
    rows = [(e, io.fmt_float(t), io.fmt_float(v)) for e, (t, v) in enumerate(zip(result.train_curve, result.val_curve))]
    io.write_csv(path, ("epoch", "train_loss", "val_loss"), rows)


def _save_fold(out, fold, schema):
    d = Path(out) / fold.name
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "checkpoint.pfmw", fold.state(schema))
    primary = next((k for k in fold.results if k.startswith("fusion")), None) or next(iter(fold.results), None)
    if primary is not None:
        _write_curves(d / "curves.csv", fold.results[primary])
    for name, result in fold.results.items():
        safe = re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_")
        _write_curves(d / f"curves_{safe}.csv", result)


def _echo(out, cfg, schema):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "config.yaml", cfg.dump())
    _write_text(out / "schema.yaml", yaml.safe_dump(schema.to_dict(), sort_keys=False))


def _run_metadata(cfg):
    return {
        "seed": cfg.seed,
        "adam": {"beta1": BETA1, "beta2": BETA2, "eps": EPS},
        "config": cfg.to_dict(),
    }


def _load_data(args, cfg, require_labels=True):
    _require(args, "data")
    schema_path = cfg.data.schema
    if schema_path is not None and not Path(schema_path).is_absolute():
        schema_path = Path(args.data) / schema_path
    schema = io.load_schema(schema_path)
    return io.read_cohort(args.data, cfg.data, schema, require_labels), schema


# -- commands ------------------------------------------------------------------

def cmd_synth(args):
    _require(args, "out")
    if args.n is None or args.n < 1:
        raise UsageError("--n must be a positive integer")
    seed = _resolve_seed(args.seed, 0)
    try:
        scfg = SynthConfig(
            n_subjects=args.n, seed=seed, signal_to_noise=args.snr, censoring_rate_target=args.censoring,
            pathology_dim=args.pathology_dim, radiology_dim=args.radiology_dim,
            radiology_band=min(args.radiology_band, args.radiology_dim), world_seed=args.world_seed,
            interaction_weight=args.interaction, missing_rate=tuple(args.missing_rate),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cohort, truth = generate_cohort(scfg)
    if args.permute_labels:
        perm = np.random.default_rng([seed, 1]).permutation(len(cohort))
        cohort = cohort.with_labels(cohort.time[perm], cohort.event[perm])
    io.write_cohort(args.out, cohort, truth)
    echo = {k: getattr(scfg, k) for k in ("n_subjects", "seed", "signal_to_noise", "censoring_rate_target",
                                          "pathology_dim", "radiology_dim", "radiology_band", "world_seed",
                                          "interaction_weight")}
    echo["missing_rate"] = list(scfg.missing_rate)
    echo["permute_labels"] = bool(args.permute_labels)
    _write_text(Path(args.out) / "synth_config.yaml", yaml.safe_dump(echo, sort_keys=False))
    log.info("wrote %d subjects to %s", len(cohort), args.out)
    return 0


def _fold_scores(cohort, splits, folds, cfg):
    scores = []
    for s, f in zip(splits, folds):
        val = cohort.subset(s.val)
        if cfg.fusion.strategy == "intermediate":
            lr = f.predict_intermediate(val, cfg.fusion.intermediate_modalities)
        else:
            fz = cfg.fusion
            lr = late_ensemble([f], fz.aggregate_pooling).predict(val, fz.modality_combination,
                                                                 fz.weight_agg, fz.score_agg)
        scores.append(concordance_index(lr, val.y))
    return scores


def cmd_train(args):
    _require(args, "out")
    cfg = _load_config(args)
    cohort, schema = _load_data(args, cfg)
    combos = (cfg.fusion.intermediate_modalities,) if cfg.fusion.strategy == "intermediate" else ()
    _echo(args.out, cfg, schema)
    splits, folds = run_kfold_train(cohort, cfg, combos, schema, args.parallelism)
    for fold in folds:
        _save_fold(args.out, fold, schema)
    summary = summarize(_fold_scores(cohort, splits, folds, cfg))
    doc = {**summary.to_dict(), "folds": [s.name for s in splits], "strategy": cfg.fusion.strategy,
           **_run_metadata(cfg)}
    _write_json(Path(args.out) / "metrics.json", doc)
    print(f"validation C-index {summary.mean:.4f} ± {summary.sigma:.4f} over {len(splits)} folds")
    return 0


def _write_grid(path, grid):
    header = ["model", *(column_label(w, s) for w, s in GRID_COLUMNS)]
    rows = [[name, *(f"{c.mean:.4f} ± {c.sigma:.4f}" for c in cells)] for name, cells in grid.rows()]
    io.write_csv(path, header, rows)


def cmd_cv(args):
    _require(args, "out")
    cfg = _load_config(args)
    cohort, schema = _load_data(args, cfg)
    fz = cfg.fusion
    if fz.intermediate_modalities not in fz.grid_intermediate:
        doc = cfg.to_dict()
        doc["fusion"]["grid_intermediate"] = [*fz.grid_intermediate, fz.intermediate_modalities]
        cfg = RunConfig.from_dict(doc)
        fz = cfg.fusion
    _echo(args.out, cfg, schema)
    grid = run_grid(cohort, cfg, schema, args.parallelism)
    for fold in grid.folds:
        _save_fold(args.out, fold, schema)
    _write_grid(Path(args.out) / "grid.csv", grid)
    if fz.strategy == "intermediate":
        headline = grid.intermediate[fz.intermediate_modalities]
    else:
        headline = grid.late[(fz.modality_combination, fz.weight_agg, fz.score_agg)]
    doc = {**headline.to_dict(), "folds": [s.name for s in grid.splits], "strategy": fz.strategy,
           "grid": grid.to_dict(), **_run_metadata(cfg)}
    _write_json(Path(args.out) / "metrics.json", doc)
    print(f"nested CV C-index {headline.mean:.4f} ± {headline.sigma:.4f} over {len(headline.per_fold)} scores")
    return 0


def load_run(model_dir):
    """Configuration, schema and fold bundles of a finished training run."""
    model_dir = Path(model_dir)
    cfg_path = model_dir / "config.yaml"
    if not cfg_path.is_file():
        raise FileNotFoundError(f"{model_dir}: no config.yaml (not a training run directory)")
    cfg = RunConfig.load(cfg_path)
    with open(model_dir / "schema.yaml", encoding="utf-8") as fh:
        schema = ClinicalSchema.from_dict(yaml.safe_load(fh))
    with open(model_dir / "metrics.json", encoding="utf-8") as fh:
        names = json.load(fh)["folds"]
    folds = []
    for name in names:
        ckpt = model_dir / name / "checkpoint.pfmw"
        if not ckpt.is_file():
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        folds.append(FoldModels.from_state(name, load_checkpoint(ckpt), cfg, schema))
    return cfg, schema, folds


def cmd_predict(args):
    _require(args, "model", "data", "out")
    cfg, schema, folds = load_run(args.model)
    cohort = io.read_cohort(args.data, cfg.data, schema, require_labels=False)
    lr = predict_cohort(folds, cohort, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_predictions(args.out, cohort.case_ids, lr)
    log.info("wrote %d predictions to %s", len(lr), args.out)
    return 0


def cmd_evaluate(args):
    _require(args, "predictions", "labels", "out")
    ids, lr = io.read_predictions(args.predictions)
    lab_ids, time, event = io.read_labels(args.labels)
    pos = {c: i for i, c in enumerate(lab_ids)}
    unmatched = sorted(set(ids) ^ set(lab_ids))
    if unmatched:
        shown = ", ".join(unmatched[:20]) + (" ..." if len(unmatched) > 20 else "")
        raise ValueError(f"unmatched case ids ({len(unmatched)}): {shown}")
    order = np.array([pos[c] for c in ids])
    time, event = time[order], event[order]
    doc = {
        "c_index": concordance_index(lr, make_survival_y(time, event)),
        "n": len(ids),
        "convention": "higher log_risk means earlier expected recurrence",
    }
    if args.binarize_months is not None:
        cut = args.binarize_months
        known = event & (time <= cut) | (time > cut)  # censored before the cut-off stay unknown
        labels = (event & (time <= cut))[known]
        doc["binarize_months"] = cut
        doc["n_binary"] = int(known.sum())
        doc["auc"] = roc_auc(lr[known], labels)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    _write_json(args.out, doc)
    print(f"C-index {doc['c_index']:.4f}" + (f", AUC {doc['auc']:.4f}" if "auc" in doc else ""))
    return 0


# -- argument parsing ----------------------------------------------------------

def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration, or 'desk' for the small built-in preset")
    common.add_argument("--data", help="data directory (labels.csv, clinical.csv, embeddings/)")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--seed", type=_nonneg_int, help=f"overrides {SEED_ENV} and the config seed")
    common.add_argument("--parallelism", type=_positive_int, help="worker processes for fold jobs")
    common.add_argument("--verbosity", type=int, default=0, choices=(0, 1, 2),
                        help="0 warnings, 1 one line per epoch, 2 debug")

    parser = argparse.ArgumentParser(prog="fusesurv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--snr", type=float, default=4.0)
    p.add_argument("--censoring", type=float, default=0.3)
    p.add_argument("--pathology-dim", type=_positive_int, default=1024)
    p.add_argument("--radiology-dim", type=_positive_int, default=65536)
    p.add_argument("--radiology-band", type=_positive_int, default=1024)
    p.add_argument("--world-seed", type=_nonneg_int, help="seed for the shared signal directions")
    p.add_argument("--interaction", type=float, default=0.0, help="weight of the cross-modal product term")
    p.add_argument("--missing-rate", type=float, nargs=3, default=(0.0, 0.0, 0.0),
                   metavar=("C", "P", "R"))
    p.add_argument("--permute-labels", action="store_true", help="shuffle labels across subjects (null cohort)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="k-fold training")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("cv", parents=[common], help="nested cross-validation grid")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", parents=[common], help="predict with a trained run")
    p.add_argument("--model", help="training run directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against labels")
    p.add_argument("--predictions")
    p.add_argument("--labels")
    p.add_argument("--binarize-months", type=float,
                   help="also report AUC for recurrence within this many months")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[args.verbosity],
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"fusesurv {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"fusesurv {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
