"""Per-fold model training, fold ensembles and the nested-CV evaluation grid.

A fold bundles everything trained on one training split: clinical
encoders and a clinical Cox model, pathology and radiology pooling models
with linear Cox heads, and one intermediate-fusion model per requested
modality combination. The fusion models consume the pooled features of
the same fold's pooling encoders.
"""

import logging
import multiprocessing
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .cv import check_events, kfold_plan, nested_plan, summarize
from .encoders.clinical import DEFAULT_SCHEMA, ClinicalEncoder, ClinicalStats
from .encoders.pooling import AttentionPoolingEncoder, PooledCoxModel, pack_bags
from .fusion import (
    _COMBO_PARTS,
    COMBINATIONS,
    INTERMEDIATE_COMBINATIONS,
    ClinicalFold,
    FusionInputs,
    IntermediateFusionModel,
    LateFusionEnsemble,
    ensemble_intermediate,
    late_fuse,
)
from .nn.modules import no_grad
from .survival import concordance_index, fit_cph
from .training import train_fold

log = logging.getLogger(__name__)

_CODES = {"pathology": 1, "radiology": 2, "fusion": 3}
SMALL_SPLIT_RIDGE = 1.0
GRID_COLUMNS = (
    ("median", "median"),
    ("median", "mean"),
    ("mean", "median"),
    ("mean", "mean"),
)


def column_label(weight_agg, score_agg):
    short = {"median": "MED", "mean": "AVG"}
    return f"{short[weight_agg]} MW + {short[score_agg]} LRS"


def desk_config(seed=0):
    """Small dimensions and epoch budgets for single-core runs.

    Architecture and protocol match the defaults; only widths and epoch
    counts shrink.
    """
    return RunConfig.from_dict({
        "model": {"latent_dim": 32, "layers": 4, "heads": 4, "ffn_width": 64, "dropout": 0.1,
                  "top_k": 64, "pooled_dim": 16, "radiology_hidden": 16, "scorer_width": 16},
        "training": {"optimizer": "adamw", "learning_rate": 1e-3, "weight_decay": 1e-2,
                     "max_epochs": 400, "min_epochs_before_stop": 100, "patience": 40, "seed": seed},
        "encoder_training": {"optimizer": "adam", "learning_rate": 3e-3, "weight_decay": 0.0,
                             "max_epochs": 200, "min_epochs_before_stop": 0, "patience": 30, "seed": seed},
    })


@dataclass
class FoldModels:
    """Models trained on one training split."""

    name: str
    onehot: ClinicalEncoder
    clinical: ClinicalFold = None
    pathology: PooledCoxModel = None
    radiology: PooledCoxModel = None
    fusion: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)

    def fusion_inputs(self, cohort, combination="C+P+R"):
        """Tokenizer inputs for ``cohort``: clinical vectors plus this fold's pooled features."""
        n = len(cohort)
        mask = cohort.modality_mask() & np.asarray(INTERMEDIATE_COMBINATIONS[combination])
        if self.pathology is None:
            mask[:, 1] = False
        if self.radiology is None:
            mask[:, 2] = False
        clinical = self.onehot.transform(cohort.clinical)
        feats = []
        for j, model, bags in ((1, self.pathology, cohort.pathology), (2, self.radiology, cohort.radiology)):
            width = model.encoder.pooled_dim if model is not None else 1
            block = np.zeros((n, width))
            idx = np.flatnonzero(mask[:, j])
            if idx.size:
                model.eval()
                with no_grad():
                    block[idx] = model.features([bags[i] for i in idx])
            feats.append(block)
        missing = ~mask.any(axis=1)
        if missing.any():
            ids = [cohort.case_ids[i] for i in np.flatnonzero(missing)[:5]]
            raise ValueError(f"no available modalities for {combination}: {', '.join(ids)}")
        return FusionInputs(clinical, feats[0], feats[1], mask)

    def predict_intermediate(self, cohort, combination="C+P+R"):
        if combination not in self.fusion:
            raise ValueError(f"fold {self.name} has no {combination} fusion model")
        return self.fusion[combination].predict(self.fusion_inputs(cohort, combination))

    # -- serialization -------------------------------------------------------

    def state(self, schema=DEFAULT_SCHEMA):
        """Flat name -> tensor mapping for a PFMW file."""
        stats = self.onehot.stats_
        out = {}
        numeric = [a.name for a in schema.attributes if a.kind == "numeric"]
        categorical = [a.name for a in schema.attributes if a.kind != "numeric"]
        out["clinical.stats.mean"] = np.array([stats.mean[k] for k in numeric], dtype=np.float64)
        out["clinical.stats.std"] = np.array([stats.std[k] for k in numeric], dtype=np.float64)
        out["clinical.stats.mode"] = np.array([stats.mode[k] for k in categorical], dtype=np.float64)
        if self.clinical is not None:
            out["clinical.cph.beta"] = self.clinical.beta
            out["clinical.cph.h0"] = np.array([self.clinical.h0])
        for name in ("pathology", "radiology"):
            model = getattr(self, name)
            if model is not None:
                out.update({f"{name}.{k}": v for k, v in model.state_dict().items()})
        for combo, model in self.fusion.items():
            out.update({f"fusion[{combo}].{k}": v for k, v in model.state_dict().items()})
        return out

    @classmethod
    def from_state(cls, name, tensors, config, schema=DEFAULT_SCHEMA):
        """Rebuild a fold from :meth:`state` output and the run configuration."""
        numeric = [a.name for a in schema.attributes if a.kind == "numeric"]
        categorical = [a.name for a in schema.attributes if a.kind != "numeric"]
        row = lambda k: np.asarray(tensors[k]).ravel()
        try:
            stats = ClinicalStats(
                dict(zip(numeric, map(float, row("clinical.stats.mean")))),
                dict(zip(numeric, map(float, row("clinical.stats.std")))),
                dict(zip(categorical, map(int, row("clinical.stats.mode")))),
            )
        except KeyError as exc:
            raise ValueError(f"fold {name}: checkpoint lacks {exc.args[0]}") from None
        onehot, dummy = _clinical_encoders(stats, schema)
        fold = cls(name, onehot)
        if "clinical.cph.beta" in tensors:
            fold.clinical = ClinicalFold(dummy, row("clinical.cph.beta").copy(), float(row("clinical.cph.h0")[0]))
        m = config.model
        for modality in ("pathology", "radiology"):
            part = _strip(tensors, f"{modality}.")
            if part:
                in_dim = part["encoder.reduce1.weight"].shape[1]
                model = _pooled_model(modality, in_dim, config)
                model.load_state_dict(part)
                setattr(fold, modality, model)
        for combo in INTERMEDIATE_COMBINATIONS:
            part = _strip(tensors, f"fusion[{combo}].")
            if part:
                model = IntermediateFusionModel(
                    part["tok_clinical.weight"].shape[1], part["tok_pathology.weight"].shape[1],
                    part["tok_radiology.weight"].shape[1], m.latent_dim, m.layers, m.heads,
                    m.ffn_width, m.dropout, np.random.default_rng(0))
                model.load_state_dict(part)
                model.eval()
                fold.fusion[combo] = model
        return fold


def _strip(tensors, prefix):
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def _clinical_encoders(stats, schema):
    onehot = ClinicalEncoder(schema, "onehot")
    dummy = ClinicalEncoder(schema, "dummy")
    onehot.stats_ = dummy.stats_ = stats
    return onehot, dummy


def _pooled_model(modality, in_dim, config):
    m = config.model
    # identical initialization in every fold keeps fold heads comparable for weight aggregation
    rng = np.random.default_rng([config.seed, _CODES[modality]])
    if modality == "pathology":
        enc = AttentionPoolingEncoder.pathology(in_dim, m.pooled_dim, m.top_k, m.scorer_width, rng)
    else:
        enc = AttentionPoolingEncoder.radiology(in_dim, m.radiology_hidden, m.pooled_dim, m.scorer_width, rng)
    return PooledCoxModel(enc, rng)


def _fit_clinical(dummy, cohort):
    idx = [i for i, r in enumerate(cohort.clinical) if r is not None]
    if not idx or not cohort.event[idx].any():
        return None
    X = dummy.transform([cohort.clinical[i] for i in idx])
    y = cohort.subset(idx).y
    keep = np.ptp(X, axis=0) > 0  # categories absent from this split get a zero coefficient
    beta = np.zeros(X.shape[1])
    penalty = 0.0
    if keep.sum() >= cohort.event[idx].sum():
        penalty = SMALL_SPLIT_RIDGE
        log.warning("clinical Cox model: %d covariates for %d events, adding ridge penalty %g",
                    keep.sum(), cohort.event[idx].sum(), penalty)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_cph(X[:, keep], y, penalty=penalty)
    beta[keep] = fit.beta
    return ClinicalFold(dummy, beta, 0.0)


def _present(cohort, modality):
    bags = getattr(cohort, modality)
    return np.array([i for i, b in enumerate(bags) if b is not None], dtype=np.intp)


def _fit_pooled(modality, train, val, config):
    it, iv = _present(train, modality), _present(val, modality)
    if it.size == 0 or iv.size == 0 or not train.event[it].any() or not val.event[iv].any():
        log.warning("skipping %s model: no events among subjects with that modality", modality)
        return None, None
    bags_t = [getattr(train, modality)[i] for i in it]
    bags_v = [getattr(val, modality)[i] for i in iv]
    model = _pooled_model(modality, bags_t[0].shape[1], config)
    result = train_fold(model, pack_bags(bags_t, model.encoder.in_dim), train.subset(it).y,
                        pack_bags(bags_v, model.encoder.in_dim), val.subset(iv).y,
                        config.encoder_training, _epoch_logger(modality))
    return model, result


def _epoch_logger(what):
    def cb(epoch, train_loss, val_loss):
        log.info("%s epoch %d train %.6f val %.6f", what, epoch, train_loss, val_loss)
    return cb


def fit_fold(cohort, split, config, combinations=("C+P+R",), schema=DEFAULT_SCHEMA):
    """Train every model of one fold on ``split.train``, selecting on ``split.val``."""
    train, val = cohort.subset(split.train), cohort.subset(split.val)
    onehot = ClinicalEncoder(schema, "onehot").fit(train.clinical)
    onehot, dummy = _clinical_encoders(onehot.stats_, schema)
    fold = FoldModels(split.name, onehot)
    fold.clinical = _fit_clinical(dummy, train)
    for modality in ("pathology", "radiology"):
        model, result = _fit_pooled(modality, train, val, config)
        setattr(fold, modality, model)
        if result is not None:
            fold.results[modality] = result
    m = config.model
    for combo in combinations:
        rng = np.random.default_rng([config.seed, _CODES["fusion"]])
        model = IntermediateFusionModel(
            schema.total_width,
            fold.pathology.encoder.pooled_dim if fold.pathology else m.pooled_dim,
            fold.radiology.encoder.pooled_dim if fold.radiology else m.pooled_dim,
            m.latent_dim, m.layers, m.heads, m.ffn_width, m.dropout, rng)
        fold.results[f"fusion[{combo}]"] = train_fold(
            model, fold.fusion_inputs(train, combo), train.y, fold.fusion_inputs(val, combo), val.y,
            config.training, _epoch_logger(f"{split.name} fusion[{combo}]"))
        fold.fusion[combo] = model
    return fold


# -- parallel fold execution --------------------------------------------------

_SHARED = {}


def _job(args):
    split, config, combinations, schema = args
    return fit_fold(_SHARED["cohort"], split, config, combinations, schema)


def default_parallelism(n_jobs):
    return max(1, min(n_jobs, os.cpu_count() or 1))


def fit_folds(cohort, splits, config, combinations=("C+P+R",), schema=DEFAULT_SCHEMA, parallelism=None):
    """Train one :class:`FoldModels` per split, optionally in worker processes.

    Every fold is seeded independently of scheduling, so results do not
    depend on ``parallelism``.
    """
    parallelism = default_parallelism(len(splits)) if parallelism is None else parallelism
    jobs = [(s, config, tuple(combinations), schema) for s in splits]
    if parallelism <= 1 or len(splits) <= 1:
        return [fit_fold(cohort, *job) for job in jobs]
    _SHARED["cohort"] = cohort  # inherited read-only by forked workers
    try:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=parallelism, mp_context=ctx) as pool:
            return list(pool.map(_job, jobs))
    finally:
        _SHARED.clear()


def run_kfold_train(cohort, config, combinations=("C+P+R",), schema=DEFAULT_SCHEMA, parallelism=None):
    """Plain k-fold training; returns the splits and one fold bundle per split."""
    event = cohort.event if config.cv.stratify else None
    splits = kfold_plan(len(cohort), config.cv.k, config.seed, event)
    check_events(splits, cohort.event)
    return splits, fit_folds(cohort, splits, config, combinations, schema, parallelism)


class IntermediateEnsemble:
    """Mean log-risk over the fusion models of several folds."""

    def __init__(self, folds, combination="C+P+R"):
        if not folds:
            raise ValueError("no folds to ensemble")
        self.folds = list(folds)
        self.combination = combination

    def fold_log_risks(self, cohort):
        return np.stack([f.predict_intermediate(cohort, self.combination) for f in self.folds])

    def predict(self, cohort):
        return ensemble_intermediate(self.fold_log_risks(cohort))


def late_ensemble(folds, aggregate_pooling=False):
    return LateFusionEnsemble(
        [f.clinical for f in folds if f.clinical is not None],
        [f.pathology for f in folds if f.pathology is not None],
        [f.radiology for f in folds if f.radiology is not None],
        aggregate_pooling,
    )


def predict_cohort(folds, cohort, config):
    """Log-risks under the configured fusion strategy."""
    fz = config.fusion
    if fz.strategy == "intermediate":
        return IntermediateEnsemble(folds, fz.intermediate_modalities).predict(cohort)
    return late_ensemble(folds, fz.aggregate_pooling).predict(
        cohort, fz.modality_combination, fz.weight_agg, fz.score_agg)


# -- nested cross-validation grid ---------------------------------------------

@dataclass
class GridResult:
    """Nested-CV summaries: late-fusion cells and intermediate-fusion rows."""

    late: dict  # (combination, weight_agg, score_agg) -> MetricsSummary
    intermediate: dict  # combination -> MetricsSummary
    splits: list
    folds: list = field(repr=False, default=None)

    def best_late(self):
        return max(self.late.items(), key=lambda kv: kv[1].mean)

    def rows(self):
        """Table rows: six late-fusion combinations, then the intermediate rows."""
        out = []
        for combo in COMBINATIONS:
            out.append((combo, [self.late[(combo, w, s)] for w, s in GRID_COLUMNS]))
        for combo, summary in self.intermediate.items():
            out.append((f"Intermediate {combo}", [summary] * len(GRID_COLUMNS)))
        return out

    def to_dict(self):
        return {
            "late": {
                f"{c} | {column_label(w, s)}": v.to_dict() for (c, w, s), v in self.late.items()
            },
            "intermediate": {c: v.to_dict() for c, v in self.intermediate.items()},
        }


def run_grid(cohort, config, schema=DEFAULT_SCHEMA, parallelism=None, folds=None):
    """Nested cross-validation over every late-fusion cell and intermediate row.

    Each intermediate row has ``outer_k * inner_k`` C-indices, one per
    inner model scored on its outer test fold. Each late-fusion cell has
    ``outer_k`` C-indices: the ensemble of an outer fold's inner models
    scored on that outer test fold.
    """
    cv = config.cv
    event = cohort.event if cv.stratify else None
    splits = nested_plan(len(cohort), cv.outer_k, cv.inner_k, config.seed, event)
    check_events(splits, cohort.event)
    combos = tuple(config.fusion.grid_intermediate)
    if folds is None:
        folds = fit_folds(cohort, splits, config, combos, schema, parallelism)

    inter = {}
    for combo in combos:
        scores = []
        for s, f in zip(splits, folds):
            test = cohort.subset(s.test)
            scores.append(concordance_index(f.predict_intermediate(test, combo), test.y))
        inter[combo] = summarize(scores)

    late_scores = {(c, w, s): [] for c in COMBINATIONS for w, s in GRID_COLUMNS}
    for o in range(cv.outer_k):
        members = [f for s, f in zip(splits, folds) if s.name.startswith(f"outer{o}_")]
        test = cohort.subset(splits[o * cv.inner_k].test)
        ens = late_ensemble(members, config.fusion.aggregate_pooling)
        for w, s in GRID_COLUMNS:
            per_modality = ens.modality_scores(test, w, s)
            for combo in COMBINATIONS:
                lr = _late_from_scores(per_modality, combo)
                late_scores[(combo, w, s)].append(concordance_index(lr, test.y))
    late = {k: summarize(v) for k, v in late_scores.items()}
    return GridResult(late, inter, splits, folds)


def _late_from_scores(per_modality, combination):
    parts, mode = _COMBO_PARTS[combination]
    return late_fuse(per_modality[list(parts)], mode)
