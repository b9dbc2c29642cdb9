"""Deterministic fold plans, nested cross-validation and metric summaries."""

from dataclasses import dataclass, field

import numpy as np

from .survival import _labels, concordance_index


@dataclass
class Split:
    """Index arrays into the cohort; ``test`` is empty for plain k-fold plans."""

    name: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))


def _deal(idx, k, rng, event=None):
    """Shuffle ``idx`` and deal it round-robin into ``k`` folds.

    With ``event`` given, events are dealt first and censored subjects
    continue the rotation, which balances event counts across folds.
    """
    if event is None:
        order = idx[rng.permutation(idx.size)]
    else:
        ev = idx[event[idx]]
        ce = idx[~event[idx]]
        order = np.concatenate([ev[rng.permutation(ev.size)], ce[rng.permutation(ce.size)]])
    folds = [order[j::k] for j in range(k)]
    return [np.sort(f) for f in folds]


def kfold_plan(n, k=9, seed=0, event=None):
    """Plain k-fold: fold ``j`` validates, the rest trains."""
    if k < 2:
        raise ValueError("k must be ≥ 2")
    if n < k:
        raise ValueError(f"cannot split {n} subjects into {k} folds")
    idx = np.arange(n)
    folds = _deal(idx, k, np.random.default_rng(seed), event)
    return [
        Split(f"fold{j}", np.setdiff1d(idx, f), f)
        for j, f in enumerate(folds)
    ]


def nested_plan(n, outer_k=5, inner_k=5, seed=0, event=None):
    """Outer folds hold out a test set; inner folds split the rest into train/val.

    With 5 x 5 this gives the 64% / 16% / 20% train/val/test ratios.
    """
    if outer_k < 2 or inner_k < 2:
        raise ValueError("k must be ≥ 2")
    if n < outer_k * inner_k:
        raise ValueError(f"cannot split {n} subjects into {outer_k}x{inner_k} folds")
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    splits = []
    for o, test in enumerate(_deal(idx, outer_k, rng, event)):
        rest = np.setdiff1d(idx, test)
        for i, val in enumerate(_deal(rest, inner_k, rng, event)):
            splits.append(Split(f"outer{o}_inner{i}", np.setdiff1d(rest, val), val, test))
    return splits


def check_events(splits, event):
    """Raise naming the first split whose train, val or test part has no events."""
    for s in splits:
        for part in ("train", "val", "test"):
            ids = getattr(s, part)
            if ids.size and not event[ids].any():
                raise ValueError(f"split {s.name}: {part} part has no observed events")


@dataclass
class MetricsSummary:
    per_fold: list
    mean: float
    sigma: float

    def to_dict(self):
        return {"per_fold": list(self.per_fold), "c_index_mean": self.mean, "c_index_sigma": self.sigma}


def summarize(values):
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to summarize")
    return MetricsSummary([float(x) for x in v], float(v.mean()), float(v.std()))


def run_nested_cv(n, y, fit_predict, outer_k=5, inner_k=5, seed=0, stratify=False):
    """Score ``fit_predict(split) -> test log-risks`` on every outer x inner split.

    Returns a summary over ``outer_k * inner_k`` held-out C-indices, each
    computed on the split's outer test fold.
    """
    time, event = _labels(y, require_event=False)
    splits = nested_plan(n, outer_k, inner_k, seed, event if stratify else None)
    check_events(splits, event)
    scores = []
    for s in splits:
        lr = np.asarray(fit_predict(s), dtype=np.float64)
        scores.append(concordance_index(lr, y[s.test]))
    return summarize(scores)
