"""Intermediate (token transformer) and late (per-modality ensemble) fusion."""

import copy
import warnings
from dataclasses import dataclass

import numpy as np

from .nn.modules import (
    Linear,
    Module,
    PositionalEncoding,
    TransformerEncoder,
    masked_mean_pool,
    _grad_enabled,
    masked_mean_pool_backward,
    no_grad,
)
from .survival import predict_log_risk

COMBINATIONS = ("C", "P", "R", "C+P", "C+P+R(avg)", "C+P+R(med)")
_COMBO_PARTS = {
    "C": ((0,), "mean"),
    "P": ((1,), "mean"),
    "R": ((2,), "mean"),
    "C+P": ((0, 1), "mean"),
    "C+P+R(avg)": ((0, 1, 2), "mean"),
    "C+P+R(med)": ((0, 1, 2), "median"),
}

# modality subsets an intermediate model can be trained on
INTERMEDIATE_COMBINATIONS = {
    "C": (True, False, False),
    "P": (False, True, False),
    "R": (False, False, True),
    "C+P": (True, True, False),
    "C+R": (True, False, True),
    "P+R": (False, True, True),
    "C+P+R": (True, True, True),
}


@dataclass
class FusionInputs:
    """Per-subject modality vectors plus the ``(n, 3)`` availability mask."""

    clinical: np.ndarray
    pathology: np.ndarray
    radiology: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        n = self.mask.shape[0]
        if self.mask.ndim != 2 or self.mask.shape[1] != 3:
            raise ValueError("mask must have shape (n, 3)")
        for name in ("clinical", "pathology", "radiology"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.ndim != 2 or v.shape[0] != n:
                raise ValueError(f"{name} block must have {n} rows")
            setattr(self, name, v)
        if not np.all(self.mask.any(axis=1)):
            raise ValueError("no available modalities")

    def __len__(self):
        return self.mask.shape[0]

    def blocks(self):
        return (self.clinical, self.pathology, self.radiology)

    def subset(self, idx):
        return FusionInputs(*(b[idx] for b in self.blocks()), self.mask[idx])


class IntermediateFusionModel(Module):
    """Tokenize each modality into ``d`` dims, encode the 3-token stack, pool, score.

    Absent modalities contribute a zero token that attention and pooling
    both mask out. The survival head starts at zero.
    """

    def __init__(self, clinical_dim=25, pathology_dim=512, radiology_dim=512, d=768,
                 layers=4, heads=8, ffn_width=None, dropout=0.1, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d = d
        self.tok_clinical = Linear(clinical_dim, d, rng)
        self.tok_pathology = Linear(pathology_dim, d, rng)
        self.tok_radiology = Linear(radiology_dim, d, rng)
        self.positions = PositionalEncoding(3, d)
        self.encoder = TransformerEncoder(d, layers, heads, ffn_width, dropout, rng)
        self.head = Linear(d, 1, rng, init="zeros")

    @property
    def tokenizers(self):
        return (self.tok_clinical, self.tok_pathology, self.tok_radiology)

    def tokenize_and_stack(self, inputs):
        """``(n, 3, d)`` token stack in clinical/pathology/radiology order."""
        mask = inputs.mask
        tokens = []
        for j, (tok, block) in enumerate(zip(self.tokenizers, inputs.blocks())):
            present = mask[:, j:j + 1]
            t = tok.forward(np.where(present, block, 0.0))
            tokens.append(np.where(present, t, 0.0))
        tokens = np.broadcast_arrays(*tokens)
        stacked = np.stack(tokens, axis=-2)
        return self.positions.forward(stacked, mask)

    def forward(self, inputs):
        mask = inputs.mask
        tokens = self.tokenize_and_stack(inputs)
        if _grad_enabled() or self.training:
            pooled = masked_mean_pool(self.encoder.forward(tokens, mask), mask)
        else:
            pooled = self.encoder.forward_pooled(tokens, mask)
        self._mask = mask
        return self.head.forward(pooled)[..., 0]

    def backward(self, dlr):
        mask = self._mask
        dpool = self.head.backward(np.asarray(dlr)[:, None])
        dtokens = self.positions.backward(self.encoder.backward(masked_mean_pool_backward(dpool, mask)))
        for j, tok in enumerate(self.tokenizers):
            tok.backward(dtokens[:, j] * mask[:, j:j + 1], need_input_grad=False)

    def predict(self, inputs):
        self.eval()
        with no_grad():
            return self.forward(inputs)


def ensemble_intermediate(fold_log_risks):
    """Mean over the leading (fold) axis."""
    lrs = np.asarray(fold_log_risks, dtype=np.float64)
    if lrs.size == 0 or lrs.shape[0] == 0:
        raise ValueError("no fold scores to ensemble")
    return lrs.mean(axis=0)


def aggregate_model_weights(states, mode="median"):
    """Coordinate-wise median or mean over identically shaped parameter sets."""
    if not states:
        raise ValueError("no models to aggregate")
    if mode not in ("median", "mean"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    keys = list(states[0])
    out = {}
    for k in keys:
        stack = []
        for s in states:
            if k not in s or np.shape(s[k]) != np.shape(states[0][k]):
                raise ValueError(f"shape mismatch for tensor {k!r}")
            stack.append(np.asarray(s[k], dtype=np.float64))
        if any(set(s) != set(keys) for s in states):
            raise ValueError("models have different tensor sets")
        stack = np.stack(stack)
        out[k] = np.median(stack, axis=0) if mode == "median" else stack.mean(axis=0)
    return out


def late_fuse(modality_log_risks, mode="median"):
    """Median or mean over the leading (modality) axis, ignoring NaN entries.

    NaN marks a modality that is absent for that subject.
    """
    lrs = np.asarray(modality_log_risks, dtype=np.float64)
    if lrs.size == 0 or lrs.shape[0] == 0:
        raise ValueError("no modality scores to fuse")
    if mode not in ("median", "mean"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if lrs.shape[0] == 1:
        out = lrs[0].copy()
    elif not np.isnan(lrs).any():
        out = np.median(lrs, axis=0) if mode == "median" else lrs.mean(axis=0)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out = np.nanmedian(lrs, axis=0) if mode == "median" else np.nanmean(lrs, axis=0)
    if np.isnan(out).any():
        raise ValueError("missing required modality")
    return out


@dataclass
class ClinicalFold:
    """A fold's clinical Cox model: fitted dummy encoder plus coefficients."""

    encoder: object
    beta: np.ndarray
    h0: float = 0.0

    def predict(self, records):
        return predict_log_risk(self.beta, self.encoder.transform(records), self.h0)


class LateFusionEnsemble:
    """Per-modality fold models combined by weight and score aggregation.

    Parameters
    ----------
    clinical : list of ClinicalFold
    pathology, radiology : list of PooledCoxModel
        One per fold. Heads are aggregated across folds; each fold keeps its
        own pooling encoder unless ``aggregate_pooling`` is set.
    aggregate_pooling : bool
        Also aggregate the pooling encoders (reduction and scorer weights).
    """

    def __init__(self, clinical=(), pathology=(), radiology=(), aggregate_pooling=False):
        self.clinical = list(clinical)
        self.pathology = list(pathology)
        self.radiology = list(radiology)
        self.aggregate_pooling = aggregate_pooling

    def _neural_scores(self, models, bags, weight_agg):
        head = aggregate_model_weights([m.head.state_dict() for m in models], weight_agg)
        if self.aggregate_pooling:
            enc = copy.deepcopy(models[0].encoder)
            enc.load_state_dict(aggregate_model_weights([m.encoder.state_dict() for m in models], weight_agg))
            encoders = [enc]
        else:
            encoders = [m.encoder for m in models]
        scores = []
        for enc in encoders:
            with no_grad():
                feats = enc.forward(bags)
            scores.append(feats @ head["weight"][0] + head["bias"][0])
        return np.asarray(scores)

    def modality_scores(self, cohort, weight_agg="median", score_agg="median", modalities=(0, 1, 2)):
        """``(3, n)`` per-modality log-risks; NaN where a modality is absent or not requested."""
        n = len(cohort)
        mask = cohort.modality_mask()
        out = np.full((3, n), np.nan)
        reduce = (lambda a: np.median(a, axis=0)) if score_agg == "median" else (lambda a: a.mean(axis=0))
        if score_agg not in ("median", "mean"):
            raise ValueError(f"unknown aggregation mode {score_agg!r}")
        if 0 in modalities and self.clinical:
            idx = np.flatnonzero(mask[:, 0])
            if idx.size:
                recs = [cohort.clinical[i] for i in idx]
                out[0, idx] = reduce(np.asarray([f.predict(recs) for f in self.clinical]))
        for j, models, bags in ((1, self.pathology, cohort.pathology), (2, self.radiology, cohort.radiology)):
            if j not in modalities or not models:
                continue
            idx = np.flatnonzero(mask[:, j])
            if idx.size:
                out[j, idx] = reduce(self._neural_scores(models, [bags[i] for i in idx], weight_agg))
        return out

    def predict(self, cohort, combination="C+P+R(med)", weight_agg="median", score_agg="median"):
        if combination not in _COMBO_PARTS:
            raise ValueError(f"unknown modality combination {combination!r}")
        parts, fuse_mode = _COMBO_PARTS[combination]
        scores = self.modality_scores(cohort, weight_agg, score_agg, parts)
        return late_fuse(scores[list(parts)], fuse_mode)

