"""Seeded synthetic multi-modal cohorts with known hazards.

The true log-risk of a subject combines a clinical score with two latent
factors, one carried by the pathology patches and one by the radiology
slices. Event times follow a Weibull proportional-hazards model whose
shape equals ``signal_to_noise``; this is an exponential model after the
monotone time change ``t -> t**snr``, so partial likelihoods and
concordance behave exactly as for exponential times with rate
``exp(h*)``, where ``h* = snr * r``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ._validation import make_survival_y
from .data import Cohort
from .encoders.clinical import DEFAULT_SCHEMA, ClinicalStats, encode_clinical_dummy
from .survival import _labels

# reference-coded effects for DEFAULT_SCHEMA (width 18)
DEFAULT_CLINICAL_BETA = np.array(
    [0.2]  # age
    + [0.3, 0.6, 0.9, 1.2]  # ISUP 2..5
    + [0.0, 0.1, 0.2, 0.4, 0.5, 0.7, 0.8, 1.0]  # pT stage beyond pT2
    + [0.4, 0.3, 0.4, 0.5, 0.3]  # binary findings
)

_AGE_MEAN, _AGE_SD = 63.0, 7.0
_CATEGORY_PROBS = {
    "isup_grade": [0.2, 0.35, 0.2, 0.1, 0.15],
    "pt_stage": [0.15, 0.05, 0.05, 0.15, 0.1, 0.2, 0.2, 0.05, 0.05],
    "lymph_nodes": [0.85, 0.15],
    "capsular_penetration": [0.55, 0.45],
    "surgical_margins": [0.7, 0.3],
    "svi": [0.8, 0.2],
    "lvi": [0.75, 0.25],
}


@dataclass
class SynthConfig:
    n_subjects: int = 300
    seed: int = 0
    true_beta_clinical: np.ndarray = None
    pathology_signal_direction: np.ndarray = None
    radiology_signal_direction: np.ndarray = None
    signal_to_noise: float = 4.0
    censoring_rate_target: float = 0.3
    patches_per_subject: tuple = (8, 24)
    slices_per_subject: tuple = (4, 12)
    pathology_dim: int = 1024
    radiology_dim: int = 65536
    radiology_band: int = 1024
    signal_fraction: float = 0.25
    signal_amplitude: float = 3.0
    modality_weights: tuple = (1.0, 1.0, 1.0)
    missing_rate: tuple = (0.0, 0.0, 0.0)
    clinical_unknown_rate: float = 0.0
    base_months: float = 36.0
    sparse_radiology: bool = True
    world_seed: int = None
    interaction_weight: float = 0.0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be positive")
        if not 0 <= self.censoring_rate_target < 1:
            raise ValueError("censoring_rate_target must lie in [0, 1)")
        if not self.signal_to_noise > 0:
            raise ValueError("signal_to_noise must be positive")
        if self.radiology_band > self.radiology_dim:
            raise ValueError("radiology_band exceeds radiology_dim")
        for lo, hi in (self.patches_per_subject, self.slices_per_subject):
            if not 1 <= lo <= hi:
                raise ValueError("row-count ranges need 1 <= low <= high")


@dataclass
class GroundTruth:
    true_log_risk: np.ndarray
    event_time: np.ndarray
    censor_time: np.ndarray
    latent: np.ndarray = field(repr=False, default=None)


def _unit(v, what):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0:
        return v  # explicit null signal
    if abs(norm - 1) > 1e-9:
        raise ValueError(f"{what} must have unit norm")
    return v


def calibrate_censoring(event_time, target, u, max_iter=200):
    """Scale uniform censoring draws ``u`` so the censored fraction hits ``target``.

    Censoring times are ``horizon * u``; the censored fraction decreases
    monotonically in the horizon, which is found by bisection in log space.
    """
    if target == 0:
        return np.full_like(event_time, np.inf)
    frac = lambda hz: np.mean(hz * u < event_time)
    lo, hi = np.log(event_time.min() * 1e-3), np.log(event_time.max() * 1e3 / max(u.min(), 1e-300))
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if frac(np.exp(mid)) > target:
            lo = mid
        else:
            hi = mid
        if abs(frac(np.exp(mid)) - target) < 1.0 / len(u) or hi - lo < 1e-12:
            break
    horizon = np.exp(mid)
    if abs(frac(horizon) - target) > 0.05:
        raise ValueError(
            f"censoring target {target} unreachable (got {frac(horizon):.3f})"
        )
    return horizon * u


def _censor(event_time, target, rng):
    u = rng.random(event_time.shape[0])
    censor_time = calibrate_censoring(event_time, target, u)
    observed = np.minimum(event_time, censor_time)
    event = event_time <= censor_time
    return observed, event, censor_time


def generate_cph_covariates(n, beta, censoring_rate=0.2, seed=0):
    """Standard-normal covariates with exponential times of rate ``exp(x @ beta)``."""
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, dtype=np.float64)
    X = rng.standard_normal((n, beta.size))
    h = X @ beta
    event_time = rng.exponential(size=n) * np.exp(-h)
    observed, event, censor_time = _censor(event_time, censoring_rate, rng)
    return X, make_survival_y(observed, event), GroundTruth(h, event_time, censor_time)


def _draw_clinical(rng, n, unknown_rate):
    records = []
    for _ in range(n):
        rec = {"age_at_rp": float(np.round(np.clip(rng.normal(_AGE_MEAN, _AGE_SD), 40, 85), 1))}
        for attr in DEFAULT_SCHEMA.attributes[1:]:
            rec[attr.name] = attr.categories[rng.choice(len(attr.categories), p=_CATEGORY_PROBS[attr.name])]
        records.append(rec)
    truth = [dict(r) for r in records]
    if unknown_rate > 0:
        for rec in records:
            for name in DEFAULT_SCHEMA.names:
                if rng.random() < unknown_rate:
                    rec[name] = None
    return records, truth


def _bags(rng, z, direction, counts, dim, band, cfg, sparse):
    noise_sd = 1.0 / cfg.signal_to_noise
    bags = []
    for zi, m in zip(z, counts):
        rows = rng.standard_normal((m, band)) * noise_sd
        n_signal = max(1, int(round(cfg.signal_fraction * m)))
        rows[:n_signal] += cfg.signal_amplitude * zi * direction[:band]
        rows = rows[rng.permutation(m)]
        if sparse:
            indptr = np.arange(0, m * band + 1, band)
            indices = np.tile(np.arange(band), m)
            bags.append(sp.csr_matrix((rows.ravel(), indices, indptr), shape=(m, dim)))
        elif band < dim:
            bags.append(np.hstack([rows, np.zeros((m, dim - band))]))
        else:
            bags.append(rows)
    return bags


def generate_cohort(config):
    """Draw a cohort and its ground truth; fully determined by ``config.seed``.

    Returns
    -------
    cohort : Cohort
    truth : GroundTruth
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_subjects

    beta_c = DEFAULT_CLINICAL_BETA if cfg.true_beta_clinical is None else np.asarray(cfg.true_beta_clinical, float)
    if beta_c.shape != (DEFAULT_SCHEMA.dummy_width,):
        raise ValueError(f"true_beta_clinical needs length {DEFAULT_SCHEMA.dummy_width}")
    # signal directions come from their own stream when world_seed is set, so
    # cohorts drawn with different seeds can share one ground-truth model
    wrng = rng if cfg.world_seed is None else np.random.default_rng([cfg.world_seed, 0x5EED])
    if cfg.pathology_signal_direction is None:
        dir_p = wrng.standard_normal(cfg.pathology_dim)
        dir_p /= np.linalg.norm(dir_p)
    else:
        dir_p = _unit(cfg.pathology_signal_direction, "pathology_signal_direction")
    if cfg.radiology_signal_direction is None:
        dir_r = np.zeros(cfg.radiology_dim)
        dir_r[: cfg.radiology_band] = wrng.standard_normal(cfg.radiology_band)
        dir_r /= np.linalg.norm(dir_r)
    else:
        dir_r = _unit(cfg.radiology_signal_direction, "radiology_signal_direction")
    if np.count_nonzero(dir_r[cfg.radiology_band:]):
        raise ValueError("radiology signal must lie inside the noise band")

    records, truth_records = _draw_clinical(rng, n, cfg.clinical_unknown_rate)
    stats = ClinicalStats({"age_at_rp": _AGE_MEAN}, {"age_at_rp": _AGE_SD}, {})
    dummy = np.vstack([encode_clinical_dummy(r, DEFAULT_SCHEMA, stats) for r in truth_records])
    clin_score = dummy @ beta_c
    sd = clin_score.std()
    clin_score = (clin_score - clin_score.mean()) / sd if sd > 0 else np.zeros(n)

    z = rng.standard_normal((n, 2))
    w_c, w_p, w_r = cfg.modality_weights
    signal_p = w_p * z[:, 0] * (np.linalg.norm(dir_p) > 0)
    signal_r = w_r * z[:, 1] * (np.linalg.norm(dir_r) > 0)
    r = w_c * clin_score + signal_p + signal_r
    if cfg.interaction_weight:
        # visible only to a model that sees both imaging modalities at once
        r = r + cfg.interaction_weight * signal_p * signal_r

    m_p = rng.integers(cfg.patches_per_subject[0], cfg.patches_per_subject[1] + 1, size=n)
    m_r = rng.integers(cfg.slices_per_subject[0], cfg.slices_per_subject[1] + 1, size=n)
    path = _bags(rng, z[:, 0], dir_p, m_p, cfg.pathology_dim, cfg.pathology_dim, cfg, sparse=False)
    rad = _bags(rng, z[:, 1], dir_r, m_r, cfg.radiology_dim, cfg.radiology_band, cfg, sparse=cfg.sparse_radiology)

    # Weibull PH with shape snr: S(t) = exp(-(t/base)^snr * exp(snr * r))
    e = rng.exponential(size=n)
    event_time = cfg.base_months * np.exp(-r) * e ** (1.0 / cfg.signal_to_noise)
    observed, event, censor_time = _censor(event_time, cfg.censoring_rate_target, rng)

    missing = rng.random((n, 3)) < np.asarray(cfg.missing_rate)
    missing[missing.all(axis=1), 0] = False
    clinical = [None if missing[i, 0] else records[i] for i in range(n)]
    path = [None if missing[i, 1] else path[i] for i in range(n)]
    rad = [None if missing[i, 2] else rad[i] for i in range(n)]

    width = len(str(n - 1))
    case_ids = [f"case_{i:0{width}d}" for i in range(n)]
    cohort = Cohort(case_ids, clinical, path, rad, observed, event)
    truth = GroundTruth(cfg.signal_to_noise * r, event_time, censor_time, z)
    return cohort, truth


def oracle_cindex(log_risks, y):
    """Literal double loop over ordered pairs; reference for ``concordance_index``."""
    time, event = _labels(y, require_event=False)
    h = np.asarray(log_risks, dtype=np.float64)
    twice_num = comparable = 0
    for i in range(len(h)):
        for j in range(len(h)):
            if i == j or not event[i]:
                continue
            if time[i] < time[j] or (time[i] == time[j] and not event[j]):
                comparable += 1
                if h[i] > h[j]:
                    twice_num += 2
                elif h[i] == h[j]:
                    twice_num += 1
    if comparable == 0:
        raise ValueError("no comparable pairs")
    return twice_num / (2 * comparable)
