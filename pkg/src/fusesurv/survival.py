"""Cox partial likelihood, CPH fitting and ranking metrics.

Log-risks follow the usual convention: a higher log-risk means an earlier
expected recurrence. Labels are passed either as a structured array from
:func:`make_survival_y` or as a ``(time, event)`` pair.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_log_risks, check_survival_y, make_survival_y

__all__ = [
    "SurvivalLabel",
    "RiskScore",
    "CoxFitResult",
    "CoxPHRegressor",
    "cox_loss",
    "cox_loss_gradient",
    "cox_loss_and_gradient",
    "fit_cph",
    "predict_log_risk",
    "ttr_from_log_risk",
    "risk_score",
    "concordance_index",
    "roc_auc",
    "make_survival_y",
]


@dataclass(frozen=True)
class SurvivalLabel:
    """Follow-up for one subject; ``event`` is True when BCR was observed."""

    time_months: float
    event: bool

    def __post_init__(self):
        if not np.isfinite(self.time_months) or self.time_months <= 0:
            raise ValueError("time_months must be positive and finite")


@dataclass(frozen=True)
class RiskScore:
    log_risk: float
    risk: float
    ttr: float


def _labels(y, require_event=True):
    if isinstance(y, (list, tuple)) and y and isinstance(y[0], SurvivalLabel):
        y = make_survival_y([s.time_months for s in y], [s.event for s in y])
    return check_survival_y(y, require_event=require_event)


def _risk_set_logsumexp(h, time):
    """log sum_{j: t_j >= t_i} exp(h_j) for every subject i (Breslow ties).

    Subjects are sorted once by time; a reversed ``logaddexp`` accumulation
    rescales by the running maximum at each step, so no risk set ever
    exponentiates an unshifted value.
    """
    order = np.argsort(time, kind="stable")
    t_sorted = time[order]
    tail = np.logaddexp.accumulate(h[order][::-1])[::-1]
    first = np.searchsorted(t_sorted, time, side="left")
    return tail[first]


def cox_loss_and_gradient(log_risks, y):
    """Negative log partial likelihood and its gradient w.r.t. the log-risks."""
    time, event = _labels(y)
    h = check_log_risks(log_risks, time.shape[0])
    lse = _risk_set_logsumexp(h, time)
    loss = -np.sum(h[event] - lse[event])

    # d/dh_k = -e_k + sum_{i: e_i, t_i <= t_k} exp(h_k - lse_i)
    order = np.argsort(time, kind="stable")
    t_sorted = time[order]
    contrib = np.where(event[order], -lse[order], -np.inf)
    with np.errstate(invalid="ignore"):
        acc = np.logaddexp.accumulate(contrib)
    last = np.searchsorted(t_sorted, time, side="right") - 1
    grad = np.exp(h + acc[last]) - event
    return float(loss), grad


def cox_loss(log_risks, y):
    """Negative log partial likelihood of ``log_risks`` under labels ``y``.

    Raises ``ValueError`` for empty input, zero events or non-finite risks.
    """
    return cox_loss_and_gradient(log_risks, y)[0]


def cox_loss_gradient(log_risks, y):
    return cox_loss_and_gradient(log_risks, y)[1]


@dataclass
class CoxFitResult:
    beta: np.ndarray
    h0: float
    loss: float
    grad_max: float
    n_iter: int
    converged: bool

    @property
    def status(self):
        return "converged" if self.converged else "max_iter"


def _cox_hessian(X, h, time, event):
    order = np.argsort(time, kind="stable")
    t_sorted = time[order]
    Xs = X[order]
    w = np.exp(h[order] - h.max())
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((w[:, None] * Xs)[::-1], axis=0)[::-1]
    s2 = np.cumsum((w[:, None, None] * Xs[:, :, None] * Xs[:, None, :])[::-1], axis=0)[::-1]
    first = np.searchsorted(t_sorted, time[event], side="left")
    mean = s1[first] / s0[first, None]
    second = s2[first] / s0[first, None, None]
    return np.sum(second - mean[:, :, None] * mean[:, None, :], axis=0)


def fit_cph(X, y, tol=1e-6, max_iter=500, penalty=0.0):
    """Fit Cox regression coefficients by damped Newton-Raphson.

    Each iteration takes a Newton step when the Hessian is positive
    definite and a plain gradient step otherwise, halving the step until
    the partial likelihood improves. Stops once the max-norm of the
    gradient falls below ``tol`` or after ``max_iter`` iterations; the
    latter emits a ``ConvergenceWarning`` rather than raising.

    ``penalty`` adds ``penalty / 2 * ||beta||^2`` to the objective. Without
    it, the number of covariates must stay below the number of events.
    """
    X = check_array(X, dtype=np.float64)
    time, event = check_survival_y(y)
    if X.shape[0] != time.shape[0]:
        raise ValueError("X and y have different numbers of subjects")
    if penalty < 0:
        raise ValueError("penalty must be non-negative")
    if np.any(np.ptp(X, axis=0) == 0):
        raise ValueError("degenerate covariate")
    if penalty == 0 and X.shape[1] >= event.sum():
        raise ValueError(
            f"{X.shape[1]} covariates need more than {int(event.sum())} events"
        )

    def objective(b):
        loss, g = cox_loss_and_gradient(X @ b, (time, event))
        return loss + 0.5 * penalty * b @ b, X.T @ g + penalty * b

    beta = np.zeros(X.shape[1])
    loss, grad = objective(beta)
    n_iter = 0
    while np.max(np.abs(grad)) >= tol and n_iter < max_iter:
        n_iter += 1
        hess = _cox_hessian(X, X @ beta, time, event) + penalty * np.eye(X.shape[1])
        try:
            chol = np.linalg.cholesky(hess)
            step = -np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
        except np.linalg.LinAlgError:
            step = -grad
        t = 1.0
        while t > 1e-12:
            cand = beta + t * step
            cand_loss, cand_grad = objective(cand)
            if cand_loss <= loss:
                break
            t *= 0.5
        else:
            break  # no decrease representable in floating point
        beta, loss, grad = cand, cand_loss, cand_grad

    converged = bool(np.max(np.abs(grad)) < tol)
    if not converged:
        warnings.warn(
            f"fit_cph stopped after {n_iter} iterations with gradient "
            f"max-norm {np.max(np.abs(grad)):.3g}",
            ConvergenceWarning,
        )
    return CoxFitResult(beta, 0.0, loss, float(np.max(np.abs(grad))), n_iter, converged)


def predict_log_risk(beta, s, h0=0.0):
    beta = np.asarray(beta, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != beta.shape[0]:
        raise ValueError(f"feature length {s.shape[-1]} != coefficient length {beta.shape[0]}")
    return h0 + s @ beta


def ttr_from_log_risk(lr):
    """Rank-preserving time-to-recurrence proxy ``exp(-lr)``."""
    lr = np.asarray(lr, dtype=np.float64)
    if not np.all(np.isfinite(lr)):
        raise ValueError("non-finite log-risk")
    out = np.exp(-lr)
    return float(out) if out.ndim == 0 else out


def risk_score(lr):
    lr = float(lr)
    return RiskScore(lr, float(np.exp(lr)), ttr_from_log_risk(lr))


def _concordance_counts(h, time, event, chunk=512):
    twice_num = 0
    comparable = 0
    idx = np.flatnonzero(event)
    for start in range(0, idx.size, chunk):
        i = idx[start:start + chunk]
        ti, hi = time[i, None], h[i, None]
        mask = (time[None, :] > ti) | ((time[None, :] == ti) & ~event[None, :])
        comparable += int(mask.sum())
        twice_num += int(2 * (mask & (hi > h[None, :])).sum() + (mask & (hi == h[None, :])).sum())
    return twice_num, comparable


def concordance_index(log_risks, y):
    """Harrell's C: fraction of comparable pairs ranked correctly.

    A pair is comparable when the earlier time is an event, or when times
    tie and exactly one subject had the event. Tied log-risks score 0.5.
    """
    time, event = _labels(y, require_event=False)
    h = check_log_risks(log_risks, time.shape[0])
    twice_num, comparable = _concordance_counts(h, time, event)
    if comparable == 0:
        raise ValueError("no comparable pairs")
    return twice_num / (2 * comparable)


def roc_auc(scores, labels):
    """Mann-Whitney AUC; ties between a positive and a negative count 0.5."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


class CoxPHRegressor(BaseEstimator):
    """Linear Cox model with baseline log-risk fixed at zero.

    Parameters
    ----------
    tol : float
        Gradient max-norm at which Newton iterations stop.
    max_iter : int
        Iteration cap; reaching it warns instead of failing.
    """

    def __init__(self, tol=1e-6, max_iter=500):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        result = fit_cph(X, y, tol=self.tol, max_iter=self.max_iter)
        self.coef_ = result.beta
        self.h0_ = result.h0
        self.n_iter_ = result.n_iter
        self.converged_ = result.converged
        self.n_features_in_ = self.coef_.shape[0]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return predict_log_risk(self.coef_, X, self.h0_)

    def predict_ttr(self, X):
        return ttr_from_log_risk(self.predict(X))

    def score(self, X, y):
        return concordance_index(self.predict(X), y)
