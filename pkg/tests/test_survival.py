import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusesurv.survival import (
    CoxPHRegressor,
    SurvivalLabel,
    concordance_index,
    cox_loss,
    cox_loss_gradient,
    fit_cph,
    make_survival_y,
    predict_log_risk,
    risk_score,
    roc_auc,
    ttr_from_log_risk,
)
from fusesurv.synth import oracle_cindex


def literal_cox_loss(h, time, event):
    total = 0.0
    for i in range(len(h)):
        if event[i]:
            at_risk = sum(math.exp(h[j]) for j in range(len(h)) if time[j] >= time[i])
            total -= h[i] - math.log(at_risk)
    return total


def brute_force_auc(scores, labels):
    wins = ties = pairs = 0
    for p in np.flatnonzero(labels):
        for n in np.flatnonzero(~labels):
            pairs += 1
            wins += scores[p] > scores[n]
            ties += scores[p] == scores[n]
    return (2 * wins + ties) / (2 * pairs)


def random_instance(rng, n, censor=0.25, tied_times=False):
    h = rng.normal(size=n)
    time = rng.integers(1, 6, size=n).astype(float) if tied_times else rng.exponential(10, size=n) + 0.01
    event = rng.random(n) > censor
    if not event.any():
        event[rng.integers(n)] = True
    return h, time, event


def finite_diff(f, h, step=1e-5):
    out = np.empty_like(h)
    for k in range(h.size):
        hp, hm = h.copy(), h.copy()
        hp[k] += step
        hm[k] -= step
        out[k] = (f(hp) - f(hm)) / (2 * step)
    return out


def test_cox_loss_all_zero_risks_reduces_to_log_risk_set_sizes():
    y = make_survival_y([1, 2, 3], [1, 1, 1])
    assert cox_loss([0, 0, 0], y) == pytest.approx(math.log(3) + math.log(2), abs=1e-12)
    assert cox_loss([0, 0, 0], y) == pytest.approx(1.791759, abs=1e-6)


@pytest.mark.parametrize("c", [-50.0, -1.0, 3.5, 200.0])
def test_cox_loss_constant_shift(c):
    y = make_survival_y([1, 2, 3], [1, 1, 1])
    assert cox_loss([c] * 3, y) == pytest.approx(cox_loss([0, 0, 0], y), rel=1e-12)


def test_cox_loss_matches_literal_formula():
    rng = np.random.default_rng(11)
    h, time, event = random_instance(rng, 8)
    got = cox_loss(h, (time, event))
    assert abs(got - literal_cox_loss(h, time, event)) / abs(got) < 1e-10


def test_cox_loss_breslow_ties_share_risk_set():
    h, time, event = np.array([0.3, -0.2, 1.0]), np.array([2.0, 2.0, 5.0]), np.array([1, 1, 0], bool)
    assert cox_loss(h, (time, event)) == pytest.approx(literal_cox_loss(h, time, event), rel=1e-12)


def test_cox_loss_is_stable_for_large_risks():
    y = make_survival_y([1, 2, 3], [1, 1, 1])
    assert np.isfinite(cox_loss([800.0, 799.0, 1.0], y))


def test_cox_loss_errors():
    with pytest.raises(ValueError, match="no observed events"):
        cox_loss([0.1, 0.2], make_survival_y([1, 2], [0, 0]))
    with pytest.raises(ValueError, match="no observed events"):
        cox_loss([], make_survival_y([], []))
    with pytest.raises(ValueError, match="non-finite input"):
        cox_loss([np.nan, 0.0], make_survival_y([1, 2], [1, 1]))
    with pytest.raises(ValueError):
        cox_loss([0.0, 1.0, 2.0], make_survival_y([1, 2], [1, 1]))


def test_gradient_single_subject_is_zero():
    assert cox_loss_gradient([0.7], make_survival_y([3.0], [1])) == pytest.approx([0.0])


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    h, time, event = random_instance(rng, 6, tied_times=seed % 2 == 0)
    analytic = cox_loss_gradient(h, (time, event))
    numeric = finite_diff(lambda v: cox_loss(v, (time, event)), h)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
    assert rel.max() < 1e-5


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**31 - 1), st.booleans())
def test_gradient_sums_to_zero(n, seed, ties):
    rng = np.random.default_rng(seed)
    h, time, event = random_instance(rng, n, tied_times=ties)
    assert abs(cox_loss_gradient(h * 3, (time, event)).sum()) < 1e-9


def test_survival_label_list_is_accepted():
    labels = [SurvivalLabel(1.0, True), SurvivalLabel(2.0, True), SurvivalLabel(3.0, True)]
    assert cox_loss([0, 0, 0], labels) == pytest.approx(math.log(6))
    with pytest.raises(ValueError):
        SurvivalLabel(0.0, True)


# --- CPH fitting -------------------------------------------------------------

def test_fit_cph_mirrored_groups_give_zero_effect():
    x = np.array([[0], [0], [0], [1], [1], [1]], float)
    y = make_survival_y([1, 2, 3, 1, 2, 3], [1, 1, 0, 1, 1, 0])
    res = fit_cph(x, y)
    assert res.converged
    assert abs(res.beta[0]) < 1e-6


def test_fit_cph_matches_grid_search():
    x = np.array([[0.5], [-1.2], [0.3], [1.7], [-0.4]])
    time = np.array([2.0, 6.0, 3.5, 4.0, 1.0])
    event = np.array([1, 1, 0, 1, 1], bool)
    grid = np.round(np.arange(-3.0, 3.0 + 5e-4, 1e-3), 3)
    losses = [cox_loss(x[:, 0] * b, (time, event)) for b in grid]
    best = grid[int(np.argmin(losses))]
    assert -3 < best < 3
    res = fit_cph(x, (time, event))
    assert abs(res.beta[0] - best) < 2e-3


def test_fit_cph_gradient_is_small_at_optimum():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 3))
    time = rng.exponential(np.exp(-X @ [0.5, -0.3, 0.1]))
    event = rng.random(200) < 0.8
    res = fit_cph(X, (time, event))
    assert res.converged and res.grad_max < 1e-6


def test_fit_cph_recovers_beta_on_synthetic_cohort():
    from fusesurv.synth import generate_cph_covariates

    X, y, _ = generate_cph_covariates(2000, [0.8, -0.5], censoring_rate=0.2, seed=2024)
    res = fit_cph(X, y)
    assert np.max(np.abs(res.beta - [0.8, -0.5])) < 0.15


def test_fit_cph_errors_and_warnings():
    y = make_survival_y([1, 2, 3, 4], [1, 1, 1, 1])
    with pytest.raises(ValueError, match="degenerate covariate"):
        fit_cph(np.ones((4, 1)), y)
    with pytest.raises(ValueError):
        fit_cph(np.arange(8.0).reshape(4, 2) ** 2, make_survival_y([1, 2, 3, 4], [1, 1, 0, 0]))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 2))
    yy = make_survival_y(rng.exponential(size=30) + 0.1, np.ones(30))
    from sklearn.exceptions import ConvergenceWarning

    with pytest.warns(ConvergenceWarning):
        res = fit_cph(X, yy, max_iter=1, tol=1e-14)
    assert res.status == "max_iter"


def test_cox_regressor_estimator_api():
    from sklearn.base import clone

    rng = np.random.default_rng(5)
    X = rng.normal(size=(150, 2))
    time = rng.exponential(np.exp(-X @ [1.0, -1.0]))
    y = make_survival_y(time, np.ones(150))
    est = CoxPHRegressor(tol=1e-8).fit(X, y)
    assert clone(est).get_params() == {"tol": 1e-8, "max_iter": 500}
    assert est.predict(X).shape == (150,)
    assert est.score(X, y) > 0.7
    np.testing.assert_allclose(est.predict_ttr(X), np.exp(-est.predict(X)))


# --- prediction and TTR ------------------------------------------------------

def test_predict_log_risk():
    assert predict_log_risk([1, 2], [0, 0]) == 0
    assert predict_log_risk([1, 2], [3, 4]) == 11
    assert predict_log_risk([0, 0, 0], [5, -2, 7]) == 0
    with pytest.raises(ValueError):
        predict_log_risk([1, 2], [1, 2, 3])


def test_ttr_from_log_risk():
    assert ttr_from_log_risk(0.0) == 1.0
    assert ttr_from_log_risk(math.log(2)) == pytest.approx(0.5)
    assert ttr_from_log_risk(-1.0) == pytest.approx(math.e)
    with pytest.raises(ValueError):
        ttr_from_log_risk(float("inf"))


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1e6))
def test_ttr_inverts_negative_log(x):
    assert ttr_from_log_risk(-math.log(x)) == pytest.approx(x, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30))
def test_risk_times_ttr_is_one(lr):
    rs = risk_score(lr)
    assert rs.risk * rs.ttr == pytest.approx(1.0, rel=1e-12)


# --- C-index and AUC -----------------------------------------------------------

@pytest.mark.parametrize(
    "h,events,expected",
    [([0.9, 0.5, 0.1], [1, 1, 1], 1.0), ([0.9, 0.1, 0.5], [1, 0, 1], 1.0), ([0.1, 0.9, 0.5], [1, 0, 1], 0.0)],
)
def test_concordance_examples(h, events, expected):
    y = make_survival_y([1, 2, 3], events)
    assert concordance_index(h, y) == expected
    assert oracle_cindex(h, y) == expected


def test_concordance_time_ties_rule():
    # equal times: only event-vs-censored pairs count, event must rank higher
    y = make_survival_y([2, 2, 2], [1, 0, 1])
    assert concordance_index([1.0, 0.0, 0.5], y) == 1.0
    assert concordance_index([0.0, 1.0, 0.5], y) == 0.0


def test_concordance_no_pairs():
    with pytest.raises(ValueError, match="no comparable pairs"):
        concordance_index([1.0, 2.0], make_survival_y([1, 2], [0, 0]))
    with pytest.raises(ValueError, match="no comparable pairs"):
        concordance_index([1.0, 2.0], make_survival_y([2, 2], [1, 1]))


def test_concordance_constant_prediction_is_half():
    rng = np.random.default_rng(0)
    y = make_survival_y(rng.exponential(size=40) + 0.1, rng.random(40) < 0.7)
    assert concordance_index(np.zeros(40), y) == 0.5


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_concordance_matches_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    h = rng.integers(0, 4, size=n).astype(float)
    time = rng.integers(1, 5, size=n).astype(float)
    event = rng.random(n) < 0.6
    y = make_survival_y(time, event)
    try:
        expected = oracle_cindex(h, y)
    except ValueError:
        with pytest.raises(ValueError):
            concordance_index(h, y)
        return
    assert concordance_index(h, y) == expected


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 15), st.integers(0, 2**31 - 1))
def test_concordance_monotone_and_reversal(n, seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=n)
    y = make_survival_y(rng.exponential(size=n) + 0.1, np.r_[True, rng.random(n - 1) < 0.5])
    try:
        c = concordance_index(h, y)
    except ValueError:
        return
    assert concordance_index(np.tanh(h) * 3 + 1, y) == c
    assert concordance_index(-h, y) + c == 1.0


def test_roc_auc_examples():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(ValueError, match="degenerate labels"):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_roc_auc_matches_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 5, size=n).astype(float)
    labels = rng.random(n) < 0.5
    labels[0], labels[-1] = True, False
    assert roc_auc(scores, labels) == brute_force_auc(scores, labels)


def test_fit_cph_ridge_matches_scipy_on_the_literal_objective():
    from scipy.optimize import minimize

    rng = np.random.default_rng(4)
    _, time, event = random_instance(rng, 12, censor=0.5)
    X = rng.normal(size=(12, 8))  # more covariates than events
    lam = 1.5
    ref = minimize(lambda b: literal_cox_loss(X @ b, time, event) + 0.5 * lam * b @ b, np.zeros(8),
                   method="BFGS", options={"gtol": 1e-10}).x
    beta = fit_cph(X, (time, event), penalty=lam).beta
    np.testing.assert_allclose(beta, ref, atol=1e-5)
    with pytest.raises(ValueError, match="non-negative"):
        fit_cph(X, (time, event), penalty=-1.0)
