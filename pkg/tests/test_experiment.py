import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusesurv._validation import make_survival_y
from fusesurv.cv import check_events, kfold_plan, nested_plan, run_nested_cv, summarize
from fusesurv.nn import Linear, Module, Parameter
from fusesurv.optim import Adam, AdamState, adam_step, make_optimizer
from fusesurv.survival import concordance_index
from fusesurv.synth import SynthConfig, generate_cph_covariates, generate_cohort
from fusesurv.training import TrainConfig, early_stop_epoch, train_fold


# --- optimizer ---------------------------------------------------------------

def reference_adam(theta, grads, lr, wd=0.0, decoupled=False, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar textbook Adam/AdamW, written independently of the package.

    Weight decay applies only in the decoupled (AdamW) form.
    """
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads, start=1):
        for i in range(len(theta)):
            gi = g[i]
            if decoupled:
                theta[i] -= lr * wd * theta[i]
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            theta[i] -= lr * mh / (math.sqrt(vh) + eps)
    return np.array(theta)


def test_adam_zero_gradient_is_identity():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    before = p["w"].copy()
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(3)}, state, lr=1e-2)
    np.testing.assert_array_equal(p["w"], before)


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([0.5])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=1e-3)
    assert p["w"][0] == pytest.approx(0.5 - 1e-3, abs=1e-10)


def test_adamw_without_decay_equals_adam_bit_exactly():
    rng = np.random.default_rng(0)
    a = {"w": rng.normal(size=(3, 4))}
    b = {"w": a["w"].copy()}
    sa, sb = AdamState(), AdamState()
    for _ in range(10):
        g = {"w": rng.normal(size=(3, 4))}
        adam_step(a, g, sa, lr=1e-3)
        adam_step(b, g, sb, lr=1e-3, weight_decay=0.0, decoupled=True)
    assert a["w"].tobytes() == b["w"].tobytes()


# plain Adam ignores weight_decay; only the decoupled variant applies it
@pytest.mark.parametrize("wd,decoupled", [(0.0, False), (1e-2, True), (1e-2, False)])
def test_adam_matches_scalar_reference(wd, decoupled):
    rng = np.random.default_rng(3)
    theta = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(7)]
    p = {"w": theta.copy()}
    state = AdamState()
    for g in grads:
        adam_step(p, {"w": g}, state, lr=3e-3, weight_decay=wd, decoupled=decoupled)
    np.testing.assert_allclose(p["w"], reference_adam(theta, grads, 3e-3, wd, decoupled), rtol=0, atol=1e-14)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState(), lr=1e-3)


def test_optimizer_factory_and_params():
    p = Parameter(np.ones(2))
    p.grad = np.array([1.0, -1.0])
    opt = make_optimizer("adamw", {"p": p}, 1e-3)
    assert isinstance(opt, Adam)
    opt.step()
    assert p.value[0] < 1 < p.value[1]
    opt.zero_grad()
    assert not p.grad.any()
    with pytest.raises(ValueError):
        make_optimizer("sgd", {"p": p}, 1e-3)


# --- early stopping ----------------------------------------------------------

def test_early_stop_hand_examples():
    assert early_stop_epoch([10, 6, 3, 1.5, 1.2, 1.1], 0) is None
    assert early_stop_epoch([10, 9, 7, 4, 2, 1, 0.5], 0) == 3
    assert early_stop_epoch([5.0] * 20, 0) is None
    assert early_stop_epoch([1.0, 2.0], 0) is None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=40), st.integers(0, 45))
def test_early_stop_never_before_min_epochs(curve, min_epochs):
    t = early_stop_epoch(curve, min_epochs)
    if t is not None:
        assert t >= min_epochs
        L = np.asarray(curve)
        d2 = lambda i: L[i + 1] - 2 * L[i] + L[i - 1]
        assert d2(t - 1) * d2(t) < 0


# --- training ---------------------------------------------------------------

class LinearCox(Module):
    def __init__(self, p, rng):
        self.lin = Linear(p, 1, rng)

    def forward(self, x):
        return self.lin.forward(x)[:, 0]

    def backward(self, dlr):
        self.lin.backward(np.asarray(dlr)[:, None], need_input_grad=False)


def _linear_fold(seed=0):
    X, y, _ = generate_cph_covariates(200, [1.5, -1.0], 0.2, seed)
    return X[:150], y[:150], X[150:], y[150:]


def test_train_zero_lr_keeps_initialization():
    Xt, yt, Xv, yv = _linear_fold()
    model = LinearCox(2, np.random.default_rng(0))
    init = model.state_dict()
    cfg = TrainConfig(optimizer="adam", learning_rate=0.0, max_epochs=5, min_epochs_before_stop=0)
    res = train_fold(model, Xt, yt, Xv, yv, cfg)
    for k, v in init.items():
        np.testing.assert_array_equal(model.state_dict()[k], v)
        np.testing.assert_array_equal(res.state[k], v)


def test_train_loss_decreases_on_separable_fold():
    Xt, yt, Xv, yv = _linear_fold(1)
    model = LinearCox(2, np.random.default_rng(0))
    cfg = TrainConfig(optimizer="adam", learning_rate=1e-2, max_epochs=30, min_epochs_before_stop=0)
    res = train_fold(model, Xt, yt, Xv, yv, cfg)
    assert np.all(np.diff(res.train_curve[:11]) < 0)


def test_train_selects_minimum_validation_checkpoint_and_is_deterministic():
    Xt, yt, Xv, yv = _linear_fold(2)
    cfg = TrainConfig(optimizer="adamw", learning_rate=5e-2, max_epochs=60, min_epochs_before_stop=10, patience=5)
    runs = []
    for _ in range(2):
        model = LinearCox(2, np.random.default_rng(4))
        res = train_fold(model, Xt, yt, Xv, yv, cfg)
        assert res.best_val_loss == res.val_curve.min()
        assert res.best_epoch == int(np.argmin(res.val_curve))
        runs.append(model.state_dict())
    for k in runs[0]:
        assert runs[0][k].tobytes() == runs[1][k].tobytes()


def test_train_stops_after_min_epochs_and_patience():
    Xt, yt, Xv, yv = _linear_fold(3)
    cfg = TrainConfig(optimizer="adam", learning_rate=0.2, max_epochs=400, min_epochs_before_stop=40, patience=10)
    res = train_fold(LinearCox(2, np.random.default_rng(0)), Xt, yt, Xv, yv, cfg)
    assert len(res.train_curve) == res.stop_epoch + 1
    if res.stop_epoch < cfg.max_epochs - 1:
        assert res.stop_epoch + 1 >= cfg.min_epochs_before_stop
        assert res.stop_epoch - res.best_epoch >= cfg.patience
        assert res.crossing_epoch is not None


def test_train_rejects_event_free_splits():
    Xt, yt, Xv, yv = _linear_fold()
    no_events = make_survival_y(yv["time"], np.zeros(len(yv), bool))
    with pytest.raises(ValueError, match="validation split"):
        train_fold(LinearCox(2, np.random.default_rng(0)), Xt, yt, Xv, no_events, TrainConfig())
    with pytest.raises(ValueError, match="training split"):
        train_fold(LinearCox(2, np.random.default_rng(0)), Xv, no_events, Xt, yt, TrainConfig())


def test_train_config_guards():
    with pytest.raises(ValueError):
        TrainConfig(min_epochs_before_stop=20, max_epochs=10)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)


# --- fold plans -------------------------------------------------------------

def test_kfold_ninety_subjects_nine_folds():
    plan = kfold_plan(90, 9, seed=3)
    assert [len(s.val) for s in plan] == [10] * 9
    assert sorted(np.concatenate([s.val for s in plan]).tolist()) == list(range(90))


def test_kfold_rejects_k_below_two():
    with pytest.raises(ValueError, match="k must be ≥ 2"):
        kfold_plan(10, 1)


def test_kfold_deterministic_and_seed_dependent():
    a = kfold_plan(50, 5, seed=1)
    b = kfold_plan(50, 5, seed=1)
    c = kfold_plan(50, 5, seed=2)
    assert all(np.array_equal(x.val, y.val) for x, y in zip(a, b))
    assert not all(np.array_equal(x.val, y.val) for x, y in zip(a, c))


@settings(max_examples=60, deadline=None)
@given(st.integers(25, 200), st.integers(0, 2**32 - 1))
def test_nested_plan_partitions_and_ratios(n, seed):
    plan = nested_plan(n, 5, 5, seed)
    assert len(plan) == 25
    tests = {}
    for s in plan:
        assert not set(s.train) & set(s.test)
        assert not set(s.val) & set(s.test)
        assert not set(s.train) & set(s.val)
        assert len(s.train) + len(s.val) + len(s.test) == n
        assert abs(len(s.test) - 0.2 * n) <= 1
        assert abs(len(s.val) - 0.16 * n) <= 1 + 0.2  # inner fifth of 80% rounded
        tests[s.name.split("_")[0]] = tuple(s.test)
    all_test = np.concatenate([np.array(t) for t in tests.values()])
    assert sorted(all_test.tolist()) == list(range(n))


def test_stratified_plan_balances_events():
    event = np.zeros(100, bool)
    event[:20] = True
    plan = kfold_plan(100, 5, seed=0, event=event)
    assert [int(event[s.val].sum()) for s in plan] == [4] * 5


def test_check_events_names_the_split():
    event = np.zeros(20, bool)
    event[:3] = True
    plan = kfold_plan(20, 5, seed=0)
    with pytest.raises(ValueError, match=r"split fold\d"):
        check_events(plan, event)


# --- summaries and nested cv ---------------------------------------------------

def test_summarize_examples():
    s = summarize([0.8, 0.8])
    assert (s.mean, s.sigma) == (0.8, 0.0)
    s = summarize([0.7, 0.9])
    assert s.mean == pytest.approx(0.8, abs=1e-15) and s.sigma == pytest.approx(0.1, abs=1e-15)
    with pytest.raises(ValueError):
        summarize([])


def test_summarize_two_pass_oracle():
    v = np.random.default_rng(0).random(25)
    mean = sum(v) / len(v)
    sigma = math.sqrt(sum((x - mean) ** 2 for x in v) / len(v))
    s = summarize(v)
    assert abs(s.mean - mean) < 1e-12 and abs(s.sigma - sigma) < 1e-12
    assert s.to_dict()["per_fold"] == list(v)


def _cohort_labels(snr, seed=0, n=200):
    cohort, truth = generate_cohort(SynthConfig(n_subjects=n, seed=seed, signal_to_noise=snr,
                                                radiology_dim=256, radiology_band=64, pathology_dim=32))
    return cohort.y, truth.true_log_risk


def test_nested_cv_constant_model_scores_half():
    y, _ = _cohort_labels(4.0)
    s = run_nested_cv(len(y), y, lambda split: np.zeros(len(split.test)))
    assert len(s.per_fold) == 25 and s.mean == 0.5


def test_nested_cv_oracle_model():
    y, h = _cohort_labels(8.0, seed=1)
    s = run_nested_cv(len(y), y, lambda split: h[split.test])
    assert s.mean > 0.95


def test_nested_cv_permuted_labels():
    y, h = _cohort_labels(4.0, seed=2)
    y = y[np.random.default_rng(0).permutation(len(y))]
    s = run_nested_cv(len(y), y, lambda split: h[split.test])
    assert 0.4 <= s.mean <= 0.6
    assert concordance_index(h, y) == pytest.approx(s.mean, abs=0.1)
