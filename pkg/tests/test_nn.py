import math

import numpy as np
import pytest

from fusesurv.nn import (
    EncoderLayer,
    LayerNorm,
    Linear,
    MultiHeadSelfAttention,
    Parameter,
    TransformerEncoder,
    gelu,
    grad_check,
    load_checkpoint,
    masked_mean_pool,
    masked_mean_pool_backward,
    save_checkpoint,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def randomize(module, seed, scale=0.5):
    r = rng(seed)
    for p in module.named_parameters().values():
        p.value = p.value + r.normal(scale=scale, size=p.value.shape)


def naive_attention(x, mha, key_mask):
    d, H = mha.d, mha.heads
    dh = d // H
    W, b = mha.qkv.weight.value, mha.qkv.bias.value
    T = x.shape[0]
    out = np.zeros((T, d))
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        q = x @ W[sl].T + b[sl]
        k = x @ W[d:][sl].T + b[d:][sl]
        v = x @ W[2 * d:][sl].T + b[2 * d:][sl]
        for i in range(T):
            logits = [q[i] @ k[j] / math.sqrt(dh) if key_mask[j] else -np.inf for j in range(T)]
            m = max(logits)
            w = [math.exp(l - m) if np.isfinite(l) else 0.0 for l in logits]
            s = sum(w)
            out[i, sl] = sum(w[j] / s * v[j] for j in range(T))
    return out @ mha.out.weight.value.T + mha.out.bias.value


def test_linear_identity_and_constant():
    lin = Linear(3, 3, rng())
    lin.weight.value = np.eye(3)
    x = rng(1).normal(size=(4, 3))
    np.testing.assert_array_equal(lin.forward(x), x)
    lin.weight.value = np.zeros((3, 3))
    lin.bias.value = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(lin.forward(x), np.tile([1.0, -2.0, 0.5], (4, 1)))


def test_linear_matches_triple_loop():
    lin = Linear(4, 2, rng())
    lin.bias.value = rng(2).normal(size=2)
    x = rng(3).normal(size=(3, 4))
    expected = np.zeros((3, 2))
    for i in range(3):
        for o in range(2):
            expected[i, o] = sum(x[i, j] * lin.weight.value[o, j] for j in range(4)) + lin.bias.value[o]
    np.testing.assert_allclose(lin.forward(x), expected, atol=1e-12)
    with pytest.raises(ValueError):
        lin.forward(np.ones((2, 5)))


def test_gelu_values():
    assert gelu(0.0) == 0.0
    assert abs(gelu(10.0) - 10.0) < 1e-6
    c = math.sqrt(2 / math.pi)
    assert gelu(1.0) == pytest.approx(0.5 * (1 + math.tanh(c * 1.044715)), abs=1e-15)
    assert gelu(1.0) == pytest.approx(0.841192, abs=1e-6)


def test_attention_single_token_is_value_projection():
    mha = MultiHeadSelfAttention(8, 2, rng=rng())
    randomize(mha, 1)
    x = rng(2).normal(size=(1, 8))
    W, b = mha.qkv.weight.value, mha.qkv.bias.value
    v = x @ W[16:].T + b[16:]
    np.testing.assert_allclose(mha.forward(x), v @ mha.out.weight.value.T + mha.out.bias.value, atol=1e-12)


def test_attention_identical_tokens_identical_rows():
    mha = MultiHeadSelfAttention(8, 4, rng=rng())
    x = np.tile(rng(1).normal(size=(1, 8)), (2, 1))
    y = mha.forward(x)
    np.testing.assert_array_equal(y[0], y[1])


@pytest.mark.parametrize("mask", [[True, True, True], [True, False, True]])
def test_attention_matches_naive(mask):
    mha = MultiHeadSelfAttention(12, 3, rng=rng())
    randomize(mha, 4)
    x = rng(5).normal(size=(3, 12))
    mask = np.array(mask)
    np.testing.assert_allclose(mha.forward(x, mask), naive_attention(x, mha, mask), atol=1e-10)
    w = mha.attention
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(w >= 0)
    assert np.all(w[..., ~mask] == 0)


def test_attention_empty_key_set():
    mha = MultiHeadSelfAttention(4, 2, rng=rng())
    with pytest.raises(ValueError, match="empty key set"):
        mha.forward(np.ones((2, 3, 4)), np.array([[True, False, False], [False, False, False]]))


def test_encoder_zero_branches_pass_residual():
    enc = TransformerEncoder(d=8, layers=4, heads=2, ffn_width=16, dropout=0.0, rng=rng())
    for name, p in enc.named_parameters().items():
        if "norm" not in name:
            p.value = np.zeros_like(p.value)
    x = rng(1).normal(size=(2, 3, 8))
    np.testing.assert_array_equal(enc.forward(x), x)


def test_encoder_permutation_equivariant():
    enc = TransformerEncoder(d=8, layers=2, heads=2, ffn_width=16, dropout=0.0, rng=rng(7))
    x = rng(1).normal(size=(3, 8))
    mask = np.array([True, False, True])
    perm = np.array([2, 0, 1])
    y = enc.forward(x, mask)
    yp = enc.forward(x[perm], mask[perm])
    np.testing.assert_allclose(yp, y[perm], atol=1e-10)


def test_masked_mean_pool():
    X = np.array([[1.0, 1.0], [3.0, 3.0], [5.0, 5.0]])
    np.testing.assert_array_equal(masked_mean_pool(X, [True, True, False]), [2.0, 2.0])
    np.testing.assert_array_equal(masked_mean_pool(X, [False, True, False]), X[1])
    X2 = X.copy()
    X2[2] = [1e9, -7.0]
    np.testing.assert_array_equal(masked_mean_pool(X2, [True, True, False]), [2.0, 2.0])
    with pytest.raises(ValueError, match="no available modalities"):
        masked_mean_pool(X, [False, False, False])


def test_masked_pool_after_encoder_ignores_masked_tokens():
    enc = TransformerEncoder(d=8, layers=2, heads=2, ffn_width=16, dropout=0.0, rng=rng(3))
    mask = np.array([True, True, False])
    x = rng(1).normal(size=(3, 8))
    base = masked_mean_pool(enc.forward(x, mask), mask)
    for seed in range(5):
        x2 = x.copy()
        x2[2] = rng(seed + 10).normal(scale=100, size=8)
        np.testing.assert_array_equal(masked_mean_pool(enc.forward(x2, mask), mask), base)


# --- gradient checks ---------------------------------------------------------

def quadratic_check():
    p = Parameter(rng(0).normal(size=(3, 4)))
    A = rng(1).normal(size=(3, 4))
    loss = lambda: float(np.sum(A * p.value**2))
    p.grad = 2 * A * p.value
    return grad_check(loss, {"p": p}, step=1e-5, tolerance=1e-8)


def test_grad_check_quadratic():
    rep = quadratic_check()
    assert rep.passed, rep.max_rel_error


def test_grad_check_reports_wrong_gradients():
    p = Parameter(np.ones(3))
    p.grad = np.array([5.0, 5.0, 5.0])
    rep = grad_check(lambda: float(np.sum(p.value**2)), {"p": p}, tolerance=1e-6)
    assert not rep.passed


def _module_check(module, forward, backward, x_shape, seed, step=1e-5):
    r = rng(seed)
    x = r.normal(size=x_shape)
    probe = r.normal(size=forward(x).shape)
    module.zero_grad()
    forward(x)
    dx = backward(probe)
    rep = grad_check(lambda: float(np.sum(forward(x) * probe)), module.named_parameters(), step=step)
    # input gradient by finite differences
    num = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        num[idx] = (np.sum(forward(xp) * probe) - np.sum(forward(xm) * probe)) / (2 * step)
    in_err = np.max(np.abs(dx - num) / np.maximum(np.maximum(np.abs(dx), np.abs(num)), 1e-8))
    return max(rep.max_rel_error, in_err)


def test_linear_grad_exact():
    lin = Linear(5, 3, rng())
    assert _module_check(lin, lin.forward, lin.backward, (4, 5), 0) < 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_layer_backward_passes_grad_check(seed):
    ln = LayerNorm(6)
    randomize(ln, seed)
    assert _module_check(ln, ln.forward, ln.backward, (2, 3, 6), seed) < 1e-4
    mha = MultiHeadSelfAttention(6, 2, rng=rng(seed))
    randomize(mha, seed + 100)
    mask = np.array([[True, True, False], [True, True, True]])
    assert _module_check(mha, lambda x: mha.forward(x, mask), mha.backward, (2, 3, 6), seed) < 1e-4
    layer = EncoderLayer(6, 2, 12, 0.0, rng(seed))
    randomize(layer, seed + 200, 0.3)
    assert _module_check(layer, lambda x: layer.forward(x, mask), layer.backward, (2, 3, 6), seed) < 1e-4


def test_masked_pool_backward():
    x = rng(0).normal(size=(2, 3, 4))
    mask = np.array([[True, False, True], [False, True, False]])
    probe = rng(1).normal(size=(2, 4))
    dx = masked_mean_pool_backward(probe, mask)
    eps = 1e-6
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += eps
        num = (np.sum(masked_mean_pool(xp, mask) * probe) - np.sum(masked_mean_pool(x, mask) * probe)) / eps
        assert dx[idx] == pytest.approx(num, abs=1e-8)


def test_batched_perturbation_matches_loop():
    enc = TransformerEncoder(d=8, layers=2, heads=2, ffn_width=16, dropout=0.0, rng=rng(5))
    x = rng(1).normal(size=(2, 3, 8))
    mask = np.array([[True, True, False], [True, True, True]])
    probe = rng(2).normal(size=(2, 3, 8))
    enc.zero_grad()
    enc.forward(x, mask)
    enc.backward(probe)
    params = enc.named_parameters()

    def loss():
        y = enc.forward(x, mask)
        return np.sum(y * probe, axis=(-1, -2, -3)) if y.ndim == 4 else float(np.sum(y * probe))

    loop = grad_check(loss, params, step=1e-5, n_samples=8, seed=3, tolerance=1e-4)
    batched = grad_check(loss, params, step=1e-5, n_samples=8, seed=3, tolerance=1e-4, batched=True)
    assert loop.passed and batched.passed
    for k in loop.per_tensor:
        assert batched.per_tensor[k] == pytest.approx(loop.per_tensor[k], abs=1e-5)
    chunked = grad_check(loss, params, step=1e-5, n_samples=8, seed=3, tolerance=1e-4, batched=True,
                         max_stack=3)
    assert chunked.per_tensor == batched.per_tensor


# --- checkpoint format ------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    enc = TransformerEncoder(d=8, layers=1, heads=2, ffn_width=16, rng=rng(9))
    randomize(enc, 1)
    state = enc.state_dict()
    path = tmp_path / "m.pfmw"
    save_checkpoint(path, state)
    raw = path.read_bytes()
    assert raw[:4] == b"PFMW" and int.from_bytes(raw[4:8], "little") == 1
    loaded = load_checkpoint(path)
    assert list(loaded) == list(state)
    enc2 = TransformerEncoder(d=8, layers=1, heads=2, ffn_width=16, rng=rng(0))
    enc2.load_state_dict(loaded)
    for k, v in enc2.state_dict().items():
        assert v.tobytes() == state[k].tobytes()
    save_checkpoint(tmp_path / "again.pfmw", enc2.state_dict())
    assert (tmp_path / "again.pfmw").read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.pfmw"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ValueError):
        load_checkpoint(p)
