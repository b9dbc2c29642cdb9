"""Layers with explicit forward/backward passes.

Every layer accepts activations with arbitrary leading dimensions
``(..., features)`` and caches what its backward pass needs from the most
recent forward call; ``backward`` accumulates into ``Parameter.grad`` and
returns the gradient with respect to the layer input.

A parameter value may temporarily carry an extra leading axis of size K
(a stack of K perturbed copies). Forward passes then return activations
with a leading K axis, which lets finite-difference checks evaluate many
perturbations with one batched pass. Backward is not defined in that mode.
"""

import contextlib
import math

import numpy as np
import scipy.sparse as sp

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Skip caching activations for backward inside the block."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def _grad_enabled():
    return _GRAD_ENABLED[0]


class Parameter:
    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.grad.shape

    def stack_size(self):
        """K when the value holds a stack of perturbed copies, else None."""
        return self.value.shape[0] if self.value.ndim > self.grad.ndim else None

    def zero_grad(self):
        self.grad.fill(0.0)


class Module:
    training = False

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_modules", {})[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        out = {}
        for name, p in self.__dict__.get("_params", {}).items():
            out[prefix + name] = p
        for name, m in self.__dict__.get("_modules", {}).items():
            out.update(m.named_parameters(f"{prefix}{name}."))
        return out

    def modules(self):
        yield self
        for m in self.__dict__.get("_modules", {}).values():
            yield from m.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_dict(self):
        return {k: p.value.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.size != p.grad.size:
                raise ValueError(f"{k}: expected {p.grad.shape}, got {v.shape}")
            p.value = v.reshape(p.grad.shape).copy()


class ModuleList(Module):
    def __init__(self, modules):
        self._items = list(modules)
        for i, m in enumerate(self._items):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _expand(value, k, ndim):
    """Reshape a stacked (K, d) parameter so it broadcasts against (K, ..., d)."""
    return value.reshape((k,) + (1,) * (ndim - 1) + value.shape[1:])


class Linear(Module):
    """``y = x W^T + b``; ``W`` has shape (out, in).

    Weights start uniform in ``[-1/sqrt(in), 1/sqrt(in)]`` unless ``init``
    is ``"zeros"``. Biases start at zero. Sparse 2-D inputs are accepted.
    """

    def __init__(self, in_features, out_features, rng=None, init="uniform"):
        self.in_features = in_features
        self.out_features = out_features
        if init == "zeros":
            w = np.zeros((out_features, in_features))
        else:
            bound = 1.0 / math.sqrt(in_features)
            w = rng.uniform(-bound, bound, size=(out_features, in_features))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected {self.in_features} input features, got {x.shape[-1]}")
        W, b = self.weight.value, self.bias.value
        kw, kb = self.weight.stack_size(), self.bias.stack_size()
        if kw is None:
            if sp.issparse(x):
                y = np.asarray(x @ W.T)
            else:
                # one 2-D GEMM; N-D matmul would loop over tiny per-slice products
                y = (x.reshape(-1, self.in_features) @ W.T).reshape(x.shape[:-1] + (self.out_features,))
        else:
            lead = x.shape[:-1]
            x2 = x.toarray() if sp.issparse(x) else x.reshape(-1, self.in_features)
            # (K*out, in) @ (in, rows) keeps the large dimension first
            flat = W.reshape(-1, self.in_features) @ x2.T
            y = np.ascontiguousarray(flat.reshape(kw, self.out_features, -1).transpose(0, 2, 1))
            y = y.reshape((kw,) + lead + (self.out_features,))
        if kb is None:
            y += b  # y is freshly allocated above
        else:
            if kw is None:
                y = y[None]
            y = y + _expand(b, kb, y.ndim - 1)
        if _grad_enabled() and kw is None and kb is None:
            self._x = x
        return y

    def backward(self, dy, need_input_grad=True):
        x = self._x
        dy2 = dy.reshape(-1, self.out_features)
        if sp.issparse(x):
            self.weight.grad += np.asarray((x.T @ dy2).T)
        else:
            self.weight.grad += dy2.T @ x.reshape(-1, self.in_features)
        self.bias.grad += dy2.sum(axis=0)
        if need_input_grad:
            return (dy2 @ self.weight.value).reshape(dy.shape[:-1] + (self.in_features,))


def gelu(x):
    """Tanh approximation of the Gaussian error linear unit.

    Evaluated as ``x / (1 + exp(-2u))``, which equals ``0.5 x (1 + tanh(u))``
    and runs on numpy's vectorized ``exp``.
    """
    if np.isscalar(x):
        c = math.sqrt(2.0 / math.pi)
        return 0.5 * x * (1.0 + math.tanh(c * (x + 0.044715 * x * x * x)))
    x = np.asarray(x, dtype=np.float64)
    u = x * x
    u *= 0.044715
    u += 1.0
    u *= x
    u *= -2.0 * math.sqrt(2.0 / math.pi)
    with np.errstate(over="ignore"):
        np.exp(u, out=u)
    u += 1.0
    return x / u


def gelu_grad(x):
    c = math.sqrt(2.0 / math.pi)
    t = np.tanh(c * (x + 0.044715 * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x * x)


class GELU(Module):
    def forward(self, x):
        if _grad_enabled():
            self._x = x
        return gelu(x)

    def backward(self, dy):
        return dy * gelu_grad(self._x)


class Tanh(Module):
    def forward(self, x):
        y = np.tanh(x)
        if _grad_enabled():
            self._y = y
        return y

    def backward(self, dy):
        return dy * (1.0 - self._y**2)


class Dropout(Module):
    """Inverted dropout; identity outside training mode or when ``p == 0``."""

    def __init__(self, p, rng):
        self.p = p
        self.rng = rng

    def forward(self, x):
        if not self.training or self.p == 0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.eps = eps
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + self.eps)
        xhat = (x - mu) * inv
        g, b = self.gain.value, self.bias.value
        kg, kb = self.gain.stack_size(), self.bias.stack_size()
        k = kg or kb
        if k is not None:
            xhat_k = xhat[None]
            g = _expand(g, k, xhat.ndim) if kg else g
            b = _expand(b, k, xhat.ndim) if kb else b
            return xhat_k * g + b
        if _grad_enabled():
            self._xhat, self._inv = xhat, inv
        return xhat * g + b

    def backward(self, dy):
        xhat, inv = self._xhat, self._inv
        d = xhat.shape[-1]
        lead = tuple(range(dy.ndim - 1))
        self.gain.grad += np.sum(dy * xhat, axis=lead)
        self.bias.grad += np.sum(dy, axis=lead)
        dxhat = dy * self.gain.value
        return inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
        )


def softmax(logits, axis=-1):
    m = np.max(logits, axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention with a fused QKV projection.

    ``key_mask`` (``(..., T)``, True = present) removes keys by setting their
    logits to ``-inf``; rows for masked queries are still produced.
    """

    def __init__(self, d, heads, dropout=0.0, rng=None):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)
        self.attn_drop = Dropout(dropout, rng)

    def _split(self, t):
        # (..., T, d) -> (..., H, T, dh)
        *lead, T, _ = t.shape
        return np.swapaxes(t.reshape(*lead, T, self.heads, self.d // self.heads), -2, -3)

    def _merge(self, t):
        t = np.swapaxes(t, -2, -3)
        return t.reshape(*t.shape[:-2], self.d)

    def forward(self, x, key_mask=None):
        T = x.shape[-2]
        if key_mask is None:
            key_mask = np.ones(x.shape[:-1], dtype=bool)
        key_mask = np.asarray(key_mask, dtype=bool)
        if not np.all(key_mask.any(axis=-1)):
            raise ValueError("attention over empty key set")
        qkv = self.qkv.forward(x)
        q, k, v = (self._split(t) for t in np.split(qkv, 3, axis=-1))
        scale = 1.0 / math.sqrt(self.d // self.heads)
        logits = (q @ np.swapaxes(k, -1, -2)) * scale
        logits = np.where(key_mask[..., None, None, :], logits, -np.inf)
        attn = softmax(logits)
        self.attention = attn
        attn_used = self.attn_drop.forward(attn)
        ctx = self._merge(attn_used @ v)
        if _grad_enabled():
            self._cache = (q, k, v, attn, attn_used, scale, T)
        return self.out.forward(ctx)

    def backward(self, dy):
        q, k, v, attn, attn_used, scale, _ = self._cache
        dctx = self._split(self.out.backward(dy))
        dattn_used = dctx @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(attn_used, -1, -2) @ dctx
        dattn = self.attn_drop.backward(dattn_used)
        dlogits = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
        dq = dlogits @ k * scale
        dk = np.swapaxes(dlogits, -1, -2) @ q * scale
        dqkv = np.concatenate([self._merge(dq), self._merge(dk), self._merge(dv)], axis=-1)
        return self.qkv.backward(dqkv)


class FeedForward(Module):
    def __init__(self, d, width, dropout=0.0, rng=None):
        self.fc1 = Linear(d, width, rng)
        self.act = GELU()
        self.fc2 = Linear(width, d, rng)
        self.drop = Dropout(dropout, rng)

    def forward(self, x):
        return self.drop.forward(self.fc2.forward(self.act.forward(self.fc1.forward(x))))

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.fc2.backward(self.drop.backward(dy))))


class EncoderLayer(Module):
    """Pre-norm block: ``h = x + MHSA(LN(x))``; ``out = h + FFN(LN(h))``."""

    def __init__(self, d, heads, ffn_width, dropout=0.0, rng=None):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads, dropout, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_width, dropout, rng)

    def forward(self, x, key_mask=None):
        # sublayer outputs are fresh arrays, so the residual adds can reuse them
        h = self.attn.forward(self.norm1.forward(x), key_mask)
        h += x
        out = self.ffn.forward(self.norm2.forward(h))
        out += h
        return out

    def backward(self, dy):
        dh = dy + self.norm2.backward(self.ffn.backward(dy))
        return dh + self.norm1.backward(self.attn.backward(dh))


class TransformerEncoder(Module):
    def __init__(self, d=768, layers=4, heads=8, ffn_width=None, dropout=0.1, rng=None):
        self.d = d
        self.layers = ModuleList(
            EncoderLayer(d, heads, ffn_width or 4 * d, dropout, rng) for _ in range(layers)
        )

    def forward(self, x, key_mask=None):
        for layer in self.layers:
            x = layer.forward(x, key_mask)
        return x

    def backward(self, dy):
        for layer in reversed(list(self.layers)):
            dy = layer.backward(dy)
        return dy

    def forward_pooled(self, x, key_mask):
        """``masked_mean_pool(forward(x), key_mask)`` without the last per-token projection.

        The final feed-forward output projection is affine, so it commutes
        with the token mean and runs once per subject instead of once per
        token. No activations are cached; inference only.
        """
        layers = list(self.layers)
        with no_grad():
            for layer in layers[:-1]:
                x = layer.forward(x, key_mask)
            last = layers[-1]
            h = last.attn.forward(last.norm1.forward(x), key_mask)
            h += x
            ffn = last.ffn
            a = ffn.act.forward(ffn.fc1.forward(last.norm2.forward(h)))
            return masked_mean_pool(h, key_mask) + ffn.drop.forward(
                ffn.fc2.forward(masked_mean_pool(a, key_mask)))


class PositionalEncoding(Module):
    """Learnable per-slot offsets, added only to present slots."""

    def __init__(self, slots, d):
        self.table = Parameter(np.zeros((slots, d)))

    def forward(self, x, mask):
        m = np.asarray(mask, dtype=np.float64)[..., None]
        table = self.table.value
        k = self.table.stack_size()
        if k is not None:
            table = table.reshape((k,) + (1,) * (x.ndim - 2) + table.shape[1:])
            return x[None] + table * m
        if _grad_enabled():
            self._mask = m
        return x + table * m

    def backward(self, dy):
        g = dy * self._mask
        self.table.grad += g.reshape(-1, *self.table.grad.shape).sum(axis=0)
        return dy


def masked_mean_pool(x, mask):
    """Mean over rows where ``mask`` is True; masked rows never enter the sum."""
    mask = np.asarray(mask, dtype=bool)
    count = mask.sum(axis=-1)
    if np.any(count == 0):
        raise ValueError("no available modalities")
    kept = np.where(mask[..., None], x, 0.0)
    return kept.sum(axis=-2) / count[..., None]


def masked_mean_pool_backward(dy, mask):
    mask = np.asarray(mask, dtype=bool)
    count = mask.sum(axis=-1)[..., None, None]
    return np.where(mask[..., None], dy[..., None, :] / count, 0.0)
