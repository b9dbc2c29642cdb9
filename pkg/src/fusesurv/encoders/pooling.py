"""Attention pooling of variable-length embedding bags into one vector per subject."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..nn.modules import GELU, Linear, Module, Tanh, _grad_enabled, softmax


@dataclass
class PackedBags:
    """Rows of all bags stacked, plus an ``(n, M_max)`` row index (-1 = padding)."""

    rows: object
    index: np.ndarray

    @property
    def valid(self):
        return self.index >= 0

    def __len__(self):
        return self.index.shape[0]


def pack_bags(bags, dim=None):
    """Stack a list of ``M_i x D`` matrices. Sparse inputs stay sparse."""
    if len(bags) == 0:
        raise ValueError("no bags to pack")
    sizes = []
    for i, b in enumerate(bags):
        if b is None:
            raise ValueError(f"bag {i} is missing")
        if b.ndim != 2 or b.shape[0] < 1:
            raise ValueError(f"bag {i} must be a non-empty 2-D matrix")
        if dim is not None and b.shape[1] != dim:
            raise ValueError(f"bag {i} has width {b.shape[1]}, expected {dim}")
        data = b.data if sp.issparse(b) else b
        if not np.all(np.isfinite(data)):
            raise ValueError(f"bag {i} contains non-finite rows")
        sizes.append(b.shape[0])
    if any(sp.issparse(b) for b in bags):
        rows = sp.vstack([sp.csr_matrix(b) for b in bags], format="csr")
    else:
        rows = np.vstack([np.asarray(b, dtype=np.float64) for b in bags])
    sizes = np.asarray(sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    col = np.arange(sizes.max())
    index = np.where(col[None, :] < sizes[:, None], starts[:, None] + col[None, :], -1)
    return PackedBags(rows, index)


class AttentionPool(Module):
    """Score rows with ``Linear -> tanh -> Linear``, keep the top ``k`` per bag, softmax-pool.

    ``top_k=None`` keeps every row. Ties in the ranking resolve to the
    earlier row.
    """

    def __init__(self, width, scorer_width=128, top_k=None, rng=None):
        if top_k is not None and top_k < 1:
            raise ValueError("top_k must be positive")
        self.top_k = top_k
        self.fc1 = Linear(width, scorer_width, rng)
        self.act = Tanh()
        self.fc2 = Linear(scorer_width, 1, rng)

    def forward(self, reduced, index):
        valid = index >= 0
        scores = self.fc2.forward(self.act.forward(self.fc1.forward(reduced)))[:, 0]
        safe = np.where(valid, index, 0)
        s_pad = np.where(valid, scores[safe], -np.inf)
        keep = valid
        if self.top_k is not None and index.shape[1] > self.top_k:
            order = np.argsort(-s_pad, axis=1, kind="stable")
            rank = np.empty_like(order)
            np.put_along_axis(rank, order, np.arange(index.shape[1])[None, :].repeat(len(index), 0), axis=1)
            keep = valid & (rank < self.top_k)
        weights = softmax(np.where(keep, s_pad, -np.inf))
        r_pad = reduced[safe] * valid[..., None]
        pooled = np.einsum("nm,nmp->np", weights, r_pad)
        if _grad_enabled():
            self._cache = (index, valid, safe, weights, r_pad, reduced.shape)
        self.weights, self.keep = weights, keep
        return pooled

    def backward(self, dy):
        """Return the gradient with respect to the reduced rows."""
        index, valid, safe, weights, r_pad, shape = self._cache
        dr_pad = weights[..., None] * dy[:, None, :]
        da = np.einsum("nmp,np->nm", r_pad, dy)
        ds_pad = weights * (da - np.sum(weights * da, axis=1, keepdims=True))
        rows = index[valid]
        dscore = np.zeros(shape[0])
        dscore[rows] = ds_pad[valid]
        dreduced = np.zeros(shape)
        dreduced[rows] = dr_pad[valid]
        dreduced += self.fc1.backward(self.act.backward(self.fc2.backward(dscore[:, None])))
        return dreduced


class AttentionPoolingEncoder(Module):
    """Reduce each row with linear layers, then attention-pool the bag.

    ``hidden_dim=None`` gives the single-layer reduction used for pathology
    (``D -> pooled_dim``); otherwise rows pass ``D -> hidden -> GELU ->
    pooled_dim`` as for radiology.
    """

    def __init__(self, in_dim, pooled_dim=512, hidden_dim=None, scorer_width=128,
                 top_k=None, rng=None):
        self.in_dim = in_dim
        self.pooled_dim = pooled_dim
        self.hidden_dim = hidden_dim
        if hidden_dim is None:
            self.reduce1 = Linear(in_dim, pooled_dim, rng)
        else:
            self.reduce1 = Linear(in_dim, hidden_dim, rng)
            self.act = GELU()
            self.reduce2 = Linear(hidden_dim, pooled_dim, rng)
        self.pool = AttentionPool(pooled_dim, scorer_width, top_k, rng)

    @classmethod
    def pathology(cls, in_dim=1024, pooled_dim=512, top_k=64, scorer_width=128, rng=None):
        return cls(in_dim, pooled_dim, None, scorer_width, top_k, rng)

    @classmethod
    def radiology(cls, in_dim=65536, hidden_dim=1024, pooled_dim=512, scorer_width=128, rng=None):
        return cls(in_dim, pooled_dim, hidden_dim, scorer_width, None, rng)

    def reduce(self, rows):
        h = self.reduce1.forward(rows)
        if self.hidden_dim is not None:
            h = self.reduce2.forward(self.act.forward(h))
        return h

    def forward(self, bags):
        packed = bags if isinstance(bags, PackedBags) else pack_bags(bags, self.in_dim)
        return self.pool.forward(self.reduce(packed.rows), packed.index)

    def backward(self, dy):
        dh = self.pool.backward(dy)
        if self.hidden_dim is not None:
            dh = self.act.backward(self.reduce2.backward(dh))
        self.reduce1.backward(dh, need_input_grad=False)


class PooledCoxModel(Module):
    """Pooling encoder followed by a linear log-risk head."""

    def __init__(self, encoder, rng=None):
        self.encoder = encoder
        self.head = Linear(encoder.pooled_dim, 1, rng)

    def features(self, bags):
        return self.encoder.forward(bags)

    def forward(self, bags):
        return self.head.forward(self.encoder.forward(bags))[:, 0]

    def backward(self, dlr):
        self.encoder.backward(self.head.backward(np.asarray(dlr)[:, None]))


def pathology_pool(emb, encoder):
    """Pool one ``M x D`` pathology matrix into a vector of width ``encoder.pooled_dim``."""
    return encoder.forward([emb])[0]


def radiology_pool(emb, encoder):
    return encoder.forward([emb])[0]
