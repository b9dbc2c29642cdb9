"""Central finite-difference checks of hand-written backward passes."""

from dataclasses import dataclass, field

import numpy as np

from .modules import no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_tensor: dict = field(default_factory=dict)
    n_checked: int = 0

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def worst(self, n=5):
        return sorted(self.per_tensor.items(), key=lambda kv: -kv[1])[:n]


def relative_error(analytic, numeric, atol):
    """``|a - n| / max(|a|, |n|, atol)`` elementwise."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)


def grad_check(loss_fn, params, step=1e-5, tolerance=1e-6, n_samples=64, seed=0,
               atol=None, batched=False, max_stack=None):
    """Compare ``param.grad`` against central differences of ``loss_fn``.

    The caller must have populated every ``param.grad`` (forward + backward
    at the current values) before calling. For each tensor, up to
    ``n_samples`` coordinates are drawn without replacement (all of them for
    smaller tensors) and the error ``|a - n| / max(|a|, |n|, atol)`` is
    recorded. A failing comparison is reported, never raised.

    ``atol`` defaults to ``1e-6`` times the largest analytic gradient
    magnitude over all tensors (floored at ``1e-8``). Coordinates whose true
    gradient is exactly zero, such as key-projection biases under softmax,
    otherwise compare rounding noise against rounding noise.

    With ``batched=True``, ``loss_fn`` must accept parameters whose value
    carries a leading stack axis and return one loss per stacked copy; all
    perturbations of a tensor are then evaluated in a single call, or in
    calls of at most ``max_stack`` copies when that is set. Smaller stacks
    keep intermediate activations cache-resident for large models.
    """
    rng = np.random.default_rng(seed)
    if atol is None:
        scale = max((float(np.max(np.abs(p.grad))) for p in params.values() if p.grad.size), default=0.0)
        atol = max(1e-8, 1e-6 * scale)
    per_tensor = {}
    n_checked = 0
    for name, p in params.items():
        base = p.value
        size = base.size
        coords = rng.choice(size, size=min(n_samples, size), replace=False)
        analytic = p.grad.ravel()[coords].copy()
        if batched:
            signs = np.concatenate([np.full(coords.size, step), np.full(coords.size, -step)])
            where = np.concatenate([coords, coords])
            chunk = signs.size if max_stack is None else max(1, int(max_stack))
            losses = np.empty(signs.size)
            try:
                for lo in range(0, signs.size, chunk):
                    sl = slice(lo, lo + chunk)
                    k = signs[sl].size
                    stack = np.empty((k,) + base.shape)
                    stack[...] = base
                    flat = stack.reshape(k, size)
                    flat[np.arange(k), where[sl]] += signs[sl]
                    p.value = stack
                    with no_grad():
                        losses[sl] = np.asarray(loss_fn(), dtype=np.float64)
            finally:
                p.value = base
            numeric = (losses[: coords.size] - losses[coords.size:]) / (2 * step)
        else:
            numeric = np.empty(coords.size)
            for i, c in enumerate(coords):
                pert = base.copy().ravel()
                pert[c] = base.ravel()[c] + step
                p.value = pert.reshape(base.shape)
                with no_grad():
                    up = loss_fn()
                pert[c] = base.ravel()[c] - step
                p.value = pert.reshape(base.shape)
                with no_grad():
                    down = loss_fn()
                numeric[i] = (up - down) / (2 * step)
            p.value = base
        per_tensor[name] = float(relative_error(analytic, numeric, atol).max())
        n_checked += coords.size
    worst = max(per_tensor.values()) if per_tensor else 0.0
    return GradCheckReport(worst, tolerance, per_tensor, n_checked)
