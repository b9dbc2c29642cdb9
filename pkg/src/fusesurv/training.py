"""Full-batch Cox training with best-validation checkpoint selection."""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn.modules import no_grad
from .optim import make_optimizer
from .survival import _labels, cox_loss, cox_loss_and_gradient

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    max_epochs: int = 1000
    min_epochs_before_stop: int = 250
    patience: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        if self.min_epochs_before_stop > self.max_epochs:
            raise ValueError("min_epochs_before_stop exceeds max_epochs")
        if self.patience < 1:
            raise ValueError("patience must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    state: dict
    best_epoch: int
    best_val_loss: float
    train_curve: np.ndarray
    val_curve: np.ndarray
    stop_epoch: int
    crossing_epoch: object = None
    extras: dict = field(default_factory=dict)


def early_stop_epoch(curve, min_epochs=0):
    """First epoch ``t >= min_epochs`` at which the second difference changes sign.

    ``d2[t] = L[t+1] - 2 L[t] + L[t-1]`` is defined for interior epochs; the
    rule fires at ``t`` when ``d2[t-1] * d2[t] < 0``. Returns ``None`` when
    no strict sign change occurs.
    """
    L = np.asarray(curve, dtype=np.float64)
    d2 = L[2:] - 2 * L[1:-1] + L[:-2]  # d2[t - 1] is the second difference at epoch t
    for t in range(max(min_epochs, 2), L.size - 1):
        if d2[t - 2] * d2[t - 1] < 0:
            return t
    return None


def _per_event(loss, y):
    return loss / max(int(np.sum(_labels(y)[1])), 1)


def train_fold(model, train_inputs, y_train, val_inputs, y_val, config, callback=None):
    """Optimize ``model`` on the training split; keep the lowest validation loss.

    ``model`` exposes ``forward(inputs) -> log-risks``, ``backward(dlr)`` and
    the ``Module`` parameter API. Training stops at ``max_epochs``, or once
    the training curve has passed its second-difference zero crossing, at
    least ``min_epochs_before_stop`` epochs have run, and validation loss has
    not improved for ``patience`` epochs. Both curves record the loss per
    observed event.
    """
    try:
        _labels(y_train)
    except ValueError:
        raise ValueError("no observed events in the training split") from None
    try:
        _labels(y_val)
    except ValueError:
        raise ValueError("no observed events in the validation split") from None

    params = model.named_parameters()
    opt = make_optimizer(config.optimizer, params, config.learning_rate, config.weight_decay)
    best_state = model.state_dict()
    best_val, best_epoch = np.inf, -1
    train_curve, val_curve = [], []
    crossing = None
    epoch = 0
    for epoch in range(config.max_epochs):
        model.train()
        opt.zero_grad()
        lr = model.forward(train_inputs)
        loss, grad = cox_loss_and_gradient(lr, y_train)
        model.backward(grad)
        opt.step()

        model.eval()
        with no_grad():
            val = _per_event(cox_loss(model.forward(val_inputs), y_val), y_val)
        train_curve.append(_per_event(loss, y_train))
        val_curve.append(val)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = model.state_dict()
        if callback is not None:
            callback(epoch, train_curve[-1], val)
        if crossing is None:
            crossing = early_stop_epoch(train_curve, 0)
        if (crossing is not None and epoch + 1 >= config.min_epochs_before_stop
                and epoch - best_epoch >= config.patience):
            break
    model.load_state_dict(best_state)
    model.eval()
    log.debug("stopped at epoch %d, best %d (val %.5f)", epoch, best_epoch, best_val)
    return TrainResult(best_state, best_epoch, float(best_val), np.array(train_curve),
                       np.array(val_curve), epoch, crossing)
