"""Loss functions and the SGD update: momentum, weight decay, LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, InputError
from .model import is_trainable
from .nn import softmax
from .tensor import Rng


@dataclass
class TrainHyper:
    """Training hyperparameters; defaults are the reference recipe."""

    eta0: float = 0.009
    lr_drop_epoch: int = 80
    lr_drop_factor: float = 0.15
    momentum_mu: float = 0.9
    weight_decay_lambda: float = 1e-5
    dropout_p: float = 0.09
    batch_train: int = 32
    batch_test: int = 64
    epochs: int = 150
    loss_kind: str = "cross_entropy"  # or "mse"
    decay_bn_and_bias: bool = False  # weight decay on gamma/beta/fc.bias too

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ConfigError(f"eta0 must be positive, got {self.eta0}")
        if not 0.0 <= self.momentum_mu < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum_mu}")
        if self.weight_decay_lambda < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay_lambda}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.batch_train < 1 or self.batch_test < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss_kind not in ("cross_entropy", "mse"):
            raise ConfigError(f"loss_kind must be cross_entropy or mse, got {self.loss_kind!r}")


@dataclass
class SgdState:
    """Velocity buffers, one per trainable parameter, initialized to zero."""

    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "SgdState":
        return cls({n: np.zeros_like(t) for n, t in params.items() if is_trainable(n)})


def mse_loss(probs: np.ndarray, onehot: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over the batch of the squared error summed over classes.

    Returns the loss and its gradient w.r.t. the probabilities, 2(p - y)/N.
    """
    if probs.shape != onehot.shape:
        raise InputError(f"probs {probs.shape} and labels {onehot.shape} disagree")
    rows_ok = np.all(np.isin(onehot, (0, 1))) and np.all(onehot.sum(axis=1) == 1)
    if not rows_ok:
        raise InputError("labels must be one-hot rows")
    n = probs.shape[0]
    diff = probs - onehot
    loss = float((diff * diff).sum() / n)
    return loss, (2.0 / n) * diff


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log softmax-probability of the true class.

    Gradient w.r.t. the logits is (softmax - onehot)/N; computed with
    log-sum-exp stabilization.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must lie in 0..{k - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float((log_z - shifted[np.arange(n), labels]).mean())
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad.astype(logits.dtype) / n


def lr_at(epoch: int, h: TrainHyper) -> float:
    """Piecewise-constant schedule: eta0 up to the drop epoch, then one drop."""
    if epoch < 1:
        raise ConfigError(f"epoch is 1-based, got {epoch}")
    return h.eta0 if epoch <= h.lr_drop_epoch else h.eta0 * h.lr_drop_factor


def decayed_names(params: dict[str, np.ndarray], h: TrainHyper) -> set[str]:
    """Parameters weight decay applies to (conv/FC weights unless configured)."""
    if h.decay_bn_and_bias:
        return {n for n in params if is_trainable(n)}
    return {n for n in params if is_trainable(n) and n.endswith(".weight")}


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: SgdState,
    eta: float,
    h: TrainHyper,
) -> None:
    """One momentum-SGD update, in place.

    v <- mu*v + (grad + lambda*W); W <- W - eta*v. With mu=0 this is the
    plain decayed step W <- W - eta*grad - eta*lambda*W. BN running
    statistics are never touched (they are not in the grad/velocity maps).
    """
    keys = set(state.velocity)
    if set(grads) != keys:
        raise ContractError(
            f"gradient keys do not match optimizer state "
            f"(missing {keys - set(grads)}, extra {set(grads) - keys})"
        )
    decayed = decayed_names(params, h)
    lam = h.weight_decay_lambda
    mu = h.momentum_mu
    for name, v in state.velocity.items():
        g = grads[name]
        w = params[name]
        if g.shape != w.shape:
            raise ContractError(f"gradient shape {g.shape} != param shape {w.shape} for {name}")
        step = g + lam * w if (lam != 0.0 and name in decayed) else g
        v *= v.dtype.type(mu)
        v += step
        w -= w.dtype.type(eta) * v


def shuffle_epoch(indices: list[int] | np.ndarray, rng: Rng) -> np.ndarray:
    """Uniform Fisher-Yates permutation of the given indices."""
    out = np.array(indices)
    for i in range(len(out) - 1, 0, -1):
        j = int(rng.integers(i + 1))
        out[i], out[j] = out[j], out[i]
    return out
