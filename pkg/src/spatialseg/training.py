"""Generalized Jaccard loss, Adam, early stopping and the single-network
training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .unet import NetworkParams, unet_backward, unet_forward

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


@dataclass(frozen=True)
class GjlConfig:
    smoothness: float = 1.0
    num_classes: int = 2

    def __post_init__(self):
        if self.smoothness < 0:
            raise ValueError("smoothness must be >= 0")


def _check_pair(pred, truth, cfg: GjlConfig):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.shape[0] != cfg.num_classes:
        raise ValueError(f"expected {cfg.num_classes} classes on axis 0, got {pred.shape[0]}")
    if (pred < 0).any():
        raise ValueError("negative probabilities")
    return pred.reshape(cfg.num_classes, -1), truth.reshape(cfg.num_classes, -1)


def _gjl_terms(p, t, sigma):
    w = 1.0 / (1.0 + t.sum(axis=1))
    inter = (p * t).sum(axis=1)
    num = sigma + (w * inter).sum()
    den = sigma + (w * ((p + t).sum(axis=1) - inter)).sum()
    return w, num, den


def gjl_loss(pred, truth, config: GjlConfig = GjlConfig()) -> float:
    p, t = _check_pair(pred, truth, config)
    _, num, den = _gjl_terms(p, t, config.smoothness)
    if den == 0:
        raise ValueError("zero denominator: smoothness 0 with empty prediction and truth")
    return float(1.0 - num / den)


def gjl_gradient(pred, truth, config: GjlConfig = GjlConfig()) -> np.ndarray:
    """d(loss)/d(pred), same shape as ``pred``."""
    shape = np.shape(pred)
    p, t = _check_pair(pred, truth, config)
    w, num, den = _gjl_terms(p, t, config.smoothness)
    # d num / dp = w t ; d den / dp = w (1 - t)
    g = -(w[:, None] * t * den - num * w[:, None] * (1.0 - t)) / den ** 2
    return g.reshape(shape)


def one_hot(labels, num_classes=2, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([(labels == c) for c in range(num_classes)]).astype(dtype)


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place on ``params``.

    ``params`` and ``grads`` are mappings from block id to array (a
    NetworkParams works too).  Returns ``(params, state)``.
    """
    blocks = params.blocks if isinstance(params, NetworkParams) else params
    if set(grads) != set(blocks):
        raise ValueError("gradient blocks do not match parameter blocks")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for key, p in blocks.items():
        g = np.asarray(grads[key])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key}")
        if key not in state.m:
            state.m[key] = np.zeros(p.shape, dtype=np.float64)
            state.v[key] = np.zeros(p.shape, dtype=np.float64)
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p -= step.astype(p.dtype)
    return params, state


# -- early stopping -----------------------------------------------------------


class EarlyStopping:
    """Tracks validation losses; improvement means strictly lower loss."""

    def __init__(self, patience: int = 50, max_epochs: int = 500):
        if patience >= max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        self.patience = patience
        self.max_epochs = max_epochs
        self.best_loss = np.inf
        self.best_epoch = 0  # 1-based; 0 means nothing recorded yet
        self.epoch = 0

    def update(self, loss: float) -> bool:
        """Record one epoch's validation loss; True when the epoch improved."""
        self.epoch += 1
        if loss < self.best_loss:
            self.best_loss = float(loss)
            self.best_epoch = self.epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        if self.epoch >= self.max_epochs:
            return True
        return self.epoch - max(self.best_epoch, 1) >= self.patience


def simulate_early_stopping(val_losses, patience=50, max_epochs=500):
    """Replay a validation-loss trace; returns (epochs_run, best_epoch)."""
    stopper = EarlyStopping(patience, max_epochs)
    for loss in val_losses:
        stopper.update(loss)
        if stopper.should_stop:
            break
    return stopper.epoch, stopper.best_epoch


# -- training loop ------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    patience: int = 50
    batch_size: int = 1
    val_fraction: float = 0.2
    seed: int = 0
    patches_per_epoch: int | None = None  # None: one pass over the training patches
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    smoothness: float = 1.0

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")


@dataclass
class TrainResult:
    params: NetworkParams
    train_loss: list
    val_loss: list
    best_epoch: int
    status: str = "ok"

    @property
    def epochs_run(self) -> int:
        return len(self.val_loss)

    def summary(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "best_val_loss": min(self.val_loss) if self.val_loss else None,
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "status": self.status,
        }


def train_step(params: NetworkParams, image, labels, state: AdamState, gjl: GjlConfig, rng) -> float:
    probs, fwd = unet_forward(params, image, training=True, rng=rng)
    truth = one_hot(labels, params.config.num_classes)
    loss = gjl_loss(probs, truth, gjl)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite training loss {loss}")
    dprobs = gjl_gradient(probs, truth, gjl)
    grads, _ = unet_backward(params, fwd, dprobs)
    adam_step(params, grads, state)
    return loss


def evaluate_loss(params: NetworkParams, patches, gjl: GjlConfig) -> float:
    losses = []
    for image, labels in patches:
        probs, _ = unet_forward(params, image, training=False)
        losses.append(gjl_loss(probs, one_hot(labels, params.config.num_classes), gjl))
    loss = float(np.mean(losses))
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite validation loss {loss}")
    return loss


def train_network(params: NetworkParams, source, config: TrainConfig, rng=None) -> TrainResult:
    """Train with early stopping on the validation loss.

    ``source`` must provide ``epoch(rng)`` yielding augmented ``(image, labels)``
    training arrays and ``validation()`` returning un-augmented pairs.  The
    returned parameters are those of the best validation epoch; ``params`` is
    not modified.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    val = list(source.validation())
    if not val:
        raise ValueError("empty validation set")
    gjl = GjlConfig(config.smoothness, params.config.num_classes)
    adam = AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    work = params.clone()
    best = params.clone()
    stopper = EarlyStopping(config.patience, config.max_epochs)
    train_hist, val_hist = [], []
    while not stopper.should_stop:
        losses = [train_step(work, img, lab, adam, gjl, rng) for img, lab in source.epoch(rng)]
        if not losses:
            raise ValueError("patch source produced no training patches")
        train_hist.append(float(np.mean(losses)))
        vloss = evaluate_loss(work, val, gjl)
        val_hist.append(vloss)
        if stopper.update(vloss):
            best = work.clone()
        log.debug("epoch %d train %.4f val %.4f", stopper.epoch, train_hist[-1], vloss)
    status = "ok"
    if stopper.best_epoch == 0:
        status = "no-improvement"
        log.warning("validation loss never improved; returning the initial weights")
    return TrainResult(best, train_hist, val_hist, stopper.best_epoch, status)
