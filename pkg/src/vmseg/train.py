"""Training loop with checkpoint/LR callbacks, the combined loss, and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .datapipe import AugmentConfig, SampleSet, batch_iter, binarize_mask
from .errors import ConfigError, DataError, DimensionError, DivergenceError, NonFiniteError
from .metrics import ConfusionCounts, confusion_counts, metrics_from_counts
from .segnet import SegNet, forward
from .tensor import Tensor, apply_op, as_tensor, backward, finite_guard, no_grad

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
DICE_SMOOTH = 1.0


def bce_dice_loss(p: Tensor, y, bce_weight: float = 1.0, dice_weight: float = 1.0,
                  eps: float = PROB_EPS, smooth: float = DICE_SMOOTH) -> Tensor:
    """``bce_weight * BCE + dice_weight * (1 - soft Dice)`` over all pixels of ``p``.

    Probabilities are clipped to ``[eps, 1 - eps]``; the gradient is zero where
    clipping is active.
    """
    p = as_tensor(p)
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if p.shape != yd.shape:
        raise DimensionError(f"loss: prediction {p.shape} and target {yd.shape} differ")
    raw = p.data.astype(np.float64)
    pc = np.clip(raw, eps, 1.0 - eps)
    inside = (raw >= eps) & (raw <= 1.0 - eps)
    n = pc.size
    bce = float(np.mean(-yd * np.log(pc) - (1.0 - yd) * np.log1p(-pc)))
    inter = float(np.sum(pc * yd))
    denom = float(np.sum(pc) + np.sum(yd)) + smooth
    numer = 2.0 * inter + smooth
    loss = bce_weight * bce + dice_weight * (1.0 - numer / denom)

    def back(g):
        d_bce = (-yd / pc + (1.0 - yd) / (1.0 - pc)) / n
        d_dice = -(2.0 * yd * denom - numer) / (denom * denom)
        grad = (bce_weight * d_bce + dice_weight * d_dice) * inside * float(g)
        return (grad.astype(p.dtype),)

    return apply_op("bce_dice_loss", np.asarray(loss, dtype=p.dtype), (p,), back)


# ---------------------------------------------------------------------------
# configuration and callbacks


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-3
    optimizer: str = "sgd"
    momentum: float = 0.9
    step_interval: int = 20
    step_factor: float = 0.5
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    min_lr: float = 1e-6
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    checkpoint_path: str | None = None
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("step_factor", "plateau_factor"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.step_interval < 1:
            raise ConfigError(f"step_interval must be >= 1, got {self.step_interval}")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.min_lr <= 0:
            raise ConfigError(f"min_lr must be > 0, got {self.min_lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        return self


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 1e-3
    best_val_loss: float = math.inf
    since_improvement: int = 0


def update_learning_rate(state: TrainState, val_loss: float, cfg: TrainConfig) -> float:
    """Apply the step schedule and the plateau rule after epoch ``state.epoch``.

    The rate only ever decreases and is floored at ``cfg.min_lr``.
    """
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.since_improvement = 0
    else:
        state.since_improvement += 1
    lr = state.lr
    if state.epoch > 0 and state.epoch % cfg.step_interval == 0:
        lr *= cfg.step_factor
    if state.since_improvement >= cfg.plateau_patience:
        lr *= cfg.plateau_factor
        state.since_improvement = 0
    state.lr = max(min(lr, state.lr), cfg.min_lr)
    return state.lr


class SGD:
    def __init__(self, params, momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            v = self.velocity[p.name]
            v *= self.momentum
            v += p.grad
            p.data -= p.data.dtype.type(lr) * v


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p in self.params:
            m, v = self.m[p.name], self.v[p.name]
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return Adam(params)
    return SGD(params, cfg.momentum)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_val_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_checkpoint: bytes | None = None

    def __len__(self) -> int:
        return len(self.epoch)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for row in zip(self.epoch, self.train_loss, self.val_loss, self.lr):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def dataset_loss(net: SegNet, data: SampleSet, batch_size: int, bce_weight: float = 1.0,
                 dice_weight: float = 1.0) -> float:
    """Loss over ``data`` averaged across batches weighted by batch size."""
    total, count = 0.0, 0
    with no_grad():
        for imgs, msks in batch_iter(data, batch_size, shuffle=False):
            loss = bce_dice_loss(forward(net, imgs), msks, bce_weight, dice_weight)
            total += loss.item() * len(imgs)
            count += len(imgs)
    return total / count


def train_model(net: SegNet, train: SampleSet, val: SampleSet, cfg: TrainConfig,
                augment: AugmentConfig | None = None) -> tuple[SegNet, TrainHistory]:
    """Run ``cfg.epochs`` epochs of train / validate / callbacks.

    The best-validation parameters are kept in ``history.best_checkpoint`` and
    written to ``cfg.checkpoint_path`` whenever validation loss strictly
    improves. The returned network holds the final-epoch parameters.
    """
    cfg.validate()
    if len(train) == 0:
        raise DataError("training split is empty")
    if len(val) == 0:
        raise DataError("validation split is empty")
    history = TrainHistory()
    state = TrainState(lr=cfg.lr)
    if cfg.epochs == 0:
        return net, history
    opt = make_optimizer(cfg, net.parameters())
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        total, count = 0.0, 0
        try:
            with finite_guard():
                for imgs, msks in batch_iter(train, cfg.batch_size, _epoch_seed(cfg.seed, epoch), augment,
                                             shuffle=True):
                    net.zero_grad()
                    loss = bce_dice_loss(forward(net, imgs), msks, cfg.bce_weight, cfg.dice_weight)
                    backward(loss)
                    opt.step(state.lr)
                    total += loss.item() * len(imgs)
                    count += len(imgs)
                    for p in net.parameters():
                        if not np.all(np.isfinite(p.data)):
                            raise NonFiniteError(f"update of {p.name}")
                val_loss = dataset_loss(net, val, cfg.batch_size, cfg.bce_weight, cfg.dice_weight)
        except NonFiniteError as exc:
            raise DivergenceError(epoch, exc.op) from exc
        train_loss = total / count
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise DivergenceError(epoch)

        lr_used = state.lr
        if val_loss < state.best_val_loss:
            history.best_epoch = epoch
            history.best_checkpoint = save_checkpoint(net, cfg.checkpoint_path)
        update_learning_rate(state, val_loss, cfg)

        history.epoch.append(epoch)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.lr.append(lr_used)
        history.best_val_loss.append(state.best_val_loss)
        log.info("epoch %d train_loss %.5f val_loss %.5f lr %.3g", epoch, train_loss, val_loss, lr_used)
    return net, history


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    accuracy: float
    iou: float
    dice: float
    precision: float
    recall: float
    loss: float
    counts: ConfusionCounts
    degenerate: tuple[str, ...] = ()
    macro: dict[str, float] = field(default_factory=dict)
    n_images: int = 0

    def as_dict(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "iou": self.iou, "dice": self.dice,
                "precision": self.precision, "recall": self.recall, "loss": self.loss}


def evaluate_model(net: SegNet, data: SampleSet, threshold: float = 0.5, batch_size: int = 4,
                   bce_weight: float = 1.0, dice_weight: float = 1.0) -> MetricsReport:
    """Threshold predictions, pool confusion counts over every batch, and report.

    Headline metrics come from the pooled counts; ``macro`` holds the per-image
    averages for comparison.
    """
    if len(data) == 0:
        raise DataError("evaluation split is empty")
    pooled = ConfusionCounts()
    loss_total, n = 0.0, 0
    per_image: list[dict[str, float]] = []
    with no_grad():
        for imgs, msks in batch_iter(data, batch_size, shuffle=False):
            probs = forward(net, imgs)
            loss_total += bce_dice_loss(probs, msks, bce_weight, dice_weight).item() * len(imgs)
            n += len(imgs)
            preds = binarize_mask(probs.data, threshold)
            pooled = pooled + confusion_counts(msks, preds)
            for y, y_hat in zip(msks, preds):
                per_image.append(metrics_from_counts(confusion_counts(y, y_hat)).as_dict())
    m = metrics_from_counts(pooled)
    macro = {k: float(np.mean([row[k] for row in per_image])) for k in per_image[0]}
    return MetricsReport(m.accuracy, m.iou, m.dice, m.precision, m.recall, loss_total / n,
                         pooled, m.degenerate, macro, n)
