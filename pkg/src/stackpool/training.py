"""Adam training loop with periodic validation and best-checkpoint selection.

Training is deterministic in the run seed: initialization, per-epoch
shuffling, and data order all derive from it. Validation MAE is computed
every `validate_every` epochs and the parameters with the best validation
MAE are kept (and written to disk when an output directory is given).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import networks
from .data import DatasetSplit
from .seeding import stream_rng
from .tensor import Tensor, mse_loss


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the partial log."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 1
    validate_every: int = 2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.validate_every < 1:
            raise ValueError("validate_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self):
        return dict(epochs=self.epochs, batch_size=self.batch_size,
                    validate_every=self.validate_every, lr=self.lr,
                    beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                    seed=self.seed)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_mae: float
    val_mae: float = None


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = None
    best_val_mae: float = None

    def validation_points(self):
        return [(r.epoch, r.val_mae) for r in self.rows if r.val_mae is not None]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "train_mae", "val_mae"])
            for r in self.rows:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.train_mae),
                                 "" if r.val_mae is None else repr(r.val_mae)])

    def summary(self) -> dict:
        return {"epochs": len(self.rows), "best_epoch": self.best_epoch,
                "best_val_mae": self.best_val_mae,
                "final_train_loss": self.rows[-1].train_loss if self.rows else None,
                "final_train_mae": self.rows[-1].train_mae if self.rows else None}


def ema_smooth(series, alpha: float) -> list:
    """Exponential moving average: y_0 = x_0, y_t = a*x_t + (1-a)*y_{t-1}."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    out = []
    prev = None
    for x in series:
        prev = x if prev is None else alpha * x + (1 - alpha) * prev
        out.append(prev)
    return out


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)


# -- training loop ----------------------------------------------------------------


def _prepare(samples, factor, dtype):
    items = []
    for s in samples:
        image = Tensor(s.image[None].astype(dtype))
        target = Tensor(networks.downsample_density(s.density, factor)[None]
                        .astype(dtype))
        items.append((image, target, s.count))
    return items


def crop_to_divisible(sample_image: np.ndarray, factor: int) -> np.ndarray:
    """Crop a (1,H,W) or (N,C,H,W) image down to factor-divisible extents."""
    h, w = sample_image.shape[-2:]
    return sample_image[..., :h // factor * factor, :w // factor * factor]


def validation_mae(net, items) -> float:
    errors = []
    for image, _, count in items:
        pred = networks.forward(net, image)
        errors.append(abs(float(networks.predicted_count(pred)[0]) - count))
    return float(np.mean(errors))


def train(net, split: DatasetSplit, config: TrainConfig, out_dir=None):
    """Train; returns (best Network, TrainLog).

    The best network is the checkpoint with the lowest validation MAE; it is
    also written to <out_dir>/best.ckpt when out_dir is given.
    """
    if not split.train or not split.validation:
        raise ValueError("train and validation splits must be non-empty")
    factor = net.config.downsample_factor
    dtype = np.dtype(net.config.dtype)
    train_items = _prepare(split.train, factor, dtype)
    val_items = _prepare(split.validation, factor, dtype)

    rng = stream_rng(config.seed, "train/shuffle")
    state = AdamState()
    log = TrainLog()
    best_params = None

    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_items))
        losses = []
        errors = []
        pending = 0
        for pos, idx in enumerate(order):
            image, target, count = train_items[idx]
            pred = networks.forward(net, image)
            loss = mse_loss(pred, target)
            value = loss.item()
            if not np.isfinite(value):
                log.rows.append(EpochStats(epoch, float("nan"), float("nan")))
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}", log=log)
            losses.append(value)
            errors.append(abs(float(networks.predicted_count(pred)[0]) - count))
            loss.backward()
            pending += 1
            if pending == config.batch_size or pos == len(order) - 1:
                grads = {}
                for name, p in net.parameters.items():
                    grads[name] = p.grad / pending  # accumulation == batch mean
                    p.zero_grad()
                adam_step(net.parameters, grads, state, config)
                pending = 0

        stats = EpochStats(epoch, float(np.mean(losses)), float(np.mean(errors)))
        if epoch % config.validate_every == 0 or epoch == config.epochs:
            stats.val_mae = validation_mae(net, val_items)
            if log.best_val_mae is None or stats.val_mae < log.best_val_mae:
                log.best_val_mae = stats.val_mae
                log.best_epoch = epoch
                best_params = {k: Tensor(v.data.copy(), requires_grad=True)
                               for k, v in net.parameters.items()}
                if out_path is not None:
                    best = networks.Network(net.config, best_params)
                    networks.save_checkpoint(
                        out_path / "best.ckpt", best,
                        {"epoch": epoch, "val_mae": stats.val_mae,
                         "seed": config.seed, "train_config": config.to_dict()})
        log.rows.append(stats)

    best = networks.Network(net.config, best_params)
    return best, log


def write_log_files(log: TrainLog, out_dir) -> None:
    out_dir = Path(out_dir)
    log.to_csv(out_dir / "log.csv")
    (out_dir / "summary.json").write_text(
        json.dumps(log.summary(), indent=2, sort_keys=True) + "\n")
