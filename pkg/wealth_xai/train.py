"""
train: Two-stage nightlight transfer training.

Purpose: Fit the ConvNet to ln(1+NTL) labels, first the affine head alone on frozen
features, then the whole network with an L2 penalty on the weights.

Behavior:
- Mean squared error loss, Adagrad updates (accumulated squared gradients, fresh
  accumulator per stage)
- Sites are split once into train/validation (default 90/10) under the schedule seed
- Every epoch re-samples the dark tiles (label below ln 2, i.e. summed radiance < 1)
  so they make up `dark_fraction` of the epoch; bright tiles are always kept
- History has one row per epoch plus an epoch-0 row with the initial losses; the
  first fine-tuning epoch carries `boundary = 1`

Limitations:
- Stage 1 caches the frozen features once, so it is exact only because the backbone
  does not move during that stage
- Weights start from a seeded random init; there is no pretraining source
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DataError, NumericError
from .model import ConvNet, Linear
from .raster import RasterTile

logger = logging.getLogger(__name__)

DARK_THRESHOLD = math.log(2.0)
HISTORY_COLUMNS = ["epoch", "stage", "train_loss", "val_loss", "boundary"]


@dataclass(frozen=True)
class TrainSchedule:
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    stage1_lr: float = 0.01
    stage2_lr: float = 0.001
    l2: float = 0.1
    batch_size: int = 100
    epsilon: float = 1e-8
    val_fraction: float = 0.1
    dark_fraction: float | None = 0.58
    dark_threshold: float = DARK_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise DataError("epoch counts must be non-negative")
        if self.stage1_lr < 0 or self.stage2_lr < 0 or self.l2 < 0:
            raise DataError("learning rates and l2 must be non-negative")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise DataError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.dark_fraction is not None and not 0.0 < self.dark_fraction < 1.0:
            raise DataError(f"dark_fraction must lie in (0, 1), got {self.dark_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)


class Adagrad:
    """Per-parameter step lr / (sqrt(sum of squared gradients) + eps)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, epsilon: float = 1e-8):
        self.params = params
        self.lr = lr
        self.epsilon = epsilon
        self.accum = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0.0:
            return
        for name, g in grads.items():
            acc = self.accum[name]
            acc += g * g
            self.params[name] -= self.lr * g / (np.sqrt(acc) + self.epsilon)


@dataclass
class TrainResult:
    net: ConvNet
    history: pd.DataFrame
    train_index: np.ndarray
    val_index: np.ndarray


def split_train_val(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Seeded site split; returns sorted index arrays. No validation set below two sites."""
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction)) if n >= 2 else 0
    n_val = min(n_val, n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def downsample_dark(
    labels: np.ndarray,
    dark_fraction: float,
    rng: np.random.Generator,
    threshold: float = DARK_THRESHOLD,
) -> np.ndarray:
    """Indices for one epoch: every bright tile plus enough dark tiles for `dark_fraction`.

    Falls back to all dark tiles when there are too few, and to all tiles when there
    are no bright ones.
    """
    labels = np.asarray(labels)
    dark = np.flatnonzero(labels < threshold)
    bright = np.flatnonzero(labels >= threshold)
    if bright.size == 0:
        return rng.permutation(labels.size)
    want = int(round(dark_fraction * bright.size / (1.0 - dark_fraction)))
    chosen = dark if want >= dark.size else rng.choice(dark, size=want, replace=False)
    return rng.permutation(np.concatenate([bright, chosen]))


def _batch(tiles: Sequence, idx: np.ndarray) -> np.ndarray:
    out = []
    for i in idx:
        t = tiles[int(i)]
        out.append(t.pixels if isinstance(t, RasterTile) else np.asarray(t))
    return np.stack(out).astype(np.float64)


def _mse_head(head: Linear, feats: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    pred, _ = head.forward(feats)
    return float(np.mean((pred - y) ** 2))


def _check_finite(loss: float, stage: int, epoch: int) -> None:
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss} in stage {stage}, epoch {epoch}")


def _features(net: ConvNet, tiles: Sequence, idx: np.ndarray, batch_size: int) -> np.ndarray:
    if idx.size == 0:
        return np.zeros((0, net.feature_dim))
    chunks = [net.forward_batch(_batch(tiles, idx[s:s + batch_size]))[0] for s in range(0, idx.size, batch_size)]
    return np.concatenate(chunks)


def train_two_stage(
    net: ConvNet,
    tiles: Sequence,
    labels: Sequence[float],
    sched: TrainSchedule,
) -> TrainResult:
    """Train `net` in place on (tile, ln(1+NTL)) pairs; returns the net and loss history.

    `tiles` may be any indexable of RasterTile or H×W×3 arrays, so large corpora can be
    read lazily.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = len(labels)
    if n == 0 or len(tiles) == 0:
        raise DataError("cannot train on an empty corpus")
    if len(tiles) != n:
        raise DataError(f"{len(tiles)} tiles but {n} labels")
    if not np.all(np.isfinite(labels)):
        raise DataError("training labels must be finite")

    rng = np.random.default_rng(sched.seed)
    train_idx, val_idx = split_train_val(n, sched.val_fraction, rng)
    y_train, y_val = labels[train_idx], labels[val_idx]
    bs = sched.batch_size
    rows: list[dict] = []

    def epoch_indices() -> np.ndarray:
        if sched.dark_fraction is None:
            return rng.permutation(train_idx.size)
        return downsample_dark(y_train, sched.dark_fraction, rng, sched.dark_threshold)

    # Stage 1: head only, on cached frozen features.
    f_train = _features(net, tiles, train_idx, bs)
    f_val = _features(net, tiles, val_idx, bs)
    init_loss = _mse_head(net.head, f_train, y_train)
    _check_finite(init_loss, 0, 0)
    rows.append({"epoch": 0, "stage": 0, "train_loss": init_loss, "val_loss": _mse_head(net.head, f_val, y_val), "boundary": 0})

    head_params = {f"{net.head.name}.{k}": v for k, v in net.head.params().items()}
    opt = Adagrad(head_params, sched.stage1_lr, sched.epsilon)
    epoch = 0
    for _ in range(sched.stage1_epochs):
        epoch += 1
        order = epoch_indices()
        for s in range(0, order.size, bs):
            b = order[s:s + bs]
            feats, y = f_train[b], y_train[b]
            pred, _ = net.head.forward(feats)
            dpred = 2.0 * (pred - y) / len(y)
            _, g = net.head.backward(dpred, feats)
            opt.step({f"{net.head.name}.{k}": v for k, v in g.items()})
        loss = _mse_head(net.head, f_train, y_train)
        _check_finite(loss, 1, epoch)
        val = _mse_head(net.head, f_val, y_val)
        rows.append({"epoch": epoch, "stage": 1, "train_loss": loss, "val_loss": val, "boundary": 0})
        logger.info("stage 1 epoch %d: train %.5f val %.5f", epoch, loss, val)

    # Stage 2: fine-tune everything with an L2 penalty on weights.
    params = net.parameters()
    opt = Adagrad(params, sched.stage2_lr, sched.epsilon)
    for k in range(sched.stage2_epochs):
        epoch += 1
        order = epoch_indices()
        for s in range(0, order.size, bs):
            b = order[s:s + bs]
            x = _batch(tiles, train_idx[b])
            batch_loss, grads = net.loss_and_gradients(x, y_train[b])
            _check_finite(batch_loss, 2, epoch)
            if sched.l2:
                for name, g in grads.items():
                    if name.endswith(".weight"):
                        g += 2.0 * sched.l2 * params[name]
            opt.step(grads)
        loss = _mse_head(net.head, _features(net, tiles, train_idx, bs), y_train)
        _check_finite(loss, 2, epoch)
        val = _mse_head(net.head, _features(net, tiles, val_idx, bs), y_val)
        rows.append({"epoch": epoch, "stage": 2, "train_loss": loss, "val_loss": val, "boundary": int(k == 0)})
        logger.info("stage 2 epoch %d: train %.5f val %.5f", epoch, loss, val)

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return TrainResult(net, history, train_idx, val_idx)


def write_history(history: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False, float_format="%.8g")
    return path


def read_history(path: str | Path) -> pd.DataFrame:
    try:
        history = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"cannot read loss history {path}: {e}") from e
    missing = set(HISTORY_COLUMNS) - set(history.columns)
    if missing:
        raise DataError(f"loss history {path} lacks columns {sorted(missing)}")
    return history
