"""Activation maximisation: optimise an input image for one network unit.

Gradient ascent from a seeded uniform-noise image. Each step rolls the image by a random
jitter before taking the gradient, mixes in a total-variation smoothing direction, and is
kept only if the unpenalised unit value does not drop; a rejected step halves the step
size. Pixels stay in [0, 1].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError, NumericError
from .model import OUTPUT, ConvNet, Unit
from .raster import TILE_SIDE, RasterTile, write_png

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VizSpec:
    unit: Unit = OUTPUT
    steps: int = 512
    step_size: float = 1e-2
    seed: int = 0
    jitter_px: int = 2
    smoothness_weight: float = 1e-3
    side: int = TILE_SIDE

    def __post_init__(self):
        if self.steps < 0:
            raise DataError(f"steps must be >= 0, got {self.steps}")
        if not self.step_size > 0:
            raise DataError(f"step_size must be positive, got {self.step_size}")
        if self.jitter_px < 0 or self.smoothness_weight < 0:
            raise DataError("jitter_px and smoothness_weight must be non-negative")


@dataclass
class VizResult:
    image: RasterTile
    trajectory: list[float] = field(default_factory=list)

    @property
    def gain(self) -> float:
        return self.trajectory[-1] - self.trajectory[0]


def unit_value(net: ConvNet, x: np.ndarray, unit: Unit) -> float:
    feats, out = net.forward_batch(x[None])
    if unit == OUTPUT:
        return float(out[0])
    if isinstance(unit, (int, np.integer)) and 0 <= unit < feats.shape[1]:
        return float(feats[0, int(unit)])
    raise DataError(f"invalid unit {unit!r}: use 'output' or a feature index below {feats.shape[1]}")


def tv_gradient(x: np.ndarray) -> np.ndarray:
    """Gradient of the squared total variation Σ (Δx)² over both image axes."""
    g = np.zeros_like(x)
    dv = np.diff(x, axis=0)
    dh = np.diff(x, axis=1)
    g[1:] += 2 * dv
    g[:-1] -= 2 * dv
    g[:, 1:] += 2 * dh
    g[:, :-1] -= 2 * dh
    return g


def _unit_norm(g: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(g)
    return g / n if n > 0 else g


def ascent_direction(grad: np.ndarray, x: np.ndarray, smoothness_weight: float) -> np.ndarray:
    """Unit gradient minus a total-variation direction of length `smoothness_weight`.

    Both terms are normalised, so the weight is the smoothing term's length relative to the
    gradient term: the default 1e-3 only breaks ties, 1.0 weighs the two equally.
    """
    return _unit_norm(grad) - smoothness_weight * _unit_norm(tv_gradient(x))


def visualize_unit(net: ConvNet, spec: VizSpec) -> VizResult:
    rng = np.random.default_rng(spec.seed)
    x = rng.uniform(0.0, 1.0, size=(spec.side, spec.side, 3))
    current = unit_value(net, x, spec.unit)
    if not np.isfinite(current):
        raise NumericError(f"non-finite objective at step 0: {current}")
    trajectory = [current]
    step = spec.step_size
    j = spec.jitter_px
    for k in range(1, spec.steps + 1):
        dy, dx = (rng.integers(-j, j + 1, size=2) if j else (0, 0))
        shifted = np.roll(x, (int(dy), int(dx)), axis=(0, 1))
        grad = np.roll(net.input_gradient(shifted, spec.unit), (-int(dy), -int(dx)), axis=(0, 1))
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient at step {k}")
        direction = ascent_direction(grad, x, spec.smoothness_weight)
        peak = np.abs(direction).max()
        if peak == 0:
            trajectory.append(current)
            continue
        candidate = np.clip(x + step * direction / peak, 0.0, 1.0)
        value = unit_value(net, candidate, spec.unit)
        if not np.isfinite(value):
            raise NumericError(f"non-finite objective at step {k}: {value}")
        if value >= current:
            x, current = candidate, value
        else:
            step *= 0.5
        trajectory.append(current)
    logger.debug("featviz seed %d: %.4g -> %.4g", spec.seed, trajectory[0], trajectory[-1])
    return VizResult(RasterTile(x.astype(np.float32)), trajectory)


def write_result(result: VizResult, directory: str | Path, name: str) -> tuple[Path, Path]:
    directory = Path(directory)
    png = write_png(result.image, directory / f"{name}.png", sidecar=False)
    csv = directory / f"{name}_trajectory.csv"
    pd.DataFrame({"step": range(len(result.trajectory)), "value": result.trajectory}).to_csv(
        csv, index=False, float_format="%.8g"
    )
    return png, csv
