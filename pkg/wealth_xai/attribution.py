"""
attribution: Per-image feature attribution for the wealth network.

Methods:
- occlusion: output drop when a gray patch covers each grid position
- gradcam: ReLU of the gradient-weighted channel sum at the last conv layer
- guidedbp: guided backpropagation to the pixels, reduced over RGB by max |.|
- guidedgradcam: bilinearly upsampled Grad-CAM times the guided-backprop map

Every map carries its alignment to input pixels: map cell (i, j) is centred on pixel
(offset + i * scale, offset + j * scale).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
from PIL import Image
from scipy import ndimage, stats

from .errors import DataError, NumericError
from .model import OUTPUT, ConvNet, Unit
from .raster import RasterTile

logger = logging.getLogger(__name__)

METHODS = ("occlusion", "gradcam", "guidedbp", "guidedgradcam")


@dataclass(frozen=True, eq=False)
class AttributionMap:
    values: np.ndarray
    method: str
    scale: float = 1.0
    offset: float = 0.0
    signed: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DataError(f"attribution map must be 2-D, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError(f"{self.method} map contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def alignment(self) -> dict:
        return {
            "method": self.method,
            "height": int(self.values.shape[0]),
            "width": int(self.values.shape[1]),
            "scale": self.scale,
            "offset": self.offset,
            "signed": self.signed,
        }


@dataclass(frozen=True)
class OcclusionSpec:
    patch_px: int = 16
    stride_px: int = 8
    fill: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if not self.patch_px >= self.stride_px >= 1:
            raise DataError(f"need patch >= stride >= 1, got patch {self.patch_px}, stride {self.stride_px}")
        if any(not 0.0 <= f <= 1.0 for f in self.fill):
            raise DataError(f"fill colour outside [0,1]: {self.fill}")


def occlusion_map(net: ConvNet, tile: RasterTile, spec: OcclusionSpec = OcclusionSpec(), batch_size: int = 16) -> AttributionMap:
    """output(original) - output(occluded) for every patch position on a stride grid."""
    side = tile.side
    if spec.patch_px > side:
        raise DataError(f"occlusion patch {spec.patch_px} px does not fit a {side} px tile")
    base = np.asarray(tile.pixels, dtype=np.float64)
    _, ref = net.forward_batch(base[None])
    positions = list(range(0, side - spec.patch_px + 1, spec.stride_px))
    cells = [(i, j) for i in positions for j in positions]
    fill = np.asarray(spec.fill, dtype=np.float64)
    drops = np.empty(len(cells))
    for s in range(0, len(cells), batch_size):
        chunk = cells[s:s + batch_size]
        batch = np.repeat(base[None], len(chunk), axis=0)
        for b, (i, j) in enumerate(chunk):
            batch[b, i:i + spec.patch_px, j:j + spec.patch_px, :] = fill
        _, out = net.forward_batch(batch)
        drops[s:s + len(chunk)] = ref[0] - out
    n = len(positions)
    return AttributionMap(
        drops.reshape(n, n), "occlusion", scale=float(spec.stride_px), offset=(spec.patch_px - 1) / 2.0, signed=True
    )


def grad_cam(net: ConvNet, tile: RasterTile, layer: str | int | None = None, unit: Unit = OUTPUT) -> AttributionMap:
    """Channel weights are spatial means of d(unit)/d(activation); map = ReLU(Σ_c w_c A_c)."""
    layer = net.last_conv_layer() if layer is None else layer
    acts, grads = net.layer_activations_and_gradients(tile, layer, unit)
    if acts.ndim != 3 or acts.shape[0] < 1:
        raise DataError(f"layer {layer!r} has no spatial extent (activation shape {acts.shape})")
    weights = grads.mean(axis=(0, 1))
    cam = np.maximum(acts @ weights, 0.0)
    scale = tile.side / cam.shape[0]
    return AttributionMap(cam, "gradcam", scale=scale, offset=(scale - 1) / 2.0)


def guided_gradient(net: ConvNet, tile: RasterTile, unit: Unit = OUTPUT) -> np.ndarray:
    """Raw H×W×3 guided-backpropagation signal."""
    return net.input_gradient(tile, unit, guided=True)


def guided_backprop(net: ConvNet, tile: RasterTile, unit: Unit = OUTPUT) -> AttributionMap:
    return AttributionMap(np.abs(guided_gradient(net, tile, unit)).max(axis=-1), "guidedbp")


def upsample(values: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize with corner alignment to size × size."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape == (size, size):
        return values.copy()
    zoom = (size / values.shape[0], size / values.shape[1])
    out = ndimage.zoom(values, zoom, order=1, mode="nearest", grid_mode=False)
    if out.shape != (size, size):
        raise DataError(f"upsampling produced {out.shape}, expected {(size, size)}")
    return out


def guided_grad_cam(
    net: ConvNet,
    tile: RasterTile,
    layer: str | int | None = None,
    unit: Unit = OUTPUT,
    cam: AttributionMap | None = None,
    guided: AttributionMap | None = None,
) -> AttributionMap:
    cam = cam if cam is not None else grad_cam(net, tile, layer, unit)
    guided = guided if guided is not None else guided_backprop(net, tile, unit)
    return AttributionMap(upsample(cam.values, tile.side) * guided.values, "guidedgradcam")


def attribute(net: ConvNet, tile: RasterTile, method: str, occlusion: OcclusionSpec | None = None) -> AttributionMap:
    if method == "occlusion":
        return occlusion_map(net, tile, occlusion or OcclusionSpec())
    if method == "gradcam":
        return grad_cam(net, tile)
    if method == "guidedbp":
        return guided_backprop(net, tile)
    if method == "guidedgradcam":
        return guided_grad_cam(net, tile)
    raise DataError(f"unknown attribution method {method!r}; valid: {', '.join(METHODS)}")


def attribution_output_correlation(maps: Sequence[AttributionMap | np.ndarray], outputs: Sequence[float]) -> float:
    """Pearson r between per-site summed attribution and network output."""
    sums = np.array([m.total if isinstance(m, AttributionMap) else float(np.sum(m)) for m in maps])
    out = np.asarray(outputs, dtype=np.float64).reshape(-1)
    if sums.size != out.size:
        raise DataError(f"{sums.size} maps but {out.size} outputs")
    if sums.size < 3:
        raise DataError(f"correlation needs at least 3 sites, got {sums.size}")
    if np.ptp(sums) == 0.0 or np.ptp(out) == 0.0:
        raise NumericError("correlation undefined: zero variance in attribution sums or outputs")
    return float(stats.pearsonr(sums, out).statistic)


# --- export -----------------------------------------------------------------------


def write_map_raw(amap: AttributionMap, path: str | Path) -> Path:
    """Little-endian float32 grid plus a JSON sidecar with the alignment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(amap.values, dtype="<f4").tobytes())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(amap.alignment(), indent=2, sort_keys=True) + "\n")
    return path


def read_map_raw(path: str | Path) -> AttributionMap:
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        values = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["height"], meta["width"])
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise DataError(f"cannot read attribution map {path}: {e}") from e
    return AttributionMap(values, meta["method"], meta["scale"], meta["offset"], meta["signed"])


def heat_rgb(values: np.ndarray, signed: bool = False) -> np.ndarray:
    """Colormapped H×W×3 in [0,1]; signed maps are centred on zero."""
    v = np.asarray(values, dtype=np.float64)
    if signed:
        m = np.abs(v).max()
        norm = 0.5 + 0.5 * v / m if m > 0 else np.full_like(v, 0.5)
        cmap = matplotlib.colormaps["RdBu_r"]
    else:
        lo, hi = v.min(), v.max()
        norm = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
        cmap = matplotlib.colormaps["inferno"]
    return cmap(norm)[..., :3]


def overlay(tile: RasterTile, amap: AttributionMap, alpha: float = 0.5) -> np.ndarray:
    heat = heat_rgb(upsample(amap.values, tile.side), amap.signed)
    return (1.0 - alpha) * np.asarray(tile.pixels, dtype=np.float64) + alpha * heat


def write_overlay_png(tile: RasterTile, amap: AttributionMap, path: str | Path, alpha: float = 0.5) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb = np.round(np.clip(overlay(tile, amap, alpha), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(rgb).save(path, format="PNG", optimize=False)
    return path
