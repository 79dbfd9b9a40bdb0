"""
raster: Tiles, colour spaces, nightlight labels and 3×3 mosaics.

Purpose: The unit of model input is a square RGB tile in [0,1] (224 px at 10 m per
pixel). This module owns that representation and every pure operation on it.

Behavior:
- `RasterTile` holds float32 sRGB pixels plus geospatial metadata; pixels are read-only
- `rgb_to_lab` / `lab_to_rgb` implement CIE L*a*b* under D65 with IEC 61966-2-1
  companding; the inverse clamps out-of-gamut colours to [0,1]
- `nightlight_label` zeroes sub-noise radiance, sums the 3×3 patch and returns ln(1+s)
- `concat_grid` / `split_grid` build and take apart the 672 px neighbourhood mosaic

File formats:
- PNG, 8-bit RGB (divided by 255 on ingest)
- raw planar float32 little-endian with a JSON sidecar (width, height,
  meters_per_pixel, origin)
- nightlight CSV: site_id plus nine radiance columns r0..r8 in row-major order
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from PIL import Image

from .errors import DataError

TILE_SIDE = 224
GRID = 3
METERS_PER_PIXEL = 10.0
NIGHTLIGHT_METERS_PER_PIXEL = 750.0
NOISE_FLOOR = 0.5

# sRGB primaries -> XYZ (D65). The reference white is the image of (1,1,1) so white
# maps to exactly L*=100, a*=b*=0.
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
WHITE_D65 = SRGB_TO_XYZ @ np.ones(3)

_DELTA = 6.0 / 29.0


@dataclass(frozen=True, eq=False)
class RasterTile:
    """H×W×3 sRGB image in [0,1] with geospatial metadata."""

    pixels: np.ndarray
    meters_per_pixel: float = METERS_PER_PIXEL
    origin: tuple[float, float] | None = None

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"tile must be H×W×3, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise DataError("tile contains non-finite pixels")
        if px.size and (px.min() < -1e-6 or px.max() > 1 + 1e-6):
            raise DataError(f"tile pixels outside [0,1]: [{px.min()}, {px.max()}]")
        px = np.clip(px, 0.0, 1.0)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def side(self) -> int:
        """Side length of a square tile."""
        if self.height_px != self.width_px:
            raise DataError(f"tile is not square: {self.height_px}×{self.width_px}")
        return self.height_px

    def with_pixels(self, pixels: np.ndarray) -> "RasterTile":
        """Same metadata, new pixels (clamped to [0,1])."""
        return replace(self, pixels=np.clip(pixels, 0.0, 1.0))

    @classmethod
    def from_uint8(cls, array: np.ndarray, **meta) -> "RasterTile":
        return cls(np.asarray(array, dtype=np.float32) / 255.0, **meta)


@dataclass(frozen=True, eq=False)
class LabImage:
    """Per-pixel CIE L*a*b* values, H×W×3 (L in [0,100])."""

    values: np.ndarray
    meters_per_pixel: float = METERS_PER_PIXEL
    origin: tuple[float, float] | None = None

    @property
    def lightness(self) -> np.ndarray:
        return self.values[..., 0]

    @property
    def chromaticity(self) -> np.ndarray:
        return self.values[..., 1:]


@dataclass(frozen=True, eq=False)
class NightlightPatch:
    """3×3 VIIRS-style radiance patch matching one daytime tile."""

    values: np.ndarray
    meters_per_pixel: float = NIGHTLIGHT_METERS_PER_PIXEL

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).reshape(GRID, GRID)
        if not np.all(np.isfinite(vals)):
            raise DataError("nightlight patch contains non-finite radiance")
        if np.any(vals < 0):
            raise DataError(f"negative radiance in nightlight patch: min {vals.min()}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def total(self) -> float:
        return float(self.values.sum())


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, np.power((c + 0.055) / 1.055, 2.4))


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.maximum(c, 0.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1.0 / 2.4) - 0.055)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _lab_finv(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_array_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB values in [0,1] (any leading shape, last axis 3) -> L*a*b*."""
    xyz = srgb_to_linear(np.asarray(rgb, dtype=np.float64)) @ SRGB_TO_XYZ.T
    f = _lab_f(xyz / WHITE_D65)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_array_to_rgb(lab: np.ndarray) -> np.ndarray:
    """L*a*b* (last axis 3) -> sRGB clamped to [0,1]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = _lab_finv(np.stack([fx, fy, fz], axis=-1)) * WHITE_D65
    rgb = linear_to_srgb(xyz @ XYZ_TO_SRGB.T)
    return np.clip(rgb, 0.0, 1.0)


def rgb_to_lab(tile: RasterTile) -> LabImage:
    return LabImage(rgb_array_to_lab(tile.pixels), tile.meters_per_pixel, tile.origin)


def lab_to_rgb(img: LabImage) -> RasterTile:
    return RasterTile(lab_array_to_rgb(img.values), img.meters_per_pixel, img.origin)


def nightlight_label(patch: NightlightPatch, noise_floor: float = NOISE_FLOOR) -> float:
    """ln(1 + summed radiance) after zeroing pixels below the noise floor."""
    vals = np.asarray(patch.values, dtype=np.float64)
    if np.any(vals < 0):
        raise DataError(f"negative radiance in nightlight patch: min {vals.min()}")
    kept = np.where(vals < noise_floor, 0.0, vals)
    return float(np.log1p(kept.sum()))


def concat_grid(tiles: Sequence[Sequence[RasterTile]], tile_side: int = TILE_SIDE) -> RasterTile:
    """Place a 3×3 neighbourhood row-major into one mosaic; (1,1) is the survey site."""
    if len(tiles) != GRID or any(len(row) != GRID for row in tiles):
        raise DataError("concat_grid expects a 3×3 grid of tiles")
    for i, row in enumerate(tiles):
        for j, t in enumerate(row):
            if t.pixels.shape[:2] != (tile_side, tile_side):
                raise DataError(
                    f"tile ({i},{j}) is {t.height_px}×{t.width_px}, expected {tile_side}×{tile_side}"
                )
    mosaic = np.concatenate(
        [np.concatenate([t.pixels for t in row], axis=1) for row in tiles], axis=0
    )
    center = tiles[1][1]
    return RasterTile(mosaic, center.meters_per_pixel, center.origin)


def split_grid(mosaic: RasterTile, tile_side: int = TILE_SIDE) -> list[list[RasterTile]]:
    """Inverse of concat_grid."""
    if mosaic.pixels.shape[:2] != (GRID * tile_side, GRID * tile_side):
        raise DataError(
            f"mosaic is {mosaic.height_px}×{mosaic.width_px}, expected {GRID * tile_side} square"
        )
    return [
        [
            RasterTile(
                mosaic.pixels[i * tile_side:(i + 1) * tile_side, j * tile_side:(j + 1) * tile_side],
                mosaic.meters_per_pixel,
                mosaic.origin if (i, j) == (1, 1) else None,
            )
            for j in range(GRID)
        ]
        for i in range(GRID)
    ]


def center_tile(mosaic: RasterTile, tile_side: int = TILE_SIDE) -> RasterTile:
    return split_grid(mosaic, tile_side)[1][1]


# --- file IO -----------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _write_sidecar(tile: RasterTile, path: Path, **extra) -> None:
    meta = {
        "width": tile.width_px,
        "height": tile.height_px,
        "meters_per_pixel": tile.meters_per_pixel,
        "origin": list(tile.origin) if tile.origin is not None else None,
        **extra,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_sidecar(path: Path) -> dict:
    side = _sidecar(path)
    if not side.exists():
        return {}
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"malformed sidecar {side}: {e}") from e


def _meta_kwargs(meta: dict) -> dict:
    kwargs = {}
    if meta.get("meters_per_pixel") is not None:
        kwargs["meters_per_pixel"] = float(meta["meters_per_pixel"])
    if meta.get("origin") is not None:
        kwargs["origin"] = tuple(float(v) for v in meta["origin"])
    return kwargs


def write_png(tile: RasterTile, path: str | Path, sidecar: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(tile.pixels.astype(np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")
    if sidecar:
        _write_sidecar(tile, path, format="png")
    return path


def read_png(path: str | Path) -> RasterTile:
    path = Path(path)
    try:
        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read PNG tile {path}: {e}") from e
    return RasterTile.from_uint8(data, **_meta_kwargs(_read_sidecar(path)))


def write_raw(tile: RasterTile, path: str | Path) -> Path:
    """Planar float32 little-endian (3, H, W) plus JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    planar = np.ascontiguousarray(np.transpose(tile.pixels, (2, 0, 1)), dtype="<f4")
    path.write_bytes(planar.tobytes())
    _write_sidecar(tile, path, format="raw", layout="planar", dtype="<f4")
    return path


def read_raw(path: str | Path) -> RasterTile:
    path = Path(path)
    meta = _read_sidecar(path)
    if "width" not in meta or "height" not in meta:
        raise DataError(f"raw tile {path} needs a sidecar with width and height")
    w, h = int(meta["width"]), int(meta["height"])
    try:
        buf = np.frombuffer(path.read_bytes(), dtype="<f4")
    except OSError as e:
        raise DataError(f"cannot read raw tile {path}: {e}") from e
    if buf.size != 3 * w * h:
        raise DataError(f"raw tile {path} holds {buf.size} floats, sidecar says 3×{h}×{w}")
    return RasterTile(np.transpose(buf.reshape(3, h, w), (1, 2, 0)), **_meta_kwargs(meta))


def read_tile(path: str | Path) -> RasterTile:
    path = Path(path)
    return read_png(path) if path.suffix.lower() == ".png" else read_raw(path)


NIGHTLIGHT_COLUMNS = [f"r{i}" for i in range(GRID * GRID)]


def write_nightlight_csv(patches: dict[str, NightlightPatch], path: str | Path) -> Path:
    path = Path(path)
    rows = [[site_id, *p.values.ravel().tolist()] for site_id, p in patches.items()]
    pd.DataFrame(rows, columns=["site_id", *NIGHTLIGHT_COLUMNS]).to_csv(path, index=False)
    return path


def read_nightlight_csv(path: str | Path) -> dict[str, NightlightPatch]:
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"site_id": str})
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"cannot read nightlight CSV {path}: {e}") from e
    missing = [c for c in ["site_id", *NIGHTLIGHT_COLUMNS] if c not in df.columns]
    if missing:
        raise DataError(f"nightlight CSV {path} lacks columns {missing}")
    return {
        row.site_id: NightlightPatch(np.array([getattr(row, c) for c in NIGHTLIGHT_COLUMNS]))
        for row in df.itertuples(index=False)
    }
