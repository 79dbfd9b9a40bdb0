"""
synthgen: Procedural satellite-like scenes with a known latent wealth.

Purpose: Stand-in for survey sites plus Sentinel-2/VIIRS imagery. Every site has a
latent wealth that is an explicit function of its scene parameters, so every
downstream experiment can be checked against ground truth.

Behavior:
- A 672×672 neighbourhood (3×3 tiles of 224 px) is rendered per site
- Background: Gaussian-blob mixture of a bluish-green vegetation palette and an
  orange/light-brown dryland palette
- Buildings (2–3 px rectangles) and roads (1–2 px anti-aliased polylines) in dark
  brown, scattered around a settlement centre displaced from the site centre by up
  to `displacement_px`
- latent_wealth = BASELINE_WEALTH + BUILDING_WEIGHT·buildings + ROAD_WEIGHT·roads
- summed nightlight = NTL_SCALE·exp(NTL_RATE·latent_wealth)·(1+ε), ε ~ U(±0.1),
  floored at 0, spread over the centre tile's 3×3 radiance patch by built-up share

Determinism:
- A site is a pure function of its SceneParams (including rng_seed)
- Corpus site i draws its parameters from SeedSequence(seed, spawn_key=(i,))

On disk:
- sites/site_XXXXX.png (672 px mosaic) with a JSON sidecar
- nightlight.csv (site_id, r0..r8)
- manifest.csv (site_id, latent_wealth, nightlight_sum, phase, params JSON)
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw
from scipy.special import expit

from .errors import DataError
from .raster import (
    GRID,
    TILE_SIDE,
    NightlightPatch,
    RasterTile,
    concat_grid,
    nightlight_label,
    read_nightlight_csv,
    read_png,
    split_grid,
    write_nightlight_csv,
    write_png,
)
from .workers import map_ordered

logger = logging.getLogger(__name__)

SCENE_SIDE = GRID * TILE_SIDE
SUPERSAMPLE = 4

BASELINE_WEALTH = -1.0
BUILDING_WEIGHT = 0.02
ROAD_WEIGHT = 0.25
NTL_SCALE = 0.05
NTL_RATE = 1.0
NTL_NOISE = 0.1
# wealth-equivalent of the multiplicative nightlight noise
WEALTH_NOISE_SCALE = float(np.log1p(NTL_NOISE) / NTL_RATE)

VEGETATION_RGB = np.array([0.22, 0.42, 0.36])
DRYLAND_RGB = np.array([0.72, 0.56, 0.38])
INFRASTRUCTURE_RGB = np.array([0.30, 0.21, 0.16])

DEFAULT_PHASES = ("2003-2008", "2009-2012", "2015-2017")

LATENT_LINK = (
    f"latent_wealth = {BASELINE_WEALTH} + {BUILDING_WEIGHT}*building_count + "
    f"{ROAD_WEIGHT}*road_count; nightlight_sum = max(0, {NTL_SCALE}*exp({NTL_RATE}*latent_wealth)*(1+eps)), "
    f"eps ~ U(-{NTL_NOISE}, {NTL_NOISE})"
)


@dataclass(frozen=True)
class SceneParams:
    building_count: int = 0
    building_size_px: tuple[int, int] = (2, 3)
    road_count: int = 0
    road_width_px: tuple[int, int] = (1, 2)
    vegetation_fraction: float = 0.5
    dryland_tint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rng_seed: int = 0
    displacement_px: int = 112
    settlement_spread_px: float = 120.0

    def __post_init__(self):
        if self.building_count < 0 or self.road_count < 0:
            raise DataError("building_count and road_count must be nonnegative")
        if not 0.0 <= self.vegetation_fraction <= 1.0:
            raise DataError(f"vegetation_fraction {self.vegetation_fraction} outside [0,1]")
        for name in ("building_size_px", "road_width_px"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise DataError(f"{name} must be a range 1 <= lo <= hi, got {(lo, hi)}")
        if self.displacement_px < 0 or self.settlement_spread_px <= 0:
            raise DataError("displacement_px must be >= 0 and settlement_spread_px > 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneParams":
        raw = json.loads(text)
        for key in ("building_size_px", "road_width_px", "dryland_tint"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass(frozen=True, eq=False)
class SyntheticSite:
    tiles: list[list[RasterTile]]
    latent_wealth: float
    nightlight: NightlightPatch
    params: SceneParams
    site_id: str = "site_00000"
    phase: str = DEFAULT_PHASES[-1]
    metadata: dict = field(default_factory=dict)

    @property
    def mosaic(self) -> RasterTile:
        return concat_grid(self.tiles)

    @property
    def center(self) -> RasterTile:
        return self.tiles[1][1]


@dataclass(frozen=True)
class ParamDistribution:
    """Ranges the corpus samples SceneParams from (inclusive)."""

    building_count: tuple[int, int] = (0, 240)
    road_count: tuple[int, int] = (0, 6)
    vegetation_fraction: tuple[float, float] = (0.1, 0.9)
    dryland_tint_jitter: float = 0.05
    building_size_px: tuple[int, int] = (2, 3)
    road_width_px: tuple[int, int] = (1, 2)
    displacement_px: int = 112
    settlement_spread_px: float = 120.0
    phases: tuple[str, ...] = DEFAULT_PHASES

    def sample(self, rng: np.random.Generator) -> tuple[SceneParams, str]:
        tint = rng.uniform(-self.dryland_tint_jitter, self.dryland_tint_jitter, size=3)
        params = SceneParams(
            building_count=int(rng.integers(self.building_count[0], self.building_count[1] + 1)),
            building_size_px=tuple(self.building_size_px),
            road_count=int(rng.integers(self.road_count[0], self.road_count[1] + 1)),
            road_width_px=tuple(self.road_width_px),
            vegetation_fraction=float(rng.uniform(*self.vegetation_fraction)),
            dryland_tint=tuple(float(t) for t in tint),
            rng_seed=int(rng.integers(0, 2**63 - 1)),
            displacement_px=self.displacement_px,
            settlement_spread_px=self.settlement_spread_px,
        )
        phase = str(self.phases[int(rng.integers(0, len(self.phases)))])
        return params, phase


def latent_wealth(params: SceneParams) -> float:
    return BASELINE_WEALTH + BUILDING_WEIGHT * params.building_count + ROAD_WEIGHT * params.road_count


def nightlight_mean(wealth: float) -> float:
    """Noise-free summed radiance for a latent wealth."""
    return NTL_SCALE * float(np.exp(NTL_RATE * wealth))


def _background(params: SceneParams, rng: np.random.Generator) -> np.ndarray:
    n = SCENE_SIDE
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    field_ = np.zeros((n, n))
    for _ in range(12):
        cy, cx = rng.uniform(0, n, size=2)
        s = rng.uniform(40.0, 120.0)
        field_ += rng.uniform(-1.0, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    field_ += 1e-3 * rng.standard_normal((n, n))
    if params.vegetation_fraction <= 0.0:
        veg = np.zeros((n, n))
    elif params.vegetation_fraction >= 1.0:
        veg = np.ones((n, n))
    else:
        q = np.quantile(field_, 1.0 - params.vegetation_fraction)
        scale = max(float(field_.std()), 1e-6) * 0.15
        veg = expit((field_ - q) / scale)
    dry = np.clip(DRYLAND_RGB * (1.0 + np.asarray(params.dryland_tint)), 0.0, 1.0)
    rgb = veg[..., None] * VEGETATION_RGB + (1.0 - veg[..., None]) * dry
    rgb += 0.02 * rng.standard_normal((n, n, 3))
    return rgb


def _settlement_mask(params: SceneParams, rng: np.random.Generator) -> tuple[np.ndarray, tuple[float, float]]:
    """Coverage in [0,1] of buildings and roads, anti-aliased by supersampling."""
    n, ss = SCENE_SIDE, SUPERSAMPLE
    d = params.displacement_px
    center = (n / 2 + rng.uniform(-d, d), n / 2 + rng.uniform(-d, d))
    canvas = Image.new("L", (n * ss, n * ss), 0)
    draw = ImageDraw.Draw(canvas)

    lo, hi = params.building_size_px
    for _ in range(params.building_count):
        h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        cy, cx = rng.normal(center, params.settlement_spread_px)
        y = int(np.clip(round(cy - h / 2), 0, n - h))
        x = int(np.clip(round(cx - w / 2), 0, n - w))
        draw.rectangle([x * ss, y * ss, (x + w) * ss - 1, (y + h) * ss - 1], fill=255)

    lo, hi = params.road_width_px
    for _ in range(params.road_count):
        width = int(rng.integers(lo, hi + 1))
        theta = rng.uniform(0, np.pi)
        direction = np.array([np.cos(theta), np.sin(theta)])
        normal = np.array([-direction[1], direction[0]])
        anchor = np.asarray(center) + rng.normal(0, params.settlement_spread_px / 2, size=2)
        pts = []
        for t in np.linspace(-1.0, 1.0, 7):
            p = anchor + t * n * direction + rng.normal(0, 15.0) * normal
            pts.append((float(p[1] * ss), float(p[0] * ss)))
        draw.line(pts, fill=255, width=width * ss, joint="curve")

    coverage = canvas.resize((n, n), Image.Resampling.BOX)
    return np.asarray(coverage, dtype=np.float64) / 255.0, center


def _radiance_patch(total: float, coverage: np.ndarray) -> NightlightPatch:
    """Spread the summed radiance over the centre tile's 3×3 cells by built-up share."""
    centre = coverage[TILE_SIDE:2 * TILE_SIDE, TILE_SIDE:2 * TILE_SIDE]
    bounds = np.linspace(0, TILE_SIDE, GRID + 1).round().astype(int)
    weights = np.array(
        [
            [centre[bounds[i]:bounds[i + 1], bounds[j]:bounds[j + 1]].sum() for j in range(GRID)]
            for i in range(GRID)
        ]
    )
    weights += 1.0
    return NightlightPatch(total * weights / weights.sum())


def generate_site(params: SceneParams, site_id: str = "site_00000", phase: str = DEFAULT_PHASES[-1]) -> SyntheticSite:
    """Render one site; bit-identical for identical params."""
    rng = np.random.default_rng(params.rng_seed)
    background = _background(params, rng)
    coverage, center = _settlement_mask(params, rng)
    infra = INFRASTRUCTURE_RGB + 0.015 * rng.standard_normal((SCENE_SIDE, SCENE_SIDE, 3))
    pixels = (1.0 - coverage[..., None]) * background + coverage[..., None] * infra
    mosaic = RasterTile(np.clip(pixels, 0.0, 1.0))

    wealth = latent_wealth(params)
    eps = rng.uniform(-NTL_NOISE, NTL_NOISE)
    total = max(0.0, nightlight_mean(wealth) * (1.0 + eps))
    metadata = {
        "latent_link": LATENT_LINK,
        "settlement_center": [float(center[0]), float(center[1])],
        "nightlight_noise": float(eps),
    }
    return SyntheticSite(
        tiles=split_grid(mosaic),
        latent_wealth=wealth,
        nightlight=_radiance_patch(total, coverage),
        params=params,
        site_id=site_id,
        phase=phase,
        metadata=metadata,
    )


def site_id_for(index: int) -> str:
    return f"site_{index:05d}"


def site_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _generate_indexed(index: int, distribution: ParamDistribution, seed: int) -> SyntheticSite:
    params, phase = distribution.sample(site_rng(seed, index))
    return generate_site(params, site_id=site_id_for(index), phase=phase)


def generate_corpus(
    n_sites: int,
    distribution: ParamDistribution | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> list[SyntheticSite]:
    """I.i.d. sites, reproducible under seed. Holds everything in memory."""
    if n_sites < 1:
        raise DataError(f"n_sites must be >= 1, got {n_sites}")
    distribution = distribution or ParamDistribution()
    return map_ordered(partial(_generate_indexed, distribution=distribution, seed=seed), range(n_sites), jobs)


def corpus_manifest(sites: list[SyntheticSite]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "site_id": [s.site_id for s in sites],
            "latent_wealth": [s.latent_wealth for s in sites],
            "nightlight_sum": [s.nightlight.total for s in sites],
            "phase": [s.phase for s in sites],
            "params": [s.params.to_json() for s in sites],
        }
    )


def _write_indexed(index: int, distribution: ParamDistribution, seed: int, root: Path) -> dict:
    site = _generate_indexed(index, distribution, seed)
    write_png(site.mosaic, root / "sites" / f"{site.site_id}.png")
    return {
        "site_id": site.site_id,
        "latent_wealth": site.latent_wealth,
        "nightlight_sum": site.nightlight.total,
        "phase": site.phase,
        "params": site.params.to_json(),
        "radiance": site.nightlight.values.ravel().tolist(),
    }


def write_corpus(
    root: str | Path,
    n_sites: int,
    distribution: ParamDistribution | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> pd.DataFrame:
    """Stream sites to disk (one mosaic PNG each) and write manifest + nightlight CSV."""
    if n_sites < 1:
        raise DataError(f"n_sites must be >= 1, got {n_sites}")
    root = Path(root)
    try:
        (root / "sites").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create corpus directory {root}: {e}") from e
    distribution = distribution or ParamDistribution()
    fn = partial(_write_indexed, distribution=distribution, seed=seed, root=root)
    rows = map_ordered(fn, range(n_sites), jobs, chunksize=8)
    patches = {r["site_id"]: NightlightPatch(np.array(r.pop("radiance"))) for r in rows}
    manifest = pd.DataFrame(rows, columns=["site_id", "latent_wealth", "nightlight_sum", "phase", "params"])
    manifest.to_csv(root / "manifest.csv", index=False)
    write_nightlight_csv(patches, root / "nightlight.csv")
    logger.info("wrote %d sites to %s", n_sites, root)
    return manifest


class SiteCorpus:
    """Read access to a corpus written by `write_corpus`."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.csv"
        if not manifest_path.exists():
            raise DataError(f"no corpus manifest at {manifest_path}")
        try:
            self.manifest = pd.read_csv(manifest_path, dtype={"site_id": str, "phase": str})
        except (OSError, pd.errors.ParserError) as e:
            raise DataError(f"cannot read corpus manifest {manifest_path}: {e}") from e
        self.manifest = self.manifest.set_index("site_id", drop=False)
        self.patches = read_nightlight_csv(self.root / "nightlight.csv")

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def site_ids(self) -> list[str]:
        return self.manifest["site_id"].tolist()

    def wealth(self, site_ids: list[str] | None = None) -> np.ndarray:
        ids = self.site_ids if site_ids is None else site_ids
        return self.manifest.loc[ids, "latent_wealth"].to_numpy(dtype=np.float64)

    def phases(self, site_ids: list[str] | None = None) -> np.ndarray:
        ids = self.site_ids if site_ids is None else site_ids
        return self.manifest.loc[ids, "phase"].to_numpy(dtype=str)

    def mosaic(self, site_id: str) -> RasterTile:
        path = self.root / "sites" / f"{site_id}.png"
        if not path.exists():
            raise DataError(f"missing tile file for {site_id}: {path}")
        return read_png(path)

    def tiles(self, site_id: str) -> list[list[RasterTile]]:
        return split_grid(self.mosaic(site_id))

    def center(self, site_id: str) -> RasterTile:
        return self.tiles(site_id)[1][1]

    def nightlight(self, site_id: str) -> NightlightPatch:
        return self.patches[site_id]

    def label(self, site_id: str, noise_floor: float = 0.5) -> float:
        return nightlight_label(self.patches[site_id], noise_floor)

    def params(self, site_id: str) -> SceneParams:
        return SceneParams.from_json(self.manifest.loc[site_id, "params"])

    def iter_sites(self) -> Iterator[SyntheticSite]:
        for sid in self.site_ids:
            row = self.manifest.loc[sid]
            yield SyntheticSite(
                tiles=self.tiles(sid),
                latent_wealth=float(row["latent_wealth"]),
                nightlight=self.patches[sid],
                params=self.params(sid),
                site_id=sid,
                phase=str(row["phase"]),
            )
