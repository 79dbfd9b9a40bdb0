"""
perturb: Input perturbation experiments and the sweep harness that scores them.

Transforms:
- grid_shuffle: split the image into square tiles and permute them
- freq_filter: Gaussian low/high/band-pass in the 2-D Fourier domain
- ablate_chromaticity / ablate_gray: remove colour or everything outside one
  L*a*b* colour cluster

Sweep:
- For every (parameter, repetition) cell, transform every site, recompute features,
  refit the ridge head on the transformed training sites and score the held-out ones
- Cells run through the worker pool; each draws its own seed, results come back in
  grid order
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans

from .errors import DataError, NumericError, UsageError
from .head import DEFAULT_FOLDS, DEFAULT_LAMBDA_GRID, fit_ridge, predict
from .metrics import bootstrap_std, r2, spearman
from .model import ConvNet
from .pipeline import SiteSource, Transform, check_mode, extract_features
from .raster import RasterTile, lab_array_to_rgb, rgb_array_to_lab
from .workers import map_ordered

logger = logging.getLogger(__name__)

SHUFFLE_GRID = (1, 2, 4, 7, 8, 14, 16, 28, 32, 56, 112)
FILTER_KINDS = ("low", "high", "band")
BAND_RATIO = 1.5
MID_GRAY = 0.5
K_CANDIDATES = tuple(range(1, 9))
SAMPLE_PER_IMAGE = 1000
FAMILIES = ("identity", "shuffle", "lowpass", "highpass", "bandpass", "color-chroma", "color-gray")


# --- grid shuffling ----------------------------------------------------------------


@dataclass(frozen=True)
class ShuffleSpec:
    tile_px: int
    rng_seed: int = 0
    repetitions: int = 5

    def __post_init__(self):
        if self.tile_px < 1:
            raise DataError(f"tile_px must be >= 1, got {self.tile_px}")
        if self.repetitions < 1:
            raise DataError(f"repetitions must be >= 1, got {self.repetitions}")


def grid_shuffle(tile: RasterTile, spec: ShuffleSpec) -> RasterTile:
    """Uniformly permute the tile_px × tile_px blocks of a square image."""
    side = tile.side
    t = spec.tile_px
    if side % t:
        raise DataError(f"tile_px {t} does not divide the image side {side}")
    g = side // t
    blocks = tile.pixels.reshape(g, t, g, t, 3).swapaxes(1, 2).reshape(g * g, t, t, 3)
    perm = np.random.default_rng(spec.rng_seed).permutation(g * g)
    out = blocks[perm].reshape(g, g, t, t, 3).swapaxes(1, 2).reshape(side, side, 3)
    return tile.with_pixels(out)


# --- frequency filtering -------------------------------------------------------------


@dataclass(frozen=True)
class FilterSpec:
    """kind low|high|band; sigma_px is the spatial std of the equivalent Gaussian."""

    kind: str
    sigma_px: float

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise DataError(f"unknown filter kind {self.kind!r}; use one of {FILTER_KINDS}")
        if not self.sigma_px > 0:
            raise DataError(f"sigma_px must be positive, got {self.sigma_px}")


def cutoff(n: int, sigma_px: float) -> float:
    """Frequency-domain std D (in index units) of a spatial Gaussian with std sigma_px."""
    return n / (2.0 * np.pi * sigma_px)


def gaussian_transfer(n: int, d: float) -> np.ndarray:
    """exp(-(u² + v²) / 2D²) on the unshifted FFT grid of an n×n image."""
    k = np.fft.fftfreq(n) * n
    return np.exp(-(k[:, None] ** 2 + k[None, :] ** 2) / (2.0 * d * d))


def transfer(spec: FilterSpec, n: int) -> np.ndarray:
    low = gaussian_transfer(n, cutoff(n, spec.sigma_px))
    if spec.kind == "low":
        return low
    if spec.kind == "high":
        return 1.0 - low
    return low - gaussian_transfer(n, cutoff(n, BAND_RATIO * spec.sigma_px))


def filter_pixels(pixels: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Per-channel filtering without clamping; high and band outputs get the mid-gray offset."""
    pixels = np.asarray(pixels, dtype=np.float64)
    n = pixels.shape[0]
    if pixels.shape[1] != n:
        raise DataError(f"frequency filtering needs a square image, got {pixels.shape[:2]}")
    h = transfer(spec, n)
    spectrum = np.fft.fft2(pixels, axes=(0, 1))
    out = np.real(np.fft.ifft2(spectrum * h[:, :, None], axes=(0, 1)))
    if spec.kind != "low":
        out += MID_GRAY
    return out


def freq_filter(tile: RasterTile, spec: FilterSpec) -> RasterTile:
    return tile.with_pixels(np.clip(filter_pixels(tile.pixels, spec), 0.0, 1.0))


# --- colour clusters -----------------------------------------------------------------


@dataclass(frozen=True)
class ColorClusterModel:
    """Centers are full L*a*b* triples ordered darkest first; clustering uses (a*, b*)
    unless `use_lightness` is set."""

    k: int
    centers: np.ndarray
    elbow_curve: dict[int, float]
    use_lightness: bool = False

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "centers": self.centers.tolist(),
            "elbow_curve": {str(k): v for k, v in self.elbow_curve.items()},
            "use_lightness": self.use_lightness,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ColorClusterModel":
        return cls(
            k=int(data["k"]),
            centers=np.asarray(data["centers"], dtype=np.float64),
            elbow_curve={int(k): float(v) for k, v in data["elbow_curve"].items()},
            use_lightness=bool(data.get("use_lightness", False)),
        )

    def space(self, lab: np.ndarray) -> np.ndarray:
        return lab if self.use_lightness else lab[..., 1:]


def elbow(sse: dict[int, float]) -> int:
    """Candidate with the largest second difference of the SSE curve."""
    ks = sorted(sse)
    if sse[ks[0]] <= 1e-12 or len(ks) < 3:
        return ks[0]
    second = {ks[i]: sse[ks[i - 1]] - 2.0 * sse[ks[i]] + sse[ks[i + 1]] for i in range(1, len(ks) - 1)}
    return max(second, key=lambda k: (second[k], -k))


def _sample_pixels(tiles: Sequence[RasterTile], per_image: int, rng: np.random.Generator) -> np.ndarray:
    samples = []
    for tile in tiles:
        flat = tile.pixels.reshape(-1, 3)
        n = min(per_image, flat.shape[0])
        samples.append(flat[rng.choice(flat.shape[0], size=n, replace=False)])
    return rgb_array_to_lab(np.concatenate(samples).astype(np.float64))


def fit_color_clusters(
    tiles: Sequence[RasterTile],
    k_candidates: Iterable[int] = K_CANDIDATES,
    sample_per_image: int = SAMPLE_PER_IMAGE,
    seed: int = 0,
    use_lightness: bool = False,
) -> ColorClusterModel:
    """k-means on pooled pixel chromaticities, k picked by the elbow of the SSE curve.

    Candidates above the number of distinct colours get SSE 0.
    """
    tiles = list(tiles)
    if not tiles:
        raise DataError("colour clustering needs at least one tile")
    cands = sorted({int(k) for k in k_candidates})
    if not cands or cands[0] < 1:
        raise DataError(f"k candidates must be positive integers: {cands}")
    rng = np.random.default_rng(seed)
    lab = _sample_pixels(tiles, sample_per_image, rng)
    x = lab if use_lightness else lab[:, 1:]
    distinct = np.unique(np.round(x, 9), axis=0).shape[0]
    if distinct < cands[0]:
        raise DataError(f"only {distinct} distinct colours, fewer than k={cands[0]}")

    sse: dict[int, float] = {}
    fits: dict[int, KMeans] = {}
    for k in cands:
        if k > distinct:
            sse[k] = 0.0
            continue
        km = KMeans(n_clusters=k, init="k-means++", n_init=10, random_state=seed).fit(x)
        fits[k] = km
        sse[k] = float(km.inertia_)
    k = elbow(sse)
    km = fits[k]
    centers = np.stack([lab[km.labels_ == c].mean(axis=0) for c in range(k)])
    centers = centers[np.lexsort((centers[:, 2], centers[:, 1], centers[:, 0]))]
    logger.info("colour clusters: k=%d (SSE %s)", k, {kk: round(v, 3) for kk, v in sse.items()})
    return ColorClusterModel(k=k, centers=centers, elbow_curve=sse, use_lightness=use_lightness)


def assign_clusters(lab: np.ndarray, model: ColorClusterModel) -> np.ndarray:
    """Nearest-center labels for an H×W×3 L*a*b* array."""
    pts = model.space(lab)
    ctr = model.space(model.centers)
    d2 = ((pts[..., None, :] - ctr) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=-1)


def _kept_mask(labels: np.ndarray, model: ColorClusterModel, keep) -> np.ndarray:
    if keep is None:
        ids: list[int] = []
    elif isinstance(keep, (int, np.integer)):
        ids = [int(keep)]
    else:
        ids = [int(k) for k in keep]
    bad = [k for k in ids if not 0 <= k < model.k]
    if bad:
        raise DataError(f"cluster ids {bad} out of range 0..{model.k - 1}")
    return np.isin(labels, ids)


def ablate_chromaticity(tile: RasterTile, model: ColorClusterModel, keep) -> RasterTile:
    """Zero a*, b* for pixels outside the kept cluster(s); kept pixels are untouched."""
    lab = rgb_array_to_lab(tile.pixels.astype(np.float64))
    kept = _kept_mask(assign_clusters(lab, model), model, keep)
    gray = lab.copy()
    gray[..., 1:] = 0.0
    out = np.where(kept[..., None], tile.pixels, lab_array_to_rgb(gray))
    return tile.with_pixels(out)


def ablate_gray(tile: RasterTile, model: ColorClusterModel, keep) -> RasterTile:
    """Set pixels outside the kept cluster(s) to mid-gray."""
    lab = rgb_array_to_lab(tile.pixels.astype(np.float64))
    kept = _kept_mask(assign_clusters(lab, model), model, keep)
    return tile.with_pixels(np.where(kept[..., None], tile.pixels, MID_GRAY))


# --- sweep harness ---------------------------------------------------------------------


def image_seed(cell_seed: int, key: str) -> int:
    return int(np.random.SeedSequence([cell_seed, zlib.crc32(key.encode())]).generate_state(1, np.uint64)[0])


def _shuffle_transform(tile: RasterTile, key: str, tile_px: int, cell_seed: int) -> RasterTile:
    return grid_shuffle(tile, ShuffleSpec(tile_px, image_seed(cell_seed, key), 1))


def _filter_transform(tile: RasterTile, key: str, spec: FilterSpec) -> RasterTile:
    return freq_filter(tile, spec)


def _color_transform(tile: RasterTile, key: str, model: ColorClusterModel, keep, gray: bool) -> RasterTile:
    return ablate_gray(tile, model, keep) if gray else ablate_chromaticity(tile, model, keep)


def make_transform(family: str, param, cell_seed: int = 0, color_model: ColorClusterModel | None = None) -> Transform | None:
    """Transform for one sweep cell; None is the identity."""
    if family == "identity":
        return None
    if family == "shuffle":
        return partial(_shuffle_transform, tile_px=int(param), cell_seed=cell_seed)
    if family in ("lowpass", "highpass", "bandpass"):
        return partial(_filter_transform, spec=FilterSpec(family[:-4], float(param)))
    if family in ("color-chroma", "color-gray"):
        if color_model is None:
            raise DataError(f"{family} needs a fitted colour cluster model")
        keep = None if param is None or param == "none" else param
        return partial(_color_transform, model=color_model, keep=keep, gray=family == "color-gray")
    raise UsageError(f"unknown perturbation family {family!r}; valid: {', '.join(FAMILIES)}")


@dataclass
class SweepResult:
    family: str
    mode: str
    baseline: dict[str, float]
    cells: pd.DataFrame = field(default_factory=pd.DataFrame)

    def summary(self) -> pd.DataFrame:
        """One row per (param, metric): mean, std over repetitions and the raw values."""
        rows = []
        for param, grp in self.cells.groupby("param", sort=False):
            for metric in ("r2", "spearman"):
                vals = grp[metric].to_numpy()
                row = {
                    "param": param,
                    "metric": metric,
                    "mean": float(vals.mean()),
                    "std": float(vals.std()),
                    "values": ";".join(f"{v:.6f}" for v in vals),
                }
                boot = f"{metric}_boot_std"
                if boot in grp and grp[boot].notna().any():
                    row["boot_std"] = float(grp[boot].mean())
                rows.append(row)
        return pd.DataFrame(rows)

    def curve(self, metric: str = "r2") -> pd.DataFrame:
        s = self.summary()
        return s[s["metric"] == metric].set_index("param")[["mean", "std"]]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.summary().to_csv(path, index=False, float_format="%.6f")
        return path


@dataclass(frozen=True)
class SweepContext:
    net: ConvNet
    source: SiteSource
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    mode: str
    lambda_grid: tuple[float, ...]
    folds: int
    head_seed: int
    color_model: ColorClusterModel | None
    n_boot: int


def score_transform(ctx: SweepContext, transform: Transform | None, boot_seed: int = 0) -> dict[str, float]:
    """Refit the head on transformed training features and score the held-out sites.

    A score that is undefined for the cell (for example Spearman on collapsed, constant
    predictions) is recorded as NaN instead of aborting the sweep.
    """
    x_tr = extract_features(ctx.net, ctx.source, ctx.train_ids, ctx.mode, transform)
    x_te = extract_features(ctx.net, ctx.source, ctx.test_ids, ctx.mode, transform)
    y_tr = ctx.source.wealth(list(ctx.train_ids))
    y_te = ctx.source.wealth(list(ctx.test_ids))
    model = fit_ridge(x_tr, y_tr, ctx.lambda_grid, ctx.folds, seed=ctx.head_seed)
    pred = predict(model, x_te)
    out = {"r2": _or_nan(r2, y_te, pred), "spearman": _or_nan(spearman, y_te, pred)}
    if ctx.n_boot:
        out["r2_boot_std"] = _or_nan(partial(bootstrap_std, metric=r2, n_boot=ctx.n_boot, seed=boot_seed), y_te, pred)
        out["spearman_boot_std"] = _or_nan(
            partial(bootstrap_std, metric=spearman, n_boot=ctx.n_boot, seed=boot_seed), y_te, pred
        )
    return out


def _or_nan(metric: Callable[[np.ndarray, np.ndarray], float], y_true: np.ndarray, y_pred: np.ndarray) -> float:
    try:
        return metric(y_true, y_pred)
    except NumericError as e:
        logger.warning("degenerate sweep cell, recording NaN: %s", e)
        return float("nan")


def _run_cell(cell: tuple, ctx: SweepContext, family: str) -> dict:
    param, rep, cell_seed = cell
    transform = make_transform(family, param, cell_seed, ctx.color_model)
    scores = score_transform(ctx, transform, boot_seed=cell_seed)
    logger.debug("%s param=%s rep=%d: r2 %.4f", family, param, rep, scores["r2"])
    return {"param": param, "rep": rep, **scores}


def cell_seed(seed: int, param_index: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, param_index, rep]).generate_state(1, np.uint64)[0] >> 1)


def perturbation_sweep(
    net: ConvNet,
    source: SiteSource,
    train_ids: Sequence[str],
    test_ids: Sequence[str],
    family: str,
    grid: Sequence,
    repetitions: int = 1,
    mode: str = "1x1",
    seed: int = 0,
    head_seed: int = 0,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    folds: int = DEFAULT_FOLDS,
    color_model: ColorClusterModel | None = None,
    n_boot: int = 0,
    jobs: int = 1,
) -> SweepResult:
    """Score every (parameter, repetition) cell of a perturbation family against the baseline."""
    if family not in FAMILIES:
        raise UsageError(f"unknown perturbation family {family!r}; valid: {', '.join(FAMILIES)}")
    check_mode(mode)
    if repetitions < 1:
        raise DataError(f"repetitions must be >= 1, got {repetitions}")
    ctx = SweepContext(
        net=net,
        source=source,
        train_ids=tuple(train_ids),
        test_ids=tuple(test_ids),
        mode=mode,
        lambda_grid=tuple(lambda_grid),
        folds=folds,
        head_seed=head_seed,
        color_model=color_model,
        n_boot=n_boot,
    )
    baseline = score_transform(ctx, None, boot_seed=seed)
    cells = [(param, rep, cell_seed(seed, i, rep)) for i, param in enumerate(grid) for rep in range(repetitions)]
    logger.info("%s sweep: %d cells over %d params", family, len(cells), len(grid))
    rows = map_ordered(partial(_run_cell, ctx=ctx, family=family), cells, jobs)
    return SweepResult(family=family, mode=mode, baseline=baseline, cells=pd.DataFrame(rows))
