"""Feature extraction glue between site sources, the network and the ridge head.

Three input modes:

- ``1x1``: the centre 224 px tile of each site
- ``3x3``: the 672 px mosaic through the fully convolutional network
- ``3x3-avg``: the mean of the nine per-tile feature vectors

A transform, when given, is called as ``transform(tile, key)`` on every image the mode
feeds to the network; ``key`` is ``"<site_id>/<position>"`` so randomised transforms can
draw a per-image stream.
"""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from functools import partial
from typing import Callable, Protocol

import numpy as np

from .errors import DataError, UsageError
from .head import RidgeModel, pool_features, predict
from .model import ConvNet
from .raster import GRID, RasterTile, nightlight_label
from .synthgen import SyntheticSite
from .workers import map_ordered

logger = logging.getLogger(__name__)

MODES = ("1x1", "3x3", "3x3-avg")
Transform = Callable[[RasterTile, str], RasterTile]


class SiteSource(Protocol):
    site_ids: list[str]

    def mosaic(self, site_id: str) -> RasterTile: ...

    def tiles(self, site_id: str) -> list[list[RasterTile]]: ...

    def center(self, site_id: str) -> RasterTile: ...

    def wealth(self, site_ids: list[str] | None = None) -> np.ndarray: ...

    def phases(self, site_ids: list[str] | None = None) -> np.ndarray: ...

    def label(self, site_id: str, noise_floor: float = 0.5) -> float: ...


class MemorySites:
    """SiteSource over in-memory SyntheticSite objects."""

    def __init__(self, sites: Sequence[SyntheticSite]):
        self.sites = {s.site_id: s for s in sites}
        if len(self.sites) != len(sites):
            raise DataError("duplicate site ids")

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def site_ids(self) -> list[str]:
        return list(self.sites)

    def _get(self, site_id: str) -> SyntheticSite:
        try:
            return self.sites[site_id]
        except KeyError:
            raise DataError(f"unknown site {site_id!r}") from None

    def mosaic(self, site_id):
        return self._get(site_id).mosaic

    def tiles(self, site_id):
        return self._get(site_id).tiles

    def center(self, site_id):
        return self._get(site_id).center

    def wealth(self, site_ids=None):
        ids = self.site_ids if site_ids is None else site_ids
        return np.array([self._get(s).latent_wealth for s in ids], dtype=np.float64)

    def phases(self, site_ids=None):
        ids = self.site_ids if site_ids is None else site_ids
        return np.array([self._get(s).phase for s in ids], dtype=str)

    def label(self, site_id, noise_floor=0.5):
        return nightlight_label(self._get(site_id).nightlight, noise_floor)


class CenterTiles(Sequence):
    """Lazy indexable of centre tiles, for training without holding the corpus in memory."""

    def __init__(self, source: SiteSource, site_ids: Sequence[str]):
        self.source = source
        self.site_ids = list(site_ids)

    def __len__(self) -> int:
        return len(self.site_ids)

    def __getitem__(self, i):
        return self.source.center(self.site_ids[i])


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise UsageError(f"unknown feature mode {mode!r}; valid modes: {', '.join(MODES)}")
    return mode


def _apply(transform: Transform | None, tile: RasterTile, key: str) -> RasterTile:
    return tile if transform is None else transform(tile, key)


def model_inputs(source: SiteSource, site_id: str, mode: str, transform: Transform | None = None) -> list[RasterTile]:
    """The image(s) the network sees for one site, transformed."""
    if mode == "1x1":
        return [_apply(transform, source.center(site_id), f"{site_id}/center")]
    if mode == "3x3":
        return [_apply(transform, source.mosaic(site_id), f"{site_id}/mosaic")]
    grid = source.tiles(site_id)
    return [_apply(transform, grid[r][c], f"{site_id}/{r}{c}") for r in range(GRID) for c in range(GRID)]


def _chunk_features(site_ids: list[str], net: ConvNet, source: SiteSource, mode: str, transform) -> np.ndarray:
    if mode == "1x1":
        tiles = [model_inputs(source, s, mode, transform)[0] for s in site_ids]
        return net.features(tiles)
    if mode == "3x3":
        return np.stack([net.forward(model_inputs(source, s, mode, transform)[0])[0] for s in site_ids])
    return np.stack([pool_features(net.features(model_inputs(source, s, mode, transform))) for s in site_ids])


def extract_features(
    net: ConvNet,
    source: SiteSource,
    site_ids: Sequence[str],
    mode: str = "1x1",
    transform: Transform | None = None,
    jobs: int = 1,
    chunk: int = 16,
) -> np.ndarray:
    """N×D feature matrix in the order of `site_ids`."""
    check_mode(mode)
    ids = list(site_ids)
    if not ids:
        return np.zeros((0, net.feature_dim))
    chunks = [ids[i:i + chunk] for i in range(0, len(ids), chunk)]
    fn = partial(_chunk_features, net=net, source=source, mode=mode, transform=transform)
    return np.concatenate(map_ordered(fn, chunks, jobs), axis=0)


@dataclass
class Pipeline:
    """Frozen network + fitted head + input mode."""

    net: ConvNet
    head: RidgeModel
    mode: str = "1x1"

    def predict_sites(self, source: SiteSource, site_ids: Sequence[str], transform: Transform | None = None, jobs: int = 1) -> np.ndarray:
        return predict(self.head, extract_features(self.net, source, site_ids, self.mode, transform, jobs))


def split_sites(site_ids: Sequence[str], test_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Seeded held-out split; both parts keep the input order."""
    ids = list(site_ids)
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = max(1, int(round(len(ids) * test_fraction)))
    if n_test >= len(ids):
        raise DataError(f"{len(ids)} sites cannot be split with test fraction {test_fraction}")
    chosen = set(np.random.default_rng(seed).choice(len(ids), size=n_test, replace=False).tolist())
    train = [s for i, s in enumerate(ids) if i not in chosen]
    test = [s for i, s in enumerate(ids) if i in chosen]
    return train, test
