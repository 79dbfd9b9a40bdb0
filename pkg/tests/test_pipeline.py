"""
Unit tests for wealth_xai.pipeline

Tests cover:
- The three feature modes on a pointwise network
- Per-image transform keys
- Pipeline predictions through the ridge head
- Seeded site split and lazy centre tiles
"""
import numpy as np
import pytest

from wealth_xai.errors import DataError, UsageError
from wealth_xai.head import RidgeModel
from wealth_xai.model import Conv2d, ConvNet, GlobalAvgPool, Linear
from wealth_xai.pipeline import (
    CenterTiles,
    MemorySites,
    Pipeline,
    check_mode,
    extract_features,
    model_inputs,
    split_sites,
)
from wealth_xai.raster import RasterTile


def rgb_mean_net():
    """Features are the channel means of the input, at 224 and 672 px."""
    conv = Conv2d(np.eye(3).reshape(1, 1, 3, 3), np.zeros(3), padding=0, name="conv")
    return ConvNet([conv, GlobalAvgPool("gap")], Linear(np.ones(3) / 3, 0.0), input_sides=(224, 672))


class TestModes:
    """Tests for extract_features across input modes"""

    def test_center_mode_is_center_mean(self, small_source):
        ids = small_source.site_ids[:3]
        feats = extract_features(rgb_mean_net(), small_source, ids, "1x1")
        expected = [small_source.center(s).pixels.reshape(-1, 3).mean(axis=0) for s in ids]
        np.testing.assert_allclose(feats, expected, atol=1e-6)

    def test_mosaic_matches_tile_average(self, small_source):
        """Equal-sized tiles: the mosaic mean is the mean of the tile means"""
        ids = small_source.site_ids[:2]
        net = rgb_mean_net()
        fused = extract_features(net, small_source, ids, "3x3")
        averaged = extract_features(net, small_source, ids, "3x3-avg")
        np.testing.assert_allclose(fused, averaged, atol=1e-6)

    def test_order_and_chunking(self, small_source):
        ids = list(reversed(small_source.site_ids))
        net = rgb_mean_net()
        whole = extract_features(net, small_source, ids, "1x1", chunk=100)
        pieces = extract_features(net, small_source, ids, "1x1", chunk=5)
        np.testing.assert_array_equal(whole, pieces)
        assert whole.shape == (12, 3)

    def test_empty_site_list(self, small_source):
        assert extract_features(rgb_mean_net(), small_source, [], "1x1").shape == (0, 3)

    def test_unknown_mode(self, small_source):
        with pytest.raises(UsageError, match="unknown feature mode"):
            extract_features(rgb_mean_net(), small_source, small_source.site_ids[:1], "5x5")
        assert check_mode("3x3-avg") == "3x3-avg"


class TestTransforms:
    """Tests for model_inputs transform keys"""

    def test_keys_per_mode(self, small_source):
        sid = small_source.site_ids[0]
        seen = []

        def record(tile, key):
            seen.append(key)
            return tile

        model_inputs(small_source, sid, "1x1", record)
        model_inputs(small_source, sid, "3x3", record)
        model_inputs(small_source, sid, "3x3-avg", record)
        assert seen[:2] == [f"{sid}/center", f"{sid}/mosaic"]
        assert seen[2:] == [f"{sid}/{r}{c}" for r in range(3) for c in range(3)]

    def test_transform_reaches_network(self, small_source):
        ids = small_source.site_ids[:2]

        def black(tile, key):
            return RasterTile(np.zeros_like(tile.pixels))

        feats = extract_features(rgb_mean_net(), small_source, ids, "3x3-avg", transform=black)
        assert not feats.any()


class TestPipeline:
    """Tests for Pipeline.predict_sites"""

    def test_predictions_through_head(self, small_source):
        ids = small_source.site_ids[:4]
        net = rgb_mean_net()
        head = RidgeModel(np.array([1.0, 0.0, 0.0]), 0.5, 0.1)
        preds = Pipeline(net, head, "1x1").predict_sites(small_source, ids)
        reds = [small_source.center(s).pixels[..., 0].mean() for s in ids]
        np.testing.assert_allclose(preds, np.array(reds) + 0.5, atol=1e-6)


class TestSources:
    """Tests for MemorySites, CenterTiles and split_sites"""

    def test_memory_sites(self, small_sites, small_source):
        assert len(small_source) == 12
        assert small_source.wealth().shape == (12,)
        assert small_source.phases()[0] == small_sites[0].phase
        with pytest.raises(DataError, match="unknown site"):
            small_source.center("nope")

    def test_duplicate_ids(self, small_sites):
        with pytest.raises(DataError, match="duplicate"):
            MemorySites([small_sites[0], small_sites[0]])

    def test_center_tiles(self, small_source):
        ids = small_source.site_ids[3:6]
        tiles = CenterTiles(small_source, ids)
        assert len(tiles) == 3
        assert tiles[1] is small_source.center(ids[1])

    def test_split_is_seeded_and_ordered(self):
        ids = [f"s{i:02d}" for i in range(20)]
        train, test = split_sites(ids, 0.2, seed=5)
        assert (train, test) == split_sites(ids, 0.2, seed=5)
        assert len(test) == 4 and len(train) == 16
        assert sorted(train + test) == ids
        assert train == sorted(train) and test == sorted(test)

    def test_split_limits(self):
        with pytest.raises(DataError, match="test_fraction"):
            split_sites(["a", "b"], 1.0, seed=0)
        with pytest.raises(DataError, match="cannot be split"):
            split_sites(["a"], 0.5, seed=0)
