"""
Unit tests for wealth_xai.perturb

Tests cover:
- Grid shuffling (permutation, determinism, divisibility)
- Gaussian frequency filters against a spatial convolution reference
- L*a*b* colour clustering and the two ablations
- The perturbation sweep harness
"""
import numpy as np
import pytest
from scipy import ndimage

from wealth_xai.errors import DataError, UsageError
from wealth_xai.model import Conv2d, ConvNet, GlobalAvgPool, Linear
from wealth_xai.perturb import (
    ColorClusterModel,
    FilterSpec,
    ShuffleSpec,
    ablate_chromaticity,
    ablate_gray,
    assign_clusters,
    cutoff,
    elbow,
    filter_pixels,
    fit_color_clusters,
    freq_filter,
    grid_shuffle,
    image_seed,
    make_transform,
    perturbation_sweep,
    transfer,
)
from wealth_xai.raster import RasterTile, lab_array_to_rgb, rgb_array_to_lab


def rgb_mean_net(sides=(224, 672)):
    """Features are the mean R, G, B of the image; output is their sum."""
    conv = Conv2d(np.eye(3).reshape(1, 1, 3, 3), np.zeros(3), padding=0, name="conv")
    return ConvNet([conv, GlobalAvgPool("gap")], Linear(np.ones(3), 0.0), input_sides=sides)


def periodic_gaussian_blur(img, sigma):
    """Direct circular convolution with a sampled, periodised, unit-mass Gaussian."""
    n = img.shape[0]
    offsets = np.arange(n) - n // 2
    kernel = sum(np.exp(-((offsets + m * n) ** 2) / (2 * sigma**2)) for m in range(-2, 3))
    kernel = kernel / (np.sqrt(2 * np.pi) * sigma)
    out = np.zeros_like(img)
    for i, di in enumerate(offsets):
        for j, dj in enumerate(offsets):
            out += kernel[i] * kernel[j] * np.roll(img, (di, dj), axis=(0, 1))
    return out


def blob_tiles():
    """Three single-colour tiles on an equilateral triangle in the (a*, b*) plane."""
    angles = np.deg2rad([90.0, 210.0, 330.0])
    lab = np.stack([np.full(3, 50.0), 20 * np.cos(angles), 20 * np.sin(angles)], axis=1)
    rgb = lab_array_to_rgb(lab)
    return [RasterTile(np.broadcast_to(c, (8, 8, 3))) for c in rgb]


class TestGridShuffle:
    """Tests for grid_shuffle"""

    def test_whole_image_tile_is_identity(self, rng):
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        np.testing.assert_array_equal(grid_shuffle(tile, ShuffleSpec(16, rng_seed=5)).pixels, tile.pixels)

    def test_pixel_multiset_preserved(self, rng):
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        out = grid_shuffle(tile, ShuffleSpec(4, rng_seed=1))
        for c in range(3):
            np.testing.assert_array_equal(np.sort(out.pixels[..., c].ravel()), np.sort(tile.pixels[..., c].ravel()))

    def test_blocks_move_intact(self, rng):
        tile = RasterTile(rng.uniform(0, 1, (8, 8, 3)))
        out = grid_shuffle(tile, ShuffleSpec(4, rng_seed=2)).pixels
        originals = [tile.pixels[r:r + 4, c:c + 4] for r in (0, 4) for c in (0, 4)]
        for r in (0, 4):
            for c in (0, 4):
                assert any(np.array_equal(out[r:r + 4, c:c + 4], b) for b in originals)

    def test_fixed_seed_deterministic(self, rng):
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        a = grid_shuffle(tile, ShuffleSpec(2, rng_seed=9))
        b = grid_shuffle(tile, ShuffleSpec(2, rng_seed=9))
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_non_dividing_tile_rejected(self, rng):
        with pytest.raises(DataError, match="does not divide"):
            grid_shuffle(RasterTile(rng.uniform(0, 1, (16, 16, 3))), ShuffleSpec(3))

    def test_image_seed_depends_on_key(self):
        assert image_seed(1, "site_00000/center") != image_seed(1, "site_00001/center")
        assert image_seed(1, "site_00000/center") == image_seed(1, "site_00000/center")


class TestFrequencyFilter:
    """Tests for the Gaussian frequency filters"""

    def test_cutoff_relation(self):
        assert cutoff(224, 2.0) == pytest.approx(224 / (4 * np.pi))

    def test_tiny_sigma_lowpass_is_identity(self, rng):
        tile = RasterTile(rng.uniform(0, 1, (32, 32, 3)))
        out = freq_filter(tile, FilterSpec("low", 0.01))
        np.testing.assert_allclose(out.pixels, tile.pixels, atol=1e-3)

    def test_low_plus_high_complement(self, rng):
        x = rng.uniform(0, 1, (32, 32, 3))
        low = filter_pixels(x, FilterSpec("low", 3.0))
        high = filter_pixels(x, FilterSpec("high", 3.0))
        np.testing.assert_allclose(low + high - 0.5, x, atol=1e-5)

    def test_lowpass_matches_spatial_convolution(self, rng):
        x = rng.uniform(0, 1, (32, 32, 3))
        np.testing.assert_allclose(filter_pixels(x, FilterSpec("low", 2.0)), periodic_gaussian_blur(x, 2.0), atol=1e-4)

    def test_lowpass_matches_scipy_gaussian(self, rng):
        x = rng.uniform(0, 1, (64, 64, 3))
        expected = ndimage.gaussian_filter(x, sigma=(2.0, 2.0, 0.0), mode="grid-wrap", truncate=6.0)
        np.testing.assert_allclose(filter_pixels(x, FilterSpec("low", 2.0)), expected, atol=1e-6)

    def test_bandpass_transfer_in_unit_interval(self):
        for sigma in (0.5, 2.0, 8.0):
            h = transfer(FilterSpec("band", sigma), 64)
            assert h.min() >= 0.0 and h.max() <= 1.0

    def test_highpass_of_constant_is_mid_gray(self):
        out = freq_filter(RasterTile(np.full((16, 16, 3), 0.8)), FilterSpec("high", 2.0))
        np.testing.assert_allclose(out.pixels, 0.5, atol=1e-6)

    def test_output_clamped(self, rng):
        out = freq_filter(RasterTile(rng.uniform(0, 1, (32, 32, 3))), FilterSpec("band", 0.5))
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_invalid_specs(self):
        with pytest.raises(DataError, match="sigma_px"):
            FilterSpec("low", 0.0)
        with pytest.raises(DataError, match="unknown filter kind"):
            FilterSpec("notch", 1.0)


class TestColorClusters:
    """Tests for fit_color_clusters and the elbow rule"""

    def test_three_blobs(self):
        tiles = blob_tiles()
        model = fit_color_clusters(tiles, sample_per_image=50, seed=0)
        assert model.k == 3
        expected = [rgb_array_to_lab(t.pixels[0, 0].astype(np.float64)) for t in tiles]
        for e in expected:
            assert np.min(np.linalg.norm(model.centers - e, axis=1)) < 1e-2

    def test_centers_sorted_darkest_first(self):
        model = fit_color_clusters(blob_tiles(), sample_per_image=50, seed=0)
        assert np.all(np.diff(model.centers[:, 0]) >= 0)

    def test_single_colour_gives_one_cluster(self):
        tile = RasterTile(np.broadcast_to([0.6, 0.4, 0.2], (8, 8, 3)))
        assert fit_color_clusters([tile, tile], sample_per_image=20).k == 1

    def test_deterministic(self, small_sites):
        tiles = [s.center for s in small_sites[:3]]
        a = fit_color_clusters(tiles, sample_per_image=200, seed=4)
        b = fit_color_clusters(tiles, sample_per_image=200, seed=4)
        assert a.k == b.k
        np.testing.assert_array_equal(a.centers, b.centers)

    def test_elbow_rule(self):
        assert elbow({1: 100.0, 2: 60.0, 3: 10.0, 4: 8.0, 5: 7.0}) == 3
        assert elbow({1: 0.0, 2: 0.0, 3: 0.0}) == 1

    def test_json_round_trip(self):
        model = fit_color_clusters(blob_tiles(), sample_per_image=50)
        back = ColorClusterModel.from_json(model.to_json())
        assert back.k == model.k
        np.testing.assert_allclose(back.centers, model.centers)

    def test_empty_corpus(self):
        with pytest.raises(DataError, match="at least one tile"):
            fit_color_clusters([])


class TestAblation:
    """Tests for ablate_chromaticity and ablate_gray"""

    @pytest.fixture
    def scene(self, small_sites):
        tile = RasterTile(small_sites[0].center.pixels[:32, :32])
        model = fit_color_clusters([s.center for s in small_sites[:4]], k_candidates=(1, 2, 3, 4), sample_per_image=300)
        return tile, model

    def test_kept_sets_partition_the_image(self, scene):
        tile, model = scene
        labels = assign_clusters(rgb_array_to_lab(tile.pixels.astype(np.float64)), model)
        union = np.zeros(labels.shape, dtype=int)
        for k in range(model.k):
            union += labels == k
        assert np.all(union == 1)

    def test_remove_all_gives_grayscale_with_same_lightness(self, scene):
        tile, model = scene
        out = ablate_chromaticity(tile, model, keep=None)
        lab_in = rgb_array_to_lab(tile.pixels.astype(np.float64))
        lab_out = rgb_array_to_lab(out.pixels.astype(np.float64))
        np.testing.assert_allclose(lab_out[..., 0], lab_in[..., 0], atol=1e-3)
        np.testing.assert_allclose(lab_out[..., 1:], 0.0, atol=1e-3)

    def test_achromatic_pixels_unchanged(self, scene):
        _, model = scene
        gray = RasterTile(np.broadcast_to(np.linspace(0, 1, 16)[:, None, None], (16, 16, 3)))
        np.testing.assert_allclose(ablate_chromaticity(gray, model, keep=None).pixels, gray.pixels, atol=1e-5)

    def test_gray_keep_none_and_keep_all(self, scene):
        tile, model = scene
        np.testing.assert_array_equal(ablate_gray(tile, model, keep=None).pixels, 0.5)
        np.testing.assert_array_equal(ablate_gray(tile, model, keep=range(model.k)).pixels, tile.pixels)

    def test_both_ablations_keep_the_same_pixels(self, scene):
        tile, model = scene
        mask = assign_clusters(rgb_array_to_lab(tile.pixels.astype(np.float64)), model) == 0
        chroma = ablate_chromaticity(tile, model, keep=0).pixels
        gray = ablate_gray(tile, model, keep=0).pixels
        np.testing.assert_array_equal(chroma[mask], tile.pixels[mask])
        np.testing.assert_array_equal(gray[mask], tile.pixels[mask])
        np.testing.assert_array_equal(gray[~mask], 0.5)

    def test_bad_cluster_id(self, scene):
        tile, model = scene
        with pytest.raises(DataError, match="out of range"):
            ablate_gray(tile, model, keep=model.k)


class TestPerturbationSweep:
    """Tests for perturbation_sweep"""

    def sweep(self, source, family, grid, **kwargs):
        ids = source.site_ids
        return perturbation_sweep(
            rgb_mean_net(), source, ids[:8], ids[8:], family, grid, lambda_grid=(1e-3,), **kwargs
        )

    def test_identity_reproduces_baseline(self, small_source):
        result = self.sweep(small_source, "identity", [None])
        assert result.cells["r2"].iloc[0] == result.baseline["r2"]
        assert result.cells["spearman"].iloc[0] == result.baseline["spearman"]

    def test_single_tile_shuffle_equals_baseline(self, small_source):
        result = self.sweep(small_source, "shuffle", [224], repetitions=2)
        assert result.cells["r2"].tolist() == [result.baseline["r2"]] * 2

    def test_pixel_shuffle_invisible_to_pointwise_features(self, small_source):
        """Global colour means do not depend on pixel positions"""
        result = self.sweep(small_source, "shuffle", [1])
        assert result.cells["r2"].iloc[0] == pytest.approx(result.baseline["r2"], abs=1e-6)

    def test_summary_layout(self, small_source, tmp_path):
        result = self.sweep(small_source, "lowpass", [1.0, 8.0], repetitions=2)
        summary = result.summary()
        assert set(summary["metric"]) == {"r2", "spearman"}
        assert summary["param"].tolist() == [1.0, 1.0, 8.0, 8.0]
        assert result.curve("r2").shape == (2, 2)
        assert result.write_csv(tmp_path / "filter.csv").exists()

    def test_unknown_family(self, small_source):
        with pytest.raises(UsageError, match="unknown perturbation family"):
            self.sweep(small_source, "rotate", [1])

    def test_color_family_needs_model(self):
        with pytest.raises(DataError, match="colour cluster model"):
            make_transform("color-gray", 0)

    def test_collapsed_predictions_record_nan(self, small_source):
        """A head with constant predictions leaves Spearman undefined without failing the sweep"""
        blind = ConvNet(
            [Conv2d(np.zeros((1, 1, 3, 3)), np.zeros(3), padding=0, name="conv"), GlobalAvgPool("gap")],
            Linear(np.ones(3), 0.0),
            input_sides=(224, 672),
        )
        ids = small_source.site_ids
        result = perturbation_sweep(blind, small_source, ids[:8], ids[8:], "shuffle", [56], lambda_grid=(1e-3,))
        assert np.isnan(result.baseline["spearman"])
        assert np.isnan(result.cells["spearman"].iloc[0])
        assert np.isfinite(result.cells["r2"].iloc[0])
