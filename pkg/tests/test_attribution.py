"""
Unit tests for wealth_xai.attribution

Tests cover:
- Occlusion maps against an analytic linear model
- Grad-CAM on single-channel and permuted networks
- Guided backpropagation and guided Grad-CAM composition
- Attribution/output correlation
- Raw map and overlay export
"""
import json

import numpy as np
import pytest

from wealth_xai.attribution import (
    AttributionMap,
    OcclusionSpec,
    attribute,
    attribution_output_correlation,
    grad_cam,
    guided_backprop,
    guided_grad_cam,
    heat_rgb,
    occlusion_map,
    read_map_raw,
    upsample,
    write_map_raw,
    write_overlay_png,
)
from wealth_xai.errors import DataError, NumericError
from wealth_xai.model import Conv2d, ConvNet, GlobalAvgPool, Linear, ReLU
from wealth_xai.raster import RasterTile


def mean_red_net(side=32):
    conv = Conv2d(np.array([1.0, 0.0, 0.0]).reshape(1, 1, 3, 1), np.zeros(1), padding=0, name="conv")
    return ConvNet([conv, GlobalAvgPool("gap")], Linear(np.ones(1), 0.0), input_sides=(side,))


def single_channel_net(head_weight=2.0, seed=0):
    rng = np.random.default_rng(seed)
    conv = Conv2d(rng.normal(0, 0.5, (3, 3, 3, 1)), np.array([0.1]), name="conv")
    return ConvNet([conv, ReLU("relu"), GlobalAvgPool("gap")], Linear(np.array([head_weight]), 0.0), input_sides=(16,))


def permute_last_block(net, perm):
    """Same function, channels of conv2 (and the head) reordered."""
    clone = net.copy()
    conv2 = clone.layers[clone.layer_index("conv2")]
    conv2.weight = conv2.weight[..., perm].copy()
    conv2.bias = conv2.bias[perm].copy()
    clone.head.weight = clone.head.weight[perm].copy()
    return clone


class TestOcclusion:
    """Tests for occlusion_map"""

    def test_matches_analytic_mean_red(self, rng):
        tile = RasterTile(rng.uniform(0, 1, (32, 32, 3)))
        spec = OcclusionSpec(patch_px=8, stride_px=4)
        amap = occlusion_map(mean_red_net(), tile, spec)
        assert amap.values.shape == (7, 7)
        red = tile.pixels[..., 0].astype(np.float64)
        for i in range(7):
            for j in range(7):
                patch = red[4 * i:4 * i + 8, 4 * j:4 * j + 8]
                expected = (patch.mean() - 0.5) * 64 / 1024
                assert amap.values[i, j] == pytest.approx(expected, abs=1e-6)

    def test_constant_model_gives_zero_map(self, tiny_net, rng):
        net = tiny_net()
        net.head.weight[:] = 0.0
        amap = occlusion_map(net, RasterTile(rng.uniform(0, 1, (16, 16, 3))), OcclusionSpec(4, 4))
        assert not amap.values.any()

    def test_no_op_occlusion_is_zero(self, tiny_net):
        amap = occlusion_map(tiny_net(), RasterTile(np.full((16, 16, 3), 0.5)), OcclusionSpec(4, 2))
        assert np.abs(amap.values).max() < 1e-12

    def test_alignment_metadata(self, rng):
        amap = occlusion_map(mean_red_net(), RasterTile(rng.uniform(0, 1, (32, 32, 3))), OcclusionSpec(8, 4))
        assert amap.scale == 4.0
        assert amap.offset == 3.5
        assert amap.signed

    def test_patch_larger_than_tile(self, rng):
        with pytest.raises(DataError, match="does not fit"):
            occlusion_map(mean_red_net(), RasterTile(rng.uniform(0, 1, (32, 32, 3))), OcclusionSpec(64, 8))

    def test_invalid_spec(self):
        with pytest.raises(DataError, match="patch >= stride"):
            OcclusionSpec(patch_px=4, stride_px=8)


class TestGradCam:
    """Tests for grad_cam"""

    def test_single_channel_is_scaled_activation(self, rng):
        net = single_channel_net(head_weight=2.0)
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        acts, _ = net.layer_activations_and_gradients(tile, "relu")
        cam = grad_cam(net, tile)
        np.testing.assert_allclose(cam.values, acts[..., 0] * 2.0 / 256, rtol=1e-12)

    def test_nonnegative(self, tiny_net, rng):
        cam = grad_cam(tiny_net(), RasterTile(rng.uniform(0, 1, (16, 16, 3))))
        assert cam.values.min() >= 0.0
        assert cam.values.shape == (8, 8)

    def test_negated_head_flips_the_combination(self, tiny_net, rng):
        net = tiny_net()
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        acts, grads = net.layer_activations_and_gradients(tile, "relu2")
        combination = acts @ grads.mean(axis=(0, 1))
        flipped = net.copy()
        flipped.head.weight *= -1.0
        np.testing.assert_allclose(grad_cam(net, tile).values, np.maximum(combination, 0.0), atol=1e-12)
        np.testing.assert_allclose(grad_cam(flipped, tile).values, np.maximum(-combination, 0.0), atol=1e-12)

    def test_invariant_to_channel_permutation(self, tiny_net, rng):
        net = tiny_net()
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        permuted = permute_last_block(net, [3, 0, 5, 1, 4, 2])
        np.testing.assert_allclose(grad_cam(permuted, tile).values, grad_cam(net, tile).values, atol=1e-12)

    def test_layer_without_spatial_extent(self, tiny_net, rng):
        with pytest.raises(DataError, match="spatial extent"):
            grad_cam(tiny_net(), RasterTile(rng.uniform(0, 1, (16, 16, 3))), layer="gap")


class TestGuided:
    """Tests for guided_backprop and guided_grad_cam"""

    def test_guided_map_reduces_channels_by_max_abs(self, tiny_net, rng):
        net = tiny_net()
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        raw = net.input_gradient(tile, guided=True)
        np.testing.assert_allclose(guided_backprop(net, tile).values, np.abs(raw).max(axis=-1))

    def test_no_relu_equals_plain_gradient(self, tiny_net, rng):
        net = tiny_net(relu=False)
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        np.testing.assert_allclose(guided_backprop(net, tile).values, np.abs(net.input_gradient(tile)).max(axis=-1))

    def test_all_positive_signals_equal_plain_gradient(self, rng):
        """With positive weights, biases and inputs no ReLU ever gates, so the guided rule changes nothing"""
        layers = [
            Conv2d(rng.uniform(0.1, 1.0, (1, 1, 3, 4)), np.full(4, 0.1), padding=0, name="conv1"),
            ReLU("relu1"),
            Conv2d(rng.uniform(0.1, 1.0, (3, 3, 4, 2)), np.full(2, 0.1), name="conv2"),
            ReLU("relu2"),
            GlobalAvgPool("gap"),
        ]
        net = ConvNet(layers, Linear(np.array([0.5, 2.0]), 0.0), input_sides=(16,))
        tile = RasterTile(rng.uniform(0.1, 1.0, (16, 16, 3)))
        plain = net.input_gradient(tile)
        assert (plain > 0).all()
        np.testing.assert_array_equal(net.input_gradient(tile, guided=True), plain)
        np.testing.assert_allclose(guided_backprop(net, tile).values, plain.max(axis=-1))

    def test_zero_cam_annihilates(self, tiny_net, rng):
        net = tiny_net()
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        zero = AttributionMap(np.zeros((8, 8)), "gradcam")
        assert not guided_grad_cam(net, tile, cam=zero).values.any()

    def test_unit_cam_returns_guided_map(self, tiny_net, rng):
        net = tiny_net()
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        ones = AttributionMap(np.ones((8, 8)), "gradcam")
        np.testing.assert_allclose(guided_grad_cam(net, tile, cam=ones).values, guided_backprop(net, tile).values)

    def test_product_definition(self, tiny_net, rng):
        net = tiny_net()
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        combined = guided_grad_cam(net, tile).values
        bound = upsample(grad_cam(net, tile).values, 16) * guided_backprop(net, tile).values
        assert np.all(np.abs(combined) <= np.abs(bound) + 1e-15)

    def test_upsample_constant_and_corners(self, rng):
        np.testing.assert_allclose(upsample(np.full((4, 4), 2.5), 16), 2.5)
        small = rng.standard_normal((4, 4))
        big = upsample(small, 13)
        assert big.shape == (13, 13)
        assert big[0, 0] == pytest.approx(small[0, 0])
        assert big[-1, -1] == pytest.approx(small[-1, -1])

    def test_attribute_dispatch(self, tiny_net, rng):
        net = tiny_net()
        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        assert attribute(net, tile, "gradcam").method == "gradcam"
        assert attribute(net, tile, "occlusion", OcclusionSpec(4, 4)).values.shape == (4, 4)
        with pytest.raises(DataError, match="unknown attribution method"):
            attribute(net, tile, "lime")


class TestCorrelation:
    """Tests for attribution_output_correlation"""

    def test_proportional_sums(self):
        maps = [np.full((2, 2), v) for v in (1.0, 2.0, 5.0, 3.0)]
        assert attribution_output_correlation(maps, [4.0, 8.0, 20.0, 12.0]) == pytest.approx(1.0)

    def test_direct_formula(self, rng):
        maps = [rng.standard_normal((3, 3)) for _ in range(6)]
        out = rng.standard_normal(6)
        s = np.array([m.sum() for m in maps])
        expected = np.sum((s - s.mean()) * (out - out.mean())) / np.sqrt(
            np.sum((s - s.mean()) ** 2) * np.sum((out - out.mean()) ** 2)
        )
        assert attribution_output_correlation(maps, out) == pytest.approx(expected, abs=1e-10)

    def test_accepts_attribution_maps(self):
        maps = [AttributionMap(np.full((2, 2), v), "gradcam") for v in (1.0, 2.0, 3.0)]
        assert attribution_output_correlation(maps, [1.0, 2.0, 3.0]) == pytest.approx(1.0)

    def test_too_few_sites(self):
        with pytest.raises(DataError, match="at least 3"):
            attribution_output_correlation([np.ones(1), np.zeros(1)], [1.0, 0.0])

    def test_zero_variance(self):
        with pytest.raises(NumericError, match="zero variance"):
            attribution_output_correlation([np.ones(1)] * 3, [1.0, 2.0, 3.0])


class TestExport:
    """Tests for map files and overlays"""

    def test_raw_map_round_trip(self, tmp_path, rng):
        amap = AttributionMap(rng.standard_normal((5, 5)), "occlusion", scale=8.0, offset=7.5, signed=True)
        path = write_map_raw(amap, tmp_path / "maps" / "site_occlusion.f32")
        meta = json.loads((tmp_path / "maps" / "site_occlusion.f32.json").read_text())
        assert meta["scale"] == 8.0 and meta["height"] == 5
        back = read_map_raw(path)
        np.testing.assert_allclose(back.values, amap.values, rtol=1e-6)
        assert back.signed and back.method == "occlusion"

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "m.f32"
        path.write_bytes(b"\x00" * 16)
        with pytest.raises(DataError, match="cannot read attribution map"):
            read_map_raw(path)

    def test_heat_range(self, rng):
        for signed in (False, True):
            heat = heat_rgb(rng.standard_normal((4, 4)), signed=signed)
            assert heat.shape == (4, 4, 3)
            assert heat.min() >= 0.0 and heat.max() <= 1.0

    def test_overlay_png(self, tmp_path, rng):
        from PIL import Image

        tile = RasterTile(rng.uniform(0, 1, (16, 16, 3)))
        path = write_overlay_png(tile, AttributionMap(rng.uniform(0, 1, (4, 4)), "gradcam"), tmp_path / "o.png")
        with Image.open(path) as im:
            assert im.size == (16, 16)

    def test_non_finite_map_rejected(self):
        with pytest.raises(NumericError, match="non-finite"):
            AttributionMap(np.array([[np.nan]]), "gradcam")
