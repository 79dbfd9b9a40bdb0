"""
Unit tests for wealth_xai.train

Tests cover:
- Adagrad update rule
- Train/validation split and dark-tile downsampling
- Two-stage schedule: history layout, boundary marker, frozen backbone in stage 1
- Degenerate schedules (zero epochs, zero learning rate) and numeric failure
"""
import math

import numpy as np
import pandas as pd
import pytest

from wealth_xai.errors import DataError, NumericError
from wealth_xai.train import (
    HISTORY_COLUMNS,
    Adagrad,
    TrainSchedule,
    downsample_dark,
    read_history,
    split_train_val,
    train_two_stage,
    write_history,
)


def toy_data(n=30, side=8, seed=0):
    """Tiles whose label is a smooth function of their mean brightness."""
    rng = np.random.default_rng(seed)
    tiles = [np.clip(rng.uniform(0, 1, (side, side, 3)) * rng.uniform(0.2, 1.0), 0, 1) for _ in range(n)]
    labels = [2.0 * float(t.mean()) for t in tiles]
    return tiles, labels


class TestAdagrad:
    """Tests for the Adagrad optimizer"""

    def test_first_steps_match_formula(self):
        w = np.array([1.0, -2.0])
        opt = Adagrad({"w": w}, lr=0.1, epsilon=0.0)
        opt.step({"w": np.array([0.5, -4.0])})
        np.testing.assert_allclose(w, [0.9, -1.9])
        opt.step({"w": np.array([0.5, 0.0])})
        np.testing.assert_allclose(w, [0.9 - 0.1 * 0.5 / math.sqrt(0.5), -1.9])

    def test_zero_learning_rate_is_noop(self):
        w = np.array([1.0])
        Adagrad({"w": w}, lr=0.0).step({"w": np.array([3.0])})
        assert w[0] == 1.0


class TestSplit:
    """Tests for split_train_val"""

    def test_ninety_ten(self, rng):
        train, val = split_train_val(100, 0.1, rng)
        assert len(train) == 90 and len(val) == 10
        assert set(train).isdisjoint(val)
        assert set(train) | set(val) == set(range(100))

    def test_single_site_has_no_validation(self, rng):
        train, val = split_train_val(1, 0.1, rng)
        assert train.tolist() == [0] and val.size == 0


class TestDownsampleDark:
    """Tests for downsample_dark"""

    def test_dark_share_and_bright_kept(self, rng):
        labels = np.array([0.0] * 200 + [2.0] * 42)
        idx = downsample_dark(labels, 0.58, rng)
        bright = set(range(200, 242))
        assert bright <= set(idx.tolist())
        n_dark = sum(i < 200 for i in idx)
        assert n_dark == round(0.58 * 42 / 0.42)

    def test_threshold_is_ln2(self, rng):
        labels = np.array([math.log(2.0) - 1e-9, math.log(2.0)])
        idx = downsample_dark(labels, 0.5, rng)
        assert sorted(idx.tolist()) == [0, 1]

    def test_too_few_dark_keeps_all(self, rng):
        labels = np.array([0.0, 2.0, 2.0, 2.0, 2.0])
        assert sorted(downsample_dark(labels, 0.58, rng).tolist()) == [0, 1, 2, 3, 4]

    def test_all_dark_keeps_all(self, rng):
        assert sorted(downsample_dark(np.zeros(6), 0.58, rng).tolist()) == list(range(6))


class TestSchedule:
    """Tests for TrainSchedule validation"""

    def test_negative_epochs_rejected(self):
        with pytest.raises(DataError, match="epoch"):
            TrainSchedule(stage1_epochs=-1)

    def test_dark_fraction_range(self):
        with pytest.raises(DataError, match="dark_fraction"):
            TrainSchedule(dark_fraction=1.0)

    def test_zero_epochs_and_rates_allowed(self):
        sched = TrainSchedule(stage1_epochs=0, stage2_epochs=0, stage1_lr=0.0, stage2_lr=0.0)
        assert sched.to_dict()["stage1_epochs"] == 0


class TestTrainTwoStage:
    """Tests for train_two_stage"""

    def test_zero_epochs_leaves_net_untouched(self, tiny_net):
        net = tiny_net(side=8)
        before = {k: v.copy() for k, v in net.parameters().items()}
        tiles, labels = toy_data()
        result = train_two_stage(net, tiles, labels, TrainSchedule(stage1_epochs=0, stage2_epochs=0))
        assert len(result.history) == 1
        assert result.history.iloc[0]["epoch"] == 0
        for k, v in net.parameters().items():
            np.testing.assert_array_equal(v, before[k])

    def test_history_layout_and_boundary(self, tiny_net):
        tiles, labels = toy_data()
        sched = TrainSchedule(stage1_epochs=3, stage2_epochs=2, batch_size=8, dark_fraction=None, seed=1)
        history = train_two_stage(tiny_net(side=8), tiles, labels, sched).history
        assert list(history.columns) == HISTORY_COLUMNS
        assert history["epoch"].tolist() == [0, 1, 2, 3, 4, 5]
        assert history["stage"].tolist() == [0, 1, 1, 1, 2, 2]
        assert history["boundary"].tolist() == [0, 0, 0, 0, 1, 0]

    def test_stage_one_reduces_loss_and_freezes_backbone(self, tiny_net):
        net = tiny_net(side=8)
        conv_before = net.layers[0].weight.copy()
        tiles, labels = toy_data()
        sched = TrainSchedule(stage1_epochs=30, stage2_epochs=0, stage1_lr=0.05, batch_size=8, dark_fraction=None)
        history = train_two_stage(net, tiles, labels, sched).history
        assert history["train_loss"].iloc[-1] < history["train_loss"].iloc[0]
        np.testing.assert_array_equal(net.layers[0].weight, conv_before)

    def test_single_sample_is_memorised(self, tiny_net):
        """One tile, enough epochs: the head fits it almost exactly"""
        net = tiny_net(side=8)
        tiles, _ = toy_data(n=1)
        _, out = net.forward_batch(tiles[0])
        sched = TrainSchedule(stage1_epochs=300, stage2_epochs=0, stage1_lr=0.2, batch_size=1, dark_fraction=None)
        history = train_two_stage(net, tiles, [float(out[0]) + 1.0], sched).history
        assert history["train_loss"].iloc[0] == pytest.approx(1.0)
        assert history["train_loss"].iloc[-1] < 1e-2 * history["train_loss"].iloc[0]

    def test_zero_stage_two_rate_keeps_stage_one_loss(self, tiny_net):
        tiles, labels = toy_data()
        sched = TrainSchedule(stage1_epochs=2, stage2_epochs=2, stage2_lr=0.0, l2=1.0, batch_size=8)
        history = train_two_stage(tiny_net(side=8), tiles, labels, sched).history
        last_stage1 = history[history["stage"] == 1]["train_loss"].iloc[-1]
        for loss in history[history["stage"] == 2]["train_loss"]:
            assert loss == pytest.approx(last_stage1, rel=1e-12)

    def test_stage_two_moves_backbone(self, tiny_net):
        net = tiny_net(side=8)
        conv_before = net.layers[0].weight.copy()
        tiles, labels = toy_data()
        sched = TrainSchedule(stage1_epochs=1, stage2_epochs=1, stage2_lr=0.01, batch_size=8)
        train_two_stage(net, tiles, labels, sched)
        assert not np.array_equal(net.layers[0].weight, conv_before)

    def test_same_seed_same_history(self, tiny_net):
        tiles, labels = toy_data()
        sched = TrainSchedule(stage1_epochs=2, stage2_epochs=1, batch_size=8, seed=9)
        h1 = train_two_stage(tiny_net(side=8), tiles, labels, sched).history
        h2 = train_two_stage(tiny_net(side=8), tiles, labels, sched).history
        pd.testing.assert_frame_equal(h1, h2)

    def test_non_finite_loss_raises_numeric_error(self, tiny_net):
        net = tiny_net(side=8)
        net.head.weight[:] = np.nan
        tiles, labels = toy_data(n=5)
        with pytest.raises(NumericError, match="stage 0, epoch 0"):
            train_two_stage(net, tiles, labels, TrainSchedule())

    def test_label_count_mismatch(self, tiny_net):
        tiles, labels = toy_data(n=5)
        with pytest.raises(DataError, match="labels"):
            train_two_stage(tiny_net(side=8), tiles, labels[:4], TrainSchedule())

    def test_empty_corpus(self, tiny_net):
        with pytest.raises(DataError, match="empty"):
            train_two_stage(tiny_net(side=8), [], [], TrainSchedule())


class TestHistoryFile:
    """Tests for write_history / read_history"""

    def test_round_trip(self, tmp_path):
        history = pd.DataFrame(
            [{"epoch": 0, "stage": 0, "train_loss": 1.5, "val_loss": 1.25, "boundary": 0}], columns=HISTORY_COLUMNS
        )
        back = read_history(write_history(history, tmp_path / "loss_history.csv"))
        assert back["train_loss"].tolist() == [1.5]

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "loss_history.csv"
        path.write_text("epoch,train_loss\n0,1.0\n")
        with pytest.raises(DataError, match="lacks columns"):
            read_history(path)
