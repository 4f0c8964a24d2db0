"""Mask strategy tests: partition sanity, determinism, alternation, and
degenerate-shape handling."""
from __future__ import annotations

import numpy as np
import pytest

from waveflow.masks import STRATEGIES, Mask, MaskError, make_mask


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_partitions_nonempty_and_consecutive_steps_differ(strategy):
    shape = (4, 8, 8)
    previous = None
    for step in range(8):
        mask = make_mask(strategy, step, shape)
        assert mask.values.shape == shape
        assert set(np.unique(mask.values)) <= {0.0, 1.0}
        count = mask.values.sum()
        assert 0 < count < mask.values.size
        if previous is not None:
            assert not np.array_equal(mask.values, previous)
        previous = mask.values


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_deterministic(strategy):
    a = make_mask(strategy, 3, (4, 8, 8))
    b = make_mask(strategy, 3, (4, 8, 8))
    np.testing.assert_array_equal(a.values, b.values)


def test_channel_half_first_ceil_half_passes():
    mask = make_mask("channel-half", 0, (5, 2, 2))
    np.testing.assert_array_equal(mask.values[:3], 1.0)
    np.testing.assert_array_equal(mask.values[3:], 0.0)
    flipped = make_mask("channel-half", 1, (5, 2, 2))
    np.testing.assert_array_equal(flipped.values, 1.0 - mask.values)


def test_checkerboard_pattern_and_step_shift():
    mask = make_mask("checkerboard", 0, (1, 4, 4))
    ii, jj = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    np.testing.assert_array_equal(mask.values[0], ((ii + jj) % 2 == 0).astype(float))
    shifted = make_mask("checkerboard", 1, (1, 4, 4))
    np.testing.assert_array_equal(shifted.values, 1.0 - mask.values)


def test_horizontal_top_half_passes_on_even_steps():
    mask = make_mask("horizontal", 0, (2, 4, 6))
    np.testing.assert_array_equal(mask.values[:, :2, :], 1.0)
    np.testing.assert_array_equal(mask.values[:, 2:, :], 0.0)


def test_cycle_window_wraps():
    m0 = make_mask("cycle", 0, (3, 2, 2))
    np.testing.assert_array_equal(m0.values[:, 0, 0], [1.0, 1.0, 0.0])
    m2 = make_mask("cycle", 2, (3, 2, 2))
    np.testing.assert_array_equal(m2.values[:, 0, 0], [1.0, 0.0, 1.0])


def test_radial_center_cells_pass():
    mask = make_mask("radial", 0, (1, 5, 5))
    assert mask.values[0, 2, 2] == 1.0  # center is nearest
    assert mask.values[0, 0, 0] == 0.0  # corner is farthest
    assert 0 < mask.values.sum() < mask.values.size


@pytest.mark.parametrize("strategy", ["checkerboard", "horizontal", "radial"])
def test_degenerate_spatial_falls_back_to_channel_split(strategy):
    # 1x1 plane with several channels: the spatial pattern cannot split it,
    # but a channel split keeps both partitions non-empty.
    previous = None
    for step in range(4):
        mask = make_mask(strategy, step, (3, 1, 1))
        count = mask.values.sum()
        assert 0 < count < 3
        if previous is not None:
            assert not np.array_equal(mask.values, previous)
        previous = mask.values


def test_radial_2x2_all_distances_equal_falls_back():
    mask = make_mask("radial", 0, (4, 2, 2))
    per_channel = mask.values.reshape(4, -1)
    # Fallback splits by channels: each channel all-0 or all-1.
    assert all(len(np.unique(row)) == 1 for row in per_channel)
    assert 0 < mask.values.sum() < mask.values.size


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_single_element_rejected(strategy):
    with pytest.raises(MaskError, match="cannot split one element"):
        make_mask(strategy, 0, (1, 1, 1))


def test_unknown_strategy_rejected():
    with pytest.raises(MaskError, match="unknown"):
        make_mask("diagonal", 0, (2, 4, 4))


def test_channel_strategies_need_two_channels():
    with pytest.raises(MaskError):
        make_mask("channel-half", 0, (1, 8, 8))
    with pytest.raises(MaskError):
        make_mask("cycle", 0, (1, 8, 8))


def test_mask_is_plain_record():
    mask = make_mask("checkerboard", 2, (2, 4, 4))
    assert isinstance(mask, Mask)
    assert mask.strategy == "checkerboard"
    assert mask.step_index == 2
