import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dv2ir.conditioning import (DropoutPolicy, N_CLASSES, apply_patterns, assemble_condition,
                                concat_condition_channels, dropout_conditions, segmap_planes,
                                split_condition_channels)
from dv2ir.errors import ConfigError, ShapeError
from dv2ir.nn import Autoencoder, AutoencoderConfig, build_denoiser, expand_input_channels
from dv2ir.tensor import Tensor

from test_nn import TINY

NESTED = {(False, False, False), (True, False, False), (True, True, False), (True, True, True)}


def full_condition(rng, h=8):
    vis = rng.integers(0, 256, (h, h)).astype(np.uint8)
    seg = rng.integers(0, N_CLASSES + 1, (h, h))
    return assemble_condition(vis, seg, "an infrared image of one tree at noon")


def test_pixel_mode_visible_is_scaled_image():
    rng = np.random.default_rng(0)
    vis = rng.integers(0, 256, (8, 8)).astype(np.uint8)
    cond = assemble_condition(vis, None, None)
    np.testing.assert_array_equal(cond.visible[0], vis / np.float32(127.5) - 1)
    assert cond.visible.min() >= -1 and cond.visible.max() <= 1


def test_segmap_one_hot_planes():
    seg = np.array([[0, 1], [5, 3]])
    planes = segmap_planes(seg)
    assert planes.shape == (N_CLASSES, 2, 2)
    assert planes[0, 0, 1] == 1 and planes[4, 1, 0] == 1 and planes[2, 1, 1] == 1
    assert np.all(planes[:, 0, 0] == -1)             # background lights no plane
    with pytest.raises(ShapeError):
        segmap_planes(np.array([[6]]))


def test_latent_mode_condition_dims():
    ae = Autoencoder(AutoencoderConfig(factor=2, latent_channels=4))
    rng = np.random.default_rng(1)
    vis = rng.integers(0, 256, (8, 8)).astype(np.uint8)
    seg = rng.integers(0, 6, (8, 8))
    cond = assemble_condition(vis, seg, None, ae)
    assert cond.visible.shape == (4, 4, 4)
    assert cond.segmap.shape == (4 * N_CLASSES, 4, 4)
    assert cond.layout == (4, 4 * N_CLASSES)


def test_null_inputs_and_mismatch():
    assert assemble_condition().pattern() == (False, False, False)
    with pytest.raises(ShapeError):
        assemble_condition(np.zeros((8, 8), np.uint8), np.zeros((4, 4), int), None)


def test_dropout_extremes():
    rng = np.random.default_rng(2)
    cond = full_condition(rng)
    for _ in range(50):
        assert dropout_conditions(cond, DropoutPolicy(0, 0, 0), rng) is not None
        assert dropout_conditions(cond, DropoutPolicy(0, 0, 0), rng).pattern() == (True, True, True)
        assert dropout_conditions(cond, DropoutPolicy(1, 0, 0), rng).pattern() == (False, False, False)
    with pytest.raises(ConfigError):
        DropoutPolicy(0.5, 0.4, 0.2)


def test_dropout_frequencies_within_binomial_interval():
    n, p = 100_000, 0.02
    ks = DropoutPolicy().draw(np.random.default_rng(3), n)
    half_width = 2.5758293035489 * math.sqrt(p * (1 - p) / n)   # 99% normal interval
    for k in (0, 1, 2):
        assert abs(np.mean(ks == k) - p) <= half_width


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 0.33), st.floats(0, 0.33), st.floats(0, 0.33))
def test_dropout_stays_on_nested_chain(seed, a, b, c):
    rng = np.random.default_rng(seed)
    cond = full_condition(rng)
    pol = DropoutPolicy(a, b, c)
    for _ in range(20):
        assert dropout_conditions(cond, pol, rng).pattern() in NESTED


def test_batched_dropout_zeroes_rows():
    rng = np.random.default_rng(4)
    vis = rng.integers(1, 256, (4, 8, 8)).astype(np.uint8)
    seg = rng.integers(0, 6, (4, 8, 8))
    cond = assemble_condition(vis, seg, ["a", "b", "c", "d"])
    out = apply_patterns(cond, np.array([0, 1, 2, 3]))
    assert out.caption == [None, None, None, "d"]
    assert np.all(out.visible[0] == 0) and np.any(out.visible[1] != 0)
    assert np.all(out.segmap[1] == 0) and np.all(out.segmap[2] == cond.segmap[2])


def test_concat_layout_and_null_fill():
    rng = np.random.default_rng(5)
    cond = full_condition(rng)
    z = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
    shapes = set()
    for pattern in NESTED:
        out = concat_condition_channels(z, cond.masked(*pattern))
        shapes.add(out.shape)
    assert shapes == {(1, 1 + 1 + N_CLASSES, 8, 8)}
    empty = concat_condition_channels(z, cond.masked(False, False, False))
    np.testing.assert_array_equal(empty[:, 1:], 0)
    full = concat_condition_channels(z, cond)
    zz, vv, ss = split_condition_channels(full, 1)
    assert zz.tobytes() == z.tobytes()
    assert vv[0].tobytes() == cond.visible.tobytes()
    assert ss[0].tobytes() == cond.segmap.astype(np.float32).tobytes()
    with pytest.raises(ShapeError):
        concat_condition_channels(np.zeros((1, 1, 4, 4), np.float32), cond)


def test_zero_init_model_ignores_condition_contents():
    m = build_denoiser(TINY)
    rng = np.random.default_rng(6)
    z = Tensor(rng.standard_normal((1, 1, 8, 8)).astype(np.float32))
    ref = m(z, 3).data
    expand_input_channels(m, 1 + N_CLASSES)
    for pattern in NESTED:
        zin = concat_condition_channels(z, full_condition(rng).masked(*pattern))
        assert m(zin, 3).data.tobytes() == ref.tobytes()
        assert m(zin, 3).shape == z.shape
