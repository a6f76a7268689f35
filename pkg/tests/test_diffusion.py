import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dv2ir import tensor as T
from dv2ir.conditioning import assemble_condition
from dv2ir.diffusion import (GUIDANCE_PATTERNS, GuidanceScales, SamplerConfig, build_schedule, cfg_compose,
                             forward_diffuse, inference_timesteps, reverse_step, sample, training_loss)
from dv2ir.errors import ConfigError, ContractError, ShapeError
from dv2ir.nn import build_denoiser, expand_input_channels
from dv2ir.tensor import Tensor

from test_nn import TINY

# exact rational product of (1 - beta_i) for the default linear schedule, rounded once to float64
ALPHA_BAR_999 = 4.0358297653756835e-05


# ---------------------------------------------------------------- schedule


def test_single_step_schedule():
    s = build_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.alpha_bar, [0.5])


def test_default_schedule_golden_tail():
    s = build_schedule()
    assert abs(s.alpha_bar[999] - ALPHA_BAR_999) < 1e-10
    assert s.alpha_bar[0] > 0.99
    assert s.alpha_bar[-1] < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400), st.floats(1e-5, 0.2), st.floats(0.0, 0.5))
def test_schedule_properties(n, b0, extra):
    b1 = min(b0 + extra, 0.9)
    s = build_schedule(n, b0, b1)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    prod = np.array([math.prod(1.0 - s.beta[: i + 1]) for i in range(n)])
    np.testing.assert_allclose(s.alpha_bar, prod, rtol=0, atol=1e-12)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_bounds(args):
    with pytest.raises(ConfigError):
        build_schedule(*args)


def test_inference_steps_strictly_increasing_subset():
    s = build_schedule()
    for n in (1, 50, 100, 150, 200, 1000):
        ts = inference_timesteps(s, n)
        assert len(ts) == n and np.all(np.diff(ts) > 0) and ts.min() >= 0 and ts.max() <= 999
    with pytest.raises(ConfigError):
        inference_timesteps(s, 0)


# ---------------------------------------------------------------- forward process


def test_forward_zero_signal():
    s = build_schedule()
    eps = np.random.default_rng(0).standard_normal((2, 1, 4, 4))
    out = forward_diffuse(np.zeros_like(eps), 500, eps, s)
    np.testing.assert_allclose(out, math.sqrt(1 - s.alpha_bar[500]) * eps, rtol=1e-15)


def test_forward_scalar_oracle():
    s = build_schedule(1, 0.75, 0.75)            # alpha_bar = 0.25
    out = forward_diffuse(np.ones(1), 0, np.ones(1), s)
    assert abs(out[0] - (0.5 + math.sqrt(0.75))) < 1e-12
    assert abs(out[0] - 1.3660254) < 1e-7


def test_forward_limit_and_range():
    s = build_schedule(10, 1e-9, 1e-9)
    z0 = np.full(3, 0.7)
    np.testing.assert_allclose(forward_diffuse(z0, 0, np.zeros(3), s), z0, atol=1e-8)
    with pytest.raises(ContractError):
        forward_diffuse(z0, 10, np.zeros(3), s)
    with pytest.raises(ContractError):
        forward_diffuse(z0, -1, np.zeros(3), s)
    with pytest.raises(ShapeError):
        forward_diffuse(z0, 0, np.zeros(4), s)


def test_forward_moments_empirical():
    s = build_schedule()
    n, t, z0 = 100_000, 300, 0.8
    eps = np.random.default_rng(1).standard_normal(n)
    zt = forward_diffuse(np.full(n, z0), t, eps, s)
    mean, var = math.sqrt(s.alpha_bar[t]) * z0, 1 - s.alpha_bar[t]
    assert abs(zt.mean() - mean) < 3 * math.sqrt(var / n)
    # sample variance of a Gaussian has standard deviation var * sqrt(2 / (n - 1))
    assert abs(zt.var(ddof=1) - var) < 3 * var * math.sqrt(2 / (n - 1))


def test_batched_timesteps():
    s = build_schedule()
    z0 = np.ones((3, 1, 2, 2))
    eps = np.zeros_like(z0)
    out = forward_diffuse(z0, np.array([0, 10, 999]), eps, s)
    np.testing.assert_allclose(out[:, 0, 0, 0], np.sqrt(s.alpha_bar[[0, 10, 999]]))


# ---------------------------------------------------------------- loss


def test_loss_with_stub_models():
    s = build_schedule()
    rng = np.random.default_rng(2)
    z0 = Tensor(rng.standard_normal((2, 1, 4, 4)))
    eps = Tensor(rng.standard_normal((2, 1, 4, 4)))
    exact = training_loss(lambda z, t, c: eps, z0, 5, None, eps, s)
    off = training_loss(lambda z, t, c: Tensor(eps.data + 1.0), z0, 5, None, eps, s)
    assert exact.item() == 0.0
    assert off.item() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ShapeError):
        training_loss(lambda z, t, c: Tensor(np.zeros((2, 1, 2, 2))), z0, 5, None, eps, s)


def test_loss_gradient_check():
    s = build_schedule()
    m = build_denoiser(TINY).astype(np.float64)
    expand_input_channels(m, 6)
    m.set_trainable(m.params)
    rng = np.random.default_rng(3)
    z0 = Tensor(rng.standard_normal((2, 1, 8, 8)))
    eps = Tensor(rng.standard_normal((2, 1, 8, 8)))
    cond = Tensor(rng.standard_normal((2, 6, 8, 8)))
    tokens = m.text(["an infrared image", None])

    def build():
        return training_loss(m, z0, np.array([20, 600]), cond, eps, s, m.text(["an infrared image", None]))

    assert tokens.shape == (2, TINY.max_tokens, TINY.token_dim)
    assert T.finite_diff_check(build, list(m.params.values()), max_per_input=3, seed=4) < 1e-4


# ---------------------------------------------------------------- guidance


def test_cfg_scalar_oracle():
    out = cfg_compose(np.array(0.0), np.array(1.0), np.array(2.0), np.array(3.0), GuidanceScales(1.5, 1.5, 7.5))
    assert abs(float(out) - 10.5) < 1e-12


same_shape = arrays(np.float64, (3, 4), elements=st.floats(-100, 100))


@settings(max_examples=200, deadline=None)
@given(same_shape, same_shape, same_shape, same_shape)
def test_cfg_identities(n, v, vs, vst):
    np.testing.assert_allclose(cfg_compose(n, v, vs, vst, GuidanceScales(1, 1, 1)), vst, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(cfg_compose(n, v, vs, vst, GuidanceScales(0, 0, 0)), n)


def test_cfg_shape_and_scale_checks():
    with pytest.raises(ShapeError):
        cfg_compose(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(3), GuidanceScales())
    with pytest.raises(ConfigError):
        GuidanceScales(-1.0, 1.0, 1.0)
    assert GuidanceScales() == GuidanceScales(1.5, 1.5, 7.5)


# ---------------------------------------------------------------- reverse steps


def test_ddim_single_step_recovers_clean_sample():
    s = build_schedule(1, 0.3, 0.3)
    rng = np.random.default_rng(5)
    z0, eps = rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 1, 3, 3))
    zt = forward_diffuse(z0, 0, eps, s)
    np.testing.assert_allclose(reverse_step(zt, eps, 0, -1, s), z0, rtol=0, atol=1e-10)


def test_ddim_intermediate_step_is_consistent():
    s = build_schedule()
    rng = np.random.default_rng(6)
    z0, eps = rng.standard_normal(5), rng.standard_normal(5)
    z_prev = reverse_step(forward_diffuse(z0, 700, eps, s), eps, 700, 300, s)
    np.testing.assert_allclose(z_prev, forward_diffuse(z0, 300, eps, s), atol=1e-10)


def test_reverse_step_contracts():
    s = build_schedule()
    z = np.ones(3)
    a = reverse_step(z, z, 10, 5, s)
    assert a.tobytes() == reverse_step(z, z, 10, 5, s).tobytes()
    with pytest.raises(ContractError):
        reverse_step(z, z, 5, 5, s)
    with pytest.raises(ContractError):
        reverse_step(z, z, 5, 9, s)
    with pytest.raises(ContractError):
        reverse_step(z, z, 10, 5, s, kind="ancestral-ddpm")
    out = reverse_step(z, z, 10, -1, s, kind="ancestral-ddpm")
    assert np.all(np.isfinite(out))
    assert np.all(np.isfinite(reverse_step(z, z, 10, 5, s, kind="ancestral-ddpm", noise=z)))


# ---------------------------------------------------------------- sampler


def _sampler_setup(dtype=np.float32):
    m = build_denoiser(TINY).astype(dtype)
    expand_input_channels(m, 6)
    rng = np.random.default_rng(7)
    for n, t in m.params.items():                # make the condition path non-trivial
        if n == "conv_in_cond.weight":
            t.data = (rng.standard_normal(t.shape) * 0.1).astype(dtype)
    vis = rng.integers(0, 256, (2, 8, 8)).astype(np.uint8)
    seg = rng.integers(0, 6, (2, 8, 8))
    cond = assemble_condition(vis, seg, ["an infrared image of one person at night", "an infrared image"])
    return m, cond


def test_sample_is_deterministic_and_counts_evaluations():
    m, cond = _sampler_setup()
    s = build_schedule()
    cfg = SamplerConfig(steps=7, seed=3)
    m.n_evals = 0
    a = sample(m, cond, GuidanceScales(), cfg, s, (2, 1, 8, 8))
    assert m.n_evals == 4 * 7
    b = sample(m, cond, GuidanceScales(), cfg, s, (2, 1, 8, 8))
    assert a.tobytes() == b.tobytes()


def test_unit_scales_match_single_branch_sampler():
    m, cond = _sampler_setup(np.float64)
    s = build_schedule()
    cfg = SamplerConfig(steps=10, seed=1)
    full = sample(m, cond, GuidanceScales(1, 1, 1), cfg, s, (2, 1, 8, 8))
    single = sample(m, cond, GuidanceScales(1, 1, 1), cfg, s, (2, 1, 8, 8), branches=GUIDANCE_PATTERNS[-1:])
    np.testing.assert_allclose(full, single, rtol=0, atol=1e-10)


@pytest.mark.parametrize("kind", ["deterministic-ddim", "ancestral-ddpm"])
def test_full_and_subsampled_schedules_finish(kind):
    m, cond = _sampler_setup()
    s = build_schedule()
    for steps in (100, s.T):
        out = sample(m, cond, GuidanceScales(), SamplerConfig(kind, steps, 0), s, (2, 1, 8, 8))
        assert out.shape == (2, 1, 8, 8) and np.all(np.isfinite(out))


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(steps=0)
    with pytest.raises(ConfigError):
        SamplerConfig(kind="euler")
