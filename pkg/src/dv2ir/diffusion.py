"""Noise schedule, forward noising, the epsilon-prediction loss, DDPM/DDIM reverse
steps and the nested three-condition classifier-free guidance sampler.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .conditioning import ConditionSet, concat_condition_channels
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha_bar: np.ndarray

    def config(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with cumulative products computed in float64."""
    if T < 1:
        raise ConfigError("schedule needs T >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T, beta_start, beta_end, beta, alpha_bar)


@dataclass(frozen=True)
class GuidanceScales:
    s_V: float = 1.5
    s_S: float = 1.5
    s_T: float = 7.5

    def __post_init__(self):
        for v in (self.s_V, self.s_S, self.s_T):
            if not np.isfinite(v) or v < 0:
                raise ConfigError("guidance scales must be finite and non-negative")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "deterministic-ddim"
    steps: int = 100
    seed: int = 0
    clip_denoised: bool = True

    def __post_init__(self):
        if self.kind not in ("deterministic-ddim", "ancestral-ddpm"):
            raise ConfigError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ConfigError("sampler needs at least one step")

    def to_dict(self) -> dict:
        return asdict(self)


def inference_timesteps(sched: NoiseSchedule, steps: int) -> np.ndarray:
    """Uniform-stride, strictly increasing subset of schedule indices."""
    if not 1 <= steps <= sched.T:
        raise ConfigError(f"inference steps must lie in [1, {sched.T}]")
    if steps == 1:
        return np.array([sched.T - 1])
    return np.round(np.linspace(0, sched.T - 1, steps)).astype(np.int64)


def _coef(sched: NoiseSchedule, t, ndim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    ab = sched.alpha_bar[np.asarray(t)]
    shape = (-1,) + (1,) * (ndim - 1)
    return (np.sqrt(ab).reshape(shape).astype(dtype), np.sqrt(1.0 - ab).reshape(shape).astype(dtype))


def _check_t(sched: NoiseSchedule, t) -> None:
    t = np.asarray(t)
    if t.size == 0 or t.min() < 0 or t.max() >= sched.T:
        raise ContractError(f"timestep out of range [0, {sched.T})")


def forward_diffuse(z0, t, eps, sched: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; accepts arrays or Tensors."""
    _check_t(sched, t)
    a = z0.data if isinstance(z0, Tensor) else np.asarray(z0)
    e = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if a.shape != e.shape:
        raise ShapeError(f"noise shape {e.shape} != latent shape {a.shape}")
    s, n = _coef(sched, t, a.ndim, a.dtype) if np.ndim(t) else (
        np.sqrt(sched.alpha_bar[t]).astype(a.dtype), np.sqrt(1.0 - sched.alpha_bar[t]).astype(a.dtype))
    out = s * a + n * e
    return Tensor(out) if isinstance(z0, Tensor) else out


def training_loss(model: Callable, z0: Tensor, t, cond_input: Tensor | None, eps: Tensor,
                  sched: NoiseSchedule, tokens: Tensor | None = None) -> Tensor:
    """mean((eps - model(z_t, t, c))^2).

    ``cond_input`` holds the already dropout-processed condition channels
    (``None`` for an unexpanded model); ``tokens`` the caption embedding.
    """
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    z_t = forward_diffuse(z0, t, eps, sched)
    z_in = z_t if cond_input is None else T.concat([z_t, cond_input], axis=1)
    pred = model(z_in, t, tokens)
    if pred.shape != eps.shape:
        raise ShapeError(f"prediction shape {pred.shape} != noise shape {eps.shape}")
    return T.mean_square(T.sub(eps, pred))


def cfg_compose(e_null, e_v, e_vs, e_vst, scales: GuidanceScales):
    """Nested guidance: null + sV(v - null) + sS(vs - v) + sT(vst - vs), evaluated as written."""
    arrs = [x.data if isinstance(x, Tensor) else np.asarray(x) for x in (e_null, e_v, e_vs, e_vst)]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ShapeError("cfg_compose needs four same-shaped predictions")
    n, v, vs, vst = arrs
    out = n + scales.s_V * (v - n) + scales.s_S * (vs - v) + scales.s_T * (vst - vs)
    return Tensor(out) if isinstance(e_null, Tensor) else out


def reverse_step(z_t: np.ndarray, eps_tilde: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule,
                 kind: str = "deterministic-ddim", noise: np.ndarray | None = None,
                 clip_denoised: bool = False) -> np.ndarray:
    """Move from step ``t`` to ``t_prev``; ``t_prev == -1`` means the clean sample."""
    if not t > t_prev >= -1:
        raise ContractError(f"need t > t_prev >= -1, got t={t}, t_prev={t_prev}")
    _check_t(sched, t)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev] if t_prev >= 0 else 1.0
    x0 = (z_t - np.sqrt(1.0 - ab_t) * eps_tilde) / np.sqrt(ab_t)
    if clip_denoised:
        x0 = np.clip(x0, -1.0, 1.0)
    if kind == "deterministic-ddim":
        if t_prev < 0:
            return x0.astype(z_t.dtype)
        if clip_denoised:
            eps_tilde = (z_t - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t)
        return (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_tilde).astype(z_t.dtype)
    if kind != "ancestral-ddpm":
        raise ConfigError(f"unknown sampler kind {kind!r}")
    if t_prev < 0:
        return x0.astype(z_t.dtype)
    if noise is None:
        raise ContractError("ancestral step needs noise before the final step")
    alpha = ab_t / ab_prev
    beta = 1.0 - alpha
    mean = (np.sqrt(ab_prev) * beta / (1.0 - ab_t)) * x0 + (np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)) * z_t
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return (mean + np.sqrt(var) * noise).astype(z_t.dtype)


# the four nested nullity patterns guidance evaluates, in order
GUIDANCE_PATTERNS = ((False, False, False), (True, False, False), (True, True, False), (True, True, True))


def sample(model, cond: ConditionSet, scales: GuidanceScales, sampler: SamplerConfig,
           sched: NoiseSchedule, shape: tuple[int, ...], ae=None,
           branches: tuple = GUIDANCE_PATTERNS, null_fill: float = 0.0) -> np.ndarray:
    """Generate a batch with nested three-condition guidance.

    ``cond`` is batched: visible ``[B, C_V, h, w]``, segmap ``[B, C_S, h, w]``
    and a list of captions. Each step runs the denoiser once per entry of
    ``branches`` and composes with :func:`cfg_compose`. Passing a single
    branch skips composition and samples that pattern alone. The result is
    decoded through ``ae`` when given.
    """
    dtype = model.dtype
    rng = np.random.default_rng(sampler.seed)
    z = rng.standard_normal(shape).astype(dtype)
    ts = inference_timesteps(sched, sampler.steps)
    b = shape[0]
    branch_inputs = []
    for use_v, use_s, use_t in branches:
        c = cond.masked(use_v, use_s, use_t)
        tokens = model.text(c.captions(b)) if hasattr(model, "text") else None
        branch_inputs.append((c, tokens))
    with T.no_grad():
        for i in range(len(ts) - 1, -1, -1):
            t = int(ts[i])
            t_prev = int(ts[i - 1]) if i > 0 else -1
            zt = Tensor(z)
            preds = []
            for c, tokens in branch_inputs:
                z_in = concat_condition_channels(zt, c, null_fill) if model.expanded else zt
                preds.append(model(z_in, np.full(b, t), tokens).data)
            eps = preds[0] if len(preds) == 1 else cfg_compose(*preds, scales)
            noise = None
            if sampler.kind == "ancestral-ddpm" and t_prev >= 0:
                noise = rng.standard_normal(shape).astype(dtype)
            z = reverse_step(z, eps, t, t_prev, sched, sampler.kind, noise, sampler.clip_denoised)
    if ae is not None and not ae.identity:
        with T.no_grad():
            z = ae.decode(Tensor(z.astype(ae.store.dtype))).data
    return z
