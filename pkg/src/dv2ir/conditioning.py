"""Condition triple (visible, segmentation, caption), conditioning dropout and the
channel-concatenated denoiser input.

Images in a ConditionSet are float arrays in [-1, 1], either a single
``[C, H, W]`` sample or a batch ``[B, C, H, W]``. Segmentation maps are
one-hot class planes stored as +/-1, so the all-zero null fill is distinct from
any real map.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .captions import CLASS_NAMES
from .errors import ConfigError, ShapeError
from .tensor import Tensor
from . import tensor as T

N_CLASSES = len(CLASS_NAMES)

# nested nullity chain, index 0 is the unconditioned pattern
PATTERNS = ("null", "v", "vs", "vst")


@dataclass(frozen=True)
class ConditionSet:
    visible: np.ndarray | None = None
    segmap: np.ndarray | None = None
    caption: str | list | None = None
    layout: tuple[int, int] = (1, N_CLASSES)

    @property
    def batched(self) -> bool:
        for a in (self.visible, self.segmap):
            if a is not None:
                return a.ndim == 4
        return isinstance(self.caption, list)

    def pattern(self) -> tuple[bool, bool, bool]:
        return (self.visible is not None, self.segmap is not None, self.caption is not None)

    def masked(self, use_v: bool, use_s: bool, use_t: bool) -> ConditionSet:
        return replace(self, visible=self.visible if use_v else None,
                       segmap=self.segmap if use_s else None,
                       caption=self.caption if use_t else None)

    def captions(self, batch: int) -> list:
        """Per-sample caption list (``None`` entries are null captions)."""
        if isinstance(self.caption, list):
            if len(self.caption) != batch:
                raise ShapeError(f"{len(self.caption)} captions for a batch of {batch}")
            return list(self.caption)
        return [self.caption] * batch


@dataclass(frozen=True)
class DropoutPolicy:
    p_null: float = 0.02
    p_v_only: float = 0.02
    p_vs_only: float = 0.02
    seed: int = 0

    def __post_init__(self):
        ps = (self.p_null, self.p_v_only, self.p_vs_only)
        if any(p < 0 for p in ps) or sum(ps) > 1.0:
            raise ConfigError("dropout probabilities must be non-negative and sum to at most 1")

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Pattern index per sample: 0 null, 1 V only, 2 V+S, 3 full."""
        u = rng.random(n)
        edges = np.cumsum([self.p_null, self.p_v_only, self.p_vs_only])
        return np.searchsorted(edges, u, side="right")


def segmap_planes(ids: np.ndarray) -> np.ndarray:
    """Class-id map [..., H, W] -> +/-1 one-hot planes [..., N_CLASSES, H, W]; id 0 is background."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() > N_CLASSES:
        raise ShapeError(f"segmentation ids must lie in [0, {N_CLASSES}]")
    planes = np.stack([ids == k for k in range(1, N_CLASSES + 1)], axis=-3)
    return planes.astype(np.float32) * 2.0 - 1.0


def to_unit(image: np.ndarray) -> np.ndarray:
    """8-bit intensities to [-1, 1]."""
    return np.asarray(image, dtype=np.float32) / 127.5 - 1.0


def from_unit(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _encode(ae, planes: np.ndarray) -> np.ndarray:
    """Push each channel plane through the encoder separately."""
    if ae is None or ae.identity:
        return planes
    single = planes.ndim == 3
    x = planes[None] if single else planes
    b, c, h, w = x.shape
    with T.no_grad():
        z = ae.encode(Tensor(x.reshape(b * c, 1, h, w).astype(ae.store.dtype))).data
    z = z.reshape(b, c * z.shape[1], z.shape[2], z.shape[3])
    return z[0] if single else z


def assemble_condition(visible=None, segmap=None, caption=None, ae=None) -> ConditionSet:
    """Build a ConditionSet from raw renders.

    ``visible`` is an 8-bit image ``[H, W]`` (or batch ``[B, H, W]``),
    ``segmap`` a class-id map of the same spatial size, ``caption`` a string
    (or list). Both images pass through the encoder in latent mode.
    """
    if visible is not None and segmap is not None and np.shape(visible) != np.shape(segmap):
        raise ShapeError(f"visible {np.shape(visible)} and segmap {np.shape(segmap)} differ")
    zc = 1 if ae is None else ae.latent_channels
    v = s = None
    if visible is not None:
        v = _encode(ae, np.expand_dims(to_unit(visible), -3))
    if segmap is not None:
        s = _encode(ae, segmap_planes(segmap))
    return ConditionSet(v, s, caption, layout=(zc, zc * N_CLASSES))


def dropout_conditions(cond: ConditionSet, policy: DropoutPolicy, rng: np.random.Generator) -> ConditionSet:
    """Null conditions along the nested chain, independently per sample for batches.

    A batched result keeps zero-filled rows (and ``None`` captions) for the
    dropped samples, which is exactly what the null fill produces.
    """
    if not cond.batched:
        k = int(policy.draw(rng, 1)[0])
        return cond.masked(k >= 1, k >= 2, k >= 3)
    b = len(cond.visible) if cond.visible is not None else len(cond.caption)
    return apply_patterns(cond, policy.draw(rng, b))


def apply_patterns(cond: ConditionSet, ks: np.ndarray) -> ConditionSet:
    """Per-sample nested nulling of a batched ConditionSet given pattern indices."""
    ks = np.asarray(ks)

    def rows(a, keep):
        if a is None:
            return None
        return np.where(keep.reshape(-1, 1, 1, 1), a, np.zeros_like(a))

    caps = cond.captions(len(ks))
    caps = [c if k >= 3 else None for c, k in zip(caps, ks)]
    return replace(cond, visible=rows(cond.visible, ks >= 1), segmap=rows(cond.segmap, ks >= 2), caption=caps)


def concat_condition_channels(z_t, cond: ConditionSet, null_fill: float = 0.0):
    """[z_t | visible slots | segmap slots]; null entries become ``null_fill`` planes."""
    z = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t)
    if z.ndim != 4:
        raise ShapeError(f"z_t must be [B, C, H, W], got {z.shape}")
    b, _, h, w = z.shape
    parts = [z]
    for arr, slots in zip((cond.visible, cond.segmap), cond.layout):
        if arr is None:
            parts.append(np.full((b, slots, h, w), null_fill, dtype=z.dtype))
            continue
        a = arr if arr.ndim == 4 else np.broadcast_to(arr, (b,) + arr.shape)
        if a.shape != (b, slots, h, w):
            raise ShapeError(f"condition shape {a.shape} does not fit slot {(b, slots, h, w)}")
        parts.append(a.astype(z.dtype, copy=False))
    out = np.concatenate(parts, axis=1)
    return Tensor(out) if isinstance(z_t, Tensor) else out


def split_condition_channels(x: np.ndarray, latent_channels: int, layout=(1, N_CLASSES)):
    """Inverse slicing of :func:`concat_condition_channels`."""
    cv, cs = layout
    c = latent_channels
    return x[:, :c], x[:, c:c + cv], x[:, c + cv:c + cv + cs]
