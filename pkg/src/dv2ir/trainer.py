"""Progressive training phases, freezing policy and checkpoints.

Phase 0 is a toy text-to-image pretrain on visible renders that stands in
for a pretrained text-to-image model. Phase 1 adapts it to infrared with
low-rank adapters under a single fixed prompt. Phase 2 learns the
conditioned visible-to-infrared mapping on mixed styles. Phase 3 fine-tunes
on a small single-style set.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .captions import INFRARED_PREFIX, VISIBLE_PREFIX
from .conditioning import DropoutPolicy, apply_patterns, assemble_condition, concat_condition_channels, to_unit
from .diffusion import NoiseSchedule, build_schedule, training_loss
from .errors import ConfigError, ContractError, FormatError
from .nn import (Autoencoder, AutoencoderConfig, DenoiserConfig, DenoiserModel, build_denoiser,
                 expand_input_channels, inject_lora, merge_lora)
from .scenes import RenderedPair, augment, caption_scene
from .tensor import Tensor

log = logging.getLogger(__name__)

PHASES = (0, 1, 2, 3)


@dataclass(frozen=True)
class PhaseConfig:
    phase: int
    epochs: int = 20
    batch: int = 16
    lr: float = 1e-4
    seed: int = 0
    conditioning: bool = False
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_targets: tuple | None = None
    p_null: float = 0.02
    p_v_only: float = 0.02
    p_vs_only: float = 0.02
    use_segmap: bool = True
    use_caption: bool = True
    augment: bool = False
    resize: int = 36

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.epochs < 0 or self.batch < 1 or not self.lr > 0:
            raise ConfigError("epochs >= 0, batch >= 1 and lr > 0 required")
        if self.phase == 1 and self.conditioning:
            raise ConfigError("phase 1 trains without image conditioning")
        if self.phase in (2, 3) and not self.conditioning:
            raise ConfigError("phases 2 and 3 train with conditioning")
        if self.lora_targets is not None:
            object.__setattr__(self, "lora_targets", tuple(self.lora_targets))

    @property
    def dropout(self) -> DropoutPolicy:
        return DropoutPolicy(self.p_null, self.p_v_only, self.p_vs_only, self.seed)

    @classmethod
    def default(cls, phase: int, **overrides) -> PhaseConfig:
        base = {0: dict(epochs=20, lr=1e-4), 1: dict(epochs=20, lr=2e-4),
                2: dict(epochs=40, lr=1e-3, conditioning=True), 3: dict(epochs=40, lr=1e-4, conditioning=True)}
        if phase not in base:
            raise ConfigError(f"unknown phase {phase!r}")
        return cls(phase=phase, **{**base[phase], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["lora_targets"] is not None:
            d["lora_targets"] = list(d["lora_targets"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PhaseConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phase config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    """Everything a checkpoint carries."""
    model: DenoiserModel
    schedule: NoiseSchedule
    ae: Autoencoder = field(default_factory=Autoencoder)
    provenance: tuple[int, ...] = ()
    step: int = 0
    rng_state: dict | None = None
    history: dict = field(default_factory=dict)


def new_state(config: DenoiserConfig | None = None, schedule: NoiseSchedule | None = None,
              ae: Autoencoder | None = None) -> TrainState:
    return TrainState(build_denoiser(config), schedule or build_schedule(), ae or Autoencoder())


def freeze_policy(model: DenoiserModel, phase: int) -> dict[str, bool]:
    """Trainable flag for every parameter name."""
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}")
    groups = model.store.groups
    if phase == 1:
        return {n: g == "lora" or n.startswith("text.") for n, g in groups.items()}
    return {n: True for n in groups}


def _frozen_digest(model: DenoiserModel, mask: dict[str, bool]) -> int:
    crc = 0
    for n in sorted(mask):
        if not mask[n]:
            crc = zlib.crc32(model.params[n].data.tobytes(), crc)
    return crc


def prepare_for_conditioning(state: TrainState) -> TrainState:
    """Fold adapters into the base weights and add the condition input channels."""
    m = state.model
    if m.lora:
        merge_lora(m)
    if not m.expanded:
        expand_input_channels(m, m.config.cond_channels)
    m.set_trainable(m.params)
    return state


# ---------------------------------------------------------------- data batches


@dataclass
class PhaseData:
    """Arrays prepared once per phase: targets in [-1, 1], optional conditions and captions."""
    target: np.ndarray                      # [N, 1, H, W]
    captions: list
    visible: np.ndarray | None = None       # raw 8-bit [N, H, W], kept for augmentation
    segmap: np.ndarray | None = None
    raw_target: np.ndarray | None = None


def phase_data(pairs: Sequence[RenderedPair], phase: int) -> PhaseData:
    if not pairs:
        raise ConfigError(f"phase {phase} needs a non-empty training set")
    if phase == 0:
        imgs = np.stack([p.visible for p in pairs])
        caps = [caption_scene(p.scene, VISIBLE_PREFIX) if p.scene is not None
                else p.caption.replace(INFRARED_PREFIX, VISIBLE_PREFIX, 1) for p in pairs]
        return PhaseData(to_unit(imgs)[:, None], caps, raw_target=imgs)
    imgs = np.stack([p.infrared for p in pairs])
    if phase == 1:
        return PhaseData(to_unit(imgs)[:, None], [INFRARED_PREFIX] * len(pairs), raw_target=imgs)
    vis = np.stack([p.visible for p in pairs])
    seg = np.stack([p.segmap for p in pairs])
    return PhaseData(to_unit(imgs)[:, None], [p.caption for p in pairs], vis, seg, imgs)


def _batch(state: TrainState, data: PhaseData, idx: np.ndarray, cfg: PhaseConfig,
           rng: np.random.Generator, epoch: int):
    """Latent targets, condition tensor (or None) and captions for one minibatch."""
    ae = state.ae
    tgt = data.target[idx]
    vis = seg = None
    if cfg.conditioning:
        vis, seg = data.visible[idx], data.segmap[idx]
    if cfg.augment:
        crop = tgt.shape[-1]
        out_t, out_v, out_s = [], [], []
        for j, i in enumerate(idx):
            imgs = [data.raw_target[i]] + ([vis[j], seg[j]] if vis is not None else [])
            res = augment(imgs, cfg.resize, crop, cfg.seed * 100_003 + epoch, int(i),
                          nearest=[False, False, True][:len(imgs)])
            out_t.append(res[0])
            if vis is not None:
                out_v.append(res[1])
                out_s.append(res[2])
        tgt = to_unit(np.stack(out_t))[:, None]
        if vis is not None:
            vis, seg = np.stack(out_v), np.stack(out_s)
    dtype = state.model.dtype
    if ae.identity:
        z0 = tgt.astype(dtype)
    else:
        with T.no_grad():
            z0 = ae.encode(Tensor(tgt.astype(ae.store.dtype))).data.astype(dtype)
    caps = [data.captions[i] for i in idx]
    if not cfg.conditioning:
        return z0, None, caps
    cond = assemble_condition(vis, seg, caps, ae)
    if not cfg.use_segmap:
        cond = replace(cond, segmap=None)
    if not cfg.use_caption:
        cond = replace(cond, caption=None)
    ks = cfg.dropout.draw(rng, len(idx))
    cond = apply_patterns(cond, ks)
    return z0, cond, cond.captions(len(idx)), ks


def run_phase(state: TrainState, pairs: Sequence[RenderedPair], cfg: PhaseConfig) -> TrainState:
    """Generic phase loop; the phase-specific entry points check their preconditions."""
    model = state.model
    if cfg.conditioning and not model.expanded:
        raise ContractError(f"phase {cfg.phase} needs a model with expanded input channels")
    if cfg.phase == 1 and not model.lora:
        raise ContractError("phase 1 needs injected LoRA adapters")
    data = phase_data(pairs, cfg.phase)
    mask = freeze_policy(model, cfg.phase)
    model.set_trainable(n for n, on in mask.items() if on)
    params = model.trainable()
    opt = T.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, cfg.phase, 0x7A1])
    sched = state.schedule
    guard = _frozen_digest(model, mask) if cfg.phase == 1 else None
    losses = []
    pattern_counts = np.zeros(4, dtype=np.int64)
    n = len(data.target)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = np.sort(order[start:start + cfg.batch])
            out = _batch(state, data, idx, cfg, rng, epoch)
            z0, cond, caps = out[:3]
            if cfg.conditioning:
                pattern_counts += np.bincount(out[3], minlength=4)
            b = len(idx)
            t = rng.integers(0, sched.T, size=b)
            eps = rng.standard_normal(z0.shape).astype(z0.dtype)
            cond_in = None
            if cond is not None:
                full = concat_condition_channels(np.zeros_like(z0), cond)
                cond_in = Tensor(full[:, z0.shape[1]:])
            tokens = model.text(caps)
            loss = training_loss(model, Tensor(z0), t, cond_in, Tensor(eps), sched, tokens)
            opt.step(T.backprop(loss, params=params))
            state.step += 1
            if guard is not None and _frozen_digest(model, mask) != guard:
                raise ContractError("frozen base weights changed during phase 1")
            total += loss.item() * b
        losses.append(total / n)
        log.info("phase %d epoch %d loss %.5f", cfg.phase, epoch, losses[-1])
    state.provenance = tuple(sorted(set(state.provenance) | {cfg.phase}))
    state.rng_state = rng.bit_generator.state
    state.history[cfg.phase] = {"loss": losses, "patterns": pattern_counts.tolist()}
    return state


def run_phase0(state: TrainState, visible_pairs: Sequence[RenderedPair], cfg: PhaseConfig | None = None) -> TrainState:
    cfg = cfg or PhaseConfig.default(0)
    if state.model.expanded or state.model.lora:
        raise ContractError("phase 0 runs on a plain base model")
    return run_phase(state, visible_pairs, cfg)


def run_phase1(state: TrainState, ir_pairs: Sequence[RenderedPair], cfg: PhaseConfig | None = None) -> TrainState:
    """Adapter-only infrared internalization under the fixed prompt."""
    cfg = cfg or PhaseConfig.default(1)
    m = state.model
    if m.expanded:
        raise ContractError("phase 1 runs before channel expansion")
    if not m.lora:
        inject_lora(m, cfg.lora_rank, cfg.lora_alpha, cfg.lora_targets, seed=cfg.seed)
    return run_phase(state, ir_pairs, cfg)


def run_phase2(state: TrainState, paired: Sequence[RenderedPair], cfg: PhaseConfig | None = None) -> TrainState:
    cfg = cfg or PhaseConfig.default(2)
    if state.model.lora:
        raise ContractError("merge LoRA adapters before phase 2")
    return run_phase(state, paired, cfg)


def run_phase3(state: TrainState, style_pairs: Sequence[RenderedPair], cfg: PhaseConfig | None = None) -> TrainState:
    cfg = cfg or PhaseConfig.default(3)
    if not style_pairs:
        raise ConfigError("phase 3 needs a non-empty style set")
    if state.model.lora:
        raise ContractError("merge LoRA adapters before phase 3")
    return run_phase(state, style_pairs, cfg)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"DV2IR\0"
VERSION = 1


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _blob(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode()
    body = struct.pack("<H", len(nb)) + nb + struct.pack("<I", data.ndim)
    body += struct.pack(f"<{data.ndim}I", *data.shape) + data.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_bytes(state: TrainState) -> bytes:
    m = state.model
    blobs = [(n, t.data) for n, t in m.params.items()]
    if not state.ae.identity:
        blobs += [("ae/" + n, t.data) for n, t in state.ae.params.items()]
    header = {
        "model": m.config.to_dict(),
        "autoencoder": state.ae.config.to_dict(),
        "schedule": state.schedule.config(),
        "groups": dict(m.store.groups),
        "lora": {n: {"rank": a.rank, "alpha": a.alpha} for n, a in m.lora.items()},
        "expanded": m.expanded,
        "extra_channels": m.extra_channels,
        "provenance": list(state.provenance),
        "step": state.step,
        "rng": state.rng_state,
        "history": {str(k): v for k, v in state.history.items()},
        "blobs": [n for n, _ in blobs],
    }
    head = _canonical(header)
    out = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    out += [_blob(n, a) for n, a in blobs]
    return b"".join(out)


def save_checkpoint(state: TrainState, path) -> None:
    """Atomic write: temp file in the destination directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = checkpoint_bytes(state)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint_bytes(buf: bytes) -> TrainState:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a DV2IR checkpoint (bad magic)")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen))
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    arrays = {}
    for expected in header["blobs"]:
        start = r.pos
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        body = buf[start:r.pos]
        (crc,) = r.unpack("<I")
        if zlib.crc32(body) != crc:
            raise FormatError(f"checksum mismatch in blob {name!r}")
        if name != expected:
            raise FormatError(f"blob order mismatch: {name!r} vs {expected!r}")
        arrays[name] = data
    if r.pos != len(buf):
        raise FormatError("trailing bytes after the last blob")
    try:
        model = build_denoiser(DenoiserConfig.from_dict(header["model"]))
        for n, spec in header["lora"].items():
            inject_lora(model, spec["rank"], spec["alpha"], [n])
        if header["expanded"]:
            expand_input_channels(model, header["extra_channels"])
        ae = Autoencoder(AutoencoderConfig(**header["autoencoder"]))
        sched = build_schedule(**header["schedule"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"incomplete checkpoint header: {exc}") from exc
    if set(model.params) != {n for n in arrays if not n.startswith("ae/")}:
        raise FormatError("checkpoint parameters do not match the model layout")
    for n, t in model.params.items():
        t.data = arrays[n].astype(np.float32)
    for n, t in ae.params.items():
        t.data = arrays["ae/" + n].astype(np.float32)
    model.set_trainable(n for n, on in freeze_policy(model, 1 if model.lora else 2).items() if on)
    history = {int(k): v for k, v in header.get("history", {}).items()}
    return TrainState(model, sched, ae, tuple(header["provenance"]), header["step"], header["rng"], history)


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint {path} does not exist")
    return load_checkpoint_bytes(path.read_bytes())
