"""Network blocks: the time-conditioned U-Net denoiser with caption cross-attention,
low-rank adapters, zero-initialized input expansion, the caption embedder and
a tiny convolutional autoencoder.

Public image tensors are NCHW; the U-Net runs channels-last internally because
im2col and col2im are several times cheaper in that layout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .captions import VOCAB, encode_tokens
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor


class ParamStore:
    """Named parameters with a group tag (base / lora / expansion)."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, group: str = "base") -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        self.groups[name] = group
        return t

    def remove(self, name: str) -> None:
        del self.params[name]
        del self.groups[name]

    def astype(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(self.dtype)

    def names(self, group: str | None = None) -> list[str]:
        return [n for n, g in self.groups.items() if group is None or g == group]


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.standard_normal(shape) * std


class Linear:
    def __init__(self, store: ParamStore, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, bias: bool = True, init_scale: float = 1.0):
        self.name = name
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.weight = store.add(f"{name}.weight", _normal(rng, (fan_out, fan_in), init_scale / math.sqrt(fan_in)))
        self.bias = store.add(f"{name}.bias", np.zeros(fan_out)) if bias else None
        self.lora: LoraAdapter | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight.T)
        if self.bias is not None:
            y = y + self.bias
        if self.lora is not None:
            low = T.matmul(T.matmul(x, self.lora.A.T), self.lora.B.T)
            y = y + T.scale(low, self.lora.scaling)
        return y


class Conv:
    """Square-kernel convolution on channels-last tensors; 'same' padding for odd kernels."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 1, bias: bool = True, init_scale: float = 1.0,
                 group: str = "base", zero: bool = False):
        fan_in = cin * kernel * kernel
        w = np.zeros((cout, cin, kernel, kernel)) if zero else _normal(
            rng, (cout, cin, kernel, kernel), init_scale / math.sqrt(fan_in))
        self.weight = store.add(f"{name}.weight", w, group)
        self.bias = store.add(f"{name}.bias", np.zeros(cout), group) if bias else None
        self.stride = stride
        self.pad = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_nhwc(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class GroupNorm:
    def __init__(self, store: ParamStore, name: str, channels: int, groups: int):
        self.groups = math.gcd(groups, channels)
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.add(f"{name}.beta", np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.gamma, self.beta, self.groups, channels_last=True)


class ResBlock:
    def __init__(self, store, name, cin, cout, time_dim, groups, rng):
        self.norm1 = GroupNorm(store, f"{name}.norm1", cin, groups)
        self.conv1 = Conv(store, f"{name}.conv1", cin, cout, rng)
        self.temb = Linear(store, f"{name}.temb", time_dim, cout, rng)
        self.norm2 = GroupNorm(store, f"{name}.norm2", cout, groups)
        self.conv2 = Conv(store, f"{name}.conv2", cout, cout, rng, init_scale=0.3)
        self.skip = Conv(store, f"{name}.skip", cin, cout, rng, kernel=1) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        t = self.temb(temb)
        h = h + T.reshape(t, (t.shape[0], 1, 1, t.shape[1]))
        h = self.conv2(T.silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class AttnBlock:
    """Spatial self-attention followed by cross-attention onto caption tokens."""

    def __init__(self, store, name, channels, token_dim, groups, rng, linears: dict):
        c = channels
        self.norm = GroupNorm(store, f"{name}.norm", c, groups)
        self.q = Linear(store, f"{name}.q", c, c, rng)
        self.k = Linear(store, f"{name}.k", c, c, rng)
        self.v = Linear(store, f"{name}.v", c, c, rng)
        self.o = Linear(store, f"{name}.o", c, c, rng, init_scale=0.3)
        self.xnorm = GroupNorm(store, f"{name}.xnorm", c, groups)
        self.xq = Linear(store, f"{name}.xq", c, c, rng)
        self.xk = Linear(store, f"{name}.xk", token_dim, c, rng)
        self.xv = Linear(store, f"{name}.xv", token_dim, c, rng)
        self.xo = Linear(store, f"{name}.xo", c, c, rng, init_scale=0.3)
        for lin in (self.q, self.k, self.v, self.o, self.xq, self.xk, self.xv, self.xo):
            linears[lin.name] = lin

    def __call__(self, x: Tensor, tokens: Tensor) -> Tensor:
        b, h, w, c = x.shape
        seq = T.reshape(self.norm(x), (b, h * w, c))
        a = T.attention(self.q(seq), self.k(seq), self.v(seq))
        x = x + T.reshape(self.o(a), (b, h, w, c))
        seq = T.reshape(self.xnorm(x), (b, h * w, c))
        a = T.attention(self.xq(seq), self.xk(tokens), self.xv(tokens))
        return x + T.reshape(self.xo(a), (b, h, w, c))


@dataclass
class LoraAdapter:
    target: str
    rank: int
    alpha: float
    A: Tensor
    B: Tensor

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class CaptionEmbedding:
    """Trainable token table plus learned positions over the fixed caption vocabulary."""

    def __init__(self, store: ParamStore, dim: int, max_len: int, rng: np.random.Generator,
                 vocab: tuple[str, ...] = VOCAB):
        self.vocab = vocab
        self.dim = dim
        self.max_len = max_len
        self.table = store.add("text.table", _normal(rng, (len(vocab), dim), 1.0))
        self.pos = store.add("text.pos", _normal(rng, (max_len, dim), 0.1))

    def ids(self, captions) -> np.ndarray:
        return np.array([encode_tokens(c, self.max_len) for c in captions], dtype=np.int64)

    def __call__(self, captions) -> Tensor:
        return T.embedding(self.table, self.ids(captions)) + self.pos


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 1
    cond_channels: int = 6
    widths: tuple[int, ...] = (32, 64)
    attention_levels: tuple[int, ...] = (1,)
    time_dim: int = 64
    token_dim: int = 32
    max_tokens: int = 24
    image_size: int = 32
    groups: int = 8
    patch: int = 2
    input_skip: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "attention_levels", tuple(self.attention_levels))

    def validate(self) -> None:
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError("widths must be a non-empty list of positive ints")
        for name in ("latent_channels", "time_dim", "token_dim", "max_tokens", "image_size", "groups", "patch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.cond_channels < 0:
            raise ConfigError("cond_channels must be non-negative")
        div = self.patch * 2 ** (len(self.widths) - 1)
        if self.image_size % div:
            raise ConfigError(f"image size {self.image_size} not divisible by {div}")
        if any(not 0 <= a < len(self.widths) for a in self.attention_levels):
            raise ConfigError("attention level out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DenoiserConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown denoiser config keys: {sorted(unknown)}")
        return cls(**d)


def space_to_depth(x: Tensor, p: int) -> Tensor:
    """[B, H, W, C] -> [B, H/p, W/p, p*p*C] (channels-last)."""
    if p == 1:
        return x
    b, h, w, c = x.shape
    x = T.reshape(x, (b, h // p, p, w // p, p, c))
    return T.reshape(T.transpose(x, (0, 1, 3, 2, 4, 5)), (b, h // p, w // p, p * p * c))


def depth_to_space(x: Tensor, p: int) -> Tensor:
    if p == 1:
        return x
    b, h, w, c = x.shape
    x = T.reshape(x, (b, h, w, p, p, c // (p * p)))
    return T.reshape(T.transpose(x, (0, 1, 3, 2, 4, 5)), (b, h * p, w * p, c // (p * p)))


def timestep_embedding(t: np.ndarray, dim: int, dtype) -> Tensor:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return Tensor(np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(dtype))


class DenoiserModel:
    """The noise predictor. ``n_evals`` counts forward evaluations."""

    def __init__(self, config: DenoiserConfig):
        config.validate()
        self.config = config
        self.store = ParamStore()
        self.linears: dict[str, Linear] = {}
        self.lora: dict[str, LoraAdapter] = {}
        self.expanded = False
        self.extra_channels = 0
        self.n_evals = 0
        rng = np.random.default_rng(config.seed)
        c = config
        s = self.store
        self.text = CaptionEmbedding(s, c.token_dim, c.max_tokens, rng)
        td = c.time_dim
        self.time1 = Linear(s, "time.fc1", td, td, rng)
        self.time2 = Linear(s, "time.fc2", td, td, rng)
        w = c.widths
        pp = c.patch * c.patch
        self.conv_in = Conv(s, "conv_in", c.latent_channels * pp, w[0], rng)
        self.conv_cond: Conv | None = None
        self.down: list[tuple] = []
        for i, width in enumerate(w):
            res = ResBlock(s, f"down{i}.res", width, width, td, c.groups, rng)
            attn = (AttnBlock(s, f"down{i}.attn", width, c.token_dim, c.groups, rng, self.linears)
                    if i in c.attention_levels else None)
            pool = Conv(s, f"down{i}.pool", width, w[i + 1], rng, stride=2) if i + 1 < len(w) else None
            self.down.append((res, attn, pool))
        last = len(w) - 1
        self.mid_res = ResBlock(s, "mid.res", w[last], w[last], td, c.groups, rng)
        self.mid_attn = (AttnBlock(s, "mid.attn", w[last], c.token_dim, c.groups, rng, self.linears)
                         if last in c.attention_levels else None)
        self.up: list[tuple] = []
        for i in reversed(range(len(w))):
            res = ResBlock(s, f"up{i}.res", 2 * w[i], w[i], td, c.groups, rng)
            attn = (AttnBlock(s, f"up{i}.attn", w[i], c.token_dim, c.groups, rng, self.linears)
                    if i in c.attention_levels else None)
            lift = Conv(s, f"up{i}.lift", w[i], w[i - 1], rng) if i > 0 else None
            self.up.append((res, attn, lift))
        self.norm_out = GroupNorm(s, "out.norm", w[0], c.groups)
        self.conv_out = Conv(s, "out.conv", w[0], c.latent_channels * pp, rng, init_scale=0.3)
        self.skip_out: Conv | None = None
        if c.input_skip:
            # 1x1 path from the noisy latent straight to the output, identity at init
            self.skip_out = Conv(s, "out.skip", c.latent_channels * pp, c.latent_channels * pp, rng, kernel=1,
                                 zero=True)
            self.skip_out.weight.data[:, :, 0, 0] = np.eye(c.latent_channels * pp)

    # -- bookkeeping
    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    @property
    def in_channels(self) -> int:
        return self.config.latent_channels + self.extra_channels

    @property
    def dtype(self):
        return self.store.dtype

    def parameter_count(self, group: str | None = None) -> int:
        return sum(self.params[n].size for n in self.store.names(group))

    def trainable(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def set_trainable(self, names) -> None:
        names = set(names)
        for n, t in self.params.items():
            t.requires_grad = n in names

    def astype(self, dtype) -> DenoiserModel:
        self.store.astype(dtype)
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def null_tokens(self, batch: int) -> Tensor:
        return self.text([None] * batch)

    # -- forward
    def __call__(self, z_in: Tensor, t, tokens: Tensor | None = None) -> Tensor:
        if z_in.ndim != 4 or z_in.shape[1] != self.in_channels:
            raise ShapeError(f"denoiser expects [B, {self.in_channels}, H, W] input, got {z_in.shape}")
        p = self.config.patch
        if z_in.shape[2] % (p * 2 ** (len(self.config.widths) - 1)) or z_in.shape[3] % p:
            raise ShapeError(f"spatial dims {z_in.shape[2:]} incompatible with the U-Net depth")
        bsz = z_in.shape[0]
        t = np.broadcast_to(np.asarray(t), (bsz,))
        if tokens is None:
            tokens = self.null_tokens(bsz)
        elif tokens.ndim == 2:
            tokens = T.reshape(tokens, (1,) + tokens.shape)
        if tokens.shape[0] != bsz:
            if tokens.shape[0] != 1:
                raise ShapeError("token batch does not match latent batch")
            tokens = T.concat([tokens] * bsz, axis=0)
        self.n_evals += 1
        x = T.transpose(z_in, (0, 2, 3, 1))
        cz = self.config.latent_channels
        zs = space_to_depth(x[:, :, :, :cz] if self.conv_cond is not None else x, p)
        h = self.conv_in(zs)
        if self.conv_cond is not None:
            h = h + self.conv_cond(space_to_depth(x[:, :, :, cz:], p))
        temb = self.time2(T.silu(self.time1(timestep_embedding(t, self.config.time_dim, self.dtype))))
        skips = []
        for res, attn, pool in self.down:
            h = res(h, temb)
            if attn is not None:
                h = attn(h, tokens)
            skips.append(h)
            if pool is not None:
                h = pool(h)
        h = self.mid_res(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, tokens)
        for (res, attn, lift), skip in zip(self.up, reversed(skips)):
            h = res(T.concat([h, skip], axis=-1), temb)
            if attn is not None:
                h = attn(h, tokens)
            if lift is not None:
                h = T.upsample_nearest(lift(h), 2, channels_last=True)
        out = self.conv_out(T.silu(self.norm_out(h)))
        if self.skip_out is not None:
            out = out + self.skip_out(zs)
        out = depth_to_space(out, p)
        return T.transpose(out, (0, 3, 1, 2))


def build_denoiser(config: DenoiserConfig | None = None) -> DenoiserModel:
    return DenoiserModel(config or DenoiserConfig())


def denoise_predict(model: DenoiserModel, z_in: Tensor, t, tokens: Tensor | None = None) -> Tensor:
    return model(z_in, t, tokens)


def expand_input_channels(model: DenoiserModel, extra: int) -> DenoiserModel:
    """Give the first convolution ``extra`` zero-initialized input channels (in place).

    The new kernel lives in its own "expansion" parameter so the base
    convolution is evaluated exactly as before; a zero kernel contributes
    exact zeros.
    """
    if model.expanded:
        raise ContractError("input channels already expanded")
    if extra < 0:
        raise ConfigError("extra channel count must be non-negative")
    if extra == 0:
        return model
    rng = np.random.default_rng(0)
    pp = model.config.patch ** 2
    model.conv_cond = Conv(model.store, "conv_in_cond", extra * pp, model.config.widths[0], rng,
                           bias=False, group="expansion", zero=True)
    model.expanded = True
    model.extra_channels = extra
    return model


def lora_targets(model: DenoiserModel) -> list[str]:
    return list(model.linears)


def inject_lora(model: DenoiserModel, rank: int = 4, alpha: float = 4.0,
                targets=None, seed: int | None = None) -> DenoiserModel:
    """Attach rank-``rank`` adapters (B = 0) to attention projections and freeze everything else."""
    if rank < 1:
        raise ConfigError("LoRA rank must be >= 1")
    names = lora_targets(model) if targets is None else list(targets)
    for n in names:
        if n not in model.linears:
            raise ConfigError(f"unknown LoRA target {n!r}")
        if n in model.lora:
            raise ContractError(f"{n!r} already carries an adapter")
    rng = np.random.default_rng([model.config.seed if seed is None else seed, 7])
    for n in names:
        lin = model.linears[n]
        a = model.store.add(f"{n}.lora_A", _normal(rng, (rank, lin.fan_in), 1.0 / math.sqrt(lin.fan_in)), "lora")
        b = model.store.add(f"{n}.lora_B", np.zeros((lin.fan_out, rank)), "lora")
        adapter = LoraAdapter(n, rank, float(alpha), a, b)
        lin.lora = adapter
        model.lora[n] = adapter
    model.set_trainable(model.store.names("lora"))
    return model


def merge_lora(model: DenoiserModel) -> DenoiserModel:
    """Fold every adapter into its base weight and drop the adapter parameters."""
    if not model.lora:
        raise ContractError("model has no LoRA adapters to merge")
    for n, adapter in list(model.lora.items()):
        lin = model.linears[n]
        delta = adapter.scaling * (adapter.B.data @ adapter.A.data)
        lin.weight.data = (lin.weight.data + delta).astype(model.dtype)
        lin.lora = None
        model.store.remove(adapter.A.name)
        model.store.remove(adapter.B.name)
    model.lora.clear()
    return model


def embed_caption(embedder: CaptionEmbedding, caption: str | None) -> Tensor:
    """[L, d] token embeddings for a single caption (``None`` is the null caption)."""
    e = embedder([caption])
    return T.reshape(e, e.shape[1:])


# ---------------------------------------------------------------- autoencoder


@dataclass(frozen=True)
class AutoencoderConfig:
    factor: int = 1
    latent_channels: int = 1
    in_channels: int = 1
    hidden: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.factor < 1 or self.factor & (self.factor - 1):
            raise ConfigError("autoencoder factor must be a power of two")
        if self.factor == 1 and self.latent_channels != self.in_channels:
            raise ConfigError("identity autoencoder needs latent_channels == in_channels")

    def to_dict(self) -> dict:
        return asdict(self)


class Autoencoder:
    """Encoder E / decoder D pair; ``factor == 1`` is the pixel-space identity."""

    def __init__(self, config: AutoencoderConfig | None = None):
        self.config = config = config or AutoencoderConfig()
        config.validate()
        self.store = ParamStore()
        self.identity = config.factor == 1
        if self.identity:
            return
        rng = np.random.default_rng(config.seed)
        s, hd = self.store, config.hidden
        n_down = int(math.log2(config.factor))
        self.enc = [Conv(s, "enc.in", config.in_channels, hd, rng)]
        self.enc += [Conv(s, f"enc.down{i}", hd, hd, rng, stride=2) for i in range(n_down)]
        self.enc_out = Conv(s, "enc.out", hd, config.latent_channels, rng, kernel=1)
        self.dec_in = Conv(s, "dec.in", config.latent_channels, hd, rng)
        self.dec = [Conv(s, f"dec.up{i}", hd, hd, rng) for i in range(n_down)]
        self.dec_out = Conv(s, "dec.out", hd, config.in_channels, rng)

    @property
    def factor(self) -> int:
        return self.config.factor

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def _check(self, x: Tensor, channels: int, what: str) -> None:
        if x.ndim != 4 or x.shape[1] != channels:
            raise ShapeError(f"{what} expects [B, {channels}, H, W], got {x.shape}")

    def encode(self, x: Tensor) -> Tensor:
        self._check(x, self.config.in_channels, "encode")
        f = self.factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"spatial dims {x.shape[2:]} not divisible by {f}")
        if self.identity:
            return x
        h = T.transpose(x, (0, 2, 3, 1))
        for conv in self.enc:
            h = T.silu(conv(h))
        return T.transpose(self.enc_out(h), (0, 3, 1, 2))

    def decode(self, z: Tensor) -> Tensor:
        self._check(z, self.latent_channels, "decode")
        if self.identity:
            return z
        h = T.silu(self.dec_in(T.transpose(z, (0, 2, 3, 1))))
        for conv in self.dec:
            h = T.silu(conv(T.upsample_nearest(h, 2, channels_last=True)))
        return T.transpose(self.dec_out(h), (0, 3, 1, 2))


def encode_image(ae: Autoencoder, x: Tensor) -> Tensor:
    return ae.encode(x)


def decode_latent(ae: Autoencoder, z: Tensor) -> Tensor:
    return ae.decode(z)


def train_autoencoder(ae: Autoencoder, images: np.ndarray, epochs: int = 30, batch: int = 32,
                      lr: float = 2e-3, seed: int = 0) -> list[float]:
    """Fit E/D by pixel MSE on images in [-1, 1] shaped [N, C, H, W]; returns per-epoch loss."""
    if ae.identity:
        return []
    params = list(ae.params.values())
    opt = T.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    images = images.astype(ae.store.dtype)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), batch):
            x = Tensor(images[order[start:start + batch]])
            loss = T.mean_square(ae.decode(ae.encode(x)) - x)
            opt.step(T.backprop(loss, params=params))
            total += loss.item() * x.shape[0]
        history.append(total / len(images))
    return history
