"""Procedural paired visible/infrared scenes with segmentation maps and captions.

Every render is integer arithmetic on integer geometry (the only floating
point step is one correctly rounded affine map per pixel), so a corpus is
byte-identical across runs and platforms.

Visible renders carry lighting that infrared must ignore: an ambient gradient,
an exposure gain, lamp halos and cast shadows. Infrared renders are a pure
function of object classes, the ambient level and the style.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .captions import AMBIENT_WORDS, CLASS_NAMES, INFRARED_PREFIX, NUMBER_WORDS, PLURALS
from .errors import ConfigError, FormatError

CLASS_IDS = {name: i + 1 for i, name in enumerate(CLASS_NAMES)}
TEMPERATURE = {"person": 0.9, "vehicle": 0.8, "lamp": 0.7, "building": 0.35, "tree": 0.25}
BACKGROUND_TEMPERATURE_SCALE = 0.3

# visible albedo ranges overlap on purpose: intensity alone does not reveal the class
ALBEDO = {"person": (70, 190), "vehicle": (50, 210), "tree": (40, 150), "building": (60, 200)}
RADIUS = {"person": (2, 3), "vehicle": (3, 4), "tree": (3, 5), "building": (4, 6), "lamp": (1, 2)}
LAMP_BODY = 235
HALO_PEAK = 60
SHADOW_NUM, SHADOW_DEN = 5, 8
AMBIENT_STEPS = 16


@dataclass(frozen=True)
class StyleSpec:
    polarity: str
    gain: float
    bias: float
    blur: float

    def __post_init__(self):
        if self.polarity not in ("white-hot", "black-hot"):
            raise ConfigError(f"unknown polarity {self.polarity!r}")
        if not self.gain > 0:
            raise ConfigError("style gain must be positive")
        if self.blur < 0:
            raise ConfigError("blur sigma must be non-negative")

    def signed(self) -> tuple[float, float]:
        """(slope, intercept) of displayed intensity in [0, 1] against temperature."""
        if self.polarity == "white-hot":
            return self.gain, self.bias
        return -self.gain, 1.0 - self.bias


STYLES = (
    StyleSpec("white-hot", 0.95, 0.05, 0.8),
    StyleSpec("black-hot", 0.9, 0.08, 0.8),
    StyleSpec("white-hot", 0.6, 0.25, 1.2),
    StyleSpec("white-hot", 1.1, 0.0, 0.5),
)
TARGET_STYLE = 0


@dataclass(frozen=True)
class SceneObject:
    cls: str
    x: int
    y: int
    r: int
    albedo: int = 0


@dataclass(frozen=True)
class SceneParams:
    canvas: int = 32
    min_objects: int = 1
    max_objects: int = 6
    lamp_prob: float = 0.4
    max_shadows: int = 2
    jitter: int = 2

    def validate(self) -> None:
        if self.canvas <= 0:
            raise ConfigError("canvas size must be positive")
        if self.canvas < 16:
            raise ConfigError("canvas must be at least 16 pixels")
        if not 0 <= self.min_objects <= self.max_objects <= len(NUMBER_WORDS) - 1:
            raise ConfigError("object count range invalid")
        if not 0.0 <= self.lamp_prob <= 1.0:
            raise ConfigError("lamp_prob must lie in [0, 1]")


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    objects: tuple[SceneObject, ...]
    ambient: int                 # ambient level in 1/16 units, 0..15
    gradient: int = 0            # vertical ambient ramp in the visible band
    exposure: int = 64           # visible exposure gain in 1/64 units
    halo_radius: int = 0
    shadows: tuple = ()          # convex integer polygons
    style: int = TARGET_STYLE
    variant: int = 0
    canvas: int = 32

    @property
    def ambient_level(self) -> float:
        return self.ambient / AMBIENT_STEPS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects"] = [asdict(o) for o in self.objects]
        d["shadows"] = [list(map(list, p)) for p in self.shadows]
        return d


@dataclass
class RenderedPair:
    visible: np.ndarray
    infrared: np.ndarray
    segmap: np.ndarray
    caption: str
    scene_id: int
    variant: int = 0
    style: int = TARGET_STYLE
    scene: SceneSpec | None = field(default=None, repr=False)

    @property
    def key(self) -> str:
        return f"{self.scene_id}_{self.variant}_{self.style}"


# ---------------------------------------------------------------- generation


def _scene_rng(seed: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *extra])


def _shadow(rng: np.random.Generator, n: int) -> tuple:
    cx, cy = (int(v) for v in rng.integers(4, n - 4, size=2))
    pts = [(cx + int(dx), cy + int(dy)) for dx, dy in rng.integers(-9, 10, size=(3, 2))]
    return tuple(pts)


def gen_scene(seed: int, params: SceneParams | None = None, style: int | None = None,
              scene_id: int | None = None) -> SceneSpec:
    """Deterministic scene for ``seed``; ``scene_id`` defaults to the seed."""
    params = params or SceneParams()
    params.validate()
    rng = _scene_rng(seed)
    n = params.canvas
    count = int(rng.integers(params.min_objects, params.max_objects + 1))
    lamp = count > 0 and rng.random() < params.lamp_prob
    objects = []
    for i in range(count):
        cls = "lamp" if lamp and i == count - 1 else CLASS_NAMES[int(rng.integers(0, 4))]
        lo, hi = RADIUS[cls]
        r = int(rng.integers(lo, hi + 1))
        x, y = (int(v) for v in rng.integers(r + 1, n - r - 1, size=2))
        albedo = LAMP_BODY if cls == "lamp" else int(rng.integers(ALBEDO[cls][0], ALBEDO[cls][1] + 1))
        objects.append(SceneObject(cls, x, y, r, albedo))
    ambient = int(rng.integers(0, AMBIENT_STEPS))
    gradient = int(rng.integers(-20, 21))
    exposure = int(rng.integers(44, 85))
    halo = int(rng.integers(3, 8)) if lamp else 0
    shadows = tuple(_shadow(rng, n) for _ in range(int(rng.integers(0, params.max_shadows + 1))))
    if style is None:
        style = int(rng.integers(0, len(STYLES)))
    return SceneSpec(seed if scene_id is None else scene_id, tuple(objects), ambient, gradient, exposure,
                     halo, shadows, style, 0, n)


def jitter_scene(scene: SceneSpec, variant: int, amount: int = 2) -> SceneSpec:
    """Near-duplicate of ``scene``: same id, objects shifted by at most ``amount`` px."""
    if variant == 0:
        return scene
    rng = _scene_rng(scene.scene_id, 1 + variant)
    n = scene.canvas
    moved = []
    for o in scene.objects:
        dx, dy = (int(v) for v in rng.integers(-amount, amount + 1, size=2))
        x = min(max(o.x + dx, o.r + 1), n - o.r - 2)
        y = min(max(o.y + dy, o.r + 1), n - o.r - 2)
        moved.append(replace(o, x=x, y=y))
    return replace(scene, objects=tuple(moved), variant=variant)


def gen_variants(seed: int, k: int, params: SceneParams | None = None, style: int | None = None) -> list[SceneSpec]:
    params = params or SceneParams()
    base = gen_scene(seed, params, style)
    return [jitter_scene(base, v, params.jitter) for v in range(k)]


# ---------------------------------------------------------------- rasterization


def _grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:n, 0:n]
    return yy.astype(np.int64), xx.astype(np.int64)


def disk_mask(obj: SceneObject, n: int) -> np.ndarray:
    yy, xx = _grid(n)
    return (xx - obj.x) ** 2 + (yy - obj.y) ** 2 <= obj.r * obj.r


def polygon_mask(poly, n: int) -> np.ndarray:
    """Pixels inside (or on) a convex integer polygon, via integer cross products."""
    yy, xx = _grid(n)
    pos = np.ones((n, n), dtype=bool)
    neg = np.ones((n, n), dtype=bool)
    m = len(poly)
    for i in range(m):
        (x0, y0), (x1, y1) = poly[i], poly[(i + 1) % m]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        pos &= cross >= 0
        neg &= cross <= 0
    return pos | neg


def render_segmap(scene: SceneSpec) -> np.ndarray:
    """Class id per pixel (0 background); later objects cover earlier ones."""
    seg = np.zeros((scene.canvas, scene.canvas), dtype=np.uint8)
    for o in scene.objects:
        seg[disk_mask(o, scene.canvas)] = CLASS_IDS[o.cls]
    return seg


def render_visible(scene: SceneSpec) -> np.ndarray:
    n = scene.canvas
    yy, xx = _grid(n)
    base = 30 + (150 * scene.ambient) // AMBIENT_STEPS
    img = base + (scene.gradient * yy) // (n - 1)
    for o in scene.objects:
        if o.cls != "lamp":
            img = np.where(disk_mask(o, n), o.albedo, img)
    for poly in scene.shadows:
        img = np.where(polygon_mask(poly, n), img * SHADOW_NUM // SHADOW_DEN, img)
    for o in scene.objects:
        if o.cls == "lamp":
            img = np.where(disk_mask(o, n), o.albedo, img)
            r2 = scene.halo_radius * scene.halo_radius
            if r2:
                d2 = (xx - o.x) ** 2 + (yy - o.y) ** 2
                img = img + np.where(d2 < r2, HALO_PEAK * (r2 - d2) // r2, 0)
    img = img * scene.exposure // 64
    return np.clip(img, 0, 255).astype(np.uint8)


def temperature_map(scene: SceneSpec) -> np.ndarray:
    """Per-pixel temperature on [0, 1]; halos and shadows do not enter."""
    n = scene.canvas
    temp = np.full((n, n), scene.ambient_level * BACKGROUND_TEMPERATURE_SCALE)
    for o in scene.objects:
        temp[disk_mask(o, n)] = TEMPERATURE[o.cls]
    return temp


def infrared_field(scene: SceneSpec, style: StyleSpec | int | None = None) -> np.ndarray:
    """Unclamped, unblurred display intensity on [0, 1] scale (white-hot affine only)."""
    st = _style(scene, style)
    return st.gain * temperature_map(scene) + st.bias


def _style(scene: SceneSpec, style) -> StyleSpec:
    if style is None:
        style = scene.style
    return STYLES[style] if isinstance(style, (int, np.integer)) else style


def _int_kernel(sigma: float) -> np.ndarray:
    half = max(1, int(math.ceil(3 * sigma)))
    i = np.arange(-half, half + 1)
    return np.round(1024 * np.exp(-(i * i) / (2 * sigma * sigma))).astype(np.int64)


def int_gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with an integer kernel, edge replication and round-half-up."""
    if sigma <= 0:
        return img.astype(np.uint8)
    k = _int_kernel(sigma)
    half = len(k) // 2
    s = int(k.sum())
    out = img.astype(np.int64)
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (half, half)
        p = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for j, w in enumerate(k):
            acc += w * (p[j:j + n] if axis == 0 else p[:, j:j + n])
        out = (acc + s // 2) // s
    return out.astype(np.uint8)


def render_infrared(scene: SceneSpec, style: StyleSpec | int | None = None, blur: bool = True) -> np.ndarray:
    st = _style(scene, style)
    v = np.clip(np.round(255.0 * (st.gain * temperature_map(scene) + st.bias)), 0, 255).astype(np.int64)
    if st.polarity == "black-hot":
        v = 255 - v
    return int_gaussian_blur(v, st.blur) if blur else v.astype(np.uint8)


def ambient_word(scene: SceneSpec) -> str:
    return AMBIENT_WORDS[min(scene.ambient * len(AMBIENT_WORDS) // AMBIENT_STEPS, len(AMBIENT_WORDS) - 1)]


def caption_scene(scene: SceneSpec, prefix: str = INFRARED_PREFIX) -> str:
    counts = [(name, sum(o.cls == name for o in scene.objects)) for name in CLASS_NAMES if name != "lamp"]
    groups = [f"{NUMBER_WORDS[c]} {name if c == 1 else PLURALS[name]}" for name, c in counts if c]
    body = " and ".join(groups) if groups else "an empty scene"
    text = f"{prefix} of {body} at {ambient_word(scene)}"
    if any(o.cls == "lamp" for o in scene.objects):
        text += ", with a lamp"
    return text


def render_pair(scene: SceneSpec, style: int | None = None, prefix: str = INFRARED_PREFIX) -> RenderedPair:
    style = scene.style if style is None else style
    return RenderedPair(render_visible(scene), render_infrared(scene, style), render_segmap(scene),
                        caption_scene(scene, prefix), scene.scene_id, scene.variant, style, scene)


def halo_probe(scene: SceneSpec, radii: Sequence[int] = (3, 9)) -> list[SceneSpec]:
    """Copies of a lamp scene that differ only in halo radius."""
    if not any(o.cls == "lamp" for o in scene.objects):
        raise ConfigError("halo probe needs a scene with a lamp")
    return [replace(scene, halo_radius=int(r)) for r in radii]


# ---------------------------------------------------------------- style statistics


def style_statistics(image: np.ndarray, scene: SceneSpec, blur: float | None = None) -> tuple[float, float]:
    """Least-squares (slope, intercept) of ``image / 255`` against the scene's temperature map.

    The temperature map is blurred by ``blur`` (default: the target style's
    sigma) so edge softening does not bias the fit.
    """
    temp = temperature_map(scene)
    sigma = STYLES[TARGET_STYLE].blur if blur is None else blur
    if sigma > 0:
        temp = gaussian_filter(temp, sigma, mode="nearest")
    y = np.asarray(image, dtype=np.float64).ravel() / 255.0
    x = temp.ravel()
    design = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(slope), float(intercept)


def style_distance(images: Sequence[np.ndarray], scenes: Sequence[SceneSpec],
                   style: StyleSpec | int = TARGET_STYLE) -> float:
    """|mean slope error| + |mean intercept error| against a style's signed parameters."""
    st = STYLES[style] if isinstance(style, (int, np.integer)) else style
    stats = np.array([style_statistics(im, sc, st.blur) for im, sc in zip(images, scenes)])
    a, c = st.signed()
    return float(abs(stats[:, 0].mean() - a) + abs(stats[:, 1].mean() - c))


# ---------------------------------------------------------------- splitting and augmentation


def grouped_split(items: Sequence, test_fraction: float, mode: str = "grouped", seed: int = 0,
                  key=lambda item: item.scene_id) -> tuple[list, list]:
    """Partition ``items``; grouped mode never lets a scene id straddle the split."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n = len(items)
    if mode == "random":
        order = rng.permutation(n)
        n_test = int(round(test_fraction * n))
        test_idx = set(order[:n_test].tolist())
    elif mode == "grouped":
        groups = sorted({key(it) for it in items})
        if len(groups) < 2:
            raise ConfigError("grouped split needs at least two scene groups")
        perm = rng.permutation(len(groups))
        n_test = min(max(1, int(round(test_fraction * len(groups)))), len(groups) - 1)
        held = {groups[i] for i in perm[:n_test]}
        test_idx = {i for i, it in enumerate(items) if key(it) in held}
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    train = [it for i, it in enumerate(items) if i not in test_idx]
    test = [it for i, it in enumerate(items) if i in test_idx]
    return train, test


def straddling_groups(train: Sequence, test: Sequence, key=lambda item: item.scene_id) -> set:
    return {key(it) for it in train} & {key(it) for it in test}


def augment(images: Sequence[np.ndarray], resize: int, crop: int, seed: int, index: int,
            nearest: Sequence[bool] | None = None) -> list[np.ndarray]:
    """Resize every image to ``resize`` then take one shared random ``crop`` window.

    ``nearest`` flags label maps (resampled with nearest neighbour); others
    use bilinear.
    """
    if crop > resize:
        raise ConfigError(f"crop {crop} larger than resize {resize}")
    if crop < 1:
        raise ConfigError("crop must be positive")
    nearest = nearest or [False] * len(images)
    rng = np.random.default_rng([int(seed), int(index)])
    top, left = (int(v) for v in rng.integers(0, resize - crop + 1, size=2)) if resize > crop else (0, 0)
    out = []
    for img, nn in zip(images, nearest):
        im = Image.fromarray(np.asarray(img, dtype=np.uint8))
        if im.size != (resize, resize):
            im = im.resize((resize, resize), Image.NEAREST if nn else Image.BILINEAR)
        out.append(np.asarray(im)[top:top + crop, left:left + crop].copy())
    return out


# ---------------------------------------------------------------- image I/O


LUMA = (0.299, 0.587, 0.114)


def read_image(path) -> np.ndarray:
    """8-bit grayscale array; RGB(A) is converted with integer-rounded luma."""
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    if im.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        raise FormatError(f"unsupported bit depth (mode {im.mode}) in {path}")
    if im.mode == "L":
        return np.asarray(im, dtype=np.uint8).copy()
    if im.mode in ("1", "P", "LA", "RGBA", "CMYK", "YCbCr"):
        im = im.convert("RGB")
    if im.mode != "RGB":
        raise FormatError(f"unsupported image mode {im.mode} in {path}")
    rgb = np.asarray(im, dtype=np.float64)
    gray = rgb[..., 0] * LUMA[0] + rgb[..., 1] * LUMA[1] + rgb[..., 2] * LUMA[2]
    return np.clip(np.round(gray), 0, 255).astype(np.uint8)


def write_image(image: np.ndarray, path) -> None:
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise FormatError("write_image expects a 2-D uint8 array")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------- corpora


@dataclass(frozen=True)
class CorpusConfig:
    """Scene pools for the training phases and the held-out test set.

    Scene ids are consecutive and the pools are disjoint, so the test pool is
    a grouped hold-out by construction.
    """
    seed: int = 0
    pretrain_scenes: int = 500
    paired_scenes: int = 400
    style_scenes: int = 40
    test_scenes: int = 80
    canvas: int = 32

    def validate(self) -> None:
        for name in ("pretrain_scenes", "paired_scenes", "style_scenes", "test_scenes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        SceneParams(canvas=self.canvas).validate()

    def to_dict(self) -> dict:
        return asdict(self)


POOLS = ("pretrain", "paired", "style", "test")


def scene_seed(corpus_seed: int, scene_id: int) -> int:
    return int(np.random.SeedSequence([int(corpus_seed), int(scene_id)]).generate_state(1)[0])


def pool_scenes(cfg: CorpusConfig) -> dict[str, list[SceneSpec]]:
    """Scene specs per pool. Paired scenes get mixed styles; style and test pools the target style."""
    cfg.validate()
    params = SceneParams(canvas=cfg.canvas)
    pools: dict[str, list[SceneSpec]] = {}
    start = 0
    for pool in POOLS:
        count = getattr(cfg, f"{pool}_scenes")
        fixed = TARGET_STYLE if pool in ("style", "test") else None
        pools[pool] = [gen_scene(scene_seed(cfg.seed, i), params, fixed, scene_id=i)
                       for i in range(start, start + count)]
        start += count
    return pools


@dataclass
class Corpus:
    pairs: list[RenderedPair]
    pools: dict[str, list[int]] = field(default_factory=dict)   # pool -> indices into pairs
    config: dict = field(default_factory=dict)

    def pool(self, name: str) -> list[RenderedPair]:
        return [self.pairs[i] for i in self.pools.get(name, [])]


def build_corpus(cfg: CorpusConfig) -> Corpus:
    """Render all pools. The pretrain pool contributes every style per scene."""
    pairs: list[RenderedPair] = []
    pools: dict[str, list[int]] = {}
    for pool, scenes in pool_scenes(cfg).items():
        idx = []
        for sc in scenes:
            styles = range(len(STYLES)) if pool == "pretrain" else (sc.style,)
            for st in styles:
                idx.append(len(pairs))
                pairs.append(render_pair(sc, st))
        pools[pool] = idx
    return Corpus(pairs, pools, {"kind": "default", **cfg.to_dict()})


@dataclass(frozen=True)
class DuplicateCorpusConfig:
    """Near-duplicate scene groups. ``style`` fixes one style for every group; None draws one per group."""
    seed: int = 0
    scenes: int = 60
    variants: int = 5
    canvas: int = 32
    style: int | None = TARGET_STYLE

    def to_dict(self) -> dict:
        return asdict(self)


def build_duplicate_corpus(cfg: DuplicateCorpusConfig) -> Corpus:
    if cfg.scenes < 1 or cfg.variants < 1:
        raise ConfigError("duplicate corpus needs positive scene and variant counts")
    if cfg.style is not None and not 0 <= cfg.style < len(STYLES):
        raise ConfigError(f"unknown style id {cfg.style!r}")
    params = SceneParams(canvas=cfg.canvas)
    pairs = []
    for i in range(cfg.scenes):
        base = gen_scene(scene_seed(cfg.seed + 10_007, i), params, cfg.style, scene_id=i)
        for v in range(cfg.variants):
            pairs.append(render_pair(jitter_scene(base, v, params.jitter)))
    return Corpus(pairs, {"all": list(range(len(pairs)))}, {"kind": "duplicate", **cfg.to_dict()})


def manifest(corpus: Corpus) -> dict:
    return {
        "generator": corpus.config,
        "classes": {name: CLASS_IDS[name] for name in CLASS_NAMES},
        "temperature": dict(TEMPERATURE),
        "background_temperature_scale": BACKGROUND_TEMPERATURE_SCALE,
        "styles": [asdict(s) for s in STYLES],
        "pools": {k: [corpus.pairs[i].key for i in v] for k, v in corpus.pools.items()},
        "scenes": {p.key: p.scene.to_dict() for p in corpus.pairs if p.scene is not None},
    }


def write_corpus(corpus: Corpus, root) -> None:
    root = Path(root)
    for sub in ("visible", "infrared", "segmap"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for p in corpus.pairs:
        name = f"{p.key}.png"
        write_image(p.visible, root / "visible" / name)
        write_image(p.infrared, root / "infrared" / name)
        write_image(p.segmap, root / "segmap" / name)
        rows.append((f"infrared/{name}", p.caption))
    with open(root / "captions.tsv", "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerows(rows)
    if corpus.config:
        (root / "manifest.json").write_text(json.dumps(manifest(corpus), indent=1, sort_keys=True) + "\n")


def _parse_key(stem: str) -> tuple[int, int, int]:
    parts = stem.split("_")
    if len(parts) != 3 or not all(p.lstrip("-").isdigit() for p in parts):
        raise FormatError(f"file name {stem!r} does not follow <scene>_<variant>_<style>")
    a, b, c = (int(p) for p in parts)
    return a, b, c


def read_corpus(root) -> Corpus:
    """Load a corpus written by :func:`write_corpus` or an external directory in the same layout."""
    root = Path(root)
    vis_dir = root / "visible"
    if not vis_dir.is_dir():
        raise FormatError(f"{root} has no visible/ directory")
    captions = {}
    if (root / "captions.tsv").exists():
        with open(root / "captions.tsv", newline="") as fh:
            for row in csv.reader(fh, delimiter="\t"):
                if len(row) == 2:
                    captions[Path(row[0]).stem] = row[1]
    meta = json.loads((root / "manifest.json").read_text()) if (root / "manifest.json").exists() else {}
    scenes = meta.get("scenes", {})
    pairs = []
    for path in sorted(vis_dir.glob("*.png")):
        sid, var, st = _parse_key(path.stem)
        ir_path = root / "infrared" / path.name
        seg_path = root / "segmap" / path.name
        ir = read_image(ir_path) if ir_path.exists() else None
        seg = read_image(seg_path) if seg_path.exists() else None
        spec = scene_from_dict(scenes[path.stem]) if path.stem in scenes else None
        pairs.append(RenderedPair(read_image(path), ir, seg, captions.get(path.stem, INFRARED_PREFIX),
                                  sid, var, st, spec))
    index = {p.key: i for i, p in enumerate(pairs)}
    pools = {k: [index[n] for n in v if n in index] for k, v in meta.get("pools", {}).items()}
    return Corpus(pairs, pools, meta.get("generator", {}))


def scene_from_dict(d: dict) -> SceneSpec:
    d = dict(d)
    d["objects"] = tuple(SceneObject(**o) for o in d["objects"])
    d["shadows"] = tuple(tuple(tuple(v) for v in p) for p in d["shadows"])
    return SceneSpec(**d)
