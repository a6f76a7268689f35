"""Translation of visible renders with a trained state, plus the experiment recipes
(full progressive run, phase and conditioning ablations, split leakage).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .conditioning import assemble_condition, from_unit
from .diffusion import GuidanceScales, SamplerConfig, sample
from .errors import ConfigError
from .metrics import FeatureExtractor, MetricsReport, evaluate, mean_psnr, mean_ssim
from .nn import DenoiserConfig
from .scenes import (Corpus, CorpusConfig, DuplicateCorpusConfig, RenderedPair, build_duplicate_corpus, grouped_split, halo_probe, render_pair, style_distance)
from .trainer import (PhaseConfig, TrainState, checkpoint_bytes, load_checkpoint_bytes, new_state,
                      prepare_for_conditioning, run_phase0, run_phase1, run_phase2, run_phase3)

log = logging.getLogger(__name__)


def translate(state: TrainState, visible: Sequence[np.ndarray], segmaps: Sequence[np.ndarray] | None,
              captions: Sequence[str] | None, scales: GuidanceScales | None = None,
              sampler: SamplerConfig | None = None, batch: int = 80) -> list[np.ndarray]:
    """Infrared renders for a list of 8-bit visible images.

    Missing segmaps or captions enter as null conditions. Batch ``k`` uses
    sampler seed ``seed + k`` so results do not depend on the batch size
    only through the seed schedule.
    """
    scales = scales or GuidanceScales()
    sampler = sampler or SamplerConfig()
    model = state.model
    out: list[np.ndarray] = []
    n = len(visible)
    f = state.ae.factor
    for k, start in enumerate(range(0, n, batch)):
        sl = slice(start, min(n, start + batch))
        vis = np.stack(visible[sl])
        seg = np.stack(segmaps[sl]) if segmaps is not None else None
        caps = list(captions[sl]) if captions is not None else None
        cond = assemble_condition(vis, seg, caps, state.ae)
        b, h, w = vis.shape
        shape = (b, state.ae.latent_channels, h // f, w // f)
        img = sample(model, cond, scales, replace(sampler, seed=sampler.seed + k), state.schedule, shape, state.ae)
        out.extend(from_unit(img[:, 0]))
    return out


def translate_pairs(state: TrainState, pairs: Sequence[RenderedPair], use_segmap: bool = True,
                    use_caption: bool = True, **kw) -> list[np.ndarray]:
    return translate(state, [p.visible for p in pairs],
                     [p.segmap for p in pairs] if use_segmap else None,
                     [p.caption for p in pairs] if use_caption else None, **kw)


# ---------------------------------------------------------------- recipes


@dataclass(frozen=True)
class RecipeConfig:
    """Toy-scale settings shared by the end-to-end, ablation and leakage experiments."""
    seed: int = 0
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    phase0: PhaseConfig = field(default_factory=lambda: PhaseConfig.default(0))
    phase1: PhaseConfig = field(default_factory=lambda: PhaseConfig.default(1))
    phase2: PhaseConfig = field(default_factory=lambda: PhaseConfig.default(2))
    phase3: PhaseConfig = field(default_factory=lambda: PhaseConfig.default(3))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    scales: GuidanceScales = field(default_factory=GuidanceScales)

    def seeded(self, seed: int) -> RecipeConfig:
        return replace(self, seed=seed, model=replace(self.model, seed=seed),
                       corpus=replace(self.corpus, seed=seed),
                       phase0=replace(self.phase0, seed=seed), phase1=replace(self.phase1, seed=seed),
                       phase2=replace(self.phase2, seed=seed), phase3=replace(self.phase3, seed=seed),
                       sampler=replace(self.sampler, seed=seed))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "model": self.model.to_dict(), "corpus": self.corpus.to_dict(),
                "phase0": self.phase0.to_dict(), "phase1": self.phase1.to_dict(),
                "phase2": self.phase2.to_dict(), "phase3": self.phase3.to_dict(),
                "sampler": self.sampler.to_dict(), "scales": asdict(self.scales)}


def phase1_pairs(corpus: Corpus, seed: int) -> list[RenderedPair]:
    """One infrared render per pretrain scene, in a seeded random style."""
    pool = corpus.pool("pretrain")
    by_scene: dict[int, list[RenderedPair]] = {}
    for p in pool:
        by_scene.setdefault(p.scene_id, []).append(p)
    rng = np.random.default_rng([seed, 0x1D])
    return [group[int(rng.integers(0, len(group)))] for _, group in sorted(by_scene.items())]


def visible_pairs(corpus: Corpus) -> list[RenderedPair]:
    seen, out = set(), []
    for p in corpus.pool("pretrain"):
        if p.scene_id not in seen:
            seen.add(p.scene_id)
            out.append(p)
    return out


def run_phases(cfg: RecipeConfig, corpus: Corpus, phases: Sequence[int], base: TrainState | None = None,
               use_segmap: bool = True, use_caption: bool = True) -> TrainState:
    """Run the requested phases in order, starting from ``base`` (a copy is not made)."""
    state = base or new_state(cfg.model)
    for ph in phases:
        if ph == 0:
            run_phase0(state, visible_pairs(corpus), cfg.phase0)
        elif ph == 1:
            run_phase1(state, phase1_pairs(corpus, cfg.seed), cfg.phase1)
        elif ph in (2, 3):
            prepare_for_conditioning(state)
            pcfg = cfg.phase2 if ph == 2 else cfg.phase3
            pcfg = replace(pcfg, use_segmap=use_segmap, use_caption=use_caption)
            pool = corpus.pool("paired" if ph == 2 else "style")
            (run_phase2 if ph == 2 else run_phase3)(state, pool, pcfg)
        else:
            raise ConfigError(f"unknown phase {ph!r}")
    return state


@dataclass
class EvalResult:
    psnr: float
    ssim: float
    copy_psnr: float
    copy_ssim: float
    fid: float
    style_distance: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_state(state: TrainState, pairs: Sequence[RenderedPair], cfg: RecipeConfig,
                   use_segmap: bool = True, use_caption: bool = True) -> tuple[EvalResult, list[np.ndarray]]:
    out = translate_pairs(state, pairs, use_segmap, use_caption, scales=cfg.scales, sampler=cfg.sampler)
    ref = [p.infrared for p in pairs]
    vis = [p.visible for p in pairs]
    rep = evaluate(out, ref)
    res = EvalResult(rep.psnr, rep.ssim, mean_psnr(vis, ref), mean_ssim(vis, ref), rep.fid,
                     style_distance(out, [p.scene for p in pairs]), len(pairs))
    return res, out


def halo_energy_ratio(state: TrainState, pairs: Sequence[RenderedPair], cfg: RecipeConfig,
                      radii=(3, 9)) -> float:
    """Output difference energy over visible difference energy for halo-only scene changes."""
    lamp = [p.scene for p in pairs if any(o.cls == "lamp" for o in p.scene.objects)]
    a = [render_pair(s) for s in (halo_probe(sc, radii)[0] for sc in lamp)]
    b = [render_pair(s) for s in (halo_probe(sc, radii)[1] for sc in lamp)]
    out_a = translate_pairs(state, a, scales=cfg.scales, sampler=cfg.sampler)
    out_b = translate_pairs(state, b, scales=cfg.scales, sampler=cfg.sampler)
    e_out = sum(float(np.sum((x.astype(np.float64) - y) ** 2)) for x, y in zip(out_a, out_b))
    e_vis = sum(float(np.sum((p.visible.astype(np.float64) - q.visible) ** 2)) for p, q in zip(a, b))
    return e_out / e_vis


# ablation row sets: phases run after phase 0 (the pretrained stand-in)
PLM_ROWS = {"1+2+3": (1, 2, 3), "2+3": (2, 3), "1+3": (1, 3), "1+2": (1, 2), "3": (3,), "2": (2,)}
VLUM_ROWS = {"segmap+caption": (True, True), "segmap": (True, False), "caption": (False, True)}


@dataclass(frozen=True)
class LeakageConfig:
    seed: int = 0
    corpus: DuplicateCorpusConfig = field(default_factory=DuplicateCorpusConfig)
    test_fraction: float = 0.2
    phase2: PhaseConfig = field(default_factory=lambda: PhaseConfig.default(2, epochs=120))
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(steps=50))
    # unit scales: the comparison is about the split, so sample the plain conditional model
    scales: GuidanceScales = field(default_factory=lambda: GuidanceScales(1.0, 1.0, 1.0))


def leakage_experiment(cfg: LeakageConfig, base: TrainState) -> dict:
    """Train once, then score a leaky random-split test set and a clean grouped one.

    Scene groups are first held out whole (grouped test). The remaining items
    are split at random; the random test items share scenes with training.
    """
    corpus = build_duplicate_corpus(replace(cfg.corpus, seed=cfg.seed))
    rest, grouped_test = grouped_split(corpus.pairs, cfg.test_fraction, "grouped", cfg.seed)
    train, random_test = grouped_split(rest, cfg.test_fraction, "random", cfg.seed)
    n = min(len(random_test), len(grouped_test))
    random_test, grouped_test = random_test[:n], grouped_test[:n]
    state = prepare_for_conditioning(base)
    run_phase2(state, train, replace(cfg.phase2, seed=cfg.seed))
    rows = {}
    fx = FeatureExtractor()
    for name, items in (("random", random_test), ("grouped", grouped_test)):
        out = translate_pairs(state, items, scales=cfg.scales, sampler=replace(cfg.sampler, seed=cfg.seed))
        rep: MetricsReport = evaluate(out, [p.infrared for p in items], fx)
        rows[name] = {"fid": rep.fid, "psnr": rep.psnr, "ssim": rep.ssim, "n": n}
    return rows


def clone_state(state: TrainState) -> TrainState:
    """Independent copy through the checkpoint codec (bitwise for every parameter)."""
    return load_checkpoint_bytes(checkpoint_bytes(state))


def _row(name: str, res: EvalResult, **extra) -> dict:
    return {"row": name, **extra, "fid": res.fid, "psnr": res.psnr, "ssim": res.ssim, "n": res.n}


def plm_table(cfg: RecipeConfig, corpus: Corpus, base: TrainState, rows=None,
              use_segmap: bool = False, use_caption: bool = False) -> list[dict]:
    """Phase-combination grid. Every row starts from a copy of ``base`` (the phase-0 state).

    Rows default to no extra embeddings, matching the phase ablation layout.
    """
    out = []
    test = corpus.pool("test")
    for name in rows or PLM_ROWS:
        state = run_phases(cfg, corpus, PLM_ROWS[name], clone_state(base), use_segmap, use_caption)
        res, _ = evaluate_state(state, test, cfg, use_segmap, use_caption)
        out.append(_row(name, res, phases=list(PLM_ROWS[name]), seed=cfg.seed))
    return out


def vlum_table(cfg: RecipeConfig, corpus: Corpus, base: TrainState, rows=None,
               phase1: TrainState | None = None) -> list[dict]:
    """Conditioning grid with all three phases. ``phase1`` may carry a shared phase-1 state."""
    out = []
    test = corpus.pool("test")
    for name in rows or VLUM_ROWS:
        seg, cap = VLUM_ROWS[name]
        if phase1 is not None:
            state = run_phases(cfg, corpus, (2, 3), clone_state(phase1), seg, cap)
        else:
            state = run_phases(cfg, corpus, (1, 2, 3), clone_state(base), seg, cap)
        res, _ = evaluate_state(state, test, cfg, seg, cap)
        out.append(_row(name, res, segmap=seg, caption=cap, seed=cfg.seed))
    return out


HYPER_GRID = {"steps": (50, 100, 150, 200), "s_T": (5.0, 7.5, 10.0), "s_V": (1.0, 1.5, 2.0), "s_S": (1.0, 1.5, 2.0)}


def hyper_table(cfg: RecipeConfig, state: TrainState, pairs: Sequence[RenderedPair]) -> list[dict]:
    """Steps and guidance-scale sweep around the default setting, one axis at a time."""
    out = []
    for axis, values in HYPER_GRID.items():
        for v in values:
            if axis == "steps":
                c = replace(cfg, sampler=replace(cfg.sampler, steps=int(v)))
            else:
                c = replace(cfg, scales=replace(cfg.scales, **{axis: float(v)}))
            res, _ = evaluate_state(state, pairs, c)
            out.append(_row(f"{axis}={v}", res, axis=axis, value=v, seed=cfg.seed))
    return out
