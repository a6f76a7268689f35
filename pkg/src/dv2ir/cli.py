"""Command-line entry point: ``dv2ir <verb> [flags]``.

Verbs: gendata, train, translate, eval, ablate, split. Every verb accepts
``--config`` (JSON run config), ``--seed`` (default: $DV2IR_SEED, then the
config value) and ``--threads`` (BLAS thread cap; 1 gives byte-identical
reruns). Library errors map to exit codes: 2 usage/config, 3 format,
4 numeric, 5 contract or shape.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline as P
from .captions import INFRARED_PREFIX
from .config import RunConfig, load_config
from .diffusion import GuidanceScales
from .errors import DV2IRError, UsageError
from .metrics import FeatureExtractor, evaluate
from .scenes import (Corpus, build_corpus, build_duplicate_corpus, grouped_split, read_corpus, read_image,
                     straddling_groups, write_corpus, write_image)
from .trainer import TrainState, load_checkpoint, new_state, save_checkpoint

log = logging.getLogger("dv2ir")

PHASE_CHOICES = ("0", "1", "2", "3", "all")


# ---------------------------------------------------------------- helpers


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = args.seed
    if seed is None and os.environ.get("DV2IR_SEED"):
        try:
            seed = int(os.environ["DV2IR_SEED"])
        except ValueError as exc:
            raise UsageError(f"DV2IR_SEED must be an integer, got {os.environ['DV2IR_SEED']!r}") from exc
    if seed is not None:
        cfg = cfg.seeded(seed)
    return cfg


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} exists and is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def _load_state(path) -> TrainState:
    if path is None or not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _read_dir_images(d: Path) -> dict[str, np.ndarray]:
    if not d.is_dir():
        raise UsageError(f"{d} is not a directory")
    return {p.stem: read_image(p) for p in sorted(d.glob("*.png"))}


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- verbs


def cmd_gendata(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    if args.kind == "duplicate":
        dc = replace(cfg.duplicate_corpus, seed=cfg.seed)
        if args.scenes is not None:
            dc = replace(dc, scenes=args.scenes)
        corpus = build_duplicate_corpus(dc)
    else:
        cc = replace(cfg.corpus, seed=cfg.seed)
        if args.scenes is not None:
            cc = replace(cc, paired_scenes=args.scenes)
        corpus = build_corpus(cc)
    write_corpus(corpus, out)
    print(f"wrote {len(corpus.pairs)} pairs to {out}")
    return 0


def _phase_list(phase: str, state: TrainState) -> list[int]:
    if phase == "all":
        return [p for p in (0, 1, 2, 3) if p not in state.provenance]
    return [int(phase)]


def _check_prerequisites(phases, state: TrainState, proceed: bool) -> None:
    done = set(state.provenance)
    for ph in phases:
        missing = [p for p in range(1, ph) if p not in done] if ph >= 2 else []
        if missing:
            msg = f"phase {ph} requested without phase(s) {missing} in the checkpoint provenance"
            if not proceed:
                raise UsageError(msg + " (pass --allow-skip to train anyway)")
            log.warning("%s; proceeding", msg)
        done.add(ph)


def cmd_train(args, cfg: RunConfig) -> int:
    corpus = read_corpus(args.corpus)
    if args.init:
        state = _load_state(args.init)
    else:
        state = new_state(cfg.model, cfg.schedule.build())
    phases = _phase_list(args.phase, state)
    _check_prerequisites(phases, state, args.allow_skip)
    recipe = cfg.recipe()
    if args.epochs is not None:
        recipe = replace(recipe, **{f"phase{i}": replace(getattr(recipe, f"phase{i}"), epochs=args.epochs)
                                    for i in range(4)})
    for ph in phases:
        log.info("training phase %d", ph)
        P.run_phases(recipe, corpus, (ph,), state, not args.no_segmap, not args.no_caption)
    save_checkpoint(state, args.out)
    if args.loss_log:
        with open(args.loss_log, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["phase", "epoch", "mean_loss"])
            for ph in phases:
                for e, v in enumerate(state.history[ph]["loss"]):
                    w.writerow([ph, e, repr(float(v))])
    print(f"provenance {list(state.provenance)} -> {args.out}")
    return 0


def _translation_inputs(src: Path, pool: str | None):
    """(names, visible, segmaps, captions) from a corpus root or a flat image directory."""
    if (src / "visible").is_dir():
        corpus: Corpus = read_corpus(src)
        pairs = corpus.pool(pool) if pool else corpus.pairs
        if pool and not pairs:
            raise UsageError(f"corpus {src} has no pool {pool!r}")
        segs = [p.segmap if p.segmap is not None else np.zeros_like(p.visible) for p in pairs]
        return [p.key for p in pairs], [p.visible for p in pairs], segs, [p.caption for p in pairs]
    imgs = _read_dir_images(src)
    if not imgs:
        raise UsageError(f"no .png images in {src}")
    names = list(imgs)
    vis = [imgs[n] for n in names]
    return names, vis, [np.zeros_like(v) for v in vis], [INFRARED_PREFIX] * len(vis)


def cmd_translate(args, cfg: RunConfig) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    state = _load_state(args.ckpt)
    if args.steps > state.schedule.T:
        raise UsageError(f"--steps must not exceed the schedule length {state.schedule.T}")
    scales = GuidanceScales(args.sv, args.ss, args.st)
    sampler = replace(cfg.sampler, steps=args.steps, seed=cfg.seed)
    if args.sampler:
        sampler = replace(sampler, kind=args.sampler)
    names, vis, segs, caps = _translation_inputs(Path(args.visible), args.pool)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    images = P.translate(state, vis, segs, caps, scales, sampler, batch=args.batch)
    for n, img in zip(names, images):
        write_image(img, out / f"{n}.png")
    print(f"translated {len(images)} images -> {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ours = _read_dir_images(Path(args.translated))
    ref_dir = Path(args.reference)
    if (ref_dir / "infrared").is_dir():
        # a corpus root: score against the matching subset (e.g. one pool)
        ref = {n: read_image(ref_dir / "infrared" / f"{n}.png") for n in ours
               if (ref_dir / "infrared" / f"{n}.png").is_file()}
    else:
        ref = _read_dir_images(ref_dir)
    if len(ours) != len(ref) or set(ours) != set(ref):
        raise UsageError(f"paired metrics need matching file sets ({len(ours)} translated vs {len(ref)} reference)")
    names = sorted(ours)
    rep = evaluate([ours[n] for n in names], [ref[n] for n in names], FeatureExtractor(cfg.metrics.feature_seed),
                   cfg.config_hash)
    rep.save(args.report)
    print(rep.to_json())
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    recipe = cfg.recipe()
    corpus = read_corpus(args.corpus) if args.corpus else build_corpus(recipe.corpus)
    if args.base:
        base = _load_state(args.base)
        if tuple(base.provenance) != (0,):
            raise UsageError("--base must be a phase-0 checkpoint")
    else:
        base = P.run_phases(recipe, corpus, (0,), new_state(cfg.model, cfg.schedule.build()))
    table: dict[str, list] = {"config_hash": cfg.config_hash, "seed": cfg.seed}
    if "plm" in args.grids:
        table["plm"] = P.plm_table(recipe, corpus, base)
    full = None
    if "vlum" in args.grids:
        table["vlum"] = P.vlum_table(recipe, corpus, base)
    if "hyper" in args.grids:
        full = P.run_phases(recipe, corpus, (1, 2, 3), P.clone_state(base))
        table["hyper"] = P.hyper_table(recipe, full, corpus.pool("test"))
    _write_json(table, out / "ablation.json")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid", "row", "seed", "fid", "psnr", "ssim", "n"])
        for grid in ("plm", "vlum", "hyper"):
            for r in table.get(grid, []):
                w.writerow([grid, r["row"], r["seed"], repr(r["fid"]), repr(r["psnr"]), repr(r["ssim"]), r["n"]])
    print(f"wrote {out / 'ablation.json'}")
    return 0


def cmd_split(args, cfg: RunConfig) -> int:
    corpus = read_corpus(args.corpus)
    if not corpus.pairs:
        raise UsageError(f"corpus {args.corpus} is empty")
    train, test = grouped_split(corpus.pairs, args.fraction, args.mode, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, items in (("train", train), ("test", test)):
        (out / f"{name}.txt").write_text("".join(f"visible/{p.key}.png\n" for p in items))
    straddle = straddling_groups(train, test)
    report = {"mode": args.mode, "fraction": args.fraction, "seed": cfg.seed, "n_train": len(train),
              "n_test": len(test), "straddling_scene_ids": len(straddle), "scene_ids": sorted(straddle)}
    _write_json(report, out / "leakage.json")
    print(json.dumps({k: v for k, v in report.items() if k != "scene_ids"}, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, default=None, help="global seed (default: $DV2IR_SEED, then the config)")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads; 1 makes reruns byte-identical")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dv2ir", description="Toy visible-to-infrared diffusion translation.")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gendata", help="render a synthetic corpus")
    _add_common(p)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--kind", choices=("default", "duplicate"), default="default",
                   help="phase pools with a held-out test pool, or near-duplicate scene groups")
    p.add_argument("--scenes", type=int, default=None, help="paired scenes (default) or scene groups (duplicate)")
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="run training phases and write a checkpoint")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="corpus directory written by gendata")
    p.add_argument("--phase", choices=PHASE_CHOICES, default="all", help="phase to run; 'all' chains 0 to 3")
    p.add_argument("--init", help="checkpoint to continue from")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--loss-log", help="CSV of per-epoch mean loss (phase, epoch, mean_loss)")
    p.add_argument("--epochs", type=int, default=None, help="override the epoch count of the phases run")
    p.add_argument("--allow-skip", action="store_true",
                   help="proceed when earlier phases are missing from the checkpoint provenance")
    p.add_argument("--no-segmap", action="store_true", help="train without the segmentation condition")
    p.add_argument("--no-caption", action="store_true", help="train without detailed captions")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate visible images to infrared")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--visible", required=True, help="corpus directory or a directory of .png images")
    p.add_argument("--out", required=True, help="output image directory")
    p.add_argument("--pool", default=None, help="corpus pool to translate (default: every pair)")
    p.add_argument("--sv", type=float, default=1.5, help="visible-image guidance scale")
    p.add_argument("--ss", type=float, default=1.5, help="segmentation guidance scale")
    p.add_argument("--st", type=float, default=7.5, help="caption guidance scale")
    p.add_argument("--steps", type=int, default=100, help="sampling steps")
    p.add_argument("--sampler", choices=("deterministic-ddim", "ancestral-ddpm"), default=None)
    p.add_argument("--batch", type=int, default=80, help="images per sampling batch")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="score translated images against references")
    _add_common(p)
    p.add_argument("--translated", required=True, help="directory of translated .png images")
    p.add_argument("--reference", required=True, help="reference directory (or a corpus root)")
    p.add_argument("--report", required=True, help="metrics report JSON to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="phase, conditioning and sampling-hyperparameter ablations")
    _add_common(p)
    p.add_argument("--corpus", default=None, help="corpus directory (default: generate from the config)")
    p.add_argument("--base", default=None, help="phase-0 checkpoint shared by every row")
    p.add_argument("--out", required=True, help="output directory for ablation.json and ablation.csv")
    p.add_argument("--grids", nargs="+", choices=("plm", "vlum", "hyper"), default=["plm", "vlum", "hyper"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("split", help="write train/test manifests and a leakage report")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--mode", choices=("grouped", "random"), default="grouped")
    p.add_argument("--fraction", type=float, default=0.2, help="test fraction")
    p.add_argument("--out", required=True, help="output directory for manifests")
    p.set_defaults(func=cmd_split)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be at least 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args, cfg)
        return args.func(args, cfg)
    except DV2IRError as exc:
        print(f"dv2ir: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
