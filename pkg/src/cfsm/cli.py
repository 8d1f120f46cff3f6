"""Command-line entry point: ``cfsm <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 usage/config error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config, require, validate
from .data import (DEGRADATION_PRESETS, DegradationSpec, Manifest, build_target_set, generate_toy_dataset,
                   read_image)

log = logging.getLogger("cfsm")

MODE_ALIASES = {"baseline": "baseline", "random": "random_style", "random_style": "random_style",
                "guided": "guided"}


def _degradation(preset: str | None, override: dict | None) -> DegradationSpec | None:
    if override:
        return DegradationSpec.from_dict(override)
    if preset is None:
        return None
    try:
        return DEGRADATION_PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown degradation preset {preset!r}; choose from {sorted(DEGRADATION_PRESETS)}") from None


def _record_config(cfg: RunConfig, out: Path, argv: list[str]):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps({"argv": argv, "config": cfg.to_dict()}, indent=2))


def _apply_seed(cfg: RunConfig, seed: int | None):
    if seed is None:
        return
    for section in (cfg.data, cfg.stage1, cfg.stage2, cfg.eval):
        section.seed = seed


def cmd_make_data(cfg: RunConfig, args, out: Path):
    d = cfg.data
    source = generate_toy_dataset(d.num_identities, d.samples_per_id, d.image_size, d.seed, out / "source")
    # target pool: disjoint identities, degraded and stripped of labels
    pool = generate_toy_dataset(d.target_identities, d.samples_per_id, d.image_size, d.seed + 7919,
                                out / "target_pool", first_identity=d.num_identities)
    spec = _degradation(d.target_preset, d.degradation)
    target = build_target_set(pool, spec, d.target_fraction, d.seed, out / "target",
                              exclude_identities={r.identity_id for r in source.records})
    print(f"source: {len(source)} images, {source.num_identities} identities -> {out / 'source'}")
    print(f"target: {len(target)} unlabeled images -> {out / 'target'}")


def cmd_train_cfsm(cfg: RunConfig, args, out: Path):
    from .stage1 import train_synthesis
    s1 = cfg.stage1
    if args.source:
        s1.source = args.source
    if args.target:
        s1.target = args.target
    if args.steps:
        s1.steps = args.steps
    require(s1, "source", "target")
    for key in ("source", "target"):
        p = Path(getattr(s1, key))
        if not (p / "manifest.jsonl").exists() and not p.is_file():
            raise ConfigError(f"stage1.{key}: manifest not found at {p}")
    ckpt, metrics = train_synthesis(s1, Manifest.load(s1.source), Manifest.load(s1.target), out)
    print(f"checkpoint: {ckpt}\nmetrics: {metrics}")


def cmd_train_fr(cfg: RunConfig, args, out: Path):
    from .stage2 import train_fr
    s2 = cfg.stage2
    if args.mode:
        s2.mode = MODE_ALIASES[args.mode]
    if args.labeled:
        s2.labeled = args.labeled
    if args.synthesis:
        s2.synthesis_checkpoint = args.synthesis
    if args.steps:
        s2.steps = args.steps
    if args.record_perturbations:
        s2.record_perturbations = True
    validate(cfg)
    require(s2, "labeled")
    if s2.mode != "baseline":
        require(s2, "synthesis_checkpoint")
    res = train_fr(s2, Manifest.load(s2.labeled), out)
    print(f"checkpoint: {res.checkpoint}\nmetrics: {res.metrics}")


def cmd_synthesize(cfg: RunConfig, args, out: Path):
    from .stage1 import load_cfsm
    from .visualize import render_traversal, save_image
    model, _ = load_cfsm(args.checkpoint)
    image = read_image(args.image)
    bases = [int(b) for b in args.bases.split(",")] if args.bases else [0, 1, 2]
    grid = render_traversal(model.synth, image, mode=args.mode, bases=bases, sigma_steps=args.sigma_steps,
                            seed=cfg.stage1.seed, n_directions=args.directions)
    path = out / f"traversal_{args.mode}.png"
    save_image(grid.compose(), path)
    print(f"grid: {path}")


def cmd_similarity(cfg: RunConfig, args, out: Path):
    from .similarity import similarity_from_checkpoints, write_csv, write_grid_image
    names = args.names.split(",") if args.names else None
    if names is not None and len(names) != len(args.checkpoints):
        raise ConfigError("--names must list one name per checkpoint")
    if len(args.checkpoints) < 2:
        raise ConfigError("similarity needs at least two checkpoints")
    m = similarity_from_checkpoints(args.checkpoints, names, align=args.align)
    csv_path = write_csv(m, out / "similarity.csv")
    png_path = write_grid_image(m, out / "similarity.png")
    print(f"csv: {csv_path}\npng: {png_path}")


def cmd_eval(cfg: RunConfig, args, out: Path):
    from .evaluation import evaluate
    ev = cfg.eval
    if args.checkpoint:
        ev.checkpoint = args.checkpoint
    if args.manifest:
        ev.manifest = args.manifest
    if args.degrade:
        ev.degrade_preset = args.degrade
    require(ev, "checkpoint", "manifest")
    m = Manifest.load(ev.manifest)
    spec = _degradation(ev.degrade_preset, ev.degradation)
    report = evaluate(ev.checkpoint, m.subset("test_gallery"), m.subset("test_probe"), spec, seed=ev.seed,
                      ks=ev.ks, fars=ev.fars)
    (out / "eval.json").write_text(report.to_json())
    print(report.to_json())


def cmd_analyze(cfg: RunConfig, args, out: Path):
    from .guidance import analyze_perturbations, load_records
    records = load_records(args.records)
    summary = analyze_perturbations(records, csv_path=out / "perturbations.csv")
    summary.pop("scatter")
    (out / "perturbation_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"{summary['count']} records; csv: {out / 'perturbations.csv'}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with sections data/stage1/stage2/eval")
    common.add_argument("--seed", type=int, help="override every section's seed")
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cfsm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    sp = sub.add_parser("make-data", parents=[common], help="generate source and degraded target datasets")
    sp.set_defaults(func=cmd_make_data)

    sp = sub.add_parser("train-cfsm", parents=[common], help="stage 1: train the synthesis model")
    sp.add_argument("--source")
    sp.add_argument("--target")
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_train_cfsm)

    sp = sub.add_parser("train-fr", parents=[common], help="stage 2: train the recognition model")
    sp.add_argument("--mode", choices=sorted(MODE_ALIASES))
    sp.add_argument("--labeled")
    sp.add_argument("--synthesis", help="stage-1 checkpoint (random/guided modes)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--record-perturbations", action="store_true")
    sp.set_defaults(func=cmd_train_fr)

    sp = sub.add_parser("synthesize", parents=[common], help="basis traversal or magnitude sweep")
    sp.add_argument("checkpoint")
    sp.add_argument("image")
    sp.add_argument("--mode", choices=["basis", "magnitude"], default="basis")
    sp.add_argument("--bases", help="comma-separated basis indices (default 0,1,2)")
    sp.add_argument("--sigma-steps", type=int, default=5)
    sp.add_argument("--directions", type=int, default=1)
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("similarity", parents=[common], help="pairwise subspace similarity matrix")
    sp.add_argument("checkpoints", nargs="+")
    sp.add_argument("--names")
    sp.add_argument("--align", choices=["index", "max_permutation"], default="index",
                    help="max_permutation is a diagnostic, not the defined metric")
    sp.set_defaults(func=cmd_similarity)

    sp = sub.add_parser("eval", parents=[common], help="rank-k and TAR@FAR on the test splits")
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest", help="labeled manifest holding test_gallery/test_probe records")
    sp.add_argument("--degrade", help=f"degrade probes with a preset: {sorted(DEGRADATION_PRESETS)}")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze-perturbations", parents=[common], help="histograms of o vs o* from train-fr")
    sp.add_argument("records", help="perturbations.npz written by train-fr --record-perturbations")
    sp.set_defaults(func=cmd_analyze)
    return p


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config)
        _apply_seed(cfg, args.seed)
        out = Path(args.out)
        _record_config(cfg, out, argv)
        torch.manual_seed(cfg.stage1.seed)
        np.random.seed(cfg.stage1.seed % 2 ** 32)
        args.func(cfg, args, out)
        _record_config(cfg, out, argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
