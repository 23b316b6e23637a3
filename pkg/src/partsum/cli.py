"""Command-line entry point: ``partsum {gen-data,train,eval,verify,dump-attn}``.

Exit codes: 0 success, 1 failed verification, 2 configuration error, 3 data error,
4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import geometry
from .attention import ConfigError
from .checkpoint import CheckpointError
from .data import DataError, Vocab
from .decoder import TABLE_ROWS
from .evaluation import dump_predictions, evaluate_modes, write_metrics
from .heads import available_modes
from .scenes import SceneGenConfig, generate_dataset, load_dataset, save_dataset, tokens_for
from .train import DivergenceError, load_run, predict_scenes, train, with_variant

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partsum", description="Composite relation detection on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=200)
    g.add_argument("--out", required=True)
    d = SceneGenConfig()
    g.add_argument("--n-entity-labels", type=int, default=d.n_entity_labels)
    g.add_argument("--n-predicate-labels", type=int, default=d.n_predicate_labels)
    g.add_argument("--entities-per-scene", type=int, nargs=2, default=list(d.entities_per_scene), metavar=("LO", "HI"))
    g.add_argument("--relations-per-scene", type=int, nargs=2, default=list(d.relations_per_scene), metavar=("LO", "HI"))
    g.add_argument("--min-size", type=float, default=d.min_size)
    g.add_argument("--max-size", type=float, default=d.max_size)
    g.add_argument("--nest-prob", type=float, default=d.nest_prob)

    t = sub.add_parser("train", help="train one model, or sweep decoder variants")
    t.add_argument("--config", help="flat section.key = value config file")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    t.add_argument("--variant", action="append", default=[],
                   help="decoder variant or table row a-e; repeat or comma-separate to sweep sequentially")
    t.add_argument("--resume", help="checkpoint to continue from (single run only)")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="evaluate a trained run")
    e.add_argument("--run", required=True, help="run directory written by 'train'")
    e.add_argument("--checkpoint", default="final", help="'final', 'best', or a checkpoint name in the run")
    e.add_argument("--data", required=True)
    e.add_argument("--modes", nargs="+", help="inference modes (default: all the model supports)")
    e.add_argument("--out", help="metrics JSON path (default: stdout)")
    e.add_argument("--dump-predictions", help="write per-query predictions as JSON lines")
    e.add_argument("--top-k", type=int, default=None, help="truncate class lists in the dump")

    v = sub.add_parser("verify", help="run the self-check suites and print a JSON report")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--instances", type=int, default=20, help="random instances per gradient check")
    v.add_argument("--sweep", type=int, default=200, help="random matrices per size for the solver sweep")
    v.add_argument("--skip-end-to-end", action="store_true")
    v.add_argument("--out")
    v.add_argument("--mutate", choices=["giou-grad-sign"], help=argparse.SUPPRESS)

    a = sub.add_parser("dump-attn", help="dump decoder cross-attention maps for one scene")
    a.add_argument("--run", required=True)
    a.add_argument("--checkpoint", default="final")
    a.add_argument("--data", required=True)
    a.add_argument("--scene", type=int, default=0)
    a.add_argument("--out", required=True)
    return p


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = SceneGenConfig(n_entity_labels=args.n_entity_labels, n_predicate_labels=args.n_predicate_labels,
                         entities_per_scene=tuple(args.entities_per_scene),
                         relations_per_scene=tuple(args.relations_per_scene),
                         min_size=args.min_size, max_size=args.max_size, nest_prob=args.nest_prob,
                         seed=args.seed)
    ds = generate_dataset(cfg, args.scenes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    n_rel = [len(s.relations) for s in ds.scenes]
    n_ent = [len(s.entities) for s in ds.scenes]
    print(f"wrote {len(ds)} scenes to {out}: {sum(n_rel)} relations "
          f"({min(n_rel)}-{max(n_rel)} per scene), {min(n_ent)}-{max(n_ent)} entities per scene")
    return EXIT_OK


def _variants(raw: list[str]) -> list[str]:
    out = []
    for item in raw:
        out += [v.strip() for v in item.split(",") if v.strip()]
    return out


def cmd_train(args) -> int:
    from .config import load_config
    run_cfg = load_config(args.config, args.set)
    train_ds = load_dataset(run_cfg.data.train)
    test_ds = load_dataset(run_cfg.data.test) if run_cfg.data.test else None
    vocab = Vocab.from_scenes(train_ds.scenes, train_ds.n_entity, train_ds.n_predicate)
    base = run_cfg.train_config()
    generator = SceneGenConfig.from_json(train_ds.generator) if train_ds.generator else None
    variants = _variants(args.variant)
    if args.resume and len(variants) > 1:
        raise ConfigError("--resume applies to a single run, not a variant sweep")
    jobs = [(run_cfg.run_dir, base)] if not variants else [
        (run_cfg.run_dir / TABLE_ROWS.get(v, v), with_variant(base, v)) for v in variants]
    for run_dir, cfg in jobs:
        run_dir.mkdir(parents=True, exist_ok=True)
        dec = cfg.model.decoder
        persisted = replace(run_cfg, decoder=dec)
        (run_dir / "run.cfg").write_text(persisted.dumps())
        print(f"training {dec.variant} ({dec.interaction} interaction) -> {run_dir}", flush=True)
        result = train(train_ds.scenes, vocab, cfg, run_dir,
                       eval_scenes=test_ds.scenes if test_ds else None,
                       resume=args.resume, verbose=not args.quiet, generator=generator)
        last = result.log[-1] if result.log else {}
        print(f"done: final loss {float(last.get('loss', float('nan'))):.4f}, best R@50 {result.best_metric}")
    return EXIT_OK


def _resolve_checkpoint(run: str, which: str) -> str:
    name = which[:-5] if which.endswith(".ckpt") else which
    if not (Path(run) / f"{name}.ckpt").exists():
        raise DataError(f"no checkpoint {name}.ckpt in {run}")
    return name


def cmd_eval(args) -> int:
    model = load_run(args.run, _resolve_checkpoint(args.run, args.checkpoint))
    ds = load_dataset(args.data)
    if ds.n_entity != model.vocab.n_entity or ds.n_predicate != model.vocab.n_predicate:
        raise DataError("dataset label vocabularies do not match the trained model")
    preds = predict_scenes(model, tokens_for(ds.scenes, model.config.grid, ds.n_entity))
    supported = available_modes(preds[0])
    modes = args.modes or supported
    for mode in modes:
        if mode not in supported:
            raise ConfigError(f"mode {mode!r} not available for this model; choose from {supported}")
    metrics = evaluate_modes(preds, [s.instances() for s in ds.scenes], ds.n_predicate, modes)
    if args.dump_predictions:
        dump_predictions(preds, args.dump_predictions, args.top_k)
    if args.out:
        write_metrics(metrics, args.out)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verification
    original = geometry._giou_backward
    if args.mutate == "giou-grad-sign":
        geometry._giou_backward = lambda cache, g: tuple(-x for x in original(cache, g))
    try:
        report = run_verification(args.seed, args.instances, args.sweep, not args.skip_end_to_end)
    finally:
        geometry._giou_backward = original
    text = json.dumps(report, indent=2, default=float)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else 1


def cmd_dump_attn(args) -> int:
    """JSON: ``part[layer][query][part][token]`` and ``sum[layer][query][token]``, head-averaged."""
    model = load_run(args.run, _resolve_checkpoint(args.run, args.checkpoint))
    ds = load_dataset(args.data)
    if not 0 <= args.scene < len(ds):
        raise DataError(f"scene {args.scene} outside dataset of {len(ds)} scenes")
    tokens = tokens_for([ds.scenes[args.scene]], model.config.grid, ds.n_entity)
    from . import tensor as T
    with T.no_grad():
        _, dec = model(tokens, capture=True)
    cfg = model.config.decoder
    dump = {"variant": cfg.variant, "scene": args.scene, "layers": cfg.n_layers,
            "queries": cfg.n_queries, "tokens": model.config.grid ** 2, "grid": model.config.grid,
            "part_order": ["subject", "object", "predicate"]}
    for key in ("part", "sum"):
        maps = [layer[key][0] for layer in dec.attention if layer.get(key) is not None]
        if maps:
            dump[key] = np.stack(maps).tolist()
    Path(args.out).write_text(json.dumps(dump) + "\n")
    print(f"wrote attention maps for {cfg.n_layers} layers to {args.out}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "verify": cmd_verify, "dump-attn": cmd_dump_attn}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        where = f" (diagnostics in {exc.dump_path})" if exc.dump_path else ""
        print(f"diverged: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
