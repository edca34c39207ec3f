"""Command-line interface.

Subcommands: gen-data, train, eval, diagnose, revise, retrieve.  Outputs
meant for machines (reports, summaries, rankings) go to stdout as JSON;
progress logs go to stderr.  Exit codes: 0 success, 2 usage/config errors,
3 I/O errors, 4 training divergence, 5 checkpoint/file format errors,
6 revision finished below its threshold.

Heavy imports happen inside the command handlers so that --threads can cap
the BLAS thread pool via the environment before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_FORMAT = 5
EXIT_THRESHOLD = 6


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted both before and after the subcommand.
    # SUPPRESS defaults matter: subparsers copy their whole namespace over
    # the main one, so a plain None default would erase values parsed
    # before the subcommand.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS,
                        help="JSON file whose keys mirror flag names; flags win")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="global seed")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="suppress progress logs")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="cap BLAS threads (default: all cores)")

    parser = argparse.ArgumentParser(
        prog="outfitnet", parents=[common],
        description="Outfit compatibility prediction, diagnosis and revision "
                    "on synthetic outfit data.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_command(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add_command("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train", type=int, default=None, help="train outfits (default 2000)")
    p.add_argument("--val", type=int, default=None, help="val outfits (default 300)")
    p.add_argument("--test", type=int, default=None, help="test outfits (default 500)")
    p.add_argument("--palettes", type=int, default=None, help="palette count (default 4)")
    p.add_argument("--textures", type=int, default=None, help="texture count (default 3)")

    p = add_command("train", help="train a model and write a checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--no-vse", action="store_true", help="disable the VSE loss")
    p.add_argument("--no-projection", action="store_true",
                   help="disable the learned masks (plain cosine similarities)")
    p.add_argument("--layers", type=str, default=None,
                   help="comma-separated backbone stages to compare, e.g. 1,2,3,4")

    p = add_command("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--task", type=str, default="all",
                   choices=["auc", "fitb", "diagnosis", "all"])
    p.add_argument("--reps", type=int, default=None, help="repetitions (default 5)")
    p.add_argument("--split", type=str, default="test",
                   choices=["train", "val", "test"])

    p = add_command("diagnose", help="per-edge and per-item incompatibility report")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--outfit", type=Path, required=True,
                   help="outfit manifest (outfit.json or its directory)")

    p = add_command("revise", help="greedy substitution until compatible")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--outfit", type=Path, required=True)
    p.add_argument("--pool", type=Path, required=True,
                   help="dataset split directory supplying candidates")
    p.add_argument("--thr", type=float, default=None,
                   help="compatibility probability to reach (default 0.9)")
    p.add_argument("--out", type=Path, required=True,
                   help="directory for the revised outfit manifest")

    p = add_command("retrieve", help="nearest items by one stage's features")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--query", type=str, required=True,
                   help="item id in the corpus, or a path to a .ppm image")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--k", type=int, default=None, help="results to return (default 8)")
    p.add_argument("--corpus", type=Path, required=True,
                   help="dataset split directory to search")
    return parser


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    from .errors import ConfigError, IoError
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read config file {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def _opt(args, file_cfg: dict, name: str, default):
    """Flag value if given, else config-file value, else default."""
    val = getattr(args, name.replace("-", "_"), None)
    if val is not None and val is not False:
        return val
    if name in file_cfg:
        return file_cfg[name]
    return default


def _cmd_gen_data(args, file_cfg) -> int:
    from .data import GeneratorConfig, generate, save_dataset

    cfg = GeneratorConfig(
        n_outfits={"train": int(_opt(args, file_cfg, "train", 2000)),
                   "val": int(_opt(args, file_cfg, "val", 300)),
                   "test": int(_opt(args, file_cfg, "test", 500))},
        palettes=int(_opt(args, file_cfg, "palettes", 4)),
        textures=int(_opt(args, file_cfg, "textures", 3)),
        seed=int(_opt(args, file_cfg, "seed", 7)),
    )
    manifests = generate(cfg)
    save_dataset(manifests, args.out)
    summary = {split: {"outfits": len(m.outfits), "items": len(m.items)}
               for split, m in manifests.items()}
    summary["seed"] = cfg.seed
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _cmd_train(args, file_cfg, quiet: bool) -> int:
    from .checkpoint import save_checkpoint
    from .config import TrainConfig
    from .data import load_dataset
    from .errors import ConfigError
    from .training import train

    layers = _opt(args, file_cfg, "layers", None)
    if isinstance(layers, str):
        try:
            layers = tuple(int(t) for t in layers.split(",") if t.strip())
        except ValueError:
            raise ConfigError(f"bad --layers value {layers!r}") from None
    cfg = TrainConfig(
        lr0=float(_opt(args, file_cfg, "lr", 1e-2)),
        batch=int(_opt(args, file_cfg, "batch", 32)),
        epochs=int(_opt(args, file_cfg, "epochs", 50)),
        seed=int(_opt(args, file_cfg, "seed", 7)),
        use_vse=not (args.no_vse or file_cfg.get("no-vse", False)),
        use_projection=not (args.no_projection or file_cfg.get("no-projection", False)),
        layers_enabled=tuple(layers) if layers else (1, 2, 3, 4),
    )
    cfg.validate()
    dataset = load_dataset(args.data)
    ckpt = train(dataset, cfg, log_stream=None if quiet else sys.stderr)
    save_checkpoint(ckpt, args.out)
    print(json.dumps({"checkpoint": str(args.out),
                      "best_val_auc": ckpt.best_val_auc,
                      "best_epoch": ckpt.best_epoch}, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args, file_cfg) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_split
    from .evaluation import evaluate

    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.to_model()
    manifest = load_split(Path(args.data) / args.split)
    tasks = {"auc", "fitb", "diagnosis"} if args.task == "all" else {args.task}
    reps = int(_opt(args, file_cfg, "reps", 5))
    seed = int(_opt(args, file_cfg, "seed", 7))
    report = evaluate(model, manifest, tasks, reps=reps, seed=seed)
    print(json.dumps(report.to_json_dict(), sort_keys=True))
    return EXIT_OK


def _cmd_diagnose(args, file_cfg) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_outfit
    from .diagnosis import diagnose

    model = load_checkpoint(args.ckpt).to_model()
    outfit = load_outfit(args.outfit)
    report = diagnose(outfit, model)
    print(json.dumps(report.to_json_dict(), sort_keys=True))
    return EXIT_OK


def _cmd_revise(args, file_cfg) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .comparison import ItemType
    from .data import load_outfit, load_split, save_outfit
    from .diagnosis import revise

    model = load_checkpoint(args.ckpt).to_model()
    outfit = load_outfit(args.outfit)
    pool_split = load_split(args.pool)
    pool = {t: pool_split.items_of_type(t) for t in ItemType}
    thr = float(_opt(args, file_cfg, "thr", 0.9))
    seed = int(_opt(args, file_cfg, "seed", 7))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 41])))
    result = revise(outfit, model, pool, thr=thr, rng=rng)
    save_outfit(result.outfit, args.out)
    print(json.dumps({
        "revised": str(args.out),
        "reached_threshold": result.reached_threshold,
        "probability": result.probability,
        "trajectory": result.trajectory(),
        "substitutions": [{
            "iteration": s.iteration, "slot": s.slot, "removed": s.removed,
            "inserted": s.inserted, "probability_before": s.probability_before,
            "probability_after": s.probability_after} for s in result.log],
    }, sort_keys=True))
    return EXIT_OK if result.reached_threshold else EXIT_THRESHOLD


def _cmd_retrieve(args, file_cfg) -> int:
    from .checkpoint import load_checkpoint
    from .data import Item, load_split, read_ppm
    from .comparison import ItemType
    from .errors import ConfigError
    from .evaluation import retrieve

    model = load_checkpoint(args.ckpt).to_model()
    n_layers = len(model.cfg.stage_channels)
    if not 1 <= args.layer <= n_layers:
        raise ConfigError(f"--layer must be in 1..{n_layers}, got {args.layer}")
    corpus_split = load_split(args.corpus)
    corpus = [corpus_split.items[i] for i in sorted(corpus_split.items)]
    if args.query in corpus_split.items:
        query = corpus_split.items[args.query]
    elif Path(args.query).exists():
        query = Item(id=str(args.query), type=ItemType.TOP,
                     image=read_ppm(Path(args.query)), tokens=["query"])
    else:
        raise ConfigError(f"--query {args.query!r} is neither a corpus item id "
                          f"nor an existing image path")
    k = int(_opt(args, file_cfg, "k", 8))
    ranked = retrieve(query, args.layer, corpus, k, model)
    print(json.dumps({"query": query.id, "layer": args.layer,
                      "results": [{"id": i, "score": s} for i, s in ranked]},
                     sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for flag, default in (("config", None), ("seed", None),
                          ("quiet", False), ("threads", None)):
        if not hasattr(args, flag):
            setattr(args, flag, default)

    if args.threads is not None:
        if args.threads < 1:
            parser.exit(EXIT_USAGE, "error: --threads must be >= 1\n")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .errors import (ConfigError, DataError, DivergenceError, FormatError,
                         InputError, IoError, MetricError, PoolError,
                         SamplingError)

    handlers = {
        "gen-data": lambda: _cmd_gen_data(args, file_cfg),
        "train": lambda: _cmd_train(args, file_cfg, quiet=args.quiet),
        "eval": lambda: _cmd_eval(args, file_cfg),
        "diagnose": lambda: _cmd_diagnose(args, file_cfg),
        "revise": lambda: _cmd_revise(args, file_cfg),
        "retrieve": lambda: _cmd_retrieve(args, file_cfg),
    }
    try:
        file_cfg = _load_config_file(args.config)
        return handlers[args.command]()
    except (ConfigError, InputError, DataError, PoolError, MetricError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (IoError, SamplingError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
