"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import synth
from .config import RunConfig, apply_overrides, load_config, save_config
from .data import EpisodeSpec, ImageLoader, build_index, make_splits, write_split_file
from .engine import load_checkpoint, resolve_split, set_determinism, train
from .errors import ConfigError, MSENetError
from .evaluation import (ABLATION_GRID, confusion, cross_domain_eval, evaluate, export_samples,
                         run_ablation)

log = logging.getLogger("msenet")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted path), repeatable")
    p.add_argument("--out", help="output directory (run directories are created inside it)")
    p.add_argument("--seed", type=int, help="run seed (overrides config.seed)")
    p.add_argument("--threads", type=int, help="torch intra-op threads")
    p.add_argument("--deterministic", action="store_true", help="deterministic kernels, single thread")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msenet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=30)
    p.add_argument("--images-per-class", type=int, default=40)

    p = sub.add_parser("index", help="summarise a dataset directory")
    _common(p)
    p.add_argument("root", nargs="?", help="dataset root (default: data.root or $MSENET_DATA_ROOT)")

    p = sub.add_parser("split", help="write a train/val/test class split file")
    _common(p)

    p = sub.add_parser("train", help="episodic training")
    _common(p)
    p.add_argument("--repeats", type=int, default=1, help="independent runs with seeds seed..seed+n-1")

    for name, text in (("eval", "evaluate a checkpoint"), ("report", "confusion matrix and sample grids")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--episodes", type=int, help="evaluation episodes (default: test_episodes)")
        if name == "eval":
            p.add_argument("--target", help="cross-domain: evaluate on every class of this dataset root")
        else:
            p.add_argument("--sample-episodes", type=int, default=1)

    p = sub.add_parser("ablate", help="train and evaluate the component grid")
    _common(p)
    p.add_argument("--episodes", type=int, help="evaluation episodes per task")
    return parser


def _resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    config = base if base is not None else (load_config(args.config) if args.config else RunConfig())
    config = apply_overrides(config, args.overrides)
    if args.seed is not None:
        config = apply_overrides(config, [f"seed={args.seed}"])
    return config


def _run_dir(args, command: str, seed: int) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = Path(args.out or "runs") / f"{command}-{stamp}-{seed}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}.{n}")
    path.mkdir(parents=True)
    return path


def _record_run(run_dir: Path, args, config: RunConfig, **extra):
    save_config(config, run_dir / "config.yaml")
    meta = {"command": args.command, "argv": sys.argv[1:], "seed": config.seed, "threads": args.threads,
            "deterministic": args.deterministic, "config_hash": config.hash(),
            "started": datetime.now(timezone.utc).isoformat(), **extra}
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2))


def cmd_synth(args) -> int:
    if not args.out:
        raise ConfigError("synth needs --out")
    seed = 0 if args.seed is None else args.seed
    styles = synth.generate(args.out, args.classes, args.images_per_class, seed, force=args.force)
    meta = {"classes": [s.__dict__ for s in styles], "seed": seed, "images_per_class": args.images_per_class,
            "margin": synth.separation_margin(args.classes)}
    print(json.dumps({"out": args.out, "classes": len(styles), "images": len(styles) * args.images_per_class}))
    log.debug("styles: %s", meta)
    return 0


def cmd_index(args) -> int:
    config = _resolve_config(args)
    root = Path(args.root) if args.root else config.data.resolved_root()
    index = build_index(root)
    summary = {"root": str(root), "classes": len(index.classes), "items": len(index),
               "per_class": {c: len(v) for c, v in index.items.items()}}
    text = json.dumps(summary, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_split(args) -> int:
    config = _resolve_config(args)
    index = build_index(config.data.resolved_root())
    split = make_splits(index, config.data.split_counts, config.seed)
    out = Path(args.out or "split.txt")
    if out.exists() and not args.force:
        raise MSENetError(f"{out} exists (use --force)")
    write_split_file(split, out)
    print(json.dumps({"split_file": str(out), "train": len(split.train), "val": len(split.val),
                      "test": len(split.test)}))
    return 0


def _train_once(args, config: RunConfig) -> dict:
    run_dir = _run_dir(args, "train", config.seed)
    _record_run(run_dir, args, config)
    loader = ImageLoader(config.data.normalization)
    result = train(config, run_dir, loader=loader)
    summary = {"run_dir": str(run_dir), "checkpoint": str(result.checkpoint),
               "best_checkpoint": str(result.best_checkpoint)}
    if result.split.test:
        state = load_checkpoint(result.best_checkpoint)
        report = evaluate(state.model, result.index, result.split.test, config.eval_task.spec(),
                          config.test_episodes, config.seed, loader, dataset=result.index.name)
        report.save(run_dir / "report.json")
        summary.update(accuracy=report.accuracy, ci95=report.ci95)
    return summary


def cmd_train(args) -> int:
    config = _resolve_config(args)
    if args.deterministic:
        set_determinism(True, args.threads or 1)
    runs = [_train_once(args, apply_overrides(config, [f"seed={config.seed + r}"])) for r in range(args.repeats)]
    out = {"runs": runs}
    accs = [r["accuracy"] for r in runs if "accuracy" in r]
    if accs:
        out["mean_accuracy"] = float(np.mean(accs))
    if args.repeats > 1:
        Path(runs[0]["run_dir"]).parent.joinpath(f"train-repeats-{config.seed}.json").write_text(json.dumps(out, indent=2))
    print(json.dumps(out, indent=2))
    return 0


def _checkpoint_config(args):
    state = load_checkpoint(args.checkpoint)
    config = _resolve_config(args, base=state.config)
    return state, config


def cmd_eval(args) -> int:
    state, config = _checkpoint_config(args)
    episodes = args.episodes or config.test_episodes
    run_dir = _run_dir(args, "eval", config.seed)
    _record_run(run_dir, args, config, checkpoint=str(args.checkpoint), target=args.target)
    spec = config.eval_task.spec()
    if args.target:
        report = cross_domain_eval(args.checkpoint, args.target, spec, episodes, config.seed,
                                   ImageLoader(config.data.normalization))
    else:
        index = build_index(config.data.resolved_root())
        split = resolve_split(config, index)
        report = evaluate(state.model, index, split.test, spec, episodes, config.seed,
                          ImageLoader(config.data.normalization), dataset=index.name)
    report.save(run_dir / "report.json")
    print(json.dumps({"run_dir": str(run_dir), "task": spec.label, "accuracy": report.accuracy,
                      "ci95": report.ci95, "dataset": report.dataset}))
    return 0


def cmd_report(args) -> int:
    state, config = _checkpoint_config(args)
    episodes = args.episodes or config.test_episodes
    run_dir = _run_dir(args, "report", config.seed)
    _record_run(run_dir, args, config, checkpoint=str(args.checkpoint))
    index = build_index(config.data.resolved_root())
    split = resolve_split(config, index)
    loader = ImageLoader(config.data.normalization)
    spec = config.eval_task.spec()
    report = evaluate(state.model, index, split.test, spec, episodes, config.seed, loader, dataset=index.name)
    report.save(run_dir / "report.json")
    cm = confusion(state.model, index, split.test, spec, episodes, config.seed, loader)
    cm.to_csv(run_dir / "confusion.csv")
    cm.render(run_dir / "confusion.png")
    records = export_samples(state.model, index, split.test, spec, config.seed, run_dir / "samples",
                             episodes=args.sample_episodes, loader=loader)
    print(json.dumps({"run_dir": str(run_dir), "accuracy": report.accuracy, "ci95": report.ci95,
                      "samples": len(records)}))
    return 0


def cmd_ablate(args) -> int:
    config = _resolve_config(args)
    if args.deterministic:
        set_determinism(True, args.threads or 1)
    run_dir = _run_dir(args, "ablate", config.seed)
    _record_run(run_dir, args, config)
    grid = run_ablation(config, ABLATION_GRID, run_dir, eval_episodes=args.episodes,
                        loader=ImageLoader(config.data.normalization),
                        progress=lambda row: log.info("ablation row %s done", row.toggles))
    grid.save(run_dir / "ablation.json")
    print(json.dumps({"run_dir": str(run_dir), "rows": [
        {**r.toggles, **{k: v.accuracy for k, v in r.reports.items()}, "params": r.param_count}
        for r in grid.rows]}, indent=2))
    return 0


COMMANDS = {"synth": cmd_synth, "index": cmd_index, "split": cmd_split, "train": cmd_train,
            "eval": cmd_eval, "report": cmd_report, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.threads and not args.deterministic:
        set_determinism(False, args.threads)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"msenet: config error: {e}", file=sys.stderr)
        return 2
    except (MSENetError, OSError, FloatingPointError) as e:
        print(f"msenet: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
