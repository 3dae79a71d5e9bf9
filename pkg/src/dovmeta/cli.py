"""Command-line entry point: train, eval, dump and analyze.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("dovmeta")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    if getattr(args, "out", None):
        overrides.append(f"out_dir={json.dumps(args.out)}")
    return cfg.with_overrides(overrides)


def cmd_train(args) -> int:
    from .trainer import run

    cfg = _config_from_args(args)
    result = run(cfg, write=True, progress=args.verbose)
    last = result.metrics[-1]
    print(f"wrote {cfg.run_dir()} (final train return {last['mean_train_return']:.3f}, "
          f"checkpoint sha256 {result.checkpoint_digest})")
    return EXIT_OK


def _eval_tasks(agent, which: str):
    pools = {"test": agent.test_tasks, "train": agent.train_tasks, "holdout": agent.holdout_tasks,
             "all": agent.all_tasks}
    return pools[which]


def cmd_eval(args) -> int:
    from .agent import load_checkpoint
    from . import zeroshot

    agent = load_checkpoint(args.checkpoint)
    if args.jobs is not None:
        agent.config.jobs = args.jobs
    seed = agent.config.seed if args.seed is None else args.seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    method = args.method
    if method == "zeroshot_s2":
        if args.unseen_dov is None:
            raise UsageError("zeroshot_s2 needs --unseen-dov")
        spec = agent.family.spec
        if args.unseen_dov not in spec.names:
            raise UsageError(f"unknown DoV {args.unseen_dov!r}; choose from {list(spec.names)}")
        j = spec.index(args.unseen_dov)
        pool = _eval_tasks(agent, args.tasks or "holdout")
        if not pool:
            raise UsageError("no held-out tasks; train with env.holdout set for the unseen DoV")
        labels = sorted({t.combo[j] for t in pool})
        label = labels[0] if args.unseen_label is None else args.unseen_label
        tasks = [t for t in pool if t.combo[j] == label]
        if not tasks:
            raise UsageError(f"no tasks bear label {label} on DoV {args.unseen_dov!r}")
        probe_ids = None if args.probe_task is None else [args.probe_task]
        if probe_ids and args.probe_task not in {t.task_id for t in tasks}:
            raise UsageError(f"probe task {args.probe_task} does not bear the unseen label")
        report = zeroshot.evaluate_s2(agent, tasks, j, rng, probe_ids=probe_ids)
    else:
        if method not in zeroshot.METHODS:
            raise UsageError(f"unknown method {method!r}; choose from {list(zeroshot.METHODS)}")
        if method == "sac" and agent.kind != "sac":
            raise UsageError("method 'sac' needs a checkpoint trained with sac_baseline=true")
        tasks = _eval_tasks(agent, args.tasks or "test")
        report = zeroshot.evaluate_method(agent, method, tasks, rng)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / f"eval_{method}.csv")
    report.write_jsonl(out / f"eval_{method}.jsonl")
    print(f"{method}: mean return {report.mean:.3f} ± {report.stderr:.3f} over {len(report.returns)} tasks")
    return EXIT_OK


def cmd_dump(args) -> int:
    from .agent import load_checkpoint
    from .analysis import dump_embeddings

    agent = load_checkpoint(args.checkpoint)
    seed = agent.config.seed if args.seed is None else args.seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))
    tasks = _eval_tasks(agent, args.tasks)
    dump = dump_embeddings(agent, tasks, rng, n_episodes=args.episodes)
    out = Path(args.output) if args.output else Path(args.checkpoint).parent / "embeddings.jsonl"
    dump.write_jsonl(out)
    print(f"wrote {len(dump)} rows to {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import EmbeddingDump, cluster_purity, pca2d, write_svg

    try:
        dump = EmbeddingDump.read_jsonl(args.dump)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"malformed dump {args.dump}: {exc}") from exc
    if not dump.rows:
        raise UsageError(f"dump {args.dump} is empty")
    out = Path(args.out) if args.out else Path(args.dump).parent
    out.mkdir(parents=True, exist_ok=True)
    n_dovs = len(dump.rows[0].combo)
    n_blocks = len(dump.rows[0].block_means)

    with open(out / "purity.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dov", "block", "dims", "ratio"])
        for j in range(n_dovs):
            if n_blocks == n_dovs:
                block, dims = j, None
            else:
                # undivided encoder: compare the j-th chunk of the same width
                d = len(dump.rows[0].block_means[0]) // n_dovs
                block, dims = 0, slice(j * d, (j + 1) * d)
            ratio = cluster_purity(dump, j, block=block, dims=dims)
            span = "all" if dims is None else f"{dims.start}:{dims.stop}"
            writer.writerow([j, block, span, repr(ratio)])
            print(f"DoV {j}: purity ratio {ratio:.4f}")

    with open(out / "pca.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["block", "task_id", "combo", "pc1", "pc2", "explained1", "explained2"])
        for b in range(n_blocks):
            coords, frac, _ = pca2d(dump.block(b))
            for row, (x, y) in zip(dump.rows, coords):
                writer.writerow([b, row.task_id, "-".join(map(str, row.combo)), repr(float(x)), repr(float(y)),
                                 repr(float(frac[0])), repr(float(frac[1]))])
            if args.svg:
                for j in range(n_dovs):
                    write_svg(coords, [r.combo[j] for r in dump.rows], out / f"pca_block{b}_dov{j}.svg",
                              title=f"block {b} coloured by DoV {j}")
    print(f"wrote {out / 'purity.csv'} and {out / 'pca.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dovmeta", description="Compositional meta-RL with disentangled task embeddings.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="meta-train and write checkpoint, metrics and config echo")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, value parsed as JSON")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", help="output root (run goes to <out>/seed<seed>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with one protocol")
    p.add_argument("checkpoint")
    p.add_argument("--method", required=True)
    p.add_argument("--unseen-dov", help="DoV whose label is unseen (zeroshot_s2)")
    p.add_argument("--unseen-label", type=int, help="unseen label index (default: smallest held out)")
    p.add_argument("--probe-task", type=int, help="restrict S2 to this probe task id")
    p.add_argument("--tasks", choices=["test", "train", "holdout", "all"])
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", help="directory for report files (default: checkpoint directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump", help="write per-task posteriors as JSON lines")
    p.add_argument("checkpoint")
    p.add_argument("--tasks", choices=["test", "train", "holdout", "all"], default="test")
    p.add_argument("--episodes", type=int, default=2, help="probe episodes per task")
    p.add_argument("--seed", type=int)
    p.add_argument("--output")
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("analyze", help="PCA coordinates and cluster purity from a dump")
    p.add_argument("dump")
    p.add_argument("--out")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as exc:
        # MissingLabelError and unknown ids carry their own message
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
