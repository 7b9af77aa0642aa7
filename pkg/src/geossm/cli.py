"""Command line: ``geossm {train,eval,bench,demo-selective,gen-data}``.

Failures exit nonzero and print a single ``error:<category>: <message>`` line
on stderr, with category one of usage, config, checkpoint, data, mismatch,
numeric, io.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .experiment import TaskMismatchError, run_eval, run_train
from .io import (OUTPUT_ROOT_ENV, CheckpointError, ConfigError, _build, _loads, dumps,
                 load_config, write_csv)
from .selectivity import (TokenPairEmbedding, demo_errors, design_selective_system,
                          paper_example_system, run_selective_demo)
from .tasks import (GenerationError, IdxFormatError, TaskSpec, export_mnist_sample,
                    format_batch, write_idx)
from .train import EVAL_LENGTHS, NonFiniteLossError

EXIT_CODES = {"usage": 2, "config": 3, "checkpoint": 4, "data": 5, "mismatch": 6, "numeric": 7, "io": 8}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _out_path(path: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    p = Path(path)
    return Path(root) / p if root and not p.is_absolute() else p


def _parse_lengths(text: str) -> list[int]:
    try:
        lengths = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError("usage", f"--lengths must be comma-separated integers, got {text!r}") from None
    if not lengths or min(lengths) < 2:
        raise CliError("usage", "--lengths needs at least one length >= 2")
    return lengths


def _read_spec(path: str) -> dict:
    p = Path(path)
    try:
        return _loads(p.read_text(), str(p))
    except OSError as exc:
        raise ConfigError(f"{p}: {exc.strerror}") from None


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _out_path(args.out) if args.out else cfg.resolved_output_dir()
    summary = run_train(cfg, out, log_every=args.log_every)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    lengths = _parse_lengths(args.lengths)
    override = {"kind": args.task} if args.task else None
    rows, meta = run_eval(args.checkpoints, lengths, args.samples, args.seed, override)
    header = [str(L) for L in lengths]
    out = _out_path(args.out) if args.out else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(out, header, rows, meta)
    print(",".join(header))
    for row in rows:
        print(",".join(f"{x:.6g}" for x in row))
    return 0


def cmd_bench(args) -> int:
    tree = _read_spec(args.spec)
    out_dir = tree.pop("output_dir", "runs/bench")
    spec = _build(bench_mod.BenchSpec, tree, "bench")
    report = bench_mod.run_bench(spec)
    out = _out_path(args.out or out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": spec.to_dict(), "seed": spec.seed}
    (out / "bench.json").write_text(dumps({"spec": spec.to_dict(), **report}))
    write_csv(out / "bench_q_sigma.csv", ["q_sigma", "retained", "seconds"],
              [[r["q_sigma"], r["retained"], r["seconds"]] for r in report["by_q_sigma"]], meta)
    write_csv(out / "bench_length.csv", ["length", "retained", "seconds"],
              [[r["length"], r["retained"], r["seconds"]] for r in report["by_length"]], meta)
    write_csv(out / "bench_baseline_n.csv", ["n", "seconds"],
              [[r["n"], r["seconds"]] for r in report["baseline_by_n"]], meta)
    print(json.dumps(report["summary"], sort_keys=True))
    return 0


def cmd_demo_selective(args) -> int:
    emb = TokenPairEmbedding.paper()
    system = (paper_example_system() if args.system == "printed"
              else design_selective_system(emb, args.response, args.lam))
    rows, worst = [], [0.0, 0.0]
    for i in range(args.sequences):
        labels, y = run_selective_demo(args.length, args.seed + i, system, emb)
        b, d = demo_errors(labels, y, args.response)
        worst = [max(worst[0], b), max(worst[1], d)]
        rows += [[i, t, int(labels[t]), float(y[t])] for t in range(args.length)]
    summary = {"blank_err": worst[0], "data_err": worst[1], "sequences": args.sequences, "length": args.length}
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    write_csv(out, ["sequence", "t", "label", "output"], rows, {"config": cfg, "seed": args.seed, "summary": summary})
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_gen_data(args) -> int:
    """Spec: {"task": {...}, "batch": n, "seed": s, "L": len, "placement": p, "out": path, "format": "text"|"idx"}
    or {"kind": "mnist_sample", "out": dir, "n_test": 1000, "seed": 0}."""
    tree = _read_spec(args.spec)
    if tree.get("kind") == "mnist_sample":
        try:
            paths = export_mnist_sample(_out_path(tree.get("out", "data/mnist_sample")),
                                        int(tree.get("n_test", 1000)), int(tree.get("seed", 0)))
        except FileNotFoundError as exc:
            raise CliError("data", str(exc)) from None
        print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))
        return 0
    known = {"task", "batch", "seed", "L", "placement", "out", "format"}
    unknown = sorted(set(tree) - known)
    if unknown:
        raise ConfigError(f"gen-data: unknown key {unknown[0]}")
    task = _build(TaskSpec, tree.get("task", {}), "task")
    batch = task.generate(int(tree.get("batch", 16)), int(tree.get("seed", 0)), tree.get("L"), tree.get("placement"))
    out = _out_path(tree.get("out", "data/samples.txt"))
    out.parent.mkdir(parents=True, exist_ok=True)
    if tree.get("format", "text") == "idx":
        write_idx(out, batch.tokens.astype(np.uint8))
        write_idx(out.with_name(out.name + "-labels"), batch.target.astype(np.uint8))
    else:
        header = f"# task: {json.dumps(tree.get('task', {}), sort_keys=True)} seed: {tree.get('seed', 0)}\n"
        out.write_text(header + format_batch(batch))
    print(json.dumps({"out": str(out), "sequences": len(batch), "length": batch.length}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geossm", description="Geometric SSM experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (default: config output_dir)")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy table over sequence lengths")
    e.add_argument("checkpoints", nargs="+")
    e.add_argument("--lengths", default=",".join(map(str, EVAL_LENGTHS)))
    e.add_argument("--samples", type=int, default=2000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--task", choices=["induction_head", "extended_induction_head"])
    e.add_argument("--out", help="CSV path")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="scaling benchmark from a JSON spec")
    b.add_argument("spec")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("demo-selective", help="selective copying through a fixed LTI system")
    d.add_argument("out")
    d.add_argument("--length", type=int, default=64)
    d.add_argument("--sequences", type=int, default=1000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--system", choices=["printed", "designed"], default="printed")
    d.add_argument("--response", type=float, default=0.5)
    d.add_argument("--lam", type=float, default=0.5)
    d.set_defaults(func=cmd_demo_selective)

    g = sub.add_parser("gen-data", help="write task samples described by a JSON spec")
    g.add_argument("spec")
    g.set_defaults(func=cmd_gen_data)
    return p


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, TaskMismatchError):
        return "mismatch"
    if isinstance(exc, (IdxFormatError, GenerationError)):
        return "data"
    if isinstance(exc, (NonFiniteLossError, FloatingPointError)):
        return "numeric"
    if isinstance(exc, OSError):
        return "io"
    return "config" if isinstance(exc, ValueError) else "internal"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"error:usage: {exc}", file=sys.stderr)
        return EXIT_CODES["usage"]
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one-line report, no traceback
        cat = _category(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error:{cat}: {msg}", file=sys.stderr)
        return EXIT_CODES.get(cat, 1)


if __name__ == "__main__":
    sys.exit(main())
