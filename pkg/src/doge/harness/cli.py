"""``doge`` command line: run, eval, cancel, plot."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import checkpoint
from ..core import WeightTrajectory
from ..data import ingest, ingest_jsonl
from ..errors import DogeError
from .config import load_config, with_overrides
from .pipeline import load_corpus, run, run_cancellation
from .plots import emit_plot_data
from .report import EvalReport, evaluate


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (DOGE_OUT also works)")
    p.add_argument("--threads", type=int, help="workers for per-domain gradient passes")
    p.add_argument("--log-stride", type=int, help="write every N-th trajectory step")


def _config(args):
    cfg = load_config(args.config)
    return with_overrides(cfg, seed=args.seed, out=args.out, threads=args.threads, log_stride=args.log_stride)


def cmd_run(args) -> int:
    cfg = _config(args)
    artifacts = run(cfg)
    out = artifacts["out"]
    if "proxy" in artifacts:
        names = artifacts["proxy"].trajectory.names
        weights = artifacts["proxy"].weights
        print("domain weights: " + ", ".join(f"{n}={w:.4f}" for n, w in zip(names, weights)))
    if "report" in artifacts:
        r = artifacts["report"]
        print(f"average perplexity {r.average_perplexity:.4f}, worst-case {r.worst_perplexity:.4f}")
    print(f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    model = checkpoint.load(args.checkpoint)
    seq_len = model.config.context_length + 1 if args.seq_len is None else args.seq_len
    path = Path(args.corpus)
    corpus = ingest_jsonl(path, seq_len) if path.is_file() else ingest(path, seq_len)
    if args.split == "heldout":
        corpus = corpus.split()[1]
    report = evaluate(model, corpus, args.batch_size)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        report.save(Path(args.out) / "eval.json")
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_cancel(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = load_corpus(cfg).split(cfg.corpus.holdout_every)
    scores = run_cancellation(cfg, train, out)
    for n, s in sorted(zip(scores.names, scores.scores), key=lambda t: t[1]):
        print(f"{s:.6g}\t{n}")
    return 0


def cmd_plot(args) -> int:
    run_dir = Path(args.run_dir)
    traj_path = run_dir / "trajectory.csv"
    if not traj_path.exists():
        print(f"no trajectory.csv in {run_dir}", file=sys.stderr)
        return 2
    traj = WeightTrajectory.from_csv(traj_path)
    report = EvalReport.load(run_dir / "eval.json") if (run_dir / "eval.json").exists() else None
    files = emit_plot_data(traj, report, run_dir)
    for p in files.values():
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doge", description="Domain reweighting laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the mode named in a TOML config")
    p.add_argument("config")
    _common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="per-domain perplexity of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("corpus", help="corpus directory or JSONL file")
    p.add_argument("--split", choices=("heldout", "all"), default="all")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--batch-size", type=int, default=32)
    _common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cancel", help="measure cancellation scores per parameter group")
    p.add_argument("config")
    _common(p)
    p.set_defaults(fn=cmd_cancel)

    p = sub.add_parser("plot", help="write plot CSVs and figures for a run directory")
    p.add_argument("run_dir")
    _common(p)
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except DogeError as exc:
        print(f"doge: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
