"""Two-stage pipeline: proxy reweighting, then base training on the mixture."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import checkpoint
from ..cancellation import measure_cancellation, select_by_strategy
from ..core import (ProxyResult, Stage, read_weights, run_proxy_ood, run_proxy_universal,
                    stage_average, uniform_weights, write_weights)
from ..data import DomainCorpus, derive_rng, ingest, ingest_jsonl, mixture_batch
from ..errors import ConfigError, ContractError
from ..model import Transformer, TransformerConfig, gradient
from ..optim import cosine_schedule
from ..synthetic import generate_synthetic
from .config import RunConfig, TrainConfig
from .plots import emit_plot_data
from .report import EvalReport, evaluate

log = logging.getLogger(__name__)


def load_corpus(cfg: RunConfig) -> DomainCorpus:
    c = cfg.corpus
    if c.source == "synthetic":
        return generate_synthetic(c.synthetic)
    if c.source == "jsonl":
        return ingest_jsonl(c.path, c.seq_len, c.min_remainder)
    return ingest(c.path, c.seq_len, c.min_remainder)


# ------------------------------------------------------------- schedules


def weight_schedule(weights, stages: Sequence[Stage] | None = None, proxy_steps: int | None = None,
                    base_steps: int | None = None) -> Callable[[int], np.ndarray]:
    """Map a 0-based base-training step to the domain weights in force.

    Without stages the global weights apply throughout. With stages, base step
    ``s`` falls in the stage containing proxy step ``1 + s * T_proxy // T_base``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if not stages:
        return lambda step: weights
    if proxy_steps is None or base_steps is None:
        raise ContractError("a staged schedule needs proxy_steps and base_steps")
    ends = np.array([s.end_step for s in stages])
    table = [s.weights for s in stages]

    def at(step: int) -> np.ndarray:
        proxy_step = 1 + (step * proxy_steps) // base_steps
        return table[int(np.searchsorted(ends, proxy_step))]

    return at


def expected_token_counts(schedule: Callable[[int], np.ndarray], steps: int, batch_size: int) -> np.ndarray:
    """Expected sequences drawn per domain over ``steps`` steps of ``batch_size``."""
    return batch_size * sum(schedule(s) for s in range(steps))


# ---------------------------------------------------------- base training


@dataclass
class BaseRun:
    model: Transformer
    tokens_consumed: np.ndarray
    sequences_consumed: np.ndarray
    losses: list[float]


def train_base(corpus: DomainCorpus, config: TransformerConfig, train: TrainConfig,
               schedule: Callable[[int], np.ndarray], seed: int, model: Transformer | None = None,
               checkpoint_path: str | Path | None = None) -> BaseRun:
    """Train a fresh (or resumed) model on batches from ``P_alpha(step)``.

    Each step draws from its own derived rng stream, so a run resumed from a
    checkpoint at step ``s`` replays exactly what an uninterrupted run would.
    """
    if model is None:
        model = Transformer(config, optimizer=train.optimizer, clip_norm=train.clip_norm)
    tokens = np.zeros(corpus.k, dtype=np.int64)
    seqs = np.zeros(corpus.k, dtype=np.int64)
    losses = []
    start = model.step
    try:
        for step in range(start, train.steps):
            batch = mixture_batch(corpus, schedule(step), train.batch_size, derive_rng(seed, "base-train", step))
            loss, g = gradient(model, batch.tokens)
            lr = cosine_schedule(step, train.steps, train.lr_max, train.lr_min, train.warmup_frac)
            model.apply_update(g, lr)
            losses.append(loss)
            tokens += batch.token_counts(corpus.k)
            seqs += np.bincount(batch.domain_ids, minlength=corpus.k)
            if checkpoint_path and train.checkpoint_every and model.step % train.checkpoint_every == 0:
                checkpoint.save(model, checkpoint_path)
    except Exception:
        if checkpoint_path:
            checkpoint.save(model, checkpoint_path)
            log.error("base training failed at step %d; checkpoint left at %s", model.step, checkpoint_path)
        raise
    return BaseRun(model, tokens, seqs, losses)


# ------------------------------------------------------------------- run


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mask_ids(cfg: RunConfig, corpus: DomainCorpus, out: Path):
    if cfg.mask is None:
        return None, None
    scores = run_cancellation(cfg, corpus, out)
    sel = select_by_strategy(scores, cfg.mask)
    return sel.ids, sel.fraction(scores.sizes)


def run_cancellation(cfg: RunConfig, corpus: DomainCorpus, out: Path):
    c = cfg.cancellation
    model = Transformer(cfg.proxy, optimizer="sgd", clip_norm=None)
    scores = measure_cancellation(model, corpus, c.steps, c.batch_size, derive_rng(cfg.seed, "cancellation"),
                                  lr=c.lr, denominator=c.denominator)
    scores.to_csv(out / "cancellation.csv")
    return scores


def run_proxy(cfg: RunConfig, train: DomainCorpus, out: Path, ood: bool) -> ProxyResult:
    hp = cfg.doge
    mask, fraction = _mask_ids(cfg, train, out)
    if mask is not None:
        hp = replace(hp, mask=mask)
    runner = run_proxy_ood if ood else run_proxy_universal
    result = runner(train, cfg.proxy, hp)
    result.trajectory.to_csv(out / "trajectory.csv", stride=cfg.log_stride)
    stages = stage_average(result.trajectory, cfg.curriculum_k) if cfg.curriculum_k else None
    write_weights(out / "weights.json", train.names, result.weights, stages)
    checkpoint.save(result.model, out / "proxy.ckpt")
    meta = {"mode": "ood" if ood else "universal", "steps": hp.steps,
            "normalized_scores": hp.normalize_scores,
            "mask": cfg.mask, "mask_fraction": result.trajectory.mask_fraction,
            "compute_saved_for_scores": 1.0 - result.trajectory.mask_fraction}
    (out / "proxy_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return result


def run_base(cfg: RunConfig, train: DomainCorpus, val: DomainCorpus, out: Path, weights,
             stages=None) -> tuple[BaseRun, EvalReport]:
    schedule = weight_schedule(weights, stages, cfg.doge.steps, cfg.train.steps)
    ckpt = out / "base.ckpt"
    model = None
    if cfg.resume and ckpt.exists():
        model = checkpoint.load(ckpt, clip_norm=cfg.train.clip_norm)
        log.info("resuming base training from step %d", model.step)
    run = train_base(train, cfg.base, cfg.train, schedule, cfg.seed, model=model, checkpoint_path=ckpt)
    checkpoint.save(run.model, ckpt)
    report = evaluate(run.model, val, cfg.eval_batch_size, run.tokens_consumed)
    report.save(out / "eval.json")
    with open(out / "base_loss.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, l in enumerate(run.losses, 1):
            if i % cfg.log_stride == 0 or i == len(run.losses):
                fh.write(f"{i},{l!r}\n")
    return run, report


def run(cfg: RunConfig) -> dict:
    """Execute ``cfg.mode``; returns a dict of the artifacts produced."""
    cfg.validate()
    out = _out_dir(cfg)
    corpus = load_corpus(cfg)
    train, val = corpus.split(cfg.corpus.holdout_every)
    artifacts: dict = {"out": out}
    mode = cfg.mode
    if mode == "cancellation":
        artifacts["cancellation"] = run_cancellation(cfg, train, out)
        return artifacts
    if mode == "eval":
        model = checkpoint.load(cfg.checkpoint)
        report = evaluate(model, val, cfg.eval_batch_size)
        report.save(out / "eval.json")
        artifacts["report"] = report
        return artifacts
    if mode in ("proxy-universal", "proxy-ood", "full-pipeline"):
        ood = mode == "proxy-ood" or (mode == "full-pipeline" and cfg.objective == "ood")
        result = run_proxy(cfg, train, out, ood)
        artifacts["proxy"] = result
        if mode != "full-pipeline":
            emit_plot_data(result.trajectory, None, out)
            return artifacts
        stages = stage_average(result.trajectory, cfg.curriculum_k) if cfg.curriculum_k else None
        weights = result.weights
    else:
        if cfg.weights is None:
            weights, stages = uniform_weights(corpus.k), None
        else:
            names, weights, stages = read_weights(cfg.weights)
            if names != corpus.names:
                raise ConfigError(f"weights file domains {names} do not match corpus {corpus.names}", "weights")
            if cfg.curriculum_k is None:
                stages = None
        result = None
    base, report = run_base(cfg, train, val, out, weights, stages)
    artifacts.update(base=base, report=report)
    if result is not None:
        emit_plot_data(result.trajectory, report, out)
    return artifacts
