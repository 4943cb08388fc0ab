"""Run configuration, read from one TOML file.

Top-level keys: ``mode``, ``seed`` (required), ``out``, ``log_stride``,
``threads``, ``curriculum_k``, ``mask``, ``weights``. Tables: ``[corpus]``
(with ``[corpus.synthetic]`` for generated corpora), ``[proxy]``, ``[base]``,
``[doge]``, ``[train]``, ``[cancellation]``, ``[eval]``.

The environment variable ``DOGE_OUT`` overrides ``out``.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..core import DogeHyperparams
from ..errors import ConfigError
from ..model import TransformerConfig
from ..synthetic import SyntheticSpec, spec_from_dict

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODES = ("proxy-universal", "proxy-ood", "base-train", "eval", "cancellation", "full-pipeline")


@dataclass
class CorpusConfig:
    source: str = "synthetic"
    path: str | None = None
    seq_len: int = 64
    min_remainder: int = 1
    holdout_every: int = 20
    synthetic: SyntheticSpec | None = None


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr_max: float = 5e-4
    lr_min: float = 1e-4
    warmup_frac: float = 0.05
    optimizer: str = "adam"
    clip_norm: float | None = 1.0
    checkpoint_every: int = 500


@dataclass
class CancellationConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 5e-4
    denominator: str = "sum_of_norms"


@dataclass
class RunConfig:
    mode: str
    seed: int
    corpus: CorpusConfig
    proxy: TransformerConfig = field(default_factory=TransformerConfig)
    base: TransformerConfig = field(default_factory=TransformerConfig)
    doge: DogeHyperparams = field(default_factory=DogeHyperparams)
    train: TrainConfig = field(default_factory=TrainConfig)
    cancellation: CancellationConfig = field(default_factory=CancellationConfig)
    out: str = "runs/default"
    log_stride: int = 10
    threads: int = 1
    curriculum_k: int | None = None
    mask: str | None = None
    weights: str | None = None
    checkpoint: str | None = None
    eval_batch_size: int = 32
    resume: bool = False
    objective: str = "universal"
    source_path: Path | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {', '.join(MODES)}", "mode")
        if self.objective not in ("universal", "ood"):
            raise ConfigError("must be 'universal' or 'ood'", "objective")
        if self.log_stride < 1:
            raise ConfigError("must be >= 1", "log_stride")
        if self.threads < 1:
            raise ConfigError("must be >= 1", "threads")
        if self.curriculum_k is not None and self.curriculum_k < 1:
            raise ConfigError("must be >= 1", "curriculum_k")
        if self.curriculum_k is not None and self.curriculum_k > self.doge.steps:
            raise ConfigError("cannot exceed doge.steps", "curriculum_k")
        if self.mask is not None:
            from ..cancellation import parse_strategy
            try:
                parse_strategy(self.mask)
            except ValueError as exc:
                raise ConfigError(str(exc), "mask") from None
        c = self.corpus
        if c.source not in ("directory", "jsonl", "synthetic"):
            raise ConfigError("must be 'directory', 'jsonl' or 'synthetic'", "corpus.source")
        if c.source == "synthetic":
            if c.synthetic is None:
                raise ConfigError("synthetic corpus needs a [corpus.synthetic] table", "corpus.synthetic")
        elif c.path is None or not Path(c.path).exists():
            raise ConfigError(f"path {c.path!r} does not exist", "corpus.path")
        if c.seq_len < 2:
            raise ConfigError("must be >= 2", "corpus.seq_len")
        for name in ("proxy", "base"):
            cfg = getattr(self, name)
            try:
                cfg.validate()
            except ConfigError as exc:
                raise ConfigError(str(exc), name) from None
            if cfg.context_length < c.seq_len - 1:
                raise ConfigError(f"context_length {cfg.context_length} < corpus.seq_len - 1", f"{name}.context_length")
        self.doge.validate()
        t = self.train
        if t.steps < 1 or t.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1", "train")
        if t.optimizer not in ("sgd", "adam"):
            raise ConfigError("must be 'sgd' or 'adam'", "train.optimizer")
        if self.cancellation.steps < 1:
            raise ConfigError("must be >= 1", "cancellation.steps")
        if self.weights is not None and not Path(self.weights).exists():
            raise ConfigError(f"file {self.weights!r} does not exist", "weights")
        if self.mode == "eval" and (self.checkpoint is None or not Path(self.checkpoint).exists()):
            raise ConfigError("eval mode needs an existing checkpoint", "checkpoint")


def _section(cls, table: dict, path: str, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", path)
    try:
        return cls(**{**extra, **table})
    except TypeError as exc:
        raise ConfigError(str(exc), path) from None


def _resolve(base: Path | None, p: str | None) -> str | None:
    if p is None or base is None or Path(p).is_absolute():
        return p
    return str((base.parent / p).resolve())


def from_dict(doc: dict, source_path: Path | None = None) -> RunConfig:
    doc = dict(doc)
    if "seed" not in doc:
        raise ConfigError("an explicit seed is required", "seed")
    if "mode" not in doc:
        raise ConfigError("required", "mode")
    seed = doc.pop("seed")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("must be a non-negative integer", "seed")
    corpus_t = dict(doc.pop("corpus", {}))
    synth = corpus_t.pop("synthetic", None)
    corpus = _section(CorpusConfig, corpus_t, "corpus")
    corpus.path = _resolve(source_path, corpus.path)
    if synth is not None:
        synth = dict(synth)
        synth.setdefault("seq_len", corpus.seq_len)
        synth.setdefault("seed", seed)
        corpus.synthetic = spec_from_dict(synth)
        corpus.seq_len = corpus.synthetic.seq_len
    proxy = _section(TransformerConfig, doc.pop("proxy", {}), "proxy", seed=seed)
    base = _section(TransformerConfig, doc.pop("base", {}), "base", seed=seed)
    doge_t = dict(doc.pop("doge", {}))
    doge_t.setdefault("seed", seed)
    doge = _section(DogeHyperparams, doge_t, "doge")
    train = _section(TrainConfig, doc.pop("train", {}), "train")
    canc = _section(CancellationConfig, doc.pop("cancellation", {}), "cancellation")
    eval_t = dict(doc.pop("eval", {}))
    if "batch_size" in eval_t:
        doc["eval_batch_size"] = eval_t.pop("batch_size")
    if eval_t:
        raise ConfigError(f"unknown keys {sorted(eval_t)}", "eval")
    for key in ("weights", "checkpoint"):
        if key in doc:
            doc[key] = _resolve(source_path, doc[key])
    cfg = _section(RunConfig, doc, "<root>", seed=seed, corpus=corpus, proxy=proxy, base=base,
                   doge=doge, train=train, cancellation=canc)
    cfg.source_path = source_path
    if os.environ.get("DOGE_OUT"):
        cfg.out = os.environ["DOGE_OUT"]
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such file {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = from_dict(doc, source_path=path.resolve())
    cfg.validate()
    return cfg


def with_overrides(cfg: RunConfig, seed: int | None = None, out: str | None = None,
                   threads: int | None = None, log_stride: int | None = None) -> RunConfig:
    """Apply CLI flags. A new seed re-seeds models, sampling and synthetic data alike."""
    if seed is not None:
        cfg = replace(cfg, seed=seed, proxy=replace(cfg.proxy, seed=seed), base=replace(cfg.base, seed=seed),
                      doge=replace(cfg.doge, seed=seed))
        if cfg.corpus.synthetic is not None:
            cfg.corpus = replace(cfg.corpus, synthetic=replace(cfg.corpus.synthetic, seed=seed))
    if out is not None:
        cfg = replace(cfg, out=out)
    if threads is not None:
        cfg = replace(cfg, threads=threads, doge=replace(cfg.doge, workers=threads))
    if log_stride is not None:
        cfg = replace(cfg, log_stride=log_stride)
    cfg.validate()
    return cfg
