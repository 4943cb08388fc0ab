"""Domain reweighting with generalization estimation.

One proxy step, for domains ``1..k`` and current weights ``alpha``:

1. draw one batch per domain and take each domain's loss gradient ``g_i``;
2. take a target gradient (``sum_i g_i`` estimated on a fresh uniform-mixture
   batch, or the gradient on an out-of-domain batch);
3. score every domain by ``W_j = <g_j, target>``;
4. multiplicative-weights step ``alpha <- alpha * exp(eta * W / mu)``, renormalized;
5. move the model along ``sum_i alpha_i g_i``.

The returned domain weights are the mean of ``alpha`` over all steps.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import FlatGradient
from .data import OOD, DomainCorpus, derive_rng, mixture_batch, uniform_domain_batch
from .errors import ConfigError, ContractError, DogeError
from .model import Transformer, TransformerConfig, gradient
from .optim import cosine_schedule

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9


def check_simplex(alpha, k: int | None = None) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 1 or (k is not None and a.size != k):
        raise ContractError(f"domain weights must be a length-{k} vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise ContractError(f"domain weights must be finite and non-negative: {a}")
    if abs(a.sum() - 1.0) > SIMPLEX_TOL:
        raise ContractError(f"domain weights sum to {a.sum()!r}, not 1")
    return a


def uniform_weights(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k)


@dataclass
class GeneralizationScores:
    values: np.ndarray
    ood: bool = False
    normalized: bool = False

    def __len__(self):
        return self.values.size


@dataclass
class StepRecord:
    step: int
    alpha: np.ndarray
    scores: np.ndarray
    losses: np.ndarray
    lr: float = float("nan")


@dataclass
class WeightTrajectory:
    names: tuple[str, ...]
    records: list[StepRecord] = field(default_factory=list)
    ood: bool = False
    normalized: bool = False
    mask_fraction: float = 1.0

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ContractError(f"trajectory steps must increase ({self.records[-1].step} -> {rec.step})")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records])

    @property
    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.records])

    def to_csv(self, path, stride: int = 1) -> None:
        """Write ``step,domain,alpha,score,loss`` rows for steps divisible by ``stride`` (plus the last)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "domain", "alpha", "score", "loss"])
            last = len(self.records) - 1
            for i, r in enumerate(self.records):
                if r.step % stride and i != last:
                    continue
                for name, a, s, l in zip(self.names, r.alpha, r.scores, r.losses):
                    w.writerow([r.step, name, repr(float(a)), repr(float(s)), repr(float(l))])

    @classmethod
    def from_csv(cls, path) -> WeightTrajectory:
        rows: dict[int, dict[str, tuple[float, float, float]]] = {}
        names: list[str] = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                step = int(row["step"])
                if row["domain"] not in names:
                    names.append(row["domain"])
                rows.setdefault(step, {})[row["domain"]] = (float(row["alpha"]), float(row["score"]), float(row["loss"]))
        traj = cls(tuple(names))
        for step in sorted(rows):
            vals = np.array([rows[step][n] for n in names])
            traj.append(StepRecord(step, vals[:, 0], vals[:, 1], vals[:, 2]))
        return traj


@dataclass
class DogeHyperparams:
    steps: int = 2000
    batch_size: int = 8
    lr_max: float = 5e-4
    lr_min: float = 1e-4
    warmup_frac: float = 0.05
    mu: float = 1.0
    weight_lr_scale: float = 1.0
    normalize_scores: bool = False
    mask: tuple[int, ...] | None = None
    target: str = "fresh"
    target_batch_size: int | None = None
    optimizer: str = "sgd"
    clip_norm: float | None = 1.0
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        checks = [
            (self.steps >= 1, "steps", "must be >= 1"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.mu > 0, "mu", "must be > 0"),
            (self.lr_max > 0 and self.lr_min > 0, "lr_max", "step sizes must be > 0"),
            (self.weight_lr_scale > 0, "weight_lr_scale", "must be > 0"),
            (self.target in ("fresh", "sum"), "target", "must be 'fresh' or 'sum'"),
            (self.optimizer in ("sgd", "adam"), "optimizer", "must be 'sgd' or 'adam'"),
            (self.workers >= 1, "workers", "must be >= 1"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ConfigError(msg, f"doge.{name}")

    def lr(self, step: int) -> float:
        """Model step size at 0-based ``step``."""
        return cosine_schedule(step, self.steps, self.lr_max, self.lr_min, self.warmup_frac)


# ---------------------------------------------------------------- gradients


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def per_domain_gradients(model, batches: Sequence, mask=None, workers: int = 1,
                         with_losses: bool = False):
    """Gradient of each domain's mean batch loss, in domain order."""
    results = _map(lambda b: gradient(model, getattr(b, "tokens", b), mask), list(batches), workers)
    grads = [g for _, g in results]
    if with_losses:
        return grads, np.array([l for l, _ in results])
    return grads


def target_gradient_universal(model, corpus: DomainCorpus, b: int, rng: np.random.Generator,
                              mask=None, domain_grads: Sequence[FlatGradient] | None = None) -> FlatGradient:
    """Estimate of ``sum_i grad l_i``.

    By default: ``k`` times the gradient on a fresh batch from the uniform
    mixture. When ``domain_grads`` is given, their plain sum is returned instead.
    """
    if domain_grads is not None:
        total = domain_grads[0].values.copy()
        for g in domain_grads[1:]:
            total = total + g.values
        return domain_grads[0].with_values(total)
    batch = mixture_batch(corpus, uniform_weights(corpus.k), b, rng)
    _, g = gradient(model, batch.tokens, mask)
    return g.with_values(g.values * corpus.k)


def generalization_scores(domain_grads: Sequence[FlatGradient], target_grad: FlatGradient,
                          normalize: bool = False, ood: bool = False) -> GeneralizationScores:
    """``W_j = <g_j, target>``; optionally divided by ``max_j |W_j|``."""
    t = target_grad.values
    for j, g in enumerate(domain_grads):
        if g.values.shape != t.shape or g.group_ids != target_grad.group_ids:
            raise ContractError(f"domain {j} gradient length {len(g)} does not match target length {len(t)}")
    W = np.array([float(np.dot(g.values, t)) for g in domain_grads])
    if normalize:
        peak = np.max(np.abs(W))
        if peak > 0:
            W = W / peak
    return GeneralizationScores(W, ood=ood, normalized=normalize)


def influence_decomposition(domain_grads: Sequence[FlatGradient], j: int) -> tuple[float, float]:
    """Split ``W_j`` (against ``sum_i g_i``) into (out-of-domain influence, domain difficulty).

    The two parts are ``<g_j, sum_{i != j} g_i>`` and ``||g_j||^2``. Their sum
    equals ``W_j`` for the target ``sum_i g_i`` exactly whenever the arithmetic
    is exact (e.g. integer-valued gradients) and up to reassociation rounding
    otherwise.
    """
    k = len(domain_grads)
    if not 0 <= j < k:
        raise ContractError(f"domain index {j} out of range for k={k}")
    gj = domain_grads[j].values
    others = np.zeros_like(gj)
    for i, g in enumerate(domain_grads):
        if i != j:
            others = others + g.values
    return float(np.dot(gj, others)), float(np.dot(gj, gj))


# ------------------------------------------------------------- weight update


def update_domain_weights(alpha_prev, W, eta: float, mu: float) -> np.ndarray:
    """Multiplicative-weights step ``alpha * exp(eta * W / mu)``, renormalized.

    Computed in log space with a max shift; zero entries stay zero.
    """
    a = np.asarray(alpha_prev, dtype=np.float64)
    W = np.asarray(getattr(W, "values", W), dtype=np.float64)
    if mu <= 0 or eta <= 0:
        raise ContractError(f"eta and mu must be positive (eta={eta}, mu={mu})")
    if W.shape != a.shape:
        raise ContractError(f"scores have shape {W.shape}, weights {a.shape}")
    if not np.all(np.isfinite(W)):
        raise ContractError(f"non-finite generalization score: {W}")
    if np.any(a < 0) or not np.any(a > 0):
        raise ContractError(f"previous weights must be non-negative and not all zero: {a}")
    alive = a > 0
    logits = np.full(a.shape, -np.inf)
    logits[alive] = np.log(a[alive]) + eta * W[alive] / mu
    logits -= logits[alive].max()
    out = np.exp(logits)
    return out / out.sum()


def mirror_objective(alpha, alpha_prev, W, eta: float, mu: float) -> float:
    """``-eta <alpha, W> + mu * KL(alpha || alpha_prev)`` (negative-entropy Bregman term)."""
    a = np.asarray(alpha, dtype=np.float64)
    p = np.asarray(alpha_prev, dtype=np.float64)
    nz = a > 0
    kl = float(np.sum(a[nz] * (np.log(a[nz]) - np.log(p[nz]))))
    return -eta * float(np.dot(a, W)) + mu * kl


def reweighted_step(model, domain_grads: Sequence[FlatGradient], alpha, eta: float) -> FlatGradient:
    """Move the model along ``sum_i alpha_i g_i`` with step size ``eta``; returns the direction."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.size != len(domain_grads):
        raise ContractError(f"{alpha.size} weights for {len(domain_grads)} gradients")
    d = alpha[0] * domain_grads[0].values
    for a, g in zip(alpha[1:], domain_grads[1:]):
        d = d + a * g.values
    direction = domain_grads[0].with_values(d)
    model.apply_update(direction, eta)
    return direction


# ------------------------------------------------------------------ the loop


class ProxyResult(NamedTuple):
    weights: np.ndarray
    trajectory: WeightTrajectory
    model: Transformer


class ProxyStepError(DogeError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"proxy step {step} failed: {cause}")


def _run_proxy(corpus: DomainCorpus, config: TransformerConfig, hp: DogeHyperparams, ood: bool,
               model: Transformer | None = None) -> ProxyResult:
    hp.validate()
    if ood and not corpus.has_ood:
        raise ConfigError("out-of-domain mode needs a corpus with an OOD domain", "corpus")
    k = corpus.k
    if model is None:
        model = Transformer(config, optimizer=hp.optimizer, clip_norm=hp.clip_norm)
    full_size = model.num_parameters
    mask_fraction = 1.0
    if hp.mask is not None:
        mask_fraction = sum(g.size for g in model.groups if g.id in set(hp.mask)) / full_size
    traj = WeightTrajectory(corpus.names, ood=ood, normalized=hp.normalize_scores, mask_fraction=mask_fraction)
    domain_rngs = [derive_rng(hp.seed, "proxy-domain", i) for i in range(k)]
    target_rng = derive_rng(hp.seed, "proxy-ood" if ood else "proxy-target")
    b_target = hp.target_batch_size or hp.batch_size
    alpha = uniform_weights(k)
    for t in range(1, hp.steps + 1):
        try:
            lr = hp.lr(t - 1)
            batches = [uniform_domain_batch(corpus, i, hp.batch_size, domain_rngs[i]) for i in range(k)]
            grads, losses = per_domain_gradients(model, batches, workers=hp.workers, with_losses=True)
            if ood:
                _, target = gradient(model, uniform_domain_batch(corpus, OOD, b_target, target_rng).tokens)
            elif hp.target == "sum":
                target = target_gradient_universal(model, corpus, b_target, target_rng, domain_grads=grads)
            else:
                target = target_gradient_universal(model, corpus, b_target, target_rng)
            scores = generalization_scores([g.restrict(hp.mask) for g in grads], target.restrict(hp.mask),
                                           normalize=hp.normalize_scores, ood=ood)
            alpha = update_domain_weights(alpha, scores.values, lr * hp.weight_lr_scale, hp.mu)
            reweighted_step(model, grads, alpha, lr)
        except DogeError as exc:
            raise ProxyStepError(t, exc) from exc
        traj.append(StepRecord(t, alpha, scores.values, losses, lr))
    return ProxyResult(average_weights(traj), traj, model)


def run_proxy_universal(corpus: DomainCorpus, config: TransformerConfig, hp: DogeHyperparams,
                        model: Transformer | None = None) -> ProxyResult:
    """Train a proxy while adapting weights toward lower average loss over all domains."""
    return _run_proxy(corpus, config, hp, ood=False, model=model)


def run_proxy_ood(corpus: DomainCorpus, config: TransformerConfig, hp: DogeHyperparams,
                  model: Transformer | None = None) -> ProxyResult:
    """Same loop with the target gradient taken on the corpus's OOD domain."""
    return _run_proxy(corpus, config, hp, ood=True, model=model)


# ----------------------------------------------------------------- averaging


def average_weights(trajectory: WeightTrajectory) -> np.ndarray:
    if not len(trajectory):
        raise ContractError("cannot average an empty trajectory")
    return trajectory.alphas.mean(axis=0)


@dataclass(frozen=True)
class Stage:
    start_step: int
    end_step: int
    weights: np.ndarray

    @property
    def length(self) -> int:
        return self.end_step - self.start_step + 1


def stage_bounds(T: int, K: int) -> list[tuple[int, int]]:
    """0-based inclusive index ranges of ``K`` contiguous stages; the remainder goes to the last."""
    if not 1 <= K <= T:
        raise ContractError(f"need 1 <= K <= T, got K={K}, T={T}")
    size = T // K
    bounds = [(s * size, (s + 1) * size - 1) for s in range(K - 1)]
    bounds.append(((K - 1) * size, T - 1))
    return bounds


def stage_average(trajectory: WeightTrajectory, K: int) -> list[Stage]:
    """Average the step-wise weights within each of ``K`` contiguous stages."""
    alphas = trajectory.alphas
    if not len(alphas):
        raise ContractError("cannot stage an empty trajectory")
    steps = trajectory.steps
    return [Stage(int(steps[lo]), int(steps[hi]), alphas[lo:hi + 1].mean(axis=0))
            for lo, hi in stage_bounds(len(alphas), K)]


# -------------------------------------------------------------- weights file


def write_weights(path, names: Sequence[str], weights, stages: Sequence[Stage] | None = None) -> None:
    doc = {"weights": {n: float(w) for n, w in zip(names, weights)}}
    if stages is not None:
        doc["schedule"] = [
            {"start_step": s.start_step, "end_step": s.end_step,
             "weights": {n: float(w) for n, w in zip(names, s.weights)}}
            for s in stages
        ]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_weights(path) -> tuple[tuple[str, ...], np.ndarray, list[Stage] | None]:
    """Parse a weights file; a bare ``{domain: weight}`` object is accepted too."""
    doc = json.loads(Path(path).read_text())
    mapping = doc.get("weights", doc) if isinstance(doc, dict) else None
    if not isinstance(mapping, dict) or not mapping:
        raise ContractError(f"{path}: expected a mapping of domain name to weight")
    names = tuple(mapping)
    weights = np.array([float(mapping[n]) for n in names])
    stages = None
    if "schedule" in doc:
        stages = [Stage(int(s["start_step"]), int(s["end_step"]),
                        np.array([float(s["weights"][n]) for n in names])) for s in doc["schedule"]]
    return names, weights, stages


def cumulative_average(alphas: np.ndarray) -> np.ndarray:
    """Running mean of the step-wise weights (row ``t`` averages steps ``1..t``)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    return np.cumsum(alphas, axis=0) / np.arange(1, len(alphas) + 1)[:, None]


def entropy(alpha) -> float:
    a = np.asarray(alpha)
    a = a[a > 0]
    return float(-(a * np.log(a)).sum()) / math.log(max(len(np.asarray(alpha)), 2))
