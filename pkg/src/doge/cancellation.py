"""Cancellation-effect scores per parameter group, and group-selection masks.

During a short warmup on uniform-mixture batches, each step contributes, per
group ``w``::

    ||w_{t+1} - w_t|| / sum_{x in batch} ||d l(x) / d w||

A small ratio means the per-sample gradients largely cancelled each other.
The reciprocal ratio also appears in the literature, with the selection
preferences flipped; here ``low`` always means the most cancellation.
The warmup runs on a throwaway copy with plain SGD on the summed per-sample
losses; the caller's model is never touched.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tape
from .core import uniform_weights
from .data import DomainCorpus, mixture_batch
from .errors import ContractError

log = logging.getLogger(__name__)

DENOM_FLOOR = 1e-12


@dataclass
class CancellationScores:
    names: tuple[str, ...]
    scores: np.ndarray
    sizes: np.ndarray
    steps: int
    batch_size: int

    def __post_init__(self):
        if np.any(self.scores < 0):
            raise ContractError("cancellation scores must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return {n: float(s) for n, s in zip(self.names, self.scores)}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "score", "size"])
            for n, s, z in zip(self.names, self.scores, self.sizes):
                w.writerow([n, repr(float(s)), int(z)])

    @classmethod
    def from_csv(cls, path, steps: int = 0, batch_size: int = 0) -> CancellationScores:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(tuple(r["group"] for r in rows), np.array([float(r["score"]) for r in rows]),
                   np.array([int(r["size"]) for r in rows]), steps, batch_size)


@dataclass(frozen=True)
class SelectionMask:
    """Selected group ids (positions in the model's group list) plus the strategy tag."""

    ids: tuple[int, ...]
    strategy: str

    def fraction(self, sizes) -> float:
        """Share of parameters whose gradients enter the generalization scores."""
        sizes = np.asarray(sizes)
        return float(sizes[list(self.ids)].sum() / sizes.sum())


def _group_norms(model, grads: dict[int, np.ndarray]) -> np.ndarray:
    out = np.empty(len(model.groups))
    for i, g in enumerate(model.groups):
        out[i] = np.sqrt(sum(float(np.sum(grads[p.id] ** 2)) for p in g.params))
    return out


def measure_cancellation(model, corpus: DomainCorpus | None, steps: int = 1000, batch_size: int = 8,
                         rng: np.random.Generator | None = None,
                         lr: float | Callable[[int], float] = 5e-4,
                         denominator: str = "sum_of_norms",
                         sampler: Callable[[int, np.random.Generator], np.ndarray] | None = None,
                         ) -> CancellationScores:
    """Accumulate the per-group cancellation ratio over ``steps`` warmup steps.

    ``lr`` is a constant or a function of the 0-based step. ``denominator``
    selects ``"sum_of_norms"`` (default) or ``"norm_of_sum"``. ``sampler(t, rng)``
    replaces the uniform-mixture batches; each row it returns is one sample
    passed to ``model.loss``.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    if denominator not in ("sum_of_norms", "norm_of_sum"):
        raise ContractError(f"unknown denominator {denominator!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    work = model.clone()
    groups = work.groups
    params = [p for g in groups for p in g.params]
    totals = np.zeros(len(groups))
    ever_nonzero = np.zeros(len(groups), dtype=bool)
    if sampler is None:
        if corpus is None:
            raise ContractError("need a corpus or a sampler")
        alpha = uniform_weights(corpus.k)

        def sampler(t, rng):
            return mixture_batch(corpus, alpha, batch_size, rng).tokens

    for t in range(steps):
        eta = lr(t) if callable(lr) else float(lr)
        rows = sampler(t, rng)
        summed = {p.id: np.zeros_like(p.data) for p in params}
        denom = np.zeros(len(groups))
        for row in rows:
            with Tape() as tape:
                loss = work.loss(row[None, :])
            g = tape.gradients(loss, wrt=params)
            for pid, v in g.items():
                summed[pid] += v
            if denominator == "sum_of_norms":
                denom += _group_norms(work, g)
        if denominator == "norm_of_sum":
            denom = _group_norms(work, summed)
        before = [[p.data.copy() for p in grp.params] for grp in groups]
        for p in params:
            p.data -= eta * summed[p.id]
        for i, grp in enumerate(groups):
            change = np.sqrt(sum(float(np.sum((p.data - old) ** 2)) for p, old in zip(grp.params, before[i])))
            totals[i] += change / max(denom[i], DENOM_FLOOR)
        ever_nonzero |= denom > 0
    for i in np.flatnonzero(~ever_nonzero):
        log.warning("group %s had zero gradient for all %d steps; score 0", groups[i].name, steps)
    return CancellationScores(tuple(g.name for g in groups), totals,
                              np.array([g.size for g in groups]), steps, batch_size)


_STRATEGY = re.compile(r"^(low|high)(\d+)$")


def parse_strategy(name: str) -> tuple[str, int]:
    m = _STRATEGY.match(name)
    if not m or int(m.group(2)) < 1:
        raise ContractError(f"mask strategy must look like 'low30' or 'high10', got {name!r}")
    return m.group(1), int(m.group(2))


def select_groups(scores: CancellationScores, k: int, mode: str) -> SelectionMask:
    """The ``k`` lowest- (``mode="low"``) or highest-scoring groups; ties broken by name."""
    if k < 1:
        raise ContractError("k must be >= 1")
    if mode not in ("low", "high"):
        raise ContractError(f"mode must be 'low' or 'high', got {mode!r}")
    sign = 1.0 if mode == "low" else -1.0
    order = sorted(range(len(scores.names)), key=lambda i: (sign * scores.scores[i], scores.names[i]))
    return SelectionMask(tuple(order[:min(k, len(order))]), f"{mode}{k}")


def select_by_strategy(scores: CancellationScores, strategy: str) -> SelectionMask:
    mode, k = parse_strategy(strategy)
    return select_groups(scores, k, mode)
