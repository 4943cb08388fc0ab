"""Per-domain evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import DomainCorpus
from ..errors import ContractError


@dataclass
class EvalReport:
    """Validation losses per domain and the perplexities derived from them.

    The average perplexity is ``exp`` of the mean per-domain loss (a geometric
    mean of perplexities), not the mean of perplexities.
    """

    names: tuple[str, ...]
    losses: np.ndarray
    tokens_consumed: np.ndarray | None = None

    @property
    def perplexities(self) -> np.ndarray:
        return np.exp(self.losses)

    @property
    def average_loss(self) -> float:
        return float(np.mean(self.losses))

    @property
    def average_perplexity(self) -> float:
        return math.exp(self.average_loss)

    @property
    def worst_perplexity(self) -> float:
        return float(np.max(self.perplexities))

    def token_shares(self) -> np.ndarray | None:
        if self.tokens_consumed is None:
            return None
        total = self.tokens_consumed.sum()
        return self.tokens_consumed / total if total else self.tokens_consumed.astype(float)

    def to_dict(self) -> dict:
        doc = {
            "domains": {
                n: {"loss": float(l), "perplexity": float(p)}
                for n, l, p in zip(self.names, self.losses, self.perplexities)
            },
            "average_loss": self.average_loss,
            "average_perplexity": self.average_perplexity,
            "worst_perplexity": self.worst_perplexity,
        }
        if self.tokens_consumed is not None:
            for n, c in zip(self.names, self.tokens_consumed):
                doc["domains"][n]["tokens_consumed"] = int(c)
        return doc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, doc: dict, rtol: float = 1e-12) -> EvalReport:
        """Rebuild a report and re-check the perplexity identities."""
        names = tuple(doc["domains"])
        losses = np.array([doc["domains"][n]["loss"] for n in names], dtype=np.float64)
        tokens = None
        if all("tokens_consumed" in doc["domains"][n] for n in names):
            tokens = np.array([doc["domains"][n]["tokens_consumed"] for n in names], dtype=np.int64)
        report = cls(names, losses, tokens)
        checks = [(doc["domains"][n]["perplexity"], p, n) for n, p in zip(names, report.perplexities)]
        checks += [(doc["average_perplexity"], report.average_perplexity, "average"),
                   (doc["worst_perplexity"], report.worst_perplexity, "worst-case")]
        for stored, derived, what in checks:
            if not math.isclose(stored, derived, rel_tol=rtol):
                raise ContractError(f"report perplexity for {what} is {stored}, losses imply {derived}")
        return report

    @classmethod
    def load(cls, path) -> EvalReport:
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate(model, corpus: DomainCorpus, batch_size: int = 32,
             tokens_consumed: np.ndarray | None = None) -> EvalReport:
    """Token-weighted mean next-token loss for every domain of ``corpus``."""
    losses = []
    for d in corpus.domains:
        total, count = 0.0, 0
        for start in range(0, d.shape[0], batch_size):
            nll, n = model.token_nll(d[start:start + batch_size])
            total += float(nll.sum())
            count += int(n.sum())
        losses.append(total / count)
    return EvalReport(corpus.names, np.array(losses), tokens_consumed)
