"""Synthetic multi-domain corpora with controlled inter-domain overlap.

Every *component* is an order-2 Markov chain over its own block of
``alphabet_size`` symbols. A domain's transition kernel is a convex mixture
of component kernels, so

* two domains with the same mixture have identical transition matrices, and
* two domains with disjoint component sets have disjoint symbol supports.

The overlap coefficient of two domains is ``sum_c min(w_a[c], w_b[c])``.
A domain declared ``like=<other>, overlap=rho`` gets ``rho`` of the other
domain's mixture and ``1 - rho`` of a fresh private component.

The optional OOD domain is a per-sequence mixture of the training domains'
generators (``ood={"a": 1.0}`` is a fresh sample from domain ``a``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import BOS_ID, DomainCorpus, derive_rng
from .errors import ConfigError

FIRST_SYMBOL = 33


@dataclass
class DomainSpec:
    name: str
    like: str | None = None
    overlap: float = 0.0
    components: dict[str, float] | None = None
    concentration: float | None = None


@dataclass
class SyntheticSpec:
    domains: list[DomainSpec]
    seq_len: int = 32
    sequences_per_domain: int = 200
    alphabet_size: int = 8
    concentration: float = 0.3
    ood: dict[str, float] | None = None
    ood_sequences: int | None = None
    seed: int = 0

    def validate(self) -> None:
        names = [d.name for d in self.domains]
        if len(names) < 1:
            raise ConfigError("at least one domain is required", "synthetic.domains")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate names {names}", "synthetic.domains")
        if self.seq_len < 3:
            raise ConfigError("must be >= 3", "synthetic.seq_len")
        if self.sequences_per_domain < 1:
            raise ConfigError("must be >= 1", "synthetic.sequences_per_domain")
        if self.alphabet_size < 2:
            raise ConfigError("must be >= 2", "synthetic.alphabet_size")
        if self.concentration <= 0:
            raise ConfigError("must be > 0", "synthetic.concentration")
        for i, d in enumerate(self.domains):
            if not 0.0 <= d.overlap <= 1.0:
                raise ConfigError(f"overlap {d.overlap} outside [0, 1]", f"synthetic.domains[{i}].overlap")
            if d.like is not None and d.like not in names[:i]:
                raise ConfigError(f"like={d.like!r} must name an earlier domain", f"synthetic.domains[{i}].like")
        if self.ood is not None:
            bad = set(self.ood) - set(names)
            if bad or not self.ood or any(v < 0 for v in self.ood.values()) or sum(self.ood.values()) <= 0:
                raise ConfigError(f"must be non-negative weights over domain names, got {self.ood}", "synthetic.ood")

    def mixtures(self) -> dict[str, dict[str, float]]:
        """Component mixture for every domain, resolving ``like``/``overlap``."""
        self.validate()
        out: dict[str, dict[str, float]] = {}
        for d in self.domains:
            if d.components is not None:
                total = sum(d.components.values())
                out[d.name] = {c: w / total for c, w in d.components.items() if w > 0}
            elif d.like is None:
                out[d.name] = {d.name: 1.0}
            else:
                mix = {c: d.overlap * w for c, w in out[d.like].items()}
                if d.overlap < 1.0:
                    mix[d.name] = mix.get(d.name, 0.0) + 1.0 - d.overlap
                out[d.name] = {c: w for c, w in mix.items() if w > 0}
        return out

    def overlap_matrix(self) -> np.ndarray:
        mix = self.mixtures()
        names = [d.name for d in self.domains]
        k = len(names)
        m = np.zeros((k, k))
        for i, a in enumerate(names):
            for j, b in enumerate(names):
                m[i, j] = sum(min(w, mix[b].get(c, 0.0)) for c, w in mix[a].items())
        return m


class _Generator:
    """All component kernels laid out on one global alphabet."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.mix = spec.mixtures()
        self.components = sorted({c for m in self.mix.values() for c in m})
        m = spec.alphabet_size
        self.n_symbols = m * len(self.components)
        if FIRST_SYMBOL + self.n_symbols > 256:
            raise ConfigError(f"{len(self.components)} components x {m} symbols exceed the byte range",
                              "synthetic.alphabet_size")
        conc = {d.name: d.concentration for d in spec.domains if d.concentration is not None}
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5E7]))
        self.kernels = {}
        for c in self.components:
            alpha = conc.get(c, spec.concentration)
            self.kernels[c] = rng.dirichlet(np.full(m, alpha), size=(m, m))

    def domain_kernel(self, name: str) -> np.ndarray:
        """Transition tensor ``K[prev2, prev1, next]`` over the global alphabet."""
        m, n = self.spec.alphabet_size, self.n_symbols
        local = np.arange(n) % m
        K = np.zeros((n, n, n))
        for c, w in self.mix[name].items():
            j = self.components.index(c)
            K[:, :, j * m:(j + 1) * m] += w * self.kernels[c][local[:, None], local[None, :]]
        return K

    def start_probs(self, name: str) -> np.ndarray:
        m = self.spec.alphabet_size
        p = np.zeros(self.n_symbols)
        for c, w in self.mix[name].items():
            j = self.components.index(c)
            p[j * m:(j + 1) * m] = w / m
        return p

    def sample(self, name: str, count: int, rng: np.random.Generator) -> np.ndarray:
        L = self.spec.seq_len - 1
        K = self.domain_kernel(name)
        cum_start = np.cumsum(self.start_probs(name))
        out = np.empty((count, L), dtype=np.int64)
        out[:, 0] = _pick(cum_start[None, :], rng.random(count))
        out[:, 1] = _pick(cum_start[None, :], rng.random(count))
        cumK = np.cumsum(K, axis=2)
        for t in range(2, L):
            out[:, t] = _pick(cumK[out[:, t - 2], out[:, t - 1]], rng.random(count))
        rows = np.empty((count, L + 1), dtype=np.int64)
        rows[:, 0] = BOS_ID
        rows[:, 1:] = out + FIRST_SYMBOL
        return rows


def _pick(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    total = cum[:, -1]
    return np.minimum((cum < (u * total)[:, None]).sum(axis=1), cum.shape[1] - 1)


def generate_synthetic(spec: SyntheticSpec, seed: int | None = None) -> DomainCorpus:
    """Sample a corpus; ``seed`` (default ``spec.seed``) drives both kernels and sequences."""
    if seed is not None and seed != spec.seed:
        spec = replace(spec, seed=seed)
    gen = _Generator(spec)
    names = [d.name for d in spec.domains]
    domains = tuple(gen.sample(n, spec.sequences_per_domain, derive_rng(spec.seed, "synthetic", i))
                    for i, n in enumerate(names))
    ood = None
    if spec.ood is not None:
        n_ood = spec.ood_sequences or spec.sequences_per_domain
        rng = derive_rng(spec.seed, "synthetic-ood-mix")
        w = np.array([spec.ood.get(n, 0.0) for n in names])
        counts = rng.multinomial(n_ood, w / w.sum())
        parts = [gen.sample(n, c, derive_rng(spec.seed, "synthetic-ood", i))
                 for i, (n, c) in enumerate(zip(names, counts)) if c]
        ood = np.concatenate(parts)[rng.permutation(n_ood)]
    return DomainCorpus(tuple(names), domains, ood)


def domain_kernel(spec: SyntheticSpec, name: str) -> np.ndarray:
    return _Generator(spec).domain_kernel(name)


def spec_from_dict(d: dict) -> SyntheticSpec:
    """Build a spec from a parsed config table."""
    d = dict(d)
    domains = []
    for i, item in enumerate(d.pop("domains", [])):
        if isinstance(item, str):
            item = {"name": item}
        try:
            domains.append(DomainSpec(**item))
        except TypeError as exc:
            raise ConfigError(str(exc), f"synthetic.domains[{i}]") from None
    ood = d.pop("ood", None)
    if isinstance(ood, dict) and "mix" in ood:
        ood = ood["mix"]
    try:
        spec = SyntheticSpec(domains=domains, ood=ood, **d)
    except TypeError as exc:
        raise ConfigError(str(exc), "synthetic") from None
    spec.validate()
    return spec
