"""Byte-level tokenization, multi-domain corpora and the domain samplers."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

log = logging.getLogger(__name__)

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259
OOD = -1
OOD_DIR = "_ood"


def encode(data: bytes | str) -> np.ndarray:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def decode(tokens) -> bytes:
    t = np.asarray(tokens, dtype=np.int64)
    return bytes(t[t < 256].astype(np.uint8).tolist())


def derive_rng(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent stream keyed by (run seed, purpose tag, domain index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(tag.encode()), index + 1]))


@dataclass(frozen=True)
class DomainCorpus:
    """``k`` training domains plus an optional out-of-domain target.

    Each domain is an int matrix (sequences x length) right-padded with PAD.
    """

    names: tuple[str, ...]
    domains: tuple[np.ndarray, ...]
    ood: np.ndarray | None = None
    ood_name: str = OOD_DIR
    vocab_size: int = VOCAB_SIZE
    skipped_files: int = 0

    def __post_init__(self):
        if len(self.names) != len(self.domains):
            raise DataError("names and domains differ in length")
        if len(self.names) < 1:
            raise DataError("corpus needs at least one domain")
        if len(set(self.names)) != len(self.names):
            raise DataError(f"duplicate domain names: {self.names}")
        lengths = set()
        for name, d in zip(self.names, self.domains):
            self._check(name, d)
            lengths.add(d.shape[1])
        if self.ood is not None:
            self._check(self.ood_name, self.ood)
            lengths.add(self.ood.shape[1])
            if self.ood_name in self.names:
                raise DataError(f"OOD domain {self.ood_name!r} clashes with a training domain")
        if len(lengths) != 1:
            raise DataError(f"all domains must share one sequence length, got {sorted(lengths)}")

    def _check(self, name, d):
        if d.ndim != 2 or d.shape[0] == 0:
            raise DataError(f"domain {name!r} is empty")
        if d.min() < 0 or d.max() >= self.vocab_size:
            raise DataError(f"domain {name!r} has token ids outside [0, {self.vocab_size})")

    @property
    def k(self) -> int:
        return len(self.names)

    @property
    def seq_len(self) -> int:
        return self.domains[0].shape[1]

    @property
    def has_ood(self) -> bool:
        return self.ood is not None

    def domain(self, domain_id: int) -> np.ndarray:
        if domain_id == OOD:
            if self.ood is None:
                raise ContractError("corpus has no OOD domain")
            return self.ood
        if not 0 <= domain_id < self.k:
            raise ContractError(f"unknown domain id {domain_id} (k={self.k})")
        return self.domains[domain_id]

    def split(self, every: int = 20) -> tuple[DomainCorpus, DomainCorpus]:
        """Deterministic train/held-out split: every ``every``-th sequence is held out."""
        def cut(d):
            held = np.arange(d.shape[0]) % every == every - 1
            if held.all() or not held.any():
                return d, d
            return d[~held], d[held]

        train, val = zip(*(cut(d) for d in self.domains))
        ood_train = ood_val = None
        if self.ood is not None:
            ood_train, ood_val = cut(self.ood)
        mk = lambda ds, o: DomainCorpus(self.names, tuple(ds), o, self.ood_name, self.vocab_size)
        return mk(train, ood_train), mk(val, ood_val)


@dataclass
class Batch:
    tokens: np.ndarray
    domain_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ContractError("batch must hold at least one sequence")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def token_counts(self, k: int) -> np.ndarray:
        """Scored (non-PAD target) tokens per domain id."""
        scored = (self.tokens[:, 1:] != PAD_ID).sum(axis=1)
        out = np.zeros(k, dtype=np.int64)
        np.add.at(out, self.domain_ids[self.domain_ids >= 0], scored[self.domain_ids >= 0])
        return out


# ------------------------------------------------------------------ ingestion


def chunk(tokens: np.ndarray, seq_len: int, min_remainder: int = 1) -> list[np.ndarray]:
    """Split a token stream into BOS-prefixed rows of ``seq_len``.

    Each row carries ``seq_len - 1`` payload tokens. A trailing partial row is
    kept (PAD-filled) when it has at least ``min_remainder`` payload tokens.
    """
    if seq_len < 2:
        raise ContractError("seq_len must be at least 2")
    width = seq_len - 1
    rows = []
    for start in range(0, len(tokens), width):
        piece = tokens[start:start + width]
        if len(piece) < width and len(piece) < min_remainder:
            break
        row = np.full(seq_len, PAD_ID, dtype=np.int64)
        row[0] = BOS_ID
        row[1:1 + len(piece)] = piece
        rows.append(row)
    return rows


def _stack(rows, name):
    if not rows:
        raise DataError(f"domain {name!r} produced no sequences")
    return np.stack(rows)


def ingest(root: str | Path, seq_len: int, min_remainder: int = 1) -> DomainCorpus:
    """Read ``root/<domain>/*`` text files; ``root/_ood/`` becomes the target domain.

    Domains are ordered by directory name. Files that are not valid UTF-8 are
    skipped with a warning and counted in ``skipped_files``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus root {root} is not a directory")
    names, domains, skipped, ood = [], [], 0, None
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        rows = []
        for f in sorted(p for p in sub.rglob("*") if p.is_file()):
            raw = f.read_bytes()
            try:
                raw.decode("utf-8")
            except UnicodeDecodeError:
                log.warning("skipping undecodable file %s", f)
                skipped += 1
                continue
            rows.extend(chunk(encode(raw), seq_len, min_remainder))
        if not rows:
            raise DataError(f"domain {sub.name!r} is empty")
        if sub.name == OOD_DIR:
            ood = np.stack(rows)
        else:
            names.append(sub.name)
            domains.append(np.stack(rows))
    if not names:
        raise DataError(f"no domain directories under {root}")
    return DomainCorpus(tuple(names), tuple(domains), ood, skipped_files=skipped)


def ingest_jsonl(path: str | Path, seq_len: int, min_remainder: int = 1) -> DomainCorpus:
    """Read ``{"domain": ..., "text": ...}`` records; domain ``_ood`` is the target."""
    per_domain: dict[str, list[np.ndarray]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                name, text = rec["domain"], rec["text"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise DataError(f"{path}:{lineno}: expected an object with 'domain' and 'text'") from None
            per_domain.setdefault(str(name), []).extend(chunk(encode(text), seq_len, min_remainder))
    ood_rows = per_domain.pop(OOD_DIR, None)
    names = sorted(per_domain)
    if not names:
        raise DataError(f"{path}: no training domains")
    return DomainCorpus(tuple(names), tuple(_stack(per_domain[n], n) for n in names),
                        _stack(ood_rows, OOD_DIR) if ood_rows is not None else None)


# ------------------------------------------------------------------- sampling


def _draw(rng: np.random.Generator, corpus: DomainCorpus, domain_ids: np.ndarray) -> np.ndarray:
    highs = np.array([corpus.domain(int(d)).shape[0] for d in domain_ids])
    idx = rng.integers(0, highs)
    return np.stack([corpus.domain(int(d))[i] for d, i in zip(domain_ids, idx)])


def uniform_domain_batch(corpus: DomainCorpus, domain_id: int, b: int, rng: np.random.Generator) -> Batch:
    """``b`` sequences drawn i.i.d. with replacement from one domain."""
    if b < 1:
        raise ContractError("batch size must be >= 1")
    corpus.domain(domain_id)
    ids = np.full(b, domain_id, dtype=np.int64)
    return Batch(_draw(rng, corpus, ids), ids)


def mixture_batch(corpus: DomainCorpus, alpha, b: int, rng: np.random.Generator) -> Batch:
    """``b`` sequences from ``P_alpha``: pick a domain by ``alpha``, then a sequence uniformly."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (corpus.k,):
        raise ContractError(f"alpha has dimension {alpha.size}, corpus has k={corpus.k}")
    if b < 1:
        raise ContractError("batch size must be >= 1")
    if corpus.k == 1:
        ids = np.zeros(b, dtype=np.int64)
    else:
        ids = rng.choice(corpus.k, size=b, p=alpha / alpha.sum()).astype(np.int64)
    return Batch(_draw(rng, corpus, ids), ids)
