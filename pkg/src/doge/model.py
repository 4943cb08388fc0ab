"""Tiny decoder-only transformer used as both proxy and base model."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import FlatGradient, ParameterGroup, Tape, Tensor
from .errors import ConfigError, ContractError, DataError
from .optim import clip_by_global_norm, make_optimizer

PAD_ID = 258


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_hidden: int = 512
    context_length: int = 128
    vocab_size: int = 259
    seed: int = 0

    def validate(self) -> None:
        problems = []
        for name in ("n_layers", "n_heads", "d_model", "d_hidden", "context_length", "vocab_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive (got {getattr(self, name)})")
        if self.context_length < 2:
            problems.append(f"context_length must be >= 2 (got {self.context_length})")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            problems.append(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.seed < 0:
            problems.append("seed must be non-negative")
        if problems:
            raise ConfigError("invalid transformer config: " + "; ".join(problems))

    def as_dict(self) -> dict:
        return asdict(self)


class TrainableModel(Protocol):
    """What the DoGE loops and the cancellation meter need from a model."""

    groups: list[ParameterGroup]

    def loss(self, tokens: np.ndarray) -> Tensor: ...

    def clone(self) -> TrainableModel: ...


class Transformer:
    """Pre-LayerNorm GPT-style decoder with learned absolute positions.

    Every weight matrix, bias, layer-norm vector and embedding table is its
    own :class:`ParameterGroup`, enumerated in a fixed order.
    """

    def __init__(self, config: TransformerConfig, optimizer: str = "sgd",
                 clip_norm: float | None = 1.0):
        config.validate()
        self.config = config
        self.clip_norm = clip_norm
        self.optimizer = make_optimizer(optimizer)
        self.step = 0
        self.groups: list[ParameterGroup] = []
        self._build(np.random.default_rng(config.seed))

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.groups.append(ParameterGroup(len(self.groups), name, [t]))
        return t

    def _build(self, rng: np.random.Generator) -> None:
        c = self.config
        C, H, std = c.d_model, c.d_hidden, 0.02
        resid_std = std / math.sqrt(2 * c.n_layers)
        self.tok_emb = self._add("embedding.token", rng.normal(0.0, std, (c.vocab_size, C)))
        self.pos_emb = self._add("embedding.position", rng.normal(0.0, std, (c.context_length, C)))
        self.blocks = []
        for i in range(c.n_layers):
            p = f"block{i}"
            self.blocks.append({
                "ln1_g": self._add(f"{p}.ln1.gain", np.ones(C)),
                "ln1_b": self._add(f"{p}.ln1.bias", np.zeros(C)),
                "qkv_w": self._add(f"{p}.attn.qkv.weight", rng.normal(0.0, std, (C, 3 * C))),
                "qkv_b": self._add(f"{p}.attn.qkv.bias", np.zeros(3 * C)),
                "proj_w": self._add(f"{p}.attn.proj.weight", rng.normal(0.0, resid_std, (C, C))),
                "proj_b": self._add(f"{p}.attn.proj.bias", np.zeros(C)),
                "ln2_g": self._add(f"{p}.ln2.gain", np.ones(C)),
                "ln2_b": self._add(f"{p}.ln2.bias", np.zeros(C)),
                "fc_w": self._add(f"{p}.mlp.fc.weight", rng.normal(0.0, std, (C, H))),
                "fc_b": self._add(f"{p}.mlp.fc.bias", np.zeros(H)),
                "out_w": self._add(f"{p}.mlp.proj.weight", rng.normal(0.0, resid_std, (H, C))),
                "out_b": self._add(f"{p}.mlp.proj.bias", np.zeros(C)),
            })
        self.lnf_g = self._add("ln_f.gain", np.ones(C))
        self.lnf_b = self._add("ln_f.bias", np.zeros(C))
        self.head = self._add("lm_head.weight", rng.normal(0.0, std, (C, c.vocab_size)))

    # ------------------------------------------------------------------ access

    @property
    def params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g.params]

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)

    def group_by_name(self, name: str) -> ParameterGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def clone(self) -> Transformer:
        """Deep copy including optimizer state."""
        return copy.deepcopy(self)

    # ----------------------------------------------------------------- forward

    def logits(self, inputs: np.ndarray) -> Tensor:
        """Logits of shape (B*T, vocab) for an integer input matrix (B, T)."""
        c = self.config
        inputs = np.asarray(inputs)
        if inputs.ndim != 2:
            raise ContractError(f"inputs must be (batch, time), got shape {inputs.shape}")
        B, T = inputs.shape
        if T > c.context_length:
            raise ContractError(f"sequence length {T} exceeds context length {c.context_length}")
        if inputs.size and (inputs.min() < 0 or inputs.max() >= c.vocab_size):
            raise DataError(f"token id out of range [0, {c.vocab_size})")
        C, nh = c.d_model, c.n_heads
        hd = C // nh
        x = ad.add(ad.embedding_lookup(self.tok_emb, inputs),
                   ad.embedding_lookup(self.pos_emb, np.arange(T)))
        for blk in self.blocks:
            h = ad.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            qkv = ad.add(ad.matmul(h, blk["qkv_w"]), blk["qkv_b"])
            heads = []
            for j in range(3):
                part = ad.slice_last(qkv, j * C, (j + 1) * C)
                heads.append(ad.transpose(ad.reshape(part, (B, T, nh, hd)), (0, 2, 1, 3)))
            att = ad.causal_attention(*heads)
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, C))
            x = ad.add(x, ad.add(ad.matmul(att, blk["proj_w"]), blk["proj_b"]))
            h = ad.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            h = ad.gelu(ad.add(ad.matmul(h, blk["fc_w"]), blk["fc_b"]))
            x = ad.add(x, ad.add(ad.matmul(h, blk["out_w"]), blk["out_b"]))
        x = ad.layer_norm(x, self.lnf_g, self.lnf_b)
        return ad.reshape(ad.matmul(x, self.head), (B * T, c.vocab_size))

    def loss(self, tokens: np.ndarray) -> Tensor:
        """Mean next-token cross-entropy over non-PAD target positions."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[0] == 0:
            raise ContractError("loss needs a non-empty (batch, length) token matrix")
        if tokens.shape[1] < 2:
            raise ContractError("sequences need at least two tokens to predict one")
        logits = self.logits(tokens[:, :-1])
        return ad.cross_entropy(logits, tokens[:, 1:].reshape(-1), ignore_index=PAD_ID)

    def token_nll(self, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-sequence summed NLL and scored-token counts, no tape recorded."""
        tokens = np.asarray(tokens)
        B = tokens.shape[0]
        z = self.logits(tokens[:, :-1]).data
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        targets = tokens[:, 1:].reshape(-1)
        keep = targets != PAD_ID
        nll = -logp[np.arange(targets.size), targets] * keep
        return nll.reshape(B, -1).sum(axis=1), keep.reshape(B, -1).sum(axis=1)

    # ------------------------------------------------------------------ update

    def apply_update(self, direction: FlatGradient | np.ndarray, step_size: float) -> None:
        apply_update(self, direction, step_size)


def init(config: TransformerConfig, seed: int | None = None, optimizer: str = "sgd",
         clip_norm: float | None = 1.0) -> Transformer:
    if seed is not None:
        config = TransformerConfig(**{**config.as_dict(), "seed": seed})
    return Transformer(config, optimizer=optimizer, clip_norm=clip_norm)


def domain_loss(model: TrainableModel, batch) -> Tensor:
    """Mean next-token loss on a :class:`~doge.data.Batch` (or raw token matrix)."""
    tokens = getattr(batch, "tokens", batch)
    if np.asarray(tokens).size == 0:
        raise ContractError("empty batch")
    return model.loss(tokens)


def gradient(model: TrainableModel, tokens: np.ndarray, mask=None) -> tuple[float, FlatGradient]:
    """Loss value and flat gradient of ``model.loss(tokens)``.

    Gradients go to a private buffer, never to the parameters' ``grad`` slots,
    so several calls may share one model concurrently.
    """
    with Tape() as tape:
        loss = model.loss(tokens)
    params = [p for g in model.groups for p in g.params]
    grads = tape.gradients(loss, wrt=params)
    return loss.item(), ad.flatten_gradients(model.groups, mask=mask, grads=grads)


def apply_update(model, direction: FlatGradient | np.ndarray, step_size: float) -> None:
    """``theta <- optimizer(theta, clip(direction), step_size)``.

    Masked-out segments of a :class:`FlatGradient` count as zeros. Clipping uses
    ``model.clip_norm`` (global L2 norm; ``None`` disables it).
    """
    params = [p for g in model.groups for p in g.params]
    total = sum(p.size for p in params)
    full = direction.expand() if isinstance(direction, FlatGradient) else np.asarray(direction, dtype=np.float64)
    if full.shape != (total,):
        raise ContractError(f"direction has length {full.size}, model has {total} parameters")
    full = clip_by_global_norm(full, getattr(model, "clip_norm", None))
    chunks, pos = [], 0
    for p in params:
        chunks.append(full[pos:pos + p.size].reshape(p.shape))
        pos += p.size
    model.optimizer.step(params, chunks, step_size)
    model.step = getattr(model, "step", 0) + 1
