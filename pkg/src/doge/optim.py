"""Learning-rate schedule, gradient clipping and the two update rules."""

from __future__ import annotations

import math

import numpy as np


def cosine_schedule(step: int, total: int, max_lr: float = 5e-4, min_lr: float = 1e-4,
                    warmup_frac: float = 0.05) -> float:
    """Learning rate at 0-based ``step`` of a ``total``-step run.

    Linear warmup over the first ``warmup_frac`` of the run, then cosine decay
    from ``max_lr`` to ``min_lr``.
    """
    warmup = int(round(warmup_frac * total))
    if warmup and step < warmup:
        return max_lr * (step + 1) / warmup
    span = max(total - warmup - 1, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_by_global_norm(direction: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return direction
    norm = float(np.sqrt(np.dot(direction, direction)))
    if norm > max_norm:
        return direction * (max_norm / norm)
    return direction


class SGD:
    name = "sgd"

    def step(self, params, chunks, lr: float) -> None:
        for p, d in zip(params, chunks):
            p.data -= lr * d

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state, params) -> None:
        pass


class AdamW:
    """Adam with decoupled weight decay on matrices and embeddings (ndim >= 2)."""

    name = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: list[np.ndarray] = []
        self.v: list[np.ndarray] = []

    def step(self, params, chunks, lr: float) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, chunks, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        if not self.m:
            return {}
        out = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m.reshape(-1)
            out[f"v.{i}"] = v.reshape(-1)
        return out

    def load_state(self, state, params) -> None:
        if not state:
            return
        self.t = int(state["t"][0])
        self.m = [state[f"m.{i}"].reshape(p.shape).copy() for i, p in enumerate(params)]
        self.v = [state[f"v.{i}"].reshape(p.shape).copy() for i, p in enumerate(params)]


def make_optimizer(name: str):
    if name == "sgd":
        return SGD()
    if name == "adam":
        return AdamW()
    raise ValueError(f"unknown optimizer {name!r} (expected 'sgd' or 'adam')")
