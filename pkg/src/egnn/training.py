"""Optimiser, learning-rate schedules, losses, metrics and the training loop."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import ContractError, Tensor, clip, log, reduce_mean, reduce_sum, square

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (dataset, init, noise, ...)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


class Adam:
    """Adam with bias-corrected moments and decoupled weight decay.

    Weight decay shrinks each parameter by ``(1 - lr * weight_decay)``
    before the moment update is applied.  With ``clip_norm`` the gradient is
    rescaled to at most that global L2 norm before it enters the moments.
    """

    def __init__(
        self,
        named_params: Sequence[tuple[str, Tensor]],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        clip_norm: float | None = None,
    ):
        if clip_norm is not None and not clip_norm > 0:
            raise ContractError(f"clip_norm must be positive, got {clip_norm}")
        self.named_params = list(named_params)
        self.clip_norm = clip_norm
        self.last_grad_norm = 0.0
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        # moments live in one flat buffer so the update is a handful of vector ops;
        # ``m`` and ``v`` expose per-parameter views shaped like the parameters
        sizes = [p.data.size for _, p in self.named_params]
        self._offsets = np.cumsum([0] + sizes)
        self._m = np.zeros(self._offsets[-1])
        self._v = np.zeros(self._offsets[-1])
        self.m = self._views(self._m)
        self.v = self._views(self._v)

    def _views(self, flat: np.ndarray) -> list[np.ndarray]:
        return [
            flat[self._offsets[k] : self._offsets[k + 1]].reshape(p.data.shape)
            for k, (_, p) in enumerate(self.named_params)
        ]

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        g = np.concatenate(
            [np.zeros(p.data.size) if p.grad is None else np.ravel(p.grad) for _, p in self.named_params]
        )
        if not np.all(np.isfinite(g)):
            for k, (name, _) in enumerate(self.named_params):
                if not np.all(np.isfinite(g[self._offsets[k] : self._offsets[k + 1]])):
                    raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        norm = float(np.sqrt(g @ g))
        self.last_grad_norm = norm
        if self.clip_norm is not None and norm > self.clip_norm:
            g *= self.clip_norm / norm
        self.step_count += 1
        t = self.step_count
        c1, c2 = 1 - b1**t, 1 - b2**t
        self._m *= b1
        self._m += (1 - b1) * g
        self._v *= b2
        self._v += (1 - b2) * (g * g)
        delta = lr * (self._m / c1) / (np.sqrt(self._v / c2) + self.eps)
        for k, (_, p) in enumerate(self.named_params):
            d = delta[self._offsets[k] : self._offsets[k + 1]].reshape(p.data.shape)
            if self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - d


def adam_step(state: Adam, lr: float | None = None) -> None:
    state.step(lr)


def constant_lr(epoch: int, epochs: int, lr_max: float) -> float:
    return lr_max


def cosine_lr(epoch: int, epochs: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine decay from ``lr_max`` at epoch 0 to ``lr_min`` at the final epoch."""
    if epochs <= 1:
        return lr_max
    frac = min(max(epoch / (epochs - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


SCHEDULES = {"constant": constant_lr, "cosine": cosine_lr}


# -- losses and metrics --------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    return reduce_mean(square(pred - target))


def bce_terms(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Element-wise binary cross entropy with probabilities clamped to [1e-12, 1-1e-12]."""
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ContractError(f"bce: probabilities {probs.shape} vs labels {labels.shape}")
    p = clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(log(p) * labels + log(1.0 - p) * (1.0 - labels))


def bce_loss(A_hat: Tensor, A) -> Tensor:
    """Sum of BCE over off-diagonal entries of a dense [M x M] reconstruction."""
    adj = np.asarray(getattr(A, "adjacency", A), dtype=np.float64)
    m = adj.shape[0]
    if A_hat.shape != (m, m):
        raise ContractError(f"bce_loss: reconstruction {A_hat.shape} vs adjacency {adj.shape}")
    off = ~np.eye(m, dtype=bool)
    return reduce_sum(bce_terms(A_hat[off], adj[off]))


def edge_metrics(A_hat, A, threshold: float = 0.5) -> tuple[float, float]:
    """(% wrong off-diagonal entries, F1 on the edge class).

    Accepts a single dense pair or sequences of them (pooled over graphs).
    F1 is reported as 0.0 when it is undefined (no true and no predicted edges).
    """
    if isinstance(A_hat, (Tensor, np.ndarray)):
        A_hat, A = [A_hat], [A]
    wrong = total = tp = fp = fn = 0
    for ah, a in zip(A_hat, A):
        ah = ah.data if isinstance(ah, Tensor) else np.asarray(ah)
        a = np.asarray(getattr(a, "adjacency", a))
        off = ~np.eye(a.shape[0], dtype=bool)
        pred = ah[off] >= threshold
        truth = a[off] > 0
        wrong += int(np.sum(pred != truth))
        total += int(off.sum())
        tp += int(np.sum(pred & truth))
        fp += int(np.sum(pred & ~truth))
        fn += int(np.sum(~pred & truth))
    pct = 100.0 * wrong / total if total else 0.0
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom and tp else 0.0
    return pct, f1


# -- training loop -------------------------------------------------------------


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def per_epoch(self) -> list[list[float | None]]:
        vals = self.val_loss or [None] * len(self.train_loss)
        return [[t, v] for t, v in zip(self.train_loss, vals)]


def fit(
    named_params: Sequence[tuple[str, Tensor]],
    n_train: int,
    batch_loss: Callable[[np.ndarray, np.random.Generator], Tensor],
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    schedule: str = "constant",
    weight_decay: float = 0.0,
    rng: np.random.Generator,
    val_loss: Callable[[], float] | None = None,
    early_stopping: bool = False,
    clip_norm: float | None = None,
    log_every: int = 0,
) -> History:
    """Minibatch training with Adam.

    ``batch_loss(indices, rng)`` must return the mean loss of the batch as a
    tape-recorded scalar.  With ``early_stopping`` the parameters with the
    lowest validation loss are restored at the end.
    """
    if epochs < 1 or batch_size < 1:
        raise ContractError("epochs and batch_size must be >= 1")
    if schedule not in SCHEDULES:
        raise ContractError(f"unknown lr schedule {schedule!r}")
    if early_stopping and val_loss is None:
        raise ContractError("early stopping needs a validation loss")
    opt = Adam(named_params, lr=lr, weight_decay=weight_decay, clip_norm=clip_norm)
    hist = History()
    best = (math.inf, None)
    for epoch in range(epochs):
        lr_e = SCHEDULES[schedule](epoch, epochs, lr)
        order = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            loss = batch_loss(idx, rng)
            loss.backward()
            opt.step(lr_e)
            total += loss.item() * len(idx)
        hist.train_loss.append(total / n_train)
        if val_loss is not None:
            v = float(val_loss())
            hist.val_loss.append(v)
            if v < best[0]:
                best = (v, [p.data.copy() for _, p in named_params])
                hist.best_epoch = epoch
        if log_every and (epoch % log_every == 0 or epoch == epochs - 1):
            logger.info("epoch %d lr %.2e train %.6g val %s", epoch, lr_e, hist.train_loss[-1],
                        hist.val_loss[-1] if hist.val_loss else "-")
    if early_stopping and best[1] is not None:
        for (_, p), saved in zip(named_params, best[1]):
            p.data = saved
    return hist
