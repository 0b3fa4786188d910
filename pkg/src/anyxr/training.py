"""Shared minibatch loop used by every training stage."""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericError
from .nn import ParamStore, adamw_step
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    extra: dict = field(default_factory=dict)


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]))


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled equal-size batches; a short tail is dropped unless it is the only batch."""
    perm = rng.permutation(n)
    if n <= batch_size:
        return [perm]
    k = n // batch_size
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(k)]


def run_epochs(store: ParamStore, n: int, step_loss: Callable[[np.ndarray, np.random.Generator], Tensor],
               opt: OptimConfig, seed: int, stage: str,
               on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Optimize ``step_loss`` over shuffled minibatches; returns per-epoch mean loss."""
    rng = stage_rng(seed, stage)
    history = []
    for epoch in range(opt.epochs):
        total, count = 0.0, 0
        for step, idx in enumerate(batches(n, opt.batch_size, rng)):
            store.zero_grad()
            with GradTape() as tape:
                loss = step_loss(idx, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"stage {stage}: non-finite loss at epoch {epoch}, step {step}")
            tape.backward(loss)
            adamw_step(store, lr=opt.lr, betas=opt.betas, eps=opt.eps, weight_decay=opt.weight_decay)
            total += value
            count += 1
        history.append(total / max(count, 1))
        log.info("stage %s epoch %d loss %.5f", stage, epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    store.zero_grad()
    return history
