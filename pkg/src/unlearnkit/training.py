"""Next-token training: batching, the LM loss, and an Adam loop.

The loop is written against an arbitrary set of trainable arrays plus a
function that assembles full model weights from them, so base training (all
weights trainable) and low-rank fine-tuning (only adapter factors trainable)
share one implementation.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericError
from .model import ModelConfig, ParameterSet, forward_batch

log = logging.getLogger(__name__)

PAD_ID = 0


@dataclasses.dataclass
class Batch:
    inputs: np.ndarray  # [B, T]
    targets: np.ndarray  # [B, T]
    weights: np.ndarray  # [B, T], 0 on padding


def make_batch(sequences: Sequence[Sequence[int]], max_len: int) -> Batch:
    """Right-pad sequences into an input/target batch, truncating to ``max_len`` inputs."""
    seqs = [list(s[: max_len + 1]) for s in sequences]
    if any(len(s) < 2 for s in seqs):
        raise DataError("training sequences need at least 2 tokens")
    t = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), t), PAD_ID, dtype=np.int64)
    targets = np.full((len(seqs), t), PAD_ID, dtype=np.int64)
    weights = np.zeros((len(seqs), t), dtype=np.float32)
    for i, s in enumerate(seqs):
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        weights[i, :n] = 1.0
    return Batch(inputs, targets, weights)


def lm_loss(config: ModelConfig, weights: Mapping, batch: Batch) -> ad.Var:
    logits = forward_batch(config, weights, batch.inputs)
    b, t, v = logits.shape
    return ad.cross_entropy(ad.reshape(logits, (b * t, v)), batch.targets.reshape(-1), batch.weights.reshape(-1))


class Adam:
    """Adam with bias correction, state kept in float32."""

    def __init__(self, shapes: Mapping[str, tuple], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        step = np.float32(self.lr * np.sqrt(c2) / c1)
        eps = np.float32(self.eps * np.sqrt(c2))
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= np.float32(b1)
            m += np.float32(1 - b1) * g
            v *= np.float32(b2)
            v += np.float32(1 - b2) * (g * g)
            params[k] -= step * m / (np.sqrt(v) + eps)


class SequenceSampler:
    """Deterministic epoch-shuffled mini-batches over a list of sequences."""

    def __init__(self, sequences: Sequence[Sequence[int]], batch_size: int, seed: int):
        if not sequences:
            raise DataError("empty training corpus")
        self.sequences = list(sequences)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._order: list[int] = []

    def next(self) -> list[Sequence[int]]:
        out = []
        while len(out) < self.batch_size:
            if not self._order:
                self._order = list(self.rng.permutation(len(self.sequences)))
            out.append(self.sequences[self._order.pop()])
        return out


def optimize(
    config: ModelConfig,
    trainable: dict[str, np.ndarray],
    make_weights: Callable[[Mapping[str, ad.Var]], Mapping],
    sampler: SequenceSampler,
    steps: int,
    lr: float,
    grad_accum: int = 1,
    log_every: int = 0,
) -> list[float]:
    """Run ``steps`` Adam updates in place on ``trainable``; return per-step mean loss."""
    opt = Adam({k: v.shape for k, v in trainable.items()}, lr)
    losses = []
    for step in range(steps):
        acc = {k: np.zeros_like(v) for k, v in trainable.items()}
        total = 0.0
        for _ in range(grad_accum):
            batch = make_batch(sampler.next(), config.max_seq_len)
            leaves = {k: ad.leaf(v, name=k) for k, v in trainable.items()}
            loss = lm_loss(config, make_weights(leaves), batch)
            ad.backward(loss)
            for k, var in leaves.items():
                if var.grad is not None:
                    acc[k] += var.grad
            total += float(loss.value)
        if grad_accum > 1:
            inv = np.float32(1.0 / grad_accum)
            for g in acc.values():
                g *= inv
        mean_loss = total / grad_accum
        if not np.isfinite(mean_loss):
            raise NumericError(f"loss became non-finite at step {step}")
        losses.append(mean_loss)
        opt.step(trainable, acc)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f", step + 1, mean_loss)
    return losses


def train_lm(
    params: ParameterSet,
    sequences: Sequence[Sequence[int]],
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 16,
    seed: int = 0,
    grad_accum: int = 1,
    log_every: int = 0,
) -> tuple[ParameterSet, list[float]]:
    """Full-parameter training; returns a new parameter set and the loss trace."""
    trainable = {k: v.copy() for k, v in params.items()}
    sampler = SequenceSampler(sequences, batch_size, seed)
    losses = optimize(params.config, trainable, lambda leaves: leaves, sampler, steps, lr, grad_accum, log_every)
    return ParameterSet(params.config, trainable), losses


def corpus_loss(params: ParameterSet, sequences: Sequence[Sequence[int]], batch_size: int = 64) -> float:
    """Token-weighted mean next-token loss over a corpus (no graph recorded)."""
    total, count = 0.0, 0.0
    for i in range(0, len(sequences), batch_size):
        batch = make_batch(sequences[i:i + batch_size], params.config.max_seq_len)
        n = float(batch.weights.sum())
        total += float(lm_loss(params.config, params, batch).value) * n
        count += n
    return total / count
