"""Sharded PCGU as a message-passing protocol between logical workers.

Each 2-D parameter is owned by one shard. Per batch the phases are separated
by barriers:

1. ``score``: every shard runs its own forward/backward pass and scores the
   partitions of the parameters it owns;
2. ``gather``: the coordinator collects ``(PartitionSpec, cosine)`` messages;
3. ``select``: the coordinator picks the global bottom-k and broadcasts it;
4. ``update``: shards update their own tensors and send them back.

Workers only ever receive copies, so there is no shared mutable state.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from .datasets import ContrastivePair
from .errors import ConfigError, DataError, ShardError, UnlearnError
from .model import ParameterSet
from .pcgu import (
    PCGUConfig,
    PartitionScore,
    PartitionSpec,
    apply_update,
    contrastive_gradients,
    epoch_batches,
    partition_cosine_scores,
    partition_weights,
    select_bottom_k,
)

SHARD_LOG_COLUMNS = (
    "seq", "epoch", "batch", "shard_id", "phase",
    "mean_adv_logprob", "mean_cosine", "selected_count",
)
COORDINATOR = -1


@dataclasses.dataclass(frozen=True)
class ShardPlan:
    n_shards: int
    assignment: dict[str, int]

    def owned(self, shard: int) -> list[str]:
        return [name for name, s in self.assignment.items() if s == shard]


def plan_shards(params: ParameterSet, n_shards: int) -> ShardPlan:
    """Round-robin over the lexicographically sorted 2-D parameters."""
    if not isinstance(n_shards, int) or n_shards < 1:
        raise ConfigError(f"n_shards must be a positive integer, got {n_shards!r}")
    names = sorted(k for k, v in params.items() if v.ndim == 2)
    return ShardPlan(n_shards, {name: i % n_shards for i, name in enumerate(names)})


@dataclasses.dataclass(frozen=True)
class _ScoreMessage:
    shard: int
    scores: tuple[PartitionScore, ...]
    mean_adv_logprob: float


class _Worker:
    """One logical shard. Holds private copies of the tensors it owns."""

    def __init__(self, shard: int, names: Sequence[str], axis: str):
        self.shard = shard
        self.names = list(names)
        self.axis = axis
        self._grads = None

    def score(self, params: ParameterSet, batch: Sequence[ContrastivePair]) -> _ScoreMessage:
        g1, g2, adv_lp = contrastive_gradients(params, batch)
        mine = {n: params[n] for n in self.names}
        self._grads = ({n: g1[n].copy() for n in self.names}, {n: g2[n].copy() for n in self.names})
        specs = partition_weights(mine, self.axis)
        scores = partition_cosine_scores(self._grads[0], self._grads[1], specs)
        return _ScoreMessage(self.shard, tuple(scores), adv_lp)

    def update(self, params: ParameterSet, selected: Sequence[PartitionSpec], alpha: float, direction: str):
        if self._grads is None:
            raise ShardError(f"shard {self.shard} asked to update before scoring")
        g1, g2 = self._grads
        self._grads = None
        updated = apply_update(params, g1, g2, [s for s in selected if s.param_name in self.names], alpha, direction)
        return {n: updated[n].copy() for n in self.names}


def _run_phase(pool: ThreadPoolExecutor, phase: str, calls):
    futures = [pool.submit(fn, *args) for fn, *args in calls]
    results = []
    for i, fut in enumerate(futures):
        try:
            results.append(fut.result())
        except UnlearnError as exc:
            raise ShardError(f"shard {i} failed during {phase}: {exc}") from exc
        except Exception as exc:
            raise ShardError(f"shard {i} failed during {phase}: {exc!r}") from exc
    return results


def run_pcgu_sharded(
    params: ParameterSet,
    pairs: Sequence[ContrastivePair],
    config: PCGUConfig,
    n_shards: int,
    observer: Callable | None = None,
):
    """Sharded equivalent of :func:`unlearnkit.pcgu.run_pcgu`.

    Returns ``(final_params, log_rows)``; rows carry ``seq``, ``shard_id``
    (``-1`` for the coordinator) and ``phase`` on top of the usual columns.
    Rows are emitted in barrier order, so ``seq`` is reproducible and every
    ``update`` row of a batch follows its ``select`` row. ``observer`` is
    called as ``observer(epoch, batch, selected)`` after each selection.
    """
    if not pairs:
        raise DataError("run_pcgu_sharded needs at least one contrastive pair")
    plan = plan_shards(params, n_shards)
    workers = [_Worker(s, plan.owned(s), config.axis) for s in range(n_shards)]
    rng = np.random.default_rng(config.seed)
    rows: list[dict] = []

    def log(epoch, batch, shard, phase, adv_lp="", cosine="", count=""):
        rows.append(
            {
                "seq": len(rows), "epoch": epoch, "batch": batch, "shard_id": shard, "phase": phase,
                "mean_adv_logprob": adv_lp, "mean_cosine": cosine, "selected_count": count,
            }
        )

    with ThreadPoolExecutor(max_workers=n_shards, thread_name_prefix="shard") as pool:
        for epoch in range(config.epochs):
            for b, idx in enumerate(epoch_batches(len(pairs), config.batch_size, rng)):
                batch = [pairs[i] for i in idx]
                snapshot = params.copy()
                messages = _run_phase(pool, "score", [(w.score, snapshot.copy(), batch) for w in workers])
                # gather: order by shard id, never by arrival
                messages.sort(key=lambda m: m.shard)
                for m in messages:
                    cos = float(np.mean([s.cosine for s in m.scores])) if m.scores else ""
                    log(epoch, b, m.shard, "score", m.mean_adv_logprob, cos)
                # partition order, so the mean is summed exactly as in the unsharded run
                all_scores = sorted((s for m in messages for s in m.scores), key=lambda s: s.spec)
                selected = select_bottom_k(all_scores, config.k_fraction)
                if observer is not None:
                    observer(epoch, b, selected)
                mean_cos = float(np.mean([s.cosine for s in all_scores])) if all_scores else 1.0
                log(epoch, b, COORDINATOR, "select", messages[0].mean_adv_logprob, mean_cos, len(selected))
                owned_sel = {w.shard: [s for s in selected if plan.assignment[s.param_name] == w.shard] for w in workers}
                tensors = _run_phase(
                    pool, "update",
                    [(w.update, snapshot.copy(), tuple(owned_sel[w.shard]), config.alpha, config.direction) for w in workers],
                )
                merged = {}
                for w, part in zip(workers, tensors):
                    merged.update(part)
                    log(epoch, b, w.shard, "update", count=len(owned_sel[w.shard]))
                params = params.replace(merged)
    return params, rows


def summary_rows(rows: Sequence[dict]) -> list[dict]:
    """Collapse a sharded log to the per-batch rows of the unsharded format."""
    return [
        {k: r[k] for k in ("epoch", "batch", "mean_adv_logprob", "mean_cosine", "selected_count")}
        for r in rows
        if r["phase"] == "select"
    ]
