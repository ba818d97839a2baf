"""Partitioned contrastive gradient unlearning.

Each 2-D weight matrix is cut into weight vectors (rows for input
aggregation, columns for output aggregation). For a batch of contrastive
pairs we take the gradient of the batch-mean log-probability of the
advantaged and of the disadvantaged completion, score every weight vector by
the cosine between its two gradient slices, and take a plain gradient step on
the ``floor(k * m)`` least similar vectors only.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .datasets import ContrastivePair
from .errors import ConfigError, DataError
from .model import ParameterSet, forward_batch
from .training import PAD_ID

AXES = ("input", "output")
DIRECTIONS = ("decrease-advantaged", "increase-disadvantaged")
ZERO_NORM = 1e-12
LOG_COLUMNS = ("epoch", "batch", "mean_adv_logprob", "mean_cosine", "selected_count")


@dataclasses.dataclass(frozen=True, order=True)
class PartitionSpec:
    param_name: str
    index: int
    axis: str = "input"


@dataclasses.dataclass(frozen=True)
class PartitionScore:
    spec: PartitionSpec
    cosine: float


@dataclasses.dataclass(frozen=True)
class PCGUConfig:
    k_fraction: float = 0.3
    alpha: float = 2e-2
    epochs: int = 12
    batch_size: int = 256
    axis: str = "input"
    direction: str = "decrease-advantaged"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.k_fraction <= 1.0:
            raise ConfigError(f"k_fraction must lie in [0, 1], got {self.k_fraction}")
        if not self.alpha >= 0 or not math.isfinite(self.alpha):
            raise ConfigError(f"alpha must be a finite non-negative number, got {self.alpha}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}")


def _axis_len(shape, axis: str) -> int:
    return shape[0] if axis == "input" else shape[1]


def partition_weights(params: Mapping[str, np.ndarray], axis: str = "input") -> list[PartitionSpec]:
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {AXES}")
    specs = []
    for name in sorted(params):
        arr = params[name]
        if arr.ndim == 2:
            specs.extend(PartitionSpec(name, i, axis) for i in range(_axis_len(arr.shape, axis)))
    return specs


def _pad_prefixes(batch: Sequence[ContrastivePair]):
    lengths = np.array([len(p.prefix_tokens) for p in batch])
    ids = np.full((len(batch), lengths.max()), PAD_ID, dtype=np.int64)
    for i, p in enumerate(batch):
        ids[i, : lengths[i]] = p.prefix_tokens
    return ids, lengths - 1


def contrastive_gradients(params: ParameterSet, batch: Sequence[ContrastivePair]):
    """Gradients of the batch-mean advantaged and disadvantaged log-probabilities.

    Returns ``(grad_a1, grad_a2, mean_adv_logprob)``; the two gradients are
    parameter sets with the same layout as ``params``.
    """
    if not batch:
        raise DataError("contrastive_gradients needs a non-empty batch")
    ids, last = _pad_prefixes(batch)
    rows = np.arange(len(batch))
    leaves = {k: ad.leaf(v, name=k) for k, v in params.items()}
    logits = forward_batch(params.config, leaves, ids)
    # right padding is invisible to earlier positions under the causal mask
    final = ad.log_softmax(ad.index(logits, (rows, last)))
    adv = np.array([p.advantaged_token for p in batch])
    dis = np.array([p.disadvantaged_token for p in batch])
    objective_1 = ad.mean(ad.index(final, (rows, adv)))
    objective_2 = ad.mean(ad.index(final, (rows, dis)))

    def collect(objective):
        ad.backward(objective)
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()}
        for v in leaves.values():
            v.grad = None
        # layout matches params by construction; dtype follows params (float64 oracles)
        return ParameterSet(params.config, grads, validate=False)

    return collect(objective_1), collect(objective_2), float(objective_1.value)


def _slice_cosines(a: np.ndarray, b: np.ndarray, axis: str) -> np.ndarray:
    if axis == "output":
        a, b = a.T, b.T
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    dot = np.einsum("ij,ij->i", a, b)
    sa = np.einsum("ij,ij->i", a, a)
    sb = np.einsum("ij,ij->i", b, b)
    # sqrt(sa * sb) rather than sqrt(sa) * sqrt(sb): identical slices then score exactly 1
    denom = np.sqrt(sa * sb)
    dead = (np.sqrt(sa) < ZERO_NORM) | (np.sqrt(sb) < ZERO_NORM)
    cos = np.divide(dot, denom, out=np.ones_like(dot), where=~dead)
    return np.clip(cos, -1.0, 1.0)


def partition_cosine_scores(
    grad_a1: Mapping[str, np.ndarray],
    grad_a2: Mapping[str, np.ndarray],
    specs: Sequence[PartitionSpec],
) -> list[PartitionScore]:
    """Cosine similarity between the two gradient slices of every partition.

    A slice with norm below 1e-12 carries no signal and scores +1.
    """
    cache: dict[tuple[str, str], np.ndarray] = {}
    out = []
    for spec in specs:
        key = (spec.param_name, spec.axis)
        if key not in cache:
            if spec.param_name not in grad_a1 or spec.param_name not in grad_a2:
                raise DataError(f"no gradient for parameter {spec.param_name!r}")
            cache[key] = _slice_cosines(grad_a1[spec.param_name], grad_a2[spec.param_name], spec.axis)
        cosines = cache[key]
        if not 0 <= spec.index < len(cosines):
            raise DataError(f"partition index {spec.index} out of range for {spec.param_name}")
        out.append(PartitionScore(spec, float(cosines[spec.index])))
    return out


def _spec_key(spec: PartitionSpec):
    return (spec.param_name, spec.index, spec.axis)


def select_bottom_k(scores: Iterable[PartitionScore], k_fraction: float) -> list[PartitionSpec]:
    """The ``floor(k * m)`` lowest-cosine partitions, returned in partition order.

    Ties are broken by partition order, so the result depends only on the
    multiset of scores, never on the order they arrive in.
    """
    if not 0.0 <= k_fraction <= 1.0:
        raise ConfigError(f"k_fraction must lie in [0, 1], got {k_fraction}")
    scores = list(scores)
    n = math.floor(k_fraction * len(scores))
    ranked = sorted(scores, key=lambda s: (s.cosine, _spec_key(s.spec)))
    return sorted((s.spec for s in ranked[:n]), key=_spec_key)


def group_by_param(selected: Iterable[PartitionSpec]) -> dict[tuple[str, str], np.ndarray]:
    groups: dict[tuple[str, str], list[int]] = {}
    for spec in selected:
        groups.setdefault((spec.param_name, spec.axis), []).append(spec.index)
    return {k: np.array(sorted(v), dtype=np.int64) for k, v in groups.items()}


def update_tensor(theta: np.ndarray, grad: np.ndarray, idx: np.ndarray, axis: str, step: np.float32) -> np.ndarray:
    """Return ``theta`` with ``step * grad`` added on the chosen rows or columns."""
    out = theta.copy()
    if axis == "input":
        out[idx, :] += step * grad[idx, :]
    else:
        out[:, idx] += step * grad[:, idx]
    return out


def apply_update(
    params: ParameterSet,
    grad_a1: Mapping[str, np.ndarray],
    grad_a2: Mapping[str, np.ndarray],
    selected: Iterable[PartitionSpec],
    alpha: float,
    direction: str = "decrease-advantaged",
) -> ParameterSet:
    """First-order step on the selected partitions only; everything else is left bit-identical."""
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}")
    groups = group_by_param(selected)
    if alpha == 0 or not groups:
        return params
    if direction == "decrease-advantaged":
        grads, step = grad_a1, np.float32(-alpha)
    else:
        grads, step = grad_a2, np.float32(alpha)
    updates = {}
    for (name, axis), idx in groups.items():
        base = updates.get(name, params[name])
        updates[name] = update_tensor(base, grads[name], idx, axis, step)
    return params.replace(updates)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def run_pcgu(
    params: ParameterSet,
    pairs: Sequence[ContrastivePair],
    config: PCGUConfig,
    observer: Callable | None = None,
):
    """Run the full procedure; returns ``(final_params, log_rows)``.

    Selection is recomputed for every batch. Each log row is a dict keyed by
    :data:`LOG_COLUMNS`; ``mean_adv_logprob`` is measured before the step.
    ``observer(epoch, batch, selected)`` is called after every selection.
    """
    if not pairs:
        raise DataError("run_pcgu needs at least one contrastive pair")
    specs = partition_weights(params, config.axis)
    rng = np.random.default_rng(config.seed)
    rows = []
    for epoch in range(config.epochs):
        for b, idx in enumerate(epoch_batches(len(pairs), config.batch_size, rng)):
            batch = [pairs[i] for i in idx]
            g1, g2, adv_lp = contrastive_gradients(params, batch)
            scores = partition_cosine_scores(g1, g2, specs)
            selected = select_bottom_k(scores, config.k_fraction)
            if observer is not None:
                observer(epoch, b, selected)
            params = apply_update(params, g1, g2, selected, config.alpha, config.direction)
            rows.append(
                {
                    "epoch": epoch,
                    "batch": b,
                    "mean_adv_logprob": adv_lp,
                    "mean_cosine": float(np.mean([s.cosine for s in scores])) if scores else 1.0,
                    "selected_count": len(selected),
                }
            )
    return params, rows


def batch_mean_logprob(params: ParameterSet, batch: Sequence[ContrastivePair], which: str = "advantaged") -> float:
    """Batch-mean completion log-probability without recording a graph."""
    ids, last = _pad_prefixes(batch)
    logits = forward_batch(params.config, params, ids).value.astype(np.float64)
    final = ad.log_softmax_np(logits[np.arange(len(batch)), last])
    tokens = [p.advantaged_token if which == "advantaged" else p.disadvantaged_token for p in batch]
    return float(final[np.arange(len(batch)), tokens].mean())
