"""Task vectors: biased fine-tuning, extraction, negation and scaled application."""

from __future__ import annotations

import dataclasses
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError
from .model import ParameterSet
from .training import SequenceSampler, optimize

LAMBDA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


class TaskVector(ParameterSet):
    """Per-parameter weight deltas with the same layout as a model."""

    def scale(self, factor: float) -> "TaskVector":
        f = np.float32(factor)
        return TaskVector(self.config, {k: v * f for k, v in self.items()})

    def __neg__(self) -> "TaskVector":
        return TaskVector(self.config, {k: -v for k, v in self.items()})


def _check_structure(a: ParameterSet, b: ParameterSet) -> None:
    if a.config != b.config:
        raise DataError("model configs differ")
    if list(a) != list(b) or any(a[k].shape != b[k].shape for k in a):
        raise DataError("parameter names or shapes differ")


def compute_task_vector(pre: ParameterSet, ft: ParameterSet) -> TaskVector:
    _check_structure(pre, ft)
    return TaskVector(pre.config, {k: ft[k] - pre[k] for k in pre})


def apply_task_vector(pre: ParameterSet, tv: ParameterSet, lam: float, negate: bool = False) -> ParameterSet:
    """``pre + s * lam * tv`` with ``s = -1`` when negating."""
    _check_structure(pre, tv)
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return pre.copy()
    coef = np.float32(-lam if negate else lam)
    return ParameterSet(pre.config, {k: pre[k] + coef * tv[k] for k in pre})


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class LoRAConfig:
    rank: int = 8
    scale_alpha: float = 16.0
    targets: tuple[str, ...] = ("attn.wq", "attn.wv")

    def __post_init__(self):
        if self.rank < 1 or self.scale_alpha <= 0:
            raise ConfigError("LoRA rank and scale_alpha must be positive")


@dataclasses.dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 300
    learning_rate: float = 5e-4
    batch_size: int = 4
    grad_accum: int = 4
    lora: LoRAConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.learning_rate <= 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("fine-tune steps must be >= 0; learning rate, batch size, accumulation > 0")


@dataclasses.dataclass
class LoRAAdapter:
    """Factors ``A [r, n]`` and ``B [m, r]`` per target; the delta is ``(alpha / r) * B @ A``."""

    factors: dict[str, tuple[np.ndarray, np.ndarray]]
    rank: int
    scale_alpha: float

    @property
    def scaling(self) -> float:
        return self.scale_alpha / self.rank

    def delta(self, name: str) -> np.ndarray:
        a, b = self.factors[name]
        return np.float32(self.scaling) * (b @ a)

    def merge(self, params: ParameterSet) -> ParameterSet:
        return params.replace({k: params[k] + self.delta(k) for k in self.factors})


def lora_targets(params: ParameterSet, cfg: LoRAConfig) -> list[str]:
    names = [k for k in params if any(k.endswith(t) for t in cfg.targets)]
    if not names:
        raise ConfigError(f"no parameters match LoRA targets {cfg.targets}")
    return names


def init_lora(params: ParameterSet, cfg: LoRAConfig, seed: int) -> LoRAAdapter:
    rng = np.random.default_rng([seed, 7])
    factors = {}
    for name in lora_targets(params, cfg):
        m, n = params[name].shape
        a = (rng.standard_normal((cfg.rank, n)) / np.sqrt(n)).astype(np.float32)
        b = np.zeros((m, cfg.rank), dtype=np.float32)
        factors[name] = (a, b)
    return LoRAAdapter(factors, cfg.rank, cfg.scale_alpha)


def finetune_lm(params: ParameterSet, sequences: Sequence[Sequence[int]], config: FinetuneConfig):
    """Adam fine-tuning on next-token loss; returns ``(params, losses)``.

    With ``config.lora`` set only adapter factors train and the result comes
    back with the adapters merged into the frozen base weights.
    """
    if not sequences:
        raise DataError("fine-tuning corpus is empty")
    sampler = SequenceSampler(sequences, config.batch_size, config.seed)
    if config.lora is None:
        trainable = {k: v.copy() for k, v in params.items()}
        losses = optimize(
            params.config, trainable, lambda leaves: leaves, sampler,
            config.steps, config.learning_rate, config.grad_accum,
        )
        return ParameterSet(params.config, trainable), losses

    adapter = init_lora(params, config.lora, config.seed)
    trainable = {}
    for name, (a, b) in adapter.factors.items():
        trainable[f"{name}#A"] = a
        trainable[f"{name}#B"] = b
    scaling = adapter.scaling

    def make_weights(leaves: Mapping[str, ad.Var]):
        weights = dict(params.items())
        for name in adapter.factors:
            delta = ad.scale(ad.matmul(leaves[f"{name}#B"], leaves[f"{name}#A"]), scaling)
            weights[name] = ad.add(ad.constant(params[name]), delta)
        return weights

    losses = optimize(params.config, trainable, make_weights, sampler, config.steps, config.learning_rate, config.grad_accum)
    if config.steps == 0:
        return params.copy(), losses
    return adapter.merge(params), losses
