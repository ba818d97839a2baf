"""Decoder-only transformer: parameters, forward pass, likelihoods, generation.

Pre-norm blocks, learned positional embeddings, untied output head. Weight
matrices are stored ``[in, out]`` and applied as ``x @ W``, so a row of a
matrix is everything fed by one input unit and a column is everything feeding
one output unit.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigError, DataError

NEG_FILL = -1e30


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 256
    max_seq_len: int = 128
    init_seed: int = 0

    def __post_init__(self):
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ConfigError(f"{field.name} must be an integer, got {value!r}")
            if field.name == "init_seed":
                if value < 0:
                    raise ConfigError("init_seed must be non-negative")
            elif value < 1:
                raise ConfigError(f"{field.name} must be positive, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name → shape map implied by a config, in lexicographic name order."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes = {
        "embed.pos": (config.max_seq_len, d),
        "embed.tok": (v, d),
        "head.w": (d, v),
        "ln_f.b": (d,),
        "ln_f.g": (d,),
    }
    for i in range(config.n_layers):
        p = f"layer.{i}"
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (d, d)
        for ln in ("ln1", "ln2"):
            shapes[f"{p}.{ln}.g"] = (d,)
            shapes[f"{p}.{ln}.b"] = (d,)
        shapes[f"{p}.mlp.w1"] = (d, f)
        shapes[f"{p}.mlp.b1"] = (f,)
        shapes[f"{p}.mlp.w2"] = (f, d)
        shapes[f"{p}.mlp.b2"] = (d,)
    return dict(sorted(shapes.items()))


def parameter_count(config: ModelConfig) -> int:
    """Closed-form total number of scalar parameters."""
    d, f, v, L = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len
    per_layer = 4 * d * d + 4 * d + d * f + f + f * d + d
    return L * d + v * d + d * v + 2 * d + config.n_layers * per_layer


class ParameterSet(Mapping[str, np.ndarray]):
    """Named float32 tensors plus the config that determines their layout.

    Iteration is lexicographic by name. The class never mutates arrays it was
    handed; editing code builds a new set via :meth:`replace` or :meth:`copy`.
    """

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray], validate: bool = True):
        self.config = config
        self._tensors = {k: tensors[k] for k in sorted(tensors)}
        if validate:
            self.validate()

    def validate(self) -> None:
        expected = parameter_shapes(self.config)
        if list(expected) != list(self._tensors):
            missing = sorted(set(expected) - set(self._tensors))
            extra = sorted(set(self._tensors) - set(expected))
            raise DataError(f"parameter names do not match config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            arr = self._tensors[name]
            if arr.shape != shape:
                raise DataError(f"{name}: shape {arr.shape} does not match config {shape}")
            if arr.dtype != np.float32:
                raise DataError(f"{name}: dtype {arr.dtype}, expected float32")

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, {k: v.copy() for k, v in self._tensors.items()}, validate=False)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParameterSet":
        merged = dict(self._tensors)
        merged.update(updates)
        return ParameterSet(self.config, merged)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self._tensors.values()))

    def matrices(self) -> list[str]:
        return [k for k, v in self._tensors.items() if v.ndim == 2]

    def bit_equal(self, other: "ParameterSet") -> bool:
        if self.config != other.config or list(self) != list(other):
            return False
        return all(np.array_equal(self[k].view(np.uint32), other[k].view(np.uint32)) for k in self)

    def astype(self, dtype) -> dict[str, np.ndarray]:
        """Plain dict of converted arrays (for float64 gradient oracles)."""
        return {k: v.astype(dtype) for k, v in self._tensors.items()}


def init_model(config: ModelConfig) -> ParameterSet:
    rng = np.random.default_rng(config.init_seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 2:
            tensors[name] = (rng.standard_normal(shape) * 0.02).astype(np.float32)
        elif name.endswith(".g"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return ParameterSet(config, tensors)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _check_ids(config: ModelConfig, ids: np.ndarray) -> None:
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise DataError("token sequence must be non-empty")
    if ids.shape[1] > config.max_seq_len:
        raise DataError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise DataError(f"token id out of range [0, {config.vocab_size})")


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def forward_batch(config: ModelConfig, weights: Mapping[str, Var | np.ndarray], ids) -> Var:
    """Logits ``[B, T, V]`` for a right-padded batch of token ids ``[B, T]``.

    ``weights`` maps every parameter name to an array or a :class:`Var`; pass
    leaves to record a graph for differentiation.
    """
    ids = np.asarray(ids, dtype=np.int64)
    _check_ids(config, ids)
    w = {k: ad._as_var(v) for k, v in weights.items()}
    b, t = ids.shape
    h = config.n_heads
    dh = config.d_model // h
    d = config.d_model
    positions = np.broadcast_to(np.arange(t), (b, t))
    x = ad.add(ad.embedding(w["embed.tok"], ids), ad.embedding(w["embed.pos"], positions))
    mask = _causal_mask(t)
    inv_sqrt = 1.0 / math.sqrt(dh)
    for i in range(config.n_layers):
        p = f"layer.{i}"
        a = ad.layer_norm(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
        q = ad.transpose(ad.reshape(ad.matmul(a, w[f"{p}.attn.wq"]), (b, t, h, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(ad.matmul(a, w[f"{p}.attn.wk"]), (b, t, h, dh)), (0, 2, 3, 1))
        v = ad.transpose(ad.reshape(ad.matmul(a, w[f"{p}.attn.wv"]), (b, t, h, dh)), (0, 2, 1, 3))
        scores = ad.masked_fill(ad.scale(ad.matmul(q, k), inv_sqrt), mask, NEG_FILL)
        att = ad.matmul(ad.softmax(scores), v)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, t, d))
        x = ad.add(x, ad.matmul(att, w[f"{p}.attn.wo"]))
        m = ad.layer_norm(x, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
        m = ad.gelu(ad.add(ad.matmul(m, w[f"{p}.mlp.w1"]), w[f"{p}.mlp.b1"]))
        x = ad.add(x, ad.add(ad.matmul(m, w[f"{p}.mlp.w2"]), w[f"{p}.mlp.b2"]))
    x = ad.layer_norm(x, w["ln_f.g"], w["ln_f.b"])
    return ad.matmul(x, w["head.w"])


def forward(params: ParameterSet, tokens: Sequence[int]) -> np.ndarray:
    """Next-token logits ``[T, V]`` for one sequence."""
    return forward_batch(params.config, params, np.asarray([tokens])).value[0]


def _stepwise_logprobs(params: ParameterSet, tokens: Sequence[int]) -> np.ndarray:
    """log p(token_t | tokens_<t) for t = 1..T-1, in float64."""
    logits = forward(params, tokens).astype(np.float64)
    lsm = ad.log_softmax_np(logits[:-1])
    return lsm[np.arange(len(tokens) - 1), np.asarray(tokens[1:])]


def sequence_logprob(params: ParameterSet, tokens: Sequence[int]) -> float:
    """Log-likelihood of ``tokens[1:]`` conditioned on ``tokens[0]``."""
    if len(tokens) < 2:
        raise DataError("sequence_logprob needs at least 2 tokens")
    return float(_stepwise_logprobs(params, tokens).sum())


def last_token_logprob(params: ParameterSet, prefix: Sequence[int], completion: int) -> float:
    if len(prefix) == 0:
        raise DataError("prefix must be non-empty")
    logits = forward(params, list(prefix)).astype(np.float64)
    if not 0 <= completion < params.config.vocab_size:
        raise DataError(f"completion id {completion} out of range")
    return float(ad.log_softmax_np(logits[-1])[completion])


def completion_logprob(params: ParameterSet, prefix: Sequence[int], completion: Sequence[int]) -> float:
    """Log-probability of a multi-token continuation of ``prefix``."""
    if len(prefix) == 0 or len(completion) == 0:
        raise DataError("prefix and completion must be non-empty")
    steps = _stepwise_logprobs(params, list(prefix) + list(completion))
    return float(steps[len(prefix) - 1:].sum())


def generate(
    params: ParameterSet,
    prompt: Sequence[int],
    max_new: int,
    temperature: float = 0.0,
    seed: int = 0,
) -> list[int]:
    """Extend ``prompt`` by ``max_new`` tokens.

    Temperature 0 is greedy (ties go to the lowest id); otherwise tokens are
    sampled from the tempered distribution with a generator seeded by ``seed``.
    """
    if temperature < 0:
        raise ConfigError("temperature must be >= 0")
    if max_new < 0:
        raise ConfigError("max_new must be >= 0")
    if not prompt:
        raise DataError("prompt must be non-empty")
    if len(prompt) + max_new > params.config.max_seq_len:
        raise DataError(
            f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds context {params.config.max_seq_len}"
        )
    rng = np.random.default_rng(seed)
    out = list(prompt)
    for _ in range(max_new):
        logits = forward(params, out)[-1].astype(np.float64)
        if temperature == 0:
            nxt = int(np.argmax(logits))
        else:
            p = np.exp(ad.log_softmax_np(logits / temperature))
            nxt = int(rng.choice(len(p), p=p / p.sum()))
        out.append(nxt)
    return out
