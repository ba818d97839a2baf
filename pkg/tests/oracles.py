"""Brute-force scorers that share no code path with the library's batched ones."""

import math

import numpy as np

from unlearnkit.model import forward


def brute_logprob(params, tokens):
    """Sum of log p(x_t | x_<t), one prefix-only forward pass per step."""
    total = 0.0
    for t in range(1, len(tokens)):
        logits = forward(params, tokens[:t])[-1].astype(np.float64)
        probs = np.exp(logits - logits.max())
        total += math.log(probs[tokens[t]] / probs.sum())
    return total
