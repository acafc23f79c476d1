"""Small fully-connected networks shared by the agents and the meta-nets.

Every network is two ReLU hidden layers plus a linear head, stored as a
flat parameter list [W1, b1, W2, b2, W3, b3]. Two forward paths exist:
a recorded one over diffkit tensors (used wherever gradients must flow)
and a raw numpy one for the acting / feature hot paths. They are kept
numerically identical and a test pins that equivalence.
"""

from __future__ import annotations

import numpy as np

from . import diffkit as dk


def init_mlp(rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int) -> list[np.ndarray]:
    """Uniform fan-in init (bound 1/sqrt(fan_in)) for weights and biases."""
    sizes = [(in_dim, hidden), (hidden, hidden), (hidden, out_dim)]
    params: list[np.ndarray] = []
    for fan_in, fan_out in sizes:
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(rng.uniform(-bound, bound, size=(fan_out,)))
    return params


def mlp_forward(params: list[dk.Tensor], x: dk.Tensor) -> dk.Tensor:
    """Recorded forward pass; ``x`` must be a 2-D batch."""
    w1, b1, w2, b2, w3, b3 = params
    h = dk.relu(dk.affine(x, w1, b1))
    h = dk.relu(dk.affine(h, w2, b2))
    return dk.affine(h, w3, b3)


def mlp_forward_raw(params: list[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass; ``x`` may be a vector or a batch."""
    w1, b1, w2, b2, w3, b3 = params
    h = x @ w1 + b1
    np.maximum(h, 0.0, out=h)
    h = h @ w2 + b2
    np.maximum(h, 0.0, out=h)
    return h @ w3 + b3


def softmax_raw(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_raw(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def flatten_params(params: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])
