"""Context features and the learned meta-parameter functions.

A context is a history of the last H normalized feature frames. Frames
are computed per inner update (per rollout for Actor-Critic, per step for
Q(lambda)), each channel normalized by streaming mean/variance and pushed
through tanh into [-1, 1]. The flattened buffer feeds a small sigmoid-head
MLP per tuned meta-parameter; predictions are scaled into the parameter's
valid range. Gradients never propagate into the features, only into the
network weights.

Flattened layout: families in declaration order, channels within a family
(means first, then standard deviations where present), and for each
channel its H values newest first.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffkit as dk
from .agents import META_SCALES, Rollout
from .nets import init_mlp, mlp_forward, mlp_forward_raw, softmax_raw

AC_FAMILIES = ("reward", "value", "td_error", "action_probs", "grad_cosine", "prev_meta", "states")
Q_FAMILIES = ("reward", "value", "td_error")
PROBE_NAMES = ("high", "increasing", "zero", "decreasing", "low")


@dataclass(frozen=True)
class FeatureSpec:
    """Which feature families are enabled and how they are shaped."""

    families: tuple
    h: int
    include_std: bool = False
    agent_kind: str = "ac"
    n_actions: int = 4
    n_cells: int = 25
    n_meta: int = 1

    def __post_init__(self):
        if not self.families:
            raise ValueError("contextual runs need at least one feature family")
        allowed = AC_FAMILIES if self.agent_kind == "ac" else Q_FAMILIES
        for fam in self.families:
            if fam not in allowed:
                raise ValueError(f"unknown feature family {fam!r} for {self.agent_kind}")
        if self.agent_kind == "q" and self.include_std:
            raise ValueError("per-step features carry no standard deviations")
        if self.h <= 0:
            raise ValueError("history length must be positive")

    @functools.lru_cache
    def channel_layout(self) -> tuple:
        """(family, channel count) pairs in flattened order."""
        base = {
            "reward": 1,
            "value": 1,
            "td_error": 1,
            "action_probs": self.n_actions,
            "states": self.n_cells,
            "grad_cosine": 1,
            "prev_meta": self.n_meta,
        }
        with_std = {"reward", "value", "td_error", "action_probs", "states"}
        out = []
        for fam in self.families:
            n = base[fam]
            if self.include_std and fam in with_std and self.agent_kind == "ac":
                n *= 2
            out.append((fam, n))
        return tuple(out)

    @functools.cached_property
    def n_channels(self) -> int:
        return sum(n for _, n in self.channel_layout())

    @property
    def dim(self) -> int:
        return self.n_channels * self.h


class RunningNormalizer:
    """Streaming per-channel mean/variance (Welford)."""

    def __init__(self, n_channels: int):
        self.count = 0
        self.mean = np.zeros(n_channels)
        self._m2 = np.zeros(n_channels)

    @property
    def var(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.mean)
        return self._m2 / self.count

    def update(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (x - self.mean)

    def update_scalar(self, x: float) -> None:
        # same arithmetic as update(), avoiding array overhead (1 channel)
        self.count += 1
        m = self.mean[0]
        delta = x - m
        m += delta / self.count
        self.mean[0] = m
        self._m2[0] += delta * (x - m)


class ContextBuffer:
    """Ring buffer of the last H normalized frames, flattened newest first."""

    def __init__(self, spec: FeatureSpec):
        self.spec = spec
        self._frames = np.zeros((spec.h, spec.n_channels))
        self._head = 0
        self.count = 0
        self._base = np.arange(spec.h)

    def push(self, frame: np.ndarray) -> None:
        if frame.shape != (self.spec.n_channels,):
            raise ValueError("frame has wrong number of channels")
        self._frames[self._head] = frame
        self._head = (self._head + 1) % self.spec.h
        self.count += 1

    def flatten(self) -> np.ndarray:
        order = (self._head - 1 - self._base) % self.spec.h
        if self.spec.n_channels == 1:
            return self._frames[order, 0]
        return self._frames[order].T.ravel()


def normalize_and_push(buffer: ContextBuffer, normalizer: RunningNormalizer,
                       raw_frame: np.ndarray) -> np.ndarray:
    """tanh((x - mean)/sqrt(var + 1e-8)) with stats updated after use."""
    if buffer.spec.n_channels == 1:
        # scalar fast path, same arithmetic as the vector branch
        x = float(raw_frame[0])
        count = normalizer.count
        var = normalizer._m2[0] / count if count else 0.0
        y = math.tanh((x - normalizer.mean[0]) / math.sqrt(var + 1e-8))
        normalizer.update_scalar(x)
        buffer._frames[buffer._head, 0] = y
        buffer._head = (buffer._head + 1) % buffer.spec.h
        buffer.count += 1
        return np.array([y])
    y = np.tanh((raw_frame - normalizer.mean) / np.sqrt(normalizer.var + 1e-8))
    normalizer.update(raw_frame)
    buffer.push(y)
    return y


# ---------------------------------------------------------------------------
# Raw feature frames
# ---------------------------------------------------------------------------


def grad_cosine_distance(g1: np.ndarray | None, g2: np.ndarray | None) -> float:
    """1 - cos(angle) between consecutive update gradients; 0 if unavailable."""
    if g1 is None or g2 is None:
        return 0.0
    n1 = np.linalg.norm(g1)
    n2 = np.linalg.norm(g2)
    if n1 == 0.0 or n2 == 0.0:
        return 0.0
    return float(1.0 - (g1 @ g2) / (n1 * n2))


def ac_feature_frame(spec: FeatureSpec, batch: Rollout, pol_data, val_data,
                     gamma: float, prev_grads=(None, None),
                     prev_meta: np.ndarray | None = None) -> np.ndarray:
    """Raw (un-normalized) per-rollout statistics in channel order."""
    parts: list[np.ndarray] = []
    values = v_next = probs = None
    for fam, _ in spec.channel_layout():
        if fam == "reward":
            x = batch.rewards
            parts.append(_mean_std(x, spec.include_std))
        elif fam == "value":
            if values is None:
                values = mlp_forward_raw(val_data, batch.obs)[:, 0]
            parts.append(_mean_std(values, spec.include_std))
        elif fam == "td_error":
            if values is None:
                values = mlp_forward_raw(val_data, batch.obs)[:, 0]
            if v_next is None:
                nxt = np.vstack([batch.obs[1:], batch.bootstrap_obs[None, :]])
                v_next = mlp_forward_raw(val_data, nxt)[:, 0]
            td = batch.rewards + gamma * v_next - values
            parts.append(_mean_std(td, spec.include_std))
        elif fam == "action_probs":
            if probs is None:
                probs = softmax_raw(mlp_forward_raw(pol_data, batch.obs))
            cols = [probs.mean(axis=0)]
            if spec.include_std:
                cols.append(probs.std(axis=0))
            parts.append(np.concatenate(cols))
        elif fam == "states":
            onehot = np.zeros((len(batch), spec.n_cells))
            onehot[np.arange(len(batch)), batch.cells] = 1.0
            cols = [onehot.mean(axis=0)]
            if spec.include_std:
                cols.append(onehot.std(axis=0))
            parts.append(np.concatenate(cols))
        elif fam == "grad_cosine":
            parts.append(np.array([grad_cosine_distance(*prev_grads)]))
        elif fam == "prev_meta":
            if prev_meta is None:
                parts.append(np.zeros(spec.n_meta))
            else:
                parts.append(np.asarray(prev_meta, dtype=np.float64))
    return np.concatenate(parts)


def _mean_std(x: np.ndarray, include_std: bool) -> np.ndarray:
    if include_std:
        return np.array([x.mean(), x.std()])
    return np.array([x.mean()])


def q_feature_frame(spec: FeatureSpec, reward: float, q_sa: float,
                    next_q_max: float, gamma: float) -> np.ndarray:
    """Per-step statistics for Q(lambda) contexts."""
    vals = {
        "reward": reward,
        "value": q_sa,
        "td_error": reward + gamma * next_q_max - q_sa,
    }
    return np.array([vals[fam] for fam in spec.families])


# ---------------------------------------------------------------------------
# Meta-parameter networks
# ---------------------------------------------------------------------------


class MetaNet:
    """Sigmoid-head MLP mapping a flattened context to one meta-parameter."""

    def __init__(self, rng: np.random.Generator, name: str, in_dim: int, hidden: int):
        if name not in META_SCALES:
            raise ValueError(f"no output scale known for meta-parameter {name!r}")
        self.name = name
        self.in_dim = in_dim
        self.hidden = hidden
        self.output_scale = META_SCALES[name]
        self.params = init_mlp(rng, in_dim, hidden, 1)
        self._b1 = np.zeros(hidden)
        self._b2 = np.zeros(hidden)
        self._b3 = np.zeros(1)

    def predict_raw(self, flat_ctx: np.ndarray) -> float:
        w1, b1, w2, b2, w3, b3 = self.params
        np.matmul(flat_ctx, w1, out=self._b1)
        self._b1 += b1
        np.maximum(self._b1, 0.0, out=self._b1)
        np.matmul(self._b1, w2, out=self._b2)
        self._b2 += b2
        np.maximum(self._b2, 0.0, out=self._b2)
        np.matmul(self._b2, w3, out=self._b3)
        z = float(self._b3[0]) + float(b3[0])
        return self.output_scale / (1.0 + math.exp(-z))

    def predict_traced(self, watched_params, flat_ctx: np.ndarray) -> dk.Tensor:
        """Recorded forward; the context enters as a constant (gradient stop)."""
        x = dk.Tensor(flat_ctx.reshape(1, -1))
        z = dk.reshape(mlp_forward(watched_params, x), ())
        return dk.mul(self.output_scale, dk.sigmoid(z))

    def pretrain(self, rng: np.random.Generator, batch_size: int = 64,
                 tol: float = 0.02, max_steps: int = 10_000, lr: float = 1e-3) -> int:
        """Regress the sigmoid output to 0.5 on uniform [-1, 1] contexts.

        Stops once the mean absolute error is confidently below ``tol``
        (batch estimate plus two standard errors, so fresh contexts stay
        under the bound too); warns and proceeds if the step cap is hit.
        """
        state = dk.AdamState.init(self.params)
        steps = 0
        while steps < max_steps:
            ctx = rng.uniform(-1.0, 1.0, size=(batch_size, self.in_dim))
            with dk.Tape() as tape:
                params = [tape.watch(p) for p in self.params]
                out = dk.sigmoid(dk.reshape(mlp_forward(params, dk.Tensor(ctx)), (batch_size,)))
                err = dk.sub(out, 0.5)
                abs_err = np.abs(err.data)
                if abs_err.mean() + 2.0 * abs_err.std() / np.sqrt(batch_size) < tol:
                    return steps
                loss = dk.mul(1.0 / batch_size, dk.sum_sq(err))
                grads = tape.grad(loss, params)
            new, state = dk.adam_step(self.params, [g.data for g in grads], state, lr)
            self.params = [t.data for t in new]
            steps += 1
        warnings.warn(f"meta-net pretraining hit the {max_steps}-step cap", RuntimeWarning)
        return steps


def probe_inputs(spec: FeatureSpec) -> dict[str, np.ndarray]:
    """Five canonical reward-context patterns, as flattened buffer contents.

    Temporal content (oldest to newest): "high" all 1, "low" all -1,
    "zero" all 0, "increasing" a ramp -1 to 1, "decreasing" the reverse.
    Standard-deviation channels, when present, stay 0.
    """
    if spec.families != ("reward",):
        raise ValueError("probe inputs are defined for the reward-context layout")
    ramps = {
        "high": np.ones(spec.h),
        "low": -np.ones(spec.h),
        "zero": np.zeros(spec.h),
        "increasing": np.linspace(-1.0, 1.0, spec.h),
        "decreasing": np.linspace(1.0, -1.0, spec.h),
    }
    out = {}
    for name in PROBE_NAMES:
        buf = ContextBuffer(spec)
        for v in ramps[name]:  # pushed oldest to newest
            frame = np.zeros(spec.n_channels)
            frame[0] = v
            buf.push(frame)
        out[name] = buf.flatten()
    return out
