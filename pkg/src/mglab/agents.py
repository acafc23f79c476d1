"""Inner learners.

Actor-Critic: entropy/L2-regularized policy-gradient updates every 16
environment steps, taken with plain SGD. The update can be recorded on a
diffkit tape so outer objectives can differentiate through it, or run as
plain numpy when no gradient has to flow (baselines, bootstrap-target
continuation steps).

Q(lambda): per-step squared-error updates toward Peng-style lambda-returns
computed over a trailing window of at most 16 transitions, with an
EMA-smoothed gradient fed into Adam. These updates are never
differentiated through (the exploration parameter enters the outer loss
directly), so the agent keeps its parameters in one flat vector and does
everything with raw numpy for speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffkit as dk
from .nets import init_mlp, mlp_forward, mlp_forward_raw, softmax_raw


@dataclass
class InnerHyper:
    """Inner-update hyperparameters; the first three can be meta-tuned."""

    alpha_ent: float = 0.0
    alpha_l2: float = 0.0
    epsilon: float = 0.05
    lr: float = 0.1
    gamma: float = 0.99
    lam: float = 0.9

    def validate(self) -> None:
        if not 0.0 <= self.alpha_ent <= 1.0:
            raise ValueError("alpha_ent must be in [0, 1]")
        if not 0.0 <= self.alpha_l2 <= 1e-4:
            raise ValueError("alpha_l2 must be in [0, 1e-4]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ValueError("gamma and lambda must be in [0, 1]")


META_RANGES = {"alpha_ent": (0.0, 1.0), "alpha_l2": (0.0, 1e-4), "epsilon": (0.0, 1.0)}
META_SCALES = {"alpha_ent": 1.0, "alpha_l2": 1e-4, "epsilon": 1.0}


@dataclass
class Rollout:
    """A block of consecutive transitions from the single stream."""

    obs: np.ndarray        # (T, obs_dim)
    actions: np.ndarray    # (T,) int
    rewards: np.ndarray    # (T,)
    conts: np.ndarray      # (T,) continuation masks
    bootstrap_obs: np.ndarray  # observation after the last transition
    cells: np.ndarray      # (T,) agent grid cell per step (context features)

    def __len__(self) -> int:
        return len(self.actions)


# ---------------------------------------------------------------------------
# Actor-Critic
# ---------------------------------------------------------------------------


def make_ac_params(rng: np.random.Generator, obs_dim: int, hidden: int, n_actions: int = 4):
    """Separate policy and value MLPs, each 2 hidden layers."""
    policy = init_mlp(rng, obs_dim, hidden, n_actions)
    value = init_mlp(rng, obs_dim, hidden, 1)
    return policy, value


def nstep_returns(rewards: np.ndarray, conts: np.ndarray, v_boot: float, gamma: float) -> np.ndarray:
    """Bootstrapped n-step returns with continuation masking."""
    t = len(rewards)
    out = np.empty(t)
    acc = float(v_boot)
    for i in range(t - 1, -1, -1):
        acc = rewards[i] + gamma * conts[i] * acc
        out[i] = acc
    return out


def ac_targets(val_data: list[np.ndarray], batch: Rollout, gamma: float):
    """Returns and advantages, both treated as constants in the losses."""
    values = mlp_forward_raw(val_data, batch.obs)[:, 0]
    v_boot = float(mlp_forward_raw(val_data, batch.bootstrap_obs)[0])
    returns = nstep_returns(batch.rewards, batch.conts, v_boot, gamma)
    return returns, returns - values


def ac_inner_loss(pol, val, batch: Rollout, alpha_ent, alpha_l2, gamma: float,
                  targets=None) -> dk.Tensor:
    """Policy + value + weighted entropy and L2 losses on one rollout.

    ``pol``/``val`` are parameter tensor lists; ``alpha_ent``/``alpha_l2``
    may be floats or tape tensors. Advantages and return targets are
    gradient-stopped. The entropy term is the negative entropy, so a
    positive coefficient raises policy entropy when the loss is minimized.
    """
    t = len(batch)
    if targets is None:
        targets = ac_targets([p.data for p in val], batch, gamma)
    returns, adv = targets

    logits = mlp_forward(pol, dk.Tensor(batch.obs))
    logp = dk.log_softmax(logits)
    picked = dk.take_rows(logp, batch.actions)
    l_pi = dk.neg(dk.tmean(dk.mul(picked, dk.Tensor(adv))))

    v = dk.reshape(mlp_forward(val, dk.Tensor(batch.obs)), (t,))
    diff = dk.sub(v, dk.Tensor(returns))
    l_v = dk.mul(0.5 / t, dk.sum_sq(diff))

    probs = dk.exp(logp)
    l_ent = dk.mul(1.0 / t, dk.tsum(dk.mul(probs, logp)))

    loss = dk.add(dk.add(l_pi, l_v), dk.mul(alpha_ent, l_ent))
    skip_l2 = not isinstance(alpha_l2, dk.Tensor) and float(alpha_l2) == 0.0
    if not skip_l2:
        parts = [dk.sum_sq(p) for p in list(pol) + list(val)]
        l_l2 = parts[0]
        for part in parts[1:]:
            l_l2 = dk.add(l_l2, part)
        loss = dk.add(loss, dk.mul(alpha_l2, l_l2))
    return loss


def ac_update(pol, val, batch: Rollout, alpha_ent, alpha_l2, lr: float, gamma: float,
              tape: dk.Tape, targets=None):
    """One recorded SGD step, differentiable w.r.t. the alpha tensors.

    Returns new parameter tensor lists plus auxiliary raw stats (flat
    gradient for cosine features, scalar loss).
    """
    loss = ac_inner_loss(pol, val, batch, alpha_ent, alpha_l2, gamma, targets=targets)
    params = list(pol) + list(val)
    grads = tape.grad(loss, params, create_graph=True)
    new = dk.sgd_step(params, grads, lr)
    flat_grad = np.concatenate([g.data.ravel() for g in grads])
    return new[: len(pol)], new[len(pol):], {"loss": loss.item(), "flat_grad": flat_grad}


def ac_update_plain(pol_data, val_data, batch: Rollout, alpha_ent: float, alpha_l2: float,
                    lr: float, gamma: float, targets=None):
    """Same update without meta-gradient flow; parameters in, arrays out."""
    with dk.Tape() as tape:
        pol = [tape.watch(p) for p in pol_data]
        val = [tape.watch(p) for p in val_data]
        loss = ac_inner_loss(pol, val, batch, alpha_ent, alpha_l2, gamma, targets=targets)
        grads = tape.grad(loss, pol + val, create_graph=False)
    n = len(pol_data)
    new = [p - lr * g.data for p, g in zip(pol_data + val_data, grads)]
    flat_grad = np.concatenate([g.data.ravel() for g in grads])
    return new[:n], new[n:], {"loss": loss.item(), "flat_grad": flat_grad}


def ac_act(pol_data, obs: np.ndarray, rng: np.random.Generator):
    """Sample from the softmax policy; returns (action, log-prob)."""
    probs = softmax_raw(mlp_forward_raw(pol_data, obs))
    u = rng.random()
    acc = 0.0
    action = len(probs) - 1
    for i, p in enumerate(probs):
        acc += p
        if u < acc:
            action = i
            break
    return action, float(np.log(probs[action]))


def policy_entropy(pol_data, obs: np.ndarray) -> float:
    """Mean softmax entropy over a batch of observations."""
    logits = mlp_forward_raw(pol_data, obs)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(np.exp(logp) * logp).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# Q(lambda)
# ---------------------------------------------------------------------------


def peng_q_targets(rewards, conts, next_q_max, lam: float, gamma: float) -> np.ndarray:
    """Peng-style lambda-returns by backward recursion.

    ``next_q_max[t]`` is max_a q(s_{t+1}, a); the horizon bootstraps from
    it. Continuation masks cut both the bootstrap and the recursive term.
    Accepts any indexable sequences (the hot path passes plain lists).
    """
    t = len(rewards)
    if t == 0:
        raise ValueError("empty trajectory")
    out = [0.0] * t
    out[t - 1] = rewards[t - 1] + gamma * conts[t - 1] * next_q_max[t - 1]
    for i in range(t - 2, -1, -1):
        mix = lam * out[i + 1] + (1.0 - lam) * next_q_max[i]
        out[i] = rewards[i] + gamma * conts[i] * mix
    return np.asarray(out)


def epsilon_greedy(q_row: np.ndarray, epsilon: float) -> np.ndarray:
    """Exploration distribution; ties broken toward the lowest action index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    n = len(q_row)
    probs = np.full(n, epsilon / n)
    probs[int(np.argmax(q_row))] += 1.0 - epsilon
    return probs


class QLambdaAgent:
    """Per-step Q(lambda) learner over a flat parameter vector.

    Each environment step appends the newest transition to a trailing
    window (at most ``window`` long) and, once the window is full, updates
    the oldest state-action pair toward its lambda-return computed under
    the current parameters. Gradients are EMA-smoothed (decay 0.9, no bias
    correction) before a standard bias-corrected Adam step.
    """

    def __init__(self, rng: np.random.Generator, obs_dim: int, hidden: int,
                 n_actions: int = 4, lr: float = 3e-5, gamma: float = 0.99,
                 lam: float = 0.9, window: int = 16, ema_decay: float = 0.9,
                 beta1: float = 0.9, beta2: float = 0.999, adam_eps: float = 1e-4):
        self.obs_dim = obs_dim
        self.hidden = hidden
        self.n_actions = n_actions
        self.lr = lr
        self.gamma = gamma
        self.lam = lam
        self.window = window
        self.ema_decay = ema_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps

        layers = init_mlp(rng, obs_dim, hidden, n_actions)
        sizes = [p.size for p in layers]
        self.theta = np.concatenate([p.ravel() for p in layers])
        self.grad = np.zeros_like(self.theta)
        self.views = []
        self.grad_views = []
        off = 0
        for p, n in zip(layers, sizes):
            self.views.append(self.theta[off: off + n].reshape(p.shape))
            self.grad_views.append(self.grad[off: off + n].reshape(p.shape))
            off += n

        self.ema = np.zeros_like(self.theta)
        self.m = np.zeros_like(self.theta)
        self.v = np.zeros_like(self.theta)
        self.step_count = 0

        self._obs = np.zeros((window + 1, obs_dim))
        self._acts: list[int] = []
        self._rews: list[float] = []
        self._conts: list[float] = []
        self._filled = 0
        # scratch buffers for the per-step hot path
        self._h1 = np.zeros((window + 1, hidden))
        self._h2 = np.zeros((window + 1, hidden))
        self._q = np.zeros((window + 1, n_actions))
        self._av1 = np.zeros(hidden)
        self._av2 = np.zeros(hidden)
        self._aq = np.zeros(n_actions)
        self._opt_s = np.zeros_like(self.theta)

    def snapshot(self) -> np.ndarray:
        return self.theta.copy()

    def unflatten(self, flat: np.ndarray) -> list[np.ndarray]:
        """Layer views into a flat parameter vector of the same layout."""
        out = []
        off = 0
        for v in self.views:
            out.append(flat[off: off + v.size].reshape(v.shape))
            off += v.size
        return out

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        return mlp_forward_raw(self.views, obs)

    def act(self, obs: np.ndarray, epsilon: float, rng: np.random.Generator):
        """Epsilon-greedy action; returns (action, q_row).

        The returned row is a scratch buffer, valid until the next call.
        """
        w1, b1, w2, b2, w3, b3 = self.views
        np.matmul(obs, w1, out=self._av1)
        self._av1 += b1
        np.maximum(self._av1, 0.0, out=self._av1)
        np.matmul(self._av1, w2, out=self._av2)
        self._av2 += b2
        np.maximum(self._av2, 0.0, out=self._av2)
        np.matmul(self._av2, w3, out=self._aq)
        self._aq += b3
        if epsilon > 0.0 and rng.random() < epsilon:
            action = int(rng.integers(self.n_actions))
        else:
            action = int(np.argmax(self._aq))
        return action, self._aq

    def observe_step(self, obs, action, reward, cont, next_obs):
        """Push the newest transition; update the oldest pair if possible.

        Returns (loss, q_sa, next_q_max) for the newest transition, the
        latter two evaluated under the pre-update parameters (used for
        context features). ``loss`` is None while the window is warming up.
        """
        w = self.window
        if self._filled < w:
            self._obs[self._filled] = obs
            self._acts.append(int(action))
            self._rews.append(float(reward))
            self._conts.append(float(cont))
            self._obs[self._filled + 1] = next_obs
            self._filled += 1
            q_new = self.q_values(obs)
            nq = float(self.q_values(next_obs).max())
            return None, float(q_new[action]), nq
        # slide: the new transition's obs equals the previous newest next_obs
        self._obs[:w] = self._obs[1:]
        self._obs[w] = next_obs
        del self._acts[0]
        self._acts.append(int(action))
        del self._rews[0]
        self._rews.append(float(reward))
        del self._conts[0]
        self._conts.append(float(cont))

        w1, b1, w2, b2, w3, b3 = self.views
        h1, h2, q = self._h1, self._h2, self._q
        np.matmul(self._obs, w1, out=h1)
        h1 += b1
        np.maximum(h1, 0.0, out=h1)
        np.matmul(h1, w2, out=h2)
        h2 += b2
        np.maximum(h2, 0.0, out=h2)
        np.matmul(h2, w3, out=q)
        q += b3
        next_q_max = q[1:].max(axis=1)        # per-position bootstrap values

        target = peng_q_targets(self._rews, self._conts, next_q_max.tolist(),
                                self.lam, self.gamma)[0]
        a0 = self._acts[0]
        delta = float(q[0, a0]) - target      # dL/dq(s0, a0)
        if not math.isfinite(delta):
            raise dk.NumericFault("q-values diverged to non-finite values")
        loss = 0.5 * delta * delta

        # feature stats for the newest transition under pre-update parameters
        q_sa_new = float(q[w - 1, action])
        next_q_max_new = float(next_q_max[w - 1])

        g1, gb1, g2, gb2, g3, gb3 = self.grad_views
        dh2 = w3[:, a0] * delta
        g3.fill(0.0)
        g3[:, a0] = h2[0] * delta
        gb3.fill(0.0)
        gb3[a0] = delta
        dz2 = dh2 * (h2[0] > 0.0)
        np.outer(h1[0], dz2, out=g2)
        gb2[:] = dz2
        dz1 = (w2 @ dz2) * (h1[0] > 0.0)
        np.outer(self._obs[0], dz1, out=g1)
        gb1[:] = dz1

        self.ema *= self.ema_decay
        np.multiply(self.grad, 1.0 - self.ema_decay, out=self._opt_s)
        self.ema += self._opt_s

        self.step_count += 1
        t = self.step_count
        self.m *= self.beta1
        np.multiply(self.ema, 1.0 - self.beta1, out=self._opt_s)
        self.m += self._opt_s
        self.v *= self.beta2
        np.multiply(self.ema, self.ema, out=self._opt_s)
        self._opt_s *= 1.0 - self.beta2
        self.v += self._opt_s
        np.divide(self.v, 1.0 - self.beta2**t, out=self._opt_s)
        np.sqrt(self._opt_s, out=self._opt_s)
        self._opt_s += self.adam_eps
        np.divide(self.m, self._opt_s, out=self._opt_s)
        self._opt_s *= self.lr / (1.0 - self.beta1**t)
        self.theta -= self._opt_s

        return loss, q_sa_new, next_q_max_new
