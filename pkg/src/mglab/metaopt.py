"""Outer-loop objectives and the two-time-scale training drivers.

The drivers own the environment, the inner learner and the meta state and
advance in "outer iterations". For Actor-Critic, an iteration unrolls K
recorded inner updates (16 environment steps each), optionally continues
L-1 further plain updates to build a bootstrap target, computes the outer
loss and takes an Adam step on the meta-parameters (direct values or
meta-network weights). For Q(lambda) the exploration parameter enters the
outer loss directly through the epsilon-greedy policy formula, so no inner
update is ever differentiated through (K = 0); an iteration runs L-1
genuine per-step updates and matches the pre-iteration policy against the
greedy policy of the advanced parameters.

All environment interaction (acting, recorded updates, bootstrap-target
continuation) draws from one step counter, so a run's total environment
steps equal the configured lifetime exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffkit as dk
from .agents import (
    META_RANGES,
    META_SCALES,
    InnerHyper,
    QLambdaAgent,
    Rollout,
    ac_act,
    ac_targets,
    ac_update,
    ac_update_plain,
    make_ac_params,
)
from .context import (
    ContextBuffer,
    FeatureSpec,
    MetaNet,
    RunningNormalizer,
    ac_feature_frame,
    normalize_and_push,
    q_feature_frame,
)
from .nets import mlp_forward, mlp_forward_raw, softmax_raw


@dataclass(frozen=True)
class MetaSpec:
    """Outer-loop configuration."""

    objective: str                 # "mg" | "bmg"
    k: int = 1
    l: int = 1
    meta_lr: float = 1e-3
    alpha_outer_ent: float = 0.0   # MG only
    tuned: tuple = ("alpha_ent",)
    meta_hidden: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-4

    def validate(self, agent_kind: str) -> None:
        if self.objective not in ("mg", "bmg"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if agent_kind == "q":
            if self.objective != "bmg":
                raise ValueError("the q-value update is not differentiable in epsilon; "
                                 "only the bmg objective can tune it")
            if self.k != 0:
                raise ValueError("bmg with q agents uses k=0")
            if self.l < 2:
                raise ValueError("bmg with q agents needs l >= 2")
            if self.tuned != ("epsilon",):
                raise ValueError("q agents tune only epsilon")
        else:
            if self.k < 1:
                raise ValueError("ac meta-gradients need k >= 1")
            if self.objective == "bmg" and self.l < 1:
                raise ValueError("bmg needs l >= 1")
            for name in self.tuned:
                if name not in ("alpha_ent", "alpha_l2"):
                    raise ValueError(f"ac agents cannot tune {name!r}")
        if self.meta_lr <= 0:
            raise ValueError("meta_lr must be positive")


# ---------------------------------------------------------------------------
# Outer losses
# ---------------------------------------------------------------------------


def mg_outer_loss(pol, val_data, batch: Rollout, alpha_outer_ent: float, gamma: float,
                  targets=None) -> dk.Tensor:
    """Policy loss plus a fixed-weight entropy term at the unrolled policy."""
    returns, adv = targets if targets is not None else ac_targets(val_data, batch, gamma)
    logp = dk.log_softmax(mlp_forward(pol, dk.Tensor(batch.obs)))
    picked = dk.take_rows(logp, batch.actions)
    l_pi = dk.neg(dk.tmean(dk.mul(picked, dk.Tensor(adv))))
    if alpha_outer_ent == 0.0:
        return l_pi
    probs = dk.exp(logp)
    l_ent = dk.mul(1.0 / len(batch), dk.tsum(dk.mul(probs, logp)))
    return dk.add(l_pi, dk.mul(alpha_outer_ent, l_ent))


def bmg_outer_loss_ac(pol_k, target_pol_data, batch: Rollout) -> dk.Tensor:
    """Mean KL(target policy || unrolled policy) over the batch states.

    The target policy is a constant; gradient flows only into ``pol_k``.
    Zero-probability target entries are guarded in the log domain.
    """
    p = softmax_raw(mlp_forward_raw(target_pol_data, batch.obs))
    plogp = (p * np.log(np.maximum(p, 1e-12))).sum(axis=1)
    logq = dk.log_softmax(mlp_forward(pol_k, dk.Tensor(batch.obs)))
    cross = dk.tsum(dk.mul(dk.Tensor(p), logq), axis=1)
    return dk.tmean(dk.sub(dk.Tensor(plogp), cross))


def bmg_outer_loss_q(q_current_params, q_target_params, epsilon, states: np.ndarray,
                     n_actions: int = 4) -> dk.Tensor:
    """Mean KL(greedy(target) || epsilon-greedy(current)), differentiable in epsilon.

    Per state this reduces to -log(1 - eps + eps/|A|) where the argmaxes of
    target and current q-values agree and -log(eps/|A|) where they differ.
    Epsilon is clamped into [1e-6, 1 - 1e-6] before the logs.
    """
    qc = mlp_forward_raw(q_current_params, states)
    qt = mlp_forward_raw(q_target_params, states)
    agree = int((qc.argmax(axis=1) == qt.argmax(axis=1)).sum())
    n = states.shape[0]
    diff = n - agree
    eps = dk.clip(epsilon, 1e-6, 1.0 - 1e-6)
    log_match = dk.log(dk.add(dk.sub(1.0, eps), dk.div(eps, float(n_actions))))
    log_other = dk.log(dk.div(eps, float(n_actions)))
    total = dk.add(dk.mul(float(agree), log_match), dk.mul(float(diff), log_other))
    return dk.neg(dk.div(total, float(n)))


def meta_step(values: list[np.ndarray], grads: list[np.ndarray], state: dk.AdamState,
              lr: float, clamp: tuple | None = None):
    """Adam on meta values; direct meta-parameters are re-clamped into range."""
    new_t, state = dk.adam_step(values, grads, state, lr)
    new = [t.data.copy() for t in new_t]
    if clamp is not None:
        lo, hi = clamp
        new = [np.clip(v, lo, hi) for v in new]
    return new, state


class FlatAdam:
    """In-place Adam over a list of arrays, flattened into one vector.

    Numerically identical to ``diffkit.adam_step`` (a test pins this); used
    on the meta-update hot path where tracing overhead would dominate.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-4):
        self.shapes = [p.shape for p in params]
        self.sizes = [p.size for p in params]
        n = int(sum(self.sizes))
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self._g = np.zeros(n)
        self._s = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        off = 0
        for g, size in zip(grads, self.sizes):
            self._g[off: off + size] = g.ravel()
            off += size
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * self._g
        self.v *= self.beta2
        np.multiply(self._g, self._g, out=self._s)
        self.v += (1.0 - self.beta2) * self._s
        np.divide(self.v, 1.0 - self.beta2**self.t, out=self._s)
        np.sqrt(self._s, out=self._s)
        self._s += self.eps
        np.divide(self.m, self._s, out=self._s)
        self._s *= lr / (1.0 - self.beta1**self.t)
        off = 0
        for p, size in zip(params, self.sizes):
            p -= self._s[off: off + size].reshape(p.shape)
            off += size


# ---------------------------------------------------------------------------
# Meta-parameter state (direct values or context-conditioned networks)
# ---------------------------------------------------------------------------


class MetaState:
    """The tuned meta-parameters and their Adam states.

    Without context each tuned parameter is a scalar initialized to the
    middle of its range (matching the meta-net pretraining target). With
    context each parameter gets its own pretrained sigmoid-head network;
    all networks read the same context buffer.
    """

    def __init__(self, spec: MetaSpec, feature_spec: FeatureSpec | None,
                 rng: np.random.Generator):
        self.spec = spec
        self.contextual = feature_spec is not None
        self.nets: dict[str, MetaNet] = {}
        self.values: dict[str, np.ndarray] = {}
        self.adam: dict[str, FlatAdam] = {}
        for name in spec.tuned:
            if self.contextual:
                net = MetaNet(rng, name, feature_spec.dim, spec.meta_hidden)
                net.pretrain(rng)
                self.nets[name] = net
                self.adam[name] = FlatAdam(
                    net.params, spec.adam_beta1, spec.adam_beta2, spec.adam_eps)
            else:
                self.values[name] = np.asarray(0.5 * META_SCALES[name])
                self.adam[name] = FlatAdam(
                    [self.values[name]], spec.adam_beta1, spec.adam_beta2, spec.adam_eps)

    def current(self, ctx_flat: np.ndarray | None) -> dict[str, float]:
        if self.contextual:
            return {n: net.predict_raw(ctx_flat) for n, net in self.nets.items()}
        return {n: float(v) for n, v in self.values.items()}

    def watch(self, tape: dk.Tape) -> dict[str, list[dk.Tensor]]:
        if self.contextual:
            return {n: [tape.watch(p) for p in net.params] for n, net in self.nets.items()}
        return {n: [tape.watch(v)] for n, v in self.values.items()}

    def traced_values(self, watched, ctx_flat: np.ndarray | None) -> dict[str, dk.Tensor]:
        if self.contextual:
            return {n: self.nets[n].predict_traced(watched[n], ctx_flat) for n in self.nets}
        return {n: watched[n][0] for n in watched}

    def leaves(self, watched) -> list[dk.Tensor]:
        out = []
        for name in self.spec.tuned:
            out.extend(watched[name])
        return out

    def apply(self, watched, grads: list[dk.Tensor]) -> None:
        i = 0
        for name in self.spec.tuned:
            n = len(watched[name])
            gs = [g.data for g in grads[i: i + n]]
            i += n
            if self.contextual:
                self.adam[name].step(self.nets[name].params, gs, self.spec.meta_lr)
            else:
                value = self.values[name]
                self.adam[name].step([value], gs, self.spec.meta_lr)
                lo, hi = META_RANGES[name]
                np.clip(value, lo, hi, out=value)


# ---------------------------------------------------------------------------
# Actor-Critic driver
# ---------------------------------------------------------------------------

AC_ROLLOUT = 16


class ACTrainLoop:
    """Baseline, MG, or BMG training of the Actor-Critic inner learner."""

    def __init__(self, env, hidden: int, hyper: InnerHyper,
                 meta: MetaSpec | None, feature_spec: FeatureSpec | None,
                 rng_agent: np.random.Generator, rng_act: np.random.Generator,
                 rng_meta: np.random.Generator, log_updates: bool = False):
        hyper.validate()
        if meta is not None:
            meta.validate("ac")
        if feature_spec is not None and meta is None:
            raise ValueError("context features need a meta objective")
        self.env = env
        self.hyper = hyper
        self.meta = meta
        self.rng_act = rng_act
        self.pol, self.val = make_ac_params(rng_agent, env.obs_dim, hidden, env.n_actions)

        self.meta_state = MetaState(meta, feature_spec, rng_meta) if meta else None
        self.feature_spec = feature_spec
        if feature_spec is not None:
            self.buffer = ContextBuffer(feature_spec)
            self.normalizer = RunningNormalizer(feature_spec.n_channels)
        self._prev_grads: tuple = (None, None)
        self._prev_meta: np.ndarray | None = None

        self.env_steps = 0
        self.cumulative_return = 0.0
        self.iteration = 0
        self.inner_updates = 0
        self.last_meta: dict[str, float] = {}
        self.last_inner_loss = math.nan
        self.log_updates = log_updates
        self.update_log: list = []
        if meta is not None and not self.meta_state.contextual:
            self.last_meta = self.meta_state.current(None)

    # -- environment interaction -------------------------------------------

    def _collect(self, pol_data, budget: int) -> Rollout | None:
        """Collect up to one 16-step rollout; None if the budget ran short."""
        n = min(AC_ROLLOUT, budget)
        obs = np.empty((n, self.env.obs_dim))
        actions = np.empty(n, dtype=np.intp)
        rewards = np.empty(n)
        conts = np.empty(n)
        cells = np.empty(n, dtype=np.intp)
        for i in range(n):
            cells[i] = self.env.agent_cell()
            o = self.env.observe()
            a, _ = ac_act(pol_data, o, self.rng_act)
            tr = self.env.step(a)
            obs[i] = tr.obs
            actions[i] = a
            rewards[i] = tr.reward
            conts[i] = tr.continuation
        self.env_steps += n
        self.cumulative_return += float(rewards.sum())
        if n < AC_ROLLOUT:
            return None
        return Rollout(obs, actions, rewards, conts, self.env.observe(), cells)

    def _push_features(self, batch: Rollout, pol_data, val_data) -> np.ndarray:
        frame = ac_feature_frame(
            self.feature_spec, batch, pol_data, val_data, self.hyper.gamma,
            prev_grads=self._prev_grads, prev_meta=self._prev_meta)
        normalize_and_push(self.buffer, self.normalizer, frame)
        return self.buffer.flatten()

    def _after_update(self, aux, meta_vals: dict[str, float]) -> None:
        self._prev_grads = (aux["flat_grad"], self._prev_grads[0])
        if self.meta is not None:
            self._prev_meta = np.array([meta_vals[n] for n in self.meta.tuned])
            self.last_meta = dict(meta_vals)
        self.last_inner_loss = aux["loss"]
        self.inner_updates += 1
        if self.log_updates:
            self.update_log.append((self.env_steps, dict(meta_vals)))

    # -- one outer iteration -------------------------------------------------

    def advance(self, budget: int) -> dict:
        """Run one iteration within ``budget`` env steps; returns metrics."""
        start_steps = self.env_steps
        start_return = self.cumulative_return
        if self.meta is None:
            metrics = self._advance_baseline(budget)
        else:
            metrics = self._advance_meta(start_steps, budget)
        metrics["steps"] = self.env_steps - start_steps
        metrics["reward_sum"] = self.cumulative_return - start_return
        self.iteration += 1
        return metrics

    def _advance_baseline(self, budget: int) -> dict:
        batch = self._collect(self.pol, budget)
        if batch is None:
            return {"complete": False, "outer_loss": math.nan}
        self.pol, self.val, aux = ac_update_plain(
            self.pol, self.val, batch, self.hyper.alpha_ent, self.hyper.alpha_l2,
            self.hyper.lr, self.hyper.gamma)
        self._after_update(aux, {})
        return {"complete": True, "outer_loss": math.nan}

    def _advance_meta(self, start_steps: int, budget: int) -> dict:
        spec = self.meta
        contextual = self.meta_state.contextual
        outer = None
        grads = None
        with dk.Tape() as tape:
            watched = self.meta_state.watch(tape)
            pol = [tape.watch(p) for p in self.pol]
            val = [tape.watch(p) for p in self.val]
            trace = dk.UnrollTrace(tape)
            last_batch = None
            complete = True

            for _ in range(spec.k):
                rem = budget - (self.env_steps - start_steps)
                batch = self._collect([t.data for t in pol], rem)
                if batch is None:
                    complete = False
                    break
                ctx = None
                if contextual:
                    ctx = self._push_features(
                        batch, [t.data for t in pol], [t.data for t in val])
                traced = self.meta_state.traced_values(watched, ctx)
                alpha_ent = traced.get("alpha_ent", self.hyper.alpha_ent)
                alpha_l2 = traced.get("alpha_l2", self.hyper.alpha_l2)
                trace.add(pol + val, batch, traced)
                pol, val, aux = ac_update(
                    pol, val, batch, alpha_ent, alpha_l2,
                    self.hyper.lr, self.hyper.gamma, tape)
                self._after_update(aux, {n: t.item() for n, t in traced.items()})
                last_batch = batch
            trace.theta_final = pol + val

            tgt_pol = [t.data for t in pol]
            tgt_val = [t.data for t in val]
            if complete and spec.objective == "bmg":
                for _ in range(spec.l - 1):
                    rem = budget - (self.env_steps - start_steps)
                    batch = self._collect(tgt_pol, rem)
                    if batch is None:
                        complete = False
                        break
                    ctx = None
                    if contextual:
                        ctx = self._push_features(batch, tgt_pol, tgt_val)
                    vals = self.meta_state.current(ctx)
                    tgt_pol, tgt_val, aux = ac_update_plain(
                        tgt_pol, tgt_val, batch,
                        vals.get("alpha_ent", self.hyper.alpha_ent),
                        vals.get("alpha_l2", self.hyper.alpha_l2),
                        self.hyper.lr, self.hyper.gamma)
                    self._after_update(aux, vals)
                    last_batch = batch

            if complete:
                if spec.objective == "mg":
                    outer = mg_outer_loss(pol, [t.data for t in val], last_batch,
                                          spec.alpha_outer_ent, self.hyper.gamma)
                else:
                    outer = bmg_outer_loss_ac(pol, tgt_pol, last_batch)
                grads = dk.grad_through_updates(trace, outer, self.meta_state.leaves(watched))

        # the agent continues from the bootstrap target (bmg) or theta_K (mg)
        self.pol, self.val = tgt_pol, tgt_val
        if not complete:
            return {"complete": False, "outer_loss": math.nan}
        self.meta_state.apply(watched, grads)
        return {"complete": True, "outer_loss": outer.item()}


# ---------------------------------------------------------------------------
# Q(lambda) driver
# ---------------------------------------------------------------------------


class QTrainLoop:
    """Baseline or BMG training of the per-step Q(lambda) learner."""

    def __init__(self, env, hidden: int, hyper: InnerHyper,
                 meta: MetaSpec | None, feature_spec: FeatureSpec | None,
                 rng_agent: np.random.Generator, rng_act: np.random.Generator,
                 rng_meta: np.random.Generator, log_updates: bool = False):
        hyper.validate()
        if meta is not None:
            meta.validate("q")
        if feature_spec is not None and meta is None:
            raise ValueError("context features need a meta objective")
        self.env = env
        self.hyper = hyper
        self.meta = meta
        self.rng_act = rng_act
        self.agent = QLambdaAgent(
            rng_agent, env.obs_dim, hidden, env.n_actions,
            lr=hyper.lr, gamma=hyper.gamma, lam=hyper.lam)

        self.meta_state = MetaState(meta, feature_spec, rng_meta) if meta else None
        self.feature_spec = feature_spec
        if feature_spec is not None:
            self.buffer = ContextBuffer(feature_spec)
            self.normalizer = RunningNormalizer(feature_spec.n_channels)

        self.env_steps = 0
        self.cumulative_return = 0.0
        self.iteration = 0
        self.inner_updates = 0
        self.last_meta: dict[str, float] = {}
        self.last_inner_loss = math.nan
        self.log_updates = log_updates
        self.update_log: list = []
        if meta is not None and not self.meta_state.contextual:
            self.last_meta = self.meta_state.current(None)

    def _current_epsilon(self) -> float:
        if self.meta is None:
            return self.hyper.epsilon
        if self.meta_state.contextual:
            return self.meta_state.current(self.buffer.flatten())["epsilon"]
        return self.meta_state.current(None)["epsilon"]

    def _step_once(self):
        eps = self._current_epsilon()
        obs = self.env.observe()
        a, _ = self.agent.act(obs, eps, self.rng_act)
        tr = self.env.step(a)
        loss, q_sa, next_q_max = self.agent.observe_step(
            tr.obs, a, tr.reward, tr.continuation, tr.next_obs)
        self.env_steps += 1
        self.cumulative_return += tr.reward
        if loss is not None:
            self.inner_updates += 1
            self.last_inner_loss = loss
        if self.feature_spec is not None:
            frame = q_feature_frame(
                self.feature_spec, tr.reward, q_sa, next_q_max, self.hyper.gamma)
            normalize_and_push(self.buffer, self.normalizer, frame)
        if self.meta is not None:
            self.last_meta = {"epsilon": eps}
            if self.log_updates:
                self.update_log.append((self.env_steps, {"epsilon": eps}))
        return tr.obs

    def advance(self, budget: int) -> dict:
        start_steps = self.env_steps
        start_return = self.cumulative_return
        if self.meta is None:
            self._step_once()
            metrics = {"complete": True, "outer_loss": math.nan}
        else:
            metrics = self._advance_bmg(budget)
        metrics["steps"] = self.env_steps - start_steps
        metrics["reward_sum"] = self.cumulative_return - start_return
        self.iteration += 1
        return metrics

    def _advance_bmg(self, budget: int) -> dict:
        spec = self.meta
        horizon = spec.l - 1
        theta0 = self.agent.snapshot()
        n = min(horizon, budget)
        states = np.empty((n, self.env.obs_dim))
        for i in range(n):
            states[i] = self._step_once()
        if n < horizon:
            return {"complete": False, "outer_loss": math.nan}

        with dk.Tape() as tape:
            watched = self.meta_state.watch(tape)
            ctx = self.buffer.flatten() if self.meta_state.contextual else None
            eps_t = self.meta_state.traced_values(watched, ctx)["epsilon"]
            outer = bmg_outer_loss_q(
                self.agent.unflatten(theta0), self.agent.views, eps_t, states,
                self.env.n_actions)
            grads = tape.grad(outer, self.meta_state.leaves(watched))
        self.meta_state.apply(watched, grads)
        return {"complete": True, "outer_loss": outer.item()}
