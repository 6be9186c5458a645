"""Primal-dual learning of constrained policies.

Three trainers share one state container:

* ``model_based_step``: the objective and constraint action-gradients come
  from the problem's model.
* ``model_free_det_step``: a deterministic policy explores with additive
  Gaussian noise, transitions go to a replay memory and a value network
  fitted on it supplies the objective's action-gradient.
* ``model_free_stoch_step``: a stochastic (categorical) policy updated with a
  baseline-subtracted score-function gradient, baselines fitted online.

In every trainer the policy ascends the Lagrangian
``E[J - lam(h)^T g - xi^T c]``, the multiplier network moves along ``+g``
and ``xi`` takes a projected step along ``+c``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .metrics import RoundMetrics
from .nn import (
    ACTIVATIONS,
    AdamState,
    Direction,
    Mlp,
    NonFiniteGradientError,
    adam_step,
    multiplier_output_clamp,
)

logger = logging.getLogger(__name__)


class Mode(enum.Enum):
    MODEL_BASED = "model-based"
    MODEL_FREE_DET = "model-free-det"
    MODEL_FREE_STOCH = "model-free-stoch"


class TrainingError(RuntimeError):
    """A training step failed; the message carries round/iteration context."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Exploration scale: constant, then a linear ramp to zero."""

    eps_initial: float = 10.0
    hold_iters: int = 5000
    decay_iters: int = 15000

    def __call__(self, t):
        if t <= self.hold_iters:
            return self.eps_initial
        if self.decay_iters <= 0:
            return 0.0
        frac = (t - self.hold_iters) / self.decay_iters
        return self.eps_initial * max(0.0, 1.0 - frac)


@dataclass(frozen=True)
class TrainerSettings:
    policy_hidden: tuple = (50, 40, 30)
    multiplier_hidden: tuple = (50, 40, 30)
    value_hidden: tuple = (200, 150)
    # hidden activation of value and baseline networks; smooth units give
    # smooth action-gradients
    value_activation: str = "relu"
    policy_lr: float = 1e-3
    multiplier_lr: float = 1e-3
    xi_lr: float = 1e-4
    value_lr: float = 5e-3
    batch_size: int = 32
    policy_init: float = 10.0
    # Policy outputs and value-net action inputs are expressed in units of
    # the problem's ``action_scale``.
    normalize_actions: bool = True
    noise: NoiseSchedule = NoiseSchedule()
    replay_capacity: int = 100_000
    # Policy and multiplier outputs are clamped at zero. "projected": the
    # gradient also passes a clamped output when the ascent direction points
    # back into the positive half-line; "relu": plain ReLU subgradient.
    clamp_grad: str = "projected"
    # "policy": dual updates use constraints at the noiseless policy output;
    # "replay": they use the constraint values stored with each transition.
    dual_source: str = "policy"
    oracle_values: bool = False
    prob_floor: float = 1e-12
    stoch_batch: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("policy_lr", "multiplier_lr", "xi_lr", "value_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.stoch_batch < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.clamp_grad not in ("projected", "relu"):
            raise ValueError(f"clamp_grad: unknown option {self.clamp_grad!r}")
        if self.dual_source not in ("policy", "replay"):
            raise ValueError(f"dual_source: unknown option {self.dual_source!r}")
        if self.value_activation not in ACTIVATIONS:
            raise ValueError(f"value_activation: unknown activation {self.value_activation!r}")


class ReplayMemory:
    """Fixed-capacity ring buffer of ``(h, x, J, g, c)`` transitions."""

    def __init__(self, capacity, state_dim, action_dim, n_inst, n_avg):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.h = np.zeros((capacity, state_dim))
        self.x = np.zeros((capacity, action_dim))
        self.J = np.zeros(capacity)
        self.g = np.zeros((capacity, n_inst))
        self.c = np.zeros((capacity, n_avg))
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, h, x, J, g, c):
        i = self.head
        self.h[i], self.x[i], self.J[i], self.g[i], self.c[i] = h, x, J, g, c
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng, batch_size):
        """Indices of a uniform draw without replacement."""
        if batch_size > self.size:
            raise ValueError(f"cannot draw {batch_size} from {self.size} transitions")
        return rng.choice(self.size, size=batch_size, replace=False)


@dataclass
class TrainerState:
    mode: Mode
    policy: Mlp
    multiplier: Mlp
    xi: np.ndarray
    value_nets: dict = field(default_factory=dict)
    adam: dict = field(default_factory=dict)
    t: int = 0
    memory: ReplayMemory | None = None
    prob_floor_hits: int = 0
    skipped_updates: int = 0
    action_scale: float = 1.0

    def act(self, h):
        """Noiseless deterministic action at state(s) ``h``."""
        return self.action_scale * np.maximum(self.policy(h), 0.0)

    def nets(self):
        out = {"policy": self.policy, "multiplier": self.multiplier}
        out.update(self.value_nets)
        return out

    def multipliers(self, h):
        return multiplier_output_clamp(self.multiplier(h))


@dataclass
class StepInfo:
    """Per-iteration observation used for metrics."""

    rate: float
    inst_violation: np.ndarray
    avg_constraint: np.ndarray
    power: float
    channel: float
    updated: bool
    batch_h: np.ndarray | None = None


def init_state(env, settings, rng, mode):
    """Fresh networks, optimizer moments and multipliers for ``mode``."""
    mode = Mode(mode)
    n, m = env.state_dim, env.action_dim
    ni, na = env.n_inst_constraints, env.n_avg_constraints
    scale = float(env.action_scale) if settings.normalize_actions else 1.0

    if mode is Mode.MODEL_FREE_STOCH:
        policy = Mlp.build(
            [n, *settings.policy_hidden, env.n_actions], rng,
            output_activation="identity", output_value=0.0,
        )
    else:
        policy = Mlp.build(
            [n, *settings.policy_hidden, m], rng,
            output_activation="identity", output_value=settings.policy_init / scale,
        )
    # Output ReLUs of both nets are applied outside the Mlp (act() and
    # multiplier_output_clamp) so the trainer can see pre-clamp values.
    multiplier = Mlp.build(
        [n, *settings.multiplier_hidden, ni], rng,
        output_activation="identity", output_value=0.0,
    )

    value_nets = {}
    va = settings.value_activation
    if mode is Mode.MODEL_FREE_DET and not settings.oracle_values:
        value_nets["J"] = Mlp.build([m + n, *settings.value_hidden, 1], rng, hidden_activation=va)
        if not env.known_constraints:
            value_nets["g"] = Mlp.build([m + n, *settings.value_hidden, ni], rng, hidden_activation=va)
            value_nets["c"] = Mlp.build([m + n, *settings.value_hidden, na], rng, hidden_activation=va)
    elif mode is Mode.MODEL_FREE_STOCH:
        value_nets["J"] = Mlp.build([n, *settings.value_hidden, 1], rng, hidden_activation=va)
        value_nets["g"] = Mlp.build([n, *settings.value_hidden, ni], rng, hidden_activation=va)
        value_nets["c"] = Mlp.build([n, *settings.value_hidden, na], rng, hidden_activation=va)

    state = TrainerState(mode, policy, multiplier, np.zeros(na), value_nets,
                         action_scale=scale)
    hyper = dict(beta1=settings.adam_beta1, beta2=settings.adam_beta2,
                 epsilon=settings.adam_eps)
    state.adam = {name: AdamState.for_net(net, **hyper) for name, net in state.nets().items()}
    if mode is Mode.MODEL_FREE_DET:
        state.memory = ReplayMemory(settings.replay_capacity, n, m, ni, na)
    return state


# --------------------------------------------------------------------------
# action-gradient sources


class ModelCritic:
    """Action-gradients and constraint values straight from the problem model."""

    def __init__(self, env):
        self.env = env

    def direction(self, x, h, lam, xi):
        """``grad_x J - (grad_x g) lam - (grad_x c) xi`` per sample, shape ``(B, m)``."""
        dJ, dg, dc = self.env.value_gradient(x, h)
        return dJ - np.einsum("bmk,bk->bm", dg, lam) - np.einsum("bmk,k->bm", dc, xi)

    def constraints(self, x, h):
        _, g, c = self.env.evaluate(x, h)
        return g, c


class ValueNetCritic:
    """Action-gradients from fitted value networks.

    Known constraint expressions are used directly; otherwise the ``g``/``c``
    value networks stand in for them.
    """

    def __init__(self, env, nets, action_scale=1.0):
        self.env = env
        self.nets = nets
        self.action_scale = action_scale

    def _inputs(self, x, h):
        return np.concatenate([x / self.action_scale, h], axis=-1)

    def direction(self, x, h, lam, xi):
        m = x.shape[-1]
        z = self._inputs(x, h)
        out = self.nets["J"].backward(z, np.ones((len(z), 1))).d_input[:, :m]
        if self.env.known_constraints:
            out = out / self.action_scale
            dg, dc = self.env.constraint_gradient(x, h)
            out -= np.einsum("bmk,bk->bm", dg, lam)
            out -= np.einsum("bmk,k->bm", dc, xi)
        else:
            out = out - self.nets["g"].backward(z, lam).d_input[:, :m]
            xis = np.broadcast_to(xi, (len(z), xi.size))
            out -= self.nets["c"].backward(z, xis).d_input[:, :m]
            out /= self.action_scale
        return out

    def constraints(self, x, h):
        if self.env.known_constraints:
            _, g, c = self.env.evaluate(x, h)
            return g, c
        z = self._inputs(x, h)
        return self.nets["g"](z), self.nets["c"](z)


# --------------------------------------------------------------------------
# shared update pieces


def _scaled(grads, factor):
    return [g * factor for g in grads]


def _clamped_upstream(z, up, rule):
    """Upstream gradient through ``max(z, 0)`` for an ascent step along ``up``."""
    if rule == "relu":
        mask = z > 0.0
    else:
        mask = (z > 0.0) | (up > 0.0)
    return up * mask


def _apply(state, name, grads, lr, direction, context=""):
    try:
        adam_step(state.nets()[name], state.adam[name], grads, lr, direction)
    except NonFiniteGradientError as exc:
        norm = float(np.sqrt(sum(np.sum(np.nan_to_num(g, nan=np.inf) ** 2) for g in grads)))
        raise NonFiniteGradientError(
            f"non-finite gradient at iteration {state.t} for net {name!r} "
            f"(norm={norm}){context}"
        ) from exc


def _dual_step(state, g, c, hs, settings):
    """Gradients for the multiplier net and the new ``xi``; nothing applied."""
    z = state.multiplier(hs)
    up = _clamped_upstream(z, g, settings.clamp_grad)
    grads = _scaled(state.multiplier.backward(hs, up).d_params, 1.0 / len(hs))
    xi_new = np.maximum(state.xi + settings.xi_lr * c.mean(axis=0), 0.0)
    return grads, xi_new


def primal_dual_update(state, critic, hs, settings, dual_values=None):
    """One simultaneous update of policy, multiplier network and ``xi``.

    ``dual_values`` optionally overrides the ``(g, c)`` used by the dual step.
    """
    B = len(hs)
    x = state.act(hs)
    lam = state.multipliers(hs)
    # Chain rule through x = action_scale * policy(h).
    upstream = state.action_scale * critic.direction(x, hs, lam, state.xi)
    upstream = _clamped_upstream(state.policy(hs), upstream, settings.clamp_grad)
    policy_grads = _scaled(state.policy.backward(hs, upstream).d_params, 1.0 / B)
    g, c = critic.constraints(x, hs) if dual_values is None else dual_values
    mult_grads, xi_new = _dual_step(state, g, c, hs, settings)

    _apply(state, "policy", policy_grads, settings.policy_lr, Direction.ASCENT)
    _apply(state, "multiplier", mult_grads, settings.multiplier_lr, Direction.ASCENT)
    state.xi = xi_new


def _fit(state, name, inputs, targets, lr):
    """One Adam descent step on the mean squared error of a value network."""
    net = state.value_nets[name]
    err = net(inputs) - targets
    grads = _scaled(net.backward(inputs, 2.0 * err).d_params, 1.0 / len(inputs))
    _apply(state, name, grads, lr, Direction.DESCENT)


def _info_from_batch(env, x, hs, updated, batch_h=None):
    J, g, c = env.evaluate(x, hs)
    return StepInfo(
        rate=float(np.mean(J)),
        inst_violation=np.maximum(g, 0.0).mean(axis=0),
        avg_constraint=c.mean(axis=0),
        power=float(np.mean(x[..., 0])),
        channel=float(np.mean(hs[..., 0])),
        updated=updated,
        batch_h=batch_h,
    )


# --------------------------------------------------------------------------
# trainers


def model_based_step(state, env, hs, settings):
    """Model-based primal-dual update on a batch of states ``hs`` ``(B, n)``."""
    hs = np.atleast_2d(np.asarray(hs, dtype=np.float64))
    if len(hs) < 1:
        raise ValueError("empty batch")
    state.t += 1
    x = state.act(hs)
    info = _info_from_batch(env, x, hs, True, hs)
    primal_dual_update(state, ModelCritic(env), hs, settings)
    return info


def model_free_det_step(state, env, rng, settings):
    """Explore, store, fit the value networks and update the primal-dual variables.

    Updates start once the replay memory holds a full batch.
    """
    state.t += 1
    h = env.sample_state(rng)
    eps = settings.noise(state.t)
    noise = rng.standard_normal(env.action_dim)
    x = state.act(h) + eps * noise
    J, g, c = env.evaluate(x, h)
    mem = state.memory
    mem.add(h, x, J, g, c)

    info = StepInfo(
        rate=float(J),
        inst_violation=np.maximum(g, 0.0),
        avg_constraint=np.asarray(c, dtype=np.float64),
        power=float(x[0]),
        channel=float(h[0]),
        updated=False,
    )
    if len(mem) < settings.batch_size:
        state.skipped_updates += 1
        return info

    idx = mem.sample(rng, settings.batch_size)
    hs = mem.h[idx]
    if settings.oracle_values:
        critic = ModelCritic(env)
    else:
        critic = ValueNetCritic(env, state.value_nets, state.action_scale)
        xh = critic._inputs(mem.x[idx], hs)
        _fit(state, "J", xh, mem.J[idx][:, None], settings.value_lr)
        if "g" in state.value_nets:
            _fit(state, "g", xh, mem.g[idx], settings.value_lr)
            _fit(state, "c", xh, mem.c[idx], settings.value_lr)

    dual_values = None
    if settings.dual_source == "replay":
        dual_values = (mem.g[idx], mem.c[idx])
    primal_dual_update(state, critic, hs, settings, dual_values)
    info.updated = True
    info.batch_h = hs
    return info


class CategoricalPolicy:
    """Softmax distribution over a network's logits.

    The stochastic trainer only touches a policy through ``probs``,
    ``sample``, ``log_prob`` and ``grad_log_prob`` (w.r.t. the network output),
    so other distributions can be swapped in.
    """

    def __init__(self, floor=1e-12):
        self.floor = floor

    @staticmethod
    def probs(logits):
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def sample(self, logits, rng):
        p = self.probs(logits)
        u = rng.random(p.shape[:-1] + (1,))
        idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
        return np.minimum(idx, p.shape[-1] - 1)

    def log_prob(self, logits, actions):
        """Log-probabilities with the probability clamped at ``floor``.

        Returns ``(logp, n_clamped)``.
        """
        p = np.take_along_axis(self.probs(logits), actions[..., None], axis=-1)[..., 0]
        low = p < self.floor
        return np.log(np.maximum(p, self.floor)), int(low.sum())

    def grad_log_prob(self, logits, actions):
        p = self.probs(logits)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
        return onehot - p


def lagrangian_sample(J, g, c, lam, xi):
    return J - np.sum(lam * g, axis=-1) - np.sum(xi * c, axis=-1)


def score_function_upstream(state, hs, actions, J, g, c, dist, use_baseline=True):
    """Per-sample upstream gradient at the policy output, and the advantages.

    The upstream is ``advantage * grad log pi(x|h)`` w.r.t. the logits, where
    ``advantage = (J - Jb) - lam^T (g - gb) - xi^T (c - cb)`` with learned
    baselines, or the raw Lagrangian sample when ``use_baseline`` is false.
    """
    lam = state.multipliers(hs)
    if use_baseline:
        J = J - state.value_nets["J"](hs)[:, 0]
        g = g - state.value_nets["g"](hs)
        c = c - state.value_nets["c"](hs)
    advantage = lagrangian_sample(J, g, c, lam, state.xi)
    score = dist.grad_log_prob(state.policy(hs), actions)
    return advantage[:, None] * score, advantage


def model_free_stoch_step(state, env, rng, settings, dist=None):
    """Score-function primal-dual step with learned baselines."""
    dist = CategoricalPolicy(settings.prob_floor) if dist is None else dist
    state.t += 1
    B = settings.stoch_batch
    hs = env.sample_state(rng, size=B)
    logits = state.policy(hs)
    a = dist.sample(logits, rng)
    x = env.action_value(a)
    J, g, c = env.evaluate(x, hs)

    _, clamped = dist.log_prob(logits, a)
    state.prob_floor_hits += clamped
    upstream, _ = score_function_upstream(state, hs, a, J, g, c, dist)
    policy_grads = _scaled(state.policy.backward(hs, upstream).d_params, 1.0 / B)
    mult_grads, xi_new = _dual_step(state, g, c, hs, settings)

    _fit(state, "J", hs, J[:, None], settings.value_lr)
    _fit(state, "g", hs, g, settings.value_lr)
    _fit(state, "c", hs, c, settings.value_lr)
    _apply(state, "policy", policy_grads, settings.policy_lr, Direction.ASCENT)
    _apply(state, "multiplier", mult_grads, settings.multiplier_lr, Direction.ASCENT)
    state.xi = xi_new
    return _info_from_batch(env, x, hs, True)


# --------------------------------------------------------------------------
# outer loop


def run_training(env, settings, mode, iterations, seed, round_id=0, state=None, rng=None):
    """Run one round of ``iterations`` steps; returns ``(state, RoundMetrics)``.

    ``state``/``rng`` may be passed to resume a previous run.
    """
    mode = Mode(mode)
    rng = np.random.default_rng(seed) if rng is None else rng
    if state is None:
        state = init_state(env, settings, rng, mode)
    needs_model = mode is Mode.MODEL_BASED or (
        mode is Mode.MODEL_FREE_DET and settings.oracle_values
    )
    if needs_model and not env.has_value_gradients:
        raise TrainingError(f"{mode.value} training needs a problem with model gradients")

    metrics = RoundMetrics.empty(round_id, iterations, env.n_inst_constraints)
    for i in range(iterations):
        try:
            if mode is Mode.MODEL_BASED:
                info = model_based_step(
                    state, env, env.sample_state(rng, size=settings.batch_size), settings
                )
            elif mode is Mode.MODEL_FREE_DET:
                info = model_free_det_step(state, env, rng, settings)
            else:
                info = model_free_stoch_step(state, env, rng, settings)
        except Exception as exc:
            raise TrainingError(f"round {round_id}, iteration {state.t}: {exc}") from exc
        metrics.set(i, state.t, info)
    if state.skipped_updates:
        logger.info("round %d: %d warm-up iterations without policy updates",
                    round_id, state.skipped_updates)
    return state, metrics


def evaluate_policy(state, h):
    """Noiseless deterministic policy output at gains ``h`` (1-D array)."""
    h = np.asarray(h, dtype=np.float64).reshape(-1, 1)
    return state.act(h)[:, 0]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state, rng=None):
    """Write every parameter, optimizer moment, multiplier and counter to ``.npz``."""
    import json

    arrays = {
        "mode": np.array(state.mode.value),
        "xi": state.xi,
        "t": np.array(state.t),
        "prob_floor_hits": np.array(state.prob_floor_hits),
        "skipped_updates": np.array(state.skipped_updates),
        "action_scale": np.array(state.action_scale),
    }
    for name, net in state.nets().items():
        acts = [layer.activation for layer in net.layers]
        arrays[f"net/{name}/activations"] = np.array(acts)
        for k, p in enumerate(net.params()):
            arrays[f"net/{name}/{k}"] = p
        adam = state.adam[name]
        arrays[f"adam/{name}/t"] = np.array(adam.t)
        arrays[f"adam/{name}/hyper"] = np.array([adam.beta1, adam.beta2, adam.epsilon])
        for k, (m, v) in enumerate(zip(adam.m, adam.v)):
            arrays[f"adam/{name}/m/{k}"] = m
            arrays[f"adam/{name}/v/{k}"] = v
    if state.memory is not None:
        mem = state.memory
        for key in ("h", "x", "J", "g", "c"):
            arrays[f"memory/{key}"] = getattr(mem, key)
        arrays["memory/meta"] = np.array([mem.capacity, mem.size, mem.head])
    if rng is not None:
        arrays["rng"] = np.array(json.dumps(rng.bit_generator.state))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(state, rng_or_None)``."""
    import json

    from .nn import Dense

    with np.load(path, allow_pickle=False) as data:
        names = sorted({k.split("/")[1] for k in data.files if k.startswith("net/")})
        nets, adam = {}, {}
        for name in names:
            acts = [str(a) for a in data[f"net/{name}/activations"]]
            params = [data[f"net/{name}/{k}"].copy() for k in range(2 * len(acts))]
            nets[name] = Mlp(
                Dense(params[2 * i], params[2 * i + 1], acts[i]) for i in range(len(acts))
            )
            b1, b2, eps = data[f"adam/{name}/hyper"]
            adam[name] = AdamState(
                m=[data[f"adam/{name}/m/{k}"].copy() for k in range(len(params))],
                v=[data[f"adam/{name}/v/{k}"].copy() for k in range(len(params))],
                t=int(data[f"adam/{name}/t"]),
                beta1=float(b1), beta2=float(b2), epsilon=float(eps),
            )
        state = TrainerState(
            mode=Mode(str(data["mode"])),
            policy=nets.pop("policy"),
            multiplier=nets.pop("multiplier"),
            xi=data["xi"].copy(),
            value_nets=nets,
            adam=adam,
            t=int(data["t"]),
            prob_floor_hits=int(data["prob_floor_hits"]),
            skipped_updates=int(data["skipped_updates"]),
            action_scale=float(data["action_scale"]),
        )
        if "memory/meta" in data.files:
            capacity, size, head = (int(v) for v in data["memory/meta"])
            h = data["memory/h"]
            mem = ReplayMemory(capacity, h.shape[1], data["memory/x"].shape[1],
                               data["memory/g"].shape[1], data["memory/c"].shape[1])
            for key in ("h", "x", "J", "g", "c"):
                setattr(mem, key, data[f"memory/{key}"].copy())
            mem.size, mem.head = size, head
            state.memory = mem
        rng = None
        if "rng" in data.files:
            rng = np.random.default_rng()
            rng.bit_generator.state = json.loads(str(data["rng"]))
    return state, rng
