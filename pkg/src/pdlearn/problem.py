"""Constrained functional optimization problems.

A problem draws i.i.d. states ``h`` and scores an action ``x`` through an
objective ``J(x, h)`` (maximized in expectation), instantaneous constraints
``g(x, h) <= 0`` and average constraints ``E[c(x, h)] <= 0``.

All evaluators accept a single sample (``h`` of shape ``(n,)``) or a batch
(``(B, n)``) and return arrays with a matching leading axis.
"""

from __future__ import annotations

import numpy as np

LN2 = np.log(2.0)


class ModelUnavailableError(RuntimeError):
    """Raised when analytic action-gradients are requested in model-free mode."""


def noise_budget(psd_dbm_per_hz, bandwidth_hz, distance_m):
    """Receiver noise power divided by the large-scale path-loss gain, in watts.

    Path loss follows ``35.3 + 37.6 log10(d)`` dB.

    >>> round(noise_budget(-174.0, 20e6, 500.0), 2)
    3.79
    """
    if bandwidth_hz <= 0 or distance_m <= 0:
        raise ValueError("bandwidth and distance must be positive")
    noise_dbm = psd_dbm_per_hz + 10.0 * np.log10(bandwidth_hz)
    noise_w = 10.0 ** (noise_dbm / 10.0) / 1000.0
    path_loss_db = path_loss_db_at(distance_m)
    return float(noise_w / 10.0 ** (-path_loss_db / 10.0))


def path_loss_db_at(distance_m):
    return 35.3 + 37.6 * np.log10(distance_m)


class ConstrainedProblem:
    """Interface shared by all environments.

    Subclasses set the dimensions and flags below and implement
    :meth:`sample_state` and :meth:`evaluate`; environments that expose a
    model also implement :meth:`value_gradient`.
    """

    state_dim = 1
    action_dim = 1
    n_inst_constraints = 0
    n_avg_constraints = 0
    has_value_gradients = False
    # Constraint expressions (not necessarily the objective) are known.
    known_constraints = False
    # Typical action magnitude, used to normalise network outputs.
    action_scale = 1.0

    def sample_state(self, rng, size=None):
        raise NotImplementedError

    def evaluate(self, x, h):
        """Return ``(J, g, c)``."""
        raise NotImplementedError

    def value_gradient(self, x, h):
        """Return ``(dJ/dx, dg/dx, dc/dx)``.

        Shapes (batched): ``(B, m)``, ``(B, m, n_inst)``, ``(B, m, n_avg)``,
        i.e. transposed Jacobians as in ``grad_x g``.
        """
        raise ModelUnavailableError(f"{type(self).__name__} exposes no model gradients")

    def constraint_gradient(self, x, h):
        """Return ``(dg/dx, dc/dx)`` when the constraint expressions are known."""
        _, dg, dc = self.value_gradient(x, h)
        return dg, dc


class PowerControlEnv(ConstrainedProblem):
    """Single-link power control over a Rayleigh fading channel.

    ``h`` is the small-scale power gain (exponential, unit mean), the action
    is the transmit power ``P`` and the objective is ``log2(1 + h P / N)``.
    ``g = [-P, P - p_max]`` encodes ``0 <= P <= p_max`` and ``c = [P - p_bar]``
    encodes the average power budget.

    Negative powers cannot be radiated, so the rate is evaluated at
    ``max(P, 0)``; the violation still shows up in ``g``.
    """

    n_inst_constraints = 2
    n_avg_constraints = 1
    known_constraints = True

    def __init__(self, noise=None, p_max=40.0, p_bar=30.0, *, model_available=True):
        if noise is None:
            noise = noise_budget(-174.0, 20e6, 500.0)
        if noise <= 0:
            raise ValueError(f"noise power must be positive, got {noise}")
        if not 0.0 < p_bar < p_max:
            raise ValueError(f"need 0 < p_bar < p_max, got p_bar={p_bar}, p_max={p_max}")
        self.noise = float(noise)
        self.p_max = float(p_max)
        self.p_bar = float(p_bar)
        self.model_available = bool(model_available)

    @classmethod
    def from_budget(
        cls, p_max=40.0, p_bar=30.0, psd_dbm_per_hz=-174.0, bandwidth_hz=20e6,
        distance_m=500.0, **kwargs,
    ):
        return cls(noise_budget(psd_dbm_per_hz, bandwidth_hz, distance_m), p_max, p_bar, **kwargs)

    @property
    def has_value_gradients(self):
        return self.model_available

    @property
    def action_scale(self):
        return self.p_max

    def __repr__(self):
        return (
            f"{type(self).__name__}(noise={self.noise:.6g}, p_max={self.p_max}, "
            f"p_bar={self.p_bar}, model_available={self.model_available})"
        )

    def sample_state(self, rng, size=None):
        shape = (1,) if size is None else (size, 1)
        return rng.exponential(1.0, size=shape)

    def rate(self, power, h):
        power = np.asarray(power, dtype=np.float64)
        return np.log2(1.0 + np.asarray(h) * np.maximum(power, 0.0) / self.noise)

    def evaluate(self, x, h):
        x = np.asarray(x, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        p = x[..., 0]
        J = self.rate(p, h[..., 0])
        g = np.stack([-p, p - self.p_max], axis=-1)
        c = (p - self.p_bar)[..., None]
        return J, g, c

    def value_gradient(self, x, h):
        if not self.model_available:
            raise ModelUnavailableError("power-control model disabled (model-free mode)")
        x = np.asarray(x, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        p = x[..., 0]
        hh = h[..., 0]
        dJ = np.where(p >= 0.0, hh / (LN2 * (self.noise + hh * np.maximum(p, 0.0))), 0.0)
        dg, dc = self.constraint_gradient(x, h)
        return dJ[..., None], dg, dc

    def constraint_gradient(self, x, h):
        lead = np.shape(x)[:-1]
        dg = np.broadcast_to(np.array([[-1.0, 1.0]]), lead + (1, 2)).copy()
        dc = np.ones(lead + (1, 1))
        return dg, dc


class DiscreteToyEnv(PowerControlEnv):
    """Power control restricted to a finite set of power levels.

    Used with categorical policies; the action is the index of a level and
    :meth:`action_value` maps indices to powers. With ``channel`` set, the
    state is that constant gain and the problem reduces to a bandit.
    """

    def __init__(self, levels, noise=None, p_max=40.0, p_bar=30.0, channel=None):
        super().__init__(noise, p_max, p_bar, model_available=False)
        levels = np.asarray(levels, dtype=np.float64)
        if levels.ndim != 1 or levels.size < 2:
            raise ValueError("need at least two power levels")
        if np.any(levels < 0) or np.any(levels > self.p_max):
            raise ValueError("power levels must lie in [0, p_max]")
        self.levels = levels
        self.channel = None if channel is None else float(channel)

    @property
    def n_actions(self):
        return self.levels.size

    def action_value(self, index):
        return self.levels[np.asarray(index)][..., None]

    def sample_state(self, rng, size=None):
        if self.channel is None:
            return super().sample_state(rng, size)
        shape = (1,) if size is None else (size, 1)
        return np.full(shape, self.channel)

    def action_table(self, h):
        """``(J, g, c)`` for every level at a single state ``h``."""
        x = self.levels[:, None]
        hs = np.broadcast_to(np.asarray(h, dtype=np.float64), (self.n_actions, 1))
        return self.evaluate(x, hs)
