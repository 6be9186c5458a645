"""Closed-form capped water-filling for the power-control problem.

Optimal power as a function of the small-scale gain ``h``::

    P*(h) = 0                    h <= xi N
          = 1/xi - N/h           xi N < h < N / (1/xi - P_max)
          = P_max                h >= N / (1/xi - P_max)

with the water level ``1/xi`` fixed by ``E[P*(h)] = P_bar`` for ``h ~ Exp(1)``.
When ``1/xi <= P_max`` the saturated region is empty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import integrate


class BracketError(ValueError):
    """The average-power target cannot be reached inside the search bracket."""


class Estimate(NamedTuple):
    value: float
    stderr: float


@dataclass(frozen=True)
class WaterFillingSolution:
    xi_star: float
    noise: float
    p_max: float
    p_bar: float

    @property
    def lower_threshold(self):
        return self.xi_star * self.noise

    @property
    def upper_threshold(self):
        level = 1.0 / self.xi_star
        if level <= self.p_max:
            return np.inf
        return self.noise / (level - self.p_max)

    def optimal_power(self, h):
        return optimal_power(self, h)


def optimal_power(sol, h):
    """Capped water-filling power at channel gain(s) ``h``."""
    h = np.asarray(h, dtype=np.float64)
    lo, hi = sol.lower_threshold, sol.upper_threshold
    safe_h = np.where(h > 0, h, 1.0)
    middle = 1.0 / sol.xi_star - sol.noise / safe_h
    out = np.where(h <= lo, 0.0, np.where(h >= hi, sol.p_max, middle))
    return out if out.ndim else float(out)


def _quad_power(xi, noise, p_max):
    sol = WaterFillingSolution(xi, noise, p_max, np.nan)
    lo, hi = sol.lower_threshold, sol.upper_threshold
    level = 1.0 / xi
    middle, _ = integrate.quad(
        lambda h: (level - noise / h) * np.exp(-h), lo, hi, epsabs=1e-12, epsrel=1e-12
    )
    if np.isfinite(hi):
        top, _ = integrate.quad(lambda h: p_max * np.exp(-h), hi, np.inf, epsabs=1e-13)
        middle += top
    return middle


def expected_power(sol, method="quadrature", n_samples=10**6, rng=None):
    """``E[P*(h)]`` for ``h ~ Exp(1)``.

    ``method="quadrature"`` integrates each region adaptively and returns a
    zero standard error; ``method="montecarlo"`` averages ``n_samples`` draws.
    """
    if method == "quadrature":
        return Estimate(_quad_power(sol.xi_star, sol.noise, sol.p_max), 0.0)
    if method == "montecarlo":
        rng = np.random.default_rng() if rng is None else rng
        p = optimal_power(sol, rng.exponential(1.0, size=n_samples))
        return Estimate(float(p.mean()), float(p.std(ddof=1) / np.sqrt(n_samples)))
    raise ValueError(f"unknown method {method!r}")


def expected_rate(sol, method="quadrature", n_samples=10**6, rng=None):
    """``E[log2(1 + h P*(h) / N)]`` for ``h ~ Exp(1)``."""
    if method == "quadrature":
        lo, hi = sol.lower_threshold, sol.upper_threshold
        k = sol.xi_star * sol.noise
        # In the water-filling region 1 + h P*/N = h / (xi N).
        total, _ = integrate.quad(
            lambda h: np.log2(h / k) * np.exp(-h), lo, hi, epsabs=1e-12, epsrel=1e-12
        )
        if np.isfinite(hi):
            top, _ = integrate.quad(
                lambda h: np.log2(1.0 + h * sol.p_max / sol.noise) * np.exp(-h),
                hi, np.inf, epsabs=1e-12,
            )
            total += top
        return Estimate(total, 0.0)
    if method == "montecarlo":
        rng = np.random.default_rng() if rng is None else rng
        h = rng.exponential(1.0, size=n_samples)
        r = np.log2(1.0 + h * optimal_power(sol, h) / sol.noise)
        return Estimate(float(r.mean()), float(r.std(ddof=1) / np.sqrt(n_samples)))
    raise ValueError(f"unknown method {method!r}")


def solve_xi(env, tol=1e-4, low=1e-8, max_iter=500):
    """Bisection on the water level so that ``E[P*] = env.p_bar`` within ``tol``.

    ``env`` needs ``noise``, ``p_max`` and ``p_bar`` attributes.
    """
    noise, p_max, p_bar = env.noise, env.p_max, env.p_bar
    if not p_bar < p_max:
        raise ValueError("average power budget must be below the peak power")
    if tol <= 0:
        raise ValueError("tol must be positive")

    def excess(xi):
        return _quad_power(xi, noise, p_max) - p_bar

    if excess(low) <= 0:
        raise BracketError(
            f"E[P*] at xi={low:g} is already below p_bar={p_bar}; budget unreachable"
        )
    high = 1.0
    while excess(high) >= 0:
        high *= 2.0
        if high > 1e12:
            raise BracketError("could not find an upper bracket for xi")

    for _ in range(max_iter):
        mid = 0.5 * (low + high)
        e = excess(mid)
        if abs(e) <= tol:
            break
        # E[P*] is non-increasing in xi.
        if e > 0:
            low = mid
        else:
            high = mid
    else:
        raise RuntimeError("bisection did not converge")
    return WaterFillingSolution(mid, noise, p_max, p_bar)


@dataclass
class KKTReport:
    h: np.ndarray
    power: np.ndarray
    lambda_low: np.ndarray
    lambda_high: np.ndarray
    max_stationarity: float
    max_slackness: float
    min_multiplier: float
    max_infeasibility: float

    def ok(self, slack_tol=1e-10, neg_tol=1e-12, stat_tol=1e-10):
        return (
            self.max_slackness < slack_tol
            and self.min_multiplier >= -neg_tol
            and self.max_stationarity < stat_tol
            and self.max_infeasibility <= 0.0
        )


def kkt_check(sol, h_samples):
    """Reconstruct the box-constraint multipliers and measure KKT residuals.

    Stationarity is taken in the form ``1/(N/h + P) + l1 - l2 - xi = 0``;
    each multiplier is solved from it in the region where its constraint can
    be active and set to zero elsewhere.
    """
    h = np.asarray(h_samples, dtype=np.float64).ravel()
    p = optimal_power(sol, h)
    xi = sol.xi_star
    marginal = 1.0 / (sol.noise / h + p)
    at_zero = p <= 0.0
    at_cap = p >= sol.p_max
    lam1 = np.where(at_zero, xi - marginal, 0.0)
    lam2 = np.where(at_cap & ~at_zero, marginal - xi, 0.0)
    stationarity = np.abs(marginal + lam1 - lam2 - xi)
    slackness = np.maximum(np.abs(lam1 * p), np.abs(lam2 * (p - sol.p_max)))
    infeasible = np.maximum(-p, p - sol.p_max)
    return KKTReport(
        h=h,
        power=p,
        lambda_low=lam1,
        lambda_high=lam2,
        max_stationarity=float(stationarity.max(initial=0.0)),
        max_slackness=float(slackness.max(initial=0.0)),
        min_multiplier=float(min(lam1.min(initial=0.0), lam2.min(initial=0.0))),
        max_infeasibility=float(infeasible.max(initial=-np.inf)),
    )
