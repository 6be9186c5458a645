"""Command-line entry point: configuration, experiment orchestration and outputs.

Subcommands::

    pdlearn train    [--config F] [--preset quick|paper] [--out DIR] [--seed N] [--mode M]
    pdlearn baseline [...]          analytic water-filling solution and its policy curve
    pdlearn eval     --checkpoint P learned policy curve from saved round(s)
    pdlearn check                   quick invariant self-checks

Configuration is a flat TOML file. Values are resolved as
defaults < preset < file < ``PDLEARN_<KEY>`` environment variables < flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analytic, metrics
from .nn import Mlp, multiplier_output_clamp
from .problem import DiscreteToyEnv, PowerControlEnv
from .trainer import (
    CategoricalPolicy,
    Mode,
    NoiseSchedule,
    TrainerSettings,
    load_checkpoint,
    run_training,
    save_checkpoint,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("pdlearn")

ENV_PREFIX = "PDLEARN_"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "model-based"
    # environment
    p_max: float = 40.0
    p_bar: float = 30.0
    psd_dbm_hz: float = -174.0
    bandwidth_hz: float = 20e6
    distance_m: float = 500.0
    # power levels of the stochastic (categorical) policy
    levels: list = field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0, 40.0])
    # constant channel gain for the stochastic mode; 0 means Rayleigh fading
    fixed_channel: float = 0.0
    # networks and optimizer
    policy_hidden: list = field(default_factory=lambda: [50, 40, 30])
    multiplier_hidden: list = field(default_factory=lambda: [50, 40, 30])
    value_hidden: list = field(default_factory=lambda: [200, 150])
    value_activation: str = "relu"
    policy_lr: float = 1e-3
    multiplier_lr: float = 1e-3
    xi_lr: float = 1e-4
    value_lr: float = 5e-3
    batch_size: int = 32
    policy_init: float = 10.0
    noise_eps: float = 10.0
    noise_hold: int = 5000
    noise_decay: int = 15000
    replay_capacity: int = 100_000
    clamp_grad: str = "projected"
    dual_source: str = "policy"
    stoch_batch: int = 1
    prob_floor: float = 1e-12
    # experiment
    rounds: int = 50
    iters: int = 100_000
    seed: int = 0
    window: int = 500
    # 0 uses every available CPU
    workers: int = 0
    curve_points: int = 200
    curve_quantile: float = 0.999

    def __post_init__(self):
        try:
            Mode(self.mode)
        except ValueError:
            raise ConfigError(
                f"mode: expected one of {[m.value for m in Mode]}, got {self.mode!r}"
            ) from None
        for key in ("policy_lr", "multiplier_lr", "xi_lr", "value_lr"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key}: learning rates must be positive")
        if not 0 < self.p_bar < self.p_max:
            raise ConfigError(f"p_bar: need 0 < p_bar < p_max, got {self.p_bar} vs {self.p_max}")
        for key in ("batch_size", "stoch_batch", "rounds", "window", "replay_capacity",
                    "curve_points"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be at least 1")
        for key in ("iters", "noise_hold", "noise_decay", "workers", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be non-negative")
        if self.bandwidth_hz <= 0 or self.distance_m <= 0:
            raise ConfigError("bandwidth_hz/distance_m: must be positive")
        if self.noise_eps < 0:
            raise ConfigError("noise_eps: must be non-negative")
        if not 0 < self.curve_quantile < 1:
            raise ConfigError("curve_quantile: must lie in (0, 1)")
        if self.fixed_channel < 0:
            raise ConfigError("fixed_channel: must be non-negative")
        if len(self.levels) < 2 or min(self.levels) < 0 or max(self.levels) > self.p_max:
            raise ConfigError("levels: need at least two levels within [0, p_max]")
        try:
            self.settings()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # derived objects -----------------------------------------------------

    def noise_power(self):
        from .problem import noise_budget

        return noise_budget(self.psd_dbm_hz, self.bandwidth_hz, self.distance_m)

    def make_env(self):
        if Mode(self.mode) is Mode.MODEL_FREE_STOCH:
            channel = self.fixed_channel if self.fixed_channel > 0 else None
            return DiscreteToyEnv(self.levels, self.noise_power(), self.p_max, self.p_bar,
                                  channel=channel)
        return PowerControlEnv(self.noise_power(), self.p_max, self.p_bar,
                               model_available=Mode(self.mode) is Mode.MODEL_BASED)

    def settings(self):
        return TrainerSettings(
            policy_hidden=tuple(self.policy_hidden),
            multiplier_hidden=tuple(self.multiplier_hidden),
            value_hidden=tuple(self.value_hidden),
            value_activation=self.value_activation,
            policy_lr=self.policy_lr,
            multiplier_lr=self.multiplier_lr,
            xi_lr=self.xi_lr,
            value_lr=self.value_lr,
            batch_size=self.batch_size,
            policy_init=self.policy_init,
            noise=NoiseSchedule(self.noise_eps, self.noise_hold, self.noise_decay),
            replay_capacity=self.replay_capacity,
            clamp_grad=self.clamp_grad,
            dual_source=self.dual_source,
            stoch_batch=self.stoch_batch,
            prob_floor=self.prob_floor,
        )

    def n_workers(self):
        return self.workers or os.cpu_count() or 1


PRESETS = {
    "paper": {},
    "quick": {"rounds": 5, "iters": 20_000, "noise_hold": 1000, "noise_decay": 3000},
}

_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()


def _coerce(key, value):
    """Check ``value`` against the type of the default for ``key``."""
    if key not in _FIELDS:
        raise ConfigError(f"{key}: unknown configuration key")
    default = getattr(_DEFAULTS, key)
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
        if ok:
            kind = type(default[0])
            if kind is int and not all(isinstance(v, int) for v in value):
                ok = False
            value = [kind(v) for v in value] if ok else value
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(
            f"{key}: expected {type(default).__name__}, got {value!r}"
        )
    return value


def _parse_env_value(raw):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def resolve_config(path=None, preset=None, overrides=None, environ=None):
    """Merge defaults, preset, file, environment and explicit overrides."""
    values = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}")
        values.update(PRESETS[preset])
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: parse error: {exc}") from None
        for key, value in data.items():
            if isinstance(value, dict):
                raise ConfigError(f"{key}: nested tables are not supported (flat keys only)")
            values[key] = value
    environ = os.environ if environ is None else environ
    for name, raw in environ.items():
        if name.startswith(ENV_PREFIX):
            values[name[len(ENV_PREFIX):].lower()] = _parse_env_value(raw)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    coerced = {k: _coerce(k, v) for k, v in values.items()}
    return ExperimentConfig(**coerced)


def load_config(path):
    """Read a flat TOML file; missing keys take their defaults, unknown keys fail."""
    return resolve_config(path, environ={})


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_config(config, path):
    """Write the resolved configuration as flat TOML, readable by :func:`load_config`."""
    lines = [f"{k} = {_toml_value(getattr(config, k))}" for k in _FIELDS]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# experiment pieces


def _round_rngs(seed, rounds):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(rounds)]


def _train_round(args):
    config, round_id, rng = args
    state, round_metrics = run_training(
        config.make_env(), config.settings(), config.mode, config.iters,
        seed=None, round_id=round_id, rng=rng,
    )
    return round_id, state, round_metrics, rng


def run_rounds(config):
    """Train every round (in parallel when allowed); returns states, rngs and the sink."""
    jobs = [(config, r, rng) for r, rng in enumerate(_round_rngs(config.seed, config.rounds))]
    sink = metrics.MetricsSink()
    states, rngs = {}, {}
    workers = min(config.n_workers(), config.rounds)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_round, jobs))
    else:
        results = [_train_round(job) for job in jobs]
    for round_id, state, round_metrics, rng in results:
        sink.append(round_metrics)
        states[round_id], rngs[round_id] = state, rng
    return states, rngs, sink


def curve_grid(config):
    """Channel gains from 0 to the configured quantile of the unit exponential."""
    return np.linspace(0.0, -np.log1p(-config.curve_quantile), config.curve_points)


def policy_power(state, h, env=None):
    """Noiseless power of a learned policy at gains ``h``.

    Deterministic policies return their output; categorical ones return the
    expected power under the action distribution.
    """
    h = np.asarray(h, dtype=np.float64).reshape(-1, 1)
    if state.mode is Mode.MODEL_FREE_STOCH:
        if env is None:
            raise ValueError("a stochastic policy needs its environment's levels")
        return CategoricalPolicy.probs(state.policy(h)) @ env.levels
    return state.act(h)[:, 0]


def analytic_solution(config):
    env = PowerControlEnv(config.noise_power(), config.p_max, config.p_bar)
    return env, analytic.solve_xi(env)


# --------------------------------------------------------------------------
# subcommands


def cmd_baseline(config, out, monte_carlo=0):
    env, sol = analytic_solution(config)
    power = analytic.expected_power(sol).value
    rate = analytic.expected_rate(sol).value
    print(f"noise power N        = {env.noise:.6f} W")
    print(f"xi*                  = {sol.xi_star:.9g}  (natural-log objective)")
    print(f"xi* / ln 2           = {sol.xi_star / np.log(2):.9g}  (bit-rate objective)")
    print(f"water level 1/xi*    = {1 / sol.xi_star:.6f} W")
    print(f"thresholds           = {sol.lower_threshold:.6f}, {sol.upper_threshold:.6f}")
    print(f"E[P*]                = {power:.9f} W")
    print(f"E[R(P*, h)]          = {rate:.9f} bit/s/Hz")
    if monte_carlo:
        est = analytic.expected_rate(sol, "montecarlo", n_samples=monte_carlo,
                                     rng=np.random.default_rng(config.seed))
        z = (est.value - rate) / est.stderr
        print(f"E[R] Monte Carlo     = {est.value:.6f} +- {est.stderr:.2g} ({z:+.2f} SE)")
    out.mkdir(parents=True, exist_ok=True)
    h = curve_grid(config)
    metrics.write_policy_curve_csv(out / "policy_curve.csv", h, analytic.optimal_power(sol, h))
    return {"xi_star": sol.xi_star, "expected_power": power, "expected_rate": rate}


def cmd_train(config, out):
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config_echo.toml")
    states, rngs, sink = run_rounds(config)
    rounds = sink.rounds()
    metrics.write_raw_csv(out / "metrics_raw.csv", rounds)
    table = metrics.aggregate(rounds, config.window)
    metrics.write_windowed_csv(out / "metrics_windowed.csv", table)

    env = config.make_env()
    h = curve_grid(config)
    learned = np.mean([policy_power(states[r], h, env) for r in sorted(states)], axis=0)
    _, sol = analytic_solution(config)
    metrics.write_policy_curve_csv(out / "policy_curve.csv", h,
                                   analytic.optimal_power(sol, h), learned)
    ck = out / "checkpoint"
    ck.mkdir(exist_ok=True)
    for r in sorted(states):
        save_checkpoint(ck / f"round_{r:03d}.npz", states[r], rngs[r])

    summary = {"windows": len(table["iter_end"])}
    if summary["windows"]:
        opt = analytic.expected_rate(sol).value
        final = {name: table[name][0][-1] for name in metrics.SERIES}
        se = table["rate"][1][-1]
        summary.update(final, rate_ratio=final["rate"] / opt)
        print(f"mode {config.mode}: {config.rounds} round(s) x {config.iters} iterations")
        print(f"final-window rate    = {final['rate']:.4f} +- {se:.4f} "
              f"(analytic {opt:.4f}, ratio {final['rate'] / opt:.4f})")
        print(f"final-window viol    = {final['viol_lo']:.4f} (P<0), "
              f"{final['viol_hi']:.4f} (P>Pmax) W")
        print(f"final-window E[P]    = {final['power']:.3f} W (budget {config.p_bar})")
    else:
        print("no complete window; nothing to summarise")
    skipped = [states[r].skipped_updates for r in sorted(states)]
    if any(skipped):
        print(f"warm-up iterations without updates per round: {skipped[0]}")
    return summary


def cmd_eval(config, checkpoint, out):
    checkpoint = Path(checkpoint)
    files = sorted(checkpoint.glob("*.npz")) if checkpoint.is_dir() else [checkpoint]
    if not files:
        raise FileNotFoundError(f"no checkpoints under {checkpoint}")
    h = curve_grid(config)
    curves = []
    for f in files:
        state, _ = load_checkpoint(f)
        env = config.make_env() if state.mode is Mode.MODEL_FREE_STOCH else None
        curves.append(policy_power(state, h, env))
    _, sol = analytic_solution(config)
    optimal = analytic.optimal_power(sol, h)
    learned = np.mean(curves, axis=0)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_policy_curve_csv(out / "policy_curve.csv", h, optimal, learned)
    lo, hi = -np.log(0.9), -np.log(0.1)
    bulk = (h >= lo) & (h <= hi)
    mae = float(np.mean(np.abs(learned[bulk] - optimal[bulk])))
    print(f"{len(files)} checkpoint(s); MAE vs P* on the 10-90% fading bulk = {mae:.3f} W")
    return {"mae": mae}


def _check_gradients(rng):
    from .nn import Dense

    worst = 0.0
    for _ in range(20):
        sizes = [int(rng.integers(1, 5))] + [int(rng.integers(2, 7)) for _ in range(3)]
        acts = rng.choice(["relu", "identity", "sigmoid", "tanh"], size=3)
        net = Mlp([Dense(rng.normal(size=(sizes[k + 1], sizes[k])), rng.normal(size=sizes[k + 1]),
                         str(acts[k])) for k in range(3)])
        x, up = rng.normal(size=sizes[0]), rng.normal(size=sizes[-1])
        got = net.backward(x, up).d_input
        fd = np.array([(up @ net(x + e) - up @ net(x - e)) / 2e-5
                       for e in np.eye(sizes[0]) * 1e-5])
        worst = max(worst, float(np.max(np.abs(got - fd)) / max(np.max(np.abs(fd)), 1e-5)))
    return worst < 1e-5, f"max relative input-gradient error {worst:.2e}"


def _check_kkt(config, rng):
    _, sol = analytic_solution(config)
    rep = analytic.kkt_check(sol, rng.exponential(size=10_000))
    return rep.ok(), f"slackness {rep.max_slackness:.1e}, min multiplier {rep.min_multiplier:.1e}"


def _check_projection(config, rng):
    # a tight budget and oversized dual steps push xi against its bound
    env = PowerControlEnv(config.noise_power(), config.p_max, config.p_max / 20)
    settings = dataclasses.replace(config.settings(), xi_lr=1.0, multiplier_lr=1.0,
                                   policy_lr=0.1)
    state = None
    hs = np.linspace(0, 10, 101)[:, None]
    lowest = np.inf
    for _ in range(100):
        state, _ = run_training(env, settings, Mode.MODEL_BASED, 3, seed=None, rng=rng,
                                state=state)
        lam = multiplier_output_clamp(state.multiplier(hs))
        lowest = min(lowest, float(state.xi.min()), float(lam.min()))
    return lowest >= 0, f"smallest xi or multiplier seen {lowest:.3g}"


def cmd_check(config):
    rng = np.random.default_rng(config.seed)
    checks = {
        "gradient engine": lambda: _check_gradients(rng),
        "analytic KKT": lambda: _check_kkt(config, rng),
        "multiplier projection": lambda: _check_projection(config, rng),
    }
    passed = True
    for name, fn in checks.items():
        ok, detail = fn()
        passed &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return passed


# --------------------------------------------------------------------------
# argument handling


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat TOML configuration file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named parameter preset")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument("--mode", choices=[m.value for m in Mode], help="trainer")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pdlearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="run training rounds and write metrics")
    base = sub.add_parser("baseline", parents=[common], help="analytic optimum")
    base.add_argument("--monte-carlo", type=int, default=0, metavar="N",
                      help="re-estimate E[R] with N Monte Carlo samples")
    ev = sub.add_parser("eval", parents=[common], help="policy curve from checkpoints")
    ev.add_argument("--checkpoint", type=Path, required=True,
                    help="checkpoint file or directory of round checkpoints")
    sub.add_parser("check", parents=[common], help="run invariant self-checks")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args.config, args.preset,
                                {"seed": args.seed, "mode": args.mode})
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "baseline":
            cmd_baseline(config, args.out, args.monte_carlo)
        elif args.command == "train":
            cmd_train(config, args.out)
        elif args.command == "eval":
            cmd_eval(config, args.checkpoint, args.out)
        elif args.command == "check":
            if not cmd_check(config):
                return EXIT_FAILURE
    except Exception as exc:  # reported, not swallowed: nonzero exit
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
