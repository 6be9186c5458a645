"""Acceptance checks; each test reports one PASS/FAIL line.

The two training runs (model-based and model-free, quick preset) are shared
through module fixtures, and the policy-shape check reuses the model-based run.
"""

import time

import numpy as np
import pytest

from pdlearn import analytic, metrics
from pdlearn.cli import cmd_baseline, resolve_config, run_rounds
from pdlearn.nn import ACTIVATIONS, Dense, Mlp
from pdlearn.problem import DiscreteToyEnv, PowerControlEnv
from pdlearn.trainer import (
    CategoricalPolicy,
    Mode,
    NoiseSchedule,
    TrainerSettings,
    evaluate_policy,
    init_state,
    model_based_step,
    model_free_det_step,
    model_free_stoch_step,
    run_training,
)

from .acceptance_log import report
from .helpers import (
    enumerated_gradient,
    fd_input_grad,
    fd_param_grads,
    per_action_gradients,
    rel_err,
    stochastic_fixture,
)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def optimum():
    env = PowerControlEnv()
    sol = analytic.solve_xi(env)
    return sol, analytic.expected_rate(sol).value


def quick_run(mode):
    config = resolve_config(preset="quick", overrides={"mode": mode}, environ={})
    start = time.perf_counter()
    states, _, sink = run_rounds(config)
    elapsed = time.perf_counter() - start
    table = metrics.aggregate(sink.rounds(), config.window)
    return config, states, table, elapsed


@pytest.fixture(scope="module")
def model_based_run():
    return quick_run("model-based")


@pytest.fixture(scope="module")
def model_free_run():
    return quick_run("model-free-det")


def final_window(table):
    return {name: table[name][0][-1] for name in metrics.SERIES}


def settles_at(table, target):
    return metrics.settling_iteration(table["rate"][0], table["iter_end"], target, 0.05)


def test_criterion_1_analytic_baseline(tmp_path):
    start = time.perf_counter()
    out = cmd_baseline(resolve_config(environ={}), tmp_path)
    sol = analytic.solve_xi(PowerControlEnv())
    rep = analytic.kkt_check(sol, np.random.default_rng(0).exponential(size=10_000))
    elapsed = time.perf_counter() - start
    ok = (
        out["xi_star"] > 0
        and abs(out["expected_power"] - 30.0) <= 1e-3
        and rep.max_slackness < 1e-10
        and rep.min_multiplier >= -1e-12
        and elapsed < 5.0
    )
    assert report(
        1, "analytic baseline", ok,
        f"xi*={out['xi_star']:.6g}, |E[P*]-30|={abs(out['expected_power'] - 30):.1e}, "
        f"slackness={rep.max_slackness:.1e}, min multiplier={rep.min_multiplier:.1e}, "
        f"{elapsed:.2f}s",
    )


def _random_mlp(rng):
    depth = int(rng.integers(1, 5))
    sizes = [int(rng.integers(1, 6))] + [int(rng.integers(1, 8)) for _ in range(depth)]
    acts = rng.choice(ACTIVATIONS, size=depth)
    net = Mlp([
        Dense(rng.normal(size=(sizes[k + 1], sizes[k])), rng.normal(size=sizes[k + 1]),
              str(acts[k]))
        for k in range(depth)
    ])
    return net, rng.normal(size=sizes[0]), rng.normal(size=sizes[-1])


def _near_relu_kink(net, x, margin=1e-3):
    # central differences straddling a ReLU kink are not a valid oracle
    a = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        z = layer.weight @ a + layer.bias
        if layer.activation == "relu" and np.any(np.abs(z) < margin):
            return True
        a = Mlp([layer])(a)
    return False


def test_criterion_2_gradient_engine():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, tested = 0.0, 0
    while tested < 100:
        net, x, up = _random_mlp(rng)
        if _near_relu_kink(net, x):
            continue
        grads = net.backward(x, up)
        worst = max(worst, rel_err(grads.d_input, fd_input_grad(net, x, up)))
        for g, fd in zip(grads.d_params, fd_param_grads(net, x, up)):
            worst = max(worst, rel_err(g, fd))
        tested += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 10.0
    assert report(2, "gradient engine", ok,
                  f"{tested} nets, max relative error {worst:.2e}, {elapsed:.2f}s")


def test_criterion_3_model_based_convergence(model_based_run, optimum):
    config, _, table, elapsed = model_based_run
    _, opt = optimum
    f = final_window(table)
    viol = f["viol_lo"] + f["viol_hi"]
    ratio = f["rate"] / opt
    ok = abs(ratio - 1) <= 0.03 and viol < 0.1 and f["power"] <= 30.5 and elapsed < 600
    assert report(
        3, "model-based convergence", ok,
        f"{config.rounds}x{config.iters} iters, rate/E[R]={ratio:.4f}, "
        f"violation={viol:.4f} W, E[P]={f['power']:.3f} W, {elapsed:.0f}s",
    )


def test_criterion_4_model_free_convergence(model_free_run, model_based_run, optimum):
    config, _, table, elapsed = model_free_run
    _, opt = optimum
    f = final_window(table)
    viol = f["viol_lo"] + f["viol_hi"]
    ratio = f["rate"] / opt
    free_settle = settles_at(table, opt)
    based_settle = settles_at(model_based_run[2], opt)
    close = (free_settle is not None and based_settle is not None
             and free_settle <= 2 * based_settle)
    ok = (abs(ratio - 1) <= 0.05 and viol < 0.1 and f["power"] <= 30.5 and close
          and elapsed < 1200)
    assert report(
        4, "model-free convergence", ok,
        f"rate/E[R]={ratio:.4f}, violation={viol:.4f} W, E[P]={f['power']:.3f} W, "
        f"within 5% from iteration {free_settle} (model-based {based_settle}), {elapsed:.0f}s",
    )


def test_criterion_5_policy_shape(model_based_run, optimum):
    _, states, _, _ = model_based_run
    sol, _ = optimum
    h = np.linspace(-np.log(0.9), -np.log(0.1), 400)
    curves = np.array([evaluate_policy(states[r], h) for r in sorted(states)])
    target = analytic.optimal_power(sol, h)
    mae = float(np.mean(np.abs(curves.mean(axis=0) - target)))
    per_round = np.mean(np.abs(curves - target), axis=1)
    ok = mae <= 2.0
    assert report(
        5, "policy shape", ok,
        f"MAE of the round-averaged policy {mae:.3f} W on h in [{h[0]:.3f}, {h[-1]:.3f}] "
        f"(per round {np.round(per_round, 2).tolist()})",
    )


def test_criterion_6_substitution_equivalence():
    env = PowerControlEnv()
    s_mb = TrainerSettings()
    s_mf = TrainerSettings(oracle_values=True)
    free = init_state(env, s_mf, np.random.default_rng(6), Mode.MODEL_FREE_DET)
    based = init_state(env, s_mb, np.random.default_rng(6), Mode.MODEL_BASED)
    rng = np.random.default_rng(7)
    identical, updates = True, 0
    for _ in range(100):
        info = model_free_det_step(free, env, rng, s_mf)
        if info.updated:
            model_based_step(based, env, info.batch_h, s_mb)
            updates += 1
        for a, b in zip(free.policy.params() + free.multiplier.params(),
                        based.policy.params() + based.multiplier.params()):
            identical &= np.array_equal(a, b)
        identical &= np.array_equal(free.xi, based.xi)
    assert report(6, "substitution equivalence", identical,
                  f"100 steps ({updates} updates after warm-up), bit-identical={identical}")


def brute_force_distribution(env, step=0.005):
    """Best action distribution on a simplex grid under the average budget."""
    J, g, c = env.action_table(env.channel)
    best, best_p = -np.inf, None
    grid = np.arange(0.0, 1.0 + step / 2, step)
    for p0 in grid:
        for p1 in grid[grid <= 1.0 - p0 + 1e-12]:
            p = np.array([p0, p1, max(1.0 - p0 - p1, 0.0)])
            if p @ c[:, 0] <= 1e-12 and np.all(g <= 0) and p @ J > best:
                best, best_p = p @ J, p
    return best_p


def test_criterion_7_stochastic_trainer():
    start = time.perf_counter()
    env = DiscreteToyEnv([0.0, 20.0, 40.0], noise=3.79, p_max=40.0, p_bar=20.0, channel=1.0)
    _, state, h, _ = stochastic_fixture(env)
    dist = CategoricalPolicy()

    # (a) sample mean of per-sample score-function gradients vs enumeration
    n = 10**5
    actions = dist.sample(np.repeat(state.policy(h), n, axis=0), np.random.default_rng(70))
    counts = np.bincount(actions, minlength=env.n_actions)
    G = per_action_gradients(state, env, h, dist, False)
    mean = counts @ G / n
    se = np.sqrt(counts @ (G - mean) ** 2 / (n - 1) / n)
    exact = enumerated_gradient(env, state, h)
    live = se > 0
    z = np.abs(mean - exact)[live] / se[live]
    ok_a = bool(np.all(z <= 3) and np.allclose(mean[~live], exact[~live], atol=1e-9))

    # (b) variance with exact baselines vs without, 1e4 sampled steps
    sub = dist.sample(np.repeat(state.policy(h), 10**4, axis=0), np.random.default_rng(71))
    k = np.bincount(sub, minlength=env.n_actions)

    def total_variance(G):
        m = k @ G / k.sum()
        return float(np.sum(k @ (G - m) ** 2) / (k.sum() - 1))

    v_with = total_variance(per_action_gradients(state, env, h, dist, True))
    v_without = total_variance(G)
    ok_b = v_with <= v_without

    # (c) training reaches the brute-force optimum
    target = brute_force_distribution(env)
    tvs = []
    for seed in range(3):
        trained, _ = run_training(env, TrainerSettings(), Mode.MODEL_FREE_STOCH, 4000, seed=seed)
        learned = CategoricalPolicy.probs(trained.policy(h))[0]
        tvs.append(0.5 * float(np.abs(learned - target).sum()))
    ok_c = max(tvs) < 0.05
    elapsed = time.perf_counter() - start
    ok = ok_a and ok_b and ok_c and elapsed < 120
    assert report(
        7, "stochastic trainer", ok,
        f"(a) max |z|={z.max():.2f} over {live.sum()} coordinates; "
        f"(b) variance {v_with:.3g} with vs {v_without:.3g} without baselines; "
        f"(c) optimum {np.round(target, 3).tolist()}, TV per seed {np.round(tvs, 4).tolist()}; "
        f"{elapsed:.0f}s",
    )


def test_criterion_8_projection_invariants():
    rng = np.random.default_rng(8)
    h_grid = np.concatenate([np.linspace(0.0, 10.0, 101), [1e-6, 50.0]])[:, None]
    steps, violations, largest_xi = 0, 0, 0.0
    modes = list(Mode)
    for case in range(40):
        mode = modes[case % 3]
        env = (DiscreteToyEnv([0.0, 20.0, 40.0], noise=3.79, p_max=40.0, p_bar=20.0)
               if mode is Mode.MODEL_FREE_STOCH else PowerControlEnv())
        lrs = 10.0 ** rng.uniform(-6, 1, size=4)
        s = TrainerSettings(policy_lr=lrs[0], multiplier_lr=lrs[1], xi_lr=lrs[2],
                            value_lr=lrs[3], batch_size=4,
                            noise=NoiseSchedule(10.0, 100, 100))
        state = init_state(env, s, rng, mode)
        for _ in range(250):
            if mode is Mode.MODEL_BASED:
                model_based_step(state, env, env.sample_state(rng, size=4), s)
            elif mode is Mode.MODEL_FREE_DET:
                model_free_det_step(state, env, rng, s)
            else:
                model_free_stoch_step(state, env, rng, s)
            steps += 1
            violations += int(np.any(state.xi < 0))
            violations += int(np.any(state.multipliers(h_grid) < 0))
            largest_xi = max(largest_xi, float(state.xi.max()))
    ok = violations == 0 and steps >= 10_000
    assert report(8, "projection/positivity", ok,
                  f"{steps} steps, {violations} negative xi/lambda observations, "
                  f"largest xi {largest_xi:.3g}")
