"""Finite-difference oracles shared by the test modules."""

import numpy as np


def rel_err(a, b, floor=1e-5):
    # central differences carry ~1e-11 absolute roundoff, so gradients that
    # vanish (saturated units) are compared against ``floor`` instead
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def fd_input_grad(net, x, up, step=1e-5):
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (up @ net(xp) - up @ net(xm)) / (2 * step)
    return out


def fd_param_grads(net, x, up, step=1e-5):
    grads = []
    for p in net.params():
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + step
            plus = up @ net(x)
            p[i] = old - step
            minus = up @ net(x)
            p[i] = old
            fd[i] = (plus - minus) / (2 * step)
        grads.append(fd)
    return grads


# --------------------------------------------------------------------------
# score-function oracles on a constant-channel bandit


def expected_lagrangian(policy, h, table, lam, xi):
    from pdlearn.trainer import CategoricalPolicy, lagrangian_sample

    J, g, c = table
    p = CategoricalPolicy.probs(policy(h))[0]
    return float(p @ lagrangian_sample(J, g, c, lam, xi))


def per_action_gradients(state, env, h, dist, use_baseline):
    """Row ``a``: the per-sample policy gradient when action ``a`` is drawn."""
    from pdlearn.trainer import score_function_upstream

    J, g, c = env.action_table(h[0, 0])
    grads = []
    for a in range(env.n_actions):
        up, _ = score_function_upstream(
            state, h, np.array([a]), J[a:a + 1], g[a:a + 1], c[a:a + 1], dist, use_baseline
        )
        grads.append(np.concatenate([d.ravel() for d in state.policy.backward(h, up).d_params]))
    return np.array(grads)


def enumerated_gradient(env, state, h, step=1e-6):
    """Finite differences of the enumerated expected Lagrangian in the policy parameters."""
    table = env.action_table(h[0, 0])
    lam, xi = state.multipliers(h)[0], state.xi
    out = []
    for prm in state.policy.params():
        for i in np.ndindex(prm.shape):
            old = prm[i]
            prm[i] = old + step
            up = expected_lagrangian(state.policy, h, table, lam, xi)
            prm[i] = old - step
            down = expected_lagrangian(state.policy, h, table, lam, xi)
            prm[i] = old
            out.append((up - down) / (2 * step))
    return np.array(out)


def stochastic_fixture(env, seed=3):
    """A categorical policy away from uniform, active multipliers and exact baselines."""
    from pdlearn.trainer import CategoricalPolicy, Mode, TrainerSettings, init_state

    state = init_state(env, TrainerSettings(), np.random.default_rng(seed), Mode.MODEL_FREE_STOCH)
    state.policy.layers[-1].bias[:] = np.linspace(0.4, -0.3, env.n_actions)
    state.multiplier.layers[-1].bias[:] = [0.02, 0.03]
    state.xi = np.array([0.08])
    h = env.sample_state(np.random.default_rng(0), size=1)
    p = CategoricalPolicy.probs(state.policy(h))[0]
    J, g, c = env.action_table(h[0, 0])
    for name, values in (("J", p @ J), ("g", p @ g), ("c", p @ c)):
        last = state.value_nets[name].layers[-1]
        last.weight[:] = 0.0
        last.bias[:] = values
    return env, state, h, p
