# %% [markdown]
# # Capped water-filling baseline
#
# The optimal power for a Rayleigh fading channel under an average budget
# has a closed form. We solve for the water level and check the budget
# with quadrature and with Monte Carlo.

# %%
import numpy as np

from pdlearn import PowerControlEnv, analytic

env = PowerControlEnv()
sol = analytic.solve_xi(env)
print("noise N       ", env.noise)
print("xi*           ", sol.xi_star)
print("water level   ", 1 / sol.xi_star)
print("thresholds    ", sol.lower_threshold, sol.upper_threshold)

# %% [markdown]
# The policy is zero in deep fades, saturates at the peak power on strong
# channels and follows `1/xi - N/h` in between.

# %%
h = np.array([0.05, 0.1, 0.5, 1.0, 2.0, 5.0])
for hi, p in zip(h, sol.optimal_power(h)):
    print(f"h={hi:5.2f}  P*={p:7.3f}")

# %% [markdown]
# The average power meets the budget and the expected rate is the target
# that the learned policies are compared against.

# %%
quad = analytic.expected_power(sol)
mc = analytic.expected_power(sol, "montecarlo", n_samples=10**6,
                             rng=np.random.default_rng(0))
print("E[P*] quadrature ", quad.value)
print("E[P*] Monte Carlo", mc.value, "+/-", mc.stderr)
print("E[R]             ", analytic.expected_rate(sol).value)

# %%
rep = analytic.kkt_check(sol, np.random.default_rng(1).exponential(size=10_000))
print("max stationarity", rep.max_stationarity)
print("max slackness   ", rep.max_slackness)
print("min multiplier  ", rep.min_multiplier)
