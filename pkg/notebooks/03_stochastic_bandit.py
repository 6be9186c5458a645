# %% [markdown]
# # Stochastic policy on a constrained bandit
#
# With a fixed channel and three power levels the problem is a bandit.
# Under the budget the best distribution puts all mass on the middle level,
# which a categorical policy trained by the score-function trainer finds.

# %%
import numpy as np

from pdlearn import DiscreteToyEnv, Mode, TrainerSettings, init_state, run_training
from pdlearn.trainer import CategoricalPolicy

env = DiscreteToyEnv([0.0, 20.0, 40.0], noise=3.79, p_bar=20.0, channel=1.0)
J, g, c = env.action_table(env.channel)
print("rate per level      ", J)
print("budget use per level", c[:, 0])

# %% [markdown]
# The policy network starts with equal logits. Learned baselines cut the
# variance of the gradient estimate without changing its mean.

# %%
settings = TrainerSettings(policy_lr=1e-2, multiplier_lr=1e-2, xi_lr=1e-3, value_lr=1e-2)
state = init_state(env, settings, np.random.default_rng(0), Mode.MODEL_FREE_STOCH)
dist = CategoricalPolicy()
print("initial probabilities", dist.probs(state.policy(np.ones((1, 1))))[0])

# %%
state, m = run_training(env, settings, Mode.MODEL_FREE_STOCH, 3000, seed=0)
print("final probabilities  ", np.round(dist.probs(state.policy(np.ones((1, 1))))[0], 4))
print("xi                   ", state.xi)
print("mean power, last 500 ", m.power[-500:].mean())

# %% [markdown]
# At the pure middle level the budget holds with equality, so the
# multiplier has nothing left to push against and settles near zero.
