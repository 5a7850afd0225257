# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Premiums and optimal allocations on a scenario tree
#
# A two-period binomial tree carries a risk `Z` that pays the number of up
# moves.  Two agents share it over three time slots.  We compute the
# indifference premium, the optimal allocation and the dual martingale that
# certifies it.

# %%
from __future__ import annotations

import numpy as np

from divprem import binomial_tree, premium_process, schedule_from_matrix, valuate
from divprem.tree import conditional_process, is_martingale, up_moves

np.set_printoptions(precision=6, suppress=True)

# %%
tree = binomial_tree(2, p_up=0.4)
z = up_moves(tree)
schedule = schedule_from_matrix([[1.0, 2.0, 1.5], [2.0, 1.0, 3.0]])
print("aggregate alpha_s:", schedule.aggregate)
print("modified beta_t:  ", schedule.beta)

# %% [markdown]
# ## Premium process
#
# The premium exceeds the conditional mean at every node; the difference is
# the risk loading.

# %%
h = premium_process(tree, z, schedule)
mean = conditional_process(tree, z)
for t in range(tree.horizon + 1):
    for node, hv, mv in zip(tree.ids_at(t), h.at(t), mean.at(t)):
        print(f"t={t} {node:6s} H={hv:.6f}  E[Z|F_t]={mv:.6f}  loading={hv - mv:.6f}")

# %% [markdown]
# ## Allocation and certificate
#
# The allocation sums to `Z` along every path and the common marginal
# utility `exp(-alpha_s X_s)` is a martingale.

# %%
res = valuate(tree, z, schedule)
alloc = res.allocation
print("path sums:", alloc.total.path_sum(), "target:", z)
print("martingale check:", is_martingale(tree, alloc.martingale, tol=1e-10))
for name, value in res.diagnostics.items():
    print(f"{name:22s} {value:.2e}")

# %%
for i, agent in enumerate(alloc.agents):
    print(f"agent {i}:", [np.round(agent.at(s), 6).tolist() for s in agent.times])
