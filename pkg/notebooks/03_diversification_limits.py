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
# # Diversification limits
#
# Spreading a fixed risk over more agents drives the premium down to the
# expected claim at rate 1/n.  The leading correction is half the
# beta-weighted sum of conditional variances of the martingale increments.
# Cutting the horizon into more slots has a similar effect.

# %%
from __future__ import annotations

from divprem import binomial_tree, coin_flip_payoff, expansion_check, time_refinement_sweep
from divprem.tree import up_moves

# %%
tree = binomial_tree(2, p_up=0.3)
z = 2 * up_moves(tree) - 2
report = expansion_check(tree, z, base_alpha=1.0, n_grid=[2**k for k in range(11)])
print(report.to_csv())
print("log-log slope of the gap:", round(report.slope(), 4))
print("residual ratios r(n)/r(2n):", {n: round(r, 3) for n, r in report.ratios().items()})

# %% [markdown]
# ## More time slots
#
# A coin flip revealed in the first step keeps the same law for every number
# of slots m.  This is a discrete analogue of refining time, not the
# continuous-time limit itself.

# %%
refine = time_refinement_sweep(coin_flip_payoff, [1, 2, 3, 4, 6, 8, 12], alpha=1.0)
print(refine.to_csv())
print("gap(12) / gap(1):", round(refine.gaps[-1] / refine.gaps[0], 4))
