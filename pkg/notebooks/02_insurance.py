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
# # Pricing a small life portfolio
#
# Three contracts pay fixed amounts in the period of death.  The premium
# comes from a per-contract backward recursion; expanding the portfolio into
# its product scenario tree and running the generic recursion gives the same
# number.

# %%
from __future__ import annotations

from divprem import Contract, InsurancePortfolio, h_recursion, hazard_to_tree, premium_closed_form, premium
from divprem.insurance import expected_claims
from divprem.preferences import schedule_from_matrix

# %%
contracts = (
    Contract("young", payments=(1.0, 1.0, 1.0), hazard=(0.01, 0.012, 0.015)),
    Contract("middle", payments=(2.0, 2.0, 2.0), hazard=(0.05, 0.06, 0.07)),
    Contract("old", payments=(1.5, 1.2, 1.0), hazard=(0.15, 0.2, 0.25)),
)
portfolio = InsurancePortfolio(contracts, schedule_from_matrix(0.8, horizon=3))

# %%
table = h_recursion(portfolio)
for cid, row in table.to_dict().items():
    print(f"{cid:7s}", " ".join(f"{v:.6f}" for v in row))

# %% [markdown]
# The closed form, the expected claims and the tree-based premium.

# %%
closed = premium_closed_form(portfolio)
expanded = hazard_to_tree(portfolio)
generic = premium(expanded.tree, expanded.z, portfolio.schedule)
print(f"closed form   {closed:.12f}")
print(f"tree          {generic:.12f}")
print(f"expected      {expected_claims(portfolio):.12f}")
print(f"tree size     {len(expanded.tree)} nodes, {expanded.tree.size(3)} leaves")
