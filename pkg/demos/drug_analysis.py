"""
Drug users on three lists with a referral
=========================================

List 2 refers people to list 3, so nobody can be on list 3 without
first being on list 2.  The Markov model encodes this as an ordered pair
2 -> 3, which removes the impossible cells from the likelihood.
"""

from markovmse import ModelSpec, LogLinearSpec, fit, ll_fit, load_dataset

table = load_dataset("drug")
print(f"{table.n} people observed on {table.k} lists")

# %%
# Three ordered models: no interaction, then mu_12 and mu_13.
for inter in ([], [(1, 2)], [(1, 3)]):
    r = fit(table, ModelSpec.ordered_pair(3, 2, 3, inter))
    name = ",".join(f"{a}{b}" for a, b in inter) or "none"
    flag = "  (estimate diverges)" if r.boundary else ""
    print(f"  {name:5s} AIC {r.aic:6.2f}  N_hat {r.N_hat:10.2f}{flag}")

# %%
# For comparison, the log-linear model with the 23 interaction.
r = ll_fit(table, LogLinearSpec(3, ((2, 3),)))
print(f"log-linear 23: N_hat {r.N_hat:.2f}, AIC {r.aic:.2f}")
