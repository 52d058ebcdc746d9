# %% [markdown]
# # The two desk-scale experiments
#
# 1. Memorize ten tumor phantoms with a depth-2 cascade until whole-tumor Dice
#    reaches 0.95 and enhancing-tumor Dice 0.85.
# 2. Train with loss weighted sampling and with uniform weights on the same data,
#    then compare whole-tumor sensitivity on held-out phantoms.
#
# Both take several minutes on a laptop CPU.

# %%
from cunet.experiments import compare_sampling, overfit

result = overfit(target={"wt_dice": 0.95, "et_dice": 0.85}, log=print)
print(f"reached in {result['epochs']} epochs, {result['seconds']:.0f}s")

# %%
trend = compare_sampling(seeds=(0,), log=print)
for seed, r in trend.items():
    print(seed, "lws", round(r["lws"]["wt_sens"], 3), "uniform", round(r["uniform"]["wt_sens"], 3))
