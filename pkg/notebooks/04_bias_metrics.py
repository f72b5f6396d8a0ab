# %% [markdown]
# # Group accuracy spread
#
# Given verification accuracy per demographic group, the average says how
# good a model is and the spread says how uneven. STD uses the n-1
# denominator. SER is the worst group's error over the best group's error.

# %%
import numpy as np

from facelora.eval import bias_report

accs = {"African": 75.25, "Asian": 75.68, "Caucasian": 84.75, "Indian": 78.58}
rep = bias_report(accs)
print(f"avg {rep.average:.3f}  STD {rep.std:.3f}  SER {rep.ser:.3f}")

# %%
# population STD gives 3.79 here, not the usual 4.38
print("ddof=0:", round(float(np.std(list(accs.values()))), 2))

# %% [markdown]
# ## Per-group accuracy from scores
#
# `evaluate` adds this block by itself when every pair lies inside one group.
# Here we fake scores where one group is harder.

# %%
from facelora.eval import bias_from_scores

rng = np.random.default_rng(0)
per_group = {}
for g, sep in {"g0": 2.5, "g1": 2.5, "g2": 1.5, "g3": 2.0}.items():
    labels = np.arange(400) % 2 == 0
    scores = rng.normal(0, 1, 400) + sep * labels
    per_group[g] = (scores, labels, np.arange(400) * 10 // 400)
rep = bias_from_scores(per_group)
for g, a in zip(rep.groups, rep.accuracies):
    print(g, f"{a:.2f}")
print(f"avg {rep.average:.2f}  STD {rep.std:.2f}  SER {rep.ser:.2f}")
