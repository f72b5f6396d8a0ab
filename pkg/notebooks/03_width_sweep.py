# %% [markdown]
# # More identities, better verification
#
# Forty synthetic identities with twenty images each. We train on nested
# subsets of 5, 10, 20 and 40 identities and test on forty identities none of
# the runs saw. Roughly three minutes on one core.

# %%
import numpy as np

from facelora import ViTBackbone, ViTConfig
from facelora.data import SubsetSpec, generate_synthetic_dataset, identity_order, make_pairs, subset
from facelora.eval import evaluate
from facelora.train import PRESET_DESK, Trainer, backbone_embedder, prepare_model

full = generate_synthetic_dataset(40, 20, 56, seed=7)
test = generate_synthetic_dataset(40, 10, 56, seed=7, identity_offset=1000)
pairs = make_pairs(test.manifest, 100, 10, seed=1)
base = ViTBackbone(ViTConfig(), seed=0)

# %%
# subsets are prefixes of one seeded identity order, so each contains the last
order = identity_order(full.manifest, SubsetSpec(40, seed=0))
print(order[:5], "...")

# %%
print(f"frozen: {evaluate(backbone_embedder(base, test.load), pairs).accuracy:.1f}%")
results = {}
for n in (5, 10, 20, 40):
    train = subset(full.manifest, SubsetSpec(n, seed=0))
    model, head = prepare_model(base, n, PRESET_DESK)
    Trainer(model, head, train, full.load, PRESET_DESK).run()
    results[n] = evaluate(backbone_embedder(model, test.load), pairs).accuracy
    print(f"width {n:2d}: {results[n]:.1f}%")

# %%
acc = np.array(list(results.values()))
print("non-decreasing (2-point slack):", bool(np.all(np.diff(acc) >= -2.0)))
