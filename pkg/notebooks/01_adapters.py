# %% [markdown]
# # Low-rank adapters on a frozen layer
#
# A frozen weight `W0` gets a trainable update `scale * B @ A`. `B` starts at
# zero so a fresh adapter changes nothing. After training the update can be
# folded back into the weight and the adapter disappears.

# %%
import math

import torch

from facelora import AdaptedLinear, lora_scale, merge

torch.manual_seed(0)

# %%
w0 = torch.randn(12, 12)
layer = AdaptedLinear(w0, rank=2, alpha=16, mode="rank_stabilized")
x = torch.randn(5, 12)
print("fresh adapter is transparent:", torch.equal(layer(x), torch.nn.functional.linear(x, w0)))
print("trainable:", layer.trainable_count(), "of", w0.numel())

# %% [markdown]
# Pretend some training happened, then merge.

# %%
with torch.no_grad():
    layer.adapters[0].B.normal_(0, 0.1)
    merged = layer.to_linear()
    print("max |merged - adapter|:", float((merged(x) - layer(x)).abs().max()))
print("delta rank:", int(torch.linalg.matrix_rank(merge(layer) - w0)))

# %% [markdown]
# ## Scaling
#
# The standard scale is `alpha / r`. The rank-stabilized one is
# `alpha / sqrt(r)`, so their ratio is `sqrt(r)`.

# %%
for r in (1, 4, 16, 64):
    std, rs = lora_scale(16, r, "standard"), lora_scale(16, r, "rank_stabilized")
    print(f"r={r:3d}  standard={std:7.4f}  rank-stabilized={rs:6.3f}  ratio={rs / std:.3f}  sqrt(r)={math.sqrt(r):.3f}")

# %% [markdown]
# With the stock r = alpha = 16 the standard update is scaled by 1 and the
# rank-stabilized one by 4.

# %% [markdown]
# ## Per-head adapters
#
# `heads=h` gives every output block of `d/h` rows its own pair of factors.

# %%
per_head = AdaptedLinear(w0, rank=1, alpha=16, heads=3)
print([tuple(a.B.shape) for a in per_head.adapters], per_head.trainable_count())
