# %% [markdown]
# Diversity and concentration on hand-made attention maps
#
# Each row of an attention matrix is one submodule's map over a 4x4 grid,
# flattened row-major, so contiguous quarters of a row are horizontal stripes.

# %%
import numpy as np

from cmma.losses import (concentration_loss, concentration_matrix, diversity_loss,
                         flatten_attention, mean_pairwise_hellinger)
from cmma.numerics import as_extended, finite_diff_check

K, H, W = 4, 4, 4

# %% one submodule per stripe: no overlap, every submodule inside "its" stripe
striped = np.zeros((K, H, W))
for k in range(K):
    striped[k, k] = 1.0 / W
A = flatten_attention(striped)
print("striped   div", diversity_loss(A).output, " con", concentration_loss(concentration_matrix(A).output).output)

# %% all submodules uniform: maximal overlap, mass spread over every stripe
A = np.full((K, H * W), 1.0 / (H * W))
print("uniform   div", diversity_loss(A).output, "(K(K-1) =", K * (K - 1), ")",
      " con", concentration_loss(concentration_matrix(A).output).output, "(K ln K =", K * np.log(K), ")")

# %% disjoint but in the wrong stripes: diversity is happy, concentration is not
A = flatten_attention(striped[::-1].copy())
print("reversed  div", diversity_loss(A).output,
      " con", concentration_loss(concentration_matrix(A).output).output)

# %%
# The reversed case is the reason for the concentration term: diversity only
# asks submodules to differ, while the stripe matrix ties submodule k to band k.
rng = np.random.default_rng(0)
logits = rng.normal(size=(K, H * W))
A = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
print("random    hellinger", round(mean_pairwise_hellinger(A), 4))
print(np.round(concentration_matrix(A).output, 3))

# %% gradients: both losses backpropagate; check against central differences
def div_and_grad(x):
    rec = diversity_loss(x)
    return rec.output, rec.backward(np.ones_like(rec.output))[0]

def con_and_grad(x):
    cm = concentration_matrix(x)
    cl = concentration_loss(cm.output)
    return cl.output, cm.backward(cl.backward(np.ones_like(cl.output))[0])[0]

# extended precision keeps rounding noise below the 1e-8 relative floor
x = as_extended(A)
print("div max rel err", finite_diff_check(div_and_grad, x, step=1e-7))
print("con max rel err", finite_diff_check(con_and_grad, x, step=1e-7))
