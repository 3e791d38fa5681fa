# %% [markdown]
# Random Interval Sampling versus the restricted (chunked) baseline

# %%
import json

import numpy as np

from cmma.sampling import eval_sample, max_interval, restricted_sample, ris_sample

T, N = 73, 6
rng = np.random.default_rng(0)

# %% a few training clips: fixed stride g, random start s (indices are 1-based here)
for _ in range(4):
    plan = ris_sample(T, N, rng)
    print(plan.g, plan.s, plan.indices)

# %% JSON form, as printed by `cmma sample-check`, is 0-based
print(json.dumps(ris_sample(T, N, rng).to_json()))

# %% the stride range and the span a clip covers
print("g in [1, %d]" % max_interval(T, N))
spans = [p.indices[-1] - p.indices[0] for p in (ris_sample(T, N, rng) for _ in range(10_000))]
print("span min/median/max:", min(spans), int(np.median(spans)), max(spans))

# %% restricted sampling always spans nearly the whole video
idx, padded = restricted_sample(T, N, rng)
print("restricted", idx, padded)

# %% evaluation is deterministic and evenly spaced
print("eval", eval_sample(T, N))

# %% short videos: T=13 allows g in {1, 2}; T < N+1 pads by cycling
print(sorted({ris_sample(13, N, rng).g for _ in range(200)}))
short = ris_sample(4, N, rng)
print(short.padded, short.indices, json.dumps(short.to_json()))
