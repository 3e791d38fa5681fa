# %% [markdown]
# Train a small model on the synthetic benchmark, then rank test clips
#
# Shrunk from the desk recipe (desk.json) so it finishes in well under a minute.

# %%
import logging

import numpy as np

from cmma.backbone import BackboneConfig, Wiring
from cmma.losses import LossWeights
from cmma.retrieval import attention_statistics, evaluate_model
from cmma.synthetic import generate_dataset
from cmma.trainer import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

# %% 30 identities, two cameras each; 20 train, 10 test
data = generate_dataset(30, 2, 24, seed=0, n_train=20, frame_size=(32, 16))
print(len(data.videos), "clips;", "train ids", data.train_ids, "test ids", data.test_ids)

# %%
backbone = BackboneConfig(widths=(8, 16, 32), factors=(2, 2, 2), tap1=1, input_size=(32, 16))
config = TrainConfig(lr=1e-3, P=4, Q=2, N=4, steps=300, seed=0)
state, rows = train(config, data, backbone, progress=True)

# %% log rows hold the weighted loss terms; they add up to L_total
last = rows[-1]
print({k: round(v, 4) for k, v in last.items()})
print("sum of terms", round(last["L_id"] + last["L_trip"] + last["L_div"] + last["L_con"], 4))

# %% cross-camera retrieval on the held-out identities
test = data.videos_of(data.test_ids)
print(evaluate_model(state, test, N=4))

# %% how peaked and how distinct the learned maps are
for mam, stats in attention_statistics(state, test, N=4).items():
    print(mam, {k: round(v, 3) for k, v in stats.items()})

# %% the same run without the concentration term, for contrast
flat = train(TrainConfig(lr=1e-3, P=4, Q=2, N=4, steps=300, seed=0, weights=LossWeights(con=0)),
             data, backbone)[0]
for mam, stats in attention_statistics(flat, test, N=4).items():
    print("no con", mam, {k: round(v, 3) for k, v in stats.items()})

# %% the full model (two MAMs) against the plain backbone
base = train(TrainConfig(lr=1e-3, P=4, Q=2, N=4, steps=300, seed=0, ablation=Wiring.BASELINE),
             data, backbone)[0]
print("baseline", evaluate_model(base, test, N=4))
