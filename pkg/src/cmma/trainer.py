"""Adam training loop over P x Q identity-balanced clip batches."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from .backbone import BackboneConfig, ModelState, Wiring, init_model, model_forward
from .errors import ConfigurationError, TrainingError
from .losses import LossWeights, total_loss
from .sampling import restricted_sample, ris_sample, to_zero_based
from .synthetic import SyntheticDataset, Video

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "L_total", "L_id", "L_trip", "L_div", "L_con", "mean_diag")


class Sampling(str, Enum):
    RIS = "ris"
    RESTRICTED = "restricted"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 5e-4
    P: int = 4
    Q: int = 7
    N: int = 6
    steps: int = 500
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: Wiring = Wiring.MULTI_MAM_CON
    sampling: Sampling = Sampling.RIS
    ris_interval_per: str = "epoch"   # "epoch": one g per video per epoch; "clip": fresh g per clip
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "ablation", Wiring(self.ablation))
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        problems = self.problems()
        if problems:
            raise ConfigurationError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.P < 2:
            out.append(f"P={self.P}: batch-hard triplet loss needs at least 2 identities per batch")
        if self.Q < 2:
            out.append(f"Q={self.Q}: batch-hard triplet loss needs at least 2 clips per identity")
        if self.N < 1:
            out.append(f"N={self.N} must be positive")
        if self.steps < 0:
            out.append(f"steps={self.steps} must be nonnegative")
        if not self.lr > 0:
            out.append(f"lr={self.lr} must be positive")
        if self.weight_decay < 0:
            out.append(f"weight_decay={self.weight_decay} must be nonnegative")
        if self.ris_interval_per not in ("epoch", "clip"):
            out.append(f"ris_interval_per={self.ris_interval_per!r} must be 'epoch' or 'clip'")
        if self.dtype not in ("float32", "float64"):
            out.append(f"dtype={self.dtype!r} must be float32 or float64")
        return out

    @property
    def batch_size(self) -> int:
        return self.P * self.Q

    def to_json(self) -> dict:
        d = asdict(self)
        d["ablation"] = self.ablation.value
        d["sampling"] = self.sampling.value
        return d


def adam_step(params: dict, grads: dict, moments: dict, t: int, config: TrainConfig) -> tuple[dict, dict]:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient.

    ``moments`` maps each name to ``(m, v)``; missing entries start at zero.
    Parameters without a gradient are left untouched.  Updates happen in place
    and the same dicts are returned.
    """
    b1, b2 = config.beta1, config.beta2
    for name, g in grads.items():
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {t}")
        p = params[name]
        g = g + config.weight_decay * p
        m, v = moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        params[name] = (p - config.lr * mhat / (np.sqrt(vhat) + config.eps)).astype(p.dtype, copy=False)
        moments[name] = (m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False))
    return params, moments


class ClipSampler:
    """Identity-balanced batches: P identities per step, Q clips each.

    An epoch is one pass over a shuffled list of the training identities.
    With RIS, each video gets one interval per epoch unless configured per clip.
    """

    def __init__(self, dataset: SyntheticDataset, config: TrainConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.ids = list(dataset.train_ids)
        if len(self.ids) < config.P:
            raise ConfigurationError(
                f"{len(self.ids)} training identities cannot fill P={config.P} per batch")
        self.videos = {i: [v for v in dataset.videos if v.identity == i] for i in self.ids}
        self.label = {ident: j for j, ident in enumerate(self.ids)}
        self.epoch = -1
        self.queue: list[int] = []
        self.intervals: dict[str, int] = {}

    def _new_epoch(self):
        self.epoch += 1
        order = self.rng.permutation(len(self.ids))
        self.queue = [self.ids[i] for i in order]
        self.intervals = {}

    def frame_indices(self, video: Video) -> list[int]:
        T, N = len(video.frames), self.config.N
        if self.config.sampling is Sampling.RESTRICTED:
            idx, _ = restricted_sample(T, N, self.rng)
            return idx
        g = None
        if self.config.ris_interval_per == "epoch" and T >= N + 1:
            if video.key not in self.intervals:
                self.intervals[video.key] = ris_sample(T, N, self.rng).g
            g = self.intervals[video.key]
        return list(ris_sample(T, N, self.rng, g=g).indices)

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        """``(clips (P*Q, N, 3, H, W), labels (P*Q,))``."""
        if len(self.queue) < self.config.P:
            self._new_epoch()
        chosen, self.queue = self.queue[:self.config.P], self.queue[self.config.P:]
        clips, labels = [], []
        for ident in chosen:
            vids = self.videos[ident]
            offset = int(self.rng.integers(len(vids)))
            for q in range(self.config.Q):
                v = vids[(offset + q) % len(vids)]
                clips.append(v.frames[to_zero_based(self.frame_indices(v))])
                labels.append(self.label[ident])
        return np.stack(clips), np.asarray(labels)


def num_train_classes(dataset: SyntheticDataset) -> int:
    return len(dataset.train_ids)


def train_step(state: ModelState, clips: np.ndarray, labels: np.ndarray, config: TrainConfig):
    """Forward, loss and gradients for one batch; returns ``(breakdown, grads)``."""
    res = model_forward(clips.astype(state.params["classifier.weight"].dtype, copy=False), state)
    names = list(res.attention)
    breakdown, backward = total_loss(res.logits, res.embedding, labels,
                                     [res.attention[n] for n in names], config.weights,
                                     use_con=state.wiring.uses_con)
    g_logits, g_emb, g_att = backward()
    grads = res.backward(g_emb, g_logits, dict(zip(names, g_att)))
    return breakdown, grads


def train(config: TrainConfig, dataset: SyntheticDataset,
          backbone: BackboneConfig | None = None, progress: bool = False) -> tuple[ModelState, list[dict]]:
    """Train from scratch; deterministic for a fixed ``config.seed``.

    Returns the final state and one log row per step (weighted loss terms).
    """
    backbone = backbone or BackboneConfig()
    dtype = np.dtype(config.dtype)
    state = init_model(backbone, config.ablation, num_train_classes(dataset), config.seed, dtype)
    sampler = ClipSampler(dataset, config, np.random.default_rng([config.seed, 31337]))
    moments: dict = {}
    rows = []
    for step in range(1, config.steps + 1):
        clips, labels = sampler.next_batch()
        bd, grads = train_step(state, clips, labels, config)
        if not np.isfinite(bd.total):
            raise TrainingError(f"non-finite loss at step {step}: {bd}")
        adam_step(state.params, grads, moments, step, config)
        rows.append({"step": step, "L_total": float(bd.total), "L_id": float(bd.id),
                     "L_trip": float(bd.trip), "L_div": float(bd.div), "L_con": float(bd.con),
                     "mean_diag": float(bd.mean_diag)})
        if progress and (step == 1 or step % 50 == 0):
            log.info("step %d total %.4f id %.4f trip %.4f div %.4f con %.4f diag %.3f",
                     step, bd.total, bd.id, bd.trip, bd.div, bd.con, bd.mean_diag)
    return state, rows


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
