"""Query-vs-gallery retrieval metrics: CMC curve and mean average precision."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import ModelState, model_forward
from .errors import DimensionError
from .losses import concentration_matrix, flatten_attention, mean_pairwise_hellinger
from .sampling import eval_sample, to_zero_based


@dataclass(frozen=True)
class EvalProtocol:
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray
    query_keys: tuple = ()
    gallery_keys: tuple = ()
    cross_camera: bool = True

    def valid_mask(self) -> np.ndarray:
        """``(q, g)`` mask of gallery entries a query may be matched against."""
        qi, gi = np.asarray(self.query_ids), np.asarray(self.gallery_ids)
        qc, gc = np.asarray(self.query_cams), np.asarray(self.gallery_cams)
        valid = np.ones((len(qi), len(gi)), dtype=bool)
        if self.cross_camera:
            valid &= ~((qi[:, None] == gi[None, :]) & (qc[:, None] == gc[None, :]))
        if self.query_keys and self.gallery_keys:
            qk, gk = np.asarray(self.query_keys), np.asarray(self.gallery_keys)
            valid &= qk[:, None] != gk[None, :]
        return valid

    def matches(self) -> np.ndarray:
        return np.asarray(self.query_ids)[:, None] == np.asarray(self.gallery_ids)[None, :]


def pairwise_distances(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``Q`` (q, D) and ``G`` (g, D)."""
    Q, G = np.atleast_2d(Q), np.atleast_2d(G)
    if Q.shape[1] != G.shape[1]:
        raise DimensionError(f"embedding widths differ: {Q.shape[1]} vs {G.shape[1]}")
    diff = Q[:, None, :] - G[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def _ranked_matches(dist: np.ndarray, protocol: EvalProtocol):
    """Per query: boolean match vector over its valid gallery, sorted by distance then index."""
    if dist.shape != (len(protocol.query_ids), len(protocol.gallery_ids)):
        raise DimensionError(f"distance matrix {dist.shape} does not fit the protocol")
    valid = protocol.valid_mask()
    match = protocol.matches()
    for q in range(dist.shape[0]):
        cols = np.flatnonzero(valid[q])
        order = cols[np.argsort(dist[q, cols], kind="stable")]
        yield match[q, order]


def count_excluded(dist: np.ndarray, protocol: EvalProtocol) -> int:
    """Queries without any valid correct match; they are left out of both metrics."""
    return sum(1 for m in _ranked_matches(dist, protocol) if not m.any())


def cmc_curve(dist: np.ndarray, protocol: EvalProtocol, max_rank: int) -> np.ndarray:
    """Fraction of (non-excluded) queries with a correct match in the top k, for k = 1..max_rank."""
    hits = np.zeros(max_rank)
    used = 0
    for m in _ranked_matches(dist, protocol):
        if not m.any():
            continue
        used += 1
        first = int(np.argmax(m))
        if first < max_rank:
            hits[first:] += 1
    return hits / used if used else hits


def average_precision(ranked_matches: np.ndarray) -> float:
    ranked_matches = np.asarray(ranked_matches, dtype=bool)
    pos = np.flatnonzero(ranked_matches)
    if pos.size == 0:
        return float("nan")
    return float(np.mean(np.arange(1, pos.size + 1) / (pos + 1)))


def mean_average_precision(dist: np.ndarray, protocol: EvalProtocol) -> float:
    aps = [average_precision(m) for m in _ranked_matches(dist, protocol) if m.any()]
    return float(np.mean(aps)) if aps else 0.0


def evaluate(dist: np.ndarray, protocol: EvalProtocol, ranks=(1, 5, 10, 20)) -> dict:
    curve = cmc_curve(dist, protocol, max(ranks))
    out = {f"rank{k}": float(curve[k - 1]) for k in ranks}
    out["mAP"] = mean_average_precision(dist, protocol)
    out["excluded_queries"] = count_excluded(dist, protocol)
    return out


def extract_embeddings(state: ModelState, videos, N: int = 6, chunk: int = 16) -> np.ndarray:
    """Video embeddings from ``N`` evenly spaced frames per video."""
    dtype = state.params["classifier.weight"].dtype
    out = []
    for i in range(0, len(videos), chunk):
        clips = np.stack([v.frames[to_zero_based(eval_sample(len(v.frames), N))]
                          for v in videos[i:i + chunk]]).astype(dtype, copy=False)
        out.append(model_forward(clips, state).embedding)
    return np.concatenate(out).astype(np.float64)


def attention_statistics(state: ModelState, videos, N: int = 6, chunk: int = 16) -> dict:
    """Per MAM: mean diag of the concentration matrix and mean pairwise Hellinger distance.

    Averages run over every clip and frame of ``videos`` (evenly spaced frames).
    """
    dtype = state.params["classifier.weight"].dtype
    sums: dict = {}
    count = 0
    for i in range(0, len(videos), chunk):
        batch = videos[i:i + chunk]
        clips = np.stack([v.frames[to_zero_based(eval_sample(len(v.frames), N))]
                          for v in batch]).astype(dtype, copy=False)
        for name, a in model_forward(clips, state).attention.items():
            A = flatten_attention(a.astype(np.float64))
            diag = np.diagonal(concentration_matrix(A).output, axis1=-2, axis2=-1).mean()
            acc = sums.setdefault(name, [0.0, 0.0])
            acc[0] += diag * len(batch)
            acc[1] += mean_pairwise_hellinger(A) * len(batch)
        count += len(batch)
    return {name: {"mean_diag": float(d / count), "mean_hellinger": float(h / count)}
            for name, (d, h) in sorted(sums.items())}


def all_vs_all_protocol(videos, cross_camera: bool = True) -> EvalProtocol:
    """Every video queries all the others; same-identity same-camera entries dropped when cross-camera."""
    ids = np.array([v.identity for v in videos])
    cams = np.array([v.camera for v in videos])
    keys = tuple(v.key for v in videos)
    return EvalProtocol(ids, cams, ids, cams, keys, keys, cross_camera)


def evaluate_model(state: ModelState, videos, N: int = 6) -> dict:
    emb = extract_embeddings(state, videos, N)
    protocol = all_vs_all_protocol(videos)
    return evaluate(pairwise_distances(emb, emb), protocol)
