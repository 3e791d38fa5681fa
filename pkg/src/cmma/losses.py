"""Training objectives and their gradients.

Attention regularizers work on flattened attention matrices ``A`` of shape
``(..., K, H*W)`` (row-major over H, W) and accept any number of leading batch
axes; they return one value per leading index.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError, TrainingError
from .numerics import DiffRecord

EPS_LOG = 1e-8


@dataclass(frozen=True)
class LossWeights:
    id: float = 1.0
    trip: float = 1.0
    div: float = 1.0
    con: float = 1.0
    margin: float = 0.3

    def __post_init__(self):
        for name in ("id", "trip", "div", "con", "margin"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"loss weight {name}={v} must be finite and nonnegative")


def _check_distribution(p: np.ndarray, what: str) -> None:
    if np.any(p < 0):
        raise DomainError(f"{what} has negative entries")


def flatten_attention(a: np.ndarray) -> np.ndarray:
    """``(..., K, H, W)`` -> ``(..., K, H*W)``; contiguous segments are horizontal stripes."""
    return a.reshape(*a.shape[:-2], a.shape[-2] * a.shape[-1])


def hellinger_distance(a, b) -> float:
    """``||sqrt(a) - sqrt(b)||_2 / sqrt(2)``, in [0, 1] for distributions."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"distribution shapes differ: {a.shape} vs {b.shape}")
    _check_distribution(a, "a")
    _check_distribution(b, "b")
    return float(np.linalg.norm(np.sqrt(a) - np.sqrt(b)) / np.sqrt(2.0))


def mean_pairwise_hellinger(A: np.ndarray) -> float:
    """Mean Hellinger distance over all submodule pairs, averaged over leading axes."""
    S = np.sqrt(np.asarray(A, dtype=np.float64))
    k = S.shape[-2]
    if k < 2:
        return 0.0
    bc = S @ np.swapaxes(S, -1, -2)
    # D^2 = 1 - BC for normalized rows
    d = np.sqrt(np.clip(1.0 - bc, 0.0, None))
    iu = np.triu_indices(k, 1)
    return float(d[..., iu[0], iu[1]].mean())


def diversity_loss(A: np.ndarray) -> DiffRecord:
    """``||sqrt(A) sqrt(A)^T - I||_F^2`` per attention matrix.

    For row-normalized ``A`` this is the sum of squared Bhattacharyya
    coefficients over ordered submodule pairs, in ``[0, K(K-1)]``.
    """
    _check_distribution(A, "attention matrix")
    S = np.sqrt(A)
    k = A.shape[-2]
    M = S @ np.swapaxes(S, -1, -2) - np.eye(k, dtype=A.dtype)
    loss = (M * M).sum(axis=(-2, -1))

    def backward(g):
        gS = 4.0 * (M @ S) * np.asarray(g)[..., None, None]
        # d sqrt(A)/dA is unbounded at 0; exact zeros get no gradient
        with np.errstate(divide="ignore", invalid="ignore"):
            gA = np.where(S > 0, gS / (2.0 * S), 0.0)
        return (gA.astype(A.dtype, copy=False),)

    return DiffRecord(loss, backward)


def concentration_matrix(A: np.ndarray, K: int | None = None) -> DiffRecord:
    """Stripe masses ``Ahat[..., k, l]``: mass of row k inside the l-th of K equal segments.

    Segments are half-open ranges ``[l*delta, (l+1)*delta)`` with ``delta = H*W / K``.
    """
    K = A.shape[-2] if K is None else K
    length = A.shape[-1]
    if length % K:
        raise ConfigurationError(f"grid of {length} cells is not divisible into {K} stripes")
    delta = length // K
    Ahat = A.reshape(*A.shape[:-1], K, delta).sum(axis=-1)

    def backward(g):
        return (np.repeat(g, delta, axis=-1),)

    return DiffRecord(Ahat, backward)


def concentration_loss(Ahat: np.ndarray, eps: float = EPS_LOG) -> DiffRecord:
    """``sum_k -log(max(Ahat[k, k], eps))`` per concentration matrix (natural log)."""
    diag = np.diagonal(Ahat, axis1=-2, axis2=-1)
    clipped = np.maximum(diag, eps)
    loss = -np.log(clipped).sum(axis=-1)

    def backward(g):
        gdiag = np.where(diag > eps, -1.0 / clipped, 0.0) * np.asarray(g)[..., None]
        out = np.zeros_like(Ahat)
        k = Ahat.shape[-1]
        out[..., np.arange(k), np.arange(k)] = gdiag
        return (out,)

    return DiffRecord(loss, backward)


def id_loss(logits: np.ndarray, labels) -> DiffRecord:
    """Softmax cross-entropy.  ``logits`` is ``(C,)`` with an int label or ``(B, C)`` with B labels."""
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(labels))
    c = z.shape[-1]
    if c < 2:
        raise DimensionError(f"need at least 2 classes, got {c}")
    if y.shape != (z.shape[0],):
        raise DimensionError(f"{z.shape[0]} logit rows but labels shape {y.shape}")
    if np.any((y < 0) | (y >= c)):
        raise ValueError(f"label out of range [0, {c}): {y.tolist()}")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(z.shape[0])
    loss = logsum - shifted[rows, y]
    probs = np.exp(shifted - logsum[:, None])

    def backward(g):
        g = np.atleast_1d(np.asarray(g, dtype=z.dtype))
        gz = probs.copy()
        gz[rows, y] -= 1.0
        gz *= g[:, None]
        return (gz[0] if single else gz,)

    return DiffRecord(loss[0] if single else loss, backward)


def check_triplet_batch(labels) -> None:
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2 or np.any(counts < 2):
        raise TrainingError(
            "batch-hard triplet loss needs >= 2 identities with >= 2 clips each; got counts "
            + str(dict(zip(uniq.tolist(), counts.tolist()))))


def triplet_loss(embeddings: np.ndarray, labels, margin: float = 0.3) -> DiffRecord:
    """Batch-hard triplet loss with Euclidean distances, averaged over anchors."""
    labels = np.asarray(labels)
    X = np.asarray(embeddings)
    if X.ndim != 2 or X.shape[0] != labels.shape[0]:
        raise DimensionError(f"embeddings {X.shape} vs labels {labels.shape}")
    check_triplet_batch(labels)
    b = X.shape[0]
    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    # lowest index wins at ties (argmax/argmin convention)
    pos = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    neg = np.where(~same, dist, np.inf).argmin(axis=1)
    rows = np.arange(b)
    hinge = dist[rows, pos] - dist[rows, neg] + margin
    active = hinge > 0
    loss = np.where(active, hinge, 0.0).mean()

    def backward(g):
        gX = np.zeros_like(X)
        scale = float(g) / b
        for i in np.flatnonzero(active):
            for j, sign in ((pos[i], 1.0), (neg[i], -1.0)):
                d = dist[i, j]
                if d > 0:
                    u = sign * scale * diff[i, j] / d
                    gX[i] += u
                    gX[j] -= u
        return (gX,)

    return DiffRecord(np.asarray(loss, dtype=X.dtype), backward)


@dataclass
class LossBreakdown:
    """Weighted terms of the total loss plus attention statistics."""
    total: float
    id: float
    trip: float
    div: float
    con: float
    mean_diag: float
    raw: dict = field(default_factory=dict)


def total_loss(logits: np.ndarray, embeddings: np.ndarray, labels,
               attention: list[np.ndarray], weights: LossWeights,
               use_con: bool = True) -> tuple[LossBreakdown, callable]:
    """Weighted sum of ID, triplet, diversity and concentration losses.

    ``attention`` holds one ``(..., K, H, W)`` stack per active MAM; the
    attention terms are averaged over all frames, clips and MAMs.  Returns the
    breakdown and ``backward()`` giving ``(g_logits, g_embeddings, [g_attention...])``.
    """
    ce = id_loss(logits, labels)
    # numpy scalars keep the input precision (extended-precision gradient checks)
    l_id = ce.output.mean()
    trip = triplet_loss(embeddings, labels, weights.margin)
    l_trip = trip.output[()]
    lam_con = weights.con if use_con else 0.0

    divs, cons, div_vals, con_vals, diags = [], [], [], [], []
    for a in attention:
        A = flatten_attention(a)
        dv = diversity_loss(A)
        cm = concentration_matrix(A)
        cl = concentration_loss(cm.output)
        divs.append(dv)
        cons.append((cm, cl))
        div_vals.append(dv.output.mean())
        con_vals.append(cl.output.mean())
        diags.append(np.diagonal(cm.output, axis1=-2, axis2=-1).mean())
    n_mam = len(attention)
    l_div = np.mean(div_vals) if n_mam else 0.0
    l_con = np.mean(con_vals) if n_mam else 0.0
    mean_diag = float(np.mean(diags)) if n_mam else float("nan")

    terms = dict(id=weights.id * l_id, trip=weights.trip * l_trip,
                 div=weights.div * l_div, con=lam_con * l_con)
    total = sum(terms.values())
    breakdown = LossBreakdown(total=total, mean_diag=mean_diag,
                              raw=dict(id=l_id, trip=l_trip, div=l_div, con=l_con), **terms)

    def backward():
        b = logits.shape[0]
        (g_logits,) = ce.backward(np.full(b, weights.id / b, dtype=logits.dtype))
        (g_emb,) = trip.backward(weights.trip)
        g_att = []
        for a, dv, (cm, cl) in zip(attention, divs, cons):
            count = dv.output.size * n_mam
            gA = np.zeros(flatten_attention(a).shape, dtype=a.dtype)
            if weights.div:
                gA += dv.backward(np.full(dv.output.shape, weights.div / count))[0]
            if lam_con:
                (gh,) = cl.backward(np.full(cl.output.shape, lam_con / count))
                gA += cm.backward(gh)[0]
            g_att.append(gA.reshape(a.shape).astype(a.dtype, copy=False))
        return g_logits, g_emb.astype(embeddings.dtype, copy=False), g_att

    return breakdown, backward

