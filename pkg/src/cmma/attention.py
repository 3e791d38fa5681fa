"""Multi-attention module (MAM).

K independent submodules each map a frame's feature map to an attentive
distribution over its H x W grid.  The distributions re-weight the features,
the K weighted copies are fused by an elementwise max, and a shortcut adds the
original features back.  Shapes follow ``f: (N, D, H, W)``; ``N`` may be any
flattened batch of frames.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DimensionError
from .numerics import DiffRecord, avg_pool, conv1x1, elementwise_max, global_softmax, relu


@dataclass
class MAMParams:
    inner_weight: np.ndarray  # (K, D1, D)
    inner_bias: np.ndarray    # (K, D1)
    outer_weight: np.ndarray  # (K, D1)
    outer_bias: np.ndarray    # (K,)

    def __post_init__(self):
        k, d1, d = self.inner_weight.shape
        if k < 1:
            raise DimensionError("MAM needs at least one submodule")
        if d1 >= d:
            raise DimensionError(f"bottleneck width D1={d1} must be below input width D={d}")
        expected = {"inner_bias": (k, d1), "outer_weight": (k, d1), "outer_bias": (k,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def K(self) -> int:
        return self.inner_weight.shape[0]

    @property
    def D(self) -> int:
        return self.inner_weight.shape[2]

    @property
    def D1(self) -> int:
        return self.inner_weight.shape[1]

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    @classmethod
    def from_dict(cls, d: dict) -> "MAMParams":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


def init_mam_params(K: int, D: int, D1: int, rng: np.random.Generator,
                    dtype=np.float64) -> MAMParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    Zero outer biases keep the initial attention close to uniform.
    """
    wi = rng.uniform(-1, 1, size=(K, D1, D)) / np.sqrt(D)
    wo = rng.uniform(-1, 1, size=(K, D1)) / np.sqrt(D1)
    return MAMParams(wi.astype(dtype), np.zeros((K, D1), dtype),
                     wo.astype(dtype), np.zeros(K, dtype))


def _check_features(f: np.ndarray, params: MAMParams) -> None:
    if f.ndim != 4:
        raise DimensionError(f"features must be (N, D, H, W), got shape {f.shape}")
    if f.shape[1] != params.D:
        raise DimensionError(f"feature channels {f.shape[1]} != MAM input width {params.D}")


def attention_responses(f: np.ndarray, params: MAMParams) -> DiffRecord:
    """Raw responses ``(N, K, H, W)``: outer conv1x1 of ReLU of inner conv1x1, per submodule.

    Backward returns ``(grad_f, grad_params)`` with ``grad_params`` a :class:`MAMParams`.
    """
    _check_features(f, params)
    K, D1 = params.K, params.D1
    # all submodules' inner projections as one stacked conv1x1
    inner = conv1x1(f, params.inner_weight.reshape(K * D1, params.D), params.inner_bias.reshape(K * D1))
    act = relu(inner.output)
    z = act.output.reshape(f.shape[0], K, D1, *f.shape[2:])
    out = np.einsum("kj,nkjhw->nkhw", params.outer_weight, z) + params.outer_bias[:, None, None]

    def backward(g):
        gwo = np.einsum("nkhw,nkjhw->kj", g, z)
        gbo = g.sum(axis=(0, 2, 3))
        gz = np.einsum("kj,nkhw->nkjhw", params.outer_weight, g)
        (gh,) = act.backward(gz.reshape(inner.output.shape))
        gf, gwi, gbi = inner.backward(gh)
        return gf, MAMParams(gwi.reshape(params.inner_weight.shape),
                             gbi.reshape(params.inner_bias.shape), gwo, gbo)

    return DiffRecord(out, backward)


def attention_distributions(r: np.ndarray) -> DiffRecord:
    """Softmax of each (n, k) response slice over its own H x W grid."""
    return global_softmax(r)


def weight_features(a: np.ndarray, f: np.ndarray) -> DiffRecord:
    """Hadamard re-weighting ``x[n, k, d] = a[n, k] * f[n, d]``, shape ``(N, K, D, H, W)``.

    Backward returns ``(grad_a, grad_f)``.
    """
    if a.ndim != 4 or f.ndim != 4 or a.shape[0] != f.shape[0] or a.shape[2:] != f.shape[2:]:
        raise DimensionError(f"attention {a.shape} and features {f.shape} do not agree")
    # computed submodule-major so per-submodule slices stay contiguous for fusion
    x = np.moveaxis(np.swapaxes(a, 0, 1)[:, :, None] * f[None], 0, 1)

    def backward(g):
        return (g * f[:, None]).sum(axis=2), (g * a[:, :, None]).sum(axis=1)

    return DiffRecord(x, backward)


def fuse_frames(x: np.ndarray, f: np.ndarray) -> DiffRecord:
    """Shortcut plus max over submodules: ``f + max_k x[:, k]``.

    Backward returns ``(grad_x, grad_f)``.
    """
    m = elementwise_max(np.moveaxis(x, 1, 0))

    def backward(g):
        (gx,) = m.backward(g)
        return np.moveaxis(gx, 0, 1), g

    return DiffRecord(f + m.output, backward)


def weighted_max(a: np.ndarray, f: np.ndarray) -> DiffRecord:
    """``max_k a[:, k] * f`` without materializing the ``(N, K, D, H, W)`` stack.

    Products are monotone in ``a`` for fixed ``f``, so the maximum uses the
    largest weight where ``f > 0`` and the smallest where ``f < 0``; at ``f == 0``
    every product ties and, as in :func:`elementwise_max`, submodule 0 wins.
    Equal to ``fuse_frames(weight_features(a, f).output, f).output - f``.
    Backward returns ``(grad_a, grad_f)``.
    """
    if a.ndim != 4 or f.ndim != 4 or a.shape[0] != f.shape[0] or a.shape[2:] != f.shape[2:]:
        raise DimensionError(f"attention {a.shape} and features {f.shape} do not agree")
    pos, neg = f > 0, f < 0
    a_sel = np.where(pos, a.max(axis=1, keepdims=True),
                     np.where(neg, a.min(axis=1, keepdims=True), a[:, :1]))
    out = a_sel * f

    def backward(g):
        hi, lo = a.argmax(axis=1), a.argmin(axis=1)        # first index at ties
        gf = g * a_sel
        gprod = g * f
        k = np.arange(a.shape[1])[None, :, None, None]
        ga = ((k == hi[:, None]) * np.where(pos, gprod, 0).sum(axis=1, keepdims=True)
              + (k == lo[:, None]) * np.where(neg, gprod, 0).sum(axis=1, keepdims=True))
        return ga.astype(a.dtype, copy=False), gf

    return DiffRecord(out, backward)


def video_embedding(fhat: np.ndarray) -> DiffRecord:
    """Temporal then spatial average of ``(..., N, D, H, W)`` features, giving ``(..., D)``."""
    if fhat.ndim < 4:
        raise DimensionError(f"expected (..., N, D, H, W), got shape {fhat.shape}")
    if fhat.shape[-4] < 1:
        raise DimensionError("need at least one frame")
    temporal = avg_pool(fhat, -4)
    spatial = avg_pool(temporal.output, (-2, -1))

    def backward(g):
        return temporal.backward(spatial.backward(g)[0])

    return DiffRecord(spatial.output, backward)


def mam_forward(f: np.ndarray, params: MAMParams) -> DiffRecord:
    """Full module: responses, distributions, weighting and fusion.

    ``output`` is ``(fused, attention)``.  ``backward(g_fused, g_attention=None)``
    returns ``(grad_f, grad_params)``; the attention cotangent lets losses on the
    attentive distributions flow through the same forward pass.
    """
    resp = attention_responses(f, params)
    dist = attention_distributions(resp.output)
    # weighting and max-fusion in one pass; see weighted_max
    best = weighted_max(dist.output, f)

    def backward(g_fused, g_attention=None):
        ga, gf_w = best.backward(g_fused)
        if g_attention is not None:
            ga = ga + g_attention
        (gr,) = dist.backward(ga)
        gf_r, gparams = resp.backward(gr)
        return g_fused + gf_w + gf_r, gparams

    return DiffRecord((f + best.output, dist.output), backward)
