"""Differentiable array primitives with hand-written backward rules.

Every primitive returns a :class:`DiffRecord` holding the forward output and a
closure mapping the output cotangent to the input cotangents.  Arrays are plain
``numpy.ndarray`` objects; the dtype of the inputs is preserved so the same
code runs in float64 (tests) and float32 (training).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class DiffRecord:
    output: np.ndarray
    backward: Callable[[np.ndarray], tuple]


def conv1x1(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> DiffRecord:
    """Pointwise convolution over ``x`` of shape ``(..., D_in, H, W)``.

    ``out[..., d, h, w] = sum_c weight[d, c] * x[..., c, h, w] + bias[d]``.
    Backward returns ``(grad_x, grad_weight, grad_bias)``.
    """
    if x.ndim < 3:
        raise DimensionError(f"conv1x1 expects (..., D_in, H, W), got rank {x.ndim}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[-3]:
        raise DimensionError(
            f"conv1x1 weight axis 1 ({weight.shape}) does not match input channel "
            f"axis -3 ({x.shape[-3]})")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"conv1x1 bias shape {bias.shape} does not match weight axis 0 ({weight.shape[0]})")

    out = np.moveaxis(np.tensordot(weight, x, axes=([1], [x.ndim - 3])), 0, -3)
    out = out + bias[:, None, None]
    lead = tuple(range(x.ndim - 3))

    def backward(g):
        gx = np.moveaxis(np.tensordot(weight, g, axes=([0], [g.ndim - 3])), 0, -3)
        axes = lead + (x.ndim - 2, x.ndim - 1)
        gw = np.tensordot(g, x, axes=(axes, axes))
        gb = g.sum(axis=axes)
        return gx, gw, gb

    return DiffRecord(out, backward)


def relu(x: np.ndarray) -> DiffRecord:
    # subgradient at exactly 0 is 0
    mask = x > 0
    return DiffRecord(np.where(mask, x, 0).astype(x.dtype, copy=False),
                      lambda g: (g * mask,))


def global_softmax(r: np.ndarray) -> DiffRecord:
    """Softmax over the trailing two (spatial) axes of ``r``."""
    if r.ndim < 2:
        raise DimensionError(f"global_softmax expects (..., H, W), got rank {r.ndim}")
    z = r - r.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=(-2, -1), keepdims=True)

    def backward(g):
        return (a * (g - (g * a).sum(axis=(-2, -1), keepdims=True)),)

    return DiffRecord(a, backward)


def elementwise_max(xs: Sequence[np.ndarray] | np.ndarray) -> DiffRecord:
    """Coordinatewise maximum of K same-shaped arrays.

    ``xs`` may be a list or an array whose leading axis indexes the K inputs.
    Ties send the whole cotangent to the lowest index.  Backward returns a
    single array of shape ``(K, *shape)``.
    """
    if len(xs) == 0:
        raise ValueError("elementwise_max needs at least one input")
    if isinstance(xs, np.ndarray):
        stacked = xs
    else:
        shapes = {np.shape(x) for x in xs}
        if len(shapes) != 1:
            raise DimensionError(f"elementwise_max inputs differ in shape: {sorted(shapes)}")
        stacked = np.stack(xs)
    # strict > keeps the lowest index at ties
    out = stacked[0].copy()
    idx = np.zeros(out.shape, dtype=np.intp)
    for k in range(1, stacked.shape[0]):
        better = stacked[k] > out
        np.copyto(out, stacked[k], where=better)
        idx[better] = k
    k = stacked.shape[0]

    def backward(g):
        return (np.stack([np.where(idx == j, g, 0) for j in range(k)]).astype(g.dtype, copy=False),)

    return DiffRecord(out, backward)


def avg_pool(x: np.ndarray, axes: int | Sequence[int]) -> DiffRecord:
    """Arithmetic mean over ``axes``; those axes are removed."""
    axes = (axes,) if np.isscalar(axes) else tuple(axes)
    norm = []
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ValueError(f"axis {ax} out of range for rank-{x.ndim} input")
        norm.append(ax % x.ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"repeated axis in {axes}")
    norm = tuple(sorted(norm))
    count = int(np.prod([x.shape[a] for a in norm])) if norm else 1
    out = x.mean(axis=norm) if norm else x.copy()

    def backward(g):
        g = np.expand_dims(g, norm) if norm else g
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=True),)

    return DiffRecord(out, backward)


def downsample(x: np.ndarray, factor: int) -> DiffRecord:
    """Non-overlapping ``factor x factor`` average pooling of ``(..., C, H, W)``."""
    if factor == 1:
        return DiffRecord(x, lambda g: (g,))
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"spatial size {h}x{w} not divisible by factor {factor}")
    out = sum(x[..., i::factor, j::factor] for i in range(factor) for j in range(factor))
    out = out / (factor * factor)

    def backward(g):
        up = np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1)
        return (up / (factor * factor),)

    return DiffRecord(out, backward)


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> DiffRecord:
    """Same-padded 3x3 convolution of ``x`` shaped ``(N, C, H, W)``.

    ``weight`` has shape ``(D_out, C, 3, 3)``.  Backward returns
    ``(grad_x, grad_weight, grad_bias)``; pass ``input_grad=False`` to skip
    ``grad_x`` (returned as ``None``).
    """
    if x.ndim != 4:
        raise DimensionError(f"conv3x3 expects (N, C, H, W), got shape {x.shape}")
    if weight.shape[1:] != (x.shape[1], 3, 3):
        raise DimensionError(
            f"conv3x3 weight {weight.shape} does not match input channels {x.shape[1]}")
    n, c, h, w = x.shape
    d = weight.shape[0]
    # channel-major padded copy; patch matrix rows ordered (tap, channel)
    xp = np.zeros((c, n, h + 2, w + 2), x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((9, c, n, h, w), x.dtype)
    for t in range(9):
        i, j = divmod(t, 3)
        cols[t] = xp[:, :, i:i + h, j:j + w]
    cols = cols.reshape(9 * c, n * h * w)
    wmat = weight.transpose(0, 2, 3, 1).reshape(d, 9 * c)
    out = (wmat @ cols + bias[:, None]).reshape(d, n, h, w).transpose(1, 0, 2, 3)

    def backward(g, input_grad=True):
        gm = g.transpose(1, 0, 2, 3).reshape(d, n * h * w)
        gw = (gm @ cols.T).reshape(d, 3, 3, c).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=1)
        if not input_grad:
            return None, gw, gb
        gcols = (wmat.T @ gm).reshape(9, c, n, h, w)
        gxp = np.zeros((c, n, h + 2, w + 2), x.dtype)
        for t in range(9):
            i, j = divmod(t, 3)
            gxp[:, :, i:i + h, j:j + w] += gcols[t]
        return np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)), gw, gb

    return DiffRecord(np.ascontiguousarray(out), backward)


def finite_diff_check(f: Callable, x0: np.ndarray, step: float = 1e-5,
                      grad: Callable | None = None) -> float:
    """Largest relative error between an analytic gradient and central differences.

    ``f`` maps an array shaped like ``x0`` to a scalar.  The analytic gradient
    comes from ``grad(x0)`` when given, otherwise ``f`` must return
    ``(value, gradient)``.  Relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    Floating inputs keep their dtype, so ``np.longdouble`` arrays are
    differenced in extended precision.  That matters where the true gradient
    is exactly zero (a bias shared by a whole softmax, say): there 64-bit
    rounding noise alone can exceed the 1e-8 floor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(x0)
    if not np.issubdtype(x0.dtype, np.floating):
        x0 = x0.astype(np.float64)

    def evaluate(x):
        out = f(x)
        g = None
        if grad is None:
            if not isinstance(out, tuple) or len(out) != 2:
                raise ValueError("without grad=, f must return (value, gradient)")
            out, g = out
        out = np.asarray(out)
        if out.size != 1:
            raise ValueError(f"f must return a scalar, got shape {out.shape}")
        return out.reshape(()), g

    _, analytic = evaluate(x0)
    if grad is not None:
        analytic = grad(x0)
    analytic = np.asarray(analytic, dtype=x0.dtype)
    if analytic.shape != x0.shape:
        raise DimensionError(f"gradient shape {analytic.shape} != input shape {x0.shape}")

    numeric = np.empty_like(x0)
    flat, nflat = x0.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = evaluate(x0)[0]
        flat[i] = orig - step
        down = evaluate(x0)[0]
        flat[i] = orig
        nflat[i] = (up - down) / (2 * step)
    if x0.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def as_extended(*arrays):
    """Copies of ``arrays`` in extended precision (``np.longdouble``)."""
    out = tuple(np.asarray(a, dtype=np.longdouble) for a in arrays)
    return out[0] if len(out) == 1 else out


# --- flat binary tensor container -------------------------------------------

MAGIC = b"CMMT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}; use float64 or float32")
    code = _CODES[arr.dtype]
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(struct.pack("<B", code))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    (code,) = struct.unpack("<B", _read_exact(fh, 1))
    if code not in _DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
