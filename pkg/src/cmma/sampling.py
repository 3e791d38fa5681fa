"""Frame selection strategies for training and evaluation clips.

Frame numbers are 1-based throughout this module: a video with ``T`` frames
has frames ``1..T``.  Use :func:`to_zero_based` when indexing arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SamplePlan:
    T: int
    N: int
    g: int
    s: int
    indices: tuple[int, ...] = field(default_factory=tuple)
    padded: bool = False

    def to_json(self) -> dict:
        """JSON-ready dict with 0-based ``s`` and ``indices`` (``s`` is null for padded plans)."""
        return {"T": self.T, "N": self.N, "g": self.g, "s": None if self.padded else self.s - 1,
                "indices": to_zero_based(self.indices), "padded": self.padded}


def to_zero_based(indices) -> list[int]:
    return [int(i) - 1 for i in indices]


def max_interval(T: int, N: int) -> int:
    """Largest interval g for which the start range [1, T - g*N] is non-empty."""
    return (T - 1) // N


def pad_sample(T: int, N: int) -> list[int]:
    """Cycle through the video from frame 1 until N indices are produced."""
    if T < 1:
        raise ValueError(f"video must have at least one frame, got T={T}")
    return [j % T + 1 for j in range(N)]


def ris_sample(T: int, N: int, rng: np.random.Generator, g: int | None = None) -> SamplePlan:
    """Random Interval Sampling.

    Draws an interval ``g`` uniformly from ``[1, (T-1)//N]`` (unless ``g`` is
    supplied, e.g. fixed for the current epoch) and a start ``s`` uniformly
    from ``[1, T - g*N]``; the clip is frames ``s+g, s+2g, ..., s+N*g``.

    Videos with ``T < N + 1`` fall back to :func:`pad_sample` and the plan is
    flagged as padded.
    """
    if N < 1:
        raise ValueError(f"N must be positive, got {N}")
    if T < N + 1:
        return SamplePlan(T, N, 1, 0, tuple(pad_sample(T, N)), padded=True)
    gmax = max_interval(T, N)
    if g is None:
        g = int(rng.integers(1, gmax + 1))
    elif not 1 <= g <= gmax:
        raise ValueError(f"interval g={g} outside feasible range [1, {gmax}] for T={T}, N={N}")
    s = int(rng.integers(1, T - g * N + 1))
    return SamplePlan(T, N, g, s, tuple(s + g * (j + 1) for j in range(N)))


def chunk_bounds(T: int, N: int) -> list[tuple[int, int]]:
    """Inclusive 1-based bounds of N contiguous chunks covering 1..T.

    The first ``T % N`` chunks get one extra frame.
    """
    base, rem = divmod(T, N)
    bounds, start = [], 1
    for j in range(N):
        size = base + (j < rem)
        bounds.append((start, start + size - 1))
        start += size
    return bounds


def restricted_sample(T: int, N: int, rng: np.random.Generator) -> tuple[list[int], bool]:
    """Restricted random sampling: one uniform frame from each of N equal chunks.

    Returns ``(indices, padded)``; ``T < N`` falls back to :func:`pad_sample`.
    """
    if N < 1:
        raise ValueError(f"N must be positive, got {N}")
    if T < N:
        return pad_sample(T, N), True
    return [int(rng.integers(lo, hi + 1)) for lo, hi in chunk_bounds(T, N)], False


def eval_sample(T: int, N: int) -> list[int]:
    """Deterministic, evenly spaced indices ``round(1 + j*(T-1)/(N-1))``.

    Rounds half up.  Indices repeat when ``T < N``.
    """
    if T < 1 or N < 1:
        raise ValueError(f"need T >= 1 and N >= 1, got T={T}, N={N}")
    if N == 1:
        return [1]
    pos = 1 + np.arange(N) * (T - 1) / (N - 1)
    return [int(v) for v in np.floor(pos + 0.5)]
