"""Kernel temporal segmentation with a linear kernel.

Boundaries follow the 1-based convention b0 = 1, bm = n: the first segment
is frames [1, b1], segment i > 1 is [b(i-1)+1, bi]. Serialised boundaries
drop b0 and list the inclusive segment ends.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PENALTY = 0.5


@dataclass
class SegmentationResult:
    boundaries: list[int]
    segment_costs: list[float]
    objective: float = 0.0
    evaluations: int = field(default=0, compare=False)

    @property
    def n_segments(self) -> int:
        return len(self.boundaries) - 1

    @property
    def ends(self) -> list[int]:
        return self.boundaries[1:]

    def spans(self) -> list[tuple[int, int]]:
        """0-based half-open frame ranges, one per segment."""
        return spans_from_ends(self.ends)


def spans_from_ends(ends) -> list[tuple[int, int]]:
    out = []
    start = 0
    for e in ends:
        out.append((start, int(e)))
        start = int(e)
    return out


def validate_ends(ends, n: int) -> None:
    ends = list(ends)
    if not ends:
        raise ValueError("boundaries must contain at least one segment end")
    prev = 0
    for e in ends:
        if not isinstance(e, (int, np.integer)) or e <= prev:
            raise ValueError(f"segment ends must be strictly increasing positive integers, got {ends}")
        prev = e
    if ends[-1] != n:
        raise ValueError(f"last segment end {ends[-1]} must equal the frame count {n}")


def gram_matrix(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"features must be an n x d matrix with n >= 1, got shape {x.shape}")
    k = x @ x.T
    return (k + k.T) / 2.0


def scatter_matrix(k: np.ndarray) -> np.ndarray:
    """scatter[a, b] for the 0-based inclusive frame range [a, b] (zero for b < a)."""
    n = k.shape[0]
    diag_cum = np.concatenate([[0.0], np.cumsum(np.diag(k))])
    block = np.zeros((n + 1, n + 1))
    block[1:, 1:] = np.cumsum(np.cumsum(k, axis=0), axis=1)
    a = np.arange(n)[:, None]
    b = np.arange(n)[None, :]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    inner = block[hi + 1, hi + 1] - block[lo, hi + 1] - block[hi + 1, lo] + block[lo, lo]
    length = (b - a + 1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = diag_cum[hi + 1] - diag_cum[lo] - inner / length
    s = np.where(b >= a, np.maximum(s, 0.0), 0.0)
    return s


def model_penalty(penalty: float, m: int, n: int) -> float:
    return penalty * m * (math.log(n / m) + 1.0)


def segment(features, max_segments: int, penalty: float = DEFAULT_PENALTY) -> SegmentationResult:
    """Optimal change points for every segment count up to ``max_segments``,
    then penalised selection of the count. Ties prefer fewer segments and
    earlier boundaries."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"cannot segment an empty sequence (shape {x.shape})")
    n = x.shape[0]
    if not 1 <= max_segments <= n:
        raise ValueError(f"max_segments must be in [1, {n}], got {max_segments}")
    if penalty < 0:
        raise ValueError("penalty must be non-negative")

    scat = scatter_matrix(gram_matrix(x))
    # cost[j, t]: best total scatter of frames [0, t) split into j+1 segments
    cost = np.full((max_segments, n + 1), np.inf)
    back = np.zeros((max_segments, n + 1), dtype=np.int64)
    cost[0, 1:] = scat[0, :]
    evaluations = n
    for j in range(1, max_segments):
        for t in range(j + 1, n + 1):
            # previous split s in [j, t-1]: segment [s, t-1]
            cand = cost[j - 1, j:t] + scat[j:t, t - 1]
            evaluations += cand.size
            best = int(np.argmin(cand))
            cost[j, t] = cand[best]
            back[j, t] = best + j

    best_m, best_obj = 1, cost[0, n] + model_penalty(penalty, 1, n)
    for m in range(2, max_segments + 1):
        obj = cost[m - 1, n] + model_penalty(penalty, m, n)
        if obj < best_obj - 1e-12 * max(1.0, abs(best_obj)):
            best_m, best_obj = m, obj

    ends = [n]
    t = n
    for j in range(best_m - 1, 0, -1):
        t = int(back[j, t])
        ends.append(t)
    ends.reverse()
    spans = spans_from_ends(ends)
    costs = [float(scat[a, b - 1]) for a, b in spans]
    return SegmentationResult([1] + ends, costs, float(best_obj), evaluations)


def default_max_segments(n: int, fps: float = 15.0, min_seconds: float = 1.0) -> int:
    """Cap the segment count at one segment per ``min_seconds`` of video."""
    return max(1, min(n, int(math.ceil(n / max(1.0, fps * min_seconds)))))
