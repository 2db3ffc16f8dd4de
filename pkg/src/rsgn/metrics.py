"""Summary assembly under a length budget and the evaluation protocols."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

DEFAULT_BUDGET = 0.15


def knapsack(values, weights, capacity: int) -> list[int]:
    """Exact 0/1 knapsack; returns sorted selected indices.

    Ties keep the earlier items (an item is only taken on strict improvement).
    """
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.int64)
    n = values.size
    capacity = int(capacity)
    if capacity <= 0 or n == 0:
        return []
    table = np.zeros((n + 1, capacity + 1))
    for i in range(1, n + 1):
        w, v = weights[i - 1], values[i - 1]
        table[i] = table[i - 1]
        if w <= capacity:
            take = table[i - 1, : capacity + 1 - w] + v
            better = take > table[i - 1, w:]
            table[i, w:][better] = take[better]
    chosen = []
    c = capacity
    for i in range(n, 0, -1):
        if table[i, c] != table[i - 1, c]:
            chosen.append(i - 1)
            c -= weights[i - 1]
    return sorted(chosen)


def assemble_summary(shot_scores, shot_lengths, budget_fraction: float = DEFAULT_BUDGET) -> np.ndarray:
    """Frame mask of the knapsack-optimal shots within floor(budget * n) frames.

    When no shot fits the budget the mask is empty.
    """
    lengths = np.asarray(shot_lengths, dtype=np.int64)
    if not 0.0 < budget_fraction <= 1.0:
        raise ValueError(f"budget fraction must lie in (0, 1], got {budget_fraction}")
    if np.any(lengths < 1):
        raise ValueError("shot lengths must be positive")
    if len(shot_scores) != lengths.size:
        raise ValueError(f"{len(shot_scores)} scores for {lengths.size} shots")
    n = int(lengths.sum())
    budget = int(math.floor(budget_fraction * n + 1e-9))
    picked = knapsack(shot_scores, lengths, budget)
    mask = np.zeros(n, dtype=bool)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    for i in picked:
        mask[starts[i]: starts[i] + lengths[i]] = True
    return mask


def shot_scores_from_frames(frame_scores, spans) -> np.ndarray:
    f = np.asarray(frame_scores, dtype=np.float64)
    return np.array([f[a:b].mean() for a, b in spans])


def frame_scores_from_shots(shot_scores, spans, n: int) -> np.ndarray:
    out = np.zeros(n)
    for s, (a, b) in zip(shot_scores, spans):
        out[a:b] = s
    return out


def summarize(shot_probs, spans, budget_fraction: float = DEFAULT_BUDGET) -> tuple[np.ndarray, np.ndarray]:
    """(frame mask, frame score curve) for one video from per-shot probabilities."""
    n = spans[-1][1]
    frame = frame_scores_from_shots(shot_probs, spans, n)
    lengths = [b - a for a, b in spans]
    return assemble_summary(shot_scores_from_frames(frame, spans), lengths, budget_fraction), frame


def f_measure(pred, ref) -> tuple[float, float, float]:
    pred = np.asarray(pred, dtype=bool).reshape(-1)
    ref = np.asarray(ref, dtype=bool).reshape(-1)
    if pred.size != ref.size:
        raise ValueError(f"mask lengths differ: {pred.size} vs {ref.size}")
    hit = float(np.sum(pred & ref))
    p = hit / pred.sum() if pred.sum() else 0.0
    r = hit / ref.sum() if ref.sum() else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def protocol_f(pred, refs, mode: str = "max") -> float:
    """Per-annotator F combined by max (SumMe-style) or mean (TVsum-style)."""
    if not refs:
        raise ValueError("protocol_f needs at least one reference summary")
    scores = [f_measure(pred, r)[2] for r in refs]
    if mode == "max":
        return float(max(scores))
    if mode == "mean":
        return float(np.mean(scores))
    raise ValueError(f"mode must be 'max' or 'mean', got {mode!r}")


@dataclass
class RankCorrelation:
    tau: float
    rho: float
    degenerate: bool = False


def rank_correlations(pred_scores, ref_scores) -> RankCorrelation:
    """Kendall tau-b and Spearman rho (Pearson on mid-ranks)."""
    x = np.asarray(pred_scores, dtype=np.float64).reshape(-1)
    y = np.asarray(ref_scores, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"score vectors differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("rank correlation needs at least two scores")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return RankCorrelation(0.0, 0.0, True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tau = stats.kendalltau(x, y, variant="b").statistic
        rho = stats.spearmanr(x, y).statistic
    return RankCorrelation(float(tau), float(rho))


# ---------------------------------------------------------------- reference evaluators

def random_scores(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).random(n)


def human_leave_one_out(user_rows, mode: str = "max") -> dict:
    """Each annotator scored against the others: F of their summary versus the
    remaining summaries, and tau/rho of their row against the mean of the rest."""
    rows = [np.asarray(r, dtype=np.float64) for r in user_rows]
    if len(rows) < 2:
        raise ValueError("leave-one-out needs at least two annotators")
    fs, taus, rhos = [], [], []
    for i, row in enumerate(rows):
        rest = rows[:i] + rows[i + 1:]
        fs.append(protocol_f(row > 0.5, [r > 0.5 for r in rest], mode))
        rc = rank_correlations(row, np.mean(rest, axis=0))
        taus.append(rc.tau)
        rhos.append(rc.rho)
    return {"f": float(np.mean(fs)), "tau": float(np.mean(taus)), "rho": float(np.mean(rhos))}


@dataclass
class VideoEval:
    id: str
    precision: float | None = None
    recall: float | None = None
    f: float | None = None
    tau: float | None = None
    rho: float | None = None
    degenerate_rank: bool = False


@dataclass
class EvalReport:
    mode: str
    videos: list[VideoEval]
    f: float | None = None
    tau: float | None = None
    rho: float | None = None
    split: int | None = None
    baselines: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _nanmean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_video(vid: str, pred_mask, pred_scores, user_summaries=None, ref_scores=None,
                   mode: str = "max") -> VideoEval:
    out = VideoEval(vid)
    if user_summaries:
        per = [f_measure(pred_mask, r) for r in user_summaries]
        pick = int(np.argmax([x[2] for x in per])) if mode == "max" else None
        if pick is not None:
            out.precision, out.recall, out.f = per[pick]
        else:
            out.precision = float(np.mean([x[0] for x in per]))
            out.recall = float(np.mean([x[1] for x in per]))
            out.f = protocol_f(pred_mask, user_summaries, "mean")
    if ref_scores is not None and pred_scores is not None:
        rc = rank_correlations(pred_scores, ref_scores)
        out.tau, out.rho, out.degenerate_rank = rc.tau, rc.rho, rc.degenerate
    return out


def aggregate(videos: list[VideoEval], mode: str, split: int | None = None) -> EvalReport:
    return EvalReport(mode, videos, _nanmean(v.f for v in videos), _nanmean(v.tau for v in videos),
                      _nanmean(v.rho for v in videos), split)


# ---------------------------------------------------------------- cross-validation

@dataclass
class CrossValReport:
    scores: list[float]
    mean: float
    std: float
    splits: list[tuple[list[int], list[int]]]


def random_splits(n: int, k_repeats: int = 5, train_fraction: float = 0.8, seed: int = 0):
    if n < 2:
        raise ValueError(f"need at least 2 videos to split, got {n}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = min(n - 1, max(1, int(round(train_fraction * n))))
    out = []
    for rep in range(k_repeats):
        perm = np.random.default_rng([seed, rep]).permutation(n)
        out.append((sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())))
    return out


def cross_validate(dataset, train_fn: Callable, eval_fn: Callable, k_repeats: int = 5,
                   train_fraction: float = 0.8, seed: int = 0) -> CrossValReport:
    """``train_fn(train_subset, split_id) -> model``; ``eval_fn(model, test_subset, split_id) -> float``."""
    splits = random_splits(len(dataset), k_repeats, train_fraction, seed)
    scores = []
    for i, (tr, te) in enumerate(splits):
        model = train_fn(dataset.subset(tr), i)
        scores.append(float(eval_fn(model, dataset.subset(te), i)))
    return CrossValReport(scores, float(np.mean(scores)), float(np.std(scores)), splits)
