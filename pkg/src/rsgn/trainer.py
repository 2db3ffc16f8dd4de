"""Training loop: prediction + length losses, policy-gradient reward term, Adam."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .dataio import Dataset, VideoRecord, shot_means, shot_spans
from .diffcore import Tape, Tensor
from .generator import GeneratorOutput, prediction_loss, sample_masks
from .model import RSGN, save_checkpoint
from .reconstructor import REWARD_MODES, episode_reward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-5
    lr_decay_every: int = 30
    lr_decay_rate: float = 0.1
    episodes: int = 10
    epochs: int = 60
    epsilon: float = 0.5
    supervised: bool = True
    baseline: bool = False
    baseline_momentum: float = 0.9
    rewards: str = "both"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.lr_decay_rate <= 0:
            raise ValueError("learning rate and decay rate must be positive, weight decay non-negative")
        if self.lr_decay_every < 1 or self.episodes < 1 or self.epochs < 0:
            raise ValueError("lr_decay_every and episodes must be >= 1, epochs >= 0")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.rewards not in REWARD_MODES:
            raise ValueError(f"rewards must be one of {REWARD_MODES}, got {self.rewards!r}")


def learning_rate_at(cfg: TrainConfig, steps_done: int) -> float:
    return cfg.learning_rate * cfg.lr_decay_rate ** (steps_done // cfg.lr_decay_every)


def regularizer(p, epsilon: float) -> Tensor:
    """(mean(p) - epsilon)^2."""
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    if p.size == 0:
        raise ValueError("regularizer needs at least one probability")
    return dc.square(dc.mean(p) - epsilon)


class Adam:
    """Adam with decoupled weight decay, applied in place to tensor data."""

    def __init__(self, tensors, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for t, m, v in zip(self.tensors, self.m, self.v):
            if weight_decay:
                t.data -= lr * weight_decay * t.data
            g = t.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpisodeTrace:
    mask: np.ndarray
    reward: float
    log_prob: float


@dataclass
class RewardEstimate:
    J: float
    surrogate: Tensor
    aux: list[Tensor]
    traces: list[EpisodeTrace]


RewardFn = Callable[[np.ndarray], "float | tuple[float, Tensor | None]"]


def reinforce_surrogate(p: Tensor, draws: np.ndarray, weights: np.ndarray) -> Tensor:
    """Scalar whose gradient is (1/n) sum_j w_j sum_i grad log pi(a_ji).

    log pi(a) = a log p + (1 - a) log(1 - p); the per-episode sums are folded
    into two coefficient vectors so the tape holds one expression.
    """
    draws = np.asarray(draws, dtype=np.float64)
    n = draws.shape[0]
    w = np.asarray(weights, dtype=np.float64).reshape(n, 1)
    on = (w * draws).sum(axis=0) / n
    off = (w * (1.0 - draws)).sum(axis=0) / n
    col = p.shape
    terms = dc.mul(on.reshape(col), dc.log(p)) + dc.mul(off.reshape(col), dc.log(1.0 - p))
    return dc.sum_(terms)


def estimate_reward_gradient(p: Tensor, reward_fn: RewardFn, episodes: int, rng: np.random.Generator,
                             baseline: float | None = None) -> RewardEstimate:
    """Monte-Carlo policy-gradient estimate of the expected reward.

    Each episode draws a Bernoulli mask from ``p``; ``reward_fn`` sees the
    guarded mask (never empty) and returns the reward, optionally with an
    auxiliary tensor that carries gradient into reconstructor parameters.
    The log-probability uses the raw draw. Rewards enter the surrogate as
    plain numbers, so no gradient flows through them.
    """
    probs = p.data.reshape(-1)
    raw, masks = sample_masks(probs, rng, episodes)
    rewards = np.empty(episodes)
    aux = []
    for j in range(episodes):
        out = reward_fn(masks[j])
        if isinstance(out, tuple):
            rewards[j], extra = out
            if extra is not None:
                aux.append(extra)
        else:
            rewards[j] = out
    weights = rewards if baseline is None else rewards - baseline
    logp = np.where(raw, np.log(probs), np.log1p(-probs)).sum(axis=1)
    traces = [EpisodeTrace(masks[j].astype(np.int64), float(rewards[j]), float(logp[j])) for j in range(episodes)]
    return RewardEstimate(float(rewards.mean()), reinforce_surrogate(p, raw, weights), aux, traces)


@dataclass
class PreparedVideo:
    id: str
    features: np.ndarray
    spans: list[tuple[int, int]]
    targets: np.ndarray | None


def prepare(video: VideoRecord, fps: float = 15.0) -> PreparedVideo:
    spans = shot_spans(video, fps)
    targets = None if video.frame_scores is None else shot_means(video.frame_scores, spans)
    return PreparedVideo(video.id, video.features, spans, targets)


@dataclass
class StepReport:
    lp: float | None
    lr_term: float
    J: float
    total: float
    lr: float


class Trainer:
    def __init__(self, model: RSGN, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.optimizer = Adam(model.tensors(), cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.steps = 0
        self.baseline: float | None = None

    def _reward_fn(self, out: GeneratorOutput, weights: np.ndarray) -> RewardFn:
        shots, R = out.shots.data.copy(), out.R.data.copy()
        model, cfg = self.model, self.cfg

        def reward(mask):
            bundle, ld = episode_reward(shots, R, weights, np.flatnonzero(mask), model.reconstructor,
                                        model.config.edge_mode, cfg.rewards, model.config.normalize_edges)
            return bundle.total, ld

        return reward

    def train_step(self, video: PreparedVideo, reward_fn: RewardFn | None = None) -> StepReport:
        cfg = self.cfg
        if cfg.supervised and video.targets is None:
            raise ValueError(f"video {video.id}: supervised training needs frame scores")
        self.model.zero_grad()
        rng = np.random.default_rng([cfg.seed, 7, self.steps])
        with Tape() as tape:
            out = self.model.forward(video.features, video.spans)
            total = lr_term = regularizer(out.p, cfg.epsilon)
            lp = None
            if cfg.supervised:
                lp = prediction_loss(out.p, video.targets)
                total = lp + total
            J = 0.0
            if cfg.rewards != "none" or reward_fn is not None:
                weights = video.targets if cfg.supervised else out.probs
                fn = reward_fn or self._reward_fn(out, weights)
                base = self.baseline if cfg.baseline else None
                est = estimate_reward_gradient(out.p, fn, cfg.episodes, rng, base)
                J = est.J
                total = total - est.surrogate
                if est.aux:
                    ld = est.aux[0]
                    for extra in est.aux[1:]:
                        ld = ld + extra
                    total = total - dc.mul(ld, 1.0 / cfg.episodes)
                if cfg.baseline:
                    m = cfg.baseline_momentum
                    self.baseline = J if self.baseline is None else m * self.baseline + (1.0 - m) * J
        tape.backward(total)
        lr = learning_rate_at(cfg, self.steps)
        self.optimizer.step(lr, cfg.weight_decay)
        self.steps += 1
        lpv = None if lp is None else lp.item()
        lrv = lr_term.item()
        return StepReport(lpv, lrv, J, (lpv or 0.0) + lrv - J, lr)


@dataclass
class FitResult:
    model: RSGN
    best: RSGN
    log: list[dict] = field(default_factory=list)


def fit(dataset: Dataset, cfg: TrainConfig, model: RSGN | None = None, out_dir=None,
        generator_config=None, model_seed: int | None = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs, one update per video.

    Writes ``final.ckpt``, ``best.ckpt`` (lowest l^p when supervised, highest
    J otherwise) and ``metrics.jsonl`` when ``out_dir`` is given.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if model is None:
        if generator_config is None:
            raise ValueError("need either a model or a generator config")
        model = RSGN.create(generator_config, cfg.seed if model_seed is None else model_seed)
    if cfg.supervised:
        missing = [v.id for v in dataset.videos if v.frame_scores is None]
        if missing:
            raise ValueError(f"supervised training needs frame scores; missing for {missing[:5]}")
    videos = [prepare(v, dataset.fps) for v in dataset.videos]
    trainer = Trainer(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
    best, best_score = model.copy(), None
    history = []
    log.info("lr decays by %g every %d update steps (one step per video)", cfg.lr_decay_rate, cfg.lr_decay_every)
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = np.arange(len(videos))
            if cfg.shuffle:
                np.random.default_rng([cfg.seed, 11, epoch]).shuffle(order)
            reports = [trainer.train_step(videos[i]) for i in order]
            entry = {
                "epoch": epoch,
                "lp": float(np.mean([r.lp for r in reports])) if cfg.supervised else None,
                "lr_term": float(np.mean([r.lr_term for r in reports])),
                "J": float(np.mean([r.J for r in reports])),
                "total": float(np.mean([r.total for r in reports])),
                "lr": learning_rate_at(cfg, trainer.steps),
                "seconds": time.perf_counter() - t0,
            }
            history.append(entry)
            if out is not None:
                metrics_fh.write(json.dumps(entry) + "\n")
                metrics_fh.flush()
            score = -entry["lp"] if cfg.supervised else entry["J"]
            if best_score is None or score > best_score:
                best_score, best = score, model.copy()
                if out is not None:
                    save_checkpoint(best, out / "best.ckpt")
            log.info("epoch %d %s", epoch, {k: v for k, v in entry.items() if k != "epoch"})
    finally:
        if out is not None:
            metrics_fh.close()
    if out is not None:
        save_checkpoint(model, out / "final.ckpt")
        if best_score is None:
            save_checkpoint(model, out / "best.ckpt")
        (out / "train_config.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=1) + "\n")
    return FitResult(model, best, history)
