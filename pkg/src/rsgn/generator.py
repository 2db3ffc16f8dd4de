"""Sequence-graph summary generator.

Frames of each shot go through a bidirectional LSTM (state reset at every
shot boundary); the shot features become nodes of a complete graph whose
edge weights measure dissimilarity; one graph convolution produces relation
vectors, and a logistic head turns [embedded shot, relation] into the
probability that the shot is a key shot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

DELTA = 1e-6
EDGE_MODES = ("dot", "gaussian", "concat")
# sg: BiLSTM + graph (full model); s: BiLSTM only; g / mg: mean-pooled shots + graph
ENCODERS = ("sg", "s", "g", "mg")


@dataclass
class GeneratorConfig:
    input_dim: int
    hidden: int = 256
    embed_dim: int | None = None
    relation_dim: int | None = None
    edge_mode: str = "dot"
    encoder: str = "sg"
    normalize_edges: bool = False

    def __post_init__(self):
        if self.edge_mode not in EDGE_MODES:
            raise ValueError(f"edge mode must be one of {EDGE_MODES}, got {self.edge_mode!r}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.input_dim < 1 or self.hidden < 1:
            raise ValueError("input_dim and hidden must be positive")
        if self.embed_dim is None:
            self.embed_dim = self.hidden
        if self.relation_dim is None:
            self.relation_dim = self.hidden

    @property
    def recurrent(self) -> bool:
        return self.encoder in ("sg", "s")

    @property
    def uses_graph(self) -> bool:
        return self.encoder != "s"

    @property
    def shot_dim(self) -> int:
        return 2 * self.hidden if self.recurrent else self.input_dim


class ParamSet:
    """Dataclass mixin: ordered, named Tensor fields."""

    def named(self) -> list[tuple[str, Tensor]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def copy(self):
        return type(self)(**{k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
                             for k, t in self.named()})


@dataclass
class GeneratorParams(ParamSet):
    lstm_fw_w: Tensor
    lstm_fw_b: Tensor
    lstm_bw_w: Tensor
    lstm_bw_b: Tensor
    w_phi: Tensor
    w_psi: Tensor
    w_e: Tensor
    w_tau: Tensor
    w_g: Tensor
    w_p: Tensor
    b_p: Tensor


def param_shapes(cfg: GeneratorConfig) -> dict[str, tuple[int, int]]:
    d, h, e, r, s = cfg.input_dim, cfg.hidden, cfg.embed_dim, cfg.relation_dim, cfg.shot_dim
    return {
        "lstm_fw_w": (d + h, 4 * h),
        "lstm_fw_b": (1, 4 * h),
        "lstm_bw_w": (d + h, 4 * h),
        "lstm_bw_b": (1, 4 * h),
        "w_phi": (s, e),
        "w_psi": (s, e),
        "w_e": (2 * e, 1),
        "w_tau": (s, e),
        "w_g": (e, r),
        "w_p": (e + r, 1),
        "b_p": (1, 1),
    }


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_generator(cfg: GeneratorConfig, seed: int | np.random.Generator = 0) -> GeneratorParams:
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    h = cfg.hidden
    values = {}
    for name, shape in shapes.items():
        if name in ("lstm_fw_b", "lstm_bw_b"):
            b = _uniform(rng, shape, cfg.input_dim + h)
            b[:, h:2 * h] = 1.0  # forget gate
            values[name] = b
        elif name == "b_p":
            values[name] = _uniform(rng, shape, cfg.embed_dim + cfg.relation_dim)
        else:
            values[name] = _uniform(rng, shape, shape[0])
    return GeneratorParams(**{k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()})


# ---------------------------------------------------------------- sequence stage

def _lstm(steps, masks, w: Tensor, b: Tensor, hidden: int) -> Tensor:
    """Run a batch of sequences; rows whose mask is 0 keep their state."""
    m = steps[0].shape[0]
    h = Tensor(np.zeros((m, hidden)))
    c = Tensor(np.zeros((m, hidden)))
    for x_t, mask in zip(steps, masks):
        z = dc.concat(Tensor(x_t), h, axis=1)
        gates = dc.matmul(z, w) + b
        i = dc.sigmoid(dc.cols(gates, 0, hidden))
        f = dc.sigmoid(dc.cols(gates, hidden, 2 * hidden))
        o = dc.sigmoid(dc.cols(gates, 2 * hidden, 3 * hidden))
        g = dc.tanh(dc.cols(gates, 3 * hidden, 4 * hidden))
        c_new = f * c + i * g
        h_new = o * dc.tanh(c_new)
        if mask is None:
            h, c = h_new, c_new
        else:
            keep = 1.0 - mask
            h = mask * h_new + keep * h
            c = mask * c_new + keep * c
    return h


def _padded(features: np.ndarray, spans, reverse: bool):
    lengths = [b - a for a, b in spans]
    if min(lengths) < 1:
        raise ValueError("every shot needs at least one frame")
    m, longest, d = len(spans), max(lengths), features.shape[1]
    batch = np.zeros((longest, m, d))
    for row, (a, b) in enumerate(spans):
        chunk = features[a:b]
        batch[: b - a, row] = chunk[::-1] if reverse else chunk
    steps = [batch[t] for t in range(longest)]
    lens = np.asarray(lengths)[:, None]
    masks = [None if (lens > t).all() else (lens > t).astype(np.float64) for t in range(longest)]
    return steps, masks


def encode_shots(features, spans, params: GeneratorParams, cfg: GeneratorConfig) -> Tensor:
    """Shot feature matrix, one row per span (0-based half-open frame ranges)."""
    x = np.asarray(features, dtype=np.float64)
    if not spans:
        raise ValueError("no shots to encode")
    if not cfg.recurrent:
        for a, b in spans:
            if b <= a:
                raise ValueError("every shot needs at least one frame")
        return Tensor(np.stack([x[a:b].mean(axis=0) for a, b in spans]))
    steps, masks = _padded(x, spans, reverse=False)
    fw = _lstm(steps, masks, params.lstm_fw_w, params.lstm_fw_b, cfg.hidden)
    steps, masks = _padded(x, spans, reverse=True)
    bw = _lstm(steps, masks, params.lstm_bw_w, params.lstm_bw_b, cfg.hidden)
    return dc.concat(fw, bw, axis=1)


def encode_shot(frames, params: GeneratorParams, cfg: GeneratorConfig) -> Tensor:
    """Encode one shot; returns a 1 x shot_dim row."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("cannot encode an empty shot")
    return encode_shots(x, [(0, x.shape[0])], params, cfg)


# ---------------------------------------------------------------- graph stage

def edge_weights(shots: Tensor, mode: str, params) -> Tensor:
    """Complete-graph edge matrix from embedded pairs (diagonal included).

    ``params`` needs ``w_phi``, ``w_psi`` and ``w_e``; the generator and the
    reconstructor each pass their own.
    """
    phi = dc.matmul(shots, params.w_phi)
    psi = dc.matmul(shots, params.w_psi)
    if mode == "dot":
        return dc.neg(dc.matmul(phi, dc.transpose(psi)))
    if mode == "gaussian":
        return dc.exp(dc.neg(dc.matmul(phi, dc.transpose(psi))))
    if mode == "concat":
        e = phi.shape[1]
        left = dc.matmul(phi, dc.take_rows(params.w_e, np.arange(e)))
        right = dc.matmul(psi, dc.take_rows(params.w_e, np.arange(e, 2 * e)))
        return left + dc.transpose(right)
    raise ValueError(f"edge mode must be one of {EDGE_MODES}, got {mode!r}")


def graph_convolve(E: Tensor, shots: Tensor, params, normalize: bool = False) -> tuple[Tensor, Tensor]:
    """Returns (S, R) with S the embedded nodes and R = ReLU(E S W_G)."""
    m = shots.shape[0]
    if E.shape != (m, m):
        raise dc.DimensionError(f"edge matrix {E.shape} does not match {m} shots")
    S = dc.matmul(shots, params.w_tau)
    if normalize:
        E = dc.row_softmax(E)
    R = dc.relu(dc.order_free_matmul(E, dc.matmul(S, params.w_g)))
    return S, R


def predict_probs(S: Tensor, R: Tensor, params: GeneratorParams) -> Tensor:
    """Key-shot probabilities as an m x 1 column, clamped to [DELTA, 1 - DELTA]."""
    if S.shape[0] != R.shape[0]:
        raise dc.DimensionError(f"S has {S.shape[0]} rows but R has {R.shape[0]}")
    logits = dc.matmul(dc.concat(S, R, axis=1), params.w_p) + params.b_p
    return dc.clamp(dc.sigmoid(logits), DELTA, 1.0 - DELTA)


@dataclass
class GeneratorOutput:
    shots: Tensor
    E: Tensor | None
    S: Tensor
    R: Tensor
    p: Tensor

    @property
    def probs(self) -> np.ndarray:
        return self.p.data[:, 0].copy()


def forward(features, spans, params: GeneratorParams, cfg: GeneratorConfig) -> GeneratorOutput:
    shots = encode_shots(features, spans, params, cfg)
    if cfg.uses_graph:
        E = edge_weights(shots, cfg.edge_mode, params)
        S, R = graph_convolve(E, shots, params, cfg.normalize_edges)
    else:
        E = None
        S = dc.matmul(shots, params.w_tau)
        R = Tensor(np.zeros((len(spans), cfg.relation_dim)))
    return GeneratorOutput(shots, E, S, R, predict_probs(S, R, params))


# ---------------------------------------------------------------- sampling and loss

@dataclass
class SummaryCandidate:
    p: np.ndarray
    alpha: np.ndarray
    # 0-based, sorted
    K: np.ndarray = field(init=False)
    # the raw Bernoulli draw before the empty-summary guard
    sampled: np.ndarray | None = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.int64)
        self.K = np.flatnonzero(self.alpha)
        if self.sampled is None:
            self.sampled = self.alpha.copy()


def guard_empty(masks: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Force the highest-probability shot (lowest index on ties) into any empty row."""
    masks = masks.copy()
    empty = ~masks.any(axis=-1)
    if np.any(empty):
        masks[empty, int(np.argmax(p))] = True
    return masks


def sample_masks(p, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` independent Bernoulli masks; returns (raw draws, guarded masks)."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    raw = rng.random((n, p.size)) < p
    return raw, guard_empty(raw, p)


def sample_mask(p, seed: int | np.random.Generator) -> SummaryCandidate:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    raw, guarded = sample_masks(p, np.random.default_rng(seed), 1)
    return SummaryCandidate(p.copy(), guarded[0].astype(np.int64), raw[0].astype(np.int64))


def prediction_loss(p: Tensor, g) -> Tensor:
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64).reshape(-1, 1))
    g = np.asarray(g, dtype=np.float64).reshape(-1, 1)
    if p.size != g.size:
        raise dc.DimensionError(f"prediction has {p.size} entries but target has {g.size}")
    return dc.mean(dc.square(p - g.reshape(p.shape)))
