"""Summary-graph reconstructor: content and dependency rewards for a candidate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .generator import GeneratorConfig, ParamSet, _uniform, edge_weights, graph_convolve

REWARD_MODES = ("none", "content", "dep", "both")


@dataclass
class ReconstructorParams(ParamSet):
    w_phi: Tensor
    w_psi: Tensor
    w_e: Tensor
    w_tau: Tensor
    w_g: Tensor


def reconstructor_shapes(cfg: GeneratorConfig) -> dict[str, tuple[int, int]]:
    s, e, r = cfg.shot_dim, cfg.embed_dim, cfg.relation_dim
    return {"w_phi": (s, e), "w_psi": (s, e), "w_e": (2 * e, 1), "w_tau": (s, e), "w_g": (e, r)}


def init_reconstructor(cfg: GeneratorConfig, seed: int | np.random.Generator = 1) -> ReconstructorParams:
    rng = np.random.default_rng(seed)
    return ReconstructorParams(**{
        k: Tensor(_uniform(rng, shape, shape[0]), requires_grad=True, name=k + "_prime")
        for k, shape in reconstructor_shapes(cfg).items()
    })


@dataclass
class RewardBundle:
    content: float
    dependency: float

    @property
    def total(self) -> float:
        return self.content + self.dependency


def content_vector(shots, weights, count: int) -> np.ndarray:
    """(1/count) * sum_s weight_s * s over the rows of ``shots``."""
    s = np.asarray(shots, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError("content vector needs a non-empty shot set")
    if w.size != s.shape[0]:
        raise ValueError(f"{w.size} weights for {s.shape[0]} shots")
    return (w[:, None] * s).sum(axis=0) / count


def content_reward(c_v, c_s) -> float:
    c_v = np.asarray(c_v, dtype=np.float64)
    c_s = np.asarray(c_s, dtype=np.float64)
    if c_v.shape != c_s.shape:
        raise ValueError(f"content vectors differ in length: {c_v.shape} vs {c_s.shape}")
    return float(np.exp(-np.sum((c_v - c_s) ** 2)))


def summary_graph_encode(selected: Tensor, params: ReconstructorParams, mode: str,
                         normalize: bool = False) -> Tensor:
    """R' for the selected shot rows, built with the primed parameters."""
    selected = selected if isinstance(selected, Tensor) else Tensor(selected)
    if selected.shape[0] == 0:
        raise ValueError("summary graph needs at least one selected shot")
    E = edge_weights(selected, mode, params)
    _, R = graph_convolve(E, selected, params, normalize)
    return R


def dependency_reward(R_K, R_prime) -> Tensor:
    """Mean over selected shots of exp(-||r_i - r'_i||^2), as a 1-element tensor
    (differentiable with respect to whatever produced ``R_prime``)."""
    R_K = R_K if isinstance(R_K, Tensor) else Tensor(R_K)
    R_prime = R_prime if isinstance(R_prime, Tensor) else Tensor(R_prime)
    if R_K.shape != R_prime.shape or R_K.data.ndim != 2:
        raise dc.DimensionError(f"relation rows differ: {R_K.shape} vs {R_prime.shape}")
    gaps = dc.sum_(dc.square(R_K - R_prime), axis=1)
    return dc.mean(dc.exp(dc.neg(gaps)))


def episode_reward(shots: np.ndarray, R: np.ndarray, weights: np.ndarray, K: np.ndarray,
                   params: ReconstructorParams, mode: str, components: str = "both",
                   normalize: bool = False) -> tuple[RewardBundle, Tensor | None]:
    """Rewards for one candidate.

    Generator quantities (``shots``, ``R``, ``weights``) come in as plain
    arrays, so nothing here can carry gradient back into the generator. The
    returned tensor is l^d as a function of the primed parameters (None when
    the dependency term is switched off).
    """
    if components not in REWARD_MODES:
        raise ValueError(f"reward components must be one of {REWARD_MODES}, got {components!r}")
    K = np.asarray(K, dtype=np.int64)
    lc = ld = 0.0
    ld_tensor = None
    if components in ("content", "both"):
        c_v = content_vector(shots, weights, shots.shape[0])
        c_s = content_vector(shots[K], weights[K], K.size)
        lc = content_reward(c_v, c_s)
    if components in ("dep", "both"):
        R_prime = summary_graph_encode(Tensor(shots[K]), params, mode, normalize)
        ld_tensor = dependency_reward(Tensor(R[K]), R_prime)
        ld = ld_tensor.item()
    return RewardBundle(lc, ld), ld_tensor
