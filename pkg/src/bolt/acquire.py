"""Expected improvement and batch selection from a perturb-plus-uniform candidate pool."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special

from .surrogate import GPModel, PosteriorGaussian, predict

_SQRT_2PI = np.sqrt(2 * np.pi)


class NoIncumbent(ValueError):
    pass


@dataclass(frozen=True)
class AcquisitionConfig:
    batch_size: int = 1
    pool_size: int = 512
    local_fraction: float = 0.5
    perturb_sigma: float = 0.1
    n_anchors: int = 5

    def __post_init__(self):
        if not self.pool_size >= self.batch_size >= 1:
            raise ValueError("need pool_size >= batch_size >= 1")
        if not 0.0 <= self.local_fraction <= 1.0:
            raise ValueError("local_fraction must lie in [0, 1]")


def ei_array(mean, std, best) -> np.ndarray:
    """Expected improvement below ``best`` (minimization), elementwise."""
    shape = np.broadcast_shapes(np.shape(mean), np.shape(std))
    mean, std = np.broadcast_arrays(np.atleast_1d(np.asarray(mean, dtype=float)),
                                    np.atleast_1d(np.asarray(std, dtype=float)))
    improve = best - mean
    out = np.maximum(improve, 0.0)
    ok = std >= 1e-12
    u = improve[ok] / std[ok]
    pdf = np.exp(-0.5 * u * u) / _SQRT_2PI
    out[ok] = improve[ok] * special.ndtr(u) + std[ok] * pdf
    return np.maximum(out, 0.0).reshape(shape)


def expected_improvement(post: PosteriorGaussian, best: float) -> float:
    if post.var < 0:
        raise ValueError("posterior variance must be non-negative")
    return float(ei_array(post.mean, np.sqrt(post.var), best))


def candidate_pool(anchors: np.ndarray, dim: int, cfg: AcquisitionConfig,
                   rng: np.random.Generator) -> np.ndarray:
    n_local = int(round(cfg.local_fraction * cfg.pool_size)) if len(anchors) else 0
    n_uniform = cfg.pool_size - n_local
    parts = []
    if n_local:
        base = anchors[np.arange(n_local) % len(anchors)]
        parts.append(np.clip(base + rng.normal(0.0, cfg.perturb_sigma, base.shape), 0.0, 1.0))
    if n_uniform:
        parts.append(rng.random((n_uniform, dim)))
    return np.vstack(parts)


def rank_pool(model: GPModel, pool: np.ndarray, best: float) -> tuple[np.ndarray, np.ndarray]:
    """Pool indices by descending EI (ties to the lower index) and the EI values."""
    mean, var = predict(model, pool)
    ei = ei_array(mean, np.sqrt(var), best)
    return np.argsort(-ei, kind="stable"), ei


def propose_batch(model: GPModel, anchors, best: Optional[float], cfg: AcquisitionConfig,
                  rng: np.random.Generator,
                  accept: Optional[Callable[[np.ndarray], bool]] = None) -> np.ndarray:
    """Select ``cfg.batch_size`` pool points with the highest EI against ``best``.

    ``anchors`` are the latent points of the current best observations; the
    local half of the pool perturbs them. ``accept`` lets the caller skip pool
    points it already knows (e.g. ones decoding to evaluated candidates);
    skipped points are used only if too few acceptable points remain.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if best is None or anchors.size == 0:
        raise NoIncumbent("batch proposal needs at least one exact observation")
    anchors = anchors[: cfg.n_anchors]
    pool = candidate_pool(anchors, model.dim, cfg, rng)
    order, _ = rank_pool(model, pool, best)
    if accept is None:
        return pool[order[: cfg.batch_size]]
    chosen, skipped = [], []
    for i in order:
        if len(chosen) == cfg.batch_size:
            break
        (chosen if accept(pool[i]) else skipped).append(i)
    chosen += skipped[: cfg.batch_size - len(chosen)]
    return pool[np.array(chosen, dtype=int)]
