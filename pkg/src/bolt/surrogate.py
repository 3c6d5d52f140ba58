"""Exact GP regression with an RBF kernel, grid-searched hyperparameters, and
EM imputation for right-censored targets."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, special

from .core import Exact, Outcome
from .encode import DimensionMismatch

LENGTHSCALE_GRID = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0)
NOISE_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
DEGENERATE_NOISE_FLOOR = 1e-2
JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

EM_MAX_ITERS = 20
EM_TOL = 1e-3

_LOG_2PI = np.log(2 * np.pi)


class NonFiniteInput(ValueError):
    pass


class NoExactData(ValueError):
    pass


@dataclass(frozen=True)
class KernelParams:
    lengthscale: float
    signal_var: float = 1.0
    noise_var: float = 1e-4

    def __post_init__(self):
        for name in ("lengthscale", "signal_var", "noise_var"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")


@dataclass(frozen=True)
class PosteriorGaussian:
    mean: float
    var: float


@dataclass(frozen=True, eq=False)
class GPModel:
    X: np.ndarray
    y: np.ndarray  # standardized targets
    params: KernelParams
    chol: np.ndarray  # lower factor of K + (noise + jitter) I
    alpha: np.ndarray  # (K + noise I)^-1 y
    y_mean: float
    y_std: float
    jitter: float = 0.0
    imputation_history: tuple = field(default=())

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def rbf(A: np.ndarray, B: np.ndarray, params: KernelParams) -> np.ndarray:
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(sq, 0.0, out=sq)
    return params.signal_var * np.exp(-0.5 * sq / params.lengthscale**2)


def _cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    eye = np.eye(K.shape[0])
    for jitter in JITTERS:
        try:
            return linalg.cholesky(K + jitter * eye, lower=True, check_finite=False), jitter
        except linalg.LinAlgError:
            continue
    raise linalg.LinAlgError("kernel matrix is not positive definite even with 1e-4 jitter")


def _check_inputs(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] != y.shape[0] or X.shape[0] < 1:
        raise ValueError(f"need matching, non-empty X and y (got {X.shape[0]} and {y.shape[0]})")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NonFiniteInput("X and y must be finite")
    return X, y


def _standardize(y: np.ndarray, ref: Optional[np.ndarray] = None) -> tuple[float, float, bool]:
    ref = y if ref is None else ref
    mean = float(ref.mean())
    std = float(ref.std())
    degenerate = not std > 1e-12
    return mean, (1.0 if degenerate else std), degenerate


def _condition(X, ys, params: KernelParams, y_mean, y_std, history=()) -> GPModel:
    K = rbf(X, X, params)
    K[np.diag_indices_from(K)] += params.noise_var
    L, jitter = _cholesky(K)
    alpha = linalg.cho_solve((L, True), ys, check_finite=False)
    return GPModel(X, ys, params, L, alpha, y_mean, y_std, jitter, tuple(history))


def _lml(L: np.ndarray, alpha: np.ndarray, ys: np.ndarray) -> float:
    n = ys.shape[0]
    return float(-0.5 * ys @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * _LOG_2PI)


def log_marginal_likelihood(model: GPModel) -> float:
    return _lml(model.chol, model.alpha, model.y)


def _fit_standardized(X, y, y_mean, y_std, degenerate, history=()) -> GPModel:
    ys = (y - y_mean) / y_std
    d = X.shape[1]
    noises = [max(s, DEGENERATE_NOISE_FLOOR) for s in NOISE_GRID] if degenerate else NOISE_GRID
    best, best_lml = None, -np.inf
    # Grid order fixes the tie-break, so fitting is deterministic.
    for ls, noise in itertools.product(LENGTHSCALE_GRID, noises):
        params = KernelParams(ls * np.sqrt(d), 1.0, noise)
        try:
            model = _condition(X, ys, params, y_mean, y_std, history)
        except linalg.LinAlgError:
            continue
        lml = log_marginal_likelihood(model)
        if lml > best_lml:
            best, best_lml = model, lml
    if best is None:
        raise linalg.LinAlgError("no grid point gave a positive-definite kernel matrix")
    return best


def fit(X, y) -> GPModel:
    """Standardize ``y`` and pick the grid hyperparameters with the highest marginal likelihood."""
    X, y = _check_inputs(X, y)
    y_mean, y_std, degenerate = _standardize(y)
    return _fit_standardized(X, y, y_mean, y_std, degenerate)


def predict(model: GPModel, Xq) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized posterior mean and latent variance on the original target scale."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    if Xq.shape[1] != model.dim:
        raise DimensionMismatch(f"model has dimension {model.dim}, query has {Xq.shape[1]}")
    Ks = rbf(Xq, model.X, model.params)
    mean = Ks @ model.alpha
    v = linalg.solve_triangular(model.chol, Ks.T, lower=True, check_finite=False)
    var = model.params.signal_var - (v * v).sum(0)
    var = np.maximum(var, 0.0)
    return model.y_mean + model.y_std * mean, var * model.y_std**2


def posterior(model: GPModel, x) -> PosteriorGaussian:
    mean, var = predict(model, np.asarray(x, dtype=float).reshape(1, -1))
    return PosteriorGaussian(float(mean[0]), float(var[0]))


def truncated_normal_mean(mu, sigma, lower):
    """E[Y | Y >= lower] for Y ~ N(mu, sigma^2), elementwise."""
    args = (mu, sigma, lower)
    mu, sigma, lower = np.broadcast_arrays(*(np.atleast_1d(np.asarray(a, dtype=float)) for a in (mu, sigma, lower)))
    out = np.maximum(mu, lower)
    ok = sigma > 1e-12
    a = (lower[ok] - mu[ok]) / sigma[ok]
    # phi(a) / (1 - Phi(a)) in log space; stable for large a
    hazard = np.exp(-0.5 * a * a - 0.5 * _LOG_2PI - special.log_ndtr(-a))
    out[ok] = mu[ok] + sigma[ok] * hazard
    out = np.maximum(out, lower)
    return float(out[0]) if out.size == 1 and all(np.ndim(a) == 0 for a in args) else out


def _loo_predictive(model: GPModel, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out predictive mean/variance (standardized scale, noise included)."""
    Kinv = linalg.cho_solve((model.chol, True), np.eye(model.chol.shape[0]), check_finite=False)
    diag = np.diag(Kinv)[idx]
    mean = model.y[idx] - model.alpha[idx] / diag
    return mean, 1.0 / diag


def fit_censored(X, outcomes: Sequence[Outcome]) -> GPModel:
    """Fit with right-censored targets imputed by EM.

    Each censored value starts at its threshold. The E-step replaces it with
    the mean of the leave-one-out predictive at that point, truncated below at
    the threshold; the M-step refits on exact plus imputed values. Targets are
    standardized with the exact values only, so the censored placeholders do
    not move the scale they are imputed on. Stops when no imputed value moves
    by more than 1e-3 standard deviations, or after 20 rounds.
    """
    outcomes = list(outcomes)
    y = [o.value if isinstance(o, Exact) else o.tau for o in outcomes]
    censored = [not isinstance(o, Exact) for o in outcomes]
    return fit_censored_arrays(X, y, censored)


def fit_censored_arrays(X, y, censored) -> GPModel:
    """:func:`fit_censored` on raw arrays; ``y`` holds thresholds where ``censored`` is set."""
    X, y = _check_inputs(X, y)
    censored = np.asarray(censored, dtype=bool).reshape(-1)
    if censored.shape[0] != y.shape[0]:
        raise ValueError("need one censoring flag per target")
    exact_mask = ~censored
    if not exact_mask.any():
        raise NoExactData("censored EM needs at least one exact observation")
    cens_idx = np.flatnonzero(censored)
    if cens_idx.size == 0:
        return fit(X, y)

    y_mean, y_std, degenerate = _standardize(y, ref=y[exact_mask])
    tau = y[cens_idx].copy()
    imputed = tau.copy()
    history = [imputed.copy()]
    model = _fit_standardized(X, y, y_mean, y_std, degenerate)
    for _ in range(EM_MAX_ITERS):
        mean_s, var_s = _loo_predictive(model, cens_idx)
        new = truncated_normal_mean(
            y_mean + y_std * mean_s, y_std * np.sqrt(np.maximum(var_s, 0.0)), tau
        )
        delta = float(np.max(np.abs(new - imputed)))
        imputed = new
        history.append(imputed.copy())
        y = y.copy()
        y[cens_idx] = imputed
        model = _fit_standardized(X, y, y_mean, y_std, degenerate)
        if delta < EM_TOL * y_std:
            break
    return GPModel(
        model.X, model.y, model.params, model.chol, model.alpha,
        model.y_mean, model.y_std, model.jitter, tuple(history),
    )
