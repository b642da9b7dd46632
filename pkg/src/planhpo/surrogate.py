"""Exact GP regression on the unit cube with cheap fantasy updates.

Targets are standardized at fit time and the constants are frozen: a
fantasized posterior and a refit on the augmented data with the same
constants are the same model. The Cholesky factor of ``K + (noise + jitter) I``
is kept together with ``z = L^{-1} y`` so that conditioning on one more
point is a single row append.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .core import History, NumericalError, PredictiveDistribution, frozen_array

logger = logging.getLogger(__name__)

KERNELS = ("matern52", "squared_exponential")
_SQRT5 = math.sqrt(5.0)
_STD_FLOOR = 1e-8
_JITTER_LADDER = tuple(10.0 ** e for e in range(-10, -3))

# Search box for hyperparameter fitting, on the natural-log scale.
_LOG_LS_BOUNDS = (math.log(1e-2), math.log(10.0))
_LOG_SIGNAL_BOUNDS = (math.log(1e-2), math.log(100.0))
_LOG_NOISE_BOUNDS = (math.log(1e-6), math.log(1.0))


@dataclass(frozen=True)
class KernelConfig:
    variant: str = "matern52"
    length_scales: tuple[float, ...] = (0.3,)
    signal_variance: float = 1.0
    noise_variance: float = 1e-4

    def __post_init__(self) -> None:
        object.__setattr__(self, "length_scales", tuple(float(v) for v in self.length_scales))
        if self.variant not in KERNELS:
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if not self.length_scales or min(self.length_scales) <= 0:
            raise ValueError("length scales must be positive")
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be > 0")
        # Zero noise is allowed for interpolation tests; jitter keeps K factorable.
        if not self.noise_variance >= 0:
            raise ValueError("noise_variance must be >= 0")

    @classmethod
    def default(cls, dim: int, variant: str = "matern52") -> KernelConfig:
        return cls(variant, (0.3,) * dim, 1.0, 1e-4)

    @property
    def dim(self) -> int:
        return len(self.length_scales)


def _scaled_sq_dist(a: np.ndarray, b: np.ndarray, length_scales: Sequence[float]) -> np.ndarray:
    """Pairwise squared scaled distances via the Gram expansion.

    Inputs are centred on the unit cube first to limit cancellation. Works on
    the trailing two axes, so ``(..., n, d)`` and ``(..., m, d)`` give
    ``(..., n, m)``.
    """
    inv = 1.0 / np.asarray(length_scales, float)
    a = (a - 0.5) * inv
    b = (b - 0.5) * inv
    d2 = np.matmul(a, np.swapaxes(b, -1, -2))
    d2 *= -2.0
    d2 += np.sum(a * a, axis=-1)[..., :, None]
    d2 += np.sum(b * b, axis=-1)[..., None, :]
    return np.maximum(d2, 0.0, out=d2)


def _kernel_from_sq_dist(cfg: KernelConfig, d2: np.ndarray) -> np.ndarray:
    if cfg.variant == "squared_exponential":
        return cfg.signal_variance * np.exp(-0.5 * d2)
    r = np.sqrt(d2)
    out = np.exp(-_SQRT5 * r)
    poly = _SQRT5 * r
    poly += 1.0
    poly += (5.0 / 3.0) * d2
    out *= poly
    out *= cfg.signal_variance
    return out


def kernel_matrix(cfg: KernelConfig, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross-covariance ``k(a_i, b_j)`` (noise-free)."""
    return _kernel_from_sq_dist(cfg, _scaled_sq_dist(np.asarray(a, float), np.asarray(b, float),
                                                     cfg.length_scales))


def cholesky_with_jitter(k: np.ndarray) -> tuple[np.ndarray, float]:
    """Factor ``k``, adding diagonal jitter from 1e-10 to 1e-4 times the mean diagonal on failure."""
    scale = float(np.mean(np.diag(k))) if k.size else 1.0
    for jitter in (0.0,) + tuple(scale * j for j in _JITTER_LADDER):
        try:
            return np.linalg.cholesky(k + jitter * np.eye(len(k))), jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("Cholesky failed after jitter escalation up to 1e-4")


@dataclass(frozen=True, eq=False)
class GpPosterior:
    """GP posterior over standardized targets.

    Attributes:
        train_x: ``(n, d)`` unit-cube inputs, real observations first and
            fantasies after.
        train_y: standardized targets.
        chol: lower Cholesky factor of ``K + (noise + jitter) I``.
        z: ``chol^{-1} train_y``.
    """

    kernel: KernelConfig
    train_x: np.ndarray
    train_y: np.ndarray
    chol: np.ndarray
    z: np.ndarray
    target_mean: float
    target_std: float
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return len(self.train_y)

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]

    @cached_property
    def chol_inv(self) -> np.ndarray:
        """Explicit inverse of ``chol``; prediction then needs one GEMM."""
        return solve_triangular(self.chol, np.eye(self.n), lower=True)

    def to_standard(self, y):
        return (np.asarray(y, float) - self.target_mean) / self.target_std

    def from_standard(self, y_std):
        return self.target_mean + self.target_std * np.asarray(y_std, float)


def standardization(y: np.ndarray) -> tuple[float, float]:
    y = np.asarray(y, float)
    return float(np.mean(y)), max(float(np.std(y)), _STD_FLOOR)


def fit_arrays(
    x_unit: np.ndarray,
    y: np.ndarray,
    kernel: KernelConfig,
    *,
    target_mean: float | None = None,
    target_std: float | None = None,
    jitter: float | None = None,
) -> GpPosterior:
    """Exact GP posterior on raw targets ``y`` at unit-cube inputs.

    Standardization constants and jitter are estimated unless given; passing
    them explicitly is how refit oracles reproduce a fantasized posterior.
    """
    x_unit = np.atleast_2d(np.asarray(x_unit, float))
    y = np.asarray(y, float).ravel()
    if len(y) == 0:
        raise ValueError("cannot fit a GP to an empty history")
    if x_unit.shape != (len(y), kernel.dim):
        raise ValueError(f"inputs of shape {x_unit.shape} do not match {len(y)} targets in {kernel.dim} dims")
    if target_mean is None or target_std is None:
        m, s = standardization(y)
        target_mean = m if target_mean is None else target_mean
        target_std = s if target_std is None else target_std
    y_std = (y - target_mean) / target_std
    k = kernel_matrix(kernel, x_unit, x_unit) + kernel.noise_variance * np.eye(len(y))
    if jitter is None:
        chol, jitter = cholesky_with_jitter(k)
    else:
        try:
            chol = np.linalg.cholesky(k + jitter * np.eye(len(y)))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(str(exc)) from exc
    z = solve_triangular(chol, y_std, lower=True)
    return GpPosterior(kernel, frozen_array(x_unit), frozen_array(y_std), frozen_array(chol),
                       frozen_array(z), float(target_mean), float(target_std), float(jitter))


def fit(history: History, kernel: KernelConfig) -> GpPosterior:
    """GP posterior conditioned on every observation in ``history``."""
    if len(history) == 0:
        raise ValueError("cannot fit a GP to an empty history")
    return fit_arrays(history.unit_xs(), history.ys(), kernel)


def predict_standardized(gp: GpPosterior, x_unit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and latent (noise-free) variance in standardized units."""
    x_unit = np.atleast_2d(np.asarray(x_unit, float))
    v = gp.chol_inv @ kernel_matrix(gp.kernel, gp.train_x, x_unit)
    mean = gp.z @ v
    var = np.maximum(gp.kernel.signal_variance - np.sum(v * v, axis=0), 0.0)
    return mean, var


def predict_arrays(gp: GpPosterior, x_unit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance of ``y`` (noise included) in original units."""
    mean, var = predict_standardized(gp, x_unit)
    return (gp.target_mean + gp.target_std * mean,
            gp.target_std ** 2 * (var + gp.kernel.noise_variance))


def predict(gp: GpPosterior, x_unit: np.ndarray) -> PredictiveDistribution:
    mean, var = predict_arrays(gp, np.asarray(x_unit, float)[None, :])
    return PredictiveDistribution(float(mean[0]), float(var[0]))


def fantasize(gp: GpPosterior, x_unit: np.ndarray, y: float) -> GpPosterior:
    """Condition on an imagined observation ``(x_unit, y)`` without refitting anything.

    Falls back to a full refactorization when the new pivot is not positive.
    """
    x_unit = np.asarray(x_unit, float).reshape(1, -1)
    y_std = (float(y) - gp.target_mean) / gp.target_std
    kx = kernel_matrix(gp.kernel, gp.train_x, x_unit)[:, 0]
    v = solve_triangular(gp.chol, kx, lower=True)
    pivot_sq = gp.kernel.signal_variance + gp.kernel.noise_variance + gp.jitter - v @ v
    new_x = np.vstack([gp.train_x, x_unit])
    new_y = np.append(gp.train_y, y_std)
    if not pivot_sq > 1e-14 * (gp.kernel.signal_variance + gp.kernel.noise_variance):
        logger.debug("degenerate fantasy pivot %.3g; refactorizing", pivot_sq)
        return fit_arrays(new_x, gp.from_standard(new_y), gp.kernel,
                          target_mean=gp.target_mean, target_std=gp.target_std)
    pivot = math.sqrt(pivot_sq)
    n = gp.n
    chol = np.zeros((n + 1, n + 1))
    chol[:n, :n] = gp.chol
    chol[n, :n] = v
    chol[n, n] = pivot
    z = np.append(gp.z, (y_std - v @ gp.z) / pivot)
    return replace(gp, train_x=frozen_array(new_x), train_y=frozen_array(new_y),
                   chol=frozen_array(chol), z=frozen_array(z))


def sample_y(gp: GpPosterior, x_unit: np.ndarray, rng: np.random.Generator) -> float:
    """One draw from the predictive distribution at ``x_unit``."""
    dist = predict(gp, x_unit)
    return dist.mean + math.sqrt(dist.variance) * rng.standard_normal()


# -- hyperparameters ---------------------------------------------------------

def _pack(cfg: KernelConfig) -> np.ndarray:
    return np.log(np.r_[cfg.length_scales, cfg.signal_variance, max(cfg.noise_variance, 1e-300)])


def _unpack(theta: np.ndarray, variant: str) -> KernelConfig:
    e = np.exp(theta)
    return KernelConfig(variant, tuple(e[:-2]), float(e[-2]), float(e[-1]))


def log_marginal_likelihood(
    x_unit: np.ndarray, y_std: np.ndarray, cfg: KernelConfig, *, with_grad: bool = False
):
    """Log evidence of standardized targets; optionally with the gradient in log-parameters."""
    x_unit = np.asarray(x_unit, float)
    y_std = np.asarray(y_std, float)
    n = len(y_std)
    diffs = [(x_unit[:, None, a] - x_unit[None, :, a]) ** 2 / ls ** 2
             for a, ls in enumerate(cfg.length_scales)]
    d2 = np.sum(diffs, axis=0)
    kf = _kernel_from_sq_dist(cfg, d2)
    k = kf + cfg.noise_variance * np.eye(n)
    chol = np.linalg.cholesky(k)  # LinAlgError propagates to the caller
    alpha = cho_solve((chol, True), y_std)
    lml = -0.5 * y_std @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * n * math.log(2 * math.pi)
    if not with_grad:
        return float(lml)
    w = np.outer(alpha, alpha) - cho_solve((chol, True), np.eye(n))
    if cfg.variant == "squared_exponential":
        base = kf
    else:
        r = np.sqrt(d2)
        base = cfg.signal_variance * (5.0 / 3.0) * (1.0 + _SQRT5 * r) * np.exp(-_SQRT5 * r)
    grad = [0.5 * np.sum(w * base * da) for da in diffs]
    grad.append(0.5 * np.sum(w * kf))
    grad.append(0.5 * cfg.noise_variance * np.trace(w))
    return float(lml), np.array(grad)


def fit_hyperparameters(
    history: History,
    *,
    seed: int | np.random.Generator = 0,
    variant: str = "matern52",
    restarts: int = 8,
    max_evals: int = 200,
) -> KernelConfig:
    """Type-II maximum likelihood kernel settings for ``history``.

    Runs ``restarts`` bounded L-BFGS-B searches in log-parameter space (the
    first from the default config, the rest from random log-uniform starts),
    each capped at ``max_evals`` likelihood evaluations. Returns the default
    config if every start fails.
    """
    dim = history.space.dim
    default = KernelConfig.default(dim, variant)
    if len(history) < 2:
        return default
    x = history.unit_xs()
    y = history.ys()
    m, s = standardization(y)
    y_std = (y - m) / s
    return fit_hyperparameters_arrays(x, y_std, seed=seed, variant=variant,
                                      restarts=restarts, max_evals=max_evals)


def fit_hyperparameters_arrays(
    x_unit: np.ndarray,
    y_std: np.ndarray,
    *,
    seed: int | np.random.Generator = 0,
    variant: str = "matern52",
    restarts: int = 8,
    max_evals: int = 200,
) -> KernelConfig:
    dim = x_unit.shape[1]
    default = KernelConfig.default(dim, variant)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bounds = [_LOG_LS_BOUNDS] * dim + [_LOG_SIGNAL_BOUNDS, _LOG_NOISE_BOUNDS]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def objective(theta):
        try:
            lml, grad = log_marginal_likelihood(x_unit, y_std, _unpack(theta, variant), with_grad=True)
        except np.linalg.LinAlgError:
            return 1e25, np.zeros_like(theta)
        if not math.isfinite(lml):
            return 1e25, np.zeros_like(theta)
        return -lml, -grad

    starts = [np.clip(_pack(default), lo, hi)]
    starts += [lo + rng.random(len(lo)) * (hi - lo) for _ in range(restarts - 1)]
    best_theta, best_val = None, math.inf
    for start in starts:
        try:
            res = minimize(objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxfun": max_evals})
        except (ValueError, FloatingPointError):
            continue
        if math.isfinite(res.fun) and res.fun < best_val and res.fun < 1e24:
            best_theta, best_val = np.clip(res.x, lo, hi), res.fun
    if best_theta is None:
        logger.warning("all %d hyperparameter restarts failed; using defaults", restarts)
        return default
    return _unpack(best_theta, variant)
