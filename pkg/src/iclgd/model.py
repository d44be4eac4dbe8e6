"""Regression scenario, estimators and the pointwise test loss.

The data model is y = W1 x + sigma z with x ~ N(0, I_n) and z ~ N(0, I_m).
All estimator functions accept either a single design (X of shape (n, N))
or a stack of designs (X of shape (..., n, N)); batching follows numpy
matmul broadcasting so the Monte Carlo engine can fit thousands of
designs in one call.
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import DimensionError, RegimeError, SingularDesignError


@dataclass(frozen=True)
class ProblemConfig:
    """One regression scenario.

    ``signal2`` is the squared Frobenius distance between the true and the
    base weights, ``sigma2`` the noise variance.
    """

    n: int
    m: int
    N: int
    eta: float = 1.0
    sigma2: float = 0.0
    signal2: float = 1.0

    def __post_init__(self):
        for name in ("n", "m", "N"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        for name in ("eta", "sigma2", "signal2"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {value!r}")

    @property
    def snr(self):
        if self.sigma2 <= 0:
            raise ValueError("snr is undefined when sigma2 == 0")
        return self.signal2 / self.sigma2


@dataclass(frozen=True)
class TaskInstance:
    W0: np.ndarray
    W1: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        if np.shape(self.W0) != np.shape(self.W1) or np.ndim(self.W1) != 2:
            raise DimensionError(
                f"W0 {np.shape(self.W0)} and W1 {np.shape(self.W1)} must be equal-shape matrices"
            )
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def shape(self):
        return self.W1.shape


@dataclass(frozen=True)
class DesignSample:
    X: np.ndarray
    Z: np.ndarray
    xhat: np.ndarray
    zhat: np.ndarray


def make_task(n, m, unit_norm=True, seed=0):
    """Draw true weights with i.i.d. standard normal entries; base weights are zero."""
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    W1 = rng.generator(seed, rng.TASK, n, m).standard_normal((m, n))
    if unit_norm:
        W1 /= np.linalg.norm(W1)
    return TaskInstance(W0=np.zeros((m, n)), W1=W1, sigma=0.0)


def task_for(cfg, seed=0):
    """Task whose weight gap has squared norm ``cfg.signal2`` in a random direction."""
    base = make_task(cfg.n, cfg.m, unit_norm=True, seed=seed)
    return TaskInstance(
        W0=base.W0,
        W1=base.W1 * np.sqrt(cfg.signal2),
        sigma=float(np.sqrt(cfg.sigma2)),
    )


def sample_design(cfg, seed, stream=0):
    g = rng.generator(seed, rng.DESIGN, stream)
    X = g.standard_normal((cfg.n, cfg.N))
    Z = g.standard_normal((cfg.m, cfg.N))
    xhat = g.standard_normal(cfg.n)
    zhat = g.standard_normal(cfg.m)
    return DesignSample(X=X, Z=Z, xhat=xhat, zhat=zhat)


def _check_shapes(task, X, Y):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    m, n = task.shape
    if X.ndim < 2 or Y.ndim < 2:
        raise DimensionError("X and Y must be at least two-dimensional")
    if X.shape[-2] != n:
        raise DimensionError(f"X has {X.shape[-2]} rows, expected n={n}")
    if Y.shape[-2] != m:
        raise DimensionError(f"Y has {Y.shape[-2]} rows, expected m={m}")
    if X.shape[-1] != Y.shape[-1]:
        raise DimensionError(f"X has {X.shape[-1]} columns but Y has {Y.shape[-1]}")
    if X.shape[-1] < 1:
        raise DimensionError("need at least one example pair")
    return X, Y


def gd_one_step(task, X, Y, eta):
    """Weights after one gradient step on the mean squared training loss, from W0."""
    X, Y = _check_shapes(task, X, Y)
    N = X.shape[-1]
    residual = task.W0 @ X - Y
    return task.W0 - (eta / N) * (residual @ np.swapaxes(X, -1, -2))


def _gram_solve(G, rhs, size):
    """Solve G S = rhs for symmetric positive definite G (stacked allowed).

    Rank is judged from the Cholesky diagonal: a pivot at or below
    max(n, N) * eps * (largest pivot) counts as singular.
    """
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("Gram matrix is not positive definite") from exc
    d = np.diagonal(L, axis1=-2, axis2=-1)
    tol = size * np.finfo(float).eps * d.max(axis=-1, keepdims=True)
    if np.any(d <= tol):
        raise SingularDesignError("Gram matrix is numerically rank deficient")
    return np.linalg.solve(G, rhs)


def least_norm_fit(task, X, Y):
    """Interpolating weights closest to W0 in Frobenius norm (requires N < n)."""
    X, Y = _check_shapes(task, X, Y)
    n, N = X.shape[-2:]
    check_regime("least_norm", n, N)
    Xt = np.swapaxes(X, -1, -2)
    residual = Y - task.W0 @ X
    # (Y - W0 X) (X^T X)^-1 X^T, transposed through the symmetric Gram solve
    coef = _gram_solve(Xt @ X, np.swapaxes(residual, -1, -2), max(n, N))
    return task.W0 + np.swapaxes(coef, -1, -2) @ Xt


def least_squares_fit(task, X, Y):
    """Ordinary least-squares weights Y X^T (X X^T)^-1 (requires N > n)."""
    X, Y = _check_shapes(task, X, Y)
    n, N = X.shape[-2:]
    check_regime("least_squares", n, N)
    Xt = np.swapaxes(X, -1, -2)
    Wt = _gram_solve(X @ Xt, X @ np.swapaxes(Y, -1, -2), max(n, N))
    return np.swapaxes(Wt, -1, -2)


def point_loss(W, task, xhat, zhat):
    W = np.asarray(W, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    zhat = np.asarray(zhat, dtype=float)
    m, n = task.shape
    if W.shape != (m, n) or xhat.shape != (n,) or zhat.shape != (m,):
        raise DimensionError(
            f"expected W {(m, n)}, xhat {(n,)}, zhat {(m,)}; "
            f"got {W.shape}, {xhat.shape}, {zhat.shape}"
        )
    r = task.W1 @ xhat + task.sigma * zhat - W @ xhat
    return float(r @ r)


ESTIMATORS = ("gd", "least_norm", "least_squares")


def check_regime(estimator, n, N):
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    if estimator == "least_norm" and N >= n:
        raise RegimeError(f"least-norm fit needs N < n, got N={N}, n={n}")
    if estimator == "least_squares" and N <= n:
        raise RegimeError(f"least-squares fit needs N > n, got N={N}, n={n}")


def fit(estimator, task, X, Y, eta=1.0):
    if estimator == "gd":
        return gd_one_step(task, X, Y, eta)
    if estimator == "least_norm":
        return least_norm_fit(task, X, Y)
    if estimator == "least_squares":
        return least_squares_fit(task, X, Y)
    raise ValueError(f"unknown estimator {estimator!r}")


def ls_estimator_for(n, N):
    """Name of the closed-form-backed least-squares-family estimator for (n, N)."""
    if N < n:
        return "least_norm"
    if N > n:
        return "least_squares"
    raise RegimeError("no least-squares estimator is defined at N == n")
