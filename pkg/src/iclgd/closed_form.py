"""Exact moments of the test loss for one-step gradient descent and least squares.

Notation used throughout:

- ``n`` input dimension, ``N`` number of example pairs, ``m`` output dimension
- ``signal2`` = ||W1 - W0||_F^2, ``sigma2`` = noise variance
- ``a`` = eta / N, the effective step on the unnormalized Gram matrix Q = X X^T

Second moments are available for a single output (m = 1) only.  Every
function returns plain floats; regime information travels in the
``validity`` tag of :class:`LossMoments`.
"""

import enum
import math
from dataclasses import dataclass
from typing import Optional

from .errors import RegimeError, UnsupportedError

INF = math.inf


class Validity(str, enum.Enum):
    VALID = "valid"
    DIVERGENT = "divergent"
    UNDEFINED = "undefined-regime"


@dataclass(frozen=True)
class LossMoments:
    mean: float
    second_moment: Optional[float] = None
    variance: Optional[float] = None
    validity: Validity = Validity.VALID


@dataclass(frozen=True)
class Breakdown:
    """Moment split into signal-only, mixed and noise-only groups of terms."""

    systematic: float
    interaction: float
    noise: float

    @property
    def total(self):
        return self.systematic + self.interaction + self.noise


@dataclass(frozen=True)
class BoundResult:
    delta: float
    mean_term: float
    deviation_term: float
    bound: float
    variance: float


def _check_dims(**dims):
    for name, value in dims.items():
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")


def _check_nonneg(**values):
    for name, value in values.items():
        if not value >= 0:
            raise ValueError(f"{name} must be nonnegative, got {value!r}")


# ---------------------------------------------------------------------------
# one-step gradient descent
# ---------------------------------------------------------------------------


def _gd_mean_parts(n, N, m, eta, signal2, sigma2):
    systematic = signal2 * ((1 - eta) ** 2 + eta**2 * (n + 1) / N)
    # every output row carries its own training noise, hence the factor m on both terms
    noise = sigma2 * m * (1 + eta**2 * n / N)
    return systematic, noise


def gd_expected_loss(n, N, m, eta, signal2, sigma2):
    _check_dims(n=n, N=N, m=m)
    _check_nonneg(eta=eta, signal2=signal2, sigma2=sigma2)
    return LossMoments(mean=sum(_gd_mean_parts(n, N, m, eta, signal2, sigma2)))


def gd_optimal_eta(n, N, snr_inverse=0.0):
    """Step size minimizing the expected loss; snr_inverse = sigma2 / signal2.

    Passing ``snr_inverse=0`` gives the noise-agnostic rule N / (N + n + 1).
    """
    _check_dims(n=n, N=N)
    _check_nonneg(snr_inverse=snr_inverse)
    return N / (N + n + 1 + snr_inverse * n)


def gd_sys_second_moment(n, N, eta, trB, trB2):
    """E[l^2] of the noiseless loss, with B = (W1 - W0)^T (W1 - W0)."""
    _check_dims(n=n, N=N)
    a = eta / N
    poly = 1 + a * N * (
        -4
        + a * (2 * (5 + n + 3 * N) + a * (2 + N) * (3 + n + N) * (-4 + a * (5 + n + N)))
    )
    return poly * (2 * trB2 + trB**2)


def _gd_second_moment_parts(n, N, eta, signal2, sigma2):
    """(systematic, interaction, noise) groups of E[l^2] for m = 1."""
    a = eta / N
    s, v = signal2, sigma2
    # E[Q^3] = cube_coef * I
    cube_coef = N * (4 + n**2 + 3 * n * (1 + N) + N * (3 + N))
    systematic = gd_sys_second_moment(n, N, eta, s, s * s)
    interaction = (
        12 * a**2 * v * s * (N - 2 * a * N * (N + n + 1) + a**2 * cube_coef)
        + 6 * a**2 * v * s * (N * n - 2 * a * N * (2 + N * n) + a**2 * N * (1 + n + N) * (4 + n * N))
        + 6 * v * s * (1 - 2 * a * N + a**2 * N * (N + n + 1))
    )
    noise = v * v * (
        6 * a**4 * N * n * (N + n + 1)
        + 3 * a**4 * N * (2 * n + N * n**2)
        + 6 * a**2 * n * N
        + 3
    )
    return systematic, interaction, noise


def gd_second_moment_m1(n, N, eta, signal2, sigma2):
    _check_dims(n=n, N=N)
    _check_nonneg(eta=eta, signal2=signal2, sigma2=sigma2)
    mean = gd_expected_loss(n, N, 1, eta, signal2, sigma2).mean
    second = sum(_gd_second_moment_parts(n, N, eta, signal2, sigma2))
    return LossMoments(mean=mean, second_moment=second, variance=second - mean * mean)


def gd_variance_eta1(n, N, signal2, sigma2):
    """Loss variance at unit step size, in the grouped form used by the bound."""
    s, v = signal2, sigma2
    return (
        v * v * (2 + (12 * n + 6 * n**2) / N**3 + (6 * n + 2 * n**2) / N**2 + 4 * n / N)
        + v * s * (
            (72 + 60 * n + 12 * n**2) / N**3 + (12 + 16 * n + 4 * n**2) / N**2 + (4 + 4 * n) / N
        )
        + s * s * ((90 + 48 * n + 6 * n**2) / N**3 + (20 + 10 * n + 2 * n**2) / N**2)
    )


def _check_delta(delta):
    if not 0 < delta <= 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta!r}")


def gd_chebyshev_bound(n, N, delta, signal2, sigma2, large_n=False):
    """Loss level exceeded with probability at most delta (unit step size).

    With ``large_n`` the noiseless bound is replaced by its large-n form
    (n / N) (1 + sqrt(2 / delta)) signal2.
    """
    _check_dims(n=n, N=N)
    _check_nonneg(signal2=signal2, sigma2=sigma2)
    _check_delta(delta)
    if large_n:
        if sigma2 > 0:
            raise UnsupportedError("the large-n bound is only available for sigma2 == 0")
        mean_term = n / N * signal2
        variance = 2 * mean_term**2
    else:
        mean_term = (signal2 * (n + 1) + sigma2 * (n + N)) / N
        variance = gd_variance_eta1(n, N, signal2, sigma2)
    deviation = math.sqrt(variance / delta)
    return BoundResult(
        delta=delta,
        mean_term=mean_term,
        deviation_term=deviation,
        bound=mean_term + deviation,
        variance=variance,
    )


# ---------------------------------------------------------------------------
# least norm (N < n) and least squares (N > n)
# ---------------------------------------------------------------------------


def _ls_mean_parts(n, N, signal2, sigma2):
    """(systematic, noise, divergent) for the expected loss."""
    if N == n:
        raise RegimeError("no closed form for the expected loss at N == n")
    if N < n:
        systematic = signal2 * (1 - N / n)
        denom = n - N - 1
    else:
        systematic = 0.0
        denom = N - n - 1
    if sigma2 == 0:
        return systematic, 0.0, False
    if denom <= 0:
        return systematic, INF, True
    ratio = N / denom if N < n else n / denom
    return systematic, sigma2 * (1 + ratio), False


def ls_expected_loss(n, N, signal2, sigma2):
    _check_dims(n=n, N=N)
    _check_nonneg(signal2=signal2, sigma2=sigma2)
    systematic, noise, divergent = _ls_mean_parts(n, N, signal2, sigma2)
    if divergent:
        return LossMoments(mean=INF, validity=Validity.DIVERGENT)
    return LossMoments(mean=systematic + noise)


def _ls_second_moment_parts(n, N, signal2, sigma2):
    """(systematic, interaction, noise) for E[l^2], or None outside the windows."""
    s, v = signal2, sigma2
    if N > n + 3:
        return 0.0, 0.0, v * v * 3 * (N - 1) * (N - 3) / ((N - n - 1) * (N - n - 3))
    if n >= N + 3:
        if v == 0:
            noise = 0.0
        elif n == N + 3:
            noise = INF
        else:
            noise = v * v * 3 * (n - 1) * (n - 3) / ((n - N - 1) * (n - N - 3))
        interaction = 6 * v * s * (n - 1) * (n - N) / (n * (n - N - 1))
        systematic = 3 * s * s * (n - N) * (n - N + 2) / (n * (n + 2))
        return systematic, interaction, noise
    return None


def ls_second_moment(n, N, signal2, sigma2):
    _check_dims(n=n, N=N)
    _check_nonneg(signal2=signal2, sigma2=sigma2)
    parts = _ls_second_moment_parts(n, N, signal2, sigma2)
    if parts is None:
        mean = math.nan
        if N != n:
            mean = ls_expected_loss(n, N, signal2, sigma2).mean
        return LossMoments(mean=mean, validity=Validity.UNDEFINED)
    mean = ls_expected_loss(n, N, signal2, sigma2).mean
    second = sum(parts)
    if math.isinf(second):
        return LossMoments(mean=mean, second_moment=INF, variance=INF, validity=Validity.DIVERGENT)
    return LossMoments(mean=mean, second_moment=second, variance=second - mean * mean)


def ls_chebyshev_bound(n, N, delta, signal2, sigma2):
    """Chebyshev bound for least norm / least squares, from the exact variance."""
    _check_delta(delta)
    moments = ls_second_moment(n, N, signal2, sigma2)
    if moments.validity is not Validity.VALID:
        raise RegimeError(
            f"least-squares variance is only known for N > n + 3 or n >= N + 3 (n={n}, N={N})"
        )
    variance = max(moments.variance, 0.0)
    deviation = math.sqrt(variance / delta)
    return BoundResult(
        delta=delta,
        mean_term=moments.mean,
        deviation_term=deviation,
        bound=moments.mean + deviation,
        variance=variance,
    )


# ---------------------------------------------------------------------------
# component breakdown
# ---------------------------------------------------------------------------


def breakdown(estimator, moment, n, N, eta=1.0, signal2=1.0, sigma2=1.0, m=1):
    """Split the first or second loss moment into its three term groups.

    ``estimator`` is ``"gd"`` or ``"ls"``; ``moment`` is ``"first"`` or
    ``"second"``.  Raises :class:`RegimeError` where the underlying formula
    is undefined.
    """
    _check_dims(n=n, N=N, m=m)
    _check_nonneg(eta=eta, signal2=signal2, sigma2=sigma2)
    if moment not in ("first", "second"):
        raise ValueError(f"moment must be 'first' or 'second', got {moment!r}")
    if estimator == "gd":
        if moment == "first":
            systematic, noise = _gd_mean_parts(n, N, m, eta, signal2, sigma2)
            return Breakdown(systematic=systematic, interaction=0.0, noise=noise)
        if m != 1:
            raise UnsupportedError("second moments are only available for m == 1")
        return Breakdown(*_gd_second_moment_parts(n, N, eta, signal2, sigma2))
    if estimator == "ls":
        if moment == "first":
            systematic, noise, _ = _ls_mean_parts(n, N, signal2, sigma2)
            return Breakdown(systematic=systematic, interaction=0.0, noise=noise)
        parts = _ls_second_moment_parts(n, N, signal2, sigma2)
        if parts is None:
            raise RegimeError(
                f"least-squares second moment is undefined for n={n}, N={N}"
            )
        return Breakdown(*parts)
    raise ValueError(f"estimator must be 'gd' or 'ls', got {estimator!r}")
