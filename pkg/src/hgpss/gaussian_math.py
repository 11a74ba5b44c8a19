"""Dense Gaussian numerics shared by the EP and temporal layers.

Squared-exponential kernels on integer grids, Cholesky with a bounded
jitter ladder, standard-normal helpers and the Gaussian/probit identity
``E[Phi(g)] = Phi(m / sqrt(1 + v))`` for ``g ~ N(m, v)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import erfc, log_ndtr

logger = logging.getLogger(__name__)

#: number of x10 escalations after the first non-zero jitter
JITTER_STEPS = 6
#: relative scale of the first jitter when the caller passes ``base_jitter=0``
RELATIVE_BASE_JITTER = 1e-10

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class NonPSDError(np.linalg.LinAlgError):
    """Cholesky failed at every rung of the jitter ladder."""

    def __init__(self, ladder):
        self.ladder = tuple(float(j) for j in ladder)
        super().__init__(
            "matrix is not positive definite; tried jitters %s" % (self.ladder,)
        )


@dataclass(frozen=True)
class KernelParams:
    """Amplitude (variance units) and lengthscale (index units) of an SE kernel."""

    amplitude: float
    lengthscale: float

    def __post_init__(self):
        if not (self.amplitude > 0 and math.isfinite(self.amplitude)):
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")
        if not (self.lengthscale > 0 and math.isfinite(self.lengthscale)):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")


def se_kernel_matrix(params: KernelParams, n: int) -> np.ndarray:
    """Squared-exponential Gram matrix on the grid ``0..n-1``.

    ``M[i, j] = amplitude * exp(-(i - j)**2 / (2 * lengthscale**2))``.
    The result is exactly symmetric and has a constant diagonal.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    idx = np.arange(n, dtype=float)
    d2 = (idx[:, None] - idx[None, :]) ** 2
    m = params.amplitude * np.exp(-d2 / (2.0 * params.lengthscale**2))
    # mirror the upper triangle so symmetry is bitwise
    upper = np.triu(m)
    return upper + np.triu(m, 1).T


@dataclass(frozen=True)
class CholResult:
    factor: np.ndarray
    jitter: float


def jitter_ladder(m: np.ndarray, base_jitter: float = 0.0) -> list[float]:
    """Jitters tried by :func:`chol_psd`, starting with zero."""
    base = base_jitter
    if base <= 0:
        base = RELATIVE_BASE_JITTER * max(float(np.mean(np.diag(m))), 1e-300)
    return [0.0] + [base * 10.0**k for k in range(JITTER_STEPS + 1)]


def chol_psd(m: np.ndarray, base_jitter: float = 0.0) -> CholResult:
    """Lower Cholesky factor of ``m + j*I`` with the smallest workable ``j``.

    ``j`` runs through ``0, b, 10b, ..., 1e6 b`` where ``b`` is
    ``base_jitter`` or, when that is zero, ``1e-10`` times the mean diagonal.
    Any non-zero jitter is logged at WARNING level.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonPSDError([])
    ladder = jitter_ladder(m, base_jitter)
    eye = np.eye(m.shape[0])
    for j in ladder:
        try:
            factor = linalg.cholesky(m + j * eye if j else m, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if j:
            logger.warning("chol_psd: added jitter %.3g to a %dx%d matrix", j, *m.shape)
        return CholResult(factor, j)
    raise NonPSDError(ladder)


def chol_solve(factor: np.ndarray, b: np.ndarray) -> np.ndarray:
    return linalg.cho_solve((factor, True), b, check_finite=False)


def std_normal_cdf(x):
    """Standard normal CDF through ``erfc`` so both tails keep full precision."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / _SQRT2)


def std_normal_logpdf(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - _LOG_SQRT_2PI


def std_normal_logcdf(x):
    return log_ndtr(x)


def normal_logpdf(x, mean, var):
    """log N(x; mean, var) for scalar or array arguments."""
    return -0.5 * (np.asarray(x) - mean) ** 2 / var - 0.5 * np.log(var) - _LOG_SQRT_2PI


def expected_probit(mean, variance):
    """``E[Phi(g)]`` for ``g ~ N(mean, variance)``, i.e. ``Phi(mean / sqrt(1 + variance))``."""
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        raise ValueError("variance must be non-negative")
    return std_normal_cdf(np.asarray(mean, dtype=float) / np.sqrt(1.0 + variance))


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)
