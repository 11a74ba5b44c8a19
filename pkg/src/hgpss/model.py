"""Generative model: hierarchical GP spike-and-slab regression.

For ``t = 1..T``::

    mu_1 ~ N(0, W),  mu_t ~ N(mu_{t-1}, W)
    gamma_t ~ N(mu_t, Sigma0)
    omega_it ~ Bernoulli(Phi(gamma_it))        # omega = 1 is the spike
    beta_it = 0 if omega_it else N(0, slab_var)
    y_t ~ N(X beta_t, noise_var I)

``W`` and ``Sigma0`` are squared-exponential kernels over coefficient index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian_math import KernelParams, chol_psd, se_kernel_matrix, std_normal_cdf

#: omega = 1 selects the point mass at zero; Phi(gamma) is the *spike* probability.
#: The one-level baseline literature uses the opposite convention.
INDICATOR_MEANS_SPIKE = True

#: bit generator used for every seeded stream; written into run outputs
RNG_ALGORITHM = "numpy.random.PCG64"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class Hyperparameters:
    n: int
    k: int
    t_steps: int
    noise_var: float = 1e-2
    slab_var: float = 1.0
    spatial_kernel: KernelParams = KernelParams(1.0, 3.0)
    temporal_kernel: KernelParams = KernelParams(0.25, 3.0)

    def __post_init__(self):
        for name in ("n", "k", "t_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be positive")
        if not self.slab_var > 0:
            raise ValueError("slab_var must be positive")

    def spatial_cov(self) -> np.ndarray:
        return se_kernel_matrix(self.spatial_kernel, self.n)

    def temporal_cov(self) -> np.ndarray:
        return se_kernel_matrix(self.temporal_kernel, self.n)


@dataclass(frozen=True)
class LatentTrajectory:
    mu: np.ndarray
    gamma: np.ndarray
    omega: np.ndarray
    beta: np.ndarray


def make_sensing_matrix(hyper: Hyperparameters, seed: int) -> np.ndarray:
    """K x N matrix of i.i.d. standard normal entries."""
    return make_rng(seed).standard_normal((hyper.k, hyper.n))


def _mvn_draws(rng, cov, size):
    chol = chol_psd(cov).factor
    return rng.standard_normal((size, cov.shape[0])) @ chol.T


def sample_trajectory(hyper: Hyperparameters, seed: int):
    """Draw ``(LatentTrajectory, X, y)`` from the full generative model."""
    ss = np.random.SeedSequence(seed)
    s_mu, s_gamma, s_omega, s_beta, s_x, s_y = ss.spawn(6)
    T, N = hyper.t_steps, hyper.n

    increments = _mvn_draws(make_rng(s_mu), hyper.temporal_cov(), T)
    mu = np.cumsum(increments, axis=0)
    gamma = mu + _mvn_draws(make_rng(s_gamma), hyper.spatial_cov(), T)
    omega = (make_rng(s_omega).random((T, N)) < std_normal_cdf(gamma)).astype(np.int8)
    slab = np.sqrt(hyper.slab_var) * make_rng(s_beta).standard_normal((T, N))
    beta = np.where(omega == 1, 0.0, slab)

    x = make_rng(s_x).standard_normal((hyper.k, N))
    y = observe(x, beta, hyper.noise_var, make_rng(s_y))
    return LatentTrajectory(mu, gamma, omega, beta), x, y


def observe(x: np.ndarray, beta: np.ndarray, noise_var: float, seed) -> np.ndarray:
    """``y_t = X beta_t + eps_t`` row by row; ``noise_var = 0`` is noiseless.

    ``seed`` may be an int, a SeedSequence or an existing Generator.
    """
    x = np.asarray(x, dtype=float)
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    if beta.shape[1] != x.shape[1]:
        raise ValueError(f"beta has {beta.shape[1]} columns but X has {x.shape[1]}")
    if noise_var < 0:
        raise ValueError("noise_var must be non-negative")
    y = beta @ x.T
    if noise_var > 0:
        rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
        y = y + np.sqrt(noise_var) * rng.standard_normal(y.shape)
    return y
