"""Single-frame Expectation Propagation for structured spike-and-slab regression.

The frame posterior is

    p(beta, gamma | y) ∝ N(y; X beta, s2 I) N(gamma; m, S)
                         prod_i [Phi(gamma_i) delta_0(beta_i)
                                 + (1 - Phi(gamma_i)) N(beta_i; 0, slab_var)]

The likelihood and the GP prior are kept exactly. Each bracketed hybrid
factor couples ``beta_i`` and ``gamma_i`` and is replaced by the product of
two unnormalised Gaussian sites, one on each variable, stored in natural
parameters (precision, shift = precision * mean).

With ``gamma_prior = N(0, Sigma0)`` this is the one-level GP baseline; the
hierarchical model only changes the prior handed in.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import log_ndtr

from .gaussian_math import (
    chol_psd,
    chol_solve,
    expected_probit,
    symmetrize,
)

logger = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

#: tilted variances are floored so site precisions stay finite
MAX_SITE_PRECISION = 1e10


class CavityError(ValueError):
    """A cavity variance fell below the floor (or went negative)."""


class EPDivergedError(RuntimeError):
    def __init__(self, message, sweep=None, sites=(), diagnostics=None):
        super().__init__(message)
        self.sweep = sweep
        self.sites = tuple(sites)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray
    jitter: float = 0.0

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()


@dataclass(frozen=True)
class GaussianMessage:
    """Unnormalised Gaussian likelihood ``exp(-x'Px/2 + h'x)``; ``P`` may be singular."""

    precision: np.ndarray
    shift: np.ndarray

    @classmethod
    def vacuous(cls, n):
        return cls(np.zeros((n, n)), np.zeros(n))


@dataclass
class SiteApprox:
    beta_prec: np.ndarray
    beta_shift: np.ndarray
    gamma_prec: np.ndarray
    gamma_shift: np.ndarray

    @classmethod
    def initial(cls, n, slab_var):
        # beta sites start at the slab so the beta posterior is proper when K < N
        return cls(np.full(n, 1.0 / slab_var), np.zeros(n), np.zeros(n), np.zeros(n))

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))

    def copy(self):
        return SiteApprox(
            self.beta_prec.copy(), self.beta_shift.copy(),
            self.gamma_prec.copy(), self.gamma_shift.copy(),
        )

    def max_abs_change(self, other: "SiteApprox") -> float:
        return max(
            float(np.max(np.abs(self.beta_prec - other.beta_prec))),
            float(np.max(np.abs(self.beta_shift - other.beta_shift))),
            float(np.max(np.abs(self.gamma_prec - other.gamma_prec))),
            float(np.max(np.abs(self.gamma_shift - other.gamma_shift))),
        )


@dataclass(frozen=True)
class EPConfig:
    max_sweeps: int = 100
    tol: float = 1e-4
    damping: float = 0.8
    min_cavity_var: float = 1e-10
    jitter: float = 0.0
    refresh: str = "rank_one"  # or "full": recompute both beliefs after every site
    site_order: str = "sequential"  # or "random"
    seed: int = 0
    mu_message: str = "full"  # or "diagonal"
    clip: str = "mean_match"  # or "vacuous"

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if not self.min_cavity_var > 0:
            raise ValueError("min_cavity_var must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if self.refresh not in ("rank_one", "full"):
            raise ValueError(f"unknown refresh mode {self.refresh!r}")
        if self.site_order not in ("sequential", "random"):
            raise ValueError(f"unknown site order {self.site_order!r}")
        if self.clip not in ("mean_match", "vacuous"):
            raise ValueError(f"unknown clip mode {self.clip!r}")
        if self.mu_message not in ("full", "diagonal"):
            raise ValueError(f"unknown mu_message form {self.mu_message!r}")


@dataclass
class FramePosterior:
    beta_belief: GaussianBelief
    gamma_belief: GaussianBelief
    inclusion_prob: np.ndarray  # P(omega_i = 1 | y): spike probabilities
    mu_message: GaussianMessage
    converged: bool
    sweeps_used: int
    sites: SiteApprox
    clip_events: int = 0
    skipped_sites: int = 0
    jitter_events: int = 0
    max_jitter: float = 0.0
    log_evidence: float = float("nan")
    site_changes: list = field(default_factory=list)

    @property
    def slab_prob(self) -> np.ndarray:
        return 1.0 - self.inclusion_prob


class HybridMoments(NamedTuple):
    log_z: float
    beta_mean: float
    beta_var: float
    gamma_mean: float
    gamma_var: float
    spike_prob: float


def _logpdf0(m, v):
    return -0.5 * m * m / v - 0.5 * math.log(v) - _LOG_SQRT_2PI


def hybrid_moments(beta_cavity_mean, beta_cavity_var, gamma_cavity_mean,
                   gamma_cavity_var, slab_var, min_cavity_var=1e-10) -> HybridMoments:
    """Moments of N(b; m, v) N(g; mg, vg) [Phi(g) delta_0(b) + Phi(-g) N(b; 0, slab_var)].

    Both branches integrate in closed form: the spike branch weighs
    ``Phi(mg / sqrt(1 + vg)) N(0; m, v)`` and the slab branch
    ``Phi(-mg / sqrt(1 + vg)) N(0; m, v + slab_var)``. Within each branch
    gamma follows the usual probit-tilted Gaussian.
    """
    m, v = float(beta_cavity_mean), float(beta_cavity_var)
    mg, vg = float(gamma_cavity_mean), float(gamma_cavity_var)
    if not (v >= min_cavity_var and vg >= min_cavity_var):
        raise CavityError(f"cavity variance below floor: beta {v!r}, gamma {vg!r}")

    sd = math.sqrt(1.0 + vg)
    z = mg / sd
    log_s = float(log_ndtr(z))
    log_1ms = float(log_ndtr(-z))
    log_spike = log_s + _logpdf0(m, v)
    log_slab = log_1ms + _logpdf0(m, v + slab_var)
    log_z = max(log_spike, log_slab) + math.log1p(math.exp(-abs(log_spike - log_slab)))
    r = math.exp(log_spike - log_z)
    r_slab = math.exp(log_slab - log_z)

    shrink = slab_var / (v + slab_var)
    ms = m * shrink
    vs = v * shrink
    beta_mean = r_slab * ms
    beta_var = r_slab * vs + r * r_slab * ms * ms

    logphi_z = -0.5 * z * z - _LOG_SQRT_2PI
    k_sp = math.exp(logphi_z - log_s)   # phi(z) / Phi(z)
    k_sl = math.exp(logphi_z - log_1ms)  # phi(z) / Phi(-z)
    a = vg / sd
    c = vg * vg / (1.0 + vg)
    g_sp_mean = mg + a * k_sp
    g_sp_var = vg - c * k_sp * (z + k_sp)
    g_sl_mean = mg - a * k_sl
    g_sl_var = vg - c * k_sl * (k_sl - z)
    gamma_mean = r * g_sp_mean + r_slab * g_sl_mean
    diff = g_sp_mean - g_sl_mean
    gamma_var = r * g_sp_var + r_slab * g_sl_var + r * r_slab * diff * diff

    return HybridMoments(log_z, beta_mean, beta_var, gamma_mean, gamma_var, r)


def _damped_site(t_mean, t_var, c_mean, c_var, old_prec, old_shift, damping, clip):
    """New damped natural parameters of one site from matched tilted moments.

    A negative raw precision is clipped to zero. In ``"mean_match"`` mode the
    shift still moves the marginal mean onto the tilted mean (the variance
    stays at the cavity's); ``"vacuous"`` drops the site entirely.
    """
    t_var = max(t_var, 1.0 / MAX_SITE_PRECISION)
    prec = 1.0 / t_var - 1.0 / c_var
    clipped = prec < 0
    if clipped:
        prec = 0.0
        shift = (t_mean - c_mean) / c_var if clip == "mean_match" else 0.0
    else:
        shift = t_mean / t_var - c_mean / c_var
    prec = damping * prec + (1 - damping) * old_prec
    shift = damping * shift + (1 - damping) * old_shift
    return prec, shift, int(clipped)


def posterior_beta(x, noise_var, sites: SiteApprox, y, jitter=0.0) -> GaussianBelief:
    """``cov = (X'X / s2 + diag(p))^-1``, ``mean = cov (X'y / s2 + h)`` via Cholesky."""
    x = np.asarray(x, dtype=float)
    prec = x.T @ x / noise_var
    prec[np.diag_indices_from(prec)] += sites.beta_prec
    rhs = x.T @ np.asarray(y, dtype=float) / noise_var + sites.beta_shift
    res = chol_psd(prec, jitter)
    cov = chol_solve(res.factor, np.eye(prec.shape[0]))
    mean = chol_solve(res.factor, rhs)
    return GaussianBelief(mean, symmetrize(cov), res.jitter)


def posterior_gamma(prior: GaussianBelief, sites: SiteApprox, jitter=0.0) -> GaussianBelief:
    """Combine a GP prior with diagonal gamma sites without inverting the prior.

    ``cov = S - S Q^1/2 B^-1 Q^1/2 S`` with ``B = I + Q^1/2 S Q^1/2``, and
    ``mean = m + cov (g - Q m)``.
    """
    s = prior.cov
    q = sites.gamma_prec
    if not np.any(q):
        mean = prior.mean + s @ sites.gamma_shift
        return GaussianBelief(mean, s.copy(), 0.0)
    sq = np.sqrt(q)
    b = np.eye(len(q)) + sq[:, None] * s * sq[None, :]
    res = chol_psd(b, jitter)
    v = chol_solve(res.factor, sq[:, None] * s)
    cov = symmetrize(s - (s * sq[None, :]) @ v)
    mean = prior.mean + cov @ (sites.gamma_shift - q * prior.mean)
    return GaussianBelief(mean, cov, res.jitter)


def mu_message_from_sites(sites: SiteApprox, spatial_cov, form="full", jitter=0.0) -> GaussianMessage:
    """Message on the spatial mean implied by the gamma sites.

    The sites act on ``gamma = mu + eps`` with ``eps ~ N(0, Sigma0)``, so
    the message precision is ``Q^1/2 (I + Q^1/2 Sigma0 Q^1/2)^-1 Q^1/2``.
    Sites with zero precision contribute nothing.
    """
    q = sites.gamma_prec
    n = len(q)
    sq = np.sqrt(q)
    u = np.divide(sites.gamma_shift, sq, out=np.zeros(n), where=sq > 0)
    if form == "diagonal":
        lam = q / (1.0 + q * np.diag(spatial_cov))
        return GaussianMessage(np.diag(lam), sq * u / (1.0 + q * np.diag(spatial_cov)))
    b = np.eye(n) + sq[:, None] * spatial_cov * sq[None, :]
    res = chol_psd(b, jitter)
    binv_sq = chol_solve(res.factor, np.diag(sq))
    prec = symmetrize(sq[:, None] * binv_sq)
    shift = sq * chol_solve(res.factor, u)
    return GaussianMessage(prec, shift)


def _log_gauss_site_integral(m, v, p, h):
    """log of the integral of N(x; m, v) exp(-p x^2 / 2 + h x)."""
    return -0.5 * math.log1p(p * v) + 0.5 * ((m / v + h) ** 2 / (1.0 / v + p) - m * m / v)


def _log_evidence(x, y, noise_var, sites, gamma_prior, beta_belief, gamma_belief, log_c):
    """EP estimate of log p(y) given the site normalisers ``log_c``."""
    k, n = x.shape
    prec = x.T @ x / noise_var
    prec[np.diag_indices_from(prec)] += sites.beta_prec
    chol = chol_psd(prec).factor
    b = x.T @ y / noise_var + sites.beta_shift
    log_beta = (
        -0.5 * k * math.log(2 * math.pi * noise_var) - 0.5 * float(y @ y) / noise_var
        + 0.5 * float(b @ beta_belief.mean) - float(np.sum(np.log(np.diag(chol))))
        + 0.5 * n * math.log(2 * math.pi)
    )
    q, g = sites.gamma_prec, sites.gamma_shift
    mu = gamma_prior.mean
    sq = np.sqrt(q)
    bmat = np.eye(n) + sq[:, None] * gamma_prior.cov * sq[None, :]
    chol_b = chol_psd(bmat).factor
    r = g - q * mu
    log_gamma = (
        float(g @ mu) - 0.5 * float(mu @ (q * mu)) + 0.5 * float(r @ gamma_belief.cov @ r)
        - float(np.sum(np.log(np.diag(chol_b))))
    )
    return float(np.sum(log_c)) + log_beta + log_gamma


def ep_frame_run(y, x, hyper, gamma_prior: GaussianBelief, config: EPConfig = EPConfig(),
                 sites: SiteApprox | None = None, spatial_cov=None) -> FramePosterior:
    """Run sequential EP on one frame.

    ``sites`` warm-starts the run (it is copied, never mutated). Beliefs are
    updated by rank-one corrections after every site and recomputed from
    scratch at the end of each sweep; ``config.refresh == "full"`` recomputes
    them after every site instead.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    k, n = x.shape
    if y.shape != (k,):
        raise ValueError(f"y has shape {y.shape}, expected ({k},)")
    if gamma_prior.mean.shape != (n,) or gamma_prior.cov.shape != (n, n):
        raise ValueError("gamma_prior dimension does not match X")
    if spatial_cov is None:
        spatial_cov = hyper.spatial_cov()
    noise_var, slab_var = hyper.noise_var, hyper.slab_var

    sites = SiteApprox.initial(n, slab_var) if sites is None else sites.copy()
    stats = {"clip": 0, "skip": 0, "jit_events": 0, "max_jit": 0.0}

    def refresh():
        bb = posterior_beta(x, noise_var, sites, y, config.jitter)
        gb = posterior_gamma(gamma_prior, sites, config.jitter)
        for j in (bb.jitter, gb.jitter):
            if j:
                stats["jit_events"] += 1
                stats["max_jit"] = max(stats["max_jit"], j)
        return bb.mean.copy(), bb.cov.copy(), gb.mean.copy(), gb.cov.copy()

    mb, sb, mg, sg = refresh()
    spike = np.asarray(expected_probit(mg, np.clip(np.diag(sg), 0, None)), dtype=float)
    rng = np.random.default_rng(config.seed)
    d = config.damping
    converged = False
    changes = []
    sweep = 0

    for sweep in range(1, config.max_sweeps + 1):
        old = sites.copy()
        order = rng.permutation(n) if config.site_order == "random" else range(n)
        skipped = []
        for i in order:
            vb, vg = sb[i, i], sg[i, i]
            cb_prec = 1.0 / vb - sites.beta_prec[i]
            cg_prec = 1.0 / vg - sites.gamma_prec[i]
            try:
                if cb_prec <= 0 or cg_prec <= 0:
                    raise CavityError("non-positive cavity precision")
                cb_var, cg_var = 1.0 / cb_prec, 1.0 / cg_prec
                cb_mean = cb_var * (mb[i] / vb - sites.beta_shift[i])
                cg_mean = cg_var * (mg[i] / vg - sites.gamma_shift[i])
                hm = hybrid_moments(cb_mean, cb_var, cg_mean, cg_var, slab_var,
                                    config.min_cavity_var)
            except CavityError:
                skipped.append(int(i))
                continue
            spike[i] = hm.spike_prob

            nb_prec, nb_shift, clipped_b = _damped_site(
                hm.beta_mean, hm.beta_var, cb_mean, cb_var,
                sites.beta_prec[i], sites.beta_shift[i], d, config.clip)
            ng_prec, ng_shift, clipped_g = _damped_site(
                hm.gamma_mean, hm.gamma_var, cg_mean, cg_var,
                sites.gamma_prec[i], sites.gamma_shift[i], d, config.clip)
            stats["clip"] += clipped_b + clipped_g

            db_prec = nb_prec - sites.beta_prec[i]
            db_shift = nb_shift - sites.beta_shift[i]
            dg_prec = ng_prec - sites.gamma_prec[i]
            dg_shift = ng_shift - sites.gamma_shift[i]
            sites.beta_prec[i], sites.beta_shift[i] = nb_prec, nb_shift
            sites.gamma_prec[i], sites.gamma_shift[i] = ng_prec, ng_shift

            if config.refresh == "full":
                mb, sb, mg, sg = refresh()
                continue
            if db_prec or db_shift:
                col = sb[:, i].copy()
                denom = 1.0 + db_prec * col[i]
                mb += col * ((db_shift - db_prec * mb[i]) / denom)
                sb -= np.outer(col, col) * (db_prec / denom)
            if dg_prec or dg_shift:
                col = sg[:, i].copy()
                denom = 1.0 + dg_prec * col[i]
                mg += col * ((dg_shift - dg_prec * mg[i]) / denom)
                sg -= np.outer(col, col) * (dg_prec / denom)

        stats["skip"] += len(skipped)
        if len(skipped) == n:
            raise EPDivergedError(
                f"every site failed its cavity in sweep {sweep}", sweep, skipped,
                {"sweep": sweep, "sites": skipped},
            )
        mb, sb, mg, sg = refresh()
        if not (np.all(np.isfinite(mb)) and np.all(np.isfinite(mg))
                and np.all(np.diag(sb) > 0) and np.all(np.diag(sg) > 0)):
            raise EPDivergedError(
                f"non-finite or non-positive beliefs after sweep {sweep}", sweep, skipped,
                {"sweep": sweep, "sites": skipped},
            )
        change = sites.max_abs_change(old)
        changes.append(change)
        if change < config.tol:
            converged = True
            break

    beta_belief = GaussianBelief(mb, sb)
    gamma_belief = GaussianBelief(mg, sg)
    msg = mu_message_from_sites(sites, spatial_cov, config.mu_message, config.jitter)

    try:
        log_c = _site_log_normalisers(mb, sb, mg, sg, sites, slab_var)
        log_ev = _log_evidence(x, y, noise_var, sites, gamma_prior, beta_belief, gamma_belief, log_c)
    except np.linalg.LinAlgError:
        log_ev = float("nan")

    if not converged:
        logger.info("frame EP stopped after %d sweeps (last change %.3g)", sweep, changes[-1])
    return FramePosterior(
        beta_belief=beta_belief,
        gamma_belief=gamma_belief,
        inclusion_prob=np.clip(spike, 0.0, 1.0),
        mu_message=msg,
        converged=converged,
        sweeps_used=sweep,
        sites=sites,
        clip_events=stats["clip"],
        skipped_sites=stats["skip"],
        jitter_events=stats["jit_events"],
        max_jitter=stats["max_jit"],
        log_evidence=log_ev,
        site_changes=changes,
    )


def _site_log_normalisers(mb, sb, mg, sg, sites, slab_var):
    """log C_i such that C_i times the Gaussian sites integrates like the true factor."""
    n = len(mb)
    out = np.zeros(n)
    for i in range(n):
        cb_prec = 1.0 / sb[i, i] - sites.beta_prec[i]
        cg_prec = 1.0 / sg[i, i] - sites.gamma_prec[i]
        if cb_prec <= 0 or cg_prec <= 0:
            return np.full(n, np.nan)
        cb_var, cg_var = 1.0 / cb_prec, 1.0 / cg_prec
        cb_mean = cb_var * (mb[i] / sb[i, i] - sites.beta_shift[i])
        cg_mean = cg_var * (mg[i] / sg[i, i] - sites.gamma_shift[i])
        hm = hybrid_moments(cb_mean, cb_var, cg_mean, cg_var, slab_var, 0.0)
        out[i] = (
            hm.log_z
            - _log_gauss_site_integral(cb_mean, cb_var, sites.beta_prec[i], sites.beta_shift[i])
            - _log_gauss_site_integral(cg_mean, cg_var, sites.gamma_prec[i], sites.gamma_shift[i])
        )
    return out


def prior_spike_prob(gamma_prior: GaussianBelief) -> np.ndarray:
    """Prior spike probabilities ``Phi(m_i / sqrt(1 + S_ii))``."""
    return np.asarray(expected_probit(gamma_prior.mean, np.diag(gamma_prior.cov)), dtype=float)

