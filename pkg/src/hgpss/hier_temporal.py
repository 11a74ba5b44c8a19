"""Temporal layer: a Gaussian random walk on the spatial GP mean.

``mu_1 ~ N(0, W)`` and ``mu_t ~ N(mu_{t-1}, W)``. Every frame contributes a
Gaussian likelihood message on its ``mu_t`` (see
:func:`hgpss.ep_frame.mu_message_from_sites`), so the chain given the
messages is linear-Gaussian and is solved exactly by a Kalman filter and a
Rauch-Tung-Striebel smoother. :func:`hier_ep_run` alternates this with
per-frame EP.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .ep_frame import (
    EPConfig,
    EPDivergedError,
    FramePosterior,
    GaussianBelief,
    GaussianMessage,
    ep_frame_run,
)
from .gaussian_math import chol_psd, chol_solve, symmetrize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TemporalChainSpec:
    w: np.ndarray
    mu1_prior: GaussianBelief
    t_steps: int

    @classmethod
    def from_hyper(cls, hyper):
        w = hyper.temporal_cov()
        return cls(w, GaussianBelief(np.zeros(hyper.n), w.copy()), hyper.t_steps)


@dataclass(frozen=True)
class OuterConfig:
    max_outer: int = 10
    outer_tol: float = 1e-4
    mode: str = "smooth"  # "filter" runs the streaming filter-only variant
    prior_uncertainty: bool = True  # False: frame prior is N(m_mu, Sigma0), mean only
    warm_start: bool = False  # True reuses each frame's sites across outer iterations
    workers: int = 1

    def __post_init__(self):
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if not self.outer_tol > 0:
            raise ValueError("outer_tol must be positive")
        if self.mode not in ("smooth", "filter"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class HierResult:
    frames: list
    mu_smoothed: list
    outer_iters: int
    converged: bool
    diagnostics: dict = field(default_factory=dict)

    @property
    def beta_mean(self) -> np.ndarray:
        return np.array([f.beta_belief.mean for f in self.frames])

    @property
    def inclusion_prob(self) -> np.ndarray:
        return np.array([f.inclusion_prob for f in self.frames])

    @property
    def mu_means(self) -> np.ndarray:
        return np.array([b.mean for b in self.mu_smoothed])


def _psd_factor(p: np.ndarray, rtol=1e-12) -> np.ndarray:
    """``G`` with ``G G' = p`` for a PSD matrix, dropping null directions."""
    if not np.any(p):
        return np.zeros((p.shape[0], 0))
    lam, vec = linalg.eigh(symmetrize(p))
    keep = lam > rtol * max(lam.max(), 0.0)
    return vec[:, keep] * np.sqrt(lam[keep])


def gaussian_product(belief: GaussianBelief, msg: GaussianMessage, jitter=0.0) -> GaussianBelief:
    """Multiply a belief by a message, in covariance form (no inverse of ``belief.cov``)."""
    g = _psd_factor(msg.precision)
    p, m = belief.cov, belief.mean
    if g.shape[1] == 0:
        cov = p.copy()
    else:
        pg = p @ g
        inner = chol_psd(np.eye(g.shape[1]) + g.T @ pg, jitter)
        cov = symmetrize(p - pg @ chol_solve(inner.factor, pg.T))
    mean = m + cov @ (msg.shift - msg.precision @ m)
    return GaussianBelief(mean, cov)


def gaussian_divide(belief: GaussianBelief, msg: GaussianMessage) -> GaussianBelief:
    """Remove a message from a belief. Raises LinAlgError if the result is improper."""
    g = _psd_factor(msg.precision)
    p, m = belief.cov, belief.mean
    if g.shape[1] == 0:
        cov = p.copy()
    else:
        pg = p @ g
        inner = linalg.cholesky(np.eye(g.shape[1]) - g.T @ pg, lower=True)
        cov = symmetrize(p + pg @ chol_solve(inner, pg.T))
    mean = m + cov @ (msg.precision @ m - msg.shift)
    return GaussianBelief(mean, cov)


def kalman_forward(spec: TemporalChainSpec, messages, jitter=0.0) -> list:
    """Filtered beliefs ``p(mu_t | messages_1..t)``.

    ``None`` entries are treated as vacuous messages (pure prediction).
    """
    out = []
    belief = spec.mu1_prior
    for t, msg in enumerate(messages):
        if t > 0:
            belief = GaussianBelief(belief.mean, belief.cov + spec.w)
        if msg is not None:
            belief = gaussian_product(belief, msg, jitter)
        out.append(belief)
    return out


def rts_smooth(spec: TemporalChainSpec, filtered, jitter=0.0) -> list:
    """Rauch-Tung-Striebel backward pass over :func:`kalman_forward` output."""
    smoothed = [None] * len(filtered)
    smoothed[-1] = filtered[-1]
    for t in range(len(filtered) - 2, -1, -1):
        f = filtered[t]
        pred_cov = f.cov + spec.w
        fac = chol_psd(pred_cov, jitter).factor
        gain = chol_solve(fac, f.cov).T
        nxt = smoothed[t + 1]
        mean = f.mean + gain @ (nxt.mean - f.mean)
        cov = symmetrize(f.cov + gain @ (nxt.cov - pred_cov) @ gain.T)
        smoothed[t] = GaussianBelief(mean, cov)
    return smoothed


def prior_marginals(spec: TemporalChainSpec, t_steps: int) -> list:
    return kalman_forward(spec, [None] * t_steps)


def _chain_marginals(spec, messages, mode, jitter=0.0):
    filtered = kalman_forward(spec, messages, jitter)
    return filtered if mode == "filter" else rts_smooth(spec, filtered, jitter)


def frame_cavity(spec, marginals, messages, t, mode="smooth") -> GaussianBelief:
    """Belief on ``mu_t`` from every message except frame ``t``'s own.

    Division is tried first; if it is numerically improper the chain is
    re-solved with message ``t`` left out.
    """
    if messages[t] is None:
        return marginals[t]
    try:
        cav = gaussian_divide(marginals[t], messages[t])
        if np.all(np.isfinite(cav.mean)) and np.all(np.diag(cav.cov) > 0):
            return cav
    except linalg.LinAlgError:
        pass
    logger.info("cavity division failed at frame %d; re-solving the chain without it", t)
    loo = list(messages)
    loo[t] = None
    return _chain_marginals(spec, loo, mode)[t]


def hier_ep_run(y_seq, x, hyper, ep_config: EPConfig = EPConfig(),
                outer_config: OuterConfig = OuterConfig()) -> HierResult:
    """Alternate per-frame EP with exact inference on the ``mu`` chain.

    Frame ``t`` sees the prior ``N(m, Sigma0 + V)`` where ``(m, V)`` is the
    chain marginal of ``mu_t`` with frame ``t``'s own message divided out.
    Each outer iteration restarts frame EP from fresh sites unless
    ``outer_config.warm_start`` is set.
    """
    y_seq = np.atleast_2d(np.asarray(y_seq, dtype=float))
    t_steps = y_seq.shape[0]
    spec = TemporalChainSpec(hyper.temporal_cov(), GaussianBelief(np.zeros(hyper.n), hyper.temporal_cov()), t_steps)
    sigma0 = hyper.spatial_cov()
    marginals = prior_marginals(spec, t_steps)
    messages = [None] * t_steps
    sites = [None] * t_steps
    frames: list[FramePosterior] = [None] * t_steps
    history = []
    converged = False
    it = 0

    def run_frame(t, cav):
        prior_cov = sigma0 + cav.cov if outer_config.prior_uncertainty else sigma0
        prior = GaussianBelief(cav.mean, prior_cov)
        try:
            return ep_frame_run(y_seq[t], x, hyper, prior, ep_config, sites[t], sigma0)
        except EPDivergedError as err:
            diag = dict(err.diagnostics, frame=t, outer_iter=it)
            raise EPDivergedError(f"frame {t}: {err}", err.sweep, err.sites, diag) from err

    pool = ThreadPoolExecutor(outer_config.workers) if outer_config.workers > 1 else None
    try:
        for it in range(1, outer_config.max_outer + 1):
            cavs = [frame_cavity(spec, marginals, messages, t, outer_config.mode) for t in range(t_steps)]
            if pool is None:
                frames = [run_frame(t, cavs[t]) for t in range(t_steps)]
            else:
                frames = list(pool.map(run_frame, range(t_steps), cavs))
            if outer_config.warm_start:
                sites = [f.sites for f in frames]
            messages = [f.mu_message for f in frames]
            new = _chain_marginals(spec, messages, outer_config.mode, ep_config.jitter)
            change = max(float(np.max(np.abs(a.mean - b.mean))) for a, b in zip(new, marginals))
            marginals = new
            history.append({
                "outer_iter": it,
                "max_mu_change": change,
                "sweeps": [f.sweeps_used for f in frames],
                "frames_converged": [bool(f.converged) for f in frames],
                "clip_events": [f.clip_events for f in frames],
            })
            logger.debug("outer iteration %d: max mu change %.3g", it, change)
            if not np.isfinite(change):
                raise EPDivergedError(f"non-finite mu change at outer iteration {it}", None, (),
                                      {"outer_iter": it, "history": history})
            if change < outer_config.outer_tol:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    return HierResult(frames, marginals, it, converged, {"outer": history})
