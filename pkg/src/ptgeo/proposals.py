"""Within-chain proposals, Metropolis-Hastings acceptance and step-size adaptation.

All proposals act on whitened coordinates. State arrays carry a leading chain
axis so one :class:`ProposalState` can serve a whole temperature ladder; a
single chain is the special case of one row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

KINDS = ("igrw", "agrw", "pcn")
TARGET_ACCEPT = 0.234
PCN_ETA_MIN = 1e-6


@dataclass
class ProposalState:
    kind: str
    eta: np.ndarray
    a: float = 10.0
    gain: float = 1.0
    n: int = 0
    accept_count: np.ndarray | None = None
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None
    n_hist: int = 0

    @classmethod
    def create(cls, kind, eta, dim, a=10.0, gain=1.0):
        if kind not in KINDS:
            raise ConfigError(f"unknown proposal kind {kind!r}; expected one of {KINDS}")
        eta = np.atleast_1d(np.asarray(eta, dtype=float)).copy()
        if np.any(eta <= 0):
            raise ConfigError("step size eta must be positive")
        if kind == "pcn" and np.any(eta > 1):
            raise ConfigError("pCN step size eta must lie in (0, 1]")
        if a <= 0:
            raise ConfigError("adaptation timescale a must be positive")
        t = eta.size
        state = cls(kind=kind, eta=eta, a=float(a), gain=float(gain),
                    accept_count=np.zeros(t, dtype=np.int64))
        if kind == "agrw":
            state.mean = np.zeros((t, dim))
            state.m2 = np.zeros((t, dim, dim))
        return state

    def history_cov(self):
        """Sample covariance of each chain's history, (T, d, d); zero before two samples."""
        if self.n_hist < 2:
            return np.zeros_like(self.m2)
        return self.m2 / (self.n_hist - 1)

    def mixed_cov(self):
        """Adaptive proposal covariance n/(n+a) cov + a/(n+a) I, n = history length."""
        d = self.mean.shape[1]
        w = self.n_hist / (self.n_hist + self.a)
        return w * self.history_cov() + (1.0 - w) * np.eye(d)

    def record_history(self, z):
        """Add the chains' current states to the running mean/covariance (Welford)."""
        if self.kind != "agrw":
            return
        self.n_hist += 1
        delta = z - self.mean
        self.mean += delta / self.n_hist
        self.m2 += delta[:, :, None] * (z - self.mean)[:, None, :]


def _step(kind, z, eta, xi, state=None, prior_chol=None):
    """Proposals from given standard normals ``xi`` (T, d)."""
    e = eta[:, None]
    if kind == "igrw":
        return z + e * xi
    if kind == "pcn":
        return np.sqrt(1.0 - eta * eta)[:, None] * z + e * (xi @ prior_chol.T)
    chol = np.linalg.cholesky(state.mixed_cov())
    return z + e * np.einsum("tij,tj->ti", chol, xi)


def propose_igrw(theta, eta, rng):
    theta = np.atleast_2d(theta)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (theta.shape[0],))
    out = _step("igrw", theta, eta, rng.standard_normal(theta.shape))
    return out


def propose_agrw(theta, state: ProposalState, rng):
    theta = np.atleast_2d(theta)
    return _step("agrw", theta, state.eta, rng.standard_normal(theta.shape), state=state)


def propose_pcn(theta, eta, prior_chol, rng):
    """pCN step around a zero-mean prior with covariance ``prior_chol @ prior_chol.T``."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if np.any(eta <= 0) or np.any(eta > 1):
        raise ConfigError("pCN step size eta must lie in (0, 1]")
    theta = np.atleast_2d(theta)
    eta = np.broadcast_to(eta, (theta.shape[0],))
    return _step("pcn", theta, eta, rng.standard_normal(theta.shape), prior_chol=prior_chol)


def accept_batch(log_ratio, log_u):
    """Vectorized MH decisions; NaN ratios are rejected and reported."""
    bad = np.isnan(log_ratio)
    return (log_u < np.where(bad, -np.inf, log_ratio)), bad


def mh_accept(current_lp, proposed_lp, log_q_ratio, rng):
    """Accept with probability min(1, exp(proposed - current + log_q_ratio))."""
    with np.errstate(invalid="ignore"):
        log_r = proposed_lp - current_lp + log_q_ratio
    if np.isnan(log_r):
        return False
    return bool(np.log(rng.random()) < log_r)


def adapt_step(state: ProposalState, accepted, adapt=True):
    """Count one proposal per chain and nudge log(eta) towards 0.234 acceptance.

    The update size is gain/n, so adaptation diminishes over time.
    """
    accepted = np.asarray(accepted)
    state.n += 1
    state.accept_count += accepted.astype(np.int64)
    if adapt and state.gain != 0.0:
        state.eta = state.eta * np.exp((state.gain / state.n) * (accepted - TARGET_ACCEPT))
        if state.kind == "pcn":
            np.clip(state.eta, PCN_ETA_MIN, 1.0, out=state.eta)
    return state
