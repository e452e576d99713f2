"""Block-diagonal Gaussian prior over world parameters and the whitening map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigError, InvalidInputError

_LOG_2PI = np.log(2.0 * np.pi)

#: Whitening scale in units of the marginal prior standard deviation.
WHITEN_SIGMAS = 3.0


def independent_cov(sigma, n):
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
    return np.diag(sigma ** 2)


def uniform_offdiag_cov(sigma, n, offdiag=0.5):
    """Covariance with unit-variance diagonal and constant correlation, times sigma^2."""
    corr = np.full((n, n), float(offdiag))
    np.fill_diagonal(corr, 1.0)
    return float(sigma) ** 2 * corr


@dataclass
class GaussianBlock:
    mean: np.ndarray
    cov: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = self.mean.size
        if self.cov.shape != (n, n):
            raise ConfigError(f"prior block {self.label!r}: covariance shape {self.cov.shape} "
                              f"does not match mean length {n}")
        if not np.allclose(self.cov, self.cov.T, rtol=1e-12, atol=0.0):
            raise ConfigError(f"prior block {self.label!r}: covariance is not symmetric")
        try:
            self.chol = linalg.cholesky(self.cov, lower=True)
        except linalg.LinAlgError:
            raise ConfigError(f"prior block {self.label!r}: covariance is not positive definite") from None
        self.logdet = 2.0 * np.log(np.diag(self.chol)).sum()

    @property
    def size(self):
        return self.mean.size


@dataclass
class WhitenMap:
    scale: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=float)
        self.offset = np.asarray(self.offset, dtype=float)
        if np.any(self.scale <= 0):
            raise InvalidInputError("whitening scales must be strictly positive")

    def whiten(self, theta):
        return (np.asarray(theta, dtype=float) - self.offset) / self.scale

    def unwhiten(self, z):
        return self.offset + np.asarray(z, dtype=float) * self.scale


class BlockPrior:
    """Product of independent multivariate normal blocks.

    Blocks are laid out consecutively in the parameter vector, in the order
    given. Every block is factorized once at construction.
    """

    def __init__(self, blocks):
        self.blocks = [b for b in blocks if b.size > 0]
        if not self.blocks:
            raise ConfigError("prior has no parameters")
        self.dim = sum(b.size for b in self.blocks)
        self.mean = np.concatenate([b.mean for b in self.blocks])
        self.cov = linalg.block_diag(*[b.cov for b in self.blocks])
        self.chol = linalg.block_diag(*[b.chol for b in self.blocks])
        self.chol_inv = linalg.block_diag(
            *[linalg.solve_triangular(b.chol, np.eye(b.size), lower=True) for b in self.blocks])
        self.std = np.sqrt(np.diag(self.cov))
        self._norm = -0.5 * (self.dim * _LOG_2PI + sum(b.logdet for b in self.blocks))
        self.whitening = WhitenMap(scale=WHITEN_SIGMAS * self.std, offset=self.mean.copy())
        # prior covariance factor expressed in whitened coordinates
        self.whitened_chol = self.chol / self.whitening.scale[:, None]

    def logpdf(self, theta):
        """Log density including normalization; accepts (P,) or (B, P)."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.dim:
            raise InvalidInputError(f"expected {self.dim} parameters, got {theta.shape[-1]}")
        white = (theta - self.mean) @ self.chol_inv.T
        return self._norm - 0.5 * np.sum(white * white, axis=-1)

    def sample(self, rng, size=None):
        n = 1 if size is None else int(size)
        draws = self.mean + rng.standard_normal((n, self.dim)) @ self.chol.T
        return draws[0] if size is None else draws

    @property
    def log_normalizer(self):
        return self._norm


def log_prior(prior: BlockPrior, spec, params):
    """Prior log density of a :class:`~ptgeo.world.WorldParams` (or packed vector)."""
    theta = spec.pack(params) if hasattr(params, "alpha") else params
    return float(prior.logpdf(theta))


def sample_prior(prior: BlockPrior, spec, rng):
    return spec.unpack(prior.sample(rng))


def block_from_config(cfg: dict, n: int, label: str, mean=None) -> GaussianBlock:
    """Build one block from a config mapping.

    Recognized forms: ``{"matrix": [[...]]}``, ``{"template": "independent",
    "sigma": s}`` and ``{"template": "uniform-offdiag", "sigma": s,
    "offdiag": 0.5}``. ``mean`` defaults to zeros (control offsets).
    """
    mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=float)
    if mean.size != n:
        raise ConfigError(f"{label}: mean has {mean.size} entries, expected {n}")
    if "matrix" in cfg and cfg["matrix"] is not None:
        cov = np.asarray(cfg["matrix"], dtype=float)
    elif cfg.get("template") == "independent":
        cov = independent_cov(cfg["sigma"], n)
    elif cfg.get("template") == "uniform-offdiag":
        cov = uniform_offdiag_cov(cfg["sigma"], n, cfg.get("offdiag", 0.5))
    else:
        raise ConfigError(f"{label}: need 'matrix' or a known 'template'")
    return GaussianBlock(mean=mean, cov=cov, label=label)
