"""Marginalized sensor likelihoods and the tempered posterior.

Each sensor's noise is Gaussian with an unknown variance that has an
inverse-gamma IG(alpha, beta) prior. Integrating the variance out gives a
Student-t with 2*alpha degrees of freedom and scale sqrt(beta/alpha) on the
residuals, which are measured in units of the data's sample standard
deviation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import InvalidInputError
from .forward import (ColumnOperator, MagneticField, MTConfig, SensorLocations,
                      apparent_resistivity_phase, gravity_kernel, magnetic_kernel,
                      mt1d_forward, mt_layered, mean_centre)
from .priors import BlockPrior
from .world import WorldSpec, VoxelModel


@dataclass(frozen=True)
class NoiseHyper:
    alpha: float = 0.5
    beta: float = 0.05

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise InvalidInputError("noise hyperparameters alpha and beta must be > 0")


def marginal_logpdf(r, alpha, beta):
    """Log density of residual ``r`` under N(0, s2) with s2 ~ IG(alpha, beta)."""
    r = np.asarray(r, dtype=float)
    return (gammaln(alpha + 0.5) - gammaln(alpha) - 0.5 * np.log(2 * np.pi * beta)
            - (alpha + 0.5) * np.log1p(r * r / (2 * beta)))


@dataclass
class SensorData:
    """Observed values for one sensor.

    ``values`` is (K,) or (K, C) for multi-channel sensors. Residuals are
    divided by ``scale``, the per-channel sample standard deviation. With
    ``centred`` the data are compared after removing their mean, matching
    mean-centred predictions.
    """

    values: np.ndarray
    centred: bool = False
    scale: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.size == 0:
            raise InvalidInputError("sensor data are empty")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("sensor data contain non-finite values")
        if self.scale is None:
            if len(self.values) > 1:
                sd = self.values.std(axis=0, ddof=1)
            else:
                sd = np.ones(self.values.shape[1:])
            self.scale = np.where(sd > 0, sd, 1.0)
        self.scale = np.asarray(self.scale, dtype=float)

    @property
    def reference(self):
        if self.centred:
            return self.values - self.values.mean(axis=0)
        return self.values

    def __len__(self):
        return len(self.values)


def log_likelihood_sensor(pred, data: SensorData, hyper: NoiseHyper):
    """Marginal log-likelihood of predictions; ``pred`` may carry batch axes."""
    pred = np.asarray(pred, dtype=float)
    if pred.shape[-data.values.ndim:] != data.values.shape:
        raise InvalidInputError(
            f"prediction shape {pred.shape} does not match data shape {data.values.shape}")
    r = (pred - data.reference) / data.scale
    lp = marginal_logpdf(r, hyper.alpha, hyper.beta)
    return lp.reshape(lp.shape[:lp.ndim - data.values.ndim] + (-1,)).sum(axis=-1)


def log_likelihood(preds, datas, hypers):
    """Sum of independent per-sensor terms."""
    return sum(log_likelihood_sensor(p, d, h) for p, d, h in zip(preds, datas, hypers))


class GravitySensor:
    kind = "gravity"
    role = "density"

    def __init__(self, spec: WorldSpec, loc: SensorLocations, data: SensorData,
                 hyper: NoiseHyper, pad_cells=0, name="gravity"):
        self.name = name
        self.loc, self.data, self.hyper = loc, data, hyper
        self.kernel = gravity_kernel(spec.grid, loc, pad_cells)
        self.op = ColumnOperator(self.kernel)

    def property_values(self, spec, thetas):
        return spec.property_values(thetas, self.role)

    def predict(self, spec, thetas, kidx):
        return self.op.predict(kidx, self.property_values(spec, thetas))

    def predict_model(self, model: VoxelModel):
        return mean_centre(self.kernel.matrix @ model.properties[self.role].ravel())


class MagneticSensor(GravitySensor):
    kind = "magnetic"
    role = "log10_susceptibility"

    def __init__(self, spec, loc, data, hyper, field: MagneticField, pad_cells=0, name="magnetic"):
        self.name = name
        self.loc, self.data, self.hyper, self.field = loc, data, hyper, field
        self.kernel = magnetic_kernel(spec.grid, loc, field, pad_cells)
        self.op = ColumnOperator(self.kernel)

    def property_values(self, spec, thetas):
        return 10.0 ** spec.property_values(thetas, self.role)

    def predict_model(self, model):
        return mean_centre(self.kernel.matrix @ (10.0 ** model.properties[self.role]).ravel())


class MTSensor:
    """1-D MT soundings; two channels per row: log10 apparent resistivity, phase (deg)."""

    kind = "mt"
    role = "log10_resistivity"

    def __init__(self, spec, cfg: MTConfig, row_site, row_freq, data: SensorData,
                 hyper: NoiseHyper, name="mt"):
        self.name = name
        self.cfg, self.data, self.hyper = cfg, data, hyper
        self.row_site = np.asarray(row_site, dtype=int)
        self.row_freq = np.asarray(row_freq, dtype=int)
        if data.values.shape != (len(self.row_site), 2):
            raise InvalidInputError("MT data must have two channels per row")
        self.columns = spec.grid.column_of(cfg.sites[:, 0], cfg.sites[:, 1])

    def _rows(self, rho_a, phase):
        lr = np.log10(rho_a[..., self.row_site, self.row_freq])
        ph = phase[..., self.row_site, self.row_freq]
        return np.stack([lr, ph], axis=-1)

    def predict(self, spec, thetas, kidx):
        logres = spec.property_values(thetas, self.role)
        rho_a, phase = mt_layered(kidx[:, :, self.columns], logres, spec.grid.cell[2],
                                  spec.grid.shape[2], self.cfg.frequencies)
        return self._rows(rho_a, phase)

    def predict_model(self, model):
        rho_a, phase = mt1d_forward(model, self.cfg)
        return self._rows(rho_a, phase)


class Posterior:
    """Prior, world and sensors; evaluates batched log-likelihoods.

    Satisfies the sampler's target interface: ``dim``, ``prior`` and
    ``log_likelihood(thetas)`` on arrays of shape (B, P).
    """

    def __init__(self, spec: WorldSpec, prior: BlockPrior, sensors):
        if prior.dim != spec.n_params:
            raise InvalidInputError(
                f"prior dimension {prior.dim} does not match world parameters {spec.n_params}")
        self.spec = spec
        self.prior = prior
        self.sensors = list(sensors)
        for s in self.sensors:
            for layer in spec.layers:
                if s.role not in layer.properties:
                    raise InvalidInputError(
                        f"sensor {s.name!r} needs property {s.role!r} on layer {layer.name!r}")

    @property
    def dim(self):
        return self.spec.n_params

    @property
    def param_names(self):
        return self.spec.param_names()

    @property
    def param_units(self):
        return self.spec.param_units()

    def predict(self, thetas):
        thetas = np.atleast_2d(thetas)
        kidx = self.spec.top_indices(thetas)
        return [s.predict(self.spec, thetas, kidx) for s in self.sensors]

    def log_likelihood(self, thetas):
        thetas = np.atleast_2d(thetas)
        kidx = self.spec.top_indices(thetas)
        total = np.zeros(len(thetas))
        for s in self.sensors:
            total += log_likelihood_sensor(s.predict(self.spec, thetas, kidx), s.data, s.hyper)
        return total

    def log_prior(self, thetas):
        return self.prior.logpdf(thetas)

    def tempered_log_post(self, theta, beta):
        if not 0.0 <= beta <= 1.0:
            raise InvalidInputError("inverse temperature must lie in [0, 1]")
        lp = float(self.prior.logpdf(theta))
        if beta == 0.0:
            return lp
        return float(beta * self.log_likelihood(theta)[0]) + lp
