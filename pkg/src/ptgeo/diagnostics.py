"""Post-hoc chain diagnostics and posterior summaries.

Everything here reads finished sample arrays; nothing runs inside the
sampling loop.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSeriesError, InvalidInputError
from .world import WorldSpec

ACCEPT_BAND = (0.20, 0.50)
IACT_CUTOFF = 0.05
GR_THRESHOLD = 1.1


def _series(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InvalidInputError("expected a 1-D series")
    if x.size < 2:
        raise InvalidInputError("series needs at least two samples")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("series contains non-finite values")
    return x


def _acf_full(x):
    """rho_l for l = 0..N-1 with the normalization 1/((N - l) s^2)."""
    n = x.size
    dev = x - x.mean()
    w = dev @ dev / (n - 1)
    if w <= 0.0:
        raise DegenerateSeriesError("series is constant; autocorrelation is undefined")
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(dev, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    return acov / ((n - np.arange(n)) * w)


def acf(samples, max_lag):
    """Autocorrelation rho_1..rho_max_lag of one chain."""
    x = _series(samples)
    if not 1 <= max_lag < x.size:
        raise InvalidInputError("max_lag must satisfy 1 <= max_lag < N")
    return _acf_full(x)[1:max_lag + 1]


def iact(samples, cutoff=IACT_CUTOFF):
    """Integrated autocorrelation time 1 + 2 sum (1 - l/N) rho_l.

    The sum stops before the first lag whose autocorrelation falls below
    ``cutoff``.
    """
    x = _series(samples)
    n = x.size
    rho = _acf_full(x)
    below = np.nonzero(rho[1:] < cutoff)[0]
    stop = below[0] + 1 if below.size else n
    lags = np.arange(1, stop)
    return max(0.0, 1.0 + 2.0 * np.sum((1.0 - lags / n) * rho[1:stop]))


def gelman_rubin_from(b, w, m, n):
    """(N-1)/N + (M+1)/(M N) B/W."""
    if w <= 0:
        raise DegenerateSeriesError("within-chain variance is zero")
    return (n - 1) / n + (m + 1) / (m * n) * b / w


@dataclass
class ChainStats:
    means: np.ndarray
    pooled_mean: float
    b: float
    w: float
    s2: np.ndarray
    ratio: float


def chain_stats(chains) -> ChainStats:
    """Between/within variances for one parameter across M chains of length N."""
    lengths = {len(c) for c in chains}
    if len(lengths) != 1:
        raise InvalidInputError("chains must have equal length")
    x = np.asarray(chains, dtype=float)
    m, n = x.shape
    if m < 2 or n < 2:
        raise InvalidInputError("need at least two chains of at least two samples")
    means = x.mean(axis=1)
    pooled = means.mean()
    b = n / (m - 1) * np.sum((means - pooled) ** 2)
    s2 = x.var(axis=1, ddof=1)
    w = s2.mean()
    return ChainStats(means, pooled, b, w, s2, gelman_rubin_from(b, w, m, n))


def gelman_rubin(chains):
    """Potential scale reduction V/W for one parameter; chains is (M, N)."""
    return chain_stats(chains).ratio


def acceptance_fraction(accepted, n=None):
    """Fraction accepted; ``accepted`` is a boolean series or a count with ``n``."""
    if n is None:
        a = np.asarray(accepted)
        if a.size < 1:
            raise InvalidInputError("need at least one proposal")
        return float(a.mean())
    if n < 1:
        raise InvalidInputError("need at least one proposal")
    return float(accepted) / n


def acceptance_flags(fractions, band=ACCEPT_BAND):
    """True where a chain's acceptance lies outside the recommended band."""
    f = np.asarray(fractions, dtype=float)
    return (f < band[0]) | (f > band[1])


# -- voxel posterior ----------------------------------------------------------

def entropy_bits(p, axis=-1):
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=axis)


@dataclass
class EntropyMap:
    grid: object
    probabilities: np.ndarray   # (nx, ny, nz, N)
    entropy: np.ndarray         # N-layer entropy, bits
    target_layer: int | None = None

    @property
    def target_probability(self):
        if self.target_layer is None:
            raise InvalidInputError("no target layer was designated")
        return self.probabilities[..., self.target_layer]

    @property
    def target_entropy(self):
        p = self.target_probability
        return entropy_bits(np.stack([p, 1.0 - p], axis=-1))

    def _below(self, depth):
        zc = self.grid.centres(2)
        mask = zc >= depth
        if not mask.any():
            raise InvalidInputError(f"no voxels below depth {depth}")
        return mask

    def mean_entropy(self, depth=None, binary=False):
        """Volume-mean entropy S over voxels with centres at or below ``depth``."""
        e = self.target_entropy if binary else self.entropy
        if depth is None:
            return float(e.mean())
        return float(e[:, :, self._below(depth)].mean())


def voxel_posterior(samples, spec: WorldSpec, target_layer=None, chunk=256) -> EntropyMap:
    """Layer-membership probabilities and entropy over voxelised samples."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 1:
        raise InvalidInputError("need at least one sample")
    nl = spec.n_layers
    counts = np.zeros(spec.grid.shape + (nl,), dtype=np.int64)
    flat = counts.reshape(-1, nl)
    nvox = flat.shape[0]
    base = np.arange(nvox) * nl
    for start in range(0, len(samples), chunk):
        block = samples[start:start + chunk]
        occ = spec.occupancy_from_indices(spec.top_indices(block)).reshape(len(block), -1)
        idx = (occ.astype(np.int64) - 1) + base
        flat += np.bincount(idx.ravel(), minlength=nvox * nl).reshape(nvox, nl)
    p = counts / len(samples)
    tl = spec.layer_index(target_layer) if isinstance(target_layer, str) else target_layer
    return EntropyMap(grid=spec.grid, probabilities=p, entropy=entropy_bits(p), target_layer=tl)


# -- residuals ---------------------------------------------------------------

@dataclass
class ResidualSummary:
    names: list
    sigma: list          # per sensor, per channel
    residuals: list      # data - mean prediction
    mean_prediction: list


def residual_summary(samples, posterior, chunk=256) -> ResidualSummary:
    """Spread of the data about the posterior-mean prediction for every sensor."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 1:
        raise InvalidInputError("need at least one sample")
    sums = None
    for start in range(0, len(samples), chunk):
        preds = posterior.predict(samples[start:start + chunk])
        part = [p.sum(axis=0) for p in preds]
        sums = part if sums is None else [a + b for a, b in zip(sums, part)]
    mean_pred = [s / len(samples) for s in sums]
    res, sig = [], []
    for sensor, mp in zip(posterior.sensors, mean_pred):
        r = sensor.data.reference - mp
        res.append(r)
        sig.append(np.atleast_1d(r.std(axis=0, ddof=1) if len(r) > 1 else np.zeros(r.shape[1:])))
    return ResidualSummary([s.name for s in posterior.sensors], sig, res, mean_pred)


# -- slices --------------------------------------------------------------------

def slice_index(grid, depth):
    z0, z1 = grid.bounds[2]
    if not z0 <= depth <= z1:
        raise InvalidInputError(f"depth {depth} lies outside the volume [{z0}, {z1}]")
    k = int(np.floor((depth - z0) / grid.cell[2]))
    return min(k, grid.shape[2] - 1)


def slice_export(values, grid, depth, path=None):
    """Rows (x, y, value) of the horizontal voxel layer containing ``depth``.

    ``values`` is a (nx, ny, nz) grid or an :class:`EntropyMap` (its target
    probability if a target layer is set, otherwise its entropy).
    """
    if isinstance(values, EntropyMap):
        values = values.target_probability if values.target_layer is not None else values.entropy
    values = np.asarray(values, dtype=float)
    if values.shape != tuple(grid.shape):
        raise InvalidInputError(f"grid values have shape {values.shape}, expected {grid.shape}")
    k = slice_index(grid, depth)
    xy = grid.column_centres()
    rows = np.column_stack([xy, values[:, :, k].ravel()])
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x_m", "y_m", "value"])
            w.writerows((repr(float(a)), repr(float(b)), repr(float(c))) for a, b, c in rows)
    return rows


def read_slice(path, grid):
    """Inverse of :func:`slice_export` for a file written on ``grid``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if len(data) != grid.n_columns:
        raise InvalidInputError(f"slice has {len(data)} rows, grid has {grid.n_columns} columns")
    return data[:, 2].reshape(grid.shape[0], grid.shape[1])


# -- summary table ------------------------------------------------------------

TABLE_COLUMNS = ("tau_min", "tau_med", "tau_max", "sigma", "S_mean", "N", "cpu_per_tau_max")


def table_row(chains, sigma, s_mean, cpu_seconds, thinning=1):
    """One row in the layout of a per-run summary table.

    ``chains`` is (M, N, P) of recorded samples taken every ``thinning``
    iterations; taus are per parameter, averaged over chains and expressed
    in iterations. ``cpu_seconds`` is the total CPU time of the run, so the
    last column is the CPU cost of one worst-case autocorrelation time.
    """
    chains = np.asarray(chains, dtype=float)
    m, n, p = chains.shape
    taus = thinning * np.array([np.mean([iact(chains[i, :, j]) for i in range(m)])
                                for j in range(p)])
    n = n * thinning
    return {
        "tau_min": float(taus.min()),
        "tau_med": float(np.median(taus)),
        "tau_max": float(taus.max()),
        "sigma": sigma,
        "S_mean": s_mean,
        "N": int(m * n),
        "cpu_per_tau_max": float(cpu_seconds / (m * n / taus.max())),
        "taus": taus.tolist(),
    }
