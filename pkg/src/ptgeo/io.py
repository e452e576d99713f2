"""Survey CSV loading, subsampling and small file helpers.

Column names and units are fixed:

* gravity / magnetic: ``x_m, y_m, z_m, value`` (mGal or nT)
* MT: ``x_m, y_m, freq_hz, app_res_ohmm, phase_deg``
* mean depth tables: ``x_m, y_m, depth_m``
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .forward import MagneticField, MTConfig, SensorLocations
from .likelihood import GravitySensor, MagneticSensor, MTSensor, NoiseHyper, SensorData
from .world import MeanDepth

COLUMNS = {
    "gravity": ("x_m", "y_m", "z_m", "value"),
    "magnetic": ("x_m", "y_m", "z_m", "value"),
    "mt": ("x_m", "y_m", "freq_hz", "app_res_ohmm", "phase_deg"),
    "mean_depth": ("x_m", "y_m", "depth_m"),
}


@dataclass
class MTSurvey:
    """MT soundings: site/frequency layout plus one row per observation."""

    config: MTConfig
    row_site: np.ndarray
    row_freq: np.ndarray
    rows: np.ndarray        # (K, 5) in file column order, sorted

    def __len__(self):
        return len(self.rows)


def read_table(path, columns):
    """Numeric rows of a headed CSV; errors carry 1-based line numbers."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            lines = list(csv.reader(fh))
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from None
    if not lines or not any(c.strip() for c in lines[0]):
        raise InvalidInputError(f"{path}: file is empty")
    header = [c.strip() for c in lines[0]]
    missing = [c for c in columns if c not in header]
    if missing:
        raise InvalidInputError(f"{path}: line 1: header lacks columns {missing}")
    order = [header.index(c) for c in columns]
    rows, problems = [], []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw or not any(c.strip() for c in raw):
            continue
        if len(raw) != len(header):
            problems.append(f"line {lineno}: expected {len(header)} fields, got {len(raw)}")
            continue
        try:
            vals = [float(raw[i]) for i in order]
        except ValueError:
            problems.append(f"line {lineno}: non-numeric field")
            continue
        if not all(np.isfinite(vals)):
            problems.append(f"line {lineno}: non-finite value")
            continue
        rows.append(vals)
    if problems:
        raise InvalidInputError(f"{path}: rejected rows: " + "; ".join(problems))
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def write_table(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows([repr(float(v)) for v in row] for row in rows)


def _mt_survey(rows):
    order = np.lexsort((-rows[:, 2], rows[:, 1], rows[:, 0]))
    rows = rows[order]
    if np.any(rows[:, 2] <= 0) or np.any(rows[:, 3] <= 0):
        raise InvalidInputError("MT frequencies and apparent resistivities must be positive")
    sites, row_site = np.unique(rows[:, :2], axis=0, return_inverse=True)
    freqs = np.unique(rows[:, 2])[::-1]
    row_freq = np.searchsorted(-freqs, -rows[:, 2])
    key = row_site * len(freqs) + row_freq
    if len(np.unique(key)) != len(key):
        raise InvalidInputError("MT file repeats a (site, frequency) pair")
    return MTSurvey(MTConfig(freqs, sites), row_site.ravel(), row_freq, rows)


def load_sensor_csv(path, kind):
    """Read one sensor file.

    Returns ``(SensorLocations, SensorData)`` for gravity and magnetic data
    and ``(MTSurvey, SensorData)`` for MT, whose two data channels are
    log10 apparent resistivity and phase in degrees. MT rows are sorted by
    site and then by descending frequency.
    """
    if kind not in ("gravity", "magnetic", "mt"):
        raise InvalidInputError(f"unknown sensor kind {kind!r}")
    rows = read_table(path, COLUMNS[kind])
    if kind == "mt":
        survey = _mt_survey(rows)
        values = np.column_stack([np.log10(survey.rows[:, 3]), survey.rows[:, 4]])
        return survey, SensorData(values)
    return SensorLocations(rows[:, :3], kind), SensorData(rows[:, 3], centred=True)


def load_mean_depth_csv(path) -> MeanDepth:
    rows = read_table(path, COLUMNS["mean_depth"])
    return MeanDepth.from_points(rows[:, 0], rows[:, 1], rows[:, 2])


def subsample_indices(size, n, seed):
    """Sorted indices of a uniform random subset of ``n`` out of ``size``."""
    if not 1 <= n <= size:
        raise InvalidInputError(f"subsample size must lie in [1, {size}], got {n}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(size, size=n, replace=False))


def subsample(rows, n, seed):
    """Uniform random subset of table rows without replacement, original order kept."""
    rows = np.asarray(rows)
    return rows[subsample_indices(len(rows), n, seed)]


def subsample_csv(src, dst, kind, n, seed):
    rows = read_table(src, COLUMNS[kind])
    out = subsample(rows, n, seed)
    write_table(dst, COLUMNS[kind], out)
    return out


def build_sensor(cfg, spec, scfg, index):
    """Sensor object for one config entry; data paths resolve against the config."""
    name = scfg.name or f"{scfg.kind}{index}"
    hyper = NoiseHyper(scfg.noise.alpha, scfg.noise.beta)
    loc, data = load_sensor_csv(cfg.resolve(scfg.data), scfg.kind)
    if scfg.kind == "gravity":
        return GravitySensor(spec, loc, data, hyper, pad_cells=scfg.pad_cells, name=name)
    if scfg.kind == "magnetic":
        f = scfg.field
        field = MagneticField(f.magnitude_nT, f.inclination_deg, f.declination_deg)
        return MagneticSensor(spec, loc, data, hyper, field, pad_cells=scfg.pad_cells, name=name)
    return MTSensor(spec, loc.config, loc.row_site, loc.row_freq, data, hyper, name=name)
