"""Forward models: prism gravity, induced-magnetization TMI and 1-D MT.

Gravity and magnetics are linear in their property grids. Their sensitivity
matrices are built once per (geometry, stations) from closed-form prism
integrals. For layered worlds the matrices are also summed down each voxel
column (:class:`ColumnOperator`) so a prediction only needs the index of the
first voxel of each layer in each column.

Conventions: x east, y north, z depth positive down, meters. Gravity is the
downward component in mGal; density in g/cm3. Magnetic field inclination is
positive down, declination clockwise from north.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidInputError, KernelSingularityError
from .world import VoxelGrid, VoxelModel

G = 6.6743e-11
MU0 = 4e-7 * np.pi
SI2MGAL = 1e5
GCC2KGM3 = 1e3

_CHUNK_ELEMENTS = 2_000_000


@dataclass
class SensorLocations:
    points: np.ndarray
    kind: str

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InvalidInputError("sensor points must have shape (n, 3)")
        if not np.all(np.isfinite(self.points)):
            raise InvalidInputError("sensor points must be finite")

    def __len__(self):
        return len(self.points)


@dataclass
class MagneticField:
    magnitude: float        # nT
    inclination: float      # degrees, positive down
    declination: float      # degrees, clockwise from north

    @property
    def direction(self):
        inc = np.radians(self.inclination)
        dec = np.radians(self.declination)
        return np.array([np.cos(inc) * np.sin(dec), np.cos(inc) * np.cos(dec), np.sin(inc)])


@dataclass
class MTConfig:
    frequencies: np.ndarray   # Hz, sorted descending
    sites: np.ndarray         # (n, 2) lateral positions

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float).ravel()
        self.sites = np.atleast_2d(np.asarray(self.sites, dtype=float))
        if np.any(self.frequencies <= 0):
            raise InvalidInputError("MT frequencies must be positive")
        if np.any(np.diff(self.frequencies) >= 0):
            raise InvalidInputError("MT frequencies must be strictly descending")


@dataclass
class LinearKernelMatrix:
    """Per-voxel sensitivities, shape (n_obs, n_voxels), C order over (x, y, z)."""

    matrix: np.ndarray
    kind: str
    grid: VoxelGrid
    field: MagneticField | None = None


def _log_plus(a, b, c, r):
    """Stable ``log(a + r)`` with ``r = sqrt(a^2 + b^2 + c^2)``.

    Returns 0 where the argument vanishes; those terms are multiplied by zero
    or cancel in the corner sum.
    """
    bc = b * b + c * c
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.log(np.where(a >= 0, a + r, 1.0))
        neg = np.log(np.where(bc > 0, bc, 1.0)) - np.log(np.where(r - a > 0, r - a, 1.0))
    out = np.where(a >= 0, pos, neg)
    return np.where((a < 0) & (bc == 0), 0.0, out)


def _atan_ratio(num, den):
    """``arctan(num / den)`` with the value 0 where ``den`` is 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den == 0, 0.0, np.arctan(num / np.where(den == 0, 1.0, den)))


def _corner_sum(f):
    """Signed sum over prism corners, as a triple difference on the edge lattice."""
    return np.diff(np.diff(np.diff(f, axis=-3), axis=-2), axis=-1)


def _check_observers(points, grid: VoxelGrid):
    (x0, x1), (y0, y1), (z0, z1) = grid.bounds
    p = points
    inside = ((p[:, 0] > x0) & (p[:, 0] < x1) & (p[:, 1] > y0) & (p[:, 1] < y1)
              & (p[:, 2] > z0) & (p[:, 2] < z1))
    if np.any(inside):
        bad = np.flatnonzero(inside)[:5].tolist()
        raise KernelSingularityError(f"observation points {bad} lie inside the voxel volume")


def _relative_edges(points, grid):
    ex, ey, ez = grid.edges(0), grid.edges(1), grid.edges(2)
    u = ex[None, :, None, None] - points[:, 0, None, None, None]
    v = ey[None, None, :, None] - points[:, 1, None, None, None]
    w = ez[None, None, None, :] - points[:, 2, None, None, None]
    return u, v, w


def _chunks(n_obs, grid):
    per = (grid.shape[0] + 1) * (grid.shape[1] + 1) * (grid.shape[2] + 1)
    step = max(1, _CHUNK_ELEMENTS // per)
    for start in range(0, n_obs, step):
        yield slice(start, min(n_obs, start + step))


def prism_gz(points, grid: VoxelGrid):
    """Vertical attraction of unit-density (1 g/cm3) prisms, (n_obs, nx, ny, nz) in mGal."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    _check_observers(points, grid)
    out = np.empty((len(points),) + tuple(grid.shape))
    for sl in _chunks(len(points), grid):
        u, v, w = _relative_edges(points[sl], grid)
        r = np.sqrt(u * u + v * v + w * w)
        f = (u * _log_plus(v, u, w, r) + v * _log_plus(u, v, w, r)
             - w * _atan_ratio(u * v, w * r))
        out[sl] = -_corner_sum(f)
    return out * (G * GCC2KGM3 * SI2MGAL)


def prism_hessian(points, grid: VoxelGrid):
    """Hessian of the 1/r volume potential of each prism w.r.t. the observer.

    Returns a dict of the six independent components, each (n_obs, nx, ny, nz).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    _check_observers(points, grid)
    shape = (len(points),) + tuple(grid.shape)
    out = {k: np.empty(shape) for k in ("xx", "yy", "zz", "xy", "xz", "yz")}
    for sl in _chunks(len(points), grid):
        u, v, w = _relative_edges(points[sl], grid)
        r = np.sqrt(u * u + v * v + w * w)
        out["xx"][sl] = -_corner_sum(_atan_ratio(v * w, u * r))
        out["yy"][sl] = -_corner_sum(_atan_ratio(u * w, v * r))
        out["zz"][sl] = -_corner_sum(_atan_ratio(u * v, w * r))
        out["xy"][sl] = _corner_sum(_log_plus(w, u, v, r))
        out["xz"][sl] = _corner_sum(_log_plus(v, u, w, r))
        out["yz"][sl] = _corner_sum(_log_plus(u, v, w, r))
    return out


def prism_tmi(points, grid: VoxelGrid, field: MagneticField):
    """TMI anomaly of unit-susceptibility (SI) prisms under induced magnetization, nT."""
    h = prism_hessian(points, grid)
    fx, fy, fz = field.direction
    proj = (fx * fx * h["xx"] + fy * fy * h["yy"] + fz * fz * h["zz"]
            + 2 * fx * fy * h["xy"] + 2 * fx * fz * h["xz"] + 2 * fy * fz * h["yz"])
    return proj * (field.magnitude / (4 * np.pi))


def _fold_padding(kernel4, pad_cells, shape):
    """Fold sensitivities of edge-copied padding columns back onto the edge columns."""
    if pad_cells == 0:
        return kernel4
    nx, ny = shape[0], shape[1]
    ix = np.clip(np.arange(nx + 2 * pad_cells) - pad_cells, 0, nx - 1)
    iy = np.clip(np.arange(ny + 2 * pad_cells) - pad_cells, 0, ny - 1)
    tmp = np.zeros((kernel4.shape[0], nx, kernel4.shape[2], kernel4.shape[3]))
    np.add.at(tmp, (slice(None), ix), kernel4)
    out = np.zeros((kernel4.shape[0], nx, ny, kernel4.shape[3]))
    np.add.at(out, (slice(None), slice(None), iy), tmp)
    return out


def _padded_grid(grid, pad_cells):
    if pad_cells == 0:
        return grid
    return VoxelGrid(
        origin=(grid.origin[0] - pad_cells * grid.cell[0],
                grid.origin[1] - pad_cells * grid.cell[1], grid.origin[2]),
        cell=grid.cell,
        shape=(grid.shape[0] + 2 * pad_cells, grid.shape[1] + 2 * pad_cells, grid.shape[2]))


def gravity_kernel(grid: VoxelGrid, loc: SensorLocations, pad_cells=0) -> LinearKernelMatrix:
    """Gravity sensitivity matrix.

    With ``pad_cells > 0`` the world is treated as extending past its lateral
    edges by that many edge-copied columns; the padding's sensitivity is
    folded onto the edge columns so the matrix still acts on the unpadded grid.
    """
    k4 = prism_gz(loc.points, _padded_grid(grid, pad_cells))
    k4 = _fold_padding(k4, pad_cells, grid.shape)
    return LinearKernelMatrix(k4.reshape(len(loc), -1), "gravity", grid)


def magnetic_kernel(grid: VoxelGrid, loc: SensorLocations, field: MagneticField,
                    pad_cells=0) -> LinearKernelMatrix:
    k4 = prism_tmi(loc.points, _padded_grid(grid, pad_cells), field)
    k4 = _fold_padding(k4, pad_cells, grid.shape)
    return LinearKernelMatrix(k4.reshape(len(loc), -1), "magnetic", grid, field)


def mean_centre(values):
    return values - values.mean(axis=-1, keepdims=True)


def gravity_forward(model: VoxelModel, loc: SensorLocations, kernel=None):
    """Mean-centred gravity anomaly (mGal) of a voxel model."""
    if kernel is None:
        kernel = gravity_kernel(model.grid, loc)
    return mean_centre(kernel.matrix @ model.properties["density"].ravel())


def magnetic_forward(model: VoxelModel, loc: SensorLocations, field: MagneticField, kernel=None):
    """Mean-centred TMI anomaly (nT); susceptibility is stored as log10(SI)."""
    if kernel is None:
        kernel = magnetic_kernel(model.grid, loc, field)
    chi = 10.0 ** model.properties["log10_susceptibility"]
    return mean_centre(kernel.matrix @ chi.ravel())


def mt1d_impedance(resistivity, thickness, frequencies):
    """Surface impedance of 1-D layered earths.

    Parameters
    ----------
    resistivity : array (..., L)
        Layer resistivities in ohm m; the last layer is a half-space.
    thickness : array (..., L-1)
        Thicknesses of the upper L-1 layers in meters.
    frequencies : array (F,)
        Hz.

    Returns
    -------
    Z : complex array (..., F), in ohms (E/H).
    """
    rho = np.asarray(resistivity, dtype=float)
    h = np.asarray(thickness, dtype=float)
    if np.any(~(rho > 0)):
        raise InvalidInputError("resistivities must be positive")
    omega = 2 * np.pi * np.asarray(frequencies, dtype=float)
    iwm = 1j * omega * MU0
    rho = rho[..., None]
    h = h[..., None]
    z = np.sqrt(iwm * rho[..., -1, :])
    for j in range(rho.shape[-2] - 2, -1, -1):
        zeta = np.sqrt(iwm * rho[..., j, :])
        gamma = np.sqrt(iwm / rho[..., j, :])
        e = np.exp(-2.0 * gamma * h[..., j, :])
        refl = (zeta - z) / (zeta + z)
        z = zeta * (1 - refl * e) / (1 + refl * e)
    return z


def apparent_resistivity_phase(z, frequencies):
    omega = 2 * np.pi * np.asarray(frequencies, dtype=float)
    return np.abs(z) ** 2 / (omega * MU0), np.degrees(np.angle(z))


def mt1d_forward(model: VoxelModel, cfg: MTConfig):
    """Apparent resistivity (ohm m) and phase (deg), each (n_sites, n_freq).

    Each voxel beneath a site is one layer; the deepest voxel is a half-space.
    """
    cols = model.grid.column_of(cfg.sites[:, 0], cfg.sites[:, 1])
    logres = model.properties["log10_resistivity"].reshape(model.grid.n_columns, -1)[cols]
    dz = model.grid.cell[2]
    thick = np.full((len(cols), logres.shape[1] - 1), dz)
    z = mt1d_impedance(10.0 ** logres, thick, cfg.frequencies)
    return apparent_resistivity_phase(z, cfg.frequencies)


@njit(cache=True)
def _gather_add(table, rows, coef, out):
    """out[b] += sum_i coef[b, i] * sum_c table[rows[b, i, c]]."""
    nb, ni, nc = rows.shape
    no = table.shape[1]
    acc = np.empty(no)
    for b in range(nb):
        for i in range(ni):
            acc[:] = 0.0
            for c in range(nc):
                r = rows[b, i, c]
                for o in range(no):
                    acc[o] += table[r, o]
            w = coef[b, i]
            for o in range(no):
                out[b, o] += w * acc[o]


class ColumnOperator:
    """Column-cumulative form of a linear kernel for layered worlds.

    ``table[c*(nz+1) + k]`` holds the summed sensitivity of the top ``k``
    voxels of column ``c``. A world whose layer i starts at voxel ``k_i``
    in every column then predicts

        v_N * S(nz) + sum_{i>=2} (v_{i-1} - v_i) * S(k_i),

    with ``S(k) = sum_c table[c, k_c]``.
    """

    def __init__(self, kernel: LinearKernelMatrix):
        grid = kernel.grid
        ncol, nz = grid.n_columns, grid.shape[2]
        k3 = kernel.matrix.reshape(-1, ncol, nz)
        table = np.zeros((ncol, nz + 1, k3.shape[0]))
        table[:, 1:, :] = np.cumsum(k3, axis=2).transpose(1, 2, 0)
        self.nz = nz
        self.table = table.reshape(ncol * (nz + 1), -1)
        self.total = table[:, nz, :].sum(axis=0)
        self._base = np.arange(ncol) * (nz + 1)

    def predict(self, kidx, values):
        """Mean-centred predictions (B, n_obs).

        ``kidx`` is (B, N, ncol) from ``WorldSpec.top_indices``; ``values``
        is (B, N) per-layer property values.
        """
        out = values[:, -1:] * self.total
        if kidx.shape[1] > 1:
            rows = np.ascontiguousarray(kidx[:, 1:, :] + self._base)
            coef = np.ascontiguousarray(values[:, :-1] - values[:, 1:], dtype=float)
            _gather_add(self.table, rows, coef, out)
        return mean_centre(out)


def mt_layered(kidx, log10_res, dz, nz, frequencies):
    """MT response of layered columns given first-voxel indices.

    ``kidx`` is (B, N, n_sites); ``log10_res`` is (B, N). Matches
    :func:`mt1d_forward` on the voxelised world: the layer occupying the
    deepest voxel is the half-space.
    """
    b, n, ns = kidx.shape
    rho = 10.0 ** log10_res
    starts = kidx.copy()
    starts[:, 0, :] = 0
    ends = np.concatenate([starts[:, 1:, :], np.full((b, 1, ns), nz)], axis=1)
    thick = (ends - starts) * dz
    bottom = np.maximum((kidx <= nz - 1).sum(axis=1), 1) - 1            # (B, ns)
    omega = 2 * np.pi * np.asarray(frequencies, dtype=float)
    iwm = 1j * omega * MU0
    rho_hs = np.take_along_axis(rho, bottom, axis=1)                     # (B, ns)
    z = np.sqrt(iwm * rho_hs[..., None])
    for j in range(n - 2, -1, -1):
        zeta = np.sqrt(iwm * rho[:, j, None, None])
        gamma = np.sqrt(iwm / rho[:, j, None, None])
        e = np.exp(-2.0 * gamma * thick[:, j, :, None])
        refl = (zeta - z) / (zeta + z)
        znew = zeta * (1 - refl * e) / (1 + refl * e)
        z = np.where((j < bottom)[..., None], znew, z)
    return apparent_resistivity_phase(z, frequencies)
