"""Layered world parametrization and voxelisation.

A world is a stack of layers with spatially constant rock properties. The top
of each layer is a smooth surface: a mean-depth function plus a noiseless
Gaussian-process interpolation of depth offsets at a regular grid of control
sites. Depth is positive down, coordinates are in meters, x east, y north.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import RegularGridInterpolator

from .errors import ConditioningError, InvalidInputError

PROPERTY_ROLES = ("density", "log10_susceptibility", "log10_resistivity")
PROPERTY_UNITS = {
    "density": "g/cm3",
    "log10_susceptibility": "log10(SI)",
    "log10_resistivity": "log10(ohm m)",
}

_JITTER_START = 1e-8
_JITTER_MAX = 1e-4


def rbf_kernel(p, q, delta_x, delta_y):
    """Squared-exponential kernel between lateral points.

    ``p`` and ``q`` broadcast against each other with a trailing axis of
    length 2, so this also builds Gram matrices from ``p[:, None]`` and
    ``q[None, :]``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise InvalidInputError("rbf_kernel: non-finite coordinates")
    if delta_x <= 0 or delta_y <= 0:
        raise InvalidInputError("rbf_kernel: kernel lengths must be positive")
    d = p - q
    return np.exp(-(d[..., 0] / delta_x) ** 2 - (d[..., 1] / delta_y) ** 2)


@dataclass(frozen=True)
class GridSpec:
    """Regular lattice of ``nx`` x ``ny`` control sites spanning the bounds.

    An axis with a single site places it at the midpoint of that axis.
    """

    nx: int
    ny: int
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise InvalidInputError("GridSpec: nx and ny must be >= 1")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise InvalidInputError("GridSpec: need x1 > x0 and y1 > y0")

    @property
    def size(self):
        return self.nx * self.ny

    @property
    def xs(self):
        if self.nx == 1:
            return np.array([0.5 * (self.x0 + self.x1)])
        return np.linspace(self.x0, self.x1, self.nx)

    @property
    def ys(self):
        if self.ny == 1:
            return np.array([0.5 * (self.y0 + self.y1)])
        return np.linspace(self.y0, self.y1, self.ny)

    @property
    def spacing(self):
        dx = (self.x1 - self.x0) / (self.nx - 1) if self.nx > 1 else self.x1 - self.x0
        dy = (self.y1 - self.y0) / (self.ny - 1) if self.ny > 1 else self.y1 - self.y0
        return dx, dy

    def sites(self):
        """Site coordinates, shape (nx*ny, 2), x index varying slowest."""
        gx, gy = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def site_labels(self):
        return [f"{ix},{iy}" for ix in range(self.nx) for iy in range(self.ny)]


class MeanDepth:
    """Mean depth of a layer top: a constant or a bilinear table.

    Table queries outside the tabulated area are clamped to the nearest edge.
    """

    def __init__(self, value=None, xs=None, ys=None, depths=None):
        if value is not None:
            self.constant = float(value)
            self._interp = None
            return
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        depths = np.asarray(depths, dtype=float)
        if depths.shape != (xs.size, ys.size):
            raise InvalidInputError(
                f"mean-depth table shape {depths.shape} does not match axes "
                f"({xs.size}, {ys.size})")
        if not np.all(np.isfinite(depths)):
            raise InvalidInputError("mean-depth table contains non-finite depths")
        self.constant = None
        self.xs, self.ys, self.depths = xs, ys, depths
        self._interp = RegularGridInterpolator((xs, ys), depths, method="linear")

    @classmethod
    def from_points(cls, x, y, depth):
        """Build a table from scattered rows that form a complete lattice."""
        xs = np.unique(x)
        ys = np.unique(y)
        if xs.size * ys.size != len(depth):
            raise InvalidInputError("mean-depth rows do not form a complete x-y lattice")
        table = np.full((xs.size, ys.size), np.nan)
        table[np.searchsorted(xs, x), np.searchsorted(ys, y)] = depth
        if np.isnan(table).any():
            raise InvalidInputError("mean-depth rows do not form a complete x-y lattice")
        return cls(xs=xs, ys=ys, depths=table)

    def covers(self, x0, x1, y0, y1):
        if self._interp is None:
            return True
        return (self.xs[0] <= x0 and self.xs[-1] >= x1
                and self.ys[0] <= y0 and self.ys[-1] >= y1)

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        if self._interp is None:
            return np.full(points.shape[:-1], self.constant)
        px = np.clip(points[..., 0], self.xs[0], self.xs[-1])
        py = np.clip(points[..., 1], self.ys[0], self.ys[-1])
        return self._interp(np.stack([px, py], axis=-1))


class BoundaryGP:
    """Noiseless GP through the control sites of one layer.

    The Gram matrix depends only on geometry, so it is factorized once.
    """

    def __init__(self, sites, delta_x, delta_y):
        self.sites = np.asarray(sites, dtype=float)
        self.delta_x = float(delta_x)
        self.delta_y = float(delta_y)
        gram = rbf_kernel(self.sites[:, None, :], self.sites[None, :, :],
                          self.delta_x, self.delta_y)
        n = len(self.sites)
        scale = np.trace(gram) / n
        rel = _JITTER_START
        while True:
            try:
                self.factor = linalg.cho_factor(gram + rel * scale * np.eye(n), lower=True)
                break
            except linalg.LinAlgError:
                rel *= 10.0
                if rel > _JITTER_MAX * (1 + 1e-9):
                    raise ConditioningError(
                        "control-site Gram matrix not positive definite even with "
                        f"jitter {_JITTER_MAX:g}")
        self.jitter = rel * scale

    def weights(self, query):
        """Interpolation weights ``k(q, X) (K + eps I)^-1``, shape (nq, n)."""
        query = np.asarray(query, dtype=float).reshape(-1, 2)
        kq = rbf_kernel(self.sites[:, None, :], query[None, :, :], self.delta_x, self.delta_y)
        return linalg.cho_solve(self.factor, kq).T


@dataclass
class LayerSpec:
    name: str
    grid: GridSpec | None
    mean_depth: MeanDepth
    properties: tuple = ("density",)
    delta_x: float | None = None
    delta_y: float | None = None

    def __post_init__(self):
        self.properties = tuple(self.properties)
        for role in self.properties:
            if role not in PROPERTY_ROLES:
                raise InvalidInputError(f"layer {self.name!r}: unknown property {role!r}")
        if len(set(self.properties)) != len(self.properties):
            raise InvalidInputError(f"layer {self.name!r}: duplicated property role")
        if self.grid is not None:
            dx, dy = self.grid.spacing
            if self.delta_x is None:
                self.delta_x = dx
            if self.delta_y is None:
                self.delta_y = dy
            if self.delta_x <= 0 or self.delta_y <= 0:
                raise InvalidInputError(f"layer {self.name!r}: kernel lengths must be positive")

    @property
    def n_control(self):
        return 0 if self.grid is None else self.grid.size

    @cached_property
    def gp(self):
        if self.grid is None:
            return None
        return BoundaryGP(self.grid.sites(), self.delta_x, self.delta_y)


def interpolate_boundary(layer: LayerSpec, alpha, query):
    """Depth of a layer top at lateral query points.

    Returns ``mean_depth(q) + k(q, X) (K + eps I)^-1 alpha``.
    """
    query = np.asarray(query, dtype=float).reshape(-1, 2)
    alpha = np.asarray(alpha, dtype=float).ravel()
    if alpha.size != layer.n_control:
        raise InvalidInputError(
            f"layer {layer.name!r}: expected {layer.n_control} offsets, got {alpha.size}")
    base = layer.mean_depth(query)
    if layer.grid is None:
        return base
    return base + layer.gp.weights(query) @ alpha


@dataclass(frozen=True)
class VoxelGrid:
    """Regular voxel lattice; axis order is (x, y, z) with z positive down."""

    origin: tuple
    cell: tuple
    shape: tuple

    @property
    def n_columns(self):
        return self.shape[0] * self.shape[1]

    @property
    def n_voxels(self):
        return self.shape[0] * self.shape[1] * self.shape[2]

    def edges(self, axis):
        return self.origin[axis] + self.cell[axis] * np.arange(self.shape[axis] + 1)

    def centres(self, axis):
        return self.origin[axis] + self.cell[axis] * (np.arange(self.shape[axis]) + 0.5)

    def column_centres(self):
        gx, gy = np.meshgrid(self.centres(0), self.centres(1), indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def column_of(self, x, y):
        """Flat column index of the voxel column containing (x, y)."""
        ix = np.floor((np.asarray(x, dtype=float) - self.origin[0]) / self.cell[0]).astype(int)
        iy = np.floor((np.asarray(y, dtype=float) - self.origin[1]) / self.cell[1]).astype(int)
        # points on the far edge belong to the last column
        ix = np.where(ix == self.shape[0], self.shape[0] - 1, ix)
        iy = np.where(iy == self.shape[1], self.shape[1] - 1, iy)
        if np.any((ix < 0) | (ix >= self.shape[0]) | (iy < 0) | (iy >= self.shape[1])):
            raise InvalidInputError("point lies outside the lateral extent of the voxel grid")
        return ix * self.shape[1] + iy

    @property
    def bounds(self):
        return tuple((self.origin[a], self.origin[a] + self.cell[a] * self.shape[a])
                     for a in range(3))


@dataclass
class WorldParams:
    """Per-layer control offsets (m) and rock-property vectors."""

    alpha: list
    rho: list

    def pack(self):
        parts = [np.asarray(a, dtype=float).ravel() for a in self.alpha]
        parts += [np.asarray(r, dtype=float).ravel() for r in self.rho]
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class VoxelModel:
    grid: VoxelGrid
    occupancy: np.ndarray          # 1-based layer index, shape grid.shape
    properties: dict = field(default_factory=dict)

    @property
    def cell_size(self):
        return self.grid.cell


class WorldSpec:
    """Static description of the layered world.

    ``bounds`` is ((x0, x1), (y0, y1), (z0, z1)) for the surveyed footprint;
    the rendered volume is widened laterally by ``margin`` on every side and
    divided into ``voxel_res`` cells.
    """

    def __init__(self, layers: Sequence[LayerSpec], bounds, voxel_res, margin=0.0):
        self.layers = list(layers)
        if not self.layers:
            raise InvalidInputError("world needs at least one layer")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise InvalidInputError("layer names must be unique")
        (x0, x1), (y0, y1), (z0, z1) = bounds
        if not (x1 > x0 and y1 > y0 and z1 > z0):
            raise InvalidInputError("world bounds must have positive extent")
        if margin < 0:
            raise InvalidInputError("margin must be >= 0")
        voxel_res = tuple(int(r) for r in voxel_res)
        if len(voxel_res) != 3 or min(voxel_res) < 1:
            raise InvalidInputError("voxel_res needs three counts >= 1")
        for layer in self.layers:
            if not layer.mean_depth.covers(x0, x1, y0, y1):
                raise InvalidInputError(
                    f"layer {layer.name!r}: mean-depth table does not cover the world bounds")
        self.bounds = ((float(x0), float(x1)), (float(y0), float(y1)), (float(z0), float(z1)))
        self.margin = float(margin)
        self.voxel_res = voxel_res
        lo = (x0 - margin, y0 - margin, z0)
        ext = (x1 - x0 + 2 * margin, y1 - y0 + 2 * margin, z1 - z0)
        self.grid = VoxelGrid(origin=tuple(float(v) for v in lo),
                              cell=tuple(e / r for e, r in zip(ext, voxel_res)),
                              shape=voxel_res)
        self._build_layout()

    def _build_layout(self):
        self.alpha_slices = []
        self.rho_slices = []
        start = 0
        for layer in self.layers:
            self.alpha_slices.append(slice(start, start + layer.n_control))
            start += layer.n_control
        self.n_alpha = start
        for layer in self.layers:
            self.rho_slices.append(slice(start, start + len(layer.properties)))
            start += len(layer.properties)
        self.n_params = start

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def layer_names(self):
        return [layer.name for layer in self.layers]

    def layer_index(self, name):
        try:
            return self.layer_names.index(name)
        except ValueError:
            raise InvalidInputError(f"unknown layer {name!r}") from None

    def param_names(self):
        names = []
        for layer in self.layers:
            if layer.grid is not None:
                names += [f"{layer.name}.alpha[{s}]" for s in layer.grid.site_labels()]
        for layer in self.layers:
            names += [f"{layer.name}.{role}" for role in layer.properties]
        return names

    def param_units(self):
        units = ["m"] * self.n_alpha
        for layer in self.layers:
            units += [PROPERTY_UNITS[role] for role in layer.properties]
        return units

    def unpack(self, vector) -> WorldParams:
        v = np.asarray(vector, dtype=float)
        if v.shape != (self.n_params,):
            raise InvalidInputError(f"expected a vector of length {self.n_params}, got {v.shape}")
        return WorldParams(alpha=[v[s].copy() for s in self.alpha_slices],
                           rho=[v[s].copy() for s in self.rho_slices])

    def pack(self, params: WorldParams):
        for layer, a, r in zip(self.layers, params.alpha, params.rho):
            if np.size(a) != layer.n_control or np.size(r) != len(layer.properties):
                raise InvalidInputError(f"layer {layer.name!r}: parameter dimensions do not match")
        return params.pack()

    def property_values(self, thetas, role):
        """Values of one property role for every layer, shape (B, N)."""
        thetas = np.atleast_2d(thetas)
        cols = []
        for layer, s in zip(self.layers, self.rho_slices):
            if role not in layer.properties:
                raise InvalidInputError(f"layer {layer.name!r} has no {role!r} property")
            cols.append(thetas[:, s.start + layer.properties.index(role)])
        return np.stack(cols, axis=1)

    # -- column-wise rendering --------------------------------------------

    @cached_property
    def _column_operators(self):
        centres = self.grid.column_centres()
        ops = []
        for layer in self.layers:
            mu = layer.mean_depth(centres)
            w = None if layer.grid is None else layer.gp.weights(centres)
            ops.append((mu, w))
        return ops

    @cached_property
    def z_centres(self):
        return self.grid.centres(2)

    def column_boundaries(self, thetas):
        """Boundary depths at every column centre, shape (B, N, ncol)."""
        thetas = np.atleast_2d(thetas)
        out = np.empty((thetas.shape[0], self.n_layers, self.grid.n_columns))
        for i, ((mu, w), s) in enumerate(zip(self._column_operators, self.alpha_slices)):
            out[:, i, :] = mu
            if w is not None:
                out[:, i, :] += thetas[:, s] @ w.T
        return out

    def top_indices(self, thetas):
        """Index of the first voxel of each layer in each column, shape (B, N, ncol).

        Effective tops are the running maximum of boundary depths, so a layer
        whose lower boundary rises above its top pinches out. A voxel belongs
        to layer i when its centre lies in [top_i, top_{i+1}); everything above
        the first top belongs to layer 1.
        """
        tops = np.maximum.accumulate(self.column_boundaries(thetas), axis=1)
        return np.searchsorted(self.z_centres, tops.ravel(), side="left").reshape(tops.shape)

    def occupancy_from_indices(self, kidx):
        """Occupancy grids (B, nx, ny, nz) from :meth:`top_indices` output."""
        nz = self.grid.shape[2]
        counts = (kidx[:, :, :, None] <= np.arange(nz)).sum(axis=1)
        occ = np.maximum(counts, 1).astype(np.int16)
        return occ.reshape((kidx.shape[0],) + self.grid.shape)


def voxelise(spec: WorldSpec, params) -> VoxelModel:
    """Render one parameter set into a voxel model."""
    theta = spec.pack(params) if isinstance(params, WorldParams) else np.asarray(params, float)
    if theta.shape != (spec.n_params,):
        raise InvalidInputError(f"expected {spec.n_params} parameters, got {theta.shape}")
    occ = spec.occupancy_from_indices(spec.top_indices(theta[None]))[0]
    unpacked = spec.unpack(theta)
    props = {}
    roles = {role for layer in spec.layers for role in layer.properties}
    for role in sorted(roles):
        table = np.full(spec.n_layers, np.nan)
        for i, layer in enumerate(spec.layers):
            if role in layer.properties:
                table[i] = unpacked.rho[i][layer.properties.index(role)]
        props[role] = table[occ - 1]
    return VoxelModel(grid=spec.grid, occupancy=occ, properties=props)


def extend_margins(model: VoxelModel, pad_cells: int) -> VoxelModel:
    """Pad a model laterally by copying its edge columns outward."""
    if pad_cells < 0:
        raise InvalidInputError("pad_cells must be >= 0")
    if pad_cells == 0:
        return model
    pad = ((pad_cells, pad_cells), (pad_cells, pad_cells), (0, 0))
    g = model.grid
    grid = VoxelGrid(
        origin=(g.origin[0] - pad_cells * g.cell[0], g.origin[1] - pad_cells * g.cell[1], g.origin[2]),
        cell=g.cell,
        shape=(g.shape[0] + 2 * pad_cells, g.shape[1] + 2 * pad_cells, g.shape[2]))
    return VoxelModel(
        grid=grid,
        occupancy=np.pad(model.occupancy, pad, mode="edge"),
        properties={k: np.pad(v, pad, mode="edge") for k, v in model.properties.items()})
