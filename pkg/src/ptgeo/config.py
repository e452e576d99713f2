"""JSON run configuration: schema, validation and problem assembly.

Units are fixed per field and spelled out in the field names (``_m``,
``_nT``, ``_deg``). Unknown keys are rejected. Every schema problem is
reported at once.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, PtgeoError
from .priors import BlockPrior, block_from_config
from .sampler import SamplerSettings
from .world import GridSpec, LayerSpec, MeanDepth, WorldSpec

FORMAT_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ControlGrid(_Strict):
    nx: int = Field(ge=1)
    ny: int = Field(ge=1)
    x_m: tuple[float, float]
    y_m: tuple[float, float]
    kernel_length_m: Optional[tuple[float, float]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.x_m[1] < self.x_m[0] or self.y_m[1] < self.y_m[0]:
            raise ValueError("control grid bounds must be ordered (min, max)")
        if self.kernel_length_m is not None and min(self.kernel_length_m) <= 0:
            raise ValueError("kernel lengths must be positive")
        return self


class LayerConfig(_Strict):
    name: str
    mean_depth_m: Optional[float] = None
    mean_depth_csv: Optional[str] = None
    control_grid: Optional[ControlGrid] = None
    properties: list[Literal["density", "log10_susceptibility", "log10_resistivity"]] = ["density"]

    @model_validator(mode="after")
    def _one_depth(self):
        if (self.mean_depth_m is None) == (self.mean_depth_csv is None):
            raise ValueError("give exactly one of mean_depth_m or mean_depth_csv")
        return self


class Bounds(_Strict):
    x_m: tuple[float, float]
    y_m: tuple[float, float]
    z_m: tuple[float, float]


class WorldConfig(_Strict):
    bounds: Bounds
    voxel_res: tuple[int, int, int]
    margin_m: float = Field(default=0.0, ge=0)
    layers: list[LayerConfig] = Field(min_length=1)


class CovSpec(_Strict):
    template: Optional[Literal["independent", "uniform-offdiag"]] = None
    sigma: Optional[Union[float, list[float]]] = None
    offdiag: float = 0.5
    matrix: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _form(self):
        if self.matrix is None and (self.template is None or self.sigma is None):
            raise ValueError("give 'matrix' or both 'template' and 'sigma'")
        return self


class PropertyPrior(_Strict):
    mean: list[float]
    cov: CovSpec


class LayerPrior(_Strict):
    control: Optional[CovSpec] = None
    properties: PropertyPrior


class NoiseConfig(_Strict):
    alpha: float = Field(default=0.5, gt=0)
    beta: float = Field(default=0.05, gt=0)


class FieldConfig(_Strict):
    magnitude_nT: float = Field(gt=0)
    inclination_deg: float = Field(ge=-90, le=90)
    declination_deg: float


class SensorConfig(_Strict):
    kind: Literal["gravity", "magnetic", "mt"]
    name: Optional[str] = None
    data: str
    noise: NoiseConfig = NoiseConfig()
    field: Optional[FieldConfig] = None
    pad_cells: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _field(self):
        if self.kind == "magnetic" and self.field is None:
            raise ValueError("magnetic sensors need an inducing 'field'")
        return self


class SamplerConfig(_Strict):
    iterations: int = Field(default=10_000, ge=0)
    n_stacks: int = Field(default=4, ge=1)
    n_temps: int = Field(default=8, ge=1)
    beta_min: float = Field(default=0.01, gt=0, lt=1)
    betas: Optional[list[float]] = None
    swap_interval: int = Field(default=10, ge=0)
    thinning: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)
    proposal: Literal["igrw", "agrw", "pcn"] = "pcn"
    eta0: float = Field(default=0.1, gt=0)
    a: float = Field(default=10.0, gt=0)
    gain: float = Field(default=1.0, ge=0)
    ladder_gain: float = Field(default=1.0, ge=0)
    adapt_ladder: bool = True
    adapt_until: Optional[int] = Field(default=None, ge=0)
    checkpoint_interval: int = Field(default=0, ge=0)


class OutputConfig(_Strict):
    directory: str = "run"
    slice_depths_m: list[float] = []
    target_layer: Optional[str] = None
    entropy_depth_m: Optional[float] = None
    burn_in_fraction: float = Field(default=0.1, ge=0, lt=1)


class RunConfig(_Strict):
    format_version: Literal[1] = 1
    world: WorldConfig
    priors: dict[str, LayerPrior]
    sensors: list[SensorConfig] = []
    sampler: SamplerConfig = SamplerConfig()
    outputs: OutputConfig = OutputConfig()
    base_dir: Optional[str] = None

    def settings(self) -> SamplerSettings:
        d = self.sampler.model_dump()
        if d["betas"] is not None:
            d["betas"] = tuple(d["betas"])
        return SamplerSettings(**d)

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir or ".") / p

    def hash(self):
        """Digest of the configuration and its data files, ignoring run length."""
        d = self.model_dump(mode="json")
        d["sampler"].pop("iterations")
        d["sampler"].pop("checkpoint_interval")
        d.pop("base_dir")
        d.pop("outputs")
        # data files count by content, not by where they live
        for sensor in d["sensors"]:
            sensor.pop("data")
        for lay in d["world"]["layers"]:
            lay["mean_depth_csv"] = lay["mean_depth_csv"] is not None
        h = hashlib.sha256(json.dumps(d, sort_keys=True).encode())
        files = [s.data for s in self.sensors]
        files += [lay.mean_depth_csv for lay in self.world.layers if lay.mean_depth_csv]
        for f in files:
            try:
                h.update(self.resolve(f).read_bytes())
            except OSError:
                h.update(f"missing:{f}".encode())
        return h.hexdigest()


def _format_errors(exc: ValidationError):
    out = []
    for e in exc.errors():
        loc = ".".join(str(x) for x in e["loc"])
        out.append(f"{loc}: {e['msg']}")
    return out


def parse_config(data: dict, base_dir=None) -> RunConfig:
    """Validate a config mapping; raises ConfigError listing every problem."""
    if base_dir is not None and "base_dir" not in data:
        data = dict(data, base_dir=str(base_dir))
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        errs = _format_errors(exc)
        raise ConfigError(f"{len(errs)} configuration error(s): " + "; ".join(errs), errs) from None
    errs = []
    try:
        cfg.settings()
    except ConfigError as exc:
        errs += [f"sampler: {m}" for m in exc.errors]
    try:
        spec = build_world(cfg)
        build_prior(cfg, spec)
    except ConfigError as exc:
        errs += exc.errors
    except PtgeoError as exc:
        errs.append(str(exc))
    if errs:
        raise ConfigError(f"{len(errs)} configuration error(s): " + "; ".join(errs), errs)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return parse_config(data, base_dir=path.parent.resolve())


def _mean_depth(cfg: RunConfig, layer: LayerConfig):
    if layer.mean_depth_m is not None:
        return MeanDepth(value=layer.mean_depth_m)
    from .io import load_mean_depth_csv
    return load_mean_depth_csv(cfg.resolve(layer.mean_depth_csv))


def build_world(cfg: RunConfig) -> WorldSpec:
    layers = []
    for lay in cfg.world.layers:
        grid = None
        dx = dy = None
        if lay.control_grid is not None:
            g = lay.control_grid
            grid = GridSpec(g.nx, g.ny, g.x_m[0], g.y_m[0], g.x_m[1], g.y_m[1])
            if g.kernel_length_m is not None:
                dx, dy = g.kernel_length_m
        layers.append(LayerSpec(lay.name, grid, _mean_depth(cfg, lay), tuple(lay.properties),
                                delta_x=dx, delta_y=dy))
    b = cfg.world.bounds
    return WorldSpec(layers, (b.x_m, b.y_m, b.z_m), cfg.world.voxel_res, cfg.world.margin_m)


def build_prior(cfg: RunConfig, spec: WorldSpec) -> BlockPrior:
    errs = []
    alpha_blocks, rho_blocks = [], []
    unknown = set(cfg.priors) - set(spec.layer_names)
    errs += [f"priors.{name}: no such layer" for name in sorted(unknown)]
    for layer in spec.layers:
        lp = cfg.priors.get(layer.name)
        if lp is None:
            errs.append(f"priors.{layer.name}: missing prior for layer")
            continue
        try:
            if layer.n_control:
                if lp.control is None:
                    raise ConfigError(f"priors.{layer.name}.control: layer has control points")
                alpha_blocks.append(block_from_config(lp.control.model_dump(), layer.n_control,
                                                      f"priors.{layer.name}.control"))
        except ConfigError as exc:
            errs += exc.errors
        try:
            rho_blocks.append(block_from_config(lp.properties.cov.model_dump(),
                                                len(layer.properties),
                                                f"priors.{layer.name}.properties",
                                                mean=lp.properties.mean))
        except ConfigError as exc:
            errs += exc.errors
    if errs:
        raise ConfigError("; ".join(errs), errs)
    return BlockPrior(alpha_blocks + rho_blocks)


def build_posterior(cfg: RunConfig):
    """World, prior and sensors assembled into a :class:`~ptgeo.likelihood.Posterior`."""
    from .io import build_sensor
    spec = build_world(cfg)
    prior = build_prior(cfg, spec)
    from .likelihood import Posterior
    sensors = [build_sensor(cfg, spec, s, i) for i, s in enumerate(cfg.sensors)]
    return Posterior(spec, prior, sensors)


def baseline_sampler() -> SamplerConfig:
    """The multi-stack baseline: 4 stacks of 8 temperatures."""
    return SamplerConfig(n_stacks=4, n_temps=8)

