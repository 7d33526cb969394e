"""Strict JSON run configuration and its fingerprint."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .controller import ControllerConfig
from .evaluation import DEFAULT_BINS, Histogram
from .fluid import FluidParams
from .trainer import EpisodeConfig, TrainConfig
from .world import Setup


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class GridSection:
    dims: list = field(default_factory=lambda: [16, 16])
    cell_size: float = 6.25
    emitters_per_axis: int = 8
    patch_cells: int | None = None


@dataclass
class FluidSection:
    rho: float = 1.0
    nu: float = 0.1
    g0: float = 0.02
    dt: float = 0.5
    u_max: float = 2.0
    kappa: float = 0.005
    fluid_gravity: bool = False


@dataclass
class BodiesSection:
    count: int = 1
    radius: float = 10.0
    mass: float = 250.0
    hover: float = 2.0


@dataclass
class ControllerSection:
    layers: int = 4
    kernel: int = 3
    width: int = 64
    hidden: int = 32
    dropout: float = 0.1
    gamma: float = 0.1


@dataclass
class TrainSection:
    task: str = "hold"
    iterations: int = 500
    learning_rate: float = 1e-3
    beta: float = 0.001
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    n_min: int = 40
    n_max: int = 90
    window: int = 40
    wind_max: float = 0.0
    checkpoint_every: int = 100
    max_skip_fraction: float = 0.05
    grad_gate: bool = True


@dataclass
class EvalSection:
    task: str = "hold"
    episodes: int = 20
    n_steps: int = 200
    wind_max: float = 0.0
    bins: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_BINS))


@dataclass
class Config:
    grid: GridSection = field(default_factory=GridSection)
    fluid: FluidSection = field(default_factory=FluidSection)
    bodies: BodiesSection = field(default_factory=BodiesSection)
    controller: ControllerSection = field(default_factory=ControllerSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    # -- derived objects -------------------------------------------------

    def setup(self) -> Setup:
        g, f, b, c = self.grid, self.fluid, self.bodies, self.controller
        fluid = FluidParams(rho=f.rho, nu=f.nu, g0=f.g0, dt=f.dt, fluid_gravity=f.fluid_gravity)
        cc = ControllerConfig(c.layers, c.kernel, c.width, c.hidden, c.dropout, c.gamma, b.count)
        return Setup.build(dims=tuple(g.dims), extent=g.cell_size * g.dims[0],
                           emitters_per_axis=g.emitters_per_axis, u_max=f.u_max,
                           patch_cells=g.patch_cells, fluid=fluid, controller=cc,
                           radius=b.radius, mass=b.mass, wind_kappa=f.kappa, hover=b.hover)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.iterations, t.learning_rate, t.beta, t.adam_b1, t.adam_b2, t.adam_eps,
                           "float32", t.checkpoint_every, t.max_skip_fraction, t.grad_gate)

    def episode_config(self) -> EpisodeConfig:
        t = self.train
        return EpisodeConfig(t.task, t.n_min, t.n_max, t.window, t.wind_max, 0.8, self.seed)

    def validate(self) -> "Config":
        checks = [
            ("grid", self.setup),
            ("train", self.train_config),
            ("train", self.episode_config),
        ]
        for key, fn in checks:
            try:
                fn()
            except (ValueError, TypeError) as exc:
                raise ConfigError(key, str(exc)) from None
        if self.train.task == "two-object" and self.bodies.count != 2:
            raise ConfigError("bodies.count", "two-object training needs count = 2")
        if self.bodies.count not in (1, 2):
            raise ConfigError("bodies.count", "must be 1 or 2")
        if self.eval.episodes < 0 or self.eval.n_steps < 1:
            raise ConfigError("eval", "episodes >= 0 and n_steps >= 1 required")
        for name, edges in self.eval.bins.items():
            if name not in DEFAULT_BINS:
                raise ConfigError(f"eval.bins.{name}", "unknown key")
            try:
                Histogram.build([], edges)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"eval.bins.{name}", str(exc)) from None
        return self

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        """Hash of everything that shapes a trained model.

        Run length, checkpoint cadence and evaluation settings are left out so
        a checkpoint can be resumed for more iterations or evaluated freely.
        """
        d = self.to_dict()
        d["train"].pop("iterations")
        d["train"].pop("checkpoint_every")
        d.pop("eval")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        return _build(cls, data, "").validate()

    @classmethod
    def load(cls, path) -> "Config":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from None
        return cls.from_dict(data)

    def with_overrides(self, items) -> "Config":
        data = self.to_dict()
        for item in items:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(item, "override must look like key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(key, "unknown key")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(key, "unknown key")
            node[parts[-1]] = value
        return Config.from_dict(data)


def _check_type(key, value, annotation):
    ann = str(annotation)
    if "bool" in ann:
        ok = isinstance(value, bool)
    elif ann.startswith("int"):
        ok = isinstance(value, int) and not isinstance(value, bool) or (value is None and "None" in ann)
    elif ann == "float":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif ann == "str":
        ok = isinstance(value, str)
    elif ann == "list":
        ok = isinstance(value, list)
    elif ann == "dict":
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(key, f"expected {ann}, got {type(value).__name__}")
    return float(value) if ann == "float" else value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(prefix + key, "unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        key = prefix + name
        sub = f.default_factory
        if isinstance(sub, type) and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, data[name], key + ".")
        else:
            kwargs[name] = _check_type(key, data[name], f.type)
    return cls(**kwargs)
