"""Scene assembly: grid, boundaries, emitters, fluid and body properties."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controller import ControllerConfig, ObservationSpec
from .fluid import FluidParams, SolverOptions
from .grid import BoundarySpec, EmitterLayout, GridSpec


@dataclass(frozen=True)
class Setup:
    grid: GridSpec
    fluid: FluidParams
    layout: EmitterLayout
    controller: ControllerConfig
    radius: float = 10.0
    mass: float = 250.0
    wind_kappa: float = 0.005
    hover: float = 2.0  # goal height in radii
    solver: SolverOptions = field(default_factory=SolverOptions)

    @classmethod
    def build(cls, dims=(16, 16), extent: float = 100.0, emitters_per_axis: int = 8,
              u_max: float = 2.0, patch_cells: int | None = None, fluid: FluidParams | None = None,
              controller: ControllerConfig | None = None, **kw) -> "Setup":
        grid = GridSpec(tuple(dims), extent / dims[0])
        layout = EmitterLayout.regular(grid, emitters_per_axis, u_max, patch_cells)
        return cls(grid, fluid or FluidParams(), layout, controller or ControllerConfig(), **kw)

    @property
    def bc(self) -> BoundarySpec:
        return BoundarySpec.default(self.grid)

    @property
    def ndim(self) -> int:
        return self.grid.ndim

    @property
    def table_width(self) -> float:
        return self.grid.domain_extent[0]

    @property
    def observation(self) -> ObservationSpec:
        return ObservationSpec(self.layout, self.radius, self.fluid.dt,
                               self.grid.domain_extent[-1], self.grid.domain_extent)

    def wind_acceleration(self, wind_frac: float, direction) -> np.ndarray:
        """Horizontal wind as a fluid body force, ``frac * u_max / dt * kappa``."""
        mag = wind_frac * self.layout.u_max / self.fluid.dt * self.wind_kappa
        w = np.zeros(self.ndim)
        w[: self.ndim - 1] = mag * np.asarray(direction, dtype=float)
        return w
