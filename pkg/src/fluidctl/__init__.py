"""Differentiable fluid simulation with a learned emitter controller."""
from . import autodiff, bodies, controller, fluid, grid, trainer, world
from .world import Setup

__version__ = "0.1.0"
