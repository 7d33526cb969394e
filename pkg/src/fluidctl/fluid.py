"""One differentiable incompressible Navier-Stokes step on the MAC grid.

Splitting order per step: inflow boundary, semi-Lagrangian advection,
explicit diffusion, body forces, inflow boundary again, pressure projection.
The projection's backward pass is an adjoint solve with the same
(self-adjoint) Poisson operator.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .grid import (
    BoundarySpec,
    EmitterLayout,
    GridSpec,
    ScalarField,
    StaggeredVectorField,
    _div_fwd,
    _div_vjp,
    _interp,
    apply_boundary,
    gradient_adjoint_arrays,
    gradient_arrays,
)

log = logging.getLogger(__name__)


class ProjectionError(RuntimeError):
    def __init__(self, residual: float, tol: float, iters: int):
        super().__init__(f"pressure solve stalled: residual {residual:.3e} > tol {tol:.3e} after {iters} iterations")
        self.residual = residual
        self.tol = tol
        self.iters = iters


@dataclass(frozen=True)
class FluidParams:
    rho: float = 1.0
    nu: float = 0.1
    g0: float = 0.02
    dt: float = 0.5
    wind: tuple = ()
    # Gravity on the fluid itself. Off by default: with open side/top faces a
    # uniform body force on the fluid is never balanced and accelerates the
    # whole domain; bodies always feel gravity.
    fluid_gravity: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.nu < 0:
            raise ValueError("nu must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def gravity(self, ndim: int) -> np.ndarray:
        g = np.zeros(ndim)
        g[-1] = -self.g0
        return g

    def wind_vector(self, ndim: int) -> np.ndarray:
        w = np.zeros(ndim)
        wind = np.asarray(self.wind, dtype=float).reshape(-1)
        w[: wind.size] = wind[: ndim - 1] if wind.size >= ndim else wind
        return w

    def fluid_acceleration(self, ndim: int) -> np.ndarray:
        a = self.wind_vector(ndim)
        if self.fluid_gravity:
            a = a + self.gravity(ndim)
        return a


@dataclass
class FluidState:
    velocity: object  # StaggeredVectorField or a tape handle to one
    pressure: object
    time_index: int = 0

    @classmethod
    def rest(cls, grid: GridSpec) -> "FluidState":
        return cls(StaggeredVectorField.zeros(grid), ScalarField.zeros(grid), 0)


# --------------------------------------------------------------------------
# advection


@lru_cache(maxsize=16)
def _face_velocity_interp(grid: GridSpec):
    """Interpolators of every component at every face lattice (fixed per grid)."""
    out = []
    for i in range(grid.ndim):
        pts = grid.face_centers(i).reshape(-1, grid.ndim)
        out.append((pts, [_interp(grid, pts, j) for j in range(grid.ndim)]))
    return out


def _advect_fwd(v: StaggeredVectorField, dt: float):
    grid = v.grid
    flats = [c.reshape(-1) for c in v.components]
    comps, its = [], []
    for i, (pts, interps) in enumerate(_face_velocity_interp(grid)):
        vel = np.stack([it.gather(flats[j]) for j, it in enumerate(interps)], axis=-1)
        it = _interp(grid, pts - dt * vel, i)
        its.append(it)
        comps.append(it.gather(flats[i]).reshape(grid.face_shape(i)))
    return StaggeredVectorField(grid, tuple(comps)), (v, its, dt)


def _advect_vjp(ctx, g: StaggeredVectorField):
    v, its, dt = ctx
    grid = v.grid
    h = grid.cell_size
    flats = [c.reshape(-1) for c in v.components]
    acc = [np.zeros(f.size) for f in flats]
    for i, (pts, interps) in enumerate(_face_velocity_interp(grid)):
        gi = g.components[i].reshape(-1)
        acc[i] += its[i].scatter(gi)
        g_vel = -dt * its[i].dpoints(flats[i], gi, h)
        for j, it in enumerate(interps):
            acc[j] += it.scatter(g_vel[:, j])
    comps = tuple(a.reshape(grid.face_shape(i)) for i, a in enumerate(acc))
    return StaggeredVectorField(grid, comps), None


ad.register("advect", _advect_fwd, _advect_vjp)


def advect(v, dt: float):
    """Semi-Lagrangian self-advection: each face samples ``v`` at ``x - dt v(x)``."""
    return ad.apply("advect", v, dt=float(dt))


# --------------------------------------------------------------------------
# diffusion and forces


def _neumann_laplacian(a: np.ndarray, h: float) -> np.ndarray:
    p = np.pad(a, 1, mode="edge")
    out = -2.0 * a.ndim * a
    for ax in range(a.ndim):
        lo = [slice(1, -1)] * a.ndim
        hi = [slice(1, -1)] * a.ndim
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        out = out + p[tuple(lo)] + p[tuple(hi)]
    return out / (h * h)


def _diffuse_fwd(v: StaggeredVectorField, nu: float, dt: float):
    h = v.grid.cell_size
    k = nu * dt
    return v.map(lambda c: c + k * _neumann_laplacian(c, h)), k


def _diffuse_vjp(k, g: StaggeredVectorField):
    h = g.grid.cell_size
    return (g.map(lambda c: c + k * _neumann_laplacian(c, h)),)


ad.register("diffuse", _diffuse_fwd, _diffuse_vjp)


def diffuse(v, nu: float, dt: float):
    """Explicit viscous step ``v + nu dt lap(v)`` with zero-gradient edges."""
    h = ad.value_of(v).grid.cell_size
    if nu * dt / h**2 > 0.25:
        log.warning("explicit diffusion unstable: nu*dt/h^2 = %.3f > 0.25", nu * dt / h**2)
    return ad.apply("diffuse", v, nu=float(nu), dt=float(dt))


def _forces_fwd(v: StaggeredVectorField, accel, dt: float):
    accel = np.asarray(accel, dtype=float)
    return StaggeredVectorField(v.grid, tuple(c + dt * a for c, a in zip(v.components, accel))), None


ad.register("add_forces", _forces_fwd, lambda c, g: (g, None))


def add_forces(v, accel, dt: float):
    """Add ``dt * accel`` to each velocity component (uniform body force)."""
    return ad.apply("add_forces", v, np.asarray(accel, dtype=float), dt=float(dt))


# --------------------------------------------------------------------------
# pressure solve


@lru_cache(maxsize=16)
def _poisson_diag(grid: GridSpec, bc: BoundarySpec) -> np.ndarray:
    h2 = grid.cell_size**2
    diag = np.full(grid.dims, 2.0 * grid.ndim)
    for i in range(grid.ndim):
        for side, index in ((0, 0), (1, -1)):
            if bc.is_closed(i, side):
                sl = [slice(None)] * grid.ndim
                sl[i] = index
                diag[tuple(sl)] -= 1.0
    return diag / h2


def poisson_apply(x: np.ndarray, grid: GridSpec, bc: BoundarySpec) -> np.ndarray:
    """``-div(grad x)`` with zero-pressure ghosts at open faces (SPD)."""
    h2 = grid.cell_size**2
    out = _poisson_diag(grid, bc) * x
    for i in range(grid.ndim):
        a = [slice(None)] * grid.ndim
        b = [slice(None)] * grid.ndim
        a[i] = slice(0, -1)
        b[i] = slice(1, None)
        a, b = tuple(a), tuple(b)
        out[a] -= x[b] / h2
        out[b] -= x[a] / h2
    return out


@dataclass(frozen=True)
class SolverOptions:
    rtol: float = 1e-11
    proj_tol: float = 1e-4
    max_iters: int | None = None


def pcg(b: np.ndarray, grid: GridSpec, bc: BoundarySpec, tol: float,
        max_iters: int, rtol: float = 1e-11):
    """Jacobi-preconditioned CG for ``A x = b``; returns ``(x, max|r|, iters)``.

    Iterates until ``max|r| <= rtol * max|b|`` (or ``max_iters``) and raises
    :class:`ProjectionError` if the hard tolerance ``tol`` is still unmet.
    """
    x = np.zeros_like(b)
    bnorm = float(np.max(np.abs(b))) if b.size else 0.0
    if bnorm == 0.0:
        return x, 0.0, 0
    target = max(rtol * bnorm, 1e-300)
    inv_diag = 1.0 / _poisson_diag(grid, bc)
    r = b.copy()
    z = inv_diag * r
    d = z.copy()
    rz = float(np.vdot(r, z))
    res = bnorm
    k = 0
    while k < max_iters:
        Ad = poisson_apply(d, grid, bc)
        alpha = rz / float(np.vdot(d, Ad))
        x += alpha * d
        r -= alpha * Ad
        k += 1
        res = float(np.max(np.abs(r)))
        if res <= target:
            break
        z = inv_diag * r
        rz_new = float(np.vdot(r, z))
        d = z + (rz_new / rz) * d
        rz = rz_new
    if not res <= tol:
        raise ProjectionError(res, tol, k)
    return x, res, k


def _cell_to_faces(phi: np.ndarray, grid: GridSpec):
    comps = []
    for i in range(grid.ndim):
        pad = [(0, 0)] * grid.ndim
        pad[i] = (1, 1)
        p = np.pad(phi, pad, mode="edge")
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[i] = slice(0, -1)
        hi[i] = slice(1, None)
        comps.append(0.5 * (p[tuple(lo)] + p[tuple(hi)]))
    return comps


def _cell_to_faces_adjoint(comps, grid: GridSpec) -> np.ndarray:
    out = np.zeros(grid.dims)
    for i, g in enumerate(comps):
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[i] = slice(0, -1)
        hi[i] = slice(1, None)
        gpad = np.zeros(grid.face_shape(i)[:i] + (grid.dims[i] + 2,) + grid.face_shape(i)[i + 1:])
        gpad[tuple(lo)] += 0.5 * g
        gpad[tuple(hi)] += 0.5 * g
        first = [slice(None)] * grid.ndim
        first[i] = slice(0, 1)
        last = [slice(None)] * grid.ndim
        last[i] = slice(-1, None)
        inner = [slice(None)] * grid.ndim
        inner[i] = slice(1, -1)
        acc = gpad[tuple(inner)].copy()
        s0 = [slice(None)] * grid.ndim
        s0[i] = slice(0, 1)
        s1 = [slice(None)] * grid.ndim
        s1[i] = slice(-1, None)
        acc[tuple(s0)] += gpad[tuple(first)]
        acc[tuple(s1)] += gpad[tuple(last)]
        out += acc
    return out


def _open_face_mask(grid: GridSpec, bc: BoundarySpec):
    masks = []
    for i in range(grid.ndim):
        m = np.ones(grid.face_shape(i))
        sl = [slice(None)] * grid.ndim
        if bc.is_closed(i, 0):
            sl[i] = 0
            m[tuple(sl)] = 0.0
        if bc.is_closed(i, 1):
            sl[i] = -1
            m[tuple(sl)] = 0.0
        masks.append(m)
    return masks


def _project_fwd(v: StaggeredVectorField, fraction, obs_vel, dt, rho, bc, opts: SolverOptions):
    grid = v.grid
    vin = [np.asarray(c) for c in v.components]
    if fraction is not None:
        open_m = _open_face_mask(grid, bc)
        F = [f * m for f, m in zip(_cell_to_faces(fraction.values, grid), open_m)]
        U = [np.asarray(c) for c in obs_vel.components] if obs_vel is not None else [np.zeros_like(c) for c in vin]
        vstar = [a + f * (u - a) for a, f, u in zip(vin, F, U)]
    else:
        F = U = open_m = None
        vstar = vin
    vs = StaggeredVectorField(grid, tuple(vstar))
    div = _div_fwd(vs)[0].values
    tol = opts.proj_tol * max(1.0, v.max_abs())
    max_iters = opts.max_iters or 10 * max(grid.dims)
    S, res, iters = pcg(-div, grid, bc, tol, max_iters, opts.rtol)
    gS = gradient_arrays(S, grid, bc)
    vout = StaggeredVectorField(grid, tuple(a - b for a, b in zip(vstar, gS)))
    p = ScalarField(grid, (rho / dt) * S)
    ctx = (grid, bc, opts, vin, F, U, open_m, dt, rho, max_iters)
    return (vout, p), ctx


def _project_vjp(ctx, g_v: StaggeredVectorField, g_p: ScalarField):
    grid, bc, opts, vin, F, U, open_m, dt, rho, max_iters = ctx
    gS = (rho / dt) * g_p.values - gradient_adjoint_arrays(g_v.components, grid, bc)
    y, _, _ = pcg(gS, grid, bc, np.inf, max_iters, opts.rtol)
    dty = _div_vjp(grid, ScalarField(grid, y))[0]
    g_star = [a - b for a, b in zip(g_v.components, dty.components)]
    if F is None:
        return StaggeredVectorField(grid, tuple(g_star)), None, None
    g_in = [gs * (1.0 - f) for gs, f in zip(g_star, F)]
    g_F = [gs * (u - a) * m for gs, u, a, m in zip(g_star, U, vin, open_m)]
    g_U = [gs * f for gs, f in zip(g_star, F)]
    g_frac = ScalarField(grid, _cell_to_faces_adjoint(g_F, grid))
    return (
        StaggeredVectorField(grid, tuple(g_in)),
        g_frac,
        StaggeredVectorField(grid, tuple(g_U)),
    )


ad.register("project", _project_fwd, _project_vjp, n_out=2)


def project(v, obstacle, params: FluidParams, bc: BoundarySpec, opts: SolverOptions | None = None):
    """Pressure projection with an immersed-obstacle velocity condition.

    Faces covered by the obstacle are blended toward the obstacle velocity by
    their volume fraction (closed boundary faces keep their prescribed
    value); the Poisson solve then removes the divergence. Returns the
    projected velocity and the pressure.
    """
    fraction = getattr(obstacle, "fraction", None)
    velocity = getattr(obstacle, "velocity", None)
    return ad.apply("project", v, fraction, velocity, dt=float(params.dt), rho=float(params.rho),
                    bc=bc, opts=opts or SolverOptions())


def step(state: FluidState, controls, obstacle, params: FluidParams, bc: BoundarySpec,
         layout: EmitterLayout, opts: SolverOptions | None = None) -> FluidState:
    """Advance the fluid by one time step under the given emitter controls."""
    v = state.velocity
    grid = ad.value_of(v).grid
    vmax = ad.value_of(v).max_abs()
    if vmax * params.dt > 2.0 * grid.cell_size:
        log.debug("CFL guard exceeded: max|u| dt = %.3f > 2 h", vmax * params.dt)
    v = apply_boundary(v, bc, controls, layout)
    v = advect(v, params.dt)
    v = diffuse(v, params.nu, params.dt)
    accel = params.fluid_acceleration(grid.ndim)
    if np.any(accel):
        v = add_forces(v, accel, params.dt)
    v = apply_boundary(v, bc, controls, layout)
    v, p = project(v, obstacle, params, bc, opts)
    return FluidState(v, p, state.time_index + 1)
