"""Rigid spheres in the fluid: soft-mask rasterization, pressure force and
torque, Newtonian motion, collisions, and the obstacle velocity condition."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .fluid import _cell_to_faces, _cell_to_faces_adjoint
from .grid import GridSpec, ScalarField, StaggeredVectorField

RESTITUTION = 0.3
BAND_FRACTION = 0.1
OVERLAP_EPS = 1e-6
MAX_RELAX_PASSES = 64


@dataclass
class RigidSphere:
    center: np.ndarray
    velocity: np.ndarray
    radius: float = 10.0
    mass: float = 250.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if not self.radius > 0 or not self.mass > 0:
            raise ValueError("radius and mass must be positive")


@dataclass
class BodySet:
    bodies: list
    goals: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.goals is not None:
            self.goals = np.atleast_2d(np.asarray(self.goals, dtype=float))
            if len(self.goals) != len(self.bodies):
                raise ValueError("one goal per body")

    def __len__(self):
        return len(self.bodies)

    @property
    def centers(self):
        return [b.center for b in self.bodies]

    @property
    def velocities(self):
        return [b.velocity for b in self.bodies]

    def with_state(self, centers, velocities) -> "BodySet":
        new = [replace(b, center=ad.value_of(x), velocity=ad.value_of(v))
               for b, x, v in zip(self.bodies, centers, velocities)]
        return BodySet(new, self.goals)


@dataclass
class ObstacleBC:
    fraction: object  # ScalarField (or handle)
    velocity: object  # StaggeredVectorField (or handle)


# --------------------------------------------------------------------------
# rasterization


def _mask_kernel(center, radius, points, h):
    diff = points - center
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    val = 0.5 - (dist - radius) / h
    phi = np.clip(val, 0.0, 1.0)
    ramp = (val > 0.0) & (val < 1.0)
    safe = np.where(dist > 0.0, dist, 1.0)
    dcenter = np.where((ramp & (dist > 0.0))[:, None], diff / safe[:, None], 0.0) / h
    dradius = ramp / h
    return phi, (dcenter, dradius)


def _soft_mask_fwd(center, radius, points, h):
    phi, ctx = _mask_kernel(np.asarray(center, dtype=float), float(radius), points, h)
    return phi, ctx


def _soft_mask_vjp(ctx, g):
    dcenter, dradius = ctx
    return g @ dcenter, float(np.sum(g * dradius)), None


ad.register("soft_mask", _soft_mask_fwd, _soft_mask_vjp)


def soft_mask(center, radius, points: np.ndarray, h: float):
    """Volume-fraction ramp ``clip(0.5 - (|p - c| - r)/h, 0, 1)`` at ``points``."""
    return ad.apply("soft_mask", center, radius, np.asarray(points, dtype=float), h=float(h))


def _rasterize_fwd(center, radius, grid: GridSpec):
    pts = grid.cell_centers().reshape(-1, grid.ndim)
    phi, ctx = _mask_kernel(np.asarray(center, dtype=float), float(radius), pts, grid.cell_size)
    return ScalarField(grid, phi.reshape(grid.dims)), ctx


def _rasterize_vjp(ctx, g: ScalarField):
    dcenter, dradius = ctx
    gv = g.values.reshape(-1)
    return gv @ dcenter, float(np.sum(gv * dradius))


ad.register("rasterize", _rasterize_fwd, _rasterize_vjp)


def rasterize(center, radius, grid: GridSpec):
    """Per-cell solid volume fraction of a sphere (soft, differentiable)."""
    return ad.apply("rasterize", center, radius, grid=grid)


# --------------------------------------------------------------------------
# pressure force and torque


def central_gradient(phi: np.ndarray, h: float) -> list:
    """Cell-centred central differences with zero outside the domain."""
    out = []
    for a in range(phi.ndim):
        pad = [(0, 0)] * phi.ndim
        pad[a] = (1, 1)
        p = np.pad(phi, pad)
        lo = [slice(None)] * phi.ndim
        hi = [slice(None)] * phi.ndim
        lo[a] = slice(0, -2)
        hi[a] = slice(2, None)
        out.append((p[tuple(hi)] - p[tuple(lo)]) / (2.0 * h))
    return out


def _force_fwd(p: ScalarField, phi: ScalarField):
    grid = p.grid
    gphi = central_gradient(phi.values, grid.cell_size)
    f = grid.cell_volume * np.array([np.sum(p.values * ga) for ga in gphi])
    return f, (p, gphi)


def _force_vjp(ctx, g):
    p, gphi = ctx
    grid = p.grid
    vol, h = grid.cell_volume, grid.cell_size
    g_p = vol * sum(ga * gg for ga, gg in zip(g, gphi))
    # central differences with zero padding are antisymmetric
    gp = central_gradient(p.values, h)
    g_phi = -vol * sum(ga * gq for ga, gq in zip(g, gp))
    return ScalarField(grid, g_p), ScalarField(grid, g_phi)


ad.register("fluid_force", _force_fwd, _force_vjp)


def fluid_force(p, phi):
    """Pressure force ``sum p grad(phi) dV`` (grad(phi) is the inward surface normal)."""
    return ad.apply("fluid_force", p, phi)


def _cross_parts(r, gphi):
    """Components of ``r x grad(phi)`` per cell (scalar in 2D)."""
    if len(gphi) == 2:
        return [r[0] * gphi[1] - r[1] * gphi[0]]
    return [
        r[1] * gphi[2] - r[2] * gphi[1],
        r[2] * gphi[0] - r[0] * gphi[2],
        r[0] * gphi[1] - r[1] * gphi[0],
    ]


def _torque_fwd(p: ScalarField, phi: ScalarField, center):
    grid = p.grid
    c = np.moveaxis(grid.cell_centers(), -1, 0)
    r = [c[a] - center[a] for a in range(grid.ndim)]
    gphi = central_gradient(phi.values, grid.cell_size)
    parts = _cross_parts(r, gphi)
    s = grid.cell_volume * np.array([np.sum(p.values * q) for q in parts])
    return (float(s[0]) if grid.ndim == 2 else s), (p, phi, r, gphi, parts)


def _torque_vjp(ctx, g):
    p, phi, r, gphi, parts = ctx
    grid = p.grid
    vol, h = grid.cell_volume, grid.cell_size
    g = np.atleast_1d(np.asarray(g, dtype=float))
    g_p = vol * sum(gk * q for gk, q in zip(g, parts))
    # s_k = vol sum_cells p * (r x G phi)_k, linear in G phi and in r
    pw = p.values
    d = grid.ndim
    g_phi = np.zeros(grid.dims)
    g_c = np.zeros(d)
    unit = np.eye(d)
    for a in range(d):
        e = [unit[a, b] * np.ones(grid.dims) for b in range(d)]
        # derivative wrt (G phi)_a
        dparts = _cross_parts(r, e)
        w = vol * pw * sum(gk * q for gk, q in zip(g, dparts))
        g_phi += -central_gradient(w, h)[a]
        # derivative wrt center_a: r_a = c_a - x_a
        ea = [unit[a, b] * np.ones(grid.dims) for b in range(d)]
        dr = _cross_parts(ea, gphi)
        g_c[a] = -vol * sum(gk * np.sum(pw * q) for gk, q in zip(g, dr))
    return ScalarField(grid, g_p), ScalarField(grid, g_phi), g_c


ad.register("fluid_torque", _torque_fwd, _torque_vjp)


def fluid_torque(p, phi, center):
    """Pressure torque about ``center``; logged only, never applied to motion."""
    return ad.apply("fluid_torque", p, phi, center)


# --------------------------------------------------------------------------
# motion and collisions


def integrate_bodies(centers, velocities, forces, masses, gravity, dt: float):
    """Symplectic Euler: ``v += dt (f/m + g)`` then ``x += dt v``."""
    new_x, new_v = [], []
    for x, v, f, m in zip(centers, velocities, forces, masses):
        v = v + dt * (f * (1.0 / m) + gravity)
        new_v.append(v)
        new_x.append(x + dt * v)
    return new_x, new_v


def _smoothstep(s):
    return s * s * (3.0 - 2.0 * s)


def _axis_vec(d, a):
    e = np.zeros(d)
    e[a] = 1.0
    return e


def resolve_collisions(centers, velocities, radii, masses, restitution: float = RESTITUTION,
                       band_fraction: float = BAND_FRACTION):
    """Sphere-floor and sphere-sphere contacts.

    Positions are projected out of contact exactly; the velocity response is
    blended in smoothly over a band of ``band_fraction * r`` around contact.
    Only approaching normal velocities are reflected (scaled by restitution).
    """
    xs, vs = list(centers), list(velocities)
    n = len(xs)
    d = np.size(ad.value_of(xs[0])) if n else 0
    e1 = 1.0 + restitution

    for a in range(n):
        for b in range(a + 1, n):
            rsum = radii[a] + radii[b]
            band = band_fraction * 0.5 * rsum
            delta = xs[b] - xs[a]
            dist_v = float(np.linalg.norm(ad.value_of(delta)))
            if dist_v >= rsum + band:
                continue
            if dist_v < 1e-9:
                normal = _axis_vec(d, 0)
                dist = dist_v
            else:
                dist = ad.norm(delta)
                normal = delta * (1.0 / dist)
            wa = masses[b] / (masses[a] + masses[b])
            wb = masses[a] / (masses[a] + masses[b])
            overlap = ad.maximum(rsum - dist, 0.0)
            xs[a] = xs[a] - normal * (overlap * wa if dist_v >= 1e-9 else overlap * 0.5)
            xs[b] = xs[b] + normal * (overlap * wb if dist_v >= 1e-9 else overlap * 0.5)
            s = ad.clip((rsum + band - dist) * (1.0 / band), 0.0, 1.0)
            w = _smoothstep(s)
            vrel = ad.sum((vs[b] - vs[a]) * normal)
            impulse = -e1 * w * ad.minimum(vrel, 0.0)
            vs[a] = vs[a] - normal * (impulse * wa)
            vs[b] = vs[b] + normal * (impulse * wb)

    up = _axis_vec(d, d - 1) if n else None
    for a in range(n):
        r = radii[a]
        band = band_fraction * r
        z = xs[a][d - 1]
        z_val = float(ad.value_of(z))
        if z_val >= r + band:
            continue
        if z_val < r:
            xs[a] = xs[a] + up * (r - z)
        s = ad.clip((r + band - z) * (1.0 / band), 0.0, 1.0)
        w = _smoothstep(s)
        vz = vs[a][d - 1]
        vs[a] = vs[a] - up * (e1 * w * ad.minimum(vz, 0.0))

    # stacked contacts: a floor push can re-open a pair overlap, so relax positions until clean
    for _ in range(MAX_RELAX_PASSES):
        moved = False
        for a in range(n):
            for b in range(a + 1, n):
                rsum = radii[a] + radii[b]
                delta = xs[b] - xs[a]
                if float(np.linalg.norm(ad.value_of(delta))) >= rsum - 0.5 * OVERLAP_EPS:
                    continue
                dist = ad.norm(delta)
                normal = delta * (1.0 / dist)
                wa = masses[b] / (masses[a] + masses[b])
                xs[a] = xs[a] - normal * ((rsum - dist) * wa)
                xs[b] = xs[b] + normal * ((rsum - dist) * (1.0 - wa))
                moved = True
        for a in range(n):
            z = xs[a][d - 1]
            if float(ad.value_of(z)) < radii[a]:
                xs[a] = xs[a] + up * (radii[a] - z)
                moved = True
        if not moved:
            break
    return xs, vs


# --------------------------------------------------------------------------
# obstacle boundary condition


def _obstacle_fwd(*args, n_bodies: int, grid: GridSpec):
    masks = [np.asarray(m.values) for m in args[:n_bodies]]
    vels = [np.asarray(v, dtype=float) for v in args[n_bodies:]]
    if n_bodies == 0:
        return (ScalarField.zeros(grid), StaggeredVectorField.zeros(grid)), None
    stack = np.stack(masks)
    winner = np.argmax(stack, axis=0)
    fraction = np.max(stack, axis=0)
    faces = [_cell_to_faces(m, grid) for m in masks]
    comps, sums = [], []
    for i in range(grid.ndim):
        S = sum(f[i] for f in faces)
        num = sum(f[i] * v[i] for f, v in zip(faces, vels))
        safe = np.where(S > 1e-12, S, 1.0)
        comps.append(np.where(S > 1e-12, num / safe, 0.0))
        sums.append(safe * (S > 1e-12))
    out = (ScalarField(grid, fraction), StaggeredVectorField(grid, tuple(comps)))
    return out, (grid, winner, faces, vels, comps, sums, n_bodies)


def _obstacle_vjp(ctx, g_frac: ScalarField, g_vel: StaggeredVectorField):
    if ctx is None:
        return ()
    grid, winner, faces, vels, comps, sums, nb = ctx
    g_masks, g_vels = [], []
    for b in range(nb):
        gm = np.where(winner == b, g_frac.values, 0.0)
        gface, gv = [], np.zeros(grid.ndim)
        for i in range(grid.ndim):
            S = sums[i]
            inv = np.where(S > 0, 1.0 / np.where(S > 0, S, 1.0), 0.0)
            gi = g_vel.components[i]
            gv[i] = np.sum(gi * faces[b][i] * inv)
            gface.append(gi * (vels[b][i] - comps[i]) * inv)
        gm = gm + _cell_to_faces_adjoint(gface, grid)
        g_masks.append(ScalarField(grid, gm))
        g_vels.append(gv)
    return tuple(g_masks) + tuple(g_vels)


ad.register("obstacle_bc", _obstacle_fwd, _obstacle_vjp, n_out=2)


def obstacle_bc(masks, velocities, grid: GridSpec) -> ObstacleBC:
    """Union of body masks plus the fraction-weighted body velocity on faces."""
    frac, vel = ad.apply("obstacle_bc", *masks, *velocities, n_bodies=len(masks), grid=grid)
    return ObstacleBC(frac, vel)


def bodyset_obstacle(bodies: BodySet, grid: GridSpec) -> ObstacleBC:
    masks = [rasterize(b.center, b.radius, grid) for b in bodies.bodies]
    return obstacle_bc(masks, [b.velocity for b in bodies.bodies], grid)
