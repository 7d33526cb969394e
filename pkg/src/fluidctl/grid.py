"""Grid geometry, cell/face-centred fields and the discrete operators on them.

Velocity lives on a staggered (MAC) layout: component ``i`` is stored on the
faces normal to axis ``i`` and has ``dims[i] + 1`` entries along that axis.
The last axis is vertical; the bottom face hosts the emitters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autodiff as ad

OPEN = "open"
WALL = "wall"
INFLOW = "inflow"
_KINDS = (OPEN, WALL, INFLOW)


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, ...]
    cell_size: float
    origin: tuple[float, ...] = ()

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"grid must have 2 or 3 axes, got {len(dims)}")
        if min(dims) < 4:
            raise ValueError(f"every axis needs at least 4 cells, got {dims}")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        origin = tuple(float(o) for o in self.origin) or (0.0,) * len(dims)
        if len(origin) != len(dims):
            raise ValueError("origin must have one entry per axis")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "origin", origin)

    @classmethod
    def cube(cls, n: int, ndim: int = 3, extent: float = 100.0) -> "GridSpec":
        return cls((n,) * ndim, extent / n)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def vertical(self) -> int:
        return self.ndim - 1

    @property
    def domain_extent(self) -> tuple[float, ...]:
        return tuple(n * self.cell_size for n in self.dims)

    @property
    def n_cells(self) -> int:
        return math.prod(self.dims)

    @property
    def cell_volume(self) -> float:
        return self.cell_size**self.ndim

    def face_shape(self, axis: int) -> tuple[int, ...]:
        s = list(self.dims)
        s[axis] += 1
        return tuple(s)

    def cell_centers(self) -> np.ndarray:
        return _lattice(self, None)

    def face_centers(self, axis: int) -> np.ndarray:
        return _lattice(self, axis)


@lru_cache(maxsize=64)
def _lattice_cached(grid: GridSpec, axis) -> np.ndarray:
    h = grid.cell_size
    axes = []
    for a, n in enumerate(grid.dims):
        if a == axis:
            axes.append(grid.origin[a] + h * np.arange(n + 1))
        else:
            axes.append(grid.origin[a] + h * (np.arange(n) + 0.5))
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pts.flags.writeable = False
    return pts


def _lattice(grid, axis):
    return _lattice_cached(grid, axis)


# --------------------------------------------------------------------------
# fields


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != self.grid.dims:
            raise ValueError(f"scalar field shape {v.shape} != grid dims {self.grid.dims}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "ScalarField":
        return cls(grid, np.zeros(grid.dims))

    @classmethod
    def from_function(cls, grid: GridSpec, f) -> "ScalarField":
        c = grid.cell_centers()
        return cls(grid, f(*np.moveaxis(c, -1, 0)))

    def zeros_like(self):
        return ScalarField(self.grid, np.zeros(self.grid.dims))

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def vdot(self, other: "ScalarField") -> float:
        return float(np.sum(self.values * other.values))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def _other(self, o):
        if isinstance(o, ScalarField):
            return o.values
        if isinstance(o, StaggeredVectorField):
            return NotImplemented
        return o

    def __add__(self, o):
        o = self._other(o)
        return NotImplemented if o is NotImplemented else ScalarField(self.grid, self.values + o)

    __radd__ = __add__

    def __sub__(self, o):
        o = self._other(o)
        return NotImplemented if o is NotImplemented else ScalarField(self.grid, self.values - o)

    def __rsub__(self, o):
        return ScalarField(self.grid, o - self.values)

    def __mul__(self, o):
        o = self._other(o)
        return NotImplemented if o is NotImplemented else ScalarField(self.grid, self.values * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return ScalarField(self.grid, self.values / self._other(o))

    def __neg__(self):
        return ScalarField(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class StaggeredVectorField:
    grid: GridSpec
    components: tuple

    def __post_init__(self):
        comps = tuple(_frozen(c) for c in self.components)
        if len(comps) != self.grid.ndim:
            raise ValueError("one component per axis required")
        for i, c in enumerate(comps):
            if c.shape != self.grid.face_shape(i):
                raise ValueError(f"component {i} shape {c.shape} != {self.grid.face_shape(i)}")
        object.__setattr__(self, "components", comps)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "StaggeredVectorField":
        return cls(grid, tuple(np.zeros(grid.face_shape(i)) for i in range(grid.ndim)))

    @classmethod
    def uniform(cls, grid: GridSpec, vec) -> "StaggeredVectorField":
        return cls(grid, tuple(np.full(grid.face_shape(i), float(vec[i])) for i in range(grid.ndim)))

    @classmethod
    def from_function(cls, grid: GridSpec, f) -> "StaggeredVectorField":
        """``f(axis, *coords)`` gives component ``axis`` at face positions."""
        comps = []
        for i in range(grid.ndim):
            pts = grid.face_centers(i)
            comps.append(np.broadcast_to(f(i, *np.moveaxis(pts, -1, 0)), grid.face_shape(i)))
        return cls(grid, tuple(comps))

    def __getitem__(self, i) -> np.ndarray:
        return self.components[i]

    def zeros_like(self):
        return StaggeredVectorField.zeros(self.grid)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(c)) for c in self.components)

    def vdot(self, other: "StaggeredVectorField") -> float:
        return float(sum(np.sum(a * b) for a, b in zip(self.components, other.components)))

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(c)) for c in self.components))

    def flat(self) -> np.ndarray:
        return np.concatenate([c.reshape(-1) for c in self.components])

    @classmethod
    def from_flat(cls, grid: GridSpec, flat) -> "StaggeredVectorField":
        comps, k = [], 0
        for i in range(grid.ndim):
            shape = grid.face_shape(i)
            n = math.prod(shape)
            comps.append(np.asarray(flat[k:k + n]).reshape(shape))
            k += n
        return cls(grid, tuple(comps))

    def map(self, f) -> "StaggeredVectorField":
        return StaggeredVectorField(self.grid, tuple(f(c) for c in self.components))

    def _zip(self, o, f):
        if isinstance(o, StaggeredVectorField):
            return StaggeredVectorField(self.grid, tuple(f(a, b) for a, b in zip(self.components, o.components)))
        if isinstance(o, ScalarField):
            return NotImplemented
        return self.map(lambda a: f(a, o))

    def __add__(self, o):
        return self._zip(o, np.add)

    __radd__ = __add__

    def __sub__(self, o):
        return self._zip(o, np.subtract)

    def __rsub__(self, o):
        return self.map(lambda a: o - a)

    def __mul__(self, o):
        return self._zip(o, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return self._zip(o, np.divide)

    def __neg__(self):
        return self.map(np.negative)


# --------------------------------------------------------------------------
# boundaries and emitters


@dataclass(frozen=True)
class BoundarySpec:
    """Per-face boundary kind, ``kinds[axis] = (low, high)``."""

    kinds: tuple

    def __post_init__(self):
        kinds = tuple(tuple(k) for k in self.kinds)
        for pair in kinds:
            if len(pair) != 2 or any(k not in _KINDS for k in pair):
                raise ValueError(f"bad boundary kinds {pair}")
        object.__setattr__(self, "kinds", kinds)

    @classmethod
    def default(cls, grid: GridSpec) -> "BoundarySpec":
        kinds = [(OPEN, OPEN) for _ in range(grid.ndim)]
        kinds[grid.vertical] = (INFLOW, OPEN)
        return cls(tuple(kinds))

    def is_closed(self, axis: int, side: int) -> bool:
        return self.kinds[axis][side] in (WALL, INFLOW)


@dataclass(frozen=True, eq=False)
class EmitterLayout:
    """Emitter grid on the bottom face.

    ``weights[e]`` holds the fraction of each bottom face covered by emitter
    ``e``'s square patch; ``centers[e]`` is its horizontal position.
    """

    grid: GridSpec
    shape: tuple[int, ...]
    u_max: float
    weights: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)

    @classmethod
    def regular(cls, grid: GridSpec, per_axis: int = 8, u_max: float = 2.0,
                patch_cells: int | None = None) -> "EmitterLayout":
        h = grid.cell_size
        horiz = list(range(grid.ndim - 1))
        shape = (per_axis,) * len(horiz)
        if patch_cells is None:
            patch_cells = math.ceil(grid.dims[0] / 16)
        half = 0.5 * patch_cells * h
        axis_centers, axis_weights = [], []
        for a in horiz:
            ext = grid.dims[a] * h
            c = grid.origin[a] + (np.arange(per_axis) + 0.5) * ext / per_axis
            lo = grid.origin[a] + h * np.arange(grid.dims[a])
            overlap = np.minimum(c[:, None] + half, lo[None, :] + h) - np.maximum(c[:, None] - half, lo[None, :])
            axis_centers.append(c)
            axis_weights.append(np.clip(overlap / h, 0.0, 1.0))
        if len(horiz) == 1:
            w = axis_weights[0]
            centers = axis_centers[0][:, None]
        else:
            wx, wy = axis_weights
            w = np.einsum("ia,jb->ijab", wx, wy).reshape(per_axis * per_axis, -1)
            cx, cy = np.meshgrid(*axis_centers, indexing="ij")
            centers = np.stack([cx.ravel(), cy.ravel()], axis=-1)
        return cls(grid, shape, float(u_max), _frozen(w), _frozen(centers))

    @property
    def count(self) -> int:
        return self.weights.shape[0]

    @property
    def spacing(self) -> float:
        return self.grid.domain_extent[0] / self.shape[0]

    @property
    def patch_area(self) -> float:
        return float(self.weights[0].sum()) * self.grid.cell_size ** (self.grid.ndim - 1)


# --------------------------------------------------------------------------
# divergence / gradient


def _div_fwd(v: StaggeredVectorField):
    g = v.grid
    out = np.zeros(g.dims)
    for i, c in enumerate(v.components):
        out += np.diff(c, axis=i)
    return ScalarField(g, out / g.cell_size), g


def _div_vjp(grid, gs: ScalarField):
    h = grid.cell_size
    comps = []
    for i in range(grid.ndim):
        pad = [(0, 0)] * grid.ndim
        pad[i] = (1, 1)
        comps.append(-np.diff(np.pad(gs.values, pad), axis=i) / h)
    return (StaggeredVectorField(grid, tuple(comps)),)


ad.register("divergence", _div_fwd, _div_vjp)


def divergence(v):
    """Cell-centred divergence: net face flux per cell over cell_size."""
    return ad.apply("divergence", v)


def _zero_closed_faces(comps, bc: BoundarySpec):
    out = []
    for i, c in enumerate(comps):
        c = np.array(c, dtype=float)
        idx = [slice(None)] * c.ndim
        if bc.is_closed(i, 0):
            idx[i] = 0
            c[tuple(idx)] = 0.0
        if bc.is_closed(i, 1):
            idx[i] = -1
            c[tuple(idx)] = 0.0
        out.append(c)
    return out


def gradient_arrays(p: np.ndarray, grid: GridSpec, bc: BoundarySpec) -> list:
    h = grid.cell_size
    comps = []
    for i in range(grid.ndim):
        pad = [(0, 0)] * grid.ndim
        pad[i] = (1, 1)
        comps.append(np.diff(np.pad(p, pad), axis=i) / h)
    return _zero_closed_faces(comps, bc)


def gradient_adjoint_arrays(comps, grid: GridSpec, bc: BoundarySpec) -> np.ndarray:
    h = grid.cell_size
    comps = _zero_closed_faces(comps, bc)
    out = np.zeros(grid.dims)
    for i, c in enumerate(comps):
        out -= np.diff(c, axis=i)
    return out / h


def _grad_fwd(p: ScalarField, bc: BoundarySpec):
    comps = gradient_arrays(p.values, p.grid, bc)
    return StaggeredVectorField(p.grid, tuple(comps)), (p.grid, bc)


def _grad_vjp(ctx, g: StaggeredVectorField):
    grid, bc = ctx
    return (ScalarField(grid, gradient_adjoint_arrays(g.components, grid, bc)), None)


ad.register("gradient", _grad_fwd, _grad_vjp)


def gradient(p, bc: BoundarySpec | None = None):
    """Face-centred gradient. Open faces see a zero pressure ghost; closed faces carry 0."""
    grid = ad.value_of(p).grid
    return ad.apply("gradient", p, bc=bc or BoundarySpec.default(grid))


def laplacian_arrays(p: np.ndarray, grid: GridSpec, bc: BoundarySpec) -> np.ndarray:
    comps = gradient_arrays(p, grid, bc)
    out = np.zeros(grid.dims)
    for i, c in enumerate(comps):
        out += np.diff(c, axis=i)
    return out / grid.cell_size


# --------------------------------------------------------------------------
# multilinear sampling


def continuous_index(grid: GridSpec, points: np.ndarray, axis=None):
    """Lattice coordinates of world points, clamped; also a per-axis inside mask."""
    h = grid.cell_size
    s = (np.asarray(points, dtype=float) - np.asarray(grid.origin)) / h
    upper = np.array(grid.dims, dtype=float) - 1.0
    shift = np.full(grid.ndim, 0.5)
    if axis is not None:
        shift[axis] = 0.0
        upper[axis] += 1.0
    s = s - shift
    inside = (s >= 0.0) & (s <= upper)
    return np.clip(s, 0.0, upper), inside


def interp_weights(s: np.ndarray, shape: Sequence[int]):
    """Corner flat indices, weights and index-derivatives for multilinear interpolation.

    Returns ``idx (2^d, P)``, ``w (2^d, P)``, ``dw (2^d, P, d)`` and the
    fractional offsets ``f (P, d)``. Corner bits run most significant first
    along axis 0.
    """
    d = len(shape)
    i0 = np.minimum(np.floor(s).astype(np.int64), np.array(shape) - 2)
    f = s - i0
    strides = np.array([math.prod(shape[a + 1:]) for a in range(d)], dtype=np.int64)
    n = 1 << d
    idx = np.empty((n, s.shape[0]), dtype=np.int64)
    w = np.empty((n, s.shape[0]))
    dw = np.empty((n, s.shape[0], d))
    for corner in range(n):
        bits = [(corner >> (d - 1 - a)) & 1 for a in range(d)]
        fac = [f[:, a] if b else 1.0 - f[:, a] for a, b in enumerate(bits)]
        idx[corner] = (i0 + np.array(bits)) @ strides
        w[corner] = np.prod(fac, axis=0)
        for a in range(d):
            sign = 1.0 if bits[a] else -1.0
            rest = [fac[b] for b in range(d) if b != a]
            dw[corner, :, a] = sign * (np.prod(rest, axis=0) if rest else 1.0)
    return idx, w, dw, f


def _lerp(a, b, t):
    # exact at t = 0, t = 1 and when a == b
    return np.where(t < 0.5, a + t * (b - a), b - (1.0 - t) * (b - a))


@dataclass
class _Interp:
    idx: np.ndarray
    w: np.ndarray
    dw: np.ndarray
    f: np.ndarray
    inside: np.ndarray
    size: int

    def gather(self, flat):
        # nested lerps: the same multilinear map as the corner weights, but
        # exact at lattice nodes and for constant data
        vals = flat[self.idx]
        for a in range(self.f.shape[1]):
            half = vals.shape[0] // 2
            vals = _lerp(vals[:half], vals[half:], self.f[:, a])
        return vals[0]

    def scatter(self, g):
        return np.bincount(self.idx.ravel(), weights=(self.w * g).ravel(), minlength=self.size)

    def dpoints(self, flat, g, h):
        # d(value)/d(point) times upstream g; zero along clamped axes
        return g[:, None] * np.einsum("cp,cpa->pa", flat[self.idx], self.dw) * self.inside / h


def _interp(grid, points, axis):
    s, inside = continuous_index(grid, points, axis)
    shape = grid.dims if axis is None else grid.face_shape(axis)
    idx, w, dw, f = interp_weights(s, shape)
    return _Interp(idx, w, dw, f, inside, math.prod(shape))


def _sample_scalar_fwd(f: ScalarField, points):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    it = _interp(f.grid, points, None)
    flat = f.values.reshape(-1)
    return it.gather(flat), (f, it)


def _sample_scalar_vjp(ctx, g):
    f, it = ctx
    gv = ScalarField(f.grid, it.scatter(g).reshape(f.grid.dims))
    return gv, it.dpoints(f.values.reshape(-1), g, f.grid.cell_size)


ad.register("sample_scalar", _sample_scalar_fwd, _sample_scalar_vjp)


def _sample_vec_fwd(v: StaggeredVectorField, points):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    its = [_interp(v.grid, points, i) for i in range(v.grid.ndim)]
    out = np.stack([it.gather(c.reshape(-1)) for it, c in zip(its, v.components)], axis=-1)
    return out, (v, its)


def _sample_vec_vjp(ctx, g):
    v, its = ctx
    grid = v.grid
    comps, gp = [], 0.0
    for i, (it, c) in enumerate(zip(its, v.components)):
        comps.append(it.scatter(g[:, i]).reshape(grid.face_shape(i)))
        gp = gp + it.dpoints(c.reshape(-1), g[:, i], grid.cell_size)
    return StaggeredVectorField(grid, tuple(comps)), gp


ad.register("sample_staggered", _sample_vec_fwd, _sample_vec_vjp)


def sample(field, points):
    """Multilinear interpolation at world points (clamped to the domain).

    Scalar fields give ``(P,)``; staggered fields give ``(P, ndim)`` with each
    component interpolated on its own face lattice.
    """
    val = ad.value_of(field)
    kind = "sample_scalar" if isinstance(val, ScalarField) else "sample_staggered"
    return ad.apply(kind, field, points)


# --------------------------------------------------------------------------
# boundary application


def _boundary_fwd(v: StaggeredVectorField, controls, bc: BoundarySpec, layout: EmitterLayout | None):
    grid = v.grid
    comps = [np.array(c) for c in v.components]
    ctrl = None
    if layout is not None:
        ctrl = np.asarray(controls, dtype=float).reshape(-1)
        if ctrl.size != layout.count:
            raise ValueError(f"expected {layout.count} emitter controls, got {ctrl.size}")
    for i in range(grid.ndim):
        c = comps[i]
        for side, (dst, src) in enumerate(((0, 1), (-1, -2))):
            kind = bc.kinds[i][side]
            dsl = [slice(None)] * grid.ndim
            ssl = [slice(None)] * grid.ndim
            dsl[i], ssl[i] = dst, src
            if kind == OPEN:
                c[tuple(dsl)] = c[tuple(ssl)]
            elif kind == WALL:
                c[tuple(dsl)] = 0.0
            else:
                if i != grid.vertical or side != 0 or layout is None:
                    raise ValueError("inflow is only supported on the bottom face with an emitter layout")
                c[tuple(dsl)] = layout.u_max * (ctrl @ layout.weights).reshape(c[tuple(dsl)].shape)
    return StaggeredVectorField(grid, tuple(comps)), (grid, bc, layout)


def _boundary_vjp(ctx, g: StaggeredVectorField):
    grid, bc, layout = ctx
    comps = [np.array(c) for c in g.components]
    g_ctrl = None
    for i in range(grid.ndim):
        c = comps[i]
        for side, (dst, src) in enumerate(((0, 1), (-1, -2))):
            kind = bc.kinds[i][side]
            dsl = [slice(None)] * grid.ndim
            ssl = [slice(None)] * grid.ndim
            dsl[i], ssl[i] = dst, src
            if kind == OPEN:
                c[tuple(ssl)] += c[tuple(dsl)]
            elif kind == INFLOW:
                g_ctrl = layout.u_max * (layout.weights @ c[tuple(dsl)].reshape(-1))
            c[tuple(dsl)] = 0.0
    return StaggeredVectorField(grid, tuple(comps)), g_ctrl


ad.register("apply_boundary", _boundary_fwd, _boundary_vjp)


def apply_boundary(v, bc: BoundarySpec, controls=None, layout: EmitterLayout | None = None):
    """Impose the boundary conditions on normal faces.

    Open faces copy the adjacent interior face, walls get zero normal
    velocity, and the bottom inflow face carries ``u_max * control`` blended
    by each emitter's patch coverage.
    """
    if any(INFLOW in k for k in bc.kinds) and layout is None:
        raise ValueError("inflow boundary needs an emitter layout")
    if layout is not None and controls is None:
        controls = np.zeros(layout.count)
    return ad.apply("apply_boundary", v, controls, bc=bc, layout=layout)
