"""Independent reference implementations used by the tests.

Everything here is written with explicit loops or dense matrices so it
shares no code path with the vectorised package operators.
"""
import itertools

import numpy as np

from fluidctl.grid import OPEN


def cells(dims):
    return itertools.product(*[range(n) for n in dims])


def divergence_loop(components, dims, h):
    out = np.zeros(dims)
    for c in cells(dims):
        total = 0.0
        for a in range(len(dims)):
            hi = list(c)
            hi[a] += 1
            total += components[a][tuple(hi)] - components[a][c]
        out[c] = total / h
    return out


def gradient_loop(p, dims, h, kinds):
    """Face differences with zero ghost pressure outside open faces."""
    comps = []
    for a in range(len(dims)):
        fshape = list(dims)
        fshape[a] += 1
        g = np.zeros(fshape)
        for f in cells(fshape):
            lo = list(f)
            lo[a] -= 1
            hi = list(f)
            if f[a] == 0:
                g[f] = 0.0 if kinds[a][0] != OPEN else (p[tuple(hi)] - 0.0) / h
            elif f[a] == dims[a]:
                g[f] = 0.0 if kinds[a][1] != OPEN else (0.0 - p[tuple(lo)]) / h
            else:
                g[f] = (p[tuple(hi)] - p[tuple(lo)]) / h
        comps.append(g)
    return comps


def laplacian_matrix(dims, h, kinds):
    """Dense 5/7-point Laplacian with zero Dirichlet ghosts at open faces."""
    n = int(np.prod(dims))
    idx = {c: i for i, c in enumerate(cells(dims))}
    A = np.zeros((n, n))
    for c, i in idx.items():
        for a in range(len(dims)):
            for side, step in ((0, -1), (1, 1)):
                nb = list(c)
                nb[a] += step
                nb = tuple(nb)
                if nb in idx:
                    A[i, idx[nb]] += 1.0 / h**2
                    A[i, i] -= 1.0 / h**2
                elif kinds[a][side] == OPEN:
                    A[i, i] -= 1.0 / h**2
    return A


def neumann_laplacian_matrix(shape, h):
    """Dense Laplacian with edge-replicated (zero-gradient) ghosts."""
    n = int(np.prod(shape))
    idx = {c: i for i, c in enumerate(cells(shape))}
    A = np.zeros((n, n))
    for c, i in idx.items():
        for a in range(len(shape)):
            for step in (-1, 1):
                nb = list(c)
                nb[a] += step
                nb = tuple(nb)
                if nb in idx:
                    A[i, idx[nb]] += 1.0 / h**2
                    A[i, i] -= 1.0 / h**2
    return A


def icosphere(subdivisions=3):
    """Unit icosphere; 3 subdivisions give 1280 triangles."""
    t = (1.0 + 5**0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t),
             (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), np.array(faces)


def surface_force_torque(pfun, center, radius, subdivisions=3):
    """-(integral of p n dS) and -(integral of p r x n dS) by midpoint quadrature."""
    verts, faces = icosphere(subdivisions)
    f = np.zeros(3)
    s = np.zeros(3)
    for tri in faces:
        a, b, c = (center + radius * verts[i] for i in tri)
        cross = np.cross(b - a, c - a)
        area = 0.5 * np.linalg.norm(cross)
        n = cross / np.linalg.norm(cross)
        m = (a + b + c) / 3.0
        if np.dot(n, m - center) < 0:
            n = -n
        p = pfun(m)
        f -= p * n * area
        s -= p * np.cross(m - center, n) * area
    return f, s
