"""Dot-product test for every registered vector-Jacobian rule.

For an op F with rule R, random input direction d and output weight w:
<R(w), d> must equal <w, (F(x + e d) - F(x - e d)) / 2e>.
"""
import numpy as np
import pytest

from fluidctl import autodiff as ad
from fluidctl import bodies as rb
from fluidctl import controller as ctl  # noqa: F401  registers conv / layer_norm
from fluidctl import fluid as fl
from fluidctl.grid import BoundarySpec, EmitterLayout, GridSpec, ScalarField, StaggeredVectorField


def to_vec(x):
    if isinstance(x, ScalarField):
        return x.values.ravel()
    if isinstance(x, StaggeredVectorField):
        return x.flat()
    return np.atleast_1d(np.asarray(x, dtype=float)).ravel()


def like(template, vec):
    if isinstance(template, ScalarField):
        return ScalarField(template.grid, vec.reshape(template.grid.dims))
    if isinstance(template, StaggeredVectorField):
        return StaggeredVectorField.from_flat(template.grid, vec)
    if np.ndim(template) == 0:
        return float(vec[0])
    return vec.reshape(np.shape(template))


def shift(x, d, eps):
    return like(x, to_vec(x) + eps * to_vec(d))


def rand_like(x, rng):
    return like(x, rng.normal(size=to_vec(x).size))


def on_support(x, d):
    """Restrict a mask direction to cells the mask covers.

    Masks produced by rasterisation never leave zero-valued cells, so the
    union max and the zero-coverage switch are only probed on their support.
    """
    if isinstance(x, ScalarField):
        return ScalarField(x.grid, d.values * (x.values > 0))
    return d


def dot_test(op_kind, inputs, diff, attrs=None, eps=1e-6, seed=0):
    attrs = attrs or {}
    op = ad.OPS[op_kind]
    rng = np.random.default_rng(seed)
    out, ctx = op.forward(*inputs, **attrs)
    outs = out if op.n_out > 1 else (out,)
    ws = [rand_like(o, rng) for o in outs]
    grads = op.vjp(ctx, *ws)
    worst = 0.0
    for i in diff:
        d = on_support(inputs[i], rand_like(inputs[i], rng))
        analytic = float(to_vec(grads[i]) @ to_vec(d))
        vals = []
        for sgn in (1, -1):
            args = list(inputs)
            args[i] = shift(inputs[i], d, sgn * eps)
            o, _ = op.forward(*args, **attrs)
            os_ = o if op.n_out > 1 else (o,)
            vals.append(sum(float(to_vec(w) @ to_vec(v)) for w, v in zip(ws, os_)))
        fd = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, abs(analytic - fd) / max(abs(analytic) + abs(fd), 1e-12))
    return worst


rng0 = np.random.default_rng(99)
G2 = GridSpec((8, 6), 1.5)
G3 = GridSpec((6, 5, 6), 1.0)
BC2 = BoundarySpec.default(G2)
LAY2 = EmitterLayout.regular(G2, per_axis=4)


def svf(g, scale=1.0):
    return StaggeredVectorField(g, tuple(scale * rng0.normal(size=g.face_shape(a)) for a in range(g.ndim)))


def sf(g, scale=1.0):
    return ScalarField(g, scale * rng0.normal(size=g.dims))


def _mask(g, center, r=3.0):
    return rb._rasterize_fwd(np.asarray(center, dtype=float), r, g)[0]


CASES = {
    "detach": None,  # zero rule, checked separately
    "add": (["a", "b"], [rng0.normal(size=(3, 4)), rng0.normal(size=(4,))], [0, 1], {}),
    "sub": (["a", "b"], [rng0.normal(size=(3, 4)), rng0.normal(size=(3, 1))], [0, 1], {}),
    "mul": (["a", "b"], [rng0.normal(size=(3, 4)), rng0.normal(size=(3, 4))], [0, 1], {}),
    "div": (["a", "b"], [rng0.normal(size=(5,)), rng0.uniform(1, 2, size=(5,))], [0, 1], {}),
    "neg": (["a"], [rng0.normal(size=(5,))], [0], {}),
    "pow": (["a"], [rng0.uniform(0.5, 2, size=(5,))], [0], {"p": 3.0}),
    "exp": (["a"], [rng0.normal(size=(5,))], [0], {}),
    "log": (["a"], [rng0.uniform(0.5, 2, size=(5,))], [0], {}),
    "sqrt": (["a"], [rng0.uniform(0.5, 2, size=(5,))], [0], {}),
    "tanh": (["a"], [rng0.normal(size=(5,))], [0], {}),
    "sigmoid": (["a"], [rng0.normal(size=(5,))], [0], {}),
    "softplus": (["a"], [rng0.normal(size=(5,))], [0], {}),
    "abs": (["a"], [rng0.uniform(0.5, 1, size=(5,)) * np.sign(rng0.normal(size=5))], [0], {}),
    "maximum": (["a", "b"], [np.arange(5.0), np.full(5, 2.5)], [0, 1], {}),
    "minimum": (["a", "b"], [np.arange(5.0), np.full(5, 2.5)], [0, 1], {}),
    "clip": (["a"], [np.linspace(-2, 2, 9) + 0.01], [0], {"lo": -1.0, "hi": 1.0}),
    "where": (["c", "a", "b"], [np.arange(6) % 2 == 0, rng0.normal(size=6), rng0.normal(size=6)], [1, 2], {}),
    "sum": (["a"], [rng0.normal(size=(3, 4))], [0], {"axis": 1}),
    "reshape": (["a"], [rng0.normal(size=(3, 4))], [0], {"shape": (2, 6)}),
    "getitem": (["a"], [rng0.normal(size=(4, 3))], [0], {"idx": (slice(1, 3), 0)}),
    "concat": (["a", "b"], [rng0.normal(size=(2, 3)), rng0.normal(size=(1, 3))], [0, 1], {"axis": 0}),
    "stack": (["a", "b"], [rng0.normal(size=(3,)), rng0.normal(size=(3,))], [0, 1], {"axis": 0}),
    "matmul": (["a", "b"], [rng0.normal(size=(3, 4)), rng0.normal(size=(4, 2))], [0, 1], {}),
    "divergence": (["v"], [svf(G3)], [0], {}),
    "gradient": (["p"], [sf(G3)], [0], {"bc": BoundarySpec.default(G3)}),
    "sample_scalar": (["f", "x"], [sf(G2), rng0.uniform(1, 10, size=(7, 2))], [0, 1], {}),
    "sample_staggered": (["v", "x"], [svf(G2), rng0.uniform(1, 10, size=(7, 2))], [0, 1], {}),
    "apply_boundary": (["v", "u"], [svf(G2), rng0.uniform(size=4)], [0, 1], {"bc": BC2, "layout": LAY2}),
    "advect": (["v"], [svf(G2, 0.3)], [0], {"dt": 0.5}),
    "diffuse": (["v"], [svf(G2)], [0], {"nu": 0.1, "dt": 0.5}),
    "add_forces": (["v", "a"], [svf(G2), np.array([0.1, -0.2])], [0], {"dt": 0.5}),
    "project": (["v", "phi", "u"], [svf(G2), _mask(G2, [6.0, 4.0]), svf(G2)], [0, 1, 2],
                {"dt": 0.5, "rho": 1.0, "bc": BC2, "opts": fl.SolverOptions()}),
    "soft_mask": (["c", "r", "x"], [np.array([4.1, 3.3]), 2.2, rng0.uniform(0, 8, size=(30, 2))], [0, 1],
                  {"h": 1.0}),
    "rasterize": (["c", "r"], [np.array([6.1, 4.3]), 3.1], [0, 1], {"grid": G2}),
    "fluid_force": (["p", "phi"], [sf(G2), _mask(G2, [6.0, 4.0])], [0, 1], {}),
    "fluid_torque": (["p", "phi", "c"], [sf(G3), _mask(G3, [3.0, 2.5, 3.0]), np.array([3.0, 2.5, 3.0])],
                     [0, 1, 2], {}),
    "obstacle_bc": (["m1", "m2", "v1", "v2"], [_mask(G2, [3.2, 4.1]), _mask(G2, [8.3, 4.4]),
                    np.array([0.3, -0.2]), np.array([-0.1, 0.4])], [0, 1, 2, 3], {"n_bodies": 2, "grid": G2}),
    "conv": (["x", "w", "b"], [rng0.normal(size=(3, 5, 4)), rng0.normal(size=(2, 3, 3, 3)), rng0.normal(size=2)],
             [0, 1, 2], {}),
    "layer_norm": (["x", "g", "b"], [rng0.normal(size=(6, 4)), rng0.normal(size=6), rng0.normal(size=6)],
                   [0, 1, 2], {}),
}


def test_every_registered_op_has_a_case():
    assert set(ad.OPS) <= set(CASES), set(ad.OPS) - set(CASES)


@pytest.mark.parametrize("op_kind", sorted(k for k, v in CASES.items() if v is not None))
def test_vjp_dot_product(op_kind):
    _, inputs, diff, attrs = CASES[op_kind]
    err = dot_test(op_kind, inputs, diff, attrs)
    assert err <= 1e-5, f"{op_kind}: relative mismatch {err:.2e}"


def test_detach_rule_is_zero():
    out, ctx = ad.OPS["detach"].forward(np.ones(3))
    assert all(g is None or np.all(g == 0) for g in ad.OPS["detach"].vjp(ctx, np.ones(3)))
