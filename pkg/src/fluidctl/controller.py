"""Observation encoding on the emitter grid and the recurrent convolutional policy."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bodies import soft_mask
from .grid import EmitterLayout

CHANNELS_PER_BODY = 7
CONTROL_EPS = 1e-12


@dataclass(frozen=True)
class ControllerConfig:
    layers: int = 4
    kernel: int = 3
    width: int = 64
    hidden: int = 32
    dropout: float = 0.1
    gamma: float = 0.1
    n_bodies: int = 1

    def __post_init__(self):
        if self.layers < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("need >= 1 layer and an odd kernel size")
        if self.hidden < 1 or self.width < 1:
            raise ValueError("hidden and width must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def in_channels(self) -> int:
        return CHANNELS_PER_BODY * self.n_bodies + self.hidden


# --------------------------------------------------------------------------
# observation


@dataclass(frozen=True)
class ObservationSpec:
    """What the encoder needs to know about the world."""

    layout: EmitterLayout
    radius: float
    dt: float
    height: float
    extent: tuple

    @property
    def spatial(self) -> tuple:
        return self.layout.shape


def encode_observation(centers, velocities, goals, spec: ObservationSpec, max_bodies: int | None = None):
    """Seven feature maps per body on the emitter grid, stacked body by body.

    Channels: position mask, mask scaled by height, mass-matched difference
    of the mask advanced by one step of velocity and the current mask,
    mask scaled by vertical velocity, and |goal - cell| maps for x, y, z
    (2D worlds have no y, so that map is zero).
    """
    if len(centers) == 0:
        raise ValueError("need at least one body")
    if max_bodies is not None and len(centers) > max_bodies:
        raise ValueError(f"{len(centers)} bodies exceed the configured {max_bodies}")
    lay = spec.layout
    pts = lay.centers
    h8 = lay.spacing
    u_max = lay.u_max
    d = pts.shape[1] + 1
    vel_gain = h8 / (u_max * spec.dt)
    maps = []
    for x, v, goal in zip(centers, velocities, np.atleast_2d(goals)):
        xy, z = x[: d - 1], x[d - 1]
        vxy, vz = v[: d - 1], v[d - 1]
        m = soft_mask(xy, spec.radius, pts, h8)
        m_next = soft_mask(xy + vxy * spec.dt, spec.radius, pts, h8)
        s0 = ad.sum(m)
        s1 = ad.sum(m_next)
        if float(ad.value_of(s1)) > 1e-12:
            m_next = m_next * (s0 / s1)
        ch = [
            m,
            m * (z * (1.0 / spec.height)),
            (m_next - m) * vel_gain,
            m * (vz * (1.0 / u_max)),
        ]
        goal = np.asarray(goal, dtype=float)
        for c in range(3):
            if d == 2 and c == 1:
                ch.append(np.zeros(len(pts)))
                continue
            axis = c if d == 3 else (0 if c == 0 else 1)
            if axis < d - 1:
                dist = np.abs(goal[axis] - pts[:, axis])
            else:
                dist = np.full(len(pts), abs(goal[axis]))
            ch.append(dist / spec.extent[axis])
        maps.extend(ch)
    obs = ad.stack(maps, axis=0)
    return ad.reshape(obs, (len(maps),) + lay.shape)


# --------------------------------------------------------------------------
# network primitives


def _offsets(k, s):
    return list(itertools.product(range(k), repeat=s))


def _conv_fwd(x, w, b):
    x = np.asarray(x, dtype=float)
    s = x.ndim - 1
    k = w.shape[-1]
    r = k // 2
    spatial = x.shape[1:]
    xpad = np.pad(x, [(0, 0)] + [(r, r)] * s)
    P = int(np.prod(spatial))
    out = np.zeros((w.shape[0], P))
    cols = []
    for off in _offsets(k, s):
        sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, spatial))
        xs = xpad[sl].reshape(x.shape[0], P)
        cols.append(xs)
        out += w[(slice(None), slice(None)) + off] @ xs
    out += b[:, None]
    return out.reshape((w.shape[0],) + spatial), (x.shape, w, cols, k, r)


def _conv_vjp(ctx, g):
    xshape, w, cols, k, r = ctx
    s = len(xshape) - 1
    spatial = xshape[1:]
    g2 = g.reshape(g.shape[0], -1)
    gw = np.zeros_like(w)
    gxpad = np.zeros((xshape[0],) + tuple(n + 2 * r for n in spatial))
    for off, xs in zip(_offsets(k, s), cols):
        wo = w[(slice(None), slice(None)) + off]
        gw[(slice(None), slice(None)) + off] = g2 @ xs.T
        sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, spatial))
        gxpad[sl] += (wo.T @ g2).reshape((xshape[0],) + spatial)
    inner = (slice(None),) + tuple(slice(r, r + n) for n in spatial)
    return gxpad[inner], gw, g2.sum(axis=1)


ad.register("conv", _conv_fwd, _conv_vjp)


def conv(x, w, b):
    """Zero-padded 'same' convolution over the spatial axes of ``x (C, *S)``."""
    return ad.apply("conv", x, w, b)


LN_EPS = 1e-5


def _ln_fwd(x, gain, bias):
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    shape = (-1,) + (1,) * (x.ndim - 1)
    return gain.reshape(shape) * xhat + bias.reshape(shape), (xhat, inv, gain, shape)


def _ln_vjp(ctx, g):
    xhat, inv, gain, shape = ctx
    axes = tuple(range(1, g.ndim))
    g_gain = np.sum(g * xhat, axis=axes)
    g_bias = np.sum(g, axis=axes)
    gx_hat = g * gain.reshape(shape)
    gx = inv * (gx_hat - gx_hat.mean(axis=0, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=0, keepdims=True))
    return gx, g_gain, g_bias


ad.register("layer_norm", _ln_fwd, _ln_vjp)


def layer_norm(x, gain, bias):
    """Normalise over channels independently at every spatial site."""
    return ad.apply("layer_norm", x, gain, bias)


# --------------------------------------------------------------------------
# policy


def init_params(cfg: ControllerConfig, spatial_ndim: int, rng: np.random.Generator) -> dict:
    k = (cfg.kernel,) * spatial_ndim
    params = {}
    cin = cfg.in_channels
    for layer in range(cfg.layers):
        fan_in = cin * int(np.prod(k))
        params[f"conv{layer}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cfg.width, cin) + k)
        params[f"conv{layer}.b"] = np.zeros(cfg.width)
        params[f"norm{layer}.g"] = np.ones(cfg.width)
        params[f"norm{layer}.b"] = np.zeros(cfg.width)
        cin = cfg.width
    one = (1,) * spatial_ndim
    params["head_u.w"] = rng.normal(0.0, 0.1 / np.sqrt(cfg.width), size=(1, cfg.width) + one)
    params["head_u.b"] = np.zeros(1)
    params["head_h.w"] = rng.normal(0.0, 0.1 / np.sqrt(cfg.width), size=(cfg.hidden, cfg.width) + one)
    params["head_h.b"] = np.zeros(cfg.hidden)
    return params


def zero_params(cfg: ControllerConfig, spatial_ndim: int) -> dict:
    p = init_params(cfg, spatial_ndim, np.random.default_rng(0))
    return {k: np.zeros_like(v) for k, v in p.items()}


def init_hidden(m_h: int, spatial: tuple) -> np.ndarray:
    if m_h < 1:
        raise ValueError("hidden size must be >= 1")
    return np.full((m_h,) + tuple(spatial), 1.0 / np.sqrt(m_h))


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def forward(params, obs, h, cfg: ControllerConfig, mode: str = "eval", rng: np.random.Generator | None = None):
    """One controller step. Returns ``(controls, new_hidden)``.

    Controls are flattened in emitter order and lie in (0, 1).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    obs_v, h_v = ad.value_of(obs), ad.value_of(h)
    if np.shape(obs_v)[1:] != np.shape(h_v)[1:]:
        raise ValueError(f"observation grid {np.shape(obs_v)[1:]} != hidden grid {np.shape(h_v)[1:]}")
    if np.shape(obs_v)[0] + np.shape(h_v)[0] != cfg.in_channels:
        raise ValueError("channel count does not match the controller configuration")
    h_in = h
    if mode == "train" and cfg.dropout > 0.0:
        if rng is None:
            raise ValueError("training mode needs a dropout rng")
        h_in = h * dropout_mask(np.shape(h_v), cfg.dropout, rng)
    z = ad.concat([obs, h_in], axis=0)
    for layer in range(cfg.layers):
        z = conv(z, params[f"conv{layer}.w"], params[f"conv{layer}.b"])
        z = layer_norm(z, params[f"norm{layer}.g"], params[f"norm{layer}.b"])
        z = ad.softplus(z)
    # float64 sigmoid rounds to exactly 0 or 1 for large logits; keep controls strictly inside
    u = ad.clip(ad.sigmoid(conv(z, params["head_u.w"], params["head_u.b"])), CONTROL_EPS, 1.0 - CONTROL_EPS)
    h_new = h + cfg.gamma * conv(z, params["head_h.w"], params["head_h.b"])
    return ad.reshape(u, (-1,)), h_new
