"""Episode rollout through the coupled simulator, the episode loss, truncated
backpropagation through time, Adam, and the training loop."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import bodies as rb
from . import controller as ctl
from . import fluid as fl
from .grid import StaggeredVectorField
from .world import Setup

log = logging.getLogger(__name__)

TASKS = ("hold", "move", "two-object")


class SimulationDiverged(FloatingPointError):
    def __init__(self, step: int, what: str = "state"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class GradientGateError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    task: str = "hold"
    n_min: int = 80
    n_max: int = 280
    window: int = 80
    wind_max: float = 0.0
    spawn_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")
        if not 1 <= self.window:
            raise ValueError("window must be >= 1")
        if not 0.0 <= self.wind_max <= 0.2:
            raise ValueError("wind fraction must lie in [0, 0.2]")

    @property
    def n_bodies(self) -> int:
        return 2 if self.task == "two-object" else 1


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 1e-4
    beta: float = 0.001
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    param_dtype: str = "float32"
    checkpoint_every: int = 100
    max_skip_fraction: float = 0.05
    grad_gate: bool = True

    def __post_init__(self):
        if not 1e-4 <= self.learning_rate <= 1e-3:
            raise ValueError("learning rate must lie in [1e-4, 1e-3]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


@dataclass
class Episode:
    task: str
    n_steps: int
    centers: np.ndarray  # (bodies, ndim)
    velocities: np.ndarray
    goals: np.ndarray
    wind: np.ndarray  # fluid acceleration vector
    wind_frac: float = 0.0
    seed: int = 0

    @property
    def alpha(self) -> float:
        return 1.0 / self.n_steps


def sample_episode(setup: Setup, ec: EpisodeConfig, rng: np.random.Generator,
                   n_steps: int | None = None) -> Episode:
    """Random initial state, goal and wind for one episode."""
    d = setup.ndim
    ext = np.array(setup.grid.domain_extent)
    origin = np.array(setup.grid.origin)
    r = setup.radius
    n = int(rng.integers(ec.n_min, ec.n_max + 1)) if n_steps is None else int(n_steps)
    margin = 0.5 * (1.0 - ec.spawn_fraction)

    def spawn_xy():
        return origin[: d - 1] + ext[: d - 1] * rng.uniform(margin, 1.0 - margin, size=d - 1)

    hover = setup.hover * r
    nb = ec.n_bodies
    centers = np.zeros((nb, d))
    goals = np.zeros((nb, d))
    for b in range(nb):
        centers[b, : d - 1] = spawn_xy()
        centers[b, d - 1] = r
    if ec.task == "hold":
        goals[0] = centers[0]
        goals[0, d - 1] = hover
        centers[0] = goals[0]
    elif ec.task == "move":
        goals[0, : d - 1] = spawn_xy()
        goals[0, d - 1] = hover
    else:
        for b, frac in enumerate((-0.1, 1.1)):
            goals[b, : d - 1] = origin[: d - 1] + 0.5 * ext[: d - 1]
            goals[b, 0] = origin[0] + frac * ext[0]
            goals[b, d - 1] = hover
    wind_frac = float(rng.uniform(0.0, ec.wind_max)) if ec.wind_max > 0 else 0.0
    if d == 2:
        direction = np.array([rng.choice([-1.0, 1.0])])
    else:
        ang = rng.uniform(0.0, 2.0 * np.pi)
        direction = np.array([np.cos(ang), np.sin(ang)])
    seed = int(rng.integers(0, 2**31 - 1))
    return Episode(ec.task, n, centers, np.zeros((nb, d)), goals,
                   setup.wind_acceleration(wind_frac, direction), wind_frac, seed)


# --------------------------------------------------------------------------
# loss


def episode_loss(positions, controls, goals, alpha: float, beta: float):
    """``|x_N - g|^2 + alpha sum_k |x_k - g|^2 + beta sum_k |u_k|^2``.

    ``positions`` holds x_1..x_N, each a sequence of per-body vectors (or a
    ``(bodies, ndim)`` array); multi-body terms are summed, each body against
    its own goal. Returns ``(total, {"terminal", "path", "energy"})``.
    """
    goals = np.atleast_2d(np.asarray(goals, dtype=float))
    if len(positions) == 0:
        raise ValueError("empty trajectory")

    def dist2(xk):
        total = 0.0
        for b, g in enumerate(goals):
            total = total + ad.sumsq(xk[b] - g)
        return total

    terminal = dist2(positions[-1])
    path = 0.0
    for xk in positions:
        path = path + dist2(xk)
    energy = 0.0
    for u in controls:
        energy = energy + ad.sumsq(u)
    path_w = alpha * path
    energy_w = beta * energy
    total = terminal + path_w + energy_w
    terms = {
        "terminal": float(ad.value_of(terminal)),
        "path": float(ad.value_of(path_w)),
        "energy": float(ad.value_of(energy_w)),
    }
    return total, terms


# --------------------------------------------------------------------------
# policies


class OpenLoop:
    """Fixed control sequence ``(steps, emitters)``; differentiable input."""

    def __init__(self, controls):
        self.controls = controls

    def __call__(self, k, obs_fn, hidden, rng):
        return self.controls[k], hidden


class ZeroPolicy:
    def __call__(self, k, obs_fn, hidden, rng):
        return np.zeros(self.count), hidden

    def __init__(self, count: int):
        self.count = count


class NetworkPolicy:
    def __init__(self, params, cfg: ctl.ControllerConfig, mode: str):
        self.params = params
        self.cfg = cfg
        self.mode = mode

    def __call__(self, k, obs_fn, hidden, rng):
        return ctl.forward(self.params, obs_fn(), hidden, self.cfg, self.mode, rng)


# --------------------------------------------------------------------------
# rollout


@dataclass
class SimState:
    velocity: object
    pressure: object
    centers: list
    velocities: list
    hidden: object
    step: int = 0

    def values(self) -> "SimState":
        """Plain-value copy (no tape handles)."""
        return SimState(
            ad.value_of(self.velocity), ad.value_of(self.pressure),
            [np.array(ad.value_of(x)) for x in self.centers],
            [np.array(ad.value_of(v)) for v in self.velocities],
            None if self.hidden is None else np.array(ad.value_of(self.hidden)),
            self.step,
        )


@dataclass
class Trajectory:
    positions: np.ndarray  # (N+1, bodies, ndim)
    velocities: np.ndarray
    controls: np.ndarray  # (N, emitters)
    forces: np.ndarray  # (N, bodies, ndim)
    goals: np.ndarray
    wind: np.ndarray
    dt: float
    loss_terms: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.controls)


@dataclass
class RolloutResult:
    trajectory: Trajectory
    loss: object
    terms: dict
    final_state: SimState
    frontier_state: SimState | None
    recorded_steps: int


def initial_state(setup: Setup, ep: Episode) -> SimState:
    grid = setup.grid
    hidden = ctl.init_hidden(setup.controller.hidden, setup.layout.shape)
    return SimState(StaggeredVectorField.zeros(grid), fl.ScalarField.zeros(grid),
                    [c.copy() for c in ep.centers], [v.copy() for v in ep.velocities], hidden, 0)


ForceFn = Callable[[int, list, list], list]


def coupled_step(setup: Setup, state: SimState, policy, goals, fluid_params: fl.FluidParams,
                 rng: np.random.Generator | None, force_fn: ForceFn | None = None):
    """Controller, fluid, forces, motion and collisions for one time step.

    Returns ``(new_state, controls, forces)``.
    """
    grid = setup.grid
    nb = len(state.centers)

    def obs():
        return ctl.encode_observation(state.centers, state.velocities, goals, setup.observation,
                                      setup.controller.n_bodies)

    controls, hidden = policy(state.step, obs, state.hidden, rng)
    if force_fn is None:
        masks = [rb.rasterize(x, setup.radius, grid) for x in state.centers]
        obst = rb.obstacle_bc(masks, state.velocities, grid)
        fs = fl.step(fl.FluidState(state.velocity, state.pressure, state.step), controls, obst,
                     fluid_params, setup.bc, setup.layout, setup.solver)
        forces = [rb.fluid_force(fs.pressure, m) for m in masks]
        velocity, pressure = fs.velocity, fs.pressure
    else:
        forces = force_fn(state.step, state.centers, state.velocities)
        velocity, pressure = state.velocity, state.pressure
    xs, vs = rb.integrate_bodies(state.centers, state.velocities, forces, [setup.mass] * nb,
                                 setup.fluid.gravity(grid.ndim), setup.fluid.dt)
    xs, vs = rb.resolve_collisions(xs, vs, [setup.radius] * nb, [setup.mass] * nb)
    new = SimState(velocity, pressure, xs, vs, hidden, state.step + 1)
    return new, controls, forces


def rollout(setup: Setup, ep: Episode, policy=None, params=None, tape: ad.Tape | None = None,
            record_from: int = 0, beta: float = 0.001, mode: str = "train",
            start: SimState | None = None, force_fn: ForceFn | None = None) -> RolloutResult:
    """Simulate one episode.

    With a tape, steps before ``record_from`` run unrecorded on plain values
    (the state there is the detached truncation frontier) and the remaining
    steps are recorded, so only they contribute gradients. ``params`` may be
    a dict of tape handles; before the frontier their plain values are used.
    """
    if policy is None and params is None:
        raise ValueError("need a policy or controller params")
    state = start.values() if start is not None else initial_state(setup, ep)
    fluid_params = replace(setup.fluid, wind=tuple(ep.wind))
    raw_params = {k: ad.value_of(v) for k, v in params.items()} if params is not None else None
    N = ep.n_steps
    record_from = max(0, min(record_from, N))
    positions = [None] * (N + 1)
    positions[state.step] = state.centers
    pos_vals = np.zeros((N + 1, len(state.centers), setup.ndim))
    vel_vals = np.zeros_like(pos_vals)
    pos_vals[state.step] = np.array([ad.value_of(x) for x in state.centers])
    vel_vals[state.step] = np.array([ad.value_of(v) for v in state.velocities])
    controls_seq, ctrl_vals = [], np.zeros((N, setup.layout.count))
    force_vals = np.zeros((N, len(state.centers), setup.ndim))
    frontier = None
    recorded = 0
    while state.step < N:
        k = state.step
        live = tape is not None and k >= record_from
        if k == record_from:
            frontier = state.values()
        if policy is not None:
            pol = policy
        else:
            pol = NetworkPolicy(params if live else raw_params, setup.controller, mode)
        rng = np.random.default_rng([ep.seed, k]) if mode == "train" else None
        state, u, forces = coupled_step(setup, state, pol, ep.goals, fluid_params, rng, force_fn)
        if live:
            recorded += 1
        else:
            u = ad.value_of(u)
        positions[k + 1] = state.centers
        controls_seq.append(u)
        pos_vals[k + 1] = [ad.value_of(x) for x in state.centers]
        vel_vals[k + 1] = [ad.value_of(v) for v in state.velocities]
        ctrl_vals[k] = ad.value_of(u)
        force_vals[k] = [ad.value_of(f) for f in forces]
        if not (np.all(np.isfinite(pos_vals[k + 1])) and np.all(np.isfinite(vel_vals[k + 1]))):
            raise SimulationDiverged(k + 1)
    # a restarted rollout only scores the steps it simulated; earlier terms are
    # constants with respect to everything recorded here
    first = 1 if start is None else start.step + 1
    loss, terms = episode_loss(positions[first:], controls_seq, ep.goals, ep.alpha, beta)
    traj = Trajectory(pos_vals, vel_vals, ctrl_vals, force_vals, ep.goals.copy(), ep.wind.copy(),
                      setup.fluid.dt, terms)
    return RolloutResult(traj, loss, terms, state, frontier, recorded)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict, grads, state: AdamState, lr: float, b1: float = 0.9,
              b2: float = 0.999, eps: float = 1e-8, dtype=None):
    """Bias-corrected Adam update; returns new params and optimizer state."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=float)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        q = np.asarray(p, dtype=float) - lr * mhat / (np.sqrt(vhat) + eps)
        dt_ = dtype or np.asarray(p).dtype
        new_p[k] = q.astype(dt_)
        new_m[k] = m.astype(dt_)
        new_v[k] = v.astype(dt_)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class IterationRecord:
    iteration: int
    n_steps: int
    wind_frac: float
    loss: float
    terminal: float
    path: float
    energy: float
    wall_time: float
    skipped: bool = False

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    params: dict
    opt: AdamState
    iteration: int = 0
    history: list = field(default_factory=list)
    skipped: int = 0


def loss_and_grad(setup: Setup, params: dict, ep: Episode, ec: EpisodeConfig, beta: float,
                  mode: str = "train"):
    tape = ad.Tape()
    handles = {k: tape.param(k, np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    res = rollout(setup, ep, params=handles, tape=tape, record_from=ep.n_steps - ec.window,
                  beta=beta, mode=mode)
    if not isinstance(res.loss, ad.Var):
        return res, None
    grads = tape.backward(res.loss)
    return res, grads


def gradient_gate(setup: Setup, params: dict, steps: int = 5, eps: float = 1e-4, coords: int = 4,
                  seed: int = 0, tol: float = 1e-3) -> dict:
    """Finite-difference check of the rollout loss on a short episode.

    Checks the loss against (a) an open-loop control sequence and (b) the
    controller parameters with dropout off, both coordinate-wise on
    ``coords`` sampled entries per tensor and jointly along random
    directions through the full parameter vector. Returns the maximum
    relative errors; raises ``GradientGateError`` above ``tol``.
    """
    errs = gradient_errors(setup, params, steps, eps, coords, seed)
    bad = {k: v for k, v in errs.items() if not v <= tol}
    if bad:
        raise GradientGateError(f"gradient check failed: {bad}")
    return errs


def gate_episode(setup: Setup, steps: int, seed: int, task: str = "move") -> Episode:
    ec = EpisodeConfig(task=task if setup.controller.n_bodies == 1 else "two-object",
                       n_min=steps, n_max=steps, window=steps)
    ep = sample_episode(setup, ec, np.random.default_rng(seed), n_steps=steps)
    # lift off the floor so contact clamps do not flatten the check
    ep.centers[:, -1] = setup.hover * setup.radius
    return ep


def gradient_errors(setup: Setup, params: dict, steps: int = 5, eps: float = 1e-4, coords: int = 4,
                    seed: int = 0, which=("controls", "params")) -> dict:
    ep = gate_episode(setup, steps, seed)
    out = {}
    if "controls" in which:
        u0 = np.random.default_rng(seed + 1).uniform(0.2, 0.8, size=(steps, setup.layout.count))

        def f_controls(u):
            return rollout(setup, ep, policy=OpenLoop(u), tape=_tape_of(u), beta=0.001,
                           mode="eval").loss

        out["controls"] = ad.grad_check(f_controls, u0, eps=eps).max_rel_error
    if "params" in which:
        p64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

        def f_params(p):
            return rollout(setup, ep, params=p, beta=0.001, mode="eval",
                           tape=_tape_of(p)).loss

        out["params"] = ad.grad_check(f_params, p64, eps=eps, coords=coords, seed=seed).max_rel_error
        out["params_joint"] = ad.directional_check(f_params, p64, eps=eps, n_dirs=2, seed=seed).max_rel_error
    return out


def _tape_of(x):
    if isinstance(x, dict):
        for v in x.values():
            if isinstance(v, ad.Var):
                return v.tape
        return None
    return x.tape if isinstance(x, ad.Var) else None


def train(setup: Setup, tc: TrainConfig, ec: EpisodeConfig, params: dict | None = None,
          state: TrainState | None = None, on_iteration=None, on_checkpoint=None,
          seed: int | None = None) -> TrainState:
    """Adam on the episode loss, one sampled episode per iteration.

    Each iteration draws its episode from ``(seed, iteration)`` so resuming
    from a checkpoint reproduces an uninterrupted run exactly.
    """
    seed = ec.seed if seed is None else seed
    dtype = np.dtype(tc.param_dtype)
    if state is None:
        if params is None:
            params = ctl.init_params(setup.controller, setup.ndim - 1, np.random.default_rng([seed, 7919]))
        params = {k: np.asarray(v).astype(dtype) for k, v in params.items()}
        state = TrainState(params, AdamState.zeros_like(params), 0, [])
    if tc.grad_gate and state.iteration < tc.iterations:
        errs = gradient_gate(setup, state.params)
        log.info("gradient gate passed: %s", errs)
    while state.iteration < tc.iterations:
        it = state.iteration
        t0 = time.perf_counter()
        ep = sample_episode(setup, ec, np.random.default_rng([seed, 0, it]))
        try:
            res, grads = loss_and_grad(setup, state.params, ep, ec, tc.beta)
            loss = float(ad.value_of(res.loss))
            ok = grads is not None and np.isfinite(loss) and grads.all_finite()
        except (FloatingPointError, fl.ProjectionError) as exc:
            log.warning("iteration %d: %s", it, exc)
            res, grads, loss, ok = None, None, float("nan"), False
        if ok:
            state.params, state.opt = adam_step(state.params, grads, state.opt, tc.learning_rate,
                                                tc.adam_b1, tc.adam_b2, tc.adam_eps, dtype)
        else:
            state.skipped += 1
            if state.skipped > max(1, tc.max_skip_fraction * tc.iterations):
                raise TrainingDiverged(f"{state.skipped} iterations skipped for non-finite loss")
        terms = res.terms if res is not None else {"terminal": np.nan, "path": np.nan, "energy": np.nan}
        rec = IterationRecord(it, ep.n_steps, ep.wind_frac, loss, terms["terminal"], terms["path"],
                              terms["energy"], time.perf_counter() - t0, not ok)
        state.history.append(rec)
        state.iteration = it + 1
        if on_iteration is not None:
            on_iteration(rec)
        if on_checkpoint is not None and tc.checkpoint_every and state.iteration % tc.checkpoint_every == 0:
            on_checkpoint(state)
    return state


def finetune_energy(setup: Setup, state: TrainState, tc: TrainConfig, ec: EpisodeConfig,
                    extra_iterations: int, beta: float = 0.02, **kw) -> TrainState:
    """Continue training a converged controller with a larger energy weight."""
    tc2 = replace(tc, beta=beta, iterations=state.iteration + extra_iterations)
    st = TrainState({k: v.copy() for k, v in state.params.items()},
                    AdamState(dict(state.opt.m), dict(state.opt.v), state.opt.t),
                    state.iteration, list(state.history), state.skipped)
    return train(setup, tc2, ec, state=st, **kw)
