"""Evaluation tasks, trajectory metrics, reports and trajectory files."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import controller as ctl
from . import trainer as tr
from .world import Setup

STRAIGHT_EPS = 1e-9


class TaskMismatch(ValueError):
    """Controller body count does not fit the requested task."""


# --------------------------------------------------------------------------
# metrics


def _bodies(positions):
    p = np.asarray(positions, dtype=float)
    return p[:, None, :] if p.ndim == 2 else p


def final_distance(positions, goals) -> float:
    """Distance between the last position and the goal, averaged over bodies."""
    p = _bodies(positions)
    g = np.atleast_2d(np.asarray(goals, dtype=float))
    return float(np.mean(np.linalg.norm(p[-1] - g, axis=-1)))


def deviation_series(positions, goals) -> np.ndarray:
    """Per-step distance to the goal including height, ``(N+1,)`` or ``(N+1, bodies)``."""
    p = np.asarray(positions, dtype=float)
    g = np.asarray(goals, dtype=float)
    if p.ndim == 3:
        g = np.atleast_2d(g)[None]
    return np.linalg.norm(p - g, axis=-1)


def path_lengths(positions) -> tuple[float, float]:
    """Horizontal path length and start-to-end distance of one body."""
    p = np.asarray(positions, dtype=float)
    xy = p[:, :-1]
    steps = np.linalg.norm(np.diff(xy, axis=0), axis=-1)
    return float(steps.sum()), float(np.linalg.norm(xy[-1] - xy[0]))


def straightness(positions) -> float | None:
    """Excess horizontal path length in percent, ``None`` if start == end."""
    p = np.asarray(positions, dtype=float)
    if len(p) < 2:
        raise ValueError("need at least two positions")
    path, direct = path_lengths(p)
    if direct < STRAIGHT_EPS:
        return None
    return 100.0 * (path - direct) / direct


def fluid_volume(controls) -> float:
    """Mean control fraction over steps and emitters."""
    u = np.asarray(controls, dtype=float)
    if u.size == 0:
        return 0.0
    return float(u.mean())


# --------------------------------------------------------------------------
# reports


DEFAULT_BINS = {
    "final_distance": [0.0, 2.5, 5.0, 10.0, 15.0, 20.0, 30.0, 50.0, 100.0, 200.0],
    "excess_path": [0.0, 1.0, 2.5, 5.0, 10.0, 25.0, 50.0, 100.0, 250.0, 1000.0],
    "fluid_volume": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
}


@dataclass
class Histogram:
    edges: list
    counts: list
    overflow: int = 0  # values outside the declared edges

    @classmethod
    def build(cls, values, edges) -> "Histogram":
        edges = [float(e) for e in edges]
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("histogram edges must be strictly increasing")
        v = np.asarray([x for x in values if x is not None], dtype=float)
        inside = (v >= edges[0]) & (v <= edges[-1])
        counts, _ = np.histogram(v[inside], bins=edges)
        return cls(edges, [int(c) for c in counts], int((~inside).sum()))

    @property
    def total(self) -> int:
        return sum(self.counts) + self.overflow


@dataclass
class EpisodeMetrics:
    index: int
    seed: int
    n_steps: int
    wind_frac: float
    final_distance: float
    max_deviation: float
    deviation: list
    path_length: float
    straight_distance: float
    excess_path: float | None
    fluid_volume: float

    @classmethod
    def from_trajectory(cls, index: int, seed: int, traj: tr.Trajectory, wind_frac: float = 0.0):
        dev = deviation_series(traj.positions, traj.goals)
        dev_mean = dev if dev.ndim == 1 else dev.mean(axis=1)
        p0 = traj.positions[:, 0]
        path, direct = path_lengths(p0)
        return cls(index, seed, traj.n_steps, float(wind_frac), final_distance(traj.positions, traj.goals),
                   float(dev_mean.max()), [float(x) for x in dev_mean], path, direct, straightness(p0),
                   fluid_volume(traj.controls))


def _stats(values) -> dict:
    v = [x for x in values if x is not None]
    if not v:
        return {"count": 0, "median": None, "mean": None, "min": None, "max": None}
    a = np.asarray(v, dtype=float)
    return {"count": len(v), "median": float(np.median(a)), "mean": float(a.mean()),
            "min": float(a.min()), "max": float(a.max())}


@dataclass
class EvalReport:
    task: str
    seed: int
    n_steps: int
    fingerprint: str
    episodes: list = field(default_factory=list)
    bins: dict = field(default_factory=lambda: dict(DEFAULT_BINS))
    threads: int = 1

    def _values(self, key):
        return [getattr(e, key) for e in self.episodes]

    @property
    def aggregates(self) -> dict:
        return {k: _stats(self._values(k))
                for k in ("final_distance", "max_deviation", "excess_path", "fluid_volume")}

    @property
    def histograms(self) -> dict:
        return {k: Histogram.build(self._values(k), edges) for k, edges in sorted(self.bins.items())}

    def median(self, key: str):
        return self.aggregates[key]["median"]

    def mean(self, key: str):
        return self.aggregates[key]["mean"]

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "seed": self.seed,
            "n_steps": self.n_steps,
            "fingerprint": self.fingerprint,
            "threads": self.threads,
            "n_episodes": len(self.episodes),
            "aggregates": self.aggregates,
            "histograms": {k: asdict(h) for k, h in self.histograms.items()},
            "episodes": [asdict(e) for e in sorted(self.episodes, key=lambda e: e.index)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


# --------------------------------------------------------------------------
# running


def controller_bodies(params: dict) -> int:
    cin = np.shape(params["conv0.w"])[1]
    hidden = np.shape(params["head_h.w"])[0]
    return (cin - hidden) // ctl.CHANNELS_PER_BODY


def eval_episode(setup: Setup, task: str, seed: int, index: int, n_steps: int,
                 wind_max: float = 0.0) -> tr.Episode:
    """Episode ``index`` of an evaluation run; shared by batch eval and single simulations."""
    ec = tr.EpisodeConfig(task=task, n_min=n_steps, n_max=n_steps, window=n_steps, wind_max=wind_max)
    return tr.sample_episode(setup, ec, np.random.default_rng([seed, 1, index]), n_steps=n_steps)


def perfect_hold_forces(setup: Setup):
    """Force stub that cancels gravity exactly; bypasses the fluid."""

    def force_fn(k, centers, velocities):
        f = -setup.mass * setup.fluid.gravity(setup.ndim)
        return [f.copy() for _ in centers]

    return force_fn


def run_episode(setup: Setup, ep: tr.Episode, params: dict | None, force_fn=None) -> tr.Trajectory:
    if params is None:
        policy = tr.ZeroPolicy(setup.layout.count)
        res = tr.rollout(setup, ep, policy=policy, mode="eval", force_fn=force_fn)
    else:
        res = tr.rollout(setup, ep, params=params, mode="eval", force_fn=force_fn)
    return res.trajectory


def run_task(setup: Setup, task: str, params: dict | None, episodes: int, seed: int,
             n_steps: int = 200, wind_max: float = 0.0, threads: int = 1, fingerprint: str = "",
             bins: dict | None = None, force_fn=None, keep_trajectories: bool = False):
    """Evaluate a controller (or the zero-control stub when ``params`` is None).

    Returns ``(report, trajectories)``; trajectories are only kept on request.
    """
    if task not in tr.TASKS:
        raise ValueError(f"unknown task {task!r}")
    need = 2 if task == "two-object" else 1
    if params is not None and controller_bodies(params) != need:
        raise TaskMismatch(f"controller handles {controller_bodies(params)} bodies, task {task!r} needs {need}")
    if setup.controller.n_bodies != need:
        setup = _with_bodies(setup, need)
    if episodes < 0:
        raise ValueError("episodes must be >= 0")

    def one(i):
        ep = eval_episode(setup, task, seed, i, n_steps, wind_max)
        traj = run_episode(setup, ep, params, force_fn)
        return EpisodeMetrics.from_trajectory(i, seed, traj, ep.wind_frac), (ep, traj)

    if threads > 1 and episodes > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(episodes)))  # keeps index order
    else:
        results = [one(i) for i in range(episodes)]
    report = EvalReport(task, seed, n_steps, fingerprint, [m for m, _ in results],
                        dict(bins or DEFAULT_BINS), threads)
    trajs = [t for _, t in results] if keep_trajectories else []
    return report, trajs


def _with_bodies(setup: Setup, n: int) -> Setup:
    return replace(setup, controller=replace(setup.controller, n_bodies=n))


# --------------------------------------------------------------------------
# trajectory files


def _num(x):
    return [float(v) for v in np.ravel(x)]


def trajectory_lines(traj: tr.Trajectory, header: dict) -> list[str]:
    head = dict(header)
    head.update({"kind": "header", "n_steps": traj.n_steps, "dt": traj.dt,
                 "goals": np.asarray(traj.goals).tolist(), "wind": _num(traj.wind)})
    lines = [json.dumps(head, sort_keys=True)]
    for k in range(traj.n_steps + 1):
        rec = {"k": k, "x": np.asarray(traj.positions[k]).tolist(), "v": np.asarray(traj.velocities[k]).tolist()}
        if k < traj.n_steps:
            rec["u"] = _num(traj.controls[k])
            rec["f"] = np.asarray(traj.forces[k]).tolist()
        lines.append(json.dumps(rec, sort_keys=True))
    return lines


def write_trajectory(path, traj: tr.Trajectory, header: dict) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(trajectory_lines(traj, header)) + "\n")


def read_trajectory(path) -> tuple[dict, tr.Trajectory]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows or rows[0].get("kind") != "header":
        raise ValueError(f"{path}: missing trajectory header")
    head, recs = rows[0], rows[1:]
    n = head["n_steps"]
    if len(recs) != n + 1:
        raise ValueError(f"{path}: expected {n + 1} records, found {len(recs)}")
    pos = np.array([r["x"] for r in recs])
    vel = np.array([r["v"] for r in recs])
    u = np.array([r["u"] for r in recs[:-1]]).reshape(n, -1)
    f = np.array([r["f"] for r in recs[:-1]]).reshape((n,) + pos.shape[1:])
    traj = tr.Trajectory(pos, vel, u, f, np.array(head["goals"]), np.array(head["wind"]), head["dt"])
    return head, traj


def write_report(path, report: EvalReport) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_json())
