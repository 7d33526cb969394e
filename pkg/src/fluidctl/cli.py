"""Command-line entry point: train, eval, gradcheck, simulate.

Exit codes: 0 success, 2 bad configuration or parameter, 3 gradient check
failure, 4 divergence or non-finite values, 5 checkpoint/task mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ck
from . import evaluation as ev
from . import trainer as tr
from .config import Config, ConfigError
from .fluid import ProjectionError

EXIT_OK, EXIT_CONFIG, EXIT_GRAD, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4, 5
ZERO_CONTROLLER = "zero-controller"

log = logging.getLogger("fluidctl")


class UsageError(ValueError):
    pass


def _threads(value) -> int:
    n = int(value)
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    if getattr(args, "override", None):
        cfg = cfg.with_overrides(args.override)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _checkpoint_config(args, header) -> Config:
    """Config stored in a checkpoint, with command-line overrides applied."""
    cfg = Config.from_dict(header["config"])
    if args.override:
        cfg = cfg.with_overrides(args.override)
    return cfg


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    setup, tc, ec = cfg.setup(), cfg.train_config(), cfg.episode_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fp = cfg.fingerprint()
    state = None
    if args.checkpoint:
        _, state = ck.load(args.checkpoint, fp, args.allow_mismatch)
    log_path = out / "loss.jsonl"

    def on_iteration(rec):
        with open(log_path, "a") as fh:
            fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")

    def on_checkpoint(st):
        ck.save(out / f"checkpoint_{st.iteration:06d}.ckpt", st, fp, cfg.to_dict(), cfg.seed)

    state = tr.train(setup, tc, ec, state=state, seed=cfg.seed, on_iteration=on_iteration,
                     on_checkpoint=on_checkpoint)
    ck.save(out / "checkpoint.ckpt", state, fp, cfg.to_dict(), cfg.seed)
    print(f"trained to iteration {state.iteration}; checkpoint {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def _controller(args):
    """Returns ``(config, params or None)`` for a checkpoint path or the zero stub."""
    if args.checkpoint in (None, ZERO_CONTROLLER):
        return _load_config(args), None
    header, state = ck.load(args.checkpoint)
    cfg = _checkpoint_config(args, header)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg, state.params


def _header(fp: str, task: str, seed: int, index: int, threads: int) -> dict:
    return {"fingerprint": fp, "seed": seed, "task": task, "episode": index, "threads": threads}


def cmd_eval(args) -> int:
    cfg, params = _controller(args)
    task = args.task or cfg.eval.task
    episodes = cfg.eval.episodes if args.episodes is None else args.episodes
    n_steps = args.steps or cfg.eval.n_steps
    if episodes < 0:
        raise UsageError("--episodes must be >= 0")
    setup = cfg.setup()
    fp = cfg.fingerprint()
    report, trajs = ev.run_task(setup, task, params, episodes, cfg.seed, n_steps, cfg.eval.wind_max,
                                args.threads, fp, cfg.eval.bins, keep_trajectories=True)
    out = Path(args.out)
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    for ep_metrics, (_, traj) in zip(report.episodes, trajs):
        i = ep_metrics.index
        ev.write_trajectory(out / "trajectories" / f"episode_{i:04d}.jsonl", traj,
                            _header(fp, task, cfg.seed, i, args.threads))
    ev.write_report(out / "report.json", report)
    agg = report.aggregates
    print(f"{task}: {episodes} episodes, median final distance {agg['final_distance']['median']}, "
          f"mean fluid volume {agg['fluid_volume']['mean']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if not args.epsilon > 0:
        raise UsageError("--epsilon must be > 0")
    if not 1 <= args.steps <= 10:
        raise UsageError("--steps must lie in [1, 10]")
    cfg = _load_config(args)
    setup = cfg.setup()
    params = tr.ctl.init_params(setup.controller, setup.ndim - 1, np.random.default_rng([cfg.seed, 7919]))
    which = ("controls",) if args.controls_only else ("controls", "params")
    errs = tr.gradient_errors(setup, params, args.steps, args.epsilon, args.coords, cfg.seed, which)
    ok = True
    for k, v in errs.items():
        print(f"{k}: max relative error {v:.3e}")
        ok = ok and v <= args.tolerance
    print("gradient check", "passed" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_GRAD


def cmd_simulate(args) -> int:
    cfg, params = _controller(args)
    task = args.task or cfg.eval.task
    n_steps = args.steps or cfg.eval.n_steps
    setup = cfg.setup()
    need = 2 if task == "two-object" else 1
    if params is not None and ev.controller_bodies(params) != need:
        raise ev.TaskMismatch(f"controller handles {ev.controller_bodies(params)} bodies, task needs {need}")
    if setup.controller.n_bodies != need:
        setup = replace(setup, controller=replace(setup.controller, n_bodies=need))
    ep = ev.eval_episode(setup, task, cfg.seed, args.episode, n_steps, cfg.eval.wind_max)
    traj = ev.run_episode(setup, ep, params)
    fp = cfg.fingerprint()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ev.write_trajectory(out, traj, _header(fp, task, cfg.seed, args.episode, args.threads))
    print(f"wrote {n_steps} steps to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    env_threads = os.environ.get("FLUIDCTL_THREADS", "1")
    p = argparse.ArgumentParser(prog="fluidctl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="JSON config file (defaults apply otherwise)")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a config value, e.g. train.iterations=10")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=int(env_threads))
        if checkpoint:
            sp.add_argument("--checkpoint", default=None)

    t = sub.add_parser("train", help="train a controller")
    common(t, checkpoint=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--allow-mismatch", action="store_true",
                   help="resume even if the checkpoint config fingerprint differs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a task")
    common(e, checkpoint=True)
    e.add_argument("--task", choices=tr.TASKS, default=None)
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--steps", type=int, default=None, help="episode length")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of rollout gradients")
    common(g)
    g.add_argument("--steps", type=int, default=5)
    g.add_argument("--epsilon", type=float, default=1e-4)
    g.add_argument("--coords", type=int, default=4, help="sampled entries per parameter tensor")
    g.add_argument("--tolerance", type=float, default=1e-3)
    g.add_argument("--controls-only", action="store_true")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("simulate", help="run one episode and write its trajectory")
    common(s, checkpoint=True)
    s.add_argument("--task", choices=tr.TASKS, default=None)
    s.add_argument("--episode", type=int, default=0, help="episode index within the seed")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--out", required=True, help="trajectory file")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads(args.threads)
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except tr.GradientGateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GRAD
    except (tr.TrainingDiverged, tr.SimulationDiverged, ad.NonFiniteError, ProjectionError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ck.CheckpointError, ev.TaskMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except ValueError as exc:
        print(f"error: invalid parameter: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
