import numpy as np
import pytest

from fluidctl import autodiff as ad
from fluidctl import controller as ctl
from fluidctl import trainer as tr
from fluidctl.world import Setup

SETUP = Setup.build()


def params0(seed=0, setup=SETUP):
    return ctl.init_params(setup.controller, setup.ndim - 1, np.random.default_rng([seed, 7919]))


# -- loss --------------------------------------------------------------------


def test_loss_single_step_example():
    total, terms = tr.episode_loss([np.array([[3.0, 0.0, 0.0]])], [np.zeros(64)], np.zeros(3), 1.0, 0.001)
    assert total == pytest.approx(18.0, abs=1e-12)
    assert terms == {"terminal": 9.0, "path": 9.0, "energy": 0.0}


def test_loss_two_step_example():
    g = np.array([1.0, 2.0, 3.0])
    pos = [np.array([g + [5.0, 0, 0]]), np.array([g])]
    ctrls = [np.full(64, 0.1), np.zeros(64)]
    total, _ = tr.episode_loss(pos, ctrls, g, 0.5, 0.001)
    assert abs(total - 12.50064) <= 1e-12


def test_loss_zero_at_goal_without_controls():
    g = np.array([4.0, 20.0])
    total, _ = tr.episode_loss([np.array([g])] * 5, [np.zeros(8)] * 5, g, 0.2, 0.001)
    assert total == 0.0


def test_loss_sums_bodies_against_own_goals():
    goals = np.array([[0.0, 0.0], [10.0, 0.0]])
    pos = [np.array([[1.0, 0.0], [10.0, 2.0]])]
    total, terms = tr.episode_loss(pos, [np.zeros(8)], goals, 0.0, 0.0)
    assert total == 5.0 and terms["terminal"] == 5.0


def test_loss_terms_sum_to_total(rng):
    pos = [rng.normal(size=(2, 3)) for _ in range(7)]
    ctrls = [rng.uniform(size=64) for _ in range(7)]
    total, t = tr.episode_loss(pos, ctrls, rng.normal(size=(2, 3)), 1 / 7, 0.02)
    assert abs(t["terminal"] + t["path"] + t["energy"] - total) <= 1e-12 * abs(total)


def test_empty_trajectory_rejected():
    with pytest.raises(ValueError):
        tr.episode_loss([], [], np.zeros(2), 1.0, 0.0)


# -- episodes ----------------------------------------------------------------


def test_episode_sampling_per_task():
    rng = np.random.default_rng(0)
    r, L = SETUP.radius, SETUP.table_width
    for _ in range(20):
        ep = tr.sample_episode(SETUP, tr.EpisodeConfig("hold", 40, 90, 40), rng)
        assert 40 <= ep.n_steps <= 90 and ep.alpha == 1.0 / ep.n_steps
        np.testing.assert_array_equal(ep.centers, ep.goals)
        assert ep.goals[0, -1] == 2 * r and 0.1 * L <= ep.goals[0, 0] <= 0.9 * L
        ep = tr.sample_episode(SETUP, tr.EpisodeConfig("move", wind_max=0.2), rng)
        assert ep.centers[0, -1] == r and ep.goals[0, -1] == 2 * r
        assert 0.1 * L <= ep.goals[0, 0] <= 0.9 * L and 0.0 <= ep.wind_frac <= 0.2
        assert np.all(ep.velocities == 0)
    ep = tr.sample_episode(SETUP, tr.EpisodeConfig("two-object"), rng)
    assert ep.centers.shape == (2, 2)
    np.testing.assert_allclose(ep.goals[:, 0], [-0.1 * L, 1.1 * L])


def test_wind_magnitude():
    ep = tr.sample_episode(SETUP, tr.EpisodeConfig("move", wind_max=0.2), np.random.default_rng(5))
    expect = ep.wind_frac * SETUP.layout.u_max / SETUP.fluid.dt * SETUP.wind_kappa
    assert np.linalg.norm(ep.wind) == pytest.approx(expect)
    assert ep.wind[-1] == 0.0


@pytest.mark.parametrize("kw", [{"task": "fly"}, {"n_min": 0}, {"n_min": 5, "n_max": 4}, {"window": 0},
                                {"wind_max": 0.3}])
def test_episode_config_validation(kw):
    with pytest.raises(ValueError):
        tr.EpisodeConfig(**kw)


@pytest.mark.parametrize("kw", [{"learning_rate": 1e-2}, {"learning_rate": 1e-5}, {"beta": -1.0},
                                {"iterations": -1}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        tr.TrainConfig(**kw)


# -- rollout and truncation --------------------------------------------------


def _grads(ep, window, params, start=None):
    tape = ad.Tape()
    handles = {k: tape.param(k, np.asarray(v, np.float64)) for k, v in params.items()}
    res = tr.rollout(SETUP, ep, params=handles, tape=tape, record_from=ep.n_steps - window, start=start)
    return res, tape.backward(res.loss)


def _rel(a, b):
    num = max(float(np.max(np.abs(a[k] - b[k]))) for k in a)
    den = max(float(np.max(np.abs(a[k]))) for k in a)
    return num / den


def test_full_window_equals_full_recording():
    ep = tr.sample_episode(SETUP, tr.EpisodeConfig("move"), np.random.default_rng(1), n_steps=8)
    p = params0()
    a, ga = _grads(ep, 8, p)
    b, gb = _grads(ep, 50, p)  # window longer than the episode clamps to full recording
    assert a.recorded_steps == b.recorded_steps == 8
    assert _rel(ga, gb) == 0.0


def test_truncated_gradient_equals_restart_from_frontier():
    ep = tr.sample_episode(SETUP, tr.EpisodeConfig("move"), np.random.default_rng(2), n_steps=14)
    p = params0()
    a, ga = _grads(ep, 9, p)
    assert a.recorded_steps == 9 and a.frontier_state.step == 5
    b, gb = _grads(ep, 9, p, start=a.frontier_state)
    assert b.recorded_steps == 9
    assert _rel(ga, gb) <= 1e-10


def test_rollout_is_deterministic():
    ep = tr.sample_episode(SETUP, tr.EpisodeConfig("move"), np.random.default_rng(3), n_steps=10)
    p = params0()
    a = tr.rollout(SETUP, ep, params=p)
    b = tr.rollout(SETUP, ep, params=p)
    assert np.array_equal(a.trajectory.positions, b.trajectory.positions)
    assert np.array_equal(a.trajectory.controls, b.trajectory.controls)
    assert a.trajectory.positions.shape == (11, 1, 2) and a.trajectory.controls.shape == (10, 8)


def test_rollout_without_tape_records_nothing():
    ep = tr.sample_episode(SETUP, tr.EpisodeConfig("hold"), np.random.default_rng(4), n_steps=5)
    res = tr.rollout(SETUP, ep, params=params0())
    assert res.recorded_steps == 0 and not isinstance(res.loss, ad.Var)
    with pytest.raises(ValueError):
        tr.rollout(SETUP, ep)


def test_recorded_steps_never_exceed_window():
    ec = tr.EpisodeConfig("hold", 6, 12, 4)
    for it in range(3):
        ep = tr.sample_episode(SETUP, ec, np.random.default_rng([0, 0, it]))
        res, _ = tr.loss_and_grad(SETUP, params0(), ep, ec, 0.001)
        assert res.recorded_steps <= ec.window


def test_zero_policy_body_settles_on_the_table():
    ec = tr.EpisodeConfig("move")
    ep = tr.sample_episode(SETUP, ec, np.random.default_rng(0), n_steps=200)
    ep.centers[0, -1] = 2 * SETUP.radius
    res = tr.rollout(SETUP, ep, policy=tr.ZeroPolicy(SETUP.layout.count))
    z = res.trajectory.positions[:, 0, -1]
    assert z.min() >= SETUP.radius - 1e-6
    assert z[-1] == pytest.approx(SETUP.radius, abs=0.1)


# -- optimiser and training --------------------------------------------------


def test_adam_first_step():
    p = {"w": np.array([0.5])}
    new, st = tr.adam_step(p, {"w": np.array([1.0])}, tr.AdamState.zeros_like(p), 1e-4)
    assert p["w"][0] - new["w"][0] == pytest.approx(1e-4 / (1 + 1e-8), rel=1e-9)
    assert st.t == 1


def test_adam_stores_requested_dtype():
    p = {"w": np.ones(3, np.float32)}
    new, st = tr.adam_step(p, {"w": np.ones(3)}, tr.AdamState.zeros_like(p), 1e-3, dtype=np.float32)
    assert new["w"].dtype == np.float32 and st.m["w"].dtype == np.float32


def test_zero_iterations_returns_initial_params():
    p = params0()
    st = tr.train(SETUP, tr.TrainConfig(iterations=0), tr.EpisodeConfig(), params=p)
    assert st.iteration == 0 and not st.history
    for k in p:
        np.testing.assert_array_equal(st.params[k], p[k].astype(np.float32))


def test_short_training_is_deterministic():
    tc = tr.TrainConfig(iterations=2, learning_rate=1e-3, grad_gate=False)
    ec = tr.EpisodeConfig("hold", 5, 8, 4)
    a = tr.train(SETUP, tc, ec, seed=11)
    b = tr.train(SETUP, tc, ec, seed=11)
    assert [r.loss for r in a.history] == [r.loss for r in b.history]
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert all(v.dtype == np.float32 for v in a.params.values())


def test_finetune_for_zero_iterations_is_identity():
    tc = tr.TrainConfig(iterations=1, learning_rate=1e-3, grad_gate=False)
    ec = tr.EpisodeConfig("hold", 5, 6, 4)
    st = tr.train(SETUP, tc, ec)
    ft = tr.finetune_energy(SETUP, st, tc, ec, 0, beta=0.0)
    assert ft.iteration == st.iteration and ft.opt.t == st.opt.t
    for k in st.params:
        assert np.array_equal(ft.params[k], st.params[k])


def test_non_finite_iterations_are_skipped_then_abort(monkeypatch):
    calls = []

    def broken(*a, **k):
        calls.append(1)
        raise tr.SimulationDiverged(3)

    monkeypatch.setattr(tr, "loss_and_grad", broken)
    tc = tr.TrainConfig(iterations=40, learning_rate=1e-3, grad_gate=False)
    with pytest.raises(tr.TrainingDiverged):
        tr.train(SETUP, tc, tr.EpisodeConfig("hold", 5, 6, 4))
    assert len(calls) == 3  # 2 skips allowed (5% of 40), the third aborts


def test_single_skip_keeps_training(monkeypatch):
    real = tr.loss_and_grad
    state = {"n": 0}

    def flaky(*a, **k):
        state["n"] += 1
        if state["n"] == 1:
            raise FloatingPointError("boom")
        return real(*a, **k)

    monkeypatch.setattr(tr, "loss_and_grad", flaky)
    st = tr.train(SETUP, tr.TrainConfig(iterations=2, learning_rate=1e-3, grad_gate=False),
                  tr.EpisodeConfig("hold", 5, 6, 4))
    assert st.skipped == 1 and st.history[0].skipped and not st.history[1].skipped
    assert st.opt.t == 1


def test_failing_gradient_gate_aborts_training(monkeypatch):
    monkeypatch.setattr(tr, "gradient_errors", lambda *a, **k: {"controls": 0.5})
    with pytest.raises(tr.GradientGateError):
        tr.train(SETUP, tr.TrainConfig(iterations=1, learning_rate=1e-3), tr.EpisodeConfig())


def test_gradient_gate_passes_on_default_setup():
    errs = tr.gradient_gate(SETUP, params0(), steps=2, coords=2)
    assert set(errs) == {"controls", "params", "params_joint"}
    assert max(errs.values()) <= 1e-3
