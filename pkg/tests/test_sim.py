import json

import numpy as np
import pytest

from rise_flock.config import bundled_scenario
from rise_flock.controller import BatchedLocalController, ControllerGains
from rise_flock.dynamics import LinearModel
from rise_flock.errors import DivergenceError, ValidationError
from rise_flock.graph import GraphTopology
from rise_flock.sim import (
    ClosedLoop,
    MeasurementNoise,
    StateBundle,
    TrajectoryLog,
    aggregate,
    build_model,
    compute_metrics,
    initial_state,
    rk4_step,
    run_scenario,
    seed_sweep,
    seed_streams,
    simulate,
    step,
)

SHORT = ["sim.t_end=1.0", "sim.log_stride=1"]


def custom_model_override(**params):
    return "model=" + json.dumps({"name": "custom", "c": None, "bounds": None, "params": params})


def test_rk4_exact_on_uniform_motion():
    y = rk4_step(lambda t, y: np.array([y[1], 0.0]), 0.0, np.array([1.0, 2.0]), 0.25)
    assert np.array_equal(y, [1.5, 2.0])


def test_rk4_one_step_harmonic_oscillator():
    for dt in (0.1, 0.05):
        y = rk4_step(lambda t, y: np.array([y[1], -y[0]]), 0.0, np.array([1.0, 0.0]), dt)
        err = np.abs(y - [np.cos(dt), -np.sin(dt)]).max()
        # local error of a fourth-order step is dt^5 / 120 for this system
        assert err <= dt**5 / 100
        assert err >= dt**5 / 200


def test_drift_free_target_moves_linearly():
    config = bundled_scenario(SHORT + [custom_model_override()])
    log = simulate(config)
    v0 = np.array(config.target_v0)
    assert np.allclose(log.q0, log.t[:, None] * v0, rtol=0, atol=1e-12)
    assert np.array_equal(log.q0ddot, np.zeros_like(log.q0ddot))


def test_equilibrium_stays_at_target():
    A = [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -0.5]]
    config = bundled_scenario(["sim.t_end=2.0", "sim.noise_sigma=0", custom_model_override(f_pos=A, f0_pos=A)])
    N, n = 8, 3
    q0, v0 = np.array([1.0, -2.0, 0.5]), np.array(config.target_v0)
    start = StateBundle(q0=q0, q0dot=v0, q=np.tile(q0, (N, 1)), qdot=np.tile(v0, (N, 1)), nu_hat=np.zeros((N, n)))
    log = simulate(config, initial=start)
    assert log.e_norms().max() <= 1e-6
    assert np.abs(log.u).max() <= 1e-6


def test_runs_are_bit_identical():
    config = bundled_scenario(SHORT)
    a, b = simulate(config), simulate(config)
    for name in ("t", "q0", "q", "qdot", "u", "nu_hat", "r2"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_seed_changes_run():
    a = simulate(bundled_scenario(SHORT))
    b = simulate(bundled_scenario(SHORT + ["sim.seed=1"]))
    assert not np.array_equal(a.q[0], b.q[0])


def test_noise_enters_measurements_only():
    noisy = simulate(bundled_scenario(SHORT + ["sim.noise_sigma=0.5"]), zero_input=True)
    clean = simulate(bundled_scenario(SHORT + ["sim.noise_sigma=0"]), zero_input=True)
    for name in ("q0", "q0dot", "q", "qdot"):
        assert getattr(noisy, name).tobytes() == getattr(clean, name).tobytes()
    assert not np.array_equal(noisy.nu_hat, clean.nu_hat)
    assert not np.array_equal(noisy.eta, clean.eta)


def test_block_noise_equals_stepwise_draws():
    topo = GraphTopology.cycle(5, [1, 0, 0, 1, 0], n=3)
    ctrl = BatchedLocalController(topo, ControllerGains(10, 10, 25, 50, lambda_P=0.5))
    seq = seed_streams(7)[2]
    blocked = MeasurementNoise(seq, ctrl, 3, 0.01)
    single = MeasurementNoise(seed_streams(7)[2], ctrl, 3, 0.01, block=1)
    for k in range(2100):
        assert np.array_equal(blocked.draw(k), single.draw(k))
    assert blocked.draw(2099).shape == (2, ctrl.n_channels, 3)


def test_noise_streams_independent_per_agent():
    # pinning a different agent must not change the neighbour-channel noise of others
    gains = ControllerGains(10, 10, 25, 50, lambda_P=0.5)
    a = BatchedLocalController(GraphTopology.cycle(4, [1, 0, 0, 0], n=3), gains)
    b = BatchedLocalController(GraphTopology.cycle(4, [1, 0, 1, 0], n=3), gains)
    na = MeasurementNoise(seed_streams(3)[2], a, 3, 1.0).draw(0)
    nb = MeasurementNoise(seed_streams(3)[2], b, 3, 1.0).draw(0)
    assert np.array_equal(na[:, : a.n_neighbor], nb[:, : b.n_neighbor])
    assert np.array_equal(na[:, a.n_neighbor], nb[:, b.n_neighbor])


def test_public_step_matches_simulation():
    config = bundled_scenario(["sim.t_end=0.01", "sim.log_stride=1", "sim.noise_sigma=0"])
    log = simulate(config)
    model = build_model(config)
    loop = ClosedLoop(model, config.topology, config.gains)
    b = initial_state(config)
    for k in range(10):
        b = step(b, k * config.dt, config.dt, loop)
    assert np.array_equal(b.q, log.q[-1])
    assert np.array_equal(b.nu_hat, log.nu_hat[-1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_agent_and_keeps_partial_log():
    f_pos = np.zeros((8, 3, 3))
    f_pos[4] = 1e6 * np.eye(3)
    config = bundled_scenario(["sim.t_end=3.0", "sim.log_stride=1", custom_model_override(f_pos=f_pos.tolist())])
    with pytest.raises(DivergenceError) as info:
        simulate(config)
    assert info.value.agent == 5
    assert "agent 5" in str(info.value)
    partial = info.value.partial_log
    assert partial is not None and 0 < len(partial) < 3001
    assert np.all(np.isfinite(partial.q[:-1]))


def test_mismatched_model_rejected():
    topo = GraphTopology.cycle(4, [1, 0, 0, 0], n=3)
    with pytest.raises(ValidationError):
        ClosedLoop(LinearModel(3, 3), topo, ControllerGains(10, 10, 25, 50, lambda_P=0.5))


def test_step_size_convergence_noise_free():
    # relative agreement holds while ||e|| is above the sign-chattering floor
    finals = []
    for dt in (1e-3, 5e-4):
        config = bundled_scenario(["sim.t_end=0.5", "sim.noise_sigma=0", f"sim.dt={dt}", "sim.log_stride=50"])
        finals.append(np.linalg.norm(simulate(config).e[-1]))
    assert abs(finals[0] - finals[1]) < 1e-4 * finals[1]


def test_residual_error_floor_shrinks_with_step():
    finals = []
    for dt in (1e-3, 5e-4):
        config = bundled_scenario(["sim.t_end=3.0", "sim.noise_sigma=0", f"sim.dt={dt}", "sim.log_stride=100"])
        finals.append(np.linalg.norm(simulate(config).e[-1]))
    assert max(finals) < 1e-5
    assert finals[1] < finals[0]


def fake_log(t, e_norm, u=None):
    T, N = e_norm.shape
    q = np.zeros((T, N, 3))
    q[..., 0] = -e_norm
    z = np.zeros((T, N, 3))
    return TrajectoryLog(
        t=t, q0=np.zeros((T, 3)), q0dot=np.zeros((T, 3)), q0ddot=np.zeros((T, 3)), q=q, qdot=z, qddot=z,
        u=z if u is None else u, nu_hat=z, eta=z, eta_dot=z, e=q.reshape(T, -1), r1=z.reshape(T, -1),
        r2=z.reshape(T, -1), dt=float(t[1] - t[0]), log_stride=1,
    )


def test_metrics_zero_error():
    t = np.linspace(0, 3, 301)
    m = compute_metrics(fake_log(t, np.zeros((301, 4))))
    assert m.cumulative_rms_e == 0.0
    assert m.convergence_time_005 == 0.0
    assert m.max_u_norm == 0.0


def test_metrics_constant_error():
    t = np.linspace(0, 3, 301)
    m = compute_metrics(fake_log(t, np.full((301, 4), 0.3)))
    assert m.cumulative_rms_e == pytest.approx(0.3, rel=1e-15)
    assert m.convergence_time_005 is None


def test_metrics_convergence_is_stays_below_forever():
    t = np.linspace(0, 3, 301)
    e = np.full((301, 2), 0.01)
    e[50, 1] = 0.2  # an excursion resets the clock
    e[:10] = 1.0
    m = compute_metrics(fake_log(t, e))
    assert m.convergence_time_005 == pytest.approx(t[51])


def test_metrics_window_validation():
    t = np.linspace(0, 3, 301)
    log = fake_log(t, np.zeros((301, 2)))
    with pytest.raises(ValidationError):
        compute_metrics(log, window=(0.0, 5.0))
    with pytest.raises(ValidationError):
        compute_metrics(log, window=(2.0, 1.0))


def test_single_seed_sweep_equals_the_run():
    config = bundled_scenario(["sim.t_end=0.5"])
    res = seed_sweep(config, [4], workers=1)
    _, metrics = run_scenario(config.with_seed(4))
    assert res["runs"][0]["metrics"] == metrics.to_dict()
    agg = res["aggregate"]
    assert agg["median_rms"] == agg["min_rms"] == agg["max_rms"] == metrics.cumulative_rms_e
    assert agg["n_runs"] == 1 and agg["n_diverged"] == 0


def test_parallel_sweep_matches_serial():
    config = bundled_scenario(["sim.t_end=0.3"])
    assert seed_sweep(config, [0, 1, 2], workers=1) == seed_sweep(config, [0, 1, 2], workers=3)


def test_aggregate_counts_diverged_as_not_converged():
    runs = [
        {"seed": 0, "metrics": {"cumulative_rms_e": 1.0, "convergence_time_005": 1.0}, "error": None},
        {"seed": 1, "metrics": {"cumulative_rms_e": 2.0, "convergence_time_005": 4.0}, "error": None},
        {"seed": 2, "metrics": None, "error": "diverged"},
    ]
    agg = aggregate(runs)
    assert agg["fraction_converged"] == pytest.approx(1 / 3)
    assert agg["n_diverged"] == 1
    assert agg["median_rms"] == 1.5


def test_bad_worker_env(monkeypatch):
    monkeypatch.setenv("RISE_FLOCK_THREADS", "many")
    with pytest.raises(ValidationError):
        seed_sweep(bundled_scenario(["sim.t_end=0.01"]), [0])
