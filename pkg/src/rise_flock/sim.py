"""Fixed-step closed-loop simulation of target, agents and RISE controllers.

Randomness
----------
Every run derives all of its random numbers from ``SeedSequence(seed)`` with
Philox (counter-based) bit generators.  The root sequence spawns three
children, in order: initial positions, model parameters, measurement noise
(a fourth child, index 3, feeds the optional box-sampling estimate of the
disturbance bounds).
The noise child spawns one sequence per agent, and each of those spawns
four channel streams: neighbour positions, neighbour velocities, target
position, target velocity.  Streams never share state, so adding an agent or
channel does not perturb the others.

Noise is drawn once per RK4 step and held over the four stages.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from rise_flock.analysis import ensemble_errors
from rise_flock.controller import BatchedLocalController
from rise_flock.dynamics import model_from_config
from rise_flock.errors import DivergenceError, ValidationError

NOISE_BLOCK = 1024


def make_rng(seq):
    return np.random.Generator(np.random.Philox(seq))


def seed_streams(seed):
    """Root sequence children: (init, model, noise)."""
    return np.random.SeedSequence(int(seed)).spawn(3)


class MeasurementNoise:
    """Per-agent, per-channel Gaussian measurement noise, drawn in blocks.

    ``draw(k)`` returns an array shaped like the controller channels,
    ``(2, C, n)``: position noise then velocity noise.
    """

    def __init__(self, seq, controller, n, sigma, block=NOISE_BLOCK):
        self.sigma = float(sigma)
        self.n = n
        self.block = block
        self._start = None
        self._cache = None
        C = controller.n_channels
        self._zeros = np.zeros((2, C, n))
        N = controller.topo.N
        n_nb = controller.n_neighbor
        self._slots = []
        for i in range(N):
            nb = np.flatnonzero(controller.src == i)
            tg = n_nb + np.flatnonzero(controller.pinned == i)
            self._slots.append((nb, tg))
        if self.sigma > 0:
            self.gens = [[make_rng(s) for s in agent.spawn(4)] for agent in seq.spawn(N)]

    def _refill(self, start):
        B, n, sig = self.block, self.n, self.sigma
        cache = np.empty((B,) + self._zeros.shape)
        for (nb, tg), (g_rp, g_rv, g_tp, g_tv) in zip(self._slots, self.gens):
            cache[:, 0, nb] = g_rp.normal(0.0, sig, size=(B, len(nb), n))
            cache[:, 1, nb] = g_rv.normal(0.0, sig, size=(B, len(nb), n))
            if len(tg):
                cache[:, 0, tg] = g_tp.normal(0.0, sig, size=(B, 1, n))
                cache[:, 1, tg] = g_tv.normal(0.0, sig, size=(B, 1, n))
        self._cache = cache
        self._start = start

    def draw(self, k):
        """Noise for step ``k``; steps must be requested in increasing order."""
        if self.sigma == 0:
            return self._zeros
        if self._start is None or k >= self._start + self.block:
            self._refill(k - k % self.block)
        return self._cache[k - self._start]


@dataclass
class StateBundle:
    q0: np.ndarray
    q0dot: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    nu_hat: np.ndarray

    def pack(self):
        return np.concatenate([self.q0, self.q0dot, self.q.ravel(), self.qdot.ravel(), self.nu_hat.ravel()])

    @classmethod
    def unpack(cls, y, N, n):
        Nn = N * n
        return cls(
            q0=y[:n].copy(),
            q0dot=y[n : 2 * n].copy(),
            q=y[2 * n : 2 * n + Nn].reshape(N, n).copy(),
            qdot=y[2 * n + Nn : 2 * n + 2 * Nn].reshape(N, n).copy(),
            nu_hat=y[2 * n + 2 * Nn :].reshape(N, n).copy(),
        )


def rk4_step(fun, t, y, h, k1=None):
    """One classical Runge-Kutta step; ``k1`` may be passed when already evaluated."""
    if k1 is None:
        k1 = fun(t, y)
    k2 = fun(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = fun(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = fun(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class ClosedLoop:
    """Stacked ODE of target, agents and ``nu_hat`` integrators.

    The state vector is ``[q0, q0dot, q (agent-major), qdot, nu_hat]``.
    """

    def __init__(self, model, topo, gains, zero_input=False):
        if model.N != topo.N or model.n != topo.n:
            raise ValidationError(
                f"model is for N={model.N}, n={model.n} but topology has N={topo.N}, n={topo.n}"
            )
        self.model = model
        self.topo = topo
        self.gains = gains
        self.ctrl = BatchedLocalController(topo, gains)
        self.N, self.n = topo.N, topo.n
        self.zero_input = zero_input
        n, Nn = self.n, self.N * self.n
        self._sl = (
            slice(0, n), slice(n, 2 * n), slice(2 * n, 2 * n + Nn),
            slice(2 * n + Nn, 2 * n + 2 * Nn), slice(2 * n + 2 * Nn, 2 * n + 3 * Nn),
        )

    def rhs(self, t, y, noise, extras=False):
        N, n = self.N, self.n
        s0, s1, s2, s3, s4 = self._sl
        q0, q0d = y[s0], y[s1]
        Q = y[s2].reshape(N, n)
        Qd = y[s3].reshape(N, n)
        nu = y[s4].reshape(N, n)
        ctrl, model = self.ctrl, self.model

        q0dd = model.f0(q0, q0d, t)
        X = np.empty((2, N + 1, n))
        X[0, 0], X[1, 0], X[0, 1:], X[1, 1:] = q0, q0d, Q, Qd
        R = ctrl.channels(X) + noise
        eta, eta_dot = ctrl.errors(R)
        drift, g, gp = model.stage_terms(Q, Qd, t)
        if self.zero_input:
            u = np.zeros((N, model.m))
            acc = drift
        elif model.diagonal_input:
            u = gp * ctrl.feedback(R, nu)
            acc = drift + g * u
        else:
            u = np.einsum("imn,in->im", gp, ctrl.feedback(R, nu))
            acc = drift + np.einsum("inm,im->in", g, u)
        nud = ctrl.nuhat_rate(eta, eta_dot)
        dy = np.concatenate([q0d, q0dd, Qd.ravel(), acc.ravel(), nud.ravel()])
        if extras:
            return dy, {"q0ddot": q0dd, "qddot": acc, "u": u, "eta": eta, "eta_dot": eta_dot}
        return dy

    def step(self, y, t, dt, noise, k1=None):
        return rk4_step(lambda tt, yy: self.rhs(tt, yy, noise), t, y, dt, k1=k1)


def step(bundle, t, dt, loop, noise=None):
    """Advance a :class:`StateBundle` by one RK4 step of the closed loop."""
    if noise is None:
        noise = np.zeros((2, loop.ctrl.n_channels, loop.n))
    y = loop.step(bundle.pack(), t, dt, noise)
    _check_finite(y, t + dt, loop.N, loop.n)
    return StateBundle.unpack(y, loop.N, loop.n)


def _check_finite(y, t, N, n, log=None):
    if np.all(np.isfinite(y)):
        return
    bad = ~np.isfinite(y)
    if bad[: 2 * n].any():
        raise DivergenceError(f"target state became non-finite at t={t:.6g}", agent=None, t=t, partial_log=log)
    per_agent = np.zeros(N, dtype=bool)
    Nn = N * n
    for start in (2 * n, 2 * n + Nn, 2 * n + 2 * Nn):
        per_agent |= bad[start : start + Nn].reshape(N, n).any(axis=1)
    agent = int(np.argmax(per_agent))
    raise DivergenceError(
        f"state of agent {agent + 1} became non-finite at t={t:.6g}", agent=agent + 1, t=t, partial_log=log
    )


@dataclass
class TrajectoryLog:
    """Samples on the uniform grid ``t_k = k * dt * log_stride``."""

    t: np.ndarray
    q0: np.ndarray
    q0dot: np.ndarray
    q0ddot: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray
    u: np.ndarray
    nu_hat: np.ndarray
    eta: np.ndarray
    eta_dot: np.ndarray
    e: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    dt: float
    log_stride: int
    gains: object = field(repr=False, default=None)
    model: object = field(repr=False, default=None)
    topology: object = field(repr=False, default=None)

    @property
    def h(self):
        return self.dt * self.log_stride

    @property
    def z(self):
        return np.concatenate([self.e, self.r1, self.r2], axis=-1)

    def __len__(self):
        return len(self.t)

    def e_norms(self):
        """``||e_i(t)||`` per sample and agent, shape (T, N)."""
        return np.linalg.norm(self.q0[:, None, :] - self.q, axis=-1)


@dataclass
class Metrics:
    cumulative_rms_e: float
    convergence_time_005: float | None
    max_u_norm: float
    final_e_norms: list
    rms_window: tuple
    threshold: float
    cumulative_rms_e_full: float = float("nan")

    def to_dict(self):
        return {
            "cumulative_rms_e": self.cumulative_rms_e,
            "cumulative_rms_e_full": self.cumulative_rms_e_full,
            "convergence_time_005": self.convergence_time_005,
            "max_u_norm": self.max_u_norm,
            "final_e_norms": list(self.final_e_norms),
            "rms_window": list(self.rms_window),
            "threshold": self.threshold,
        }


def compute_metrics(log, window=(0.0, 2.5), threshold=0.05):
    """Tracking metrics of a log.

    ``cumulative_rms_e`` averages ``||e_i||^2`` over agents and samples inside
    ``window``; ``convergence_time_005`` is the first sample time after which
    every ``||e_i||`` stays at or below ``threshold``.
    """
    if len(log) == 0:
        raise ValidationError("log has no samples")
    t = log.t
    lo, hi = window
    tol = 1e-9 * max(1.0, abs(t[-1]))
    if lo > hi or lo < t[0] - tol or hi > t[-1] + tol:
        raise ValidationError(f"window [{lo}, {hi}] lies outside the log range [{t[0]}, {t[-1]}]")
    norms = log.e_norms()
    inside = (t >= lo - tol) & (t <= hi + tol)
    rms = float(np.sqrt(np.mean(norms[inside] ** 2)))
    rms_full = float(np.sqrt(np.mean(norms**2)))
    worst = norms.max(axis=1)
    above = np.nonzero(worst > threshold)[0]
    if len(above) == 0:
        conv = float(t[0])
    elif above[-1] == len(t) - 1:
        conv = None
    else:
        conv = float(t[above[-1] + 1])
    u_norm = float(np.linalg.norm(log.u, axis=-1).max())
    return Metrics(
        cumulative_rms_e=rms,
        convergence_time_005=conv,
        max_u_norm=u_norm,
        final_e_norms=[float(x) for x in norms[-1]],
        rms_window=(float(lo), float(hi)),
        threshold=float(threshold),
        cumulative_rms_e_full=rms_full,
    )


def build_model(config):
    _, model_seq, _ = seed_streams(config.seed)
    return model_from_config(config.model, config.topology.N, config.topology.n, rng=make_rng(model_seq))


def initial_state(config):
    init_seq, _, _ = seed_streams(config.seed)
    topo = config.topology
    lo, hi = config.init_range
    q = make_rng(init_seq).uniform(lo, hi, size=(topo.N, topo.n))
    return StateBundle(
        q0=np.array(config.target_q0, dtype=float),
        q0dot=np.array(config.target_v0, dtype=float),
        q=q,
        qdot=np.zeros((topo.N, topo.n)),
        nu_hat=np.zeros((topo.N, topo.n)),
    )


def simulate(config, model=None, initial=None, zero_input=False):
    """Integrate the closed loop and return the :class:`TrajectoryLog`.

    ``model`` and ``initial`` default to the ones derived from the config
    seed.  Raises :class:`DivergenceError` (with the partial log) when the
    state turns non-finite.
    """
    topo, gains = config.topology, config.gains
    model = build_model(config) if model is None else model
    bundle = initial_state(config) if initial is None else initial
    loop = ClosedLoop(model, topo, gains, zero_input=zero_input)
    _, _, noise_seq = seed_streams(config.seed)
    noise = MeasurementNoise(noise_seq, loop.ctrl, topo.n, config.noise_sigma)

    N, n, m = topo.N, topo.n, model.m
    dt, stride = config.dt, config.log_stride
    K = int(round(config.t_end / dt))
    T = K // stride + 1
    buf = {
        "t": np.empty(T), "q0": np.empty((T, n)), "q0dot": np.empty((T, n)), "q0ddot": np.empty((T, n)),
        "q": np.empty((T, N, n)), "qdot": np.empty((T, N, n)), "qddot": np.empty((T, N, n)),
        "u": np.empty((T, N, m)), "nu_hat": np.empty((T, N, n)),
        "eta": np.empty((T, N, n)), "eta_dot": np.empty((T, N, n)),
    }
    y = bundle.pack()
    _check_finite(y, 0.0, N, n)
    rows = 0
    sl = loop._sl
    for k in range(K + 1):
        t = k * dt
        w = noise.draw(k)
        record = k % stride == 0
        if record:
            k1, ex = loop.rhs(t, y, w, extras=True)
            buf["t"][rows] = t
            buf["q0"][rows] = y[sl[0]]
            buf["q0dot"][rows] = y[sl[1]]
            buf["q"][rows] = y[sl[2]].reshape(N, n)
            buf["qdot"][rows] = y[sl[3]].reshape(N, n)
            buf["nu_hat"][rows] = y[sl[4]].reshape(N, n)
            buf["q0ddot"][rows] = ex["q0ddot"]
            buf["qddot"][rows] = ex["qddot"]
            buf["u"][rows] = ex["u"]
            buf["eta"][rows] = ex["eta"]
            buf["eta_dot"][rows] = ex["eta_dot"]
            rows += 1
        else:
            k1 = loop.rhs(t, y, w)
        if k == K:
            break
        y = loop.step(y, t, dt, w, k1=k1)
        if not np.all(np.isfinite(y)):
            partial = _finish_log({key: v[:rows] for key, v in buf.items()}, config, model)
            _check_finite(y, (k + 1) * dt, N, n, log=partial)
    return _finish_log(buf, config, model)


def _finish_log(buf, config, model):
    ens = ensemble_errors(
        buf["q"], buf["qdot"], buf["qddot"], buf["q0"], buf["q0dot"], buf["q0ddot"], config.gains
    )
    return TrajectoryLog(
        **buf, e=ens.e, r1=ens.r1, r2=ens.r2, dt=config.dt, log_stride=config.log_stride,
        gains=config.gains, model=model, topology=config.topology,
    )


def run_scenario(config, zero_input=False):
    """Simulate ``config`` and compute its metrics."""
    log = simulate(config, zero_input=zero_input)
    a = config.analysis
    window = (a.rms_window[0], min(a.rms_window[1], float(log.t[-1])))
    return log, compute_metrics(log, window=window, threshold=a.threshold)


def _sweep_one(args):
    config, seed = args
    try:
        _, metrics = run_scenario(config.with_seed(seed))
        return {"seed": seed, "metrics": metrics.to_dict(), "error": None}
    except DivergenceError as exc:
        return {"seed": seed, "metrics": None, "error": str(exc)}


def sweep_workers():
    value = os.environ.get("RISE_FLOCK_THREADS")
    if not value:
        return 1
    try:
        return max(1, int(value))
    except ValueError:
        raise ValidationError(f"RISE_FLOCK_THREADS must be an integer, got {value!r}") from None


def seed_sweep(config, seeds, workers=None, converge_by=3.0):
    """Independent runs over ``seeds`` plus an aggregate summary.

    Diverged runs are recorded with their error message and count as not
    converged.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValidationError("seed_sweep needs at least one seed")
    workers = sweep_workers() if workers is None else workers
    jobs = [(config, s) for s in seeds]
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            runs = list(pool.map(_sweep_one, jobs))
    else:
        runs = [_sweep_one(j) for j in jobs]
    return {"runs": runs, "aggregate": aggregate(runs, converge_by)}


def aggregate(runs, converge_by=3.0):
    ok = [r["metrics"] for r in runs if r["metrics"] is not None]
    rms = np.array([m["cumulative_rms_e"] for m in ok])
    converged = sum(
        1 for m in ok if m["convergence_time_005"] is not None and m["convergence_time_005"] <= converge_by
    )
    return {
        "n_runs": len(runs),
        "n_diverged": len(runs) - len(ok),
        "fraction_converged": converged / len(runs),
        "converge_by": converge_by,
        "median_rms": float(np.median(rms)) if len(rms) else None,
        "min_rms": float(rms.min()) if len(rms) else None,
        "max_rms": float(rms.max()) if len(rms) else None,
    }
