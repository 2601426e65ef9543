"""Agent and target dynamics.

Models expose batched evaluation over all agents: positions and velocities
have shape ``(..., N, n)``, time broadcasts against the leading ``...`` axes.
The controller never sees these functions; only the simulator and the
centralized analysis do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rise_flock.errors import NumericalError, SingularityError, ValidationError

PINV_COND_LIMIT = 1e12
# diagonal entries of magnitude 1e-6 against O(1) peers give cond(g g^T) ~ 1e12
_DIAG_FLOOR = 1e-6
_CYC1 = [1, 2, 0]
_CYC2 = [2, 0, 1]


@dataclass(frozen=True)
class AgentState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "qdot", np.asarray(self.qdot, dtype=float))
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))):
            raise ValidationError("agent state has non-finite entries")


@dataclass(frozen=True)
class TargetState:
    q0: np.ndarray
    q0dot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q0", np.asarray(self.q0, dtype=float))
        object.__setattr__(self, "q0dot", np.asarray(self.q0dot, dtype=float))
        if not (np.all(np.isfinite(self.q0)) and np.all(np.isfinite(self.q0dot))):
            raise ValidationError("target state has non-finite entries")


@dataclass(frozen=True)
class Bounds:
    """User-declared bounds on disturbances and the target motion."""

    d_bar: float
    ddot_bar: float
    dddot_bar: float
    q0_bar: float
    q0dot_bar: float
    q0ddot_bar: float
    q0dddot_bar: float

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (np.isfinite(value) and value > 0):
                raise ValidationError(f"bound {name} must be strictly positive, got {value}")

    def to_dict(self):
        return dict(self.__dict__)


def _time_axes(t, extra):
    """Reshape ``t`` so it broadcasts against arrays with ``extra`` trailing axes."""
    t = np.asarray(t, dtype=float)
    return t.reshape(t.shape + (1,) * extra)


class DynamicsModel:
    """Base class for the agent/target model.

    Subclasses implement the batched ``f``, ``g``, ``d`` and ``f0``.  Inputs
    of every agent share dimension ``m``; per-agent evaluation goes through
    ``f_i``/``g_i``/``d_i``, which default to slicing the batched versions.
    """

    N: int
    n: int
    m: int
    bounds: Bounds | None = None

    def f(self, q, qdot, t):
        raise NotImplementedError

    def g(self, q, qdot, t):
        raise NotImplementedError

    def d(self, t):
        raise NotImplementedError

    def f0(self, q0, q0dot, t):
        raise NotImplementedError

    def _lift(self, i, q, qdot):
        Q = np.zeros(np.shape(q)[:-1] + (self.N, self.n))
        Qd = np.zeros_like(Q)
        Q[..., i, :] = q
        Qd[..., i, :] = qdot
        return Q, Qd

    def f_i(self, i, q, qdot, t):
        Q, Qd = self._lift(i, q, qdot)
        return self.f(Q, Qd, t)[..., i, :]

    def g_i(self, i, q, qdot, t):
        Q, Qd = self._lift(i, q, qdot)
        return self.g(Q, Qd, t)[..., i, :, :]

    def d_i(self, i, t):
        return self.d(t)[..., i, :]

    # True when g is diagonal and stage_terms returns its diagonal as (N, n) arrays
    diagonal_input = False

    def g_pinv(self, q, qdot, t):
        """Batched right inverse of ``g`` for all agents, shape ``(..., N, m, n)``."""
        return right_pinv(self.g(q, qdot, t), t=t)

    def stage_terms(self, q, qdot, t):
        """``(f + d, g, g^+)`` at one scalar time, as the simulator needs them per stage."""
        return self.f(q, qdot, t) + self.d(t), self.g(q, qdot, t), self.g_pinv(q, qdot, t)


def right_pinv(g, agent=None, t=None):
    """``g^T (g g^T)^-1`` for full-row-rank ``g`` of shape ``(..., n, m)``.

    Raises SingularityError when ``cond(g g^T)`` exceeds ``PINV_COND_LIMIT``.
    """
    g = np.asarray(g, dtype=float)
    ggt = g @ np.swapaxes(g, -1, -2)
    cond = np.linalg.cond(ggt)
    bad = ~(cond <= PINV_COND_LIMIT)
    if np.any(bad):
        idx = np.argwhere(np.atleast_1d(bad))[0]
        who = agent
        if who is None and g.ndim >= 3:
            who = int(idx[-1])
        raise SingularityError(
            f"g g^T is singular for agent {who} at t={_first_time(t)} "
            f"(cond {float(np.atleast_1d(cond)[tuple(idx)]):.3e} > {PINV_COND_LIMIT:.0e})",
            agent=who,
            t=_first_time(t),
            cond=float(np.atleast_1d(cond)[tuple(idx)]),
        )
    return np.swapaxes(g, -1, -2) @ np.linalg.inv(ggt)


def _first_time(t):
    if t is None:
        return None
    return float(np.ravel(np.asarray(t, dtype=float))[0])


def agent_acceleration(model, i, s, u, t):
    """``f_i + g_i u + d_i`` for a single agent."""
    u = np.asarray(u, dtype=float)
    if s.q.shape != (model.n,) or s.qdot.shape != (model.n,):
        raise ValidationError(f"agent state must have length n={model.n}")
    if u.shape != (model.m,):
        raise ValidationError(f"input must have length m={model.m}, got shape {u.shape}")
    acc = model.f_i(i, s.q, s.qdot, t) + model.g_i(i, s.q, s.qdot, t) @ u + model.d_i(i, t)
    if not np.all(np.isfinite(acc)):
        raise NumericalError(f"non-finite acceleration for agent {i} at t={t}")
    return acc


def target_acceleration(model, s, t):
    if s.q0.shape != (model.n,) or s.q0dot.shape != (model.n,):
        raise ValidationError(f"target state must have length n={model.n}")
    acc = np.asarray(model.f0(s.q0, s.q0dot, t), dtype=float)
    if not np.all(np.isfinite(acc)):
        raise NumericalError(f"non-finite target acceleration at t={t}")
    return acc


def g_pinv(model, i, s, t):
    """Right Moore-Penrose inverse of ``g_i`` at the given state."""
    return right_pinv(model.g_i(i, s.q, s.qdot, t), agent=i, t=t)


class CoupledTanhModel(DynamicsModel):
    """The three-axis benchmark with coupled drift, time-varying gains and sinusoidal disturbances.

    ``c`` holds twelve coefficients per agent.  Per axis the drift is a
    cross-coupling term plus a velocity-dependent ``tanh`` term.
    """

    def __init__(self, c, bounds=None):
        c = np.asarray(c, dtype=float)
        if c.ndim != 2 or c.shape[1] != 12:
            raise ValidationError(f"c must have shape (N, 12), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValidationError("c has non-finite entries")
        self.c = c
        self.N = c.shape[0]
        self.n = 3
        self.m = 3
        self.bounds = bounds
        self._c_coupling = c[:, [0, 2, 4]].copy()
        self._c_tanh = c[:, [1, 3, 5]].copy()
        self._c_g = c[:, [6, 7, 8]].copy()
        self._c_d = c[:, [9, 10, 11]].copy()

    diagonal_input = True

    def stage_terms(self, q, qdot, t):
        ct, st = math.cos(t), math.sin(t)
        wave = np.array([ct, st, ct * st])
        drift = (
            self._c_coupling * (q[:, _CYC1] - q[:, _CYC2])
            + self._c_tanh * np.tanh(qdot * t)
            + self._c_d * wave
        )
        gdiag = 1.0 - self._c_g * wave
        if np.abs(gdiag).min() <= _DIAG_FLOOR:
            right_pinv(gdiag[..., :, None] * np.eye(3), t=t)  # raises with diagnostics
        return drift, gdiag, 1.0 / gdiag

    @classmethod
    def sample(cls, N, rng, bounds=None):
        return cls(rng.uniform(-0.5, 0.5, size=(N, 12)), bounds=bounds)

    def f(self, q, qdot, t):
        c = self.c
        t = _time_axes(t, 1)
        x, y, z = q[..., 0], q[..., 1], q[..., 2]
        xd, yd, zd = qdot[..., 0], qdot[..., 1], qdot[..., 2]
        return np.stack(
            [
                c[:, 0] * (y - z) + c[:, 1] * np.tanh(xd * t),
                c[:, 2] * (z - x) + c[:, 3] * np.tanh(yd * t),
                c[:, 4] * (x - y) + c[:, 5] * np.tanh(zd * t),
            ],
            axis=-1,
        )

    def _gdiag(self, t):
        t = _time_axes(t, 1)
        c = self.c
        ct, st = np.cos(t), np.sin(t)
        return np.stack(
            [1.0 - c[:, 6] * ct, 1.0 - c[:, 7] * st, 1.0 - c[:, 8] * ct * st], axis=-1
        )

    def g(self, q, qdot, t):
        diag = self._gdiag(t) * np.ones(np.shape(q)[:-2] + (1, 1))
        return diag[..., :, None] * np.eye(3)

    def g_pinv(self, q, qdot, t):
        diag = self._gdiag(t) * np.ones(np.shape(q)[:-2] + (1, 1))
        # |c| < 1 keeps the diagonal away from zero; still guard user-supplied c
        cond = (np.abs(diag).max(axis=-1) / np.abs(diag).min(axis=-1)) ** 2
        if not np.all(cond <= PINV_COND_LIMIT):
            return right_pinv(self.g(q, qdot, t), t=t)
        return (1.0 / diag)[..., :, None] * np.eye(3)

    def d(self, t):
        t = _time_axes(t, 1)
        c = self.c
        ct, st = np.cos(t), np.sin(t)
        return np.stack([c[:, 9] * ct, c[:, 10] * st, c[:, 11] * ct * st], axis=-1)

    def f0(self, q0, q0dot, t):
        q0 = np.asarray(q0, dtype=float)
        q0dot = np.asarray(q0dot, dtype=float)
        if q0.ndim == 1:
            x, y, z = q0.tolist()
            xd, yd, zd = q0dot.tolist()
            return np.array([
                math.sin(x) - math.cos(y * xd),
                math.cos(z * yd) - math.sin(x),
                -math.sin(y * zd) - math.sin(z),
            ])
        x, y, z = q0[..., 0], q0[..., 1], q0[..., 2]
        xd, yd, zd = q0dot[..., 0], q0dot[..., 1], q0dot[..., 2]
        return np.stack(
            [
                np.sin(x) - np.cos(y * xd),
                np.cos(z * yd) - np.sin(x),
                -np.sin(y * zd) - np.sin(z),
            ],
            axis=-1,
        )


def _per_agent(value, N, shape, name):
    arr = np.asarray(value, dtype=float)
    if arr.shape == shape:
        arr = np.broadcast_to(arr, (N,) + shape).copy()
    if arr.shape != (N,) + shape:
        raise ValidationError(f"{name} must have shape {shape} or {(N,) + shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    return arr


class LinearModel(DynamicsModel):
    """Linear drift, constant input matrix and sinusoidal disturbance.

    ``f_i = F_pos q + F_vel qdot``, ``g_i = G``,
    ``d_i = amp * sin(freq * t + phase)``; the target follows
    ``f0 = A_pos q0 + A_vel q0dot + amp0 * sin(freq0 * t + phase0)``.
    Matrix arguments are shared by every agent or given per agent.
    """

    def __init__(self, N, n=3, m=None, f_pos=None, f_vel=None, g=None, d_amp=None,
                 d_freq=None, d_phase=None, f0_pos=None, f0_vel=None, f0_amp=None,
                 f0_freq=None, f0_phase=None, bounds=None):
        m = n if m is None else int(m)
        self.N, self.n, self.m = int(N), int(n), m
        zeros_nn = np.zeros((n, n))
        zeros_n = np.zeros(n)
        self.f_pos = _per_agent(zeros_nn if f_pos is None else f_pos, N, (n, n), "f_pos")
        self.f_vel = _per_agent(zeros_nn if f_vel is None else f_vel, N, (n, n), "f_vel")
        if g is None:
            if m != n:
                raise ValidationError("g must be given when m != n")
            g = np.eye(n)
        self.G = _per_agent(g, N, (n, m), "g")
        self.d_amp = _per_agent(zeros_n if d_amp is None else d_amp, N, (n,), "d_amp")
        self.d_freq = _per_agent(zeros_n if d_freq is None else d_freq, N, (n,), "d_freq")
        self.d_phase = _per_agent(zeros_n if d_phase is None else d_phase, N, (n,), "d_phase")
        self.f0_pos = np.asarray(zeros_nn if f0_pos is None else f0_pos, dtype=float).reshape(n, n)
        self.f0_vel = np.asarray(zeros_nn if f0_vel is None else f0_vel, dtype=float).reshape(n, n)
        self.f0_amp = np.asarray(zeros_n if f0_amp is None else f0_amp, dtype=float).reshape(n)
        self.f0_freq = np.asarray(zeros_n if f0_freq is None else f0_freq, dtype=float).reshape(n)
        self.f0_phase = np.asarray(zeros_n if f0_phase is None else f0_phase, dtype=float).reshape(n)
        self.bounds = bounds

    def f(self, q, qdot, t):
        return np.einsum("iab,...ib->...ia", self.f_pos, q) + np.einsum(
            "iab,...ib->...ia", self.f_vel, qdot
        )

    def g(self, q, qdot, t):
        return np.broadcast_to(self.G, np.shape(q)[:-2] + self.G.shape)

    def d(self, t):
        t = _time_axes(t, 2)
        return self.d_amp * np.sin(self.d_freq * t + self.d_phase)

    def f0(self, q0, q0dot, t):
        t = _time_axes(t, 1)
        q0 = np.asarray(q0, dtype=float)
        q0dot = np.asarray(q0dot, dtype=float)
        return (
            q0 @ self.f0_pos.T
            + q0dot @ self.f0_vel.T
            + self.f0_amp * np.sin(self.f0_freq * t + self.f0_phase)
        )


class CallableModel(DynamicsModel):
    """Wraps plain per-agent callables; batched evaluation loops over agents.

    ``f(i, q, qdot, t)``, ``g(i, q, qdot, t)``, ``d(i, t)`` and
    ``f0(q0, q0dot, t)`` act on a single (unbatched) sample.
    """

    def __init__(self, N, n, f, g, d, f0, m=None, bounds=None):
        self.N, self.n = int(N), int(n)
        self.m = self.n if m is None else int(m)
        self._f, self._g, self._d, self._f0 = f, g, d, f0
        self.bounds = bounds

    def _loop(self, fn, lead, out_shape):
        out = np.empty(lead + out_shape)
        for idx in np.ndindex(*lead):
            out[idx] = fn(idx)
        return out

    def f(self, q, qdot, t):
        q, qdot = np.asarray(q, float), np.asarray(qdot, float)
        lead = q.shape[:-2]
        tt = np.broadcast_to(np.asarray(t, float), lead)
        return self._loop(
            lambda idx: np.stack([self._f(i, q[idx][i], qdot[idx][i], float(tt[idx])) for i in range(self.N)]),
            lead, (self.N, self.n),
        )

    def g(self, q, qdot, t):
        q, qdot = np.asarray(q, float), np.asarray(qdot, float)
        lead = q.shape[:-2]
        tt = np.broadcast_to(np.asarray(t, float), lead)
        return self._loop(
            lambda idx: np.stack([self._g(i, q[idx][i], qdot[idx][i], float(tt[idx])) for i in range(self.N)]),
            lead, (self.N, self.n, self.m),
        )

    def d(self, t):
        t = np.asarray(t, float)
        return self._loop(
            lambda idx: np.stack([self._d(i, float(t[idx])) for i in range(self.N)]),
            t.shape, (self.N, self.n),
        )

    def f0(self, q0, q0dot, t):
        q0, q0dot = np.asarray(q0, float), np.asarray(q0dot, float)
        lead = q0.shape[:-1]
        tt = np.broadcast_to(np.asarray(t, float), lead)
        return self._loop(lambda idx: self._f0(q0[idx], q0dot[idx], float(tt[idx])), lead, (self.n,))

    def f_i(self, i, q, qdot, t):
        return np.asarray(self._f(i, np.asarray(q, float), np.asarray(qdot, float), t), dtype=float)

    def g_i(self, i, q, qdot, t):
        return np.asarray(self._g(i, np.asarray(q, float), np.asarray(qdot, float), t), dtype=float)

    def d_i(self, i, t):
        return np.asarray(self._d(i, t), dtype=float)


# d bounds follow from |c| <= 1/2; target bounds cover the bundled 30 s
# scenario (observed sups 107.6, 13.2, 1.76, 2.99) with headroom
DEFAULT_BOUNDS = Bounds(
    d_bar=0.5 * np.sqrt(3.0),
    ddot_bar=0.5 * np.sqrt(3.0),
    dddot_bar=0.5 * np.sqrt(6.0),
    q0_bar=120.0,
    q0dot_bar=15.0,
    q0ddot_bar=2.0 * np.sqrt(3.0),
    q0dddot_bar=4.0,
)


def model_from_config(block, N, n, rng=None):
    """Build a model from the ``model`` block of a scenario config.

    ``paper_sec6`` samples ``c`` from U(-0.5, 0.5) with ``rng`` unless the
    block pins it; ``custom`` reads the LinearModel keyword arguments.
    """
    name = block.get("name", "paper_sec6")
    bounds = block.get("bounds")
    bounds = Bounds(**bounds) if bounds else None
    if name == "paper_sec6":
        if n != 3:
            raise ValidationError("model paper_sec6 requires n = 3")
        c = block.get("c")
        if c is not None:
            model = CoupledTanhModel(c, bounds=bounds or DEFAULT_BOUNDS)
            if model.N != N:
                raise ValidationError(f"model.c has {model.N} rows, expected N={N}")
            return model
        if rng is None:
            raise ValidationError("model paper_sec6 needs an rng when c is not pinned")
        return CoupledTanhModel.sample(N, rng, bounds=bounds or DEFAULT_BOUNDS)
    if name == "custom":
        params = dict(block.get("params", {}))
        unknown = set(params) - {
            "m", "f_pos", "f_vel", "g", "d_amp", "d_freq", "d_phase",
            "f0_pos", "f0_vel", "f0_amp", "f0_freq", "f0_phase",
        }
        if unknown:
            raise ValidationError(f"unknown model.params keys: {sorted(unknown)}")
        return LinearModel(N, n, bounds=bounds, **params)
    raise ValidationError(f"unknown model.name {name!r} (expected 'paper_sec6' or 'custom')")
