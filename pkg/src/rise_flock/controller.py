"""Decentralized RISE control law.

Each agent works from :class:`LocalMeasurements` only: relative states to its
graph neighbours, the relative state to the target when pinned, and its own
integrator state.  :class:`BatchedLocalController` evaluates the same local
law for all agents at once from per-edge measurement arrays; it is what the
simulator calls on every integration stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rise_flock.errors import ValidationError
from rise_flock.graph import directed_edges


def sgn(v):
    """Element-wise signum with ``sgn(0) == 0`` (strict sign test, no dead zone)."""
    return np.sign(np.asarray(v, dtype=float))


@dataclass(frozen=True)
class ControllerGains:
    k1: float
    k2: float
    k3: float
    k4: float
    lambda_P: float = 1.0
    lambda_V: float = 0.5

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "lambda_P", "lambda_V"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValidationError(f"gains.{name} must be > 0, got {value}")
        # k4 = 0 is accepted so the robustness term can be ablated
        if not (np.isfinite(self.k4) and self.k4 >= 0):
            raise ValidationError(f"gains.k4 must be >= 0, got {self.k4}")
        self.check_lambda_P()

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**{k: float(v) for k, v in data.items()})
        except TypeError as exc:
            raise ValidationError(f"bad gains block: {exc}") from None

    def to_dict(self):
        return dict(self.__dict__)

    def check_lambda_P(self):
        if not (0 < self.lambda_P < self.k2):
            raise ValidationError(
                f"gains.lambda_P={self.lambda_P} must lie in (0, k2={self.k2})"
            )

    # coefficients of the control law, named by the signal they multiply
    @property
    def c_eta(self):
        return (self.k1 + self.k2) * self.k3 + 1.0

    @property
    def c_edot(self):
        return self.k1 + self.k2

    @property
    def c_e(self):
        return 1.0 + self.k1 * self.k2

    @property
    def c_nu(self):
        return self.k1 + (1.0 + self.k1 * self.k2) * self.k3


@dataclass
class LocalMeasurements:
    """What agent ``i`` senses.  Keys of the neighbour maps are agent indices."""

    rel_pos: dict = field(default_factory=dict)
    rel_vel: dict = field(default_factory=dict)
    b_i: int = 0
    target_rel_pos: np.ndarray | None = None
    target_rel_vel: np.ndarray | None = None

    def __post_init__(self):
        if self.b_i not in (0, 1):
            raise ValidationError(f"b_i must be 0 or 1, got {self.b_i}")
        has_target = self.target_rel_pos is not None and self.target_rel_vel is not None
        if bool(self.b_i) != has_target:
            raise ValidationError("target measurements must be present exactly when b_i = 1")
        if set(self.rel_pos) != set(self.rel_vel):
            raise ValidationError("rel_pos and rel_vel cover different neighbours")


@dataclass
class ControllerMemory:
    nu_hat: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n))


def _check_neighbors(meas, weights):
    extra = set(meas.rel_pos) - set(weights)
    if extra:
        raise ValidationError(f"measurements from non-neighbours {sorted(extra)}")


def neighborhood_error(meas, weights):
    """``eta_i = b_i e_i + sum_j a_ij q_ij``."""
    _check_neighbors(meas, weights)
    eta = None
    for j, q_ij in meas.rel_pos.items():
        term = weights[j] * np.asarray(q_ij, dtype=float)
        eta = term if eta is None else eta + term
    if meas.b_i:
        e = np.asarray(meas.target_rel_pos, dtype=float)
        eta = e if eta is None else eta + e
    if eta is None:
        raise ValidationError("agent has neither neighbours nor a target measurement")
    return eta


def neighborhood_error_rate(meas, weights):
    """``eta_dot_i = b_i e_dot_i + sum_j a_ij q_dot_ij``."""
    _check_neighbors(meas, weights)
    rate = None
    for j, v_ij in meas.rel_vel.items():
        term = weights[j] * np.asarray(v_ij, dtype=float)
        rate = term if rate is None else rate + term
    if meas.b_i:
        ed = np.asarray(meas.target_rel_vel, dtype=float)
        rate = ed if rate is None else rate + ed
    if rate is None:
        raise ValidationError("agent has neither neighbours nor a target measurement")
    return rate


def _feedback(eta, eta_dot, meas, nu_hat, gains):
    out = gains.k3 * eta_dot + gains.c_eta * eta + nu_hat
    if meas.b_i:
        out = out + gains.c_edot * np.asarray(meas.target_rel_vel, float) + gains.c_e * np.asarray(
            meas.target_rel_pos, float
        )
    return out


def rise_control(meas, mem, gains, g_plus, weights):
    """Control input ``u_i`` of one agent; ``g_plus`` is its right inverse ``g_i^+``."""
    eta = neighborhood_error(meas, weights)
    eta_dot = neighborhood_error_rate(meas, weights)
    return np.asarray(g_plus, dtype=float) @ _feedback(eta, eta_dot, meas, mem.nu_hat, gains)


def nuhat_rate(meas, gains, weights):
    """Right-hand side of the integrator for ``nu_hat_i``."""
    eta = neighborhood_error(meas, weights)
    eta_dot = neighborhood_error_rate(meas, weights)
    return gains.c_nu * eta + gains.k4 * sgn(eta_dot + gains.k1 * eta)


def measurements_from_state(topo, i, Q, Qdot, q0, q0dot):
    """Noise-free measurements of agent ``i`` cut from a global snapshot."""
    nbrs = topo.neighbors(i)
    pinned = bool(topo.pinning[i])
    return LocalMeasurements(
        rel_pos={j: Q[j] - Q[i] for j in nbrs},
        rel_vel={j: Qdot[j] - Qdot[i] for j in nbrs},
        b_i=int(pinned),
        target_rel_pos=(q0 - Q[i]) if pinned else None,
        target_rel_vel=(q0dot - Qdot[i]) if pinned else None,
    )


class BatchedLocalController:
    """The local law for every agent at once, over measurement channels.

    A channel is one relative measurement taken by one agent: ``q_j - q_i``
    for each neighbour ``j`` (weight ``a_ij``), and ``q_0 - q_i`` when agent
    ``i`` is pinned (weight 1).  Neighbour channels come first, grouped by
    the measuring agent, then target channels in agent order.  Every row of
    the coefficient matrices below touches only the channels of its own
    agent, so the batched form stays strictly local.
    """

    def __init__(self, topo, gains):
        self.topo = topo
        self.gains = gains
        src, dst, w = directed_edges(topo)
        pinned = np.flatnonzero(np.asarray(topo.pinning))
        self.src, self.dst, self.w = src, dst, w
        self.pinned = pinned
        self.n_neighbor = len(src)
        self.n_channels = len(src) + len(pinned)
        N, C = topo.N, self.n_channels
        owner = np.concatenate([src, pinned])
        S = np.zeros((N, C))
        S[owner, np.arange(C)] = np.concatenate([w, np.ones(len(pinned))])
        T = np.zeros((N, C))
        T[pinned, len(src) + np.arange(len(pinned))] = 1.0
        self.S = S  # eta = S @ rel_pos
        self.T = T  # picks e_i (pinned agents only)
        gs = gains
        self.M_pos = gs.c_eta * S + gs.c_e * T
        self.M_vel = gs.k3 * S + gs.c_edot * T
        self.b = np.asarray(topo.pinning, dtype=float)[:, None]
        # channel c reads D[c] @ [q_0, q_1, ..., q_N]
        D = np.zeros((C, N + 1))
        nb = np.arange(len(src))
        D[nb, 1 + dst] = 1.0
        D[nb, 1 + src] = -1.0
        tg = len(src) + np.arange(len(pinned))
        D[tg, 0] = 1.0
        D[tg, 1 + pinned] = -1.0
        self.D = D

    def channels(self, X):
        """Noise-free channel values ``(2, C, n)`` from ``X = [[q0, Q], [q0dot, Qdot]]`` of shape (2, N + 1, n)."""
        return self.D @ X

    def errors(self, R):
        """``(eta, eta_dot)`` from channel values ``R`` (2, C, n)."""
        out = self.S @ R
        return out[0], out[1]

    def feedback(self, R, nu_hat):
        return self.M_pos @ R[0] + self.M_vel @ R[1] + nu_hat

    def nuhat_rate(self, eta, eta_dot):
        gs = self.gains
        return gs.c_nu * eta + gs.k4 * np.sign(eta_dot + gs.k1 * eta)
