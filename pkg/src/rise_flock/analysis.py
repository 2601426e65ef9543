"""Centralized certificate evaluation.

Everything here is omniscient post-processing: it reads true states from a
trajectory log (or a snapshot) and evaluates the ensemble error signals, the
disturbance bounds, the P-function, the Lyapunov function and the
gain conditions of the stability result.  Nothing here feeds back into the
controller.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rise_flock.errors import InsufficientDataError, ValidationError
from rise_flock.graph import interaction_matrix, spectral_summary


@dataclass
class EnsembleErrorState:
    e: np.ndarray
    r1: np.ndarray
    r2: np.ndarray

    @property
    def z(self):
        return np.concatenate([self.e, self.r1, self.r2], axis=-1)


def ensemble_errors(q, qdot, qddot, q0, q0dot, q0ddot, gains):
    """Stacked ``e``, ``r1`` and ``r2`` from true states and accelerations.

    Agent arrays have shape ``(..., N, n)`` and target arrays ``(..., n)``;
    outputs are ``(..., N * n)`` in agent-major order.
    """
    q0 = np.asarray(q0, float)[..., None, :]
    q0dot = np.asarray(q0dot, float)[..., None, :]
    q0ddot = np.asarray(q0ddot, float)[..., None, :]
    e = q0 - np.asarray(q, float)
    ed = q0dot - np.asarray(qdot, float)
    edd = q0ddot - np.asarray(qddot, float)
    r1 = ed + gains.k1 * e
    r2 = (edd + gains.k1 * ed) + gains.k2 * r1 + e
    lead = e.shape[:-2]
    flat = lead + (-1,)
    return EnsembleErrorState(e=e.reshape(flat), r1=r1.reshape(flat), r2=r2.reshape(flat))


def _uniform_step(t):
    t = np.asarray(t, dtype=float)
    if t.shape[-1] < 2:
        raise InsufficientDataError("need at least two samples")
    d = np.diff(t, axis=-1)
    h = float(d.ravel()[0])
    if not (h > 0 and np.allclose(d, h, rtol=1e-9, atol=1e-12 * max(1.0, np.abs(t).max()))):
        raise ValidationError("time grid is not uniform")
    return h


def _ddt(x, h, axis):
    return np.gradient(x, h, axis=axis, edge_order=2)


def _h_b_core(model, t, q0, q0dot, q0ddot, h):
    """``h_B`` along a sampled target path; time is the last axis of ``t``.

    Arrays: ``t (..., T)``, target ``(..., T, n)``.  Returns ``(..., T, N, n)``.
    """
    ax = t.ndim - 1
    N = model.N
    Q = np.repeat(q0[..., None, :], N, axis=-2)
    Qd = np.repeat(q0dot[..., None, :], N, axis=-2)
    F = model.f(Q, Qd, t)
    G = model.g(Q, Qd, t)
    Gp = model.g_pinv(Q, Qd, t)
    D = model.d(t)
    dF0 = _ddt(q0ddot, h, ax)
    dF = _ddt(F, h, ax)
    dD = _ddt(D, h, ax)
    dG = _ddt(np.asarray(G, dtype=float), h, ax)
    resid = q0ddot[..., None, :] - F - D
    corr = np.einsum("...ab,...b->...a", dG, np.einsum("...ab,...b->...a", Gp, resid))
    return dF0[..., None, :] - dF - dD - corr


@dataclass
class DisturbanceSignals:
    t: np.ndarray
    h_B: np.ndarray
    h_B_dot: np.ndarray
    chi1: float = float("nan")
    chi2: float = float("nan")
    safety: float = 1.5
    mode: str = "trajectory"
    h_tilde: np.ndarray | None = None


def h_b_trace(model, t, q0, q0dot, q0ddot=None):
    """Target-side disturbance stack ``h_B(t)`` and its derivative along a logged target path.

    Total time derivatives of ``f_i``, ``g_i``, ``d_i`` and ``f_0`` come from
    second-order finite differences on the log grid (central inside,
    one-sided at the two ends).
    """
    t = np.asarray(t, dtype=float)
    if t.shape[0] < 3:
        raise InsufficientDataError(f"h_B needs at least 3 samples, got {t.shape[0]}")
    h = _uniform_step(t)
    q0 = np.asarray(q0, float)
    q0dot = np.asarray(q0dot, float)
    q0ddot = model.f0(q0, q0dot, t) if q0ddot is None else np.asarray(q0ddot, float)
    hb = _h_b_core(model, t, q0, q0dot, q0ddot, h).reshape(len(t), -1)
    return DisturbanceSignals(t=t, h_B=hb, h_B_dot=_ddt(hb, h, 0))


def h_tilde_trace(log):
    """Agent-side mismatch stack ``h~(t)`` along a log (finite-difference derivatives)."""
    model, t, h = log.model, log.t, log.h
    if len(t) < 3:
        raise InsufficientDataError("h~ needs at least 3 samples")
    N = model.N

    def side(Q, Qd, acc):
        F = model.f(Q, Qd, t)
        G = np.asarray(model.g(Q, Qd, t), float)
        Gp = model.g_pinv(Q, Qd, t)
        D = model.d(t)
        corr = np.einsum("...ab,...b->...a", _ddt(G, h, 0), np.einsum("...ab,...b->...a", Gp, acc - F - D))
        return _ddt(F, h, 0), corr

    Q0 = np.repeat(log.q0[:, None, :], N, axis=1)
    Q0d = np.repeat(log.q0dot[:, None, :], N, axis=1)
    dF_tgt, corr_tgt = side(Q0, Q0d, log.q0ddot[:, None, :])
    dF_agt, corr_agt = side(log.q, log.qdot, log.qddot)
    return (dF_tgt - dF_agt + corr_tgt - corr_agt).reshape(len(t), -1)


def chi_estimates(signals, safety=1.5):
    """``chi1 = safety * sup ||h_B||`` and ``chi2 = safety * sup ||dh_B/dt||``."""
    if safety < 1:
        raise ValidationError(f"chi safety factor must be >= 1, got {safety}")
    chi1 = safety * float(np.linalg.norm(signals.h_B, axis=-1).max())
    chi2 = safety * float(np.linalg.norm(signals.h_B_dot, axis=-1).max())
    signals.chi1, signals.chi2, signals.safety = chi1, chi2, safety
    return chi1, chi2


def _ball(rng, size, n, radius):
    v = rng.normal(size=size + (n,))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    r = radius * rng.uniform(size=size) ** (1.0 / n)
    return v * r[..., None]


def chi_box_sampling(model, bounds, rng, n_samples=100_000, t_max=30.0, safety=1.5, delta=1e-3, chunk=5000):
    """Monte-Carlo sup of ``||h_B||`` and ``||dh_B/dt||`` over the declared target bounds.

    Each sample is a target position, velocity and jerk drawn from the
    bound balls plus a time in ``[0, t_max]``; the acceleration follows from
    ``f_0``.  A short cubic path through the sample feeds the same
    finite-difference evaluation used for logged trajectories.
    """
    if bounds is None:
        raise ValidationError("box sampling needs declared bounds on the model")
    n = model.n
    s = delta * np.arange(-2, 3)
    sup1 = sup2 = 0.0
    done = 0
    while done < n_samples:
        S = min(chunk, n_samples - done)
        q0 = _ball(rng, (S,), n, bounds.q0_bar)
        v0 = _ball(rng, (S,), n, bounds.q0dot_bar)
        j0 = _ball(rng, (S,), n, bounds.q0dddot_bar)
        t0 = rng.uniform(0.0, t_max, size=S)
        a0 = model.f0(q0, v0, t0)
        ss = s[None, :, None]
        qp = q0[:, None] + v0[:, None] * ss + 0.5 * a0[:, None] * ss**2 + j0[:, None] * ss**3 / 6.0
        vp = v0[:, None] + a0[:, None] * ss + 0.5 * j0[:, None] * ss**2
        tp = t0[:, None] + s[None, :]
        ap = model.f0(qp, vp, tp)
        hb = _h_b_core(model, tp, qp, vp, ap, delta).reshape(S, len(s), -1)
        sup1 = max(sup1, float(np.linalg.norm(hb[:, 2], axis=-1).max()))
        sup2 = max(sup2, float(np.linalg.norm((hb[:, 3] - hb[:, 1]) / (2 * delta), axis=-1).max()))
        done += S
    return safety * sup1, safety * sup2


@dataclass
class PFunctionTrace:
    t: np.ndarray
    P: np.ndarray
    conv1: np.ndarray  # exp(-lambda_P t) * (r1^T H^T dh_B/dt)
    conv2: np.ndarray  # exp(-lambda_P t) * ((k2 - lambda_P)(k4 ||H r1||_1 - r1^T H^T h_B))
    base: np.ndarray  # k4 ||H r1||_1 - r1^T H^T h_B


def _decay_convolution(alpha, lam, h):
    """Trapezoidal ``int_t0^t exp(-lam (t - s)) alpha(s) ds`` on a uniform grid."""
    acc = np.zeros_like(alpha)
    decay = np.exp(-lam * h)
    half = 0.5 * h
    for k in range(len(alpha) - 1):
        acc[k + 1] = decay * acc[k] + half * (decay * alpha[k] + alpha[k + 1])
    return acc


def _p_base(Hr1, h_B, k4):
    # k4 ||H r1||_1 - r1^T H^T h_B, row by row
    return k4 * np.abs(Hr1).sum(axis=1) - np.einsum("ij,ij->i", Hr1, h_B)


def p_function_trace(t, Hr1, h_B, h_B_dot, gains):
    """P-function along a trajectory; ``Hr1``, ``h_B``, ``h_B_dot`` are ``(T, nN)``."""
    gains.check_lambda_P()
    h = _uniform_step(t)
    Hr1 = np.asarray(Hr1, float)
    if not (Hr1.shape == np.shape(h_B) == np.shape(h_B_dot) and Hr1.shape[0] == len(t)):
        raise ValidationError("P-function inputs disagree in shape")
    base = _p_base(Hr1, h_B, gains.k4)
    alpha1 = np.einsum("ij,ij->i", Hr1, h_B_dot)
    alpha2 = (gains.k2 - gains.lambda_P) * base
    conv1 = _decay_convolution(alpha1, gains.lambda_P, h)
    conv2 = _decay_convolution(alpha2, gains.lambda_P, h)
    return PFunctionTrace(t=np.asarray(t, float), P=base + conv1 + conv2, conv1=conv1, conv2=conv2, base=base)


def p_initial(Hr1_0, h_B_0, gains):
    """Closed-form ``P(t0) = k4 ||H r1(t0)||_1 - r1(t0)^T H^T h_B(t0)``."""
    return float(_p_base(np.atleast_2d(np.asarray(Hr1_0, float)), np.atleast_2d(np.asarray(h_B_0, float)), gains.k4)[0])


def k_min_value(spec, gains):
    k1, k2, k3 = gains.k1, gains.k2, gains.k3
    third = (
        2.0 * (k1 + k2) * (spec.lambda_min_H * spec.lambda_min_BmI + k3 * spec.lambda_min_H**2)
        - (spec.lambda_max_ImH2 + (1 + 2 * k1**2 + k1 * k2) * spec.lambda_max_H * spec.lambda_max_BmI) ** 2
        - (k1 * (2 - k1**2) + k2) ** 2 * spec.lambda_max_H**2 * spec.lambda_max_BmI**2
    )
    return min(k1 - 0.5, k2 - 0.5, third)


def k3_threshold(spec):
    return (
        spec.lambda_max_ImH2 + spec.lambda_max_H * spec.lambda_max_BmI
    ) ** 2 + 2.0 * spec.lambda_max_H**2 * spec.lambda_max_BmI**2


def k4_threshold(gains, chi1, chi2):
    gains.check_lambda_P()
    return chi1 + chi2 / (gains.k2 - gains.lambda_P)


def gain_conditions(spec, gains, chi1, chi2):
    """Four verdicts, each ``{"value", "threshold", "pass"}`` with strict inequalities."""
    gains.check_lambda_P()
    rows = {
        "k1": (gains.k1, 0.5),
        "k2": (gains.k2, 0.5),
        "k3": (gains.k3, k3_threshold(spec)),
        "k4": (gains.k4, k4_threshold(gains, chi1, chi2)),
    }
    return {k: {"value": v, "threshold": thr, "pass": bool(v > thr)} for k, (v, thr) in rows.items()}


def w_value(z0, spec, gains, chi1):
    z0 = np.asarray(z0, float)
    inner = spec.lambda_max_Q * (z0 @ z0) + 2.0 * (gains.k4 + chi1) * spec.norm1_H * np.abs(z0).sum()
    return float(np.sqrt(inner / spec.lambda_min_Q))


def envelope_check(t, z_norm, W, rate, atol=1e-6):
    """Does ``||z(t)|| <= W exp(-rate (t - t0)) + atol`` hold on every sample?"""
    t = np.asarray(t, float)
    tau = t - t[0]
    bound = W * np.exp(-rate * tau) + atol
    margin = bound - np.asarray(z_norm, float)
    return {"rate": float(rate), "pass": bool(np.all(margin >= 0)), "worst_margin": float(margin.min())}


def max_envelope_rate(t, z_norm, W, atol=1e-6):
    """Largest exponential rate ``r`` with ``||z|| <= W exp(-r tau) + atol`` everywhere (-inf if none)."""
    tau = np.asarray(t, float) - t[0]
    excess = np.asarray(z_norm, float) - atol
    if np.any(excess[tau == 0] > W):
        return float("-inf")
    mask = (tau > 0) & (excess > 0)
    if not np.any(mask):
        return float("inf")
    return float(np.min(np.log(W / excess[mask]) / tau[mask]))


def fit_exponential_rate(t, z_norm, plateau_factor=10.0):
    """Least-squares slope of ``log ||z||`` over the transient window.

    The steady level is the median of ``||z||`` over the second half of the
    log; the window runs from the first sample until ``||z||`` first drops to
    ``plateau_factor`` times that level.  Returns ``(slope, r_squared, t_end)``.
    """
    t = np.asarray(t, float)
    z = np.asarray(z_norm, float)
    steady = float(np.median(z[len(z) // 2 :]))
    below = np.nonzero(z <= plateau_factor * steady)[0]
    end = below[0] + 1 if len(below) else len(z)
    end = min(max(end, 3), len(z))
    x, y = t[:end], np.log(np.maximum(z[:end], np.finfo(float).tiny))
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2, float(t[end - 1])


def stabilizing_set_check(z0, k_min, spec, gains, chi1, rho=None, grid=256):
    """Membership of ``z0`` in the stabilizing set, if a bounding function ``rho`` is supplied.

    Without ``rho`` the verdict is the string ``"rho unavailable"`` and only
    the budget ``(k_min - lambda_V) / lambda_max_H`` is reported.
    """
    budget = (k_min - gains.lambda_V) / spec.lambda_max_H
    W = w_value(z0, spec, gains, chi1)
    if rho is None:
        return {"budget": budget, "W": W, "rho_W": None, "verdict": "rho unavailable"}
    s = np.linspace(0.0, max(2.0 * W, 1.0), grid)
    vals = np.array([float(rho(x)) for x in s])
    if np.any(np.diff(vals) < 0) or np.any(vals < 0):
        raise ValidationError("rho must be non-negative and non-decreasing")
    rho_w = float(rho(W))
    return {"budget": budget, "W": W, "rho_W": rho_w, "verdict": bool(rho_w <= budget)}


def lyapunov_trace(z, P, inter, t=None, skip=0.0):
    """``V = 1/2 z^T diag(I, I, H) z + P`` and the share of grid steps where V strictly drops.

    Steps starting before ``t0 + skip`` are excluded from the share.
    """
    z = np.asarray(z, float)
    Pv = P.P if isinstance(P, PFunctionTrace) else np.asarray(P, float)
    if len(Pv) != len(z):
        raise ValidationError(f"grid mismatch: {len(z)} z samples vs {len(Pv)} P samples")
    if isinstance(P, PFunctionTrace) and t is not None and not np.allclose(P.t, t):
        raise ValidationError("grid mismatch between z and P")
    nN = inter.H.shape[0]
    e, r1, r2 = z[:, :nN], z[:, nN : 2 * nN], z[:, 2 * nN :]
    quad = (e * e).sum(1) + (r1 * r1).sum(1) + np.einsum("ti,ij,tj->t", r2, inter.H, r2)
    V = 0.5 * quad + Pv
    dec = V[1:] < V[:-1]
    if t is not None and skip > 0:
        t = np.asarray(t, float)
        dec = dec[t[:-1] >= t[0] + skip - 1e-12]
    frac = float(dec.mean()) if len(dec) else float("nan")
    return V, frac


def ensemble_u_rate(log, inter):
    """Ensemble input derivative assuming ``g^+`` frozen over the step.

    ``g^+ (H (r1 + k3 r2) + k4 sgn(H r1) + B (k1 e_ddot + k2 r1_dot + e_dot))``
    per sample; returns ``(T, N, m)``.
    """
    gs = log.gains
    N, n = log.q.shape[1], log.q.shape[2]
    e_dot = (log.q0dot[:, None, :] - log.qdot).reshape(len(log.t), -1)
    e_ddot = (log.q0ddot[:, None, :] - log.qddot).reshape(len(log.t), -1)
    r1_dot = e_ddot + gs.k1 * e_dot
    H, Bk = inter.H, inter.B_kron
    inner = (
        (log.r1 + gs.k3 * log.r2) @ H.T
        + gs.k4 * np.sign(log.r1 @ H.T)
        + (gs.k1 * e_ddot + gs.k2 * r1_dot + e_dot) @ Bk.T
    ).reshape(-1, N, n)
    gp = log.model.g_pinv(log.q, log.qdot, log.t)
    return np.einsum("timn,tin->tim", gp, inner)


@dataclass
class CertificateReport:
    spectral: object
    k_min: float
    chi1: float
    chi2: float
    chi_mode: str
    verdicts: dict
    W_z0: float
    envelope: dict
    lyapunov_descent_fraction: float
    stabilizing_set: dict
    p_function: dict = field(default_factory=dict)
    gains: dict = field(default_factory=dict)

    @property
    def all_pass(self):
        return all(v["pass"] for v in self.verdicts.values())

    def to_dict(self):
        return {
            "spectral": self.spectral.to_dict(),
            "gains": self.gains,
            "k_min": self.k_min,
            "chi1": self.chi1,
            "chi2": self.chi2,
            "chi_mode": self.chi_mode,
            "verdicts": self.verdicts,
            "all_pass": self.all_pass,
            "W_z0": self.W_z0,
            "envelope": self.envelope,
            "lyapunov_descent_fraction": self.lyapunov_descent_fraction,
            "stabilizing_set": self.stabilizing_set,
            "p_function": self.p_function,
        }


@dataclass
class LogAnalysis:
    """All certificate-side traces derived from one log."""

    inter: object
    spectral: object
    signals: DisturbanceSignals
    p_trace: PFunctionTrace
    V: np.ndarray
    descent_fraction: float
    report: CertificateReport


def analyze_log(log, chi=None, chi_mode="trajectory", safety=1.5, chi_samples=100_000,
                rng=None, atol=1e-6, rho=None, descent_skip=0.1):
    """Evaluate every certificate quantity on a trajectory log.

    ``chi`` overrides the estimated ``(chi1, chi2)`` pair, e.g. to reuse the
    values from a separate certification run.
    """
    gains = log.gains
    inter = interaction_matrix(log.topology)
    spec = spectral_summary(inter)
    signals = h_b_trace(log.model, log.t, log.q0, log.q0dot, log.q0ddot)
    if chi is None:
        if chi_mode == "box_sampling":
            rng = np.random.default_rng(0) if rng is None else rng
            chi = chi_box_sampling(log.model, log.model.bounds, rng, n_samples=chi_samples,
                                   t_max=float(log.t[-1]), safety=safety)
            signals.chi1, signals.chi2, signals.mode = chi[0], chi[1], chi_mode
        else:
            chi = chi_estimates(signals, safety)
    chi1, chi2 = chi
    verdicts = gain_conditions(spec, gains, chi1, chi2)
    Hr1 = log.r1 @ inter.H.T
    p_trace = p_function_trace(log.t, Hr1, signals.h_B, signals.h_B_dot, gains)
    z = log.z
    V, frac = lyapunov_trace(z, p_trace, inter, t=log.t, skip=descent_skip)
    z_norm = np.linalg.norm(z, axis=1)
    W = w_value(z[0], spec, gains, chi1)
    rate = spec.lambda_min_Q * gains.lambda_V
    slope, r2, t_fit = fit_exponential_rate(log.t, z_norm)
    best = max_envelope_rate(log.t, z_norm, W, atol)
    envelope = {
        "checked": envelope_check(log.t, z_norm, W, rate, atol),
        "stated": envelope_check(log.t, z_norm, W, 2.0 * rate, atol),
        "atol": atol,
        "largest_lambda_V": best / spec.lambda_min_Q if np.isfinite(best) else best,
        "fitted_rate": slope,
        "fitted_r2": r2,
        "fit_window_end": t_fit,
    }
    k_min = k_min_value(spec, gains)
    report = CertificateReport(
        spectral=spec,
        k_min=k_min,
        chi1=chi1,
        chi2=chi2,
        chi_mode=chi_mode,
        verdicts=verdicts,
        W_z0=W,
        envelope=envelope,
        lyapunov_descent_fraction=frac,
        stabilizing_set=stabilizing_set_check(z[0], k_min, spec, gains, chi1, rho=rho),
        p_function={
            "P0": float(p_trace.P[0]),
            "P0_closed_form": float(p_initial(Hr1[0], signals.h_B[0], gains)),
            "min": float(p_trace.P.min()),
            "max": float(p_trace.P.max()),
        },
        gains=gains.to_dict(),
    )
    return LogAnalysis(inter=inter, spectral=spec, signals=signals, p_trace=p_trace, V=V,
                       descent_fraction=frac, report=report)
