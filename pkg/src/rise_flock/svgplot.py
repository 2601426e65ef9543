"""Plain-text SVG line plots of a trajectory CSV."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from rise_flock.errors import ValidationError

KINDS = ("error_norms", "traj3d_projection", "lyapunov")
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]
W, H = 640, 400
MARGIN = (60, 20, 30, 45)  # left, right, top, bottom
MAX_POINTS = 2000


def _fmt(x):
    return f"{x:.6g}"


def _tick(x):
    return f"{x:.4g}"


def _ticks(lo, hi, count=5):
    return [lo + (hi - lo) * k / (count - 1) for k in range(count)]


class Panel:
    """One set of axes occupying a rectangle of the canvas."""

    def __init__(self, x0, y0, w, h, xlim, ylim, log_y=False, title="", xlabel="", ylabel=""):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.log_y = log_y
        if log_y:
            ylim = (np.log10(ylim[0]), np.log10(ylim[1]))
        self.xlim = _widen(*xlim)
        self.ylim = _widen(*ylim)
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.items = []

    def sx(self, x):
        lo, hi = self.xlim
        return self.x0 + (np.asarray(x) - lo) / (hi - lo) * self.w

    def sy(self, y):
        y = np.asarray(y, float)
        if self.log_y:
            y = np.log10(y)
        lo, hi = self.ylim
        return self.y0 + self.h - (y - lo) / (hi - lo) * self.h

    def line(self, x, y, color, width=1.2, dash=None):
        x, y = np.asarray(x, float), np.asarray(y, float)
        keep = np.isfinite(x) & np.isfinite(y)
        if self.log_y:
            keep &= y > 0
        x, y = x[keep], y[keep]
        if len(x) == 0:
            return
        step = max(1, len(x) // MAX_POINTS)
        x, y = x[::step], y[::step]
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(self.sx(x), self.sy(y)))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{extra} points="{pts}"/>'
        )

    def label(self, x, y, text, color="#000"):
        self.items.append(f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="11" fill="{color}">{escape(text)}</text>')

    def render(self):
        out = [f'<rect x="{self.x0}" y="{self.y0}" width="{self.w}" height="{self.h}" fill="none" stroke="#444"/>']
        for v in _ticks(*self.xlim):
            px = self.sx(v)
            out.append(f'<text x="{_fmt(px)}" y="{self.y0 + self.h + 14}" font-size="10" text-anchor="middle">{_tick(v)}</text>')
        for v in _ticks(*self.ylim):
            py = self.y0 + self.h - (v - self.ylim[0]) / (self.ylim[1] - self.ylim[0]) * self.h
            text = f"1e{v:.2g}" if self.log_y else _tick(v)
            out.append(f'<text x="{self.x0 - 4}" y="{_fmt(py + 3)}" font-size="10" text-anchor="end">{text}</text>')
        out.append(f'<text x="{self.x0 + self.w / 2}" y="{self.y0 - 6}" font-size="12" text-anchor="middle">{escape(self.title)}</text>')
        out.append(f'<text x="{self.x0 + self.w / 2}" y="{self.y0 + self.h + 30}" font-size="11" text-anchor="middle">{escape(self.xlabel)}</text>')
        cy = self.y0 + self.h / 2
        out.append(
            f'<text x="{self.x0 - 48}" y="{cy}" font-size="11" text-anchor="middle" '
            f'transform="rotate(-90 {self.x0 - 48} {cy})">{escape(self.ylabel)}</text>'
        )
        clip = f"clip{self.x0}_{self.y0}"
        out.append(f'<clipPath id="{clip}"><rect x="{self.x0}" y="{self.y0}" width="{self.w}" height="{self.h}"/></clipPath>')
        out.append(f'<g clip-path="url(#{clip})">')
        out.extend(i for i in self.items if i.startswith("<polyline"))
        out.append("</g>")
        out.extend(i for i in self.items if not i.startswith("<polyline"))
        return out


def _widen(lo, hi):
    lo, hi = float(lo), float(hi)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        return 0.0, 1.0
    if hi - lo < 1e-12 * max(1.0, abs(lo)):
        pad = 0.5 * max(1.0, abs(lo))
        return lo - pad, hi + pad
    return lo, hi


def _document(width, height, panels):
    body = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for p in panels:
        body.extend(p.render())
    body.append("</svg>")
    return "\n".join(body) + "\n"


def _legend(panel, names):
    for k, name in enumerate(names):
        color = PALETTE[k % len(PALETTE)]
        panel.label(panel.x0 + panel.w - 70, panel.y0 + 14 + 13 * k, name, color)


def error_norms_svg(data, threshold=0.05):
    t = data["t"]
    norms = np.linalg.norm(data["e"], axis=-1)
    left, right, top, bottom = MARGIN
    panel = Panel(left, top, W - left - right, H - top - bottom, (t[0], t[-1]),
                  (0.0, max(float(np.nanmax(norms)), threshold) * 1.05),
                  title="tracking error norms", xlabel="t [s]", ylabel="||e_i|| [m]")
    for i in range(norms.shape[1]):
        panel.line(t, norms[:, i], PALETTE[i % len(PALETTE)])
    panel.line([t[0], t[-1]], [threshold, threshold], "#000", width=1.0, dash="5,4")
    panel.label(panel.x0 + 4, panel.sy(threshold) - 4, f"{threshold:g} m")
    _legend(panel, [f"agent {i + 1}" for i in range(norms.shape[1])])
    return _document(W, H, [panel])


def traj3d_projection_svg(data):
    q, q0 = data["q"], data["q0"]
    n = q.shape[-1]
    pairs = [(0, 1), (0, 2)] if n >= 3 else [(0, 1 if n > 1 else 0)]
    names = "xyz"
    width = W * len(pairs)
    left, right, top, bottom = MARGIN
    pw = (width - len(pairs) * (left + right)) / len(pairs)
    panels = []
    for k, (a, b) in enumerate(pairs):
        xs = np.concatenate([q[..., a].ravel(), q0[:, a]])
        ys = np.concatenate([q[..., b].ravel(), q0[:, b]])
        p = Panel(left + k * (pw + left + right), top, pw, H - top - bottom,
                  (np.nanmin(xs), np.nanmax(xs)), (np.nanmin(ys), np.nanmax(ys)),
                  title=f"{names[a]}-{names[b]} projection", xlabel=f"{names[a]} [m]", ylabel=f"{names[b]} [m]")
        for i in range(q.shape[1]):
            p.line(q[:, i, a], q[:, i, b], PALETTE[i % len(PALETTE)], width=1.0)
        p.line(q0[:, a], q0[:, b], "#000", width=2.0, dash="6,3")
        panels.append(p)
    panels[0].label(panels[0].x0 + 4, panels[0].y0 + 14, "target (dashed)")
    return _document(width, H, panels)


def lyapunov_svg(data):
    t, V, P = data["t"], data["V"], data["P"]
    pos = np.concatenate([V[np.isfinite(V) & (V > 0)], P[np.isfinite(P) & (P > 0)]])
    if len(pos) == 0:
        raise ValidationError("lyapunov plot needs positive V or P values")
    left, right, top, bottom = MARGIN
    panel = Panel(left, top, W - left - right, H - top - bottom, (t[0], t[-1]),
                  (pos.min(), pos.max()), log_y=True,
                  title="Lyapunov function and P-function", xlabel="t [s]", ylabel="value (log)")
    panel.line(t, V, PALETTE[0])
    panel.line(t, P, PALETTE[1], dash="5,3")
    _legend(panel, ["V", "P"])
    return _document(W, H, [panel])


def render(kind, data, threshold=0.05):
    if kind == "error_norms":
        return error_norms_svg(data, threshold)
    if kind == "traj3d_projection":
        return traj3d_projection_svg(data)
    if kind == "lyapunov":
        return lyapunov_svg(data)
    raise ValidationError(f"unknown plot kind {kind!r} (expected one of {', '.join(KINDS)})")
