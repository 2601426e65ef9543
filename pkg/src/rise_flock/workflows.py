"""End-to-end operations behind the command-line subcommands.

Each function here is what one subcommand does, minus argument parsing and
exit-code mapping, so the CLI and library callers get identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from rise_flock import records, svgplot
from rise_flock.analysis import analyze_log
from rise_flock.errors import DivergenceError
from rise_flock.sim import compute_metrics, seed_sweep, simulate


def _analyze(log, config, chi=None):
    a = config.analysis
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed).spawn(4)[3]))
    return analyze_log(log, chi=chi, chi_mode=a.chi_mode, safety=a.chi_safety,
                       chi_samples=a.chi_samples, rng=rng, atol=a.envelope_atol)


def metrics_for(log, config):
    a = config.analysis
    window = (a.rms_window[0], min(a.rms_window[1], float(log.t[-1])))
    return compute_metrics(log, window=window, threshold=a.threshold)


@dataclass
class RunResult:
    log: object
    metrics: object
    analysis: object


def run(config, out=None):
    """Simulate, evaluate the certificate on the log, and optionally write the three output files.

    On divergence the partial trajectory (without P and V) is written before
    the :class:`DivergenceError` propagates.
    """
    out = None if out is None else Path(out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        log = simulate(config)
    except DivergenceError as exc:
        if out is not None and exc.partial_log is not None and len(exc.partial_log):
            records.write_trajectory_csv(out / "trajectory.csv", exc.partial_log)
        raise
    metrics = metrics_for(log, config)
    la = _analyze(log, config)
    if out is not None:
        records.write_trajectory_csv(out / "trajectory.csv", log, P=la.p_trace.P, V=la.V)
        records.write_json(out / "metrics.json", metrics.to_dict())
        records.write_json(out / "certificate.json", la.report.to_dict())
    return RunResult(log, metrics, la)


@dataclass
class CertifyResult:
    report: object
    horizon: float

    @property
    def all_pass(self):
        return self.report.all_pass

    def to_dict(self):
        d = self.report.to_dict()
        d["chi_horizon"] = self.horizon
        return d

    def summary_lines(self):
        r = self.report
        lines = [f"chi1={r.chi1:.6g} chi2={r.chi2:.6g} ({r.chi_mode}, horizon {self.horizon:g} s)"]
        for name, v in r.verdicts.items():
            lines.append(
                f"{name}: {'PASS' if v['pass'] else 'FAIL'}  value={v['value']:.6g} > threshold={v['threshold']:.6g}"
            )
        s = r.stabilizing_set
        lines.append(f"k_min={r.k_min:.6g}")
        lines.append(f"W(z0)={r.W_z0:.6g}")
        lines.append(f"rho budget (k_min - lambda_V)/lambda_max_H = {s['budget']:.6g}; verdict: {s['verdict']}")
        return lines


def certify(config, out=None):
    """Gain verdicts from a short noise-free run that supplies the chi estimates."""
    config.gains.check_lambda_P()
    horizon = min(config.analysis.certify_t_end, config.t_end)
    short = replace(config, t_end=horizon, noise_sigma=0.0)
    log = simulate(short)
    result = CertifyResult(_analyze(log, short).report, horizon)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        records.write_json(out / "certificate.json", result.to_dict())
    return result


def sweep(config, seeds, out=None, workers=None):
    result = seed_sweep(config, seeds, workers=workers)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        records.write_json(out / "sweep.json", result)
    return result


def plot(csv_path, kinds=svgplot.KINDS, out=None, threshold=0.05):
    """Render SVGs from a trajectory CSV; returns ``{kind: svg_text}`` and writes ``<kind>.svg`` under ``out``."""
    data = records.read_trajectory_csv(csv_path)
    svgs = {kind: svgplot.render(kind, data, threshold) for kind in kinds}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for kind, text in svgs.items():
            (out / f"{kind}.svg").write_text(text)
    return svgs
