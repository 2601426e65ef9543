"""Scenario configuration: JSON loading, defaults, dotted-key overrides, validation."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from rise_flock.controller import ControllerGains
from rise_flock.errors import ValidationError
from rise_flock.graph import GraphTopology

SCHEMA_VERSION = 1

DEFAULTS = {
    "schema": SCHEMA_VERSION,
    "model": {"name": "paper_sec6", "c": None, "bounds": None, "params": {}},
    "gains": {"k1": 10.0, "k2": 10.0, "k3": 25.0, "k4": 50.0, "lambda_P": 0.5, "lambda_V": 0.25},
    "sim": {
        "t_end": 30.0,
        "dt": 1e-3,
        "log_stride": 1,
        "noise_sigma": 0.001,
        "seed": 0,
        "init_range": [-10.0, 10.0],
        "target_q0": [0.0, 0.0, 0.0],
        "target_v0": [1.0, -1.0, 0.5],
    },
    "analysis": {
        "chi_mode": "trajectory",
        "chi_safety": 1.5,
        "chi_samples": 100000,
        "rms_window": [0.0, 2.5],
        "threshold": 0.05,
        "certify_t_end": 5.0,
        "envelope_atol": 1e-6,
    },
}


@dataclass(frozen=True)
class AnalysisOptions:
    chi_mode: str = "trajectory"
    chi_safety: float = 1.5
    chi_samples: int = 100000
    rms_window: tuple[float, float] = (0.0, 2.5)
    threshold: float = 0.05
    certify_t_end: float = 5.0
    envelope_atol: float = 1e-6


@dataclass(frozen=True)
class ScenarioConfig:
    topology: GraphTopology
    gains: ControllerGains
    model: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["model"]))
    t_end: float = 30.0
    dt: float = 1e-3
    log_stride: int = 1
    noise_sigma: float = 0.001
    seed: int = 0
    init_range: tuple[float, float] = (-10.0, 10.0)
    target_q0: tuple[float, ...] = (0.0, 0.0, 0.0)
    target_v0: tuple[float, ...] = (1.0, -1.0, 0.5)
    analysis: AnalysisOptions = field(default_factory=AnalysisOptions)

    def __post_init__(self):
        validate(self)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "topology": self.topology.to_dict(),
            "model": copy.deepcopy(self.model),
            "gains": self.gains.to_dict(),
            "sim": {
                "t_end": self.t_end,
                "dt": self.dt,
                "log_stride": self.log_stride,
                "noise_sigma": self.noise_sigma,
                "seed": self.seed,
                "init_range": list(self.init_range),
                "target_q0": list(self.target_q0),
                "target_v0": list(self.target_v0),
            },
            "analysis": {
                k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.analysis.__dict__.items()
            },
        }


def validate(cfg):
    def positive(key, value):
        if not (isinstance(value, (int, float)) and np.isfinite(value) and value > 0):
            raise ValidationError(f"{key} must be > 0, got {value!r}")

    positive("sim.dt", cfg.dt)
    positive("sim.t_end", cfg.t_end)
    if cfg.t_end < cfg.dt:
        raise ValidationError(f"sim.t_end={cfg.t_end} must be >= sim.dt={cfg.dt}")
    if not isinstance(cfg.log_stride, int) or cfg.log_stride < 1:
        raise ValidationError(f"sim.log_stride must be an integer >= 1, got {cfg.log_stride!r}")
    if not (np.isfinite(cfg.noise_sigma) and cfg.noise_sigma >= 0):
        raise ValidationError(f"sim.noise_sigma must be >= 0, got {cfg.noise_sigma!r}")
    if not isinstance(cfg.seed, int) or not (0 <= cfg.seed < 2**64):
        raise ValidationError(f"sim.seed must be an integer in [0, 2**64), got {cfg.seed!r}")
    lo, hi = cfg.init_range
    if not lo < hi:
        raise ValidationError(f"sim.init_range must satisfy lo < hi, got {cfg.init_range}")
    n = cfg.topology.n
    for key, vec in (("sim.target_q0", cfg.target_q0), ("sim.target_v0", cfg.target_v0)):
        if len(vec) != n:
            raise ValidationError(f"{key} must have length n={n}")
    a = cfg.analysis
    if a.chi_mode not in ("trajectory", "box_sampling"):
        raise ValidationError(f"analysis.chi_mode must be 'trajectory' or 'box_sampling', got {a.chi_mode!r}")
    if not a.chi_safety >= 1:
        raise ValidationError(f"analysis.chi_safety must be >= 1, got {a.chi_safety}")
    positive("analysis.threshold", a.threshold)
    positive("analysis.certify_t_end", a.certify_t_end)


def _merge(base, extra, path=""):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in ("params", "bounds"):
            out[key] = _merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw, overrides):
    """Apply ``key.path=value`` strings to a config dict; keys must already exist."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ValidationError(f"override key {key!r} does not exist in the config")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ValidationError(f"override key {key!r} does not exist in the config")
        node[parts[-1]] = _parse_value(text)
    return raw


def _num(block, key, prefix, kind=float):
    value = block[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{prefix}.{key} must be a number, got {value!r}")
    if kind is int:
        if float(value) != int(value):
            raise ValidationError(f"{prefix}.{key} must be an integer, got {value!r}")
        return int(value)
    return float(value)


def from_dict(data, overrides=None):
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    schema = data.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema {schema!r} (expected {SCHEMA_VERSION})")
    if "topology" not in data:
        raise ValidationError("config is missing the 'topology' block")
    unknown = set(data) - set(DEFAULTS) - {"topology", "name", "description"}
    if unknown:
        raise ValidationError(f"unknown top-level config keys: {sorted(unknown)}")
    raw = _merge(DEFAULTS, data)
    raw = apply_overrides(raw, overrides)
    for section in ("sim", "analysis", "gains"):
        extra = set(raw[section]) - set(DEFAULTS[section])
        if extra:
            raise ValidationError(f"unknown keys in {section}: {sorted(extra)}")
    topology = GraphTopology.from_dict(raw["topology"])
    gains = ControllerGains(**{k: _num(raw["gains"], k, "gains") for k in raw["gains"]})
    s, a = raw["sim"], raw["analysis"]
    analysis = AnalysisOptions(
        chi_mode=a["chi_mode"],
        chi_safety=_num(a, "chi_safety", "analysis"),
        chi_samples=_num(a, "chi_samples", "analysis", int),
        rms_window=tuple(float(x) for x in a["rms_window"]),
        threshold=_num(a, "threshold", "analysis"),
        certify_t_end=_num(a, "certify_t_end", "analysis"),
        envelope_atol=_num(a, "envelope_atol", "analysis"),
    )
    return ScenarioConfig(
        topology=topology,
        gains=gains,
        model=raw["model"],
        t_end=_num(s, "t_end", "sim"),
        dt=_num(s, "dt", "sim"),
        log_stride=_num(s, "log_stride", "sim", int),
        noise_sigma=_num(s, "noise_sigma", "sim"),
        seed=_num(s, "seed", "sim", int),
        init_range=tuple(float(x) for x in s["init_range"]),
        target_q0=tuple(float(x) for x in s["target_q0"]),
        target_v0=tuple(float(x) for x in s["target_v0"]),
        analysis=analysis,
    )


def load(path, overrides=None):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file {str(path)!r} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {str(path)!r} is not valid JSON: {exc}") from None
    return from_dict(data, overrides)


def bundled_path(name="paper_sec6.json"):
    return resources.files("rise_flock").joinpath("scenarios", name)


def bundled_scenario(overrides=None):
    """The eight-agent cycle scenario shipped with the package."""
    with resources.as_file(bundled_path()) as p:
        return load(p, overrides)
