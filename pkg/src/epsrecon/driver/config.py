"""Experiment configuration: a strict ``key = value`` grammar with sections.

Grammar::

    # comment            (also after values)
    [section]
    key = value

Values are floats, integers, words, or comma-separated float lists. Every
key belongs to a section and must appear in ``SCHEMA``; duplicates, unknown
keys and values violating a constraint are rejected with the line number.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

from ..errors import ConfigError

OUTPUT_ENV = "EPSRECON_OUTPUT_DIR"

REQUIRED = object()


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


# section -> key -> (parser, default, constraint, description)
SCHEMA = {
    "domain": {
        "lower": (_floats, REQUIRED, None, "lower box corner"),
        "upper": (_floats, REQUIRED, None, "upper box corner"),
        "resolution": (_floats, (8.0,), None, "cells per axis (one value or one per axis)"),
        "eps_degree": (int, 1, lambda v: v in (1, 2), "polynomial degree of eps"),
    },
    "time": {
        "T": (float, REQUIRED, _positive, "final time"),
        "steps": (int, REQUIRED, lambda v: v >= 1, "number of time intervals"),
        "stable_steps": (str, "on", lambda v: v in ("on", "off"), "raise steps to the stability limit"),
    },
    "source": {
        "side": (str, "top", None, "boundary side carrying the pulse"),
        "direction": (_floats, (1.0,), None, "pulse polarization"),
        "profile": (str, "sine", lambda v: v in ("sine", "ricker"), "temporal profile"),
        "frequency": (float, 1.0, _positive, "pulse frequency"),
        "amplitude": (float, 1.0, None, "pulse amplitude"),
    },
    "target": {
        "center": (_floats, None, None, "inclusion center"),
        "width": (float, 0.1, _positive, "Gaussian width"),
        "amplitude": (float, 1.0, _nonneg, "inclusion contrast"),
        "fine_factor": (int, 2, lambda v: v >= 1 and (v & (v - 1)) == 0, "synthesis refinement (power of 2)"),
        "observations": (str, None, None, "trace CSV to use instead of synthesis"),
    },
    "regularization": {
        "alpha": (float, 0.01, _positive, "Tikhonov parameter"),
        "eps_max": (float, 15.0, lambda v: v >= 1, "upper bound of eps"),
        "delta": (float, None, _positive, "cut-off width (default 0.1 T)"),
        "eps0": (float, 1.0, lambda v: v >= 1, "constant reference coefficient"),
    },
    "optimizer": {
        "max_iter": (int, 30, _nonneg, "iteration cap per cycle"),
        "tol": (float, 1e-6, _positive, "relative projected-gradient tolerance"),
        "atol": (float, 1e-12, _nonneg, "absolute projected-gradient tolerance"),
        "initial_change": (float, 0.5, _positive, "max change of eps in the first trial step"),
    },
    "adaptivity": {
        "fraction": (float, 0.3, lambda v: 0 < v <= 1, "bulk marking fraction"),
        "max_cycles": (int, 1, lambda v: v >= 1, "number of reconstruction cycles"),
        "threshold": (float, 0.0, _nonneg, "stop when the indicator total falls below"),
    },
    "noise": {
        "sigma": (float, 0.0, _nonneg, "relative noise level"),
        "seed": (int, 0, None, "random seed"),
    },
    "output": {
        "dir": (str, "output", None, "output directory"),
    },
}


@dataclass
class ExperimentConfig:
    """Resolved configuration; ``values[section][key]`` holds every key with defaults applied."""

    values: dict = field(default_factory=dict)
    source_path: str | None = None

    def __getitem__(self, item):
        section, key = item.split(".")
        return self.values[section][key]

    @property
    def dim(self):
        return len(self["domain.lower"])

    @property
    def resolution(self):
        r = self["domain.resolution"]
        return tuple(int(v) for v in (r * self.dim if len(r) == 1 else r))

    @property
    def delta(self):
        d = self["regularization.delta"]
        return 0.1 * self["time.T"] if d is None else d

    @property
    def output_dir(self):
        return os.environ.get(OUTPUT_ENV) or self["output.dir"]

    def dump(self) -> str:
        """Resolved config in the input grammar, every key explicit."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                v = self.values[section][key]
                if key == "delta" and v is None:
                    v = self.delta
                if v is None:
                    continue
                lines.append(f"{key} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


def _format(v):
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(section, key, text, lineno):
    parser, _, constraint, _ = SCHEMA[section][key]
    try:
        value = parser(text)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r}", lineno) from None
    if isinstance(value, float) and not math.isfinite(value):
        raise ConfigError(f"{section}.{key}: value must be finite", lineno)
    if isinstance(value, tuple) and not all(math.isfinite(x) for x in value):
        raise ConfigError(f"{section}.{key}: values must be finite", lineno)
    if constraint is not None and not constraint(value):
        raise ConfigError(f"{section}.{key}: value {text!r} violates its constraint", lineno)
    return value


def parse_text(text: str, overrides=(), source_path=None) -> ExperimentConfig:
    """Parse config text; ``overrides`` are ``section.key=value`` strings applied afterwards."""
    seen = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}", lineno)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {section}.{key} (first on line {seen[section, key][0]})", lineno)
        seen[section, key] = (lineno, _parse_value(section, key, value, lineno))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        name, value = item.split("=", 1)
        section, key = name.strip().split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {name.strip()}")
        seen[section, key] = (None, _parse_value(section, key, value.strip(), None))

    values = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (_, default, _, _) in keys.items():
            if (sec, key) in seen:
                values[sec][key] = seen[sec, key][1]
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {sec}.{key}")
            else:
                values[sec][key] = default
    cfg = ExperimentConfig(values, source_path)
    _validate(cfg, seen)
    return cfg


def _validate(cfg: ExperimentConfig, seen):
    def line(sec, key):
        return seen.get((sec, key), (None,))[0]

    lower, upper = cfg["domain.lower"], cfg["domain.upper"]
    if len(lower) not in (2, 3) or len(upper) != len(lower):
        raise ConfigError("domain corners must both have 2 or 3 coordinates", line("domain", "upper"))
    if any(u <= lo for lo, u in zip(lower, upper)):
        raise ConfigError("domain.upper must exceed domain.lower on every axis", line("domain", "upper"))
    res = cfg["domain.resolution"]
    if len(res) not in (1, cfg.dim) or any(r < 1 or r != int(r) for r in res):
        raise ConfigError("domain.resolution must be positive integers", line("domain", "resolution"))
    if len(cfg["source.direction"]) not in (1, cfg.dim):
        raise ConfigError("source.direction needs one entry per axis", line("source", "direction"))
    sides = side_names(cfg.dim)
    if cfg["source.side"] not in sides:
        raise ConfigError(f"source.side must be one of {sorted(sides)}", line("source", "side"))
    center = cfg["target.center"]
    if center is not None and len(center) != cfg.dim:
        raise ConfigError("target.center needs one entry per axis", line("target", "center"))
    if cfg["regularization.eps0"] > cfg["regularization.eps_max"]:
        raise ConfigError("eps0 exceeds eps_max", line("regularization", "eps0"))
    if center is not None and 1 + cfg["target.amplitude"] > cfg["regularization.eps_max"]:
        raise ConfigError("inclusion contrast exceeds eps_max", line("target", "amplitude"))


def side_names(dim):
    """Map of side names to boundary tags ``2 * axis + side``."""
    axes = "xyz"[:dim]
    names = {f"{a}{s}": 2 * i + j for i, a in enumerate(axes) for j, s in enumerate(("min", "max"))}
    names["top"] = 2 * (dim - 1) + 1
    names["bottom"] = 2 * (dim - 1)
    return names


def parse_config(path, overrides=()) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, overrides, source_path=str(path))
