"""Experiment configuration: a flat schema over INI or JSON files.

Files use sections of key=value pairs (INI) or an object of objects
(JSON, chosen by a .json extension).  Every key is declared below with
a parser and a default; unknown sections or keys are rejected rather
than ignored, and `--set section.key=value` overrides go through the
same parsers.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .training import TrainerConfig


class ConfigError(Exception):
    """Bad configuration file, key, or value."""


def _err(key: str, value, why: str) -> ConfigError:
    return ConfigError(f"config key {key!r}: {why} (got {value!r})")


def _to_int(key, v):
    if isinstance(v, bool):
        raise _err(key, v, "expected an integer")
    if isinstance(v, int):
        return v
    if isinstance(v, float) and v.is_integer():
        return int(v)
    if isinstance(v, str):
        try:
            return int(v.strip())
        except ValueError:
            raise _err(key, v, "expected an integer") from None
    raise _err(key, v, "expected an integer")


def _to_float(key, v):
    if isinstance(v, bool):
        raise _err(key, v, "expected a number")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(v.strip())
        except ValueError:
            raise _err(key, v, "expected a number") from None
    raise _err(key, v, "expected a number")


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _to_bool(key, v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str):
        s = v.strip().lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
    raise _err(key, v, "expected a boolean")


def _to_str(key, v):
    if isinstance(v, str):
        return v.strip()
    raise _err(key, v, "expected a string")


def _split_list(v):
    if isinstance(v, str):
        s = v.strip()
        if s.startswith("[") and s.endswith("]"):
            s = s[1:-1]
        return [] if not s else [part.strip() for part in s.split(",")]
    if isinstance(v, (list, tuple)):
        return list(v)
    return None


def _to_int_list(key, v):
    parts = _split_list(v)
    if parts is None:
        raise _err(key, v, "expected a comma-separated integer list")
    return [_to_int(key, p) for p in parts]


def _to_float_list(key, v):
    parts = _split_list(v)
    if parts is None:
        raise _err(key, v, "expected a comma-separated number list")
    return [_to_float(key, p) for p in parts]


def _none_marker(v) -> bool:
    return v is None or (isinstance(v, str) and v.strip().lower() in ("", "none"))


def _to_opt_float(key, v):
    return None if _none_marker(v) else _to_float(key, v)


def _to_opt_float_list(key, v):
    return None if _none_marker(v) else _to_float_list(key, v)


def _to_opt_str(key, v):
    return None if _none_marker(v) else _to_str(key, v)


def _choice(*options: str):
    def parse(key, v):
        s = _to_str(key, v)
        if s not in options:
            raise _err(key, v, f"expected one of {options}")
        return s
    return parse


@dataclass(frozen=True)
class _Field:
    parse: Callable[[str, Any], Any]
    default: Any = None
    required: bool = False


SCHEMA: dict[str, _Field] = {
    "experiment.scenario": _Field(_choice("pendulum", "quadrotor"), required=True),
    "experiment.seed": _Field(_to_int, 0),
    "experiment.out_dir": _Field(_to_opt_str, None),
    "anchor.x_e": _Field(_to_opt_float_list, None),
    "trainer.hidden_sizes": _Field(_to_int_list, [256, 256, 256]),
    "trainer.iters": _Field(_to_int, 1000),
    "trainer.eta": _Field(_to_float, 1e-3),
    "trainer.beta": _Field(_to_float, 1.0),
    "trainer.gamma": _Field(_to_float, 1e-2),
    "trainer.eps_lb": _Field(_to_opt_float, None),
    "trainer.eps_ub": _Field(_to_opt_float, None),
    "trainer.alpha_slope": _Field(_to_float, 1.0),
    "trainer.sampler_k": _Field(_to_float, 4.0),
    "trainer.batch_size": _Field(_to_int, 1024),
    "trainer.mode": _Field(_choice("pcbf", "lccbf"), "pcbf"),
    "trainer.lccbf_feas_weight": _Field(_to_float, 1.0),
    "trainer.lccbf_vol_weight": _Field(_to_float, 0.05),
    "trainer.pretrain_iters": _Field(_to_int, 1000),
    "trainer.pretrain_threshold": _Field(_to_float, 1e-4),
    "trainer.checkpoint_every": _Field(_to_int, 500),
    "trainer.resample": _Field(_to_bool, True),
    "grid.shape": _Field(_to_int_list, [201, 201]),
    "grid.dt": _Field(_to_float, 0.02),
    "grid.tol": _Field(_to_float, 1e-6),
    "grid.max_sweeps": _Field(_to_int, 10_000),
    "simulate.policy": _Field(_choice("pd", "waypoint", "vertex"), "pd"),
    "simulate.duration": _Field(_to_float, 10.0),
    "simulate.dt": _Field(_to_float, 1.0 / 300.0),
    "simulate.x0": _Field(_to_opt_float_list, None),
    "simulate.waypoint": _Field(_to_opt_float_list, None),
    "simulate.vertex_index": _Field(_to_int, 0),
    "simulate.runs": _Field(_to_int, 1),
    "simulate.jobs": _Field(_to_int, 1),
    "simulate.pd_kp": _Field(_to_float, 4.0),
    "simulate.pd_kd": _Field(_to_float, 4.0),
    "simulate.pos_kp": _Field(_to_float, 1.2),
    "simulate.pos_kd": _Field(_to_float, 1.8),
    "simulate.att_kp": _Field(_to_float, 16.0),
    "simulate.att_kd": _Field(_to_float, 4.0),
    "simulate.max_tilt": _Field(_to_float, 0.5),
    "volume.n_samples": _Field(_to_int, 1_000_000),
    "compare.n_samples": _Field(_to_int, 200_000),
    "slice.dims": _Field(_to_int_list, [0, 1]),
    "slice.fixed": _Field(_to_opt_float_list, None),
    "slice.resolution": _Field(_to_int, 201),
}


@dataclass
class ExperimentConfig:
    """Resolved, schema-checked configuration for one experiment run."""

    values: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def scenario(self) -> str:
        return self.values["experiment.scenario"]

    @property
    def seed(self) -> int:
        return self.values["experiment.seed"]

    @property
    def out_dir(self):
        return self.values["experiment.out_dir"]

    def anchor(self):
        x_e = self.values["anchor.x_e"]
        return None if x_e is None else np.asarray(x_e, dtype=np.float64)

    def trainer(self) -> TrainerConfig:
        v = self.values
        cfg = TrainerConfig(
            hidden_sizes=tuple(v["trainer.hidden_sizes"]),
            iters=v["trainer.iters"],
            eta=v["trainer.eta"],
            beta=v["trainer.beta"],
            gamma=v["trainer.gamma"],
            eps_lb=v["trainer.eps_lb"],
            eps_ub=v["trainer.eps_ub"],
            alpha_slope=v["trainer.alpha_slope"],
            sampler_k=v["trainer.sampler_k"],
            batch_size=v["trainer.batch_size"],
            seed=v["experiment.seed"],
            mode=v["trainer.mode"],
            lccbf_feas_weight=v["trainer.lccbf_feas_weight"],
            lccbf_vol_weight=v["trainer.lccbf_vol_weight"],
            pretrain_iters=v["trainer.pretrain_iters"],
            pretrain_threshold=v["trainer.pretrain_threshold"],
            checkpoint_every=v["trainer.checkpoint_every"],
            resample=v["trainer.resample"],
        )
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def as_dict(self) -> dict:
        """Nested {section: {key: value}} echo for manifests."""
        out: dict[str, dict] = {}
        for dotted, value in sorted(self.values.items()):
            section, key = dotted.split(".", 1)
            out.setdefault(section, {})[key] = value
        return out


def _read_raw(path) -> dict[str, Any]:
    """Flat {section.key: raw value} from an INI or JSON file."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    raw: dict[str, Any] = {}
    if p.suffix.lower() == ".json":
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {p}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be an object of sections")
        for section, body in doc.items():
            if not isinstance(body, dict):
                raise ConfigError(f"{p}: section {section!r} must be an object")
            for key, value in body.items():
                raw[f"{section}.{key}"] = value
    else:
        cp = configparser.RawConfigParser()
        try:
            with open(p) as f:
                cp.read_file(f, source=str(p))
        except configparser.Error as exc:
            raise ConfigError(f"invalid config file {p}: {exc}") from None
        for section in cp.sections():
            for key, value in cp.items(section):
                raw[f"{section}.{key}"] = value
    return raw


def parse_overrides(pairs) -> dict[str, str]:
    """--set arguments, each 'section.key=value'."""
    out: dict[str, str] = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.key")
        out[key] = value
    return out


def resolve_config(path=None, overrides=None) -> ExperimentConfig:
    """Merge file + overrides, check against the schema, fill defaults."""
    raw = _read_raw(path) if path is not None else {}
    raw.update(parse_overrides(overrides))
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values: dict[str, Any] = {}
    for key, spec in SCHEMA.items():
        if key in raw:
            values[key] = spec.parse(key, raw[key])
        elif spec.required:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            values[key] = spec.default
    return ExperimentConfig(values=values)
