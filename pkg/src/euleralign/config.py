"""Run configuration: strict parsing of the declarative config file.

Two accepted formats for one config:
  * nested-key text: lines of `section.key = value` (values are Python
    literals; lists mark sweep ranges), comments with '#'
  * JSON with the same sections as nested objects.

Unknown keys fail before any computation.
"""

from __future__ import annotations

import ast
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .fields import Grid1D
from .kernels import KernelSpec
from .solver import SolverConfig


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "scenario": {
        "kind": str,
        "g_min": float, "rho_base": float, "rho_amp": float,
        "bump_center": float, "bump_width": float,
        "g_center": float, "g_width": float, "g_amp": float, "g_dist": float,
        "a": float, "b": float, "floor_c": float, "shoulder": float,
        "plateau_half_width": float, "separation": float,
        "q_base": float, "q_amp": float,
        "epsilon": float, "L_dist": float, "t_star": float,
        "momentum": float,
    },
    "kernel": {
        "family": str, "s": float, "p": float, "c": float,
        "lam": float, "Lam": float,
    },
    "grid": {
        "domain": str, "length": float, "x_min": float, "x_max": float,
        "n": int,
    },
    "solver": {
        "scheme": str, "cfl": float, "t_max": float, "dt_min": float,
        "rate_cap": float, "g_floor": float, "rho_ceiling": float,
        "gap_floor_factor": float, "rel_growth": float,
        "cell_mass_fraction": float, "pair_gap_cells": float,
        "snapshot_count": int, "n_particles": int, "max_steps": int,
    },
    "output": {
        "dir": str, "formats": str,
    },
    "sweep": {
        "max_runs": int,
    },
    "": {"seed": int},
}

_SWEEPABLE = {"kernel.s", "scenario.g_min", "scenario.epsilon",
              "scenario.floor_c", "scenario.a", "scenario.b"}


@dataclass
class RunConfig:
    scenario: dict = field(default_factory=dict)
    kernel: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    seed: int = 0
    sweep_ranges: dict = field(default_factory=dict)   # "section.key" -> list

    def config_hash(self) -> str:
        payload = json.dumps(
            {"scenario": self.scenario, "kernel": self.kernel,
             "grid": self.grid, "solver": self.solver, "seed": self.seed,
             "sweep": self.sweep_ranges},
            sort_keys=True, default=repr)
        return hashlib.sha256(payload.encode()).hexdigest()

    def kernel_spec(self) -> KernelSpec:
        kw = dict(self.kernel)
        family = kw.pop("family", None)
        if family is None:
            raise ConfigError("kernel.family is required")
        try:
            return KernelSpec(family, **kw)
        except ValueError as e:
            raise ConfigError(f"kernel: {e}") from e

    def grid_spec(self) -> Grid1D:
        kw = dict(self.grid)
        domain = kw.pop("domain", None)
        n = kw.pop("n", None)
        if domain is None or n is None:
            raise ConfigError("grid.domain and grid.n are required")
        try:
            if domain == "torus":
                return Grid1D.torus(kw.pop("length"), n)
            if domain == "window":
                return Grid1D.window(kw.pop("x_min"), kw.pop("x_max"), n)
        except KeyError as e:
            raise ConfigError(f"grid: missing {e.args[0]} for {domain}") from e
        except ValueError as e:
            raise ConfigError(f"grid: {e}") from e
        raise ConfigError(f"grid.domain must be torus or window, got {domain!r}")

    def solver_config(self) -> SolverConfig:
        try:
            return SolverConfig(**self.solver)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"solver: {e}") from e

    def build_scenario(self):
        from .scenarios import build_scenario
        params = dict(self.scenario)
        kind = params.pop("kind", None)
        if kind is None:
            raise ConfigError("scenario.kind is required")
        momentum = params.pop("momentum", 0.0)
        return build_scenario(kind, self.kernel_spec(), self.grid_spec(),
                              params, momentum)


def _check_key(section: str, key: str, value):
    sect = _SCHEMA.get(section)
    if sect is None:
        raise ConfigError(f"unknown config section {section!r}")
    if key not in sect:
        raise ConfigError(f"unknown config key {section + '.' + key!r}")
    want = sect[key]
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, want) or isinstance(value, bool):
        raise ConfigError(
            f"config key {section + '.' + key!r} needs {want.__name__}, "
            f"got {value!r}")
    return value


def _validate_physics(cfg: RunConfig) -> RunConfig:
    s = cfg.kernel.get("s")
    fam = cfg.kernel.get("family")
    if fam in ("power_singular", "power_with_tail") and s is not None:
        if not 0.0 < s < 1.0:
            raise ConfigError(
                f"kernel.s = {s} outside the weakly singular range (0, 1)")
    return cfg


def parse_config(path) -> RunConfig:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return parse_config_json(text)
    return parse_config_text(text)


def parse_config_json(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON config: {e}") from e
    cfg = RunConfig()
    for section, entries in data.items():
        if section == "seed":
            cfg.seed = _check_key("", "seed", entries)
            continue
        if not isinstance(entries, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in entries.items():
            _assign(cfg, section, key, value)
    return _validate_physics(cfg)


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'section.key = value'")
        lhs, rhs = (part.strip() for part in line.split("=", 1))
        try:
            value = ast.literal_eval(rhs)
        except (ValueError, SyntaxError):
            value = rhs  # bare strings (e.g. torus) read as-is
        if lhs == "seed":
            cfg.seed = _check_key("", "seed", value)
            continue
        if "." not in lhs:
            raise ConfigError(f"line {ln}: unknown top-level key {lhs!r}")
        section, key = lhs.split(".", 1)
        _assign(cfg, section, key, value, ln)
    return _validate_physics(cfg)


def _assign(cfg: RunConfig, section: str, key: str, value, ln: int | None = None):
    where = f"line {ln}: " if ln else ""
    if isinstance(value, list):
        full = f"{section}.{key}"
        if full not in _SWEEPABLE:
            raise ConfigError(f"{where}key {full!r} does not accept a range")
        if len(value) == 0:
            raise ConfigError(f"{where}empty range for {full!r}")
        vals = [_check_key(section, key, v) for v in value]
        cfg.sweep_ranges[full] = vals
        getattr(cfg, section)[key] = vals[0]
        return
    value = _check_key(section, key, value)
    if not hasattr(cfg, section):
        raise ConfigError(f"{where}unknown section {section!r}")
    getattr(cfg, section)[key] = value
