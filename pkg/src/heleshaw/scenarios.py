"""Scenario configuration: JSON schema, presets and builders for every solver."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .grid import BoundaryData, Field, Geometry, Grid, SourceCoefficient, build_grid
from .limit import LimitParams
from .pme import PMEParams, harmonic_pressure, prepare_initial_density

SOLVERS = ("pme", "limit", "radial_oracle", "tumor")

SCHEMA = {
    "type": "object",
    "required": ["solver", "geometry", "n_cells", "t_end"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "solver": {"enum": list(SOLVERS)},
        "geometry": {
            "type": "object",
            "required": ["kind", "inner", "outer"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["cartesian1d", "radial"]},
                "n": {"type": "integer", "minimum": 1, "maximum": 3},
                "inner": {"type": "number"},
                "outer": {"type": "number"},
            },
        },
        "n_cells": {"type": "integer", "minimum": 4},
        "m": {"type": "number", "exclusiveMinimum": 1},
        "lambda": {
            "type": "object",
            "required": ["stages"],
            "additionalProperties": False,
            "properties": {
                "stages": {
                    "type": "array", "minItems": 1,
                    "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                },
                "bound": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "f": {
            "oneOf": [
                {"type": "number", "exclusiveMinimum": 0},
                {
                    "type": "object", "required": ["times", "values"], "additionalProperties": False,
                    "properties": {
                        "times": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                        "values": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                    },
                },
            ]
        },
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "front": {"type": "number"},
                "rho_ext": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "csv": {"type": "string"},
                "half_width": {"type": "number", "exclusiveMinimum": 0},
                "amplitude": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "t_end": {"type": "number", "minimum": 0},
        "output_times": {
            "oneOf": [
                {"type": "array", "items": {"type": "number", "minimum": 0}},
                {"type": "object", "required": ["every"], "additionalProperties": False,
                 "properties": {"every": {"type": "number", "exclusiveMinimum": 0}}},
            ]
        },
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "cfl_safety": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_dt": {"type": "number", "exclusiveMinimum": 0},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "eps_sat": {"type": "number", "exclusiveMinimum": 0},
                "p_tol": {"type": "number", "exclusiveMinimum": 0},
                "obstacle_tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "tumor": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number"},
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "k0": {"type": "number", "minimum": 0},
                "c_B": {"type": "number", "exclusiveMinimum": 0},
                "exchange_off": {"type": "boolean"},
                "frozen_nutrient": {"type": "boolean"},
            },
        },
        "seed": {"type": "integer"},
    },
}

DEFAULT_TOL = {"cfl_safety": 0.9, "max_dt": 1e-3, "dt": 1e-3, "eps_sat": 1e-6, "p_tol": 1e-8,
               "obstacle_tol": 1e-10}


class ConfigError(ValueError):
    pass


def validate_config(cfg: dict, base_dir: Path | None = None) -> dict:
    """Schema check plus semantic checks; returns a normalized deep copy."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message}") from None
    cfg = copy.deepcopy(cfg)
    geo = cfg["geometry"]
    if geo["inner"] >= geo["outer"]:
        raise ConfigError("geometry: inner must be < outer")
    if cfg["solver"] in ("pme", "tumor") and "m" not in cfg:
        raise ConfigError(f"solver {cfg['solver']} needs m")
    if cfg["solver"] == "tumor" and geo["kind"] != "cartesian1d":
        raise ConfigError("the tumor model runs on a cartesian line")
    csv_path = cfg.get("initial", {}).get("csv")
    if csv_path is not None:
        path = Path(csv_path)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"initial data file not found: {csv_path}")
        cfg["initial"]["csv"] = str(path)
    f = cfg.get("f", 1.0)
    if isinstance(f, dict) and len(f["times"]) != len(f["values"]):
        raise ConfigError("f: times and values differ in length")
    try:
        scenario_from_config(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return validate_config(cfg, path.parent)


def preset_names() -> list[str]:
    files = resources.files("heleshaw").joinpath("presets").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    res = resources.files("heleshaw").joinpath("presets", f"{name}.json")
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return validate_config(json.loads(res.read_text()))


@dataclass
class Scenario:
    """A fully built problem: grid, data and solver parameters."""

    config: dict
    grid: Grid
    lam: SourceCoefficient
    f: BoundaryData
    t_end: float
    output_times: list

    @property
    def solver(self) -> str:
        return self.config["solver"]

    @property
    def tol(self) -> dict:
        return {**DEFAULT_TOL, **self.config.get("tolerances", {})}

    @property
    def initial(self) -> dict:
        return self.config.get("initial", {})

    @property
    def front0(self) -> float:
        x = self.grid.nodes
        return float(self.initial.get("front", x[0] + 0.2 * (x[-1] - x[0])))

    @property
    def rho_ext(self) -> float:
        return float(self.initial.get("rho_ext", 0.0))

    def _csv_density(self) -> Field | None:
        path = self.initial.get("csv")
        if path is None:
            return None
        from .io import read_frame

        cols = read_frame(path)
        return Field(self.grid, np.interp(self.grid.nodes, cols["x"], cols["rho"]))

    def limit_density(self) -> Field:
        """chi of the initial saturated set plus the external density outside."""
        given = self._csv_density()
        if given is not None:
            return given
        x = self.grid.nodes
        sat = x <= self.front0 + 1e-12 * max(1.0, abs(self.front0))
        rho = np.where(sat, 1.0, self.rho_ext)
        rho[-1] = 0.0
        return Field(self.grid, rho)

    def pme_density(self, m: float) -> Field:
        """max(p0^(1/m), (rho_E - 1/ln m)_+), p0 the pressure of the initial saturated set."""
        given = self._csv_density()
        if given is not None:
            return given
        p0 = harmonic_pressure(self.grid, self.front0, self.f(0.0), float(self.lam.at(self.grid.nodes[0], 0.0)))
        ext = np.full(self.grid.size, self.rho_ext)
        ext[-1] = 0.0
        return prepare_initial_density(p0, Field(self.grid, ext), m)

    def pme_params(self, m: float | None = None) -> PMEParams:
        tol = self.tol
        return PMEParams(m=float(m if m is not None else self.config["m"]), t_end=self.t_end,
                         cfl_safety=tol["cfl_safety"], max_dt=tol["max_dt"])

    def limit_params(self) -> LimitParams:
        tol = self.tol
        return LimitParams(t_end=self.t_end, dt=tol["dt"], eps_sat=tol["eps_sat"], p_tol=tol["p_tol"],
                           obstacle_tol=tol["obstacle_tol"])

    def tumor_law(self):
        from .tumor import GrowthLaw

        t = self.config.get("tumor", {})
        return GrowthLaw.linear(alpha=t.get("alpha", 1.0), beta=t.get("beta", 1.0), k0=t.get("k0", 1.0),
                                c_B=t.get("c_B", 1.0), exchange_off=t.get("exchange_off", False))

    def tumor_initial(self) -> tuple[Field, Field]:
        law = self.tumor_law()
        given = self._csv_density()
        x = self.grid.nodes
        mid = 0.5 * (x[0] + x[-1])
        if given is None:
            w = float(self.initial.get("half_width", 0.5))
            amp = float(self.initial.get("amplitude", 0.8))
            given = Field(self.grid, amp * (np.abs(x - mid) <= w + 1e-12))
        return given, Field.constant(self.grid, law.c_B)


def _output_times(spec, t_end: float) -> list:
    if spec is None:
        return [0.0, t_end]
    if isinstance(spec, dict):
        k = int(math.floor(t_end / spec["every"] + 1e-9))
        times = [round(j * spec["every"], 12) for j in range(k + 1)]
    else:
        times = [float(t) for t in spec]
    times = sorted({t for t in times if t <= t_end} | {0.0, float(t_end)})
    return times


def scenario_from_config(cfg: dict) -> Scenario:
    geo = cfg["geometry"]
    if geo["kind"] == "cartesian1d":
        geometry = Geometry.cartesian(geo["inner"], geo["outer"])
    else:
        geometry = Geometry.radial(geo.get("n", 2), geo["inner"], geo["outer"])
    grid = build_grid(geometry, cfg["n_cells"])
    lam_cfg = cfg.get("lambda", {"stages": [[0.0, 0.0]]})
    lam = SourceCoefficient.piecewise([tuple(s) for s in lam_cfg["stages"]], lam_cfg.get("bound"))
    f = cfg.get("f", 1.0)
    fdata = BoundaryData.constant(float(f)) if not isinstance(f, dict) else BoundaryData(
        tuple(f["times"]), tuple(f["values"]))
    t_end = float(cfg["t_end"])
    return Scenario(cfg, grid, lam, fdata, t_end, _output_times(cfg.get("output_times"), t_end))
