"""Problem specification files: flat INI sections read with configparser.

Every key is optional; missing keys take the defaults in ``DEFAULTS``.  See the
README for the full key list.  ``load_spec`` reports every violation at once.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .coupled import RobustParams
from .errors import DomainError, GeometryError, SpecError
from .follower import AdmissibleBox
from .mesh import Grid, Regions, SpaceTimeField, make_grid, make_regions
from .pde import Nonlinearity, Potential

DEFAULTS = {
    "grid": {"x_min": 0.0, "x_max": 1.0, "n_cells": 64, "T": 0.5, "n_steps": 128},
    "regions": {"omega": "0.1, 0.4", "O": "0.6, 0.9", "O_d": "0.3, 0.5"},
    "model": {"nonlinearity": "linear", "a": 0.0, "scale": 0.5, "table_file": ""},
    "data": {
        "y0": "sine",
        "y0_k": 1,
        "y0_center": 0.5,
        "y0_width": 0.1,
        "y0_file": "",
        "yd": "zero",
        "yd_rate": 1.0,
        "yd_file": "",
    },
    "weights": {"ell": 10.0, "gamma": 10.0, "epsilon": 1e-3, "epsilons": "1e-2, 1e-3, 1e-4"},
    "carleman": {"lambda": 2.0, "sigma2": 1.0, "s": "", "M": ""},
    "solver": {
        "coupled_tol": 1e-13,
        "max_sweeps": 200,
        "cg_tol": 1e-10,
        "max_cg": 500,
        "outer_tol": 1e-6,
        "max_outer": 50,
        "follower_tol": 1e-10,
        "follower_max_iters": 500,
    },
    "run": {"seed": 0, "n_samples": 100},
}

Y0_KINDS = ("zero", "sine", "gaussian", "file")
YD_KINDS = ("zero", "decaying", "file")
NONLINEARITIES = ("linear", "tanh", "table")
SMALL_GRID = {"n_cells": 16, "n_steps": 16}


@dataclass(frozen=True)
class ProblemSpec:
    grid: dict
    regions: dict
    model: dict
    data: dict
    weights: dict
    carleman: dict
    solver: dict
    run: dict
    box: dict | None = None
    source: str = "<defaults>"
    base_dir: str = "."

    # ------------------------------------------------------------------ derived objects

    def make_grid(self) -> Grid:
        g = self.grid
        return make_grid(g["x_min"], g["x_max"], g["n_cells"], g["T"], g["n_steps"])

    def make_regions(self, grid: Grid) -> Regions:
        r = self.regions
        return make_regions(grid, r["omega"], r["O"], r["O_d"])

    def params(self) -> RobustParams:
        return RobustParams(self.weights["ell"], self.weights["gamma"])

    def admissible_box(self) -> AdmissibleBox | None:
        if self.box is None:
            return None
        b = self.box
        return AdmissibleBox(b["e1_lo"], b["e1_hi"], b["e2_lo"], b["e2_hi"])

    @property
    def is_linear(self) -> bool:
        return self.model["nonlinearity"] == "linear"

    def nonlinearity(self) -> Nonlinearity:
        m = self.model
        kind = m["nonlinearity"]
        if kind == "linear":
            return Nonlinearity.linear(m["a"])
        if kind == "tanh":
            return Nonlinearity.tanh(m["scale"])
        table = np.loadtxt(self._path(m["table_file"]), delimiter=",", ndmin=2)
        return Nonlinearity.from_table(table[:, 0], table[:, 1])

    def potential(self, grid: Grid) -> Potential:
        """Potential of the linear model; for a nonlinear model, its derivative at 0."""
        if self.is_linear:
            return Potential.constant(grid, self.model["a"])
        return Potential.constant(grid, float(self.nonlinearity().f_prime(0.0)))

    def model_object(self, grid: Grid):
        return self.potential(grid) if self.is_linear else self.nonlinearity()

    def initial_state(self, grid: Grid) -> np.ndarray:
        d = self.data
        x = grid.x
        kind = d["y0"]
        if kind == "zero":
            return np.zeros(grid.n_interior)
        if kind == "sine":
            L = grid.x_max - grid.x_min
            return np.sin(d["y0_k"] * np.pi * (x - grid.x_min) / L)
        if kind == "gaussian":
            return np.exp(-(((x - d["y0_center"]) / d["y0_width"]) ** 2))
        values = np.loadtxt(self._path(d["y0_file"]), delimiter=",", ndmin=1)
        if values.shape != (grid.n_interior,):
            raise SpecError([f"y0_file holds {values.size} values, grid has {grid.n_interior} interior nodes"])
        return values

    def target(self, grid: Grid) -> SpaceTimeField:
        """Target trajectory (the solvers restrict it to O_d)."""
        d = self.data
        kind = d["yd"]
        if kind == "zero":
            return grid.zeros()
        if kind == "decaying":
            T, rate = grid.T, d["yd_rate"]

            def profile(x, t):
                with np.errstate(divide="ignore", over="ignore"):
                    return np.where(t < T, np.exp(-rate * t / np.where(t < T, T - t, 1.0)), 0.0) * np.sin(np.pi * x)

            return grid.field(profile)
        values = np.loadtxt(self._path(d["yd_file"]), delimiter=",", ndmin=2)
        if values.shape != grid.shape:
            raise SpecError([f"yd_file has shape {values.shape}, grid needs {grid.shape}"])
        return SpaceTimeField(grid, values)

    def epsilons(self) -> list:
        return list(self.weights["epsilons"])

    def carleman_kwargs(self) -> dict:
        c = self.carleman
        out = {"lam": c["lambda"], "sigma2": c["sigma2"]}
        if c["s"] is not None:
            out["s"] = c["s"]
        return out

    def carleman_M(self) -> float:
        if self.carleman["M"] is not None:
            return self.carleman["M"]
        return abs(self.model["a"]) if self.is_linear else self.nonlinearity().lipschitz_bound

    def scaled(self, scale: str) -> "ProblemSpec":
        if scale == "desk":
            return self
        if scale == "small":
            return replace(self, grid={**self.grid, **SMALL_GRID})
        raise SpecError([f"scale must be desk or small, got {scale!r}"])

    def digest(self) -> str:
        """Hash of the resolved values (not of the file text)."""
        payload = {k: v for k, v in asdict(self).items() if k not in ("source", "base_dir")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=list).encode()).hexdigest()[:16]

    def _path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else Path(self.base_dir) / p


# ---------------------------------------------------------------------- parsing


def _pair(text: str) -> tuple[float, float]:
    parts = [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
    if len(parts) != 2:
        raise ValueError(f"expected 'lo, hi', got {text!r}")
    return (parts[0], parts[1])


def _float_list(text: str) -> tuple:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


INT_KEYS = {"n_cells", "n_steps", "y0_k", "max_sweeps", "max_cg", "max_outer", "follower_max_iters", "seed", "n_samples"}
STR_KEYS = {"nonlinearity", "table_file", "y0", "y0_file", "yd", "yd_file"}
OPTIONAL_FLOAT_KEYS = {"s", "M"}


def _convert(section: str, key: str, raw):
    if section == "regions":
        return _pair(raw)
    if key == "epsilons":
        return _float_list(raw)
    if key in STR_KEYS:
        return str(raw).strip()
    if key in OPTIONAL_FLOAT_KEYS:
        return None if str(raw).strip() == "" else float(raw)
    if key in INT_KEYS:
        value = float(raw)
        if value != int(value):
            raise ValueError(f"{key} must be an integer")
        return int(value)
    return float(raw)


def _validate(spec: ProblemSpec) -> list:
    problems = []
    try:
        grid = spec.make_grid()
    except DomainError as exc:
        return [str(exc)]
    try:
        spec.make_regions(grid)
    except (GeometryError, ValueError) as exc:
        problems.append(str(exc))
    w = spec.weights
    for key in ("ell", "gamma", "epsilon"):
        if not w[key] > 0:
            problems.append(f"weights.{key} must be positive (got {w[key]})")
    if not w["epsilons"] or any(e <= 0 for e in w["epsilons"]):
        problems.append("weights.epsilons must be a non-empty list of positive values")
    for key, value in spec.solver.items():
        if not value > 0:
            problems.append(f"solver.{key} must be positive (got {value})")
    m = spec.model
    if m["nonlinearity"] not in NONLINEARITIES:
        problems.append(f"model.nonlinearity must be one of {NONLINEARITIES}")
    elif m["nonlinearity"] == "table" and not spec._path(m["table_file"]).is_file():
        problems.append(f"model.table_file {m['table_file']!r} not found")
    d = spec.data
    if d["y0"] not in Y0_KINDS:
        problems.append(f"data.y0 must be one of {Y0_KINDS}")
    elif d["y0"] == "file" and not spec._path(d["y0_file"]).is_file():
        problems.append(f"data.y0_file {d['y0_file']!r} not found")
    if d["y0"] == "gaussian" and not d["y0_width"] > 0:
        problems.append("data.y0_width must be positive")
    if d["yd"] not in YD_KINDS:
        problems.append(f"data.yd must be one of {YD_KINDS}")
    elif d["yd"] == "file" and not spec._path(d["yd_file"]).is_file():
        problems.append(f"data.yd_file {d['yd_file']!r} not found")
    c = spec.carleman
    if not (c["lambda"] > 0 and c["sigma2"] > 0):
        problems.append("carleman.lambda and carleman.sigma2 must be positive")
    if spec.box is not None:
        b = spec.box
        if not b["e1_lo"] <= 0 <= b["e1_hi"]:
            problems.append("box: E1 = [e1_lo, e1_hi] must contain 0")
        if not b["e2_lo"] <= 0 <= b["e2_hi"]:
            problems.append("box: E2 = [e2_lo, e2_hi] must contain 0")
        if not spec.is_linear:
            problems.append("box constraints are only supported with model.nonlinearity = linear")
    return problems


def spec_from_parser(parser: configparser.ConfigParser, source: str = "<string>", base_dir: str = ".") -> ProblemSpec:
    problems = []
    sections = {}
    known = set(DEFAULTS) | {"box"}
    for name in parser.sections():
        if name not in known:
            problems.append(f"unknown section [{name}]")
    for name, defaults in DEFAULTS.items():
        values = {}
        for key, default in defaults.items():
            raw = parser.get(name, key, fallback=None) if parser.has_section(name) else None
            try:
                values[key] = _convert(name, key, default if raw is None else raw)
            except ValueError as exc:
                problems.append(f"{name}.{key}: {exc}")
                values[key] = _convert(name, key, default)
        if parser.has_section(name):
            for key in parser[name]:
                if key not in defaults:
                    problems.append(f"unknown key {name}.{key}")
        sections[name] = values
    box = None
    if parser.has_section("box"):
        box = {}
        for key in ("e1_lo", "e1_hi", "e2_lo", "e2_hi"):
            try:
                box[key] = float(parser["box"][key])
            except KeyError:
                problems.append(f"box.{key} is required when [box] is present")
                box[key] = 0.0
            except ValueError as exc:
                problems.append(f"box.{key}: {exc}")
                box[key] = 0.0
    spec = ProblemSpec(**sections, box=box, source=source, base_dir=base_dir)
    if not problems:
        problems = _validate(spec)
    if problems:
        raise SpecError([f"{source}: {p}" for p in problems])
    return spec


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive (O, O_d, T, M)
    return parser


def load_spec(path) -> ProblemSpec:
    path = Path(path)
    parser = _parser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh, source=str(path))
    except OSError as exc:
        raise SpecError([f"cannot read {path}: {exc}"]) from exc
    except configparser.Error as exc:
        raise SpecError([f"parse error: {exc}"]) from exc
    return spec_from_parser(parser, str(path), str(path.parent))


def parse_spec(text: str, base_dir: str = ".") -> ProblemSpec:
    parser = _parser()
    try:
        parser.read_string(text, source="<string>")
    except configparser.Error as exc:
        raise SpecError([f"parse error: {exc}"]) from exc
    return spec_from_parser(parser, "<string>", base_dir)


def default_spec() -> ProblemSpec:
    return parse_spec("")


def write_default_spec(path) -> None:
    """Write the default spec with every key spelled out."""
    lines = []
    for name, values in DEFAULTS.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in values.items())
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


__all__ = ["ProblemSpec", "load_spec", "parse_spec", "default_spec", "write_default_spec", "DEFAULTS"]
