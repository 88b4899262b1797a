"""Versioned JSON problem and study files.

Problem file (``schema: "mfgfem.problem/1"``)::

    {
      "schema": "mfgfem.problem/1",
      "name": "demo",
      "domain": {"kind": "interval", "a": 0.0, "b": 1.0},
      "T": 0.5,
      "hamiltonian": {"name": "soft_transport", "params": {}},
      "coupling": {"name": "saturating_local", "params": {}},
      "data": {"u_T": "sine", "m0": "bump"},
      "discretization": {"n": 32, "tau": 0.03125, "theta": 0.5},
      "solver": {"method": "picard_then_newton", "tol_residual": 1e-9}
    }

``data`` may be replaced by ``"manufactured": "smooth_pair"`` (unit domain
only), which adds the forcing terms of the exact pair. ``discretization``
accepts ``n_steps`` instead of ``tau``. Unknown keys anywhere are errors.

Study file (``schema: "mfgfem.study/1"``)::

    {"schema": "mfgfem.study/1", "problem": {...}, "h": [0.125, 0.0625, 0.03125],
     "q": 7, "theta": 0.5, "tau_rule": "h"}
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .fem import P1Space
from .heat import ThetaSchemeConfig
from .problem import (Domain, MfgProblem, builtin_coupling, builtin_hamiltonian, manufacture,
                      named_data, smooth_pair)
from .solver import SolverConfig
from .spacetime import TimeGrid

PROBLEM_SCHEMA = "mfgfem.problem/1"
STUDY_SCHEMA = "mfgfem.study/1"
MANUFACTURED = ("smooth_pair",)
TAU_RULES = {"h": lambda h: h, "h2": lambda h: h * h}


class ConfigError(ValueError):
    pass


def _keys(obj: Any, where: str, required: set[str], optional: set[str] = frozenset()) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(obj) - required - optional
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")
    return obj


def _number(v: Any, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: expected a number")
    return float(v)


def _domain(d: dict) -> Domain:
    kind = d.get("kind") if isinstance(d, dict) else None
    if kind == "interval":
        _keys(d, "domain", {"kind"}, {"a", "b"})
        return Domain.interval(_number(d.get("a", 0.0), "domain.a"), _number(d.get("b", 1.0), "domain.b"))
    if kind == "rectangle":
        _keys(d, "domain", {"kind"}, {"lx", "ly"})
        return Domain.rectangle(_number(d.get("lx", 1.0), "domain.lx"), _number(d.get("ly", 1.0), "domain.ly"))
    raise ConfigError(f"domain: unknown kind {kind!r}")


@dataclass(frozen=True)
class ProblemConfig:
    """A validated problem file; :meth:`to_dict` reproduces it exactly."""

    raw: dict

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemConfig":
        data = copy.deepcopy(data)
        _keys(data, "problem", {"schema", "domain", "T", "hamiltonian", "coupling"},
              {"name", "data", "manufactured", "discretization", "solver"})
        if data["schema"] != PROBLEM_SCHEMA:
            raise ConfigError(f"problem: unsupported schema {data['schema']!r}")
        if ("data" in data) == ("manufactured" in data):
            raise ConfigError("problem: give exactly one of 'data' and 'manufactured'")
        _domain(data["domain"])
        if _number(data["T"], "T") <= 0:
            raise ConfigError("T must be positive")
        for key in ("hamiltonian", "coupling"):
            _keys(data[key], key, {"name"}, {"params"})
        if "data" in data:
            _keys(data["data"], "data", {"u_T", "m0"})
        elif data["manufactured"] not in MANUFACTURED:
            raise ConfigError(f"manufactured: unknown pair {data['manufactured']!r}")
        if "discretization" in data:
            disc = _keys(data["discretization"], "discretization", {"n"}, {"tau", "n_steps", "theta"})
            if "tau" in disc and "n_steps" in disc:
                raise ConfigError("discretization: give at most one of 'tau' and 'n_steps'")
        if "solver" in data:
            names = {f.name for f in fields(SolverConfig)}
            _keys(data["solver"], "solver", set(), names)
        cfg = cls(data)
        try:
            cfg.problem()
            cfg.solver_config()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def problem(self) -> MfgProblem:
        d = self.raw
        domain = _domain(d["domain"])
        T = float(d["T"])
        H = builtin_hamiltonian(d["hamiltonian"]["name"], **d["hamiltonian"].get("params", {}))
        cparams = dict(d["coupling"].get("params", {}))
        if d["coupling"]["name"] == "smoothed_convolution":
            cparams.setdefault("dim", domain.dim)
        F = builtin_coupling(d["coupling"]["name"], **cparams)
        name = d.get("name", "problem")
        if "manufactured" in d:
            if not domain.is_unit():
                raise ConfigError("manufactured pairs are defined on the unit domain")
            u, m = smooth_pair(T, domain.dim)
            pb = manufacture(u, m, H, F, domain, T, name=name)
        else:
            pb = MfgProblem(domain, T, H, F, named_data(d["data"]["u_T"], domain, "u_T"),
                            named_data(d["data"]["m0"], domain, "m0"),
                            monotone_hint=F.monotone, name=name)
        return pb

    def solver_config(self, **overrides) -> SolverConfig:
        return SolverConfig(**{**self.raw.get("solver", {}), **overrides})

    def discretization(self, n: int | None = None) -> tuple[P1Space, ThetaSchemeConfig]:
        disc = self.raw.get("discretization", {"n": 32})
        n = int(n if n is not None else disc["n"])
        domain = _domain(self.raw["domain"])
        space = P1Space(domain.mesh(n))
        T = float(self.raw["T"])
        if "n_steps" in disc:
            grid = TimeGrid(T, int(disc["n_steps"]))
        else:
            grid = TimeGrid.from_step(T, float(disc.get("tau", space.mesh.h_max)))
        return space, ThetaSchemeConfig(float(disc.get("theta", 0.5)), grid)


@dataclass(frozen=True)
class StudyConfig:
    raw: dict

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        data = copy.deepcopy(data)
        _keys(data, "study", {"schema", "problem", "h"}, {"q", "theta", "tau_rule", "solver"})
        if data["schema"] != STUDY_SCHEMA:
            raise ConfigError(f"study: unsupported schema {data['schema']!r}")
        ProblemConfig.from_dict(data["problem"])
        hs = data["h"]
        if not isinstance(hs, list) or not all(isinstance(h, (int, float)) for h in hs):
            raise ConfigError("study.h must be a list of mesh sizes")
        if len(hs) < 3:
            raise ConfigError("need ≥ 3 levels")
        if data.get("tau_rule", "h") not in TAU_RULES:
            raise ConfigError(f"study.tau_rule must be one of {sorted(TAU_RULES)}")
        if "solver" in data:
            _keys(data["solver"], "study.solver", set(), {f.name for f in fields(SolverConfig)})
        return cls(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    @property
    def problem_config(self) -> ProblemConfig:
        return ProblemConfig.from_dict(self.raw["problem"])

    @property
    def h(self) -> list[float]:
        return [float(h) for h in self.raw["h"]]

    @property
    def q(self) -> float | None:
        return float(self.raw["q"]) if "q" in self.raw else None

    @property
    def theta(self) -> float:
        return float(self.raw.get("theta", 0.5))

    @property
    def tau_rule(self):
        return TAU_RULES[self.raw.get("tau_rule", "h")]


def _read(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def load_problem(path) -> ProblemConfig:
    return ProblemConfig.from_dict(_read(path))


def load_study(path) -> StudyConfig:
    return StudyConfig.from_dict(_read(path))
