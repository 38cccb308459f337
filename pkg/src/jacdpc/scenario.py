"""YAML scenario files: load, validate, and write back.

A scenario has four sections::

    chain:      list of {axis, gain, range}
    scrambler:  {base_sop, drift_rate_rad_s, perturb_sigma, perturb_axis, seed}
    loop:       {sample_rate_hz, delay_s, activation_time_s, duration_s, target_sop, task_rows, ...}
    solver:     {method, lambda, mu, rank_tolerance, nullspace_threshold}

Unknown keys are rejected. Every validation error carries the line number of
the offending key so the CLI can report ``file:line: message``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .jacobian import TaskProjection
from .simulator import LoopConfig, ScramblerConfig
from .solvers import SolverConfig
from .stokes import S1, S2, S3, DPCChain, WaveplateStage, normalize

__all__ = ["Scenario", "ScenarioError", "load_scenario", "parse_scenario", "dump_scenario",
           "bundled_scenarios", "resolve_scenario_path"]

_AXES = {"S1": S1, "S2": S2, "S3": S3}

_SCRAMBLER_KEYS = {"base_sop", "drift_rate_rad_s", "perturb_sigma", "perturb_axis", "seed"}
_LOOP_KEYS = {"sample_rate_hz", "delay_s", "activation_time_s", "duration_s", "target_sop", "task_rows",
              "phi_initial", "lock_tolerance", "control_decimation", "feedback", "predict_input",
              "predict_window", "corrections"}
_SOLVER_KEYS = {"method", "lambda", "mu", "rank_tolerance", "nullspace_threshold"}
_STAGE_KEYS = {"axis", "gain", "range"}
SECTIONS = {"chain": None, "scrambler": _SCRAMBLER_KEYS, "loop": _LOOP_KEYS, "solver": _SOLVER_KEYS}


# config keyword -> document key, used to point diagnostics at the right line
_SCRAMBLER_FIELDS = {"base_sop": "base_sop", "perturb_axis": "perturb_axis", "drift_rate": "drift_rate_rad_s",
                     "perturb_sigma": "perturb_sigma", "seed": "seed"}
_SOLVER_FIELDS = {"method": "method", "lam": "lambda", "mu": "mu", "rank_tolerance": "rank_tolerance",
                  "nullspace_threshold": "nullspace_threshold"}
_LOOP_FIELDS = {"sample_rate": "sample_rate_hz", "delay": "delay_s", "activation_time": "activation_time_s",
                "duration": "duration_s", "lock_tolerance": "lock_tolerance", "target_sop": "target_sop",
                "phi_initial": "phi_initial", "task": "task_rows", "feedback": "feedback",
                "predict_input": "predict_input", "predict_window": "predict_window",
                "corrections": "corrections", "control_decimation": "control_decimation"}


def _keys(section, fields):
    return {kw: (section, key) for kw, key in fields.items()}


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.message, self.line, self.source = message, line, source
        where = source or "<scenario>"
        super().__init__(f"{where}:{line}: {message}" if line else f"{where}: {message}")


@dataclass(frozen=True)
class Scenario:
    loop: LoopConfig
    scrambler: ScramblerConfig


def _line_map(node, path=(), out=None) -> dict:
    """Map key paths (tuples of str/int) to 1-based source lines."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            _line_map(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


class _Reader:
    def __init__(self, lines: dict, source: str | None):
        self.lines, self.source = lines, source

    def fail(self, path, msg):
        line = None
        for n in range(len(path), -1, -1):
            if path[:n] in self.lines:
                line = self.lines[path[:n]]
                break
        raise ScenarioError(msg, line, self.source)

    def section(self, doc, name, required=True) -> dict:
        val = doc.get(name)
        if val is None:
            if required:
                self.fail((), f"missing section '{name}'")
            return {}
        if not isinstance(val, dict):
            self.fail((name,), f"section '{name}' must be a mapping")
        unknown = set(val) - SECTIONS[name]
        if unknown:
            key = sorted(unknown, key=str)[0]
            self.fail((name, key), f"unknown key '{key}' in section '{name}'")
        return val

    def number(self, path, val, *, integer=False, allow_none=False):
        if val is None and allow_none:
            return None
        if isinstance(val, str) and val.strip().lower() in ("pi", "-pi"):
            val = math.pi if val.strip()[0] != "-" else -math.pi
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.fail(path, f"expected a number, got {val!r}")
        if integer and (not float(val).is_integer()):
            self.fail(path, f"expected an integer, got {val!r}")
        if not math.isfinite(val):
            self.fail(path, f"expected a finite number, got {val!r}")
        return int(val) if integer else float(val)

    def vector(self, path, val, n=3):
        if isinstance(val, str) and n == 3:
            if val in _AXES:
                return _AXES[val].copy()
            self.fail(path, f"unknown axis name {val!r}; use S1, S2, S3 or [x, y, z]")
        if not isinstance(val, (list, tuple)) or len(val) != n:
            self.fail(path, f"expected a list of {n} numbers, got {val!r}")
        return np.array([self.number(path + (i,), v) for i, v in enumerate(val)])

    def build(self, path, ctor, keys=None, **kwargs):
        """Call ``ctor``; on failure blame the key whose removal makes it succeed.

        ``keys`` maps keyword names to the document path they came from.
        """
        try:
            return ctor(**kwargs)
        except (ValueError, TypeError) as e:
            for kw, kpath in (keys or {}).items():
                if kw not in kwargs:
                    continue
                rest = {k: v for k, v in kwargs.items() if k != kw}
                try:
                    ctor(**rest)
                except (ValueError, TypeError):
                    continue
                self.fail(kpath, str(e))
            self.fail(path, str(e))

    def unit(self, path, val):
        v = self.vector(path, val)
        try:
            return normalize(v)
        except ValueError as e:
            self.fail(path, str(e))


def parse_scenario(doc: Any, lines: dict | None = None, source: str | None = None) -> Scenario:
    """Validate a decoded YAML document and build the configs."""
    rd = _Reader(lines or {}, source)
    if not isinstance(doc, dict):
        rd.fail((), "scenario must be a mapping with sections chain, scrambler, loop, solver")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        key = sorted(unknown, key=str)[0]
        rd.fail((key,), f"unknown section '{key}'")

    raw_chain = doc.get("chain")
    if not isinstance(raw_chain, list) or not raw_chain:
        rd.fail(("chain",), "section 'chain' must be a non-empty list of stages")
    stages = []
    for i, st in enumerate(raw_chain):
        p = ("chain", i)
        if not isinstance(st, dict):
            rd.fail(p, "each stage must be a mapping with keys axis, gain, range")
        bad = set(st) - _STAGE_KEYS
        if bad:
            k = sorted(bad, key=str)[0]
            rd.fail(p + (k,), f"unknown key '{k}' in stage {i + 1}")
        if "axis" not in st:
            rd.fail(p, f"stage {i + 1} has no axis")
        axis = rd.vector(p + ("axis",), st["axis"])
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            rd.fail(p + ("axis",), f"stage axis must be a unit vector, got norm {np.linalg.norm(axis):.12g}")
        gain = rd.number(p + ("gain",), st.get("gain", math.pi))
        rng = st.get("range", [-1.0, 1.0])
        rng = tuple(rd.vector(p + ("range",), rng, n=2))
        stages.append(rd.build(p, WaveplateStage, axis=axis, gain=gain, signal_range=rng))
    chain = rd.build(("chain",), DPCChain, stages=tuple(stages))

    sc = rd.section(doc, "scrambler")
    kw = {}
    if "base_sop" in sc:
        kw["base_sop"] = rd.unit(("scrambler", "base_sop"), sc["base_sop"])
    if "perturb_axis" in sc:
        kw["perturb_axis"] = rd.unit(("scrambler", "perturb_axis"), sc["perturb_axis"])
    if "drift_rate_rad_s" in sc:
        kw["drift_rate"] = rd.number(("scrambler", "drift_rate_rad_s"), sc["drift_rate_rad_s"])
    if "perturb_sigma" in sc:
        kw["perturb_sigma"] = rd.number(("scrambler", "perturb_sigma"), sc["perturb_sigma"])
    if "seed" in sc:
        kw["seed"] = rd.number(("scrambler", "seed"), sc["seed"], integer=True)
    scrambler = rd.build(("scrambler",), ScramblerConfig, keys=_keys("scrambler", _SCRAMBLER_FIELDS), **kw)

    sv = rd.section(doc, "solver")
    kw = {}
    if "method" in sv:
        kw["method"] = sv["method"]
    for src, dst in (("lambda", "lam"), ("mu", "mu"), ("rank_tolerance", "rank_tolerance")):
        if src in sv:
            kw[dst] = rd.number(("solver", src), sv[src])
    if "nullspace_threshold" in sv:
        kw["nullspace_threshold"] = rd.number(("solver", "nullspace_threshold"), sv["nullspace_threshold"],
                                              allow_none=True)
    solver = rd.build(("solver",), SolverConfig, keys=_keys("solver", _SOLVER_FIELDS), **kw)

    lp = rd.section(doc, "loop")
    kw = {"chain": chain, "solver": solver}
    for src, dst in (("sample_rate_hz", "sample_rate"), ("delay_s", "delay"),
                     ("activation_time_s", "activation_time"), ("duration_s", "duration"),
                     ("lock_tolerance", "lock_tolerance")):
        if src in lp:
            kw[dst] = rd.number(("loop", src), lp[src])
    for key in ("control_decimation", "corrections"):
        if key in lp:
            kw[key] = rd.number(("loop", key), lp[key], integer=True)
    if "predict_window" in lp:
        kw["predict_window"] = rd.number(("loop", "predict_window"), lp["predict_window"], integer=True,
                                         allow_none=True)
    if "target_sop" in lp:
        kw["target_sop"] = rd.unit(("loop", "target_sop"), lp["target_sop"])
    if "phi_initial" in lp and lp["phi_initial"] is not None:
        kw["phi_initial"] = rd.vector(("loop", "phi_initial"), lp["phi_initial"], n=chain.m)
    if "task_rows" in lp:
        rows = lp["task_rows"]
        if not isinstance(rows, list):
            rd.fail(("loop", "task_rows"), "task_rows must be a list drawn from 1, 2, 3")
        kw["task"] = rd.build(("loop", "task_rows"), TaskProjection,
                              rows=tuple(rd.number(("loop", "task_rows", i), r, integer=True)
                                         for i, r in enumerate(rows)))
    if "feedback" in lp:
        kw["feedback"] = lp["feedback"]
    if "predict_input" in lp:
        if not isinstance(lp["predict_input"], bool):
            rd.fail(("loop", "predict_input"), "predict_input must be true or false")
        kw["predict_input"] = lp["predict_input"]
    keys = _keys("loop", _LOOP_FIELDS)
    keys["solver"] = ("solver", "method")
    loop = rd.build(("loop",), LoopConfig, keys=keys, **kw)
    return Scenario(loop, scrambler)


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file. I/O errors propagate as ``OSError``."""
    path = Path(path)
    text = path.read_text()
    try:
        node = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ScenarioError(f"invalid YAML: {getattr(e, 'problem', e)}",
                            mark.line + 1 if mark else None, str(path)) from None
    lines = _line_map(node) if node is not None else {}
    return parse_scenario(doc, lines, str(path))


def _axis_out(a: np.ndarray):
    for name, v in _AXES.items():
        if np.array_equal(a, v):
            return name
    return [float(x) for x in a]


def scenario_to_dict(sc: Scenario) -> dict:
    lp, sc_, sv = sc.loop, sc.scrambler, sc.loop.solver
    return {
        "chain": [{"axis": _axis_out(st.axis), "gain": st.gain, "range": list(st.signal_range)}
                  for st in lp.chain.stages],
        "scrambler": {
            "base_sop": [float(x) for x in sc_.base_sop],
            "drift_rate_rad_s": float(sc_.drift_rate),
            "perturb_sigma": float(sc_.perturb_sigma),
            "perturb_axis": _axis_out(sc_.perturb_axis),
            "seed": sc_.seed,
        },
        "loop": {
            "sample_rate_hz": float(lp.sample_rate),
            "delay_s": float(lp.delay),
            "activation_time_s": float(lp.activation_time),
            "duration_s": float(lp.duration),
            "target_sop": [float(x) for x in lp.target_sop],
            "task_rows": list(lp.task.rows),
            "phi_initial": [float(x) for x in lp.phi_initial],
            "lock_tolerance": float(lp.lock_tolerance),
            "control_decimation": lp.control_decimation,
            "feedback": lp.feedback,
            "predict_input": lp.predict_input,
            "predict_window": lp.predict_window,
            "corrections": lp.corrections,
        },
        "solver": {
            "method": sv.method.value,
            "lambda": float(sv.lam),
            "mu": float(sv.mu),
            "rank_tolerance": float(sv.rank_tolerance),
            "nullspace_threshold": sv.nullspace_threshold,
        },
    }


def dump_scenario(sc: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(sc), sort_keys=False, default_flow_style=None)


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("jacdpc") / "scenarios"
    return {p.name.rsplit(".", 1)[0]: Path(str(p)) for p in root.iterdir() if p.name.endswith(".yaml")}


def resolve_scenario_path(name_or_path) -> Path:
    """A filesystem path, or the name of a bundled scenario such as ``fig3``."""
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = bundled_scenarios()
    key = p.name[:-len(".scenario")] if p.name.endswith(".scenario") else p.stem
    if str(name_or_path) in bundled:
        return bundled[str(name_or_path)]
    if key in bundled and p.parent == Path("."):
        return bundled[key]
    return p
