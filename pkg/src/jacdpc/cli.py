"""Command-line front end.

Subcommands::

    jacdpc simulate <scenario> --out trace.csv [--decimation N] [--seed S]
    jacdpc check-jacobian <scenario> [--trials N] [--seed S]
    jacdpc sweep <scenario> --param key=v1,v2,... --out-dir DIR [--jobs J]

``<scenario>`` is a YAML file or the name of a bundled scenario (``fig3``,
``fig4``, ``fig5``, ``s3_plane``). Exit codes: 0 ok, 1 property failure,
2 config or usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .jacobian import analytic_jacobian, diagnostics, fd_jacobian, minor_null_vector
from .scenario import (Scenario, ScenarioError, load_scenario, parse_scenario, resolve_scenario_path,
                       scenario_to_dict)
from .simulator import RunSummary, run
from .stokes import forward, normalize
from .tracecsv import trace_header, write_trace_csv

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

# check-jacobian tolerances
FD_TOL = 1e-5
ORTHO_TOL = 1e-9
RANK_TOL = 1e-9
MANIP_TOL = 1e-12
MINOR_TOL = 1e-9
PHI_BOX = 2.0

# keys a sweep may vary: bare name -> (section, key)
SWEEPABLE = {
    "drift_rate_rad_s": ("scrambler", "drift_rate_rad_s"),
    "perturb_sigma": ("scrambler", "perturb_sigma"),
    "seed": ("scrambler", "seed"),
    "sample_rate_hz": ("loop", "sample_rate_hz"),
    "delay_s": ("loop", "delay_s"),
    "activation_time_s": ("loop", "activation_time_s"),
    "duration_s": ("loop", "duration_s"),
    "lock_tolerance": ("loop", "lock_tolerance"),
    "control_decimation": ("loop", "control_decimation"),
    "feedback": ("loop", "feedback"),
    "predict_input": ("loop", "predict_input"),
    "predict_window": ("loop", "predict_window"),
    "corrections": ("loop", "corrections"),
    "method": ("solver", "method"),
    "lambda": ("solver", "lambda"),
    "mu": ("solver", "mu"),
    "rank_tolerance": ("solver", "rank_tolerance"),
    "nullspace_threshold": ("solver", "nullspace_threshold"),
}


def _err(msg):
    print(msg, file=sys.stderr)


def _load(arg) -> Scenario:
    return load_scenario(resolve_scenario_path(arg))


def _fmt(x):
    if x is None:
        return "none"
    return f"{x:.6g}"


def summary_lines(s: RunSummary) -> list[str]:
    return [
        f"convergence_time: {_fmt(s.convergence_time)}" + (" s" if s.locked else " (no lock)"),
        f"steady_state_error: {_fmt(s.steady_state_error)}",
        f"max_abs_phi: {_fmt(s.max_abs_phi)}",
        f"nullspace_duty: {_fmt(s.nullspace_duty)}",
        f"bounded_fraction(1.5): {_fmt(s.bounded_fraction(1.5))}",
        f"locked: {'yes' if s.locked else 'no'}",
    ]


def cmd_simulate(scenario, out, decimation=100, seed=None) -> int:
    try:
        sc = _load(scenario)
        if seed is not None:
            doc = scenario_to_dict(sc)
            doc["scrambler"]["seed"] = seed
            sc = parse_scenario(doc)
    except ScenarioError as e:
        _err(str(e))
        return EXIT_CONFIG
    except OSError as e:
        _err(f"cannot read scenario: {e}")
        return EXIT_IO
    if decimation < 1:
        _err("--decimation must be >= 1")
        return EXIT_CONFIG
    trace, summary = run(sc.loop, sc.scrambler)
    try:
        rows = write_trace_csv(trace, out, decimation)
    except OSError as e:
        _err(f"cannot write {out}: {e}")
        return EXIT_IO
    print(f"wrote {rows} rows x {len(trace_header(sc.loop.chain.m))} columns to {out}")
    print("\n".join(summary_lines(summary)))
    return EXIT_OK


def _random_unit(rng):
    while True:
        v = rng.standard_normal(3)
        if np.linalg.norm(v) > 1e-6:
            return normalize(v)


def jacobian_checks(chain, phi, s_in) -> dict:
    """Deviation of each property at one configuration (all should be ~0)."""
    J = analytic_jacobian(chain, phi, s_in)
    Jfd = fd_jacobian(chain, phi, s_in, h=1e-6)
    s_out, _ = forward(chain, phi, s_in)
    col = np.linalg.norm(J, axis=0)
    floor = 1e-8 * np.abs(chain.gains)
    fd = np.linalg.norm(Jfd - J, axis=0) / np.maximum(col, floor)
    d = diagnostics(J)
    sv = d.singular_values
    out = {
        "fd_rel_error": float(fd.max()),
        "orthogonality": float(np.abs(s_out @ J).max()),
        "sigma3_rel": float(sv[2] / sv[0]) if len(sv) >= 3 and sv[0] > 0 else 0.0,
        "manipulability": d.manipulability,
    }
    if chain.m == 4:
        out["minor_null_norm"] = float(np.linalg.norm(minor_null_vector(J)))
    return out


LIMITS = {"fd_rel_error": FD_TOL, "orthogonality": ORTHO_TOL, "sigma3_rel": RANK_TOL,
          "manipulability": MANIP_TOL, "minor_null_norm": MINOR_TOL}


def cmd_check_jacobian(scenario, trials=1000, seed=None) -> int:
    if trials < 1:
        _err("--trials must be >= 1")
        return EXIT_CONFIG
    try:
        sc = _load(scenario)
    except ScenarioError as e:
        _err(str(e))
        return EXIT_CONFIG
    except OSError as e:
        _err(f"cannot read scenario: {e}")
        return EXIT_IO
    chain = sc.loop.chain
    rng = np.random.default_rng(sc.scrambler.seed if seed is None else seed)
    worst = {k: 0.0 for k in LIMITS if k != "minor_null_norm" or chain.m == 4}
    for trial in range(trials):
        phi = rng.uniform(-PHI_BOX, PHI_BOX, chain.m)
        s_in = _random_unit(rng)
        dev = jacobian_checks(chain, phi, s_in)
        for k, v in dev.items():
            worst[k] = max(worst[k], v)
            if not v < LIMITS[k]:
                _err(f"property '{k}' violated at trial {trial}: {v:.3e} >= {LIMITS[k]:.0e}")
                print(json.dumps({
                    "property": k, "value": v, "limit": LIMITS[k], "trial": trial,
                    "phi": phi.tolist(), "s_in": s_in.tolist(),
                    "axes": chain.axes.tolist(), "gains": chain.gains.tolist(),
                }))
                return EXIT_PROPERTY
    print(f"{trials} configurations, m = {chain.m}: all properties hold")
    for k, v in worst.items():
        print(f"max {k}: {v:.3e} (limit {LIMITS[k]:.0e})")
    return EXIT_OK


def parse_param(spec: str):
    """``"mu=0.05,0.1"`` -> ``("solver", "mu", [0.05, 0.1])``. Raises ``ValueError``."""
    if "=" not in spec:
        raise ValueError(f"--param must look like key=v1,v2,...; got {spec!r}")
    key, _, rest = spec.partition("=")
    key = key.strip()
    if "." in key:
        section, _, name = key.partition(".")
        if SWEEPABLE.get(name) != (section, name):
            raise ValueError(f"unknown sweep key {key!r}")
    elif key in SWEEPABLE:
        section, name = SWEEPABLE[key]
    else:
        raise ValueError(f"unknown sweep key {key!r}; choose from {', '.join(sorted(SWEEPABLE))}")
    tokens = [t.strip() for t in rest.split(",") if t.strip()]
    if not tokens:
        raise ValueError(f"empty value list for {key!r}")
    return section, name, [yaml.safe_load(t) for t in tokens], tokens


def _sweep_one(args):
    doc, out, decimation = args
    sc = parse_scenario(doc)
    trace, summary = run(sc.loop, sc.scrambler)
    write_trace_csv(trace, out, decimation)
    return summary


def cmd_sweep(scenario, param, out_dir, decimation=100, jobs=1) -> int:
    try:
        section, name, values, tokens = parse_param(param)
    except ValueError as e:
        _err(str(e))
        return EXIT_CONFIG
    try:
        base = scenario_to_dict(_load(scenario))
    except ScenarioError as e:
        _err(str(e))
        return EXIT_CONFIG
    except OSError as e:
        _err(f"cannot read scenario: {e}")
        return EXIT_IO
    if decimation < 1:
        _err("--decimation must be >= 1")
        return EXIT_CONFIG
    # validate every point before any run starts, so a bad value writes nothing
    docs = []
    for tok, val in zip(tokens, values):
        doc = copy.deepcopy(base)
        doc[section][name] = val
        try:
            parse_scenario(doc, source=f"{name}={tok}")
        except ScenarioError as e:
            _err(str(e))
            return EXIT_CONFIG
        docs.append(doc)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        _err(f"cannot create {out_dir}: {e}")
        return EXIT_IO
    safe = [tok.replace("/", "_").replace(" ", "") for tok in tokens]
    paths = [out_dir / f"{i:02d}_{name}={s}.csv" for i, s in enumerate(safe)]
    work = [(d, p, decimation) for d, p in zip(docs, paths)]
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                summaries = list(ex.map(_sweep_one, work))
        else:
            summaries = [_sweep_one(w) for w in work]
    except OSError as e:
        _err(f"cannot write sweep output: {e}")
        return EXIT_IO
    cols = ["value", "csv", "convergence_time", "steady_state_error", "max_abs_phi",
            "nullspace_duty", "bounded_fraction_1.5", "locked"]
    rows = []
    for tok, p, s in zip(tokens, paths, summaries):
        rows.append([tok, p.name, _fmt(s.convergence_time), _fmt(s.steady_state_error),
                     _fmt(s.max_abs_phi), _fmt(s.nullspace_duty), _fmt(s.bounded_fraction(1.5)),
                     "yes" if s.locked else "no"])
    table = [[name] + cols[1:]] + [r for r in rows]
    try:
        with open(out_dir / "summary.csv", "w", newline="") as fh:
            fh.write(",".join([name] + cols[1:]) + "\n")
            for r in rows:
                fh.write(",".join(r) + "\n")
    except OSError as e:
        _err(f"cannot write summary: {e}")
        return EXIT_IO
    widths = [max(len(r[i]) for r in table) for i in range(len(cols))]
    for r in table:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jacdpc", description="Jacobian-based dynamic polarization control.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a closed-loop scenario and write a CSV trace")
    s.add_argument("scenario", help="scenario YAML file or bundled name (fig3, fig4, fig5, s3_plane)")
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--decimation", type=int, default=100, help="keep every N-th sample (default 100)")
    s.add_argument("--seed", type=int, default=None, help="override the scrambler seed")

    c = sub.add_parser("check-jacobian", help="check Jacobian properties on random configurations")
    c.add_argument("scenario")
    c.add_argument("--trials", type=int, default=1000)
    c.add_argument("--seed", type=int, default=None, help="RNG seed (default: scenario seed)")

    w = sub.add_parser("sweep", help="run a scenario once per value of one config key")
    w.add_argument("scenario")
    w.add_argument("--param", required=True, help="key=v1,v2,... e.g. mu=0.05,0.1,0.2")
    w.add_argument("--out-dir", required=True)
    w.add_argument("--decimation", type=int, default=100)
    w.add_argument("--jobs", type=int, default=1, help="concurrent runs (default 1)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        return cmd_simulate(args.scenario, args.out, args.decimation, args.seed)
    if args.command == "check-jacobian":
        return cmd_check_jacobian(args.scenario, args.trials, args.seed)
    return cmd_sweep(args.scenario, args.param, args.out_dir, args.decimation, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
