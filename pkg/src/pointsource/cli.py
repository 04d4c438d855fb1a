"""Command line interface.

Config files are flat ``key = value`` text. Recognized keys::

    dim, domain, A, mu, T, T0, T1, dt_fine, dx_fine, dt_inv, dx_inv,
    sources, noise, seed, init, lm.beta_x, lm.beta_lambda, lm.gamma_x,
    lm.gamma_lambda, lm.max_iters, lm.eta, lm.fd_step, lm.stop, lm.noise

``sources`` and ``init`` list point sources separated by ``;``, each written
``x1,x2 @ profile`` where profile is one of ``exp(c,s)`` (c e^{-st}),
``indicator(end)``, ``indicator(start,end)`` or ``const(c)``.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from pathlib import Path

import numpy as np

from .direct import (RecoveryError, harmonic_moments, prony_recover, recover_amplitude,
                     recover_location_1d, recover_location_single, write_amplitude_csv,
                     write_locations_csv)
from .fem import ProblemConfig, SourceModel
from .forward import (BoundaryTrace, GridError, TimeGrid, default_tail_length, extend_in_time,
                      restrict_trace, simulate)
from .harness import (EXAMPLES, ExperimentSpec, build_mesh, emit_outputs, make_noisy,
                      rates_from_rows, read_errors_csv, run_example, write_rates_csv)
from .lm import LmError, LmParams, LmSchedule, noise_norm, run_lm, write_history_csv
from .sparse_linalg import SolverError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


_PROFILE = re.compile(r"^\s*(exp|indicator|const)\s*\(([^)]*)\)\s*$")


def parse_profile(text: str):
    m = _PROFILE.match(text)
    if not m:
        raise ConfigError(f"cannot parse amplitude profile {text!r}")
    kind = m.group(1)
    try:
        args = [float(a) for a in m.group(2).split(",") if a.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad numbers in {text!r}") from exc
    if kind == "exp" and len(args) == 2:
        c, s = args
        return lambda t: c * np.exp(-s * np.asarray(t))
    if kind == "indicator" and len(args) in (1, 2):
        lo, hi = (0.0, args[0]) if len(args) == 1 else args
        return lambda t: ((np.asarray(t) >= lo - 1e-12) & (np.asarray(t) <= hi + 1e-12)).astype(float)
    if kind == "const" and len(args) == 1:
        return lambda t: np.full(np.shape(t), args[0])
    raise ConfigError(f"wrong number of arguments in {text!r}")


def parse_sources(text: str, dim: int):
    locs, fns = [], []
    for item in filter(str.strip, text.split(";")):
        if "@" not in item:
            raise ConfigError(f"source entry {item!r} needs 'location @ profile'")
        loc_txt, prof = item.split("@", 1)
        try:
            loc = [float(v) for v in loc_txt.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad location {loc_txt!r}") from exc
        if len(loc) != dim:
            raise ConfigError(f"location {loc_txt.strip()!r} is not {dim}-dimensional")
        locs.append(loc)
        fns.append(parse_profile(prof))
    if not locs:
        raise ConfigError("no sources given")
    return np.array(locs), fns


def read_config(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class RunConfig:
    """Typed view of a key=value config."""

    def __init__(self, raw: dict):
        self.raw = raw
        try:
            self.dim = int(raw.get("dim", "1"))
            a = raw.get("A", "0")
            adv = np.array([float(v) for v in a.split(",")])
            if adv.size == 1 and self.dim == 2:
                adv = np.repeat(adv, 2)
            self.problem = ProblemConfig(self.dim, float(raw.get("domain", "1")), adv, float(raw.get("mu", "1")),
                                         float(raw.get("T", "2")), float(raw.get("T0", "1")),
                                         float(raw.get("T1", "1.5")))
            self.fine = (float(raw.get("dt_fine", "1e-3")), float(raw.get("dx_fine", "1e-3")))
            self.inv = (float(raw.get("dt_inv", "4e-3")), float(raw.get("dx_inv", "4e-3")))
            self.noise = float(raw.get("noise", "0"))
            self.seed = int(raw.get("seed", "0"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def sources(self, grid: TimeGrid) -> SourceModel:
        if "sources" not in self.raw:
            raise ConfigError("missing key 'sources'")
        locs, fns = parse_sources(self.raw["sources"], self.dim)
        return SourceModel.from_functions(locs, fns, grid.times)

    def init(self, grid: TimeGrid) -> LmParams:
        if "init" not in self.raw:
            raise ConfigError("missing key 'init' (the initial guess is always explicit)")
        locs, fns = parse_sources(self.raw["init"], self.dim)
        return LmParams(locs, np.array([f(grid.times) for f in fns]))

    def schedule(self) -> LmSchedule:
        r = self.raw
        try:
            return LmSchedule(float(r.get("lm.beta_x", "1")), float(r.get("lm.beta_lambda", "5")),
                              float(r.get("lm.gamma_x", "0.8")), float(r.get("lm.gamma_lambda", "0.8")),
                              max_iters=int(r.get("lm.max_iters", "100")),
                              fd_step=float(r["lm.fd_step"]) if "lm.fd_step" in r else None,
                              stop_rule=r.get("lm.stop", "discrepancy"), eta=float(r.get("lm.eta", "1.1")))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# trace files

def save_trace(trace: BoundaryTrace, out: Path, mesh_size: float, dim: int, length: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with (out / "trace.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["time"] + [f"node_{i}" for i in trace.boundary_index])
        for t, row in zip(trace.grid.times, trace.values):
            wr.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    np.savetxt(out / "snapshot.csv", trace.final_snapshot, delimiter=",")
    meta = {"t0": trace.grid.t0, "t_end": trace.grid.t_end, "dt": trace.grid.dt, "n_steps": trace.grid.n_steps,
            "mesh_size": mesh_size, "dim": dim, "domain": length,
            "boundary_index": [int(i) for i in trace.boundary_index]}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_trace(data_dir: Path):
    meta = json.loads((data_dir / "meta.json").read_text())
    vals = np.loadtxt(data_dir / "trace.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1:]
    snap = np.loadtxt(data_dir / "snapshot.csv", delimiter=",", ndmin=1)
    grid = TimeGrid(meta["t0"], meta["t_end"], meta["dt"], meta["n_steps"])
    trace = BoundaryTrace(grid, np.array(meta["boundary_index"]), vals, snap)
    return trace, meta


def _inversion_data(rc: RunConfig, data_dir: Path):
    trace, meta = load_trace(data_dir)
    cfg = rc.problem
    mesh = build_mesh(cfg.dim, cfg.domain_length, rc.inv[1])
    grid = TimeGrid.uniform(cfg.horizon, rc.inv[0])
    if not (np.isclose(meta["mesh_size"], rc.inv[1]) and np.isclose(meta["dt"], rc.inv[0])):
        src_mesh = build_mesh(cfg.dim, cfg.domain_length, meta["mesh_size"])
        trace = restrict_trace(trace, src_mesh, mesh, grid)
    return trace, mesh, grid


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    rc = RunConfig(read_config(args.config))
    dt, h = rc.fine if args.fine else rc.inv
    cfg = rc.problem
    mesh = build_mesh(cfg.dim, cfg.domain_length, h)
    grid = TimeGrid.uniform(cfg.horizon, dt)
    src = rc.sources(grid)
    src.validate(mesh, cfg)
    trace = simulate(cfg, mesh, src, grid)
    if rc.noise > 0:
        trace = make_noisy(trace, rc.noise, rc.seed)
    save_trace(trace, Path(args.out), h, cfg.dim, cfg.domain_length)
    return EXIT_OK


def cmd_invert_lm(args) -> int:
    rc = RunConfig(read_config(args.config))
    data, mesh, grid = _inversion_data(rc, Path(args.data))
    cfg = rc.problem
    init = rc.init(grid)
    delta = float(rc.raw.get("lm.noise", rc.raw.get("noise", "0")))
    level = noise_norm(delta, data.sup_norm(), cfg, mesh) if delta > 0 else None
    res = run_lm(init, data, rc.schedule(), cfg, mesh, grid, noise_level=level)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_locations_csv(out / "locations.csv", list(enumerate(res.final.locations)))
    with (out / "amplitudes.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["time"] + [f"lambda_{k + 1}" for k in range(res.final.n_sources)])
        for i, t in enumerate(grid.times):
            wr.writerow([repr(float(t))] + [repr(float(v)) for v in res.final.amplitudes[:, i]])
    write_history_csv(out / "history.csv", res.history)
    summary = {"stop_reason": res.stop_reason.value, "iterations": len(res.history) - 1,
               "wall_time": res.wall_time, "diagnostics": {k: str(v) for k, v in res.diagnostics.items()}}
    (out / "result.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def cmd_invert_direct(args) -> int:
    rc = RunConfig(read_config(args.config))
    data, mesh, grid = _inversion_data(rc, Path(args.data))
    cfg = rc.problem
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "moments":
        n = int(rc.raw.get("n_sources", "2"))
        nodes, weights = prony_recover(harmonic_moments(data, cfg, mesh, 2 * n), n)
        write_locations_csv(out / "locations.csv", [(k, (z.real, z.imag)) for k, z in enumerate(nodes)])
        with (out / "weights.csv").open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["source", "real", "imag"])
            for k, c in enumerate(weights):
                wr.writerow([k, repr(float(c.real)), repr(float(c.imag))])
        return EXIT_OK
    if cfg.shifted_reaction > 0:
        loc = recover_location_single(data, cfg, mesh).location
    elif cfg.dim == 1:
        loc = np.array([recover_location_1d(data, cfg, mesh)])
    else:
        raise RecoveryError("single-source recovery needs mu + |A|^2/4 > 0 in 2D; use --mode moments")
    write_locations_csv(out / "locations.csv", [(0, loc)])
    if args.mode == "amplitude":
        tail, _ = default_tail_length(cfg)
        ext = extend_in_time(cfg, mesh, data.final_snapshot, tail)
        est = recover_amplitude(data, ext, loc, cfg, mesh)
        write_amplitude_csv(out / "amplitude.csv", est)
    return EXIT_OK


def cmd_experiment(args) -> int:
    levels = tuple(float(v) for v in args.noise.split(","))
    seeds = tuple(range(args.seed, args.seed + args.runs))
    grids = {}
    if args.fine:
        grids["fine"] = tuple(float(v) for v in args.fine.split(","))
    if args.coarse:
        grids["coarse"] = tuple(float(v) for v in args.coarse.split(","))
    spec = ExperimentSpec(args.example, levels, seeds, args.method, **grids)
    progress = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    report = run_example(spec, progress=progress)
    emit_outputs(report, Path(args.out))
    return EXIT_OK


def cmd_rates(args) -> int:
    rows = read_errors_csv(args.inp)
    write_rates_csv(args.out, rates_from_rows(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointsource", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", help="generate boundary data")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fine", action="store_true", help="use the data-generation grid")
    s.set_defaults(func=cmd_simulate)
    s = sub.add_parser("invert-lm", help="Levenberg-Marquardt reconstruction")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_invert_lm)
    s = sub.add_parser("invert-direct", help="probe-based reconstruction")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=["moments", "single", "amplitude"], default="single")
    s.set_defaults(func=cmd_invert_direct)
    s = sub.add_parser("experiment", help="noise-level sweep of a benchmark example")
    s.add_argument("--example", required=True, choices=sorted(EXAMPLES))
    s.add_argument("--noise", default="0.00125,0.0025,0.005,0.01,0.02")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--method", choices=["lm", "direct", "both"], default="lm")
    s.add_argument("--fine", help="dt,h of the data grid")
    s.add_argument("--coarse", help="dt,h of the inversion grid")
    s.add_argument("--out", required=True)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_experiment)
    s = sub.add_parser("rates", help="fit log-log slopes from errors.csv")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rates)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GridError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LmError, SolverError, RecoveryError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
