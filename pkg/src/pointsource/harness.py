"""Synthetic experiments: fine-grid data, noise, coarse-grid inversion, error statistics."""

from __future__ import annotations

import csv
import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from . import __version__
from .direct import (RecoveryError, harmonic_moments, prony_recover, recover_amplitude,
                     recover_location_single)
from .fem import (ProblemConfig, SourceModel, build_interval_mesh, build_square_mesh)
from .forward import (BoundaryTrace, Stepper, TimeGrid, default_tail_length, extend_in_time,
                      restrict_trace, simulate)
from .lm import (ForwardModel, LmError, LmParams, LmSchedule, amplitude_error, location_error,
                 noise_norm, run_lm, write_history_csv)

DEFAULT_NOISE_LEVELS = (0.00125, 0.0025, 0.005, 0.01, 0.02)


def _indicator(end: float) -> Callable:
    # closed on the right so a jump at a grid point keeps its left value
    return lambda t: (np.asarray(t) <= end + 1e-12).astype(float)


def _exp(c: float, s: float) -> Callable:
    return lambda t: c * np.exp(-s * np.asarray(t))


@dataclass(frozen=True)
class ExampleSetup:
    """Embedded description of one benchmark example."""

    dim: int
    locations: tuple
    amplitudes: tuple
    reaction: float
    fine: tuple            # (dt, h) for data generation
    coarse: tuple          # (dt, h) for inversion
    beta0: tuple
    gamma: tuple
    init_locations: tuple
    init_amplitudes: Callable[[np.ndarray], np.ndarray]
    support_end: float = 1.0
    obs_start: float = 1.5
    exact_support: bool = False
    horizon: float = 2.0
    length: float = 1.0


def _scaled_init(factor, fns):
    return lambda t: np.array([factor * f(t) for f in fns])


def _const_init(values):
    return lambda t: np.array([np.full(np.shape(t), float(v)) for v in values])


_E1 = (_exp(0.5, 5.0),)
_I1 = (_indicator(1.0),)
_E3 = (_exp(0.5, 5.0), _exp(0.25, 4.0))
_I4 = (_indicator(2.0 / 3.0), _indicator(4.0 / 3.0))

EXAMPLES: dict[str, ExampleSetup] = {
    "ex1i": ExampleSetup(1, ((0.5,),), _E1, 1.0, (1e-3, 1e-3), (4e-3, 4e-3), (1.0, 5.0), (0.8, 0.8),
                         ((0.4,),), _scaled_init(0.8, _E1)),
    "ex1ii": ExampleSetup(1, ((0.5,),), _I1, 1.0, (1e-3, 1e-3), (4e-3, 4e-3), (1.0, 2.0), (0.8, 0.8),
                          ((0.0,),), _const_init([0.0]), exact_support=True),
    "ex2i": ExampleSetup(2, ((0.5, 0.5),), _E1, 1.0, (5e-3, 5e-3), (2e-2, 2e-2), (1.0, 50.0), (0.8, 0.8),
                         ((0.4, 0.4),), _scaled_init(0.8, _E1)),
    "ex2ii": ExampleSetup(2, ((0.5, 0.5),), _I1, 1.0, (5e-3, 5e-3), (2e-2, 2e-2), (1.0, 50.0), (0.8, 0.8),
                          ((0.0, 0.0),), _const_init([0.0]), exact_support=True),
    "ex3": ExampleSetup(2, ((0.25, 0.25), (0.75, 0.75)), _E3, 1.0, (5e-3, 5e-3), (2e-2, 2e-2),
                        (1.0, 50.0), (0.8, 0.8), ((0.2, 0.2), (0.8, 0.8)), _scaled_init(0.8, _E3)),
    "ex4": ExampleSetup(2, ((0.25, 0.25), (0.75, 0.75)), _I4, 1.0, (5e-3, 5e-3), (2e-2, 2e-2),
                        (1.0, 50.0), (0.8, 0.8), ((0.0, 0.0), (0.0, 0.0)), _const_init([0.0, 1.0]),
                        support_end=4.0 / 3.0, exact_support=True),
    "direct2d": ExampleSetup(2, ((0.25, 0.25), (0.75, 0.75)), _E3, 0.0, (5e-3, 5e-3), (2e-2, 2e-2),
                             (1.0, 50.0), (0.8, 0.8), ((0.2, 0.2), (0.8, 0.8)), _scaled_init(0.8, _E3)),
}


@dataclass(frozen=True)
class ExperimentSpec:
    example_id: str
    noise_levels: tuple = DEFAULT_NOISE_LEVELS
    seeds: tuple = tuple(range(10))
    method: str = "lm"
    fine: tuple | None = None
    coarse: tuple | None = None
    lm: LmSchedule | None = None
    keep_histories: bool = True

    def __post_init__(self):
        if self.example_id not in EXAMPLES:
            raise ValueError(f"unknown example {self.example_id!r}")
        if self.method not in ("lm", "direct", "both"):
            raise ValueError("method must be lm, direct or both")
        levels = tuple(float(d) for d in self.noise_levels)
        if any(d < 0 for d in levels):
            raise ValueError("noise levels must be non-negative")
        object.__setattr__(self, "noise_levels", levels)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def n_runs(self) -> int:
        return len(self.seeds)

    @property
    def setup(self) -> ExampleSetup:
        return EXAMPLES[self.example_id]

    @property
    def grids(self) -> tuple:
        s = self.setup
        return (self.fine or s.fine, self.coarse or s.coarse)

    def schedule(self) -> LmSchedule:
        if self.lm is not None:
            return self.lm
        s = self.setup
        return LmSchedule(s.beta0[0], s.beta0[1], s.gamma[0], s.gamma[1])


def example_config(example_id: str) -> ProblemConfig:
    s = EXAMPLES[example_id]
    return ProblemConfig(s.dim, s.length, np.zeros(s.dim), s.reaction, s.horizon, s.support_end, s.obs_start)


def build_mesh(dim: int, length: float, h: float):
    return build_interval_mesh(length, h) if dim == 1 else build_square_mesh(length, h)


def example_sources(example_id: str, grid: TimeGrid) -> SourceModel:
    s = EXAMPLES[example_id]
    return SourceModel.from_functions(s.locations, s.amplitudes, grid.times, strict_support=s.exact_support)


def example_init(example_id: str, grid: TimeGrid) -> LmParams:
    s = EXAMPLES[example_id]
    return LmParams(np.array(s.init_locations, dtype=float), s.init_amplitudes(grid.times))


def example_truth(example_id: str, grid: TimeGrid) -> LmParams:
    s = EXAMPLES[example_id]
    return LmParams(np.array(s.locations, dtype=float), np.array([f(grid.times) for f in s.amplitudes]))


# ---------------------------------------------------------------------------
# noise

def standard_normals(seed: int, n_steps: int, n_nodes: int) -> np.ndarray:
    """Standard normal field indexed by (step, node), keyed by ``seed``.

    Philox is counter based: sample ``(n, b)`` consumes the two 64-bit words
    at counter position ``n * n_nodes + b`` of the stream keyed by ``seed``
    and maps them to a normal deviate by Box-Muller.
    """
    count = n_steps * n_nodes
    bits = np.random.Philox(key=int(seed) & (2**64 - 1)).random_raw(2 * count).reshape(count, 2)
    u1 = ((bits[:, 0] >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    u2 = (bits[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return z.reshape(n_steps, n_nodes)


def make_noisy(trace: BoundaryTrace, delta: float, seed: int) -> BoundaryTrace:
    """Add i.i.d. N(0, (delta * sup|trace|)^2) to every boundary sample.

    The final-time snapshot is left untouched.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta == 0:
        return trace.with_values(trace.values.copy())
    noise = standard_normals(seed, *trace.values.shape)
    return trace.with_values(trace.values + delta * trace.sup_norm() * noise)


# ---------------------------------------------------------------------------
# reports

@dataclass
class RunRecord:
    delta: float
    seed: int
    method: str
    location_error: float
    amplitude_error: float
    iterations: int = 0
    stop_reason: str = ""
    wall_time: float = 0.0
    failure: str = ""


@dataclass
class ErrorRow:
    delta: float
    location_mean: float
    location_stderr: float
    amplitude_mean: float
    amplitude_stderr: float
    n_ok: int

    def as_list(self):
        return [self.delta, self.location_mean, self.location_stderr, self.amplitude_mean,
                self.amplitude_stderr, self.n_ok]


@dataclass
class RateFit:
    slope: float
    intercept: float
    r2: float


@dataclass
class ErrorReport:
    example_id: str = ""
    method: str = ""
    rows: list = field(default_factory=list)
    location_fit: RateFit | None = None
    amplitude_fit: RateFit | None = None
    runs: list = field(default_factory=list)
    histories: dict = field(default_factory=dict)
    amplitude_sample: dict | None = None
    incomplete: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0


ERROR_HEADER = ["delta", "location_mean", "location_stderr", "amplitude_mean", "amplitude_stderr", "n_ok"]


def rate_fit(pairs) -> RateFit:
    """Least-squares line through ``(ln delta, ln error)``."""
    pairs = [(float(d), float(e)) for d, e in pairs]
    if len(pairs) < 3:
        raise ValueError("need at least three points")
    if any(not (d > 0 and e > 0) for d, e in pairs):
        raise ValueError("noise levels and errors must be positive")
    x = np.log([d for d, _ in pairs])
    y = np.log([e for _, e in pairs])
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(((y - pred) ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), r2)


def _stats(vals):
    vals = np.array([v for v in vals if np.isfinite(v)])
    if vals.size == 0:
        return float("nan"), float("nan")
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), se


def aggregate(runs: list, noise_levels, method: str) -> list:
    rows = []
    for d in noise_levels:
        sel = [r for r in runs if r.delta == d and r.method == method]
        ok = [r for r in sel if not r.failure]
        lm_, ls = _stats([r.location_error for r in ok])
        am, as_ = _stats([r.amplitude_error for r in ok])
        rows.append(ErrorRow(d, lm_, ls, am, as_, len(ok)))
    return rows


def _fit_rows(rows, attr):
    pts = [(r.delta, getattr(r, attr)) for r in rows
           if r.delta > 0 and np.isfinite(getattr(r, attr)) and getattr(r, attr) > 0]
    return rate_fit(pts) if len(pts) >= 3 else None


# ---------------------------------------------------------------------------
# experiment driver

@dataclass
class PreparedExample:
    config: ProblemConfig
    fine_mesh: object
    fine_grid: TimeGrid
    coarse_mesh: object
    coarse_grid: TimeGrid
    fine_trace: BoundaryTrace
    truth: LmParams
    model: ForwardModel


def prepare_example(example_id: str, fine=None, coarse=None) -> PreparedExample:
    """Simulate clean fine-grid data and set up the coarse inversion model."""
    s = EXAMPLES[example_id]
    fine = fine or s.fine
    coarse = coarse or s.coarse
    cfg = example_config(example_id)
    fmesh = build_mesh(s.dim, s.length, fine[1])
    fgrid = TimeGrid.uniform(s.horizon, fine[0])
    cmesh = build_mesh(s.dim, s.length, coarse[1])
    cgrid = TimeGrid.uniform(s.horizon, coarse[0])
    trace = simulate(cfg, fmesh, example_sources(example_id, fgrid), fgrid)
    return PreparedExample(cfg, fmesh, fgrid, cmesh, cgrid, trace, example_truth(example_id, cgrid),
                           ForwardModel(cfg, cmesh, cgrid))


def _direct_estimate(prep: PreparedExample, data: BoundaryTrace):
    """Direct locations (and single-source amplitude) from coarse data."""
    cfg, mesh, grid = prep.config, prep.coarse_mesh, prep.coarse_grid
    n = prep.truth.n_sources
    if n == 1 and cfg.shifted_reaction > 0:
        loc = recover_location_single(data, cfg, mesh).location[None, :]
        tail, _ = default_tail_length(cfg)
        ext = extend_in_time(cfg, mesh, data.final_snapshot, tail, stepper=prep.model.stepper)
        est = recover_amplitude(data, ext, loc[0], cfg, mesh, times=grid.times)
        amps = est.time_samples[None, :]
    elif cfg.dim == 2:
        nodes, _ = prony_recover(harmonic_moments(data, cfg, mesh, 2 * n), n)
        loc = np.column_stack([nodes.real, nodes.imag])
        amps = np.full((n, grid.n_steps + 1), np.nan)
    else:
        raise RecoveryError("no direct method for this configuration")
    return LmParams(loc, amps)


def run_example(spec: ExperimentSpec, prepared: PreparedExample | None = None,
                progress: Callable[[str], None] | None = None) -> ErrorReport:
    """Run every (noise level, seed) pair and aggregate L1 errors."""
    t0 = time.perf_counter()
    prep = prepared or prepare_example(spec.example_id, *spec.grids)
    methods = ["lm", "direct"] if spec.method == "both" else [spec.method]
    schedule = spec.schedule()
    data_sup = prep.fine_trace.sup_norm()
    grid = prep.coarse_grid
    report = ErrorReport(spec.example_id, spec.method)
    sample_delta = 0.005 if 0.005 in spec.noise_levels else spec.noise_levels[0]
    for delta in spec.noise_levels:
        for seed in spec.seeds:
            noisy = make_noisy(prep.fine_trace, delta, seed)
            data = restrict_trace(noisy, prep.fine_mesh, prep.coarse_mesh, grid)
            for method in methods:
                rec = RunRecord(delta, seed, method, float("nan"), float("nan"))
                t_run = time.perf_counter()
                try:
                    if method == "lm":
                        res = run_lm(example_init(spec.example_id, grid), data, schedule, prep.config,
                                     prep.coarse_mesh, grid,
                                     noise_level=noise_norm(delta, data_sup, prep.config, prep.coarse_mesh),
                                     truth=prep.truth, model=prep.model)
                        est = res.final
                        rec.iterations = len(res.history) - 1
                        rec.stop_reason = res.stop_reason.value
                        if spec.keep_histories:
                            report.histories[(delta, seed)] = res.history
                    else:
                        est = _direct_estimate(prep, data)
                        rec.stop_reason = "direct"
                    rec.location_error = location_error(est.locations, prep.truth.locations)[0]
                    if np.all(np.isfinite(est.amplitudes)):
                        rec.amplitude_error = amplitude_error(est, prep.truth.locations,
                                                              prep.truth.amplitudes, grid)
                    if delta == sample_delta and seed == spec.seeds[0] and method == methods[0]:
                        report.amplitude_sample = {"times": grid.times, "truth": prep.truth.amplitudes,
                                                   "estimate": est.amplitudes}
                except (LmError, RecoveryError, ArithmeticError, RuntimeError, ValueError) as exc:
                    rec.failure = f"{type(exc).__name__}: {exc}"
                    report.incomplete.append((delta, seed, method))
                rec.wall_time = time.perf_counter() - t_run
                report.runs.append(rec)
                if progress:
                    progress(f"{spec.example_id} {method} delta={delta:g} seed={seed} "
                             f"loc={rec.location_error:.3e} amp={rec.amplitude_error:.3e} "
                             f"it={rec.iterations} {rec.stop_reason}{' FAIL ' + rec.failure if rec.failure else ''}")
    main = methods[0]
    report.rows = aggregate(report.runs, spec.noise_levels, main)
    report.location_fit = _fit_rows(report.rows, "location_mean")
    report.amplitude_fit = _fit_rows(report.rows, "amplitude_mean")
    report.config = {
        "example_id": spec.example_id, "method": spec.method, "noise_levels": list(spec.noise_levels),
        "seeds": list(spec.seeds), "fine": list(spec.grids[0]), "coarse": list(spec.grids[1]),
        "schedule": {k: (v if not hasattr(v, "value") else v.value) for k, v in asdict(schedule).items()
                     if k != "gn_solver"},
    }
    report.wall_time = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# output

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_errors_csv(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ERROR_HEADER)
        for r in rows:
            wr.writerow([_fmt(v) for v in r.as_list()])


def read_errors_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ERROR_HEADER:
            raise ValueError("unexpected errors.csv header")
        return [ErrorRow(float(a), float(b), float(c), float(d), float(e), int(f)) for a, b, c, d, e, f in rd]


def rates_from_rows(rows) -> dict:
    return {"location": _fit_rows(rows, "location_mean"), "amplitude": _fit_rows(rows, "amplitude_mean")}


def write_rates_csv(path, fits: dict) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["quantity", "slope", "intercept", "r2"])
        for name, fit in fits.items():
            if fit is None:
                wr.writerow([name, "nan", "nan", "nan"])
            else:
                wr.writerow([name, _fmt(fit.slope), _fmt(fit.intercept), _fmt(fit.r2)])


_PLOT = """# gnuplot script: amplitude overlay, error versus iteration, error versus noise level
set datafile separator ','
set terminal pngcairo size 1500,450
set output 'summary.png'
set multiplot layout 1,3
set title 'amplitude'
set xlabel 't'
plot {amp_plot}
set title 'error vs iteration'
set xlabel 'k'
set logscale y
plot {hist_plot}
set title 'error vs noise level'
set xlabel 'delta'
set logscale xy
plot 'errors.csv' every ::1 using 1:2 with linespoints title 'location', \\
     'errors.csv' every ::1 using 1:4 with linespoints title 'amplitude'
unset multiplot
"""


def write_plot_script(path, n_sources: int, has_sample: bool, has_history: bool) -> None:
    if has_sample:
        parts = []
        for k in range(n_sources):
            parts.append(f"'amplitude.csv' every ::1 using 1:{2 + k} with lines title 'true {k + 1}'")
            parts.append(f"'amplitude.csv' every ::1 using 1:{2 + n_sources + k} with lines title 'recovered {k + 1}'")
        amp_plot = ", \\\n     ".join(parts)
    else:
        amp_plot = "NaN notitle"
    if has_history:
        hist_plot = ("'history.csv' every ::1 using 2:4 with points title 'location', \\\n"
                     f"     'history.csv' every ::1 using 2:{4 + n_sources} with points title 'amplitude'")
    else:
        hist_plot = "NaN notitle"
    Path(path).write_text(_PLOT.format(amp_plot=amp_plot, hist_plot=hist_plot))


def emit_outputs(report: ErrorReport, out_dir) -> list:
    """Write errors.csv, runs.csv, history.csv, rates.csv, amplitude.csv, plot.gp, manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    write_errors_csv(out / "errors.csv", report.rows)
    files.append("errors.csv")
    with (out / "runs.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["delta", "seed", "method", "location_error", "amplitude_error", "iterations",
                     "stop_reason", "failure"])
        for r in report.runs:
            wr.writerow([_fmt(r.delta), r.seed, r.method, _fmt(r.location_error), _fmt(r.amplitude_error),
                         r.iterations, r.stop_reason, r.failure])
    files.append("runs.csv")
    hist = out / "history.csv"
    n_src = 1
    if report.histories:
        first = True
        for (delta, seed), h in sorted(report.histories.items()):
            n_src = max(n_src, max((len(x.location_errors) for x in h), default=1))
            write_history_csv(hist, h, run=f"{delta!r}:{seed}", append=not first)
            first = False
    else:
        hist.write_text("run,iteration,residual,location_error_1,amplitude_l1_error,beta_x,beta_lambda\n")
    files.append("history.csv")
    write_rates_csv(out / "rates.csv", {"location": report.location_fit, "amplitude": report.amplitude_fit})
    files.append("rates.csv")
    if report.amplitude_sample is not None:
        s = report.amplitude_sample
        truth, est = np.atleast_2d(s["truth"]), np.atleast_2d(s["estimate"])
        n_src = truth.shape[0]
        with (out / "amplitude.csv").open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["time"] + [f"true_{k + 1}" for k in range(n_src)] +
                        [f"recovered_{k + 1}" for k in range(n_src)])
            for i, t in enumerate(s["times"]):
                wr.writerow([_fmt(t)] + [_fmt(v) for v in truth[:, i]] + [_fmt(v) for v in est[:, i]])
        files.append("amplitude.csv")
    write_plot_script(out / "plot.gp", n_src, report.amplitude_sample is not None, bool(report.histories))
    files.append("plot.gp")
    manifest = {
        "config": report.config,
        "versions": {"pointsource": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "incomplete": [list(x) for x in report.incomplete],
        "wall_time": report.wall_time,
        "run_wall_times": [[r.delta, r.seed, r.method, r.wall_time] for r in report.runs],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    files.append("manifest.json")
    return files
