"""Error, speedup and eigenvalue-decay studies with CSV/JSON reports."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy

from . import rom
from .errors import SolverFailure
from .pod import space_time_inner_product
from .truth import VARIABLES

SPACE_OF = {"v": "v", "w": "v", "p": "p", "q": "p", "u": "u"}
MIN_TICKS = 10


def _norm(x, X):
    return float(np.sqrt(max(x @ (X @ x), 0.0)))


def relative_errors(reference, approx, inner):
    """Per-variable relative errors of the homogenized fields.

    Velocities in H1, pressures in L2, control in H1 of the control
    boundary (space-time sums with weight dt for ``stokes_td``).
    """
    out = {}
    for k in VARIABLES:
        X = inner[SPACE_OF[k]]
        ref = reference.snapshot(k)
        den = _norm(ref, X)
        err = _norm(approx.snapshot(k) - ref, X)
        out[k] = err / den if den > 0 else err
    return out


def environment(truth=None, **extra):
    env = {"python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__, "machine": platform.machine(),
           "processor": platform.processor() or "unknown", "cpu_count": os.cpu_count(),
           "timer_resolution": time.get_clock_info("perf_counter").resolution}
    if truth is not None:
        env.update(problem=truth.problem, h=truth.config.h,
                   truth_dimension=truth.dimension)
        if hasattr(truth, "nt"):
            env["nt"] = truth.nt
    env.update(extra)
    return env


@dataclass
class SweepReport:
    """Results of an error and/or speedup sweep over reduced sizes ``n_list``."""

    problem: str
    n_list: list
    errors: dict = field(default_factory=dict)        # N -> variable -> mean
    projection_errors: dict = field(default_factory=dict)
    j_errors: dict = field(default_factory=dict)      # N -> mean relative J error
    speedup: dict = field(default_factory=dict)       # N -> speedup index
    timings: dict = field(default_factory=dict)       # raw timings
    records: list = field(default_factory=list)       # per (N, mu) raw values
    failed: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    environment: dict = field(default_factory=dict)

    def merge(self, other):
        for name in ("errors", "projection_errors", "j_errors", "speedup", "timings"):
            getattr(self, name).update(getattr(other, name))
        self.records += other.records
        self.failed += other.failed
        self.notes += other.notes
        self.environment.update(other.environment)
        return self

    def to_dict(self):
        return json.loads(json.dumps(asdict(self), default=_jsonable))

    def write(self, directory, date=None):
        """Write JSON plus one CSV per quantity; returns the written paths."""
        os.makedirs(directory, exist_ok=True)
        date = date or _dt.date.today().isoformat()
        stem = os.path.join(directory, f"{self.problem}_{{}}_{date}")
        paths = []
        with open(stem.format("report") + ".json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        paths.append(stem.format("report") + ".json")
        if self.errors:
            path = stem.format("errors") + ".csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["N", *VARIABLES, "J"])
                for n in self.n_list:
                    if n in self.errors:
                        w.writerow([n, *(repr(self.errors[n][k]) for k in VARIABLES),
                                    repr(self.j_errors[n])])
            paths.append(path)
            path = stem.format("raw") + ".csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["N", "mu", *VARIABLES, "J_truth", "J_reduced", "J_error"])
                for r in self.records:
                    w.writerow([r["n"], " ".join(repr(m) for m in r["mu"]),
                                *(repr(r["errors"][k]) for k in VARIABLES),
                                repr(r["J_truth"]), repr(r["J_reduced"]), repr(r["J_error"])])
            paths.append(path)
        if self.speedup:
            path = stem.format("speedup") + ".csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["N", "reduced_dimension", "truth_time", "reduced_time", "speedup"])
                for n in self.n_list:
                    if n in self.speedup:
                        t = self.timings[n]
                        w.writerow([n, t["dimension"], repr(t["truth_time"]),
                                    repr(t["reduced_time"]), repr(self.speedup[n])])
            paths.append(path)
        return paths


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def truth_solutions(truth, mus):
    """Truth solves over ``mus``; failures are returned separately."""
    sols, failed = [], []
    for mu in mus:
        try:
            sols.append(truth.solve(mu))
        except SolverFailure as exc:
            failed.append({"mu": list(truth.mu(mu).values), "error": str(exc)})
            sols.append(None)
    return sols, failed


def error_sweep(model, truth, test_mus, n_list, references=None, inner=None):
    """Mean relative errors and relative cost errors for each ``N`` in ``n_list``.

    ``references`` may hold precomputed truth solutions for ``test_mus``.
    Test parameters whose truth solve fails are listed in ``failed`` and
    excluded from all means.
    """
    inner = inner or {k: space_time_inner_product(truth, k) for k in ("v", "p", "u")}
    report = SweepReport(model.problem, list(n_list))
    if references is None:
        references, report.failed = truth_solutions(truth, test_mus)
    for n in n_list:
        sub = model.truncate(n) if n != model.n else model
        errs, perrs, jerr = {k: [] for k in VARIABLES}, {k: [] for k in VARIABLES}, []
        for mu, ref in zip(test_mus, references):
            if ref is None:
                continue
            try:
                red = rom.solve_reduced(sub, mu)
            except SolverFailure as exc:
                report.failed.append({"mu": list(truth.mu(mu).values), "n": n,
                                      "error": str(exc)})
                continue
            approx = rom.reconstruct(sub, red.coefficients, mu)
            e = relative_errors(ref, approx, inner)
            proj = rom.reconstruct(sub, rom.project_solution(sub, ref, inner), mu)
            pe = relative_errors(ref, proj, inner)
            je = abs(red.cost - ref.cost) / abs(ref.cost)
            for k in VARIABLES:
                errs[k].append(e[k])
                perrs[k].append(pe[k])
            jerr.append(je)
            report.records.append({"n": n, "mu": list(truth.mu(mu).values), "errors": e,
                                   "projection_errors": pe, "J_truth": ref.cost,
                                   "J_reduced": red.cost, "J_error": je})
        if jerr:
            report.errors[n] = {k: float(np.mean(v)) for k, v in errs.items()}
            report.projection_errors[n] = {k: float(np.mean(v)) for k, v in perrs.items()}
            report.j_errors[n] = float(np.mean(jerr))
    return report


def _time_call(fn, repeats):
    """Median wall time of ``fn`` over ``repeats`` runs after one warm-up.

    Falls back to batched timing when a single call lasts fewer than
    ``MIN_TICKS`` timer ticks.  Returns ``(median, raw, batch)``.
    """
    fn()
    tick = max(time.get_clock_info("perf_counter").resolution, 1e-9)
    t0 = time.perf_counter()
    fn()
    single = time.perf_counter() - t0
    batch = 1
    if single < MIN_TICKS * tick:
        batch = int(np.ceil(MIN_TICKS * tick / max(single, tick))) * 10
    raw = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(batch):
            fn()
        raw.append((time.perf_counter() - t0) / batch)
    return statistics.median(raw), raw, batch


def speedup_sweep(model, truth, mus, n_list, repeats=5, truth_repeats=None):
    """Speedup index per ``N``: mean truth time over mean reduced time.

    Every time is a median of ``repeats`` runs after a discarded warm-up;
    the reduced time includes evaluating the parameter coefficients and
    assembling the reduced system.
    """
    report = SweepReport(model.problem, list(n_list))
    truth_repeats = truth_repeats or repeats
    t_truth, raw_truth = [], {}
    for mu in mus:
        med, raw, _ = _time_call(lambda: truth.solve(mu), truth_repeats)
        t_truth.append(med)
        raw_truth[str(truth.mu(mu).values)] = raw
    truth_time = float(np.mean(t_truth))
    for n in n_list:
        sub = model.truncate(n) if n != model.n else model
        t_red, raw_red, batches = [], {}, []
        for mu in mus:
            med, raw, batch = _time_call(lambda: rom.solve_reduced(sub, mu), repeats)
            t_red.append(med)
            raw_red[str(truth.mu(mu).values)] = raw
            batches.append(batch)
        if max(batches) > 1:
            report.notes.append(f"N={n}: batched timing ({max(batches)} calls per sample)")
        red_time = float(np.mean(t_red))
        report.speedup[n] = truth_time / red_time
        report.timings[n] = {"dimension": sub.dimension, "truth_time": truth_time,
                             "reduced_time": red_time, "truth_raw": raw_truth,
                             "reduced_raw": raw_red}
    report.environment = environment(truth, truth_repeats=truth_repeats, repeats=repeats)
    return report


def eigen_decay_report(spectra):
    """Rows ``(variable, n, eigenvalue, cumulative energy)``."""
    rows = []
    for k, s in spectra.items():
        for i, (lam, ce) in enumerate(zip(s.eigenvalues, s.cumulative_energy), start=1):
            rows.append((k, i, float(lam), float(ce)))
    return rows


def write_eigen_decay_csv(path, spectra):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "n", "eigenvalue", "cumulative_energy"])
        for k, i, lam, ce in eigen_decay_report(spectra):
            w.writerow([k, i, repr(lam), repr(ce)])
    return path
