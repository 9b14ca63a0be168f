"""Command-line front end: ``podocp {offline,online,validate,mesh}``.

Exit codes: 0 success, 2 usage or configuration error, 3 solver failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import glob
import json
import logging
import os
import sys
import time
import warnings

import numpy as np

from . import bench, config, geometry, pod, rom
from . import io as pio
from .errors import InvalidArgumentError, MeshResolutionError, PodOcpError, SolverFailure
from .fem import build_layout
from .problems import STOKES_TD, ParameterPoint
from .truth import make_truth

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
MODEL_FILE = "model.bin"
log = logging.getLogger("podocp")


class UsageError(Exception):
    pass


# -- helpers ----------------------------------------------------------------------

def _output_root(args, cfg=None):
    if args.out:
        return args.out
    if os.environ.get("PODOCP_OUT"):
        return os.environ["PODOCP_OUT"]
    if cfg is not None and cfg["output"]["root"]:
        return cfg["output"]["root"]
    return "podocp_runs"


def new_run_dir(root, problem, command):
    """Fresh ``<root>/<problem>_<command>_<timestamp>`` directory."""
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    base = os.path.join(root, f"{problem}_{command}_{stamp}")
    path, k = base, 1
    while True:
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            path, k = f"{base}-{k}", k + 1


def _write_manifest(run_dir, stages, complete, **extra):
    data = {"complete": complete, "stages": stages, **extra}
    with open(os.path.join(run_dir, "MANIFEST.json"), "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=str)


def _load_config(args, problem=None):
    if getattr(args, "config", None):
        return config.load(args.config)
    if problem is not None:
        return config.resolve({"problem": problem})
    raise UsageError("--config is required")


def _parse_mu(text, problem, cfg):
    try:
        values = tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise UsageError(f"cannot parse --mu {text!r}") from exc
    try:
        point = ParameterPoint(problem, values, config.box(cfg))
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from exc
    if point.extrapolated:
        warnings.warn(f"mu={values} lies outside the parameter box; evaluating anyway")
    return point


def _find_model(args, cfg):
    """Model file from the positional argument, the config, or the latest offline run."""
    path = getattr(args, "model", None) or (cfg["output"]["model"] if cfg else None)
    if path is None:
        root = _output_root(args, cfg)
        runs = sorted(glob.glob(os.path.join(root, f"{cfg['problem']}_offline_*")))
        for run in reversed(runs):
            try:
                with open(os.path.join(run, "MANIFEST.json")) as fh:
                    if json.load(fh).get("complete"):
                        path = run
                        break
            except OSError:
                continue
        if path is None:
            raise OSError(f"no complete offline run for {cfg['problem']} under {root}")
    if os.path.isdir(path):
        path = os.path.join(path, MODEL_FILE)
    return path


def _model_config(path):
    """Resolved config stored next to a model, if any."""
    cfg_path = os.path.join(os.path.dirname(path), "config.resolved.yaml")
    return config.load(cfg_path) if os.path.exists(cfg_path) else None


# -- commands -----------------------------------------------------------------------

def cmd_offline(args):
    cfg = _load_config(args)
    if args.jobs:
        cfg["jobs"] = args.jobs
    run_dir = new_run_dir(_output_root(args, cfg), cfg["problem"], "offline")
    config.dump(cfg, os.path.join(run_dir, "config.resolved.yaml"))
    stages = []
    try:
        t0 = time.perf_counter()
        truth = make_truth(cfg["problem"], config.truth_config(cfg))
        stages.append("mesh")
        off = cfg["offline"]
        mus = pod.sample_training_set(cfg["problem"], off["training_size"],
                                      off["training_seed"], config.box(cfg))
        snaps = pod.collect_snapshots(truth, mus, jobs=cfg["jobs"])
        snaps.save(os.path.join(run_dir, "snapshots.bin"))
        with open(os.path.join(run_dir, "truth_runs.json"), "w") as fh:
            json.dump({"records": snaps.records, "failed": snaps.failed}, fh, indent=2,
                      default=str)
        stages.append("snapshots")
        basis, spectra = pod.build_reduced_basis(snaps, truth, off["eps_tol"], off["n_max"],
                                                 supremizers=off["supremizers"])
        basis.save(os.path.join(run_dir, "basis.bin"))
        date = _dt.date.today().isoformat()
        bench.write_eigen_decay_csv(
            os.path.join(run_dir, f"{cfg['problem']}_eigendecay_{date}.csv"), spectra)
        stages.append("basis")
        model = rom.project(basis, truth)
        model.meta.update(truth_dimension=truth.dimension, training_size=snaps.size,
                          partial_training=snaps.partial)
        model.save(os.path.join(run_dir, MODEL_FILE))
        stages.append("projection")
    except BaseException:
        _write_manifest(run_dir, stages, False)
        print(f"offline failed after stages {stages}; partial artifacts in {run_dir}",
              file=sys.stderr)
        raise
    _write_manifest(run_dir, stages, True, reduced_dimension=model.dimension, n=model.n,
                    truth_dimension=truth.dimension, partial_training=snaps.partial,
                    elapsed=time.perf_counter() - t0)
    print(f"N = {model.n}, reduced dimension {model.dimension} "
          f"(truth {truth.dimension}), |training set| = {snaps.size}")
    print(f"artifacts: {run_dir}")
    return EXIT_OK


def _export_times(nt, dt):
    """Time-node indices closest to t = 0.05, 0.5, 1."""
    out = []
    for t in (0.05, 0.5, 1.0):
        idx = int(np.clip(round(t / dt) - 1, 0, nt - 1))
        if idx not in out:
            out.append(idx)
    return out


def cmd_online(args):
    cfg = _load_config(args) if args.config else None
    if args.model is None and cfg is None:
        raise UsageError("give a model path or --config")
    path = _find_model(args, cfg)
    model = rom.ReducedModel.load(path)
    cfg = cfg or _model_config(path) or config.resolve({"problem": model.problem})
    if cfg["problem"] != model.problem:
        raise UsageError(f"config is for {cfg['problem']}, model for {model.problem}")
    if args.mu is None:
        raise UsageError("--mu is required")
    mu = _parse_mu(args.mu, model.problem, cfg)
    if args.n:
        model = model.truncate(args.n)
    red = rom.solve_reduced(model, mu)
    print(f"J_N = {red.cost:.12e}")
    print(f"online time = {red.online_time:.3e} s (reduced dimension {model.dimension})")
    need_dir = args.export_vtk or args.compare_truth
    run_dir = new_run_dir(_output_root(args, cfg), model.problem, "online") if need_dir else None
    if run_dir:
        config.dump(cfg, os.path.join(run_dir, "config.resolved.yaml"))
    result = {"mu": list(mu.values), "n": model.n, "J_N": red.cost,
              "online_time": red.online_time}
    truth = None
    if args.export_vtk or args.compare_truth:
        truth = make_truth(model.problem, config.truth_config(cfg))
    fields = rom.reconstruct(model, red.coefficients, mu)
    if args.export_vtk:
        _export_fields(run_dir, truth.layout, fields, model, "rom")
    if args.compare_truth:
        ref = truth.solve(mu)
        inner = {k: pod.space_time_inner_product(truth, k) for k in ("v", "p", "u")}
        errs = bench.relative_errors(ref, fields, inner)
        jerr = abs(red.cost - ref.cost) / abs(ref.cost)
        print(f"J_truth = {ref.cost:.12e}  relative J error = {jerr:.3e}")
        for k, e in errs.items():
            print(f"relative error {k}: {e:.3e}")
        print(f"truth time = {ref.diagnostics.get('solve_time', float('nan')):.3e} s")
        result.update(J_truth=ref.cost, J_error=jerr, errors=errs)
        if args.export_vtk:
            _export_fields(run_dir, truth.layout, ref, model, "truth")
    if run_dir:
        with open(os.path.join(run_dir, "online.json"), "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
        print(f"artifacts: {run_dir}")
    return EXIT_OK


def _control_on_nodes(layout, u):
    # zero away from the control boundary
    out = np.zeros(layout.n_velocity)
    out[layout.control_velocity_dofs] = u
    return out


def _export_fields(run_dir, layout, fields, model, tag):
    names = ("v", "p", "w", "q")
    if model.problem == STOKES_TD:
        nt, dt = model.settings["nt"], model.settings["dt"]
        for idx in _export_times(nt, dt):
            data = {k: getattr(fields, k)[idx] for k in names}
            data["u"] = _control_on_nodes(layout, fields.u[idx])
            t = (idx + 1) * dt
            pio.write_vtk(os.path.join(run_dir, f"{tag}_t{t:.2f}.vtk"), layout, data,
                          title=f"{tag} fields at t={t:.4f}")
    else:
        data = {k: getattr(fields, k) for k in names}
        data["u"] = _control_on_nodes(layout, fields.u)
        pio.write_vtk(os.path.join(run_dir, f"{tag}.vtk"), layout, data, title=f"{tag} fields")


def cmd_validate(args):
    cfg = _load_config(args)
    path = _find_model(args, cfg)
    model = rom.ReducedModel.load(path)
    if model.problem != cfg["problem"]:
        raise UsageError(f"config is for {cfg['problem']}, model for {model.problem}")
    v = cfg["validate"]
    n_list = [int(x) for x in (args.n_list.split(",") if args.n_list else v["n_list"])]
    bad = [n for n in n_list if n > model.n]
    if bad:
        raise UsageError(f"N values {bad} exceed the trained N = {model.n}")
    run_dir = new_run_dir(_output_root(args, cfg), cfg["problem"], "validate")
    config.dump(cfg, os.path.join(run_dir, "config.resolved.yaml"))
    truth = make_truth(cfg["problem"], config.truth_config(cfg))
    tests = pod.sample_training_set(cfg["problem"], v["test_size"], v["test_seed"],
                                    config.box(cfg))
    report = bench.error_sweep(model, truth, tests, n_list)
    speed = bench.speedup_sweep(model, truth, tests[: v["speedup_samples"]], n_list,
                                repeats=v["timing_repeats"])
    report.merge(speed)
    report.environment.update(
        bench.environment(truth, test_size=v["test_size"], test_seed=v["test_seed"],
                          training_size=model.meta.get("training_size"),
                          training_seed=cfg["offline"]["training_seed"],
                          eps_tol=cfg["offline"]["eps_tol"], model=os.path.abspath(path)))
    paths = report.write(run_dir)
    snap_path = os.path.join(os.path.dirname(path), "snapshots.bin")
    if os.path.exists(snap_path):
        snaps = pod.SnapshotSet.load(snap_path)
        inner = {k: pod.space_time_inner_product(truth, k) for k in ("v", "p", "u")}
        Xof = {"v": inner["v"], "w": inner["v"], "p": inner["p"], "q": inner["p"],
               "u": inner["u"]}
        spectra = {k: pod.pod_spectrum(snaps, k, Xof[k], cfg["offline"]["eps_tol"])
                   for k in Xof}
        date = _dt.date.today().isoformat()
        paths.append(bench.write_eigen_decay_csv(
            os.path.join(run_dir, f"{cfg['problem']}_eigendecay_{date}.csv"), spectra))
    print(f"{'N':>4} {'dim':>5} " + " ".join(f"{k:>9}" for k in "vpuwq")
          + f" {'J err':>9} {'speedup':>9}")
    for n in n_list:
        e = report.errors.get(n, {})
        print(f"{n:>4} {report.timings[n]['dimension']:>5} "
              + " ".join(f"{e.get(k, float('nan')):9.2e}" for k in "vpuwq")
              + f" {report.j_errors.get(n, float('nan')):9.2e} {report.speedup[n]:9.1f}")
    if report.failed:
        print(f"{len(report.failed)} failed evaluation(s) listed in the report")
    print(f"artifacts: {run_dir}")
    return EXIT_OK


def cmd_mesh(args):
    cfg = _load_config(args, problem=STOKES_TD)
    h = args.h or cfg["mesh"]["h"]
    mesh = geometry.build_bifurcation_mesh(h)
    layout = build_layout(mesh)
    run_dir = new_run_dir(_output_root(args, cfg), cfg["problem"], "mesh")
    config.dump(cfg, os.path.join(run_dir, "config.resolved.yaml"))
    pio.write_mesh_text(os.path.join(run_dir, "mesh.txt"), mesh)
    sub = np.zeros(layout.n_nodes)
    for t, s in zip(layout.element_nodes, mesh.subdomains):
        sub[t] = np.maximum(sub[t], s)
    pio.write_vtk(os.path.join(run_dir, "mesh.vtk"), layout, {"subdomain": sub},
                  title=f"bifurcation mesh h={h}")
    print(f"{len(mesh.triangles)} triangles, {len(mesh.vertices)} vertices, "
          f"{layout.n_velocity} velocity / {layout.n_pressure} pressure / "
          f"{layout.n_control} control dofs")
    print(f"artifacts: {run_dir}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="podocp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML run configuration")
        sp.add_argument("--out", help="output root (default $PODOCP_OUT or ./podocp_runs)")
        sp.add_argument("--jobs", type=int, default=None, help="worker processes")

    sp = sub.add_parser("offline", help="snapshots, POD, supremizers, projection")
    common(sp, config_required=True)
    sp.set_defaults(func=cmd_offline)

    sp = sub.add_parser("online", help="reduced solve at one parameter")
    sp.add_argument("model", nargs="?", help="model file or offline run directory")
    common(sp)
    sp.add_argument("--mu", help="comma separated parameter components")
    sp.add_argument("--n", type=int, help="truncate to N modes")
    sp.add_argument("--export-vtk", action="store_true")
    sp.add_argument("--compare-truth", action="store_true")
    sp.set_defaults(func=cmd_online)

    sp = sub.add_parser("validate", help="error and speedup sweeps, eigenvalue decay")
    sp.add_argument("model", nargs="?", help="model file or offline run directory")
    common(sp, config_required=True)
    sp.add_argument("--n", dest="n_list", help="comma separated N list (overrides config)")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("mesh", help="export the computational mesh")
    common(sp)
    sp.add_argument("--h", type=float, help="mesh size (overrides config)")
    sp.set_defaults(func=cmd_mesh)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidArgumentError, MeshResolutionError) as exc:
        print(f"podocp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverFailure, PodOcpError) as exc:
        print(f"podocp: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"podocp: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
