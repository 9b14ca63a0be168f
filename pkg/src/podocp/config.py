"""Run configuration: YAML file with sections, problem-specific defaults."""

from __future__ import annotations

import copy
import math
import re

import yaml

from .errors import InvalidArgumentError
from .problems import NS_BOX, NS_STEADY, PROBLEMS, STOKES_BOX, STOKES_TD
from .truth import NavierStokesConfig, StokesConfig

_COMMON = {
    "offline": {"training_size": 70, "training_seed": 1, "eps_tol": 1e-4, "n_max": 35,
                "supremizers": True},
    "validate": {"test_size": 50, "test_seed": 2, "n_list": [15, 20, 25, 30, 35],
                 "speedup_samples": 3, "timing_repeats": 5},
    "output": {"root": None, "model": None},
    "jobs": 1,
}

DEFAULTS = {
    STOKES_TD: {
        "problem": STOKES_TD,
        "mesh": {"h": 0.25},
        "truth": {"nt": 20, "final_time": 1.0, "initial_state": "lift", "alpha1": 1e-3,
                  "alpha2": 1e-4, "inflow_scale": 1.0, "tol": 1e-9},
        "parameters": {"box": [list(b) for b in STOKES_BOX]},
    },
    NS_STEADY: {
        "problem": NS_STEADY,
        "mesh": {"h": 0.1},
        "truth": {"eta": 1.0, "alpha": 1e-3, "inflow_scale": 1.0, "tol": 1e-9,
                  "max_iter": 25, "min_step": 2.0 ** -10},
        "parameters": {"box": [list(b) for b in NS_BOX]},
    },
}


def _merge(base, extra, path=""):
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if k not in out:
            raise InvalidArgumentError(f"unknown config key {path}{k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def defaults(problem):
    if problem not in PROBLEMS:
        raise InvalidArgumentError(f"unknown problem id {problem!r}; expected one of {PROBLEMS}")
    return _merge(dict(copy.deepcopy(_COMMON), **copy.deepcopy(DEFAULTS[problem])), {})


def resolve(raw):
    """Defaults filled in and every numeric field validated."""
    if not isinstance(raw, dict) or "problem" not in raw:
        raise InvalidArgumentError("config must be a mapping with a 'problem' entry")
    cfg = _merge(defaults(raw["problem"]), raw)
    validate(cfg)
    return cfg


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-4`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$"),
    list("-+0123456789."))


def load(path):
    try:
        with open(path) as fh:
            raw = yaml.load(fh, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise InvalidArgumentError(f"cannot parse {path}: {exc}") from exc
    return resolve(raw)


def dump(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def _positive(name, value, integer=False, upper=None):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if ok and integer:
        ok = float(value).is_integer()
    if not ok or not math.isfinite(value) or value <= 0 or (upper is not None and value > upper):
        rng = f"(0, {upper}]" if upper is not None else "> 0"
        raise InvalidArgumentError(f"{name} must be {'an integer ' if integer else ''}{rng}, "
                                   f"got {value!r}")


def validate(cfg):
    p = cfg["problem"]
    t = cfg["truth"]
    _positive("mesh.h", cfg["mesh"]["h"], upper=0.5)
    _positive("truth.tol", t["tol"], upper=0.1)
    _positive("truth.inflow_scale", t["inflow_scale"])
    if p == STOKES_TD:
        _positive("truth.nt", t["nt"], integer=True)
        _positive("truth.final_time", t["final_time"])
        _positive("truth.alpha1", t["alpha1"])
        _positive("truth.alpha2", t["alpha2"])
        if t["initial_state"] not in ("lift", "stokes"):
            raise InvalidArgumentError("truth.initial_state must be 'lift' or 'stokes'")
    else:
        _positive("truth.eta", t["eta"])
        _positive("truth.alpha", t["alpha"])
        _positive("truth.max_iter", t["max_iter"], integer=True)
        _positive("truth.min_step", t["min_step"], upper=1.0)
    box = cfg["parameters"]["box"]
    arity = 3 if p == STOKES_TD else 1
    if len(box) != arity or any(len(b) != 2 or not b[0] < b[1] for b in box):
        raise InvalidArgumentError(f"parameters.box must hold {arity} intervals [lo, hi], lo < hi")
    o = cfg["offline"]
    _positive("offline.training_size", o["training_size"], integer=True)
    _positive("offline.n_max", o["n_max"], integer=True)
    _positive("offline.eps_tol", o["eps_tol"], upper=0.999)
    v = cfg["validate"]
    _positive("validate.test_size", v["test_size"], integer=True)
    _positive("validate.speedup_samples", v["speedup_samples"], integer=True)
    _positive("validate.timing_repeats", v["timing_repeats"], integer=True)
    if not v["n_list"]:
        raise InvalidArgumentError("validate.n_list is empty")
    for n in v["n_list"]:
        _positive("validate.n_list entry", n, integer=True)
    _positive("jobs", cfg["jobs"], integer=True)
    return cfg


def truth_config(cfg):
    """Solver configuration object for :func:`podocp.truth.make_truth`."""
    t = cfg["truth"]
    if cfg["problem"] == STOKES_TD:
        return StokesConfig(h=cfg["mesh"]["h"], nt=int(t["nt"]), final_time=t["final_time"],
                            alpha1=t["alpha1"], alpha2=t["alpha2"],
                            inflow_scale=t["inflow_scale"], initial_state=t["initial_state"],
                            tol=t["tol"])
    box = tuple(tuple(b) for b in cfg["parameters"]["box"])
    return NavierStokesConfig(h=cfg["mesh"]["h"], eta=t["eta"], alpha=t["alpha"], tol=t["tol"],
                              max_iter=int(t["max_iter"]), min_step=t["min_step"], box=box,
                              inflow_scale=t["inflow_scale"])


def box(cfg):
    return tuple(tuple(b) for b in cfg["parameters"]["box"])
