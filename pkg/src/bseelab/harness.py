"""Experiment configuration, orchestration and result emission.

Configs are INI files (``configparser``); section names are for humans only
and every key is global.  Overrides use ``key=value`` on the command line.
Outputs land in ``$BSEELAB_OUTPUT_ROOT/<scenario>-<hash12>/``:

* ``results.json``   summary (deterministic given config and seed)
* ``<table>.csv``    one per reported table
* ``config.ini``     the resolved config with its hash
* ``timing.json``    wall-clock and worker count (kept out of the summary)
"""

import configparser
import csv
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np

from . import maximum_principle as mp
from . import scenarios
from .vector_bsee import BseeData, NonLipschitzDriver, check_lipschitz

OUTPUT_ENV = "BSEELAB_OUTPUT_ROOT"
DEFAULT_OUTPUT = "bseelab_runs"

# key: (kind, lower, upper, doc); bounds are inclusive, None means open
SCHEMA = {
    "scenario": ("str", None, None, "registered scenario name"),
    "checks": ("strlist", None, None, "subset of the scenario's checks, or 'all'"),
    "horizon": ("float", 1e-6, 100.0, "time horizon T"),
    "steps": ("int", 2, 4096, "number of time steps N"),
    "m": ("int", 1, 16, "state dimension"),
    "d": ("int", 1, 4, "noise dimension"),
    "n_paths": ("int", 10, 100000, "Monte Carlo paths"),
    "master_seed": ("int", 0, 2 ** 62, "master RNG seed"),
    "workers": ("int", 1, 256, "kernel threads (does not change results)"),
    "backend": ("choice", ("auto", "compiled", "python"), None, "kernel backend"),
    "lam": ("float", -100.0, 100.0, "decay rate for the scalar scenarios"),
    "nu": ("float", 0.0, 10.0, "diffusivity of the heat generator"),
    "sigma": ("float", 0.0, 5.0, "multiplicative noise strength"),
    "control_diffusion": ("float", 0.0, 5.0, "control loading of the diffusion"),
    "basis_degree": ("int", 1, 2, "regression basis degree"),
    "picard_max": ("int", 1, 1000, "Picard iteration cap"),
    "picard_tol": ("float", 0.0, 1.0, "Picard tolerance"),
    "control_variate": ("bool", None, None, "centre the Y regressions"),
    "n_tests": ("int", 1, 200, "random test triples / pairs"),
    "tolerance_factor": ("float", 0.0, 1000.0, "multiplier of the error model"),
    "verdict_c": ("float", 0.0, 1000.0, "C in the tolerance 3 SE + C dt"),
    "lattice_size": ("int", 2, 1001, "probe lattice per control axis"),
    "eps_list": ("floatlist", 0.0, 1.0, "spike widths"),
    "spike_time": ("float", 0.0, 100.0, "spike start tau"),
    "spike_control": ("float", -100.0, 100.0, "replacement control value"),
    "riccati_substeps": ("int", 1, 1000, "RK4 substeps per grid step"),
    "tensor_steps": ("intlist", 2, 4096, "grid sizes of the tensor sweep"),
    "tensor_paths": ("int", 10, 100000, "paths of the tensor sweep"),
    "partition_levels": ("intlist", 1, 1024, "partition sizes n"),
    "partition_identity_level": ("int", 1, 1024, "partition size of the identity check"),
    "seeds": ("intlist", 0, 2 ** 62, "seeds of the discrimination check"),
    "fault": ("choice", ("none", "a_x_factor2", "b_x_factor2"), None, "inject a wrong derivative"),
    "lipschitz": ("optfloat", 0.0, None, "declared Lipschitz constant (empty: scenario default)"),
}

# knobs that cannot change numerical results; excluded from the hash
HASH_EXCLUDED = ("workers",)


class ConfigError(ValueError):
    pass


def _parse_value(key, raw):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind, lo, hi, _ = SCHEMA[key]
    raw = str(raw).strip()
    try:
        if kind == "str":
            val = raw
        elif kind == "choice":
            if raw not in lo:
                raise ConfigError(f"{key} must be one of {lo}, got {raw!r}")
            return raw
        elif kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{key} must be a boolean, got {raw!r}")
            return low in ("true", "1", "yes")
        elif kind == "int":
            val = int(raw)
        elif kind in ("float", "optfloat"):
            if kind == "optfloat" and raw.lower() in ("", "none"):
                return None
            val = float(raw)
        elif kind == "intlist":
            val = [int(x) for x in raw.replace(",", " ").split()]
        elif kind == "floatlist":
            val = [float(x) for x in raw.replace(",", " ").split()]
        elif kind == "strlist":
            val = [x for x in raw.replace(",", " ").split()]
        else:  # pragma: no cover
            raise ConfigError(f"bad schema kind {kind}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"cannot parse {key}={raw!r} as {kind}") from None
    _check_range(key, val)
    return val


def _check_range(key, val):
    kind, lo, hi, _ = SCHEMA[key]
    if kind not in ("int", "float", "optfloat", "intlist", "floatlist"):
        return
    items = val if isinstance(val, list) else [val]
    if isinstance(val, list) and not items:
        raise ConfigError(f"{key} must not be empty")
    for v in items:
        if isinstance(v, float) and not math.isfinite(v):
            raise ConfigError(f"{key} must be finite")
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ConfigError(f"{key}={v} outside [{lo}, {hi}]")


def read_config(path=None, overrides=()):
    """Raw key/value pairs from an INI file and ``key=value`` overrides."""
    raw = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        if not cp.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in cp.sections():
            for key, value in cp.items(section):
                if key in raw:
                    raise ConfigError(f"key {key!r} appears in more than one section")
                raw[key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def resolve_config(raw):
    """Scenario defaults overlaid with parsed user values, validated."""
    raw = dict(raw)
    if "scenario" not in raw:
        raise ConfigError("config must name a scenario")
    try:
        scen = scenarios.get(raw["scenario"])
    except scenarios.UnknownScenario as exc:
        raise ConfigError(str(exc)) from None
    cfg = {"workers": 1, "backend": "auto", "checks": ["all"]}
    cfg.update(scen.defaults)
    for key, value in raw.items():
        cfg[key] = _parse_value(key, value)
    for key, value in cfg.items():
        if key not in SCHEMA:
            raise ConfigError(f"scenario default {key!r} missing from the schema")
        if value is not None:
            _check_range(key, value)
    checks = cfg["checks"]
    if checks != ["all"]:
        unknown = [c for c in checks if c not in scen.checks]
        if unknown:
            raise ConfigError(f"unknown checks {unknown} for {scen.name}; available: {', '.join(scen.checks)}")
    if cfg["steps"] and cfg.get("spike_time") is not None:
        _check_spikes(cfg)
    if cfg.get("fault", "none") != "none" and scen.problem is not None:
        try:
            scen.problem(cfg)
        except scenarios.VacuousFault as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def _check_spikes(cfg):
    if "eps_list" not in cfg:
        return
    dt = cfg["horizon"] / cfg["steps"]
    for e in list(cfg["eps_list"]) + [cfg["spike_time"]]:
        if abs(e / dt - round(e / dt)) > 1e-9:
            raise ConfigError(f"spike time/width {e} is not a multiple of dt = {dt}")
    if cfg["spike_time"] + max(cfg["eps_list"]) > cfg["horizon"] + 1e-12:
        raise ConfigError("spike interval leaves [0, T]")


def _canonical(value):
    if isinstance(value, list):
        return ",".join(_canonical(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_hash(cfg):
    items = sorted((k, _canonical(v)) for k, v in cfg.items() if k not in HASH_EXCLUDED)
    blob = "\n".join(f"{k}={v}" for k, v in items).encode()
    return hashlib.sha256(blob).hexdigest()


def config_text(cfg, digest):
    lines = [f"# config_hash = {digest}", "[experiment]"]
    for key in sorted(cfg):
        value = cfg[key]
        lines.append(f"{key} = {'' if value is None else _canonical(value)}")
    return "\n".join(lines) + "\n"


def _plain(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def output_root():
    return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))


def run_dir(cfg, digest, root=None):
    return Path(root or output_root()) / f"{cfg['scenario']}-{digest[:12]}"


def _write_csv(path, rows):
    rows = [_plain(r) for r in rows]
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (",".join(map(str, v)) if isinstance(v, list) else v) for k, v in r.items()})


def summary_json(report):
    return json.dumps(_plain(report), indent=2, sort_keys=True) + "\n"


def run(cfg, root=None, write=True):
    """Run the selected checks; returns the report dict (and writes outputs)."""
    scen = scenarios.get(cfg["scenario"])
    digest = config_hash(cfg)
    names = list(scen.checks) if cfg["checks"] == ["all"] else list(cfg["checks"])
    ctx = scenarios.Context(scen, cfg)
    checks = {}
    t0 = time.perf_counter()
    timing = {}
    for name in names:
        t1 = time.perf_counter()
        try:
            checks[name] = scen.checks[name](ctx)
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            checks[name] = {"passed": False, "error": f"{type(exc).__name__}: {exc}", "metrics": {}}
        timing[name] = time.perf_counter() - t1
    report = {"scenario": scen.name, "config_hash": digest, "master_seed": cfg["master_seed"],
              "checks": checks, "passed": all(c["passed"] for c in checks.values())}
    if write:
        out = run_dir(cfg, digest, root)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.json").write_text(summary_json(report))
        (out / "config.ini").write_text(config_text(cfg, digest))
        for tname, rows in ctx.tables.items():
            _write_csv(out / f"{tname}.csv", rows)
        timing_doc = {"total_seconds": time.perf_counter() - t0, "checks": timing, "workers": cfg["workers"]}
        (out / "timing.json").write_text(json.dumps(timing_doc, indent=2, sort_keys=True) + "\n")
        report["output_dir"] = str(out)
    return report


def validate(cfg):
    """Sampled Lipschitz/boundedness gates and derivative checks; no expensive simulation."""
    scen = scenarios.get(cfg["scenario"])
    diags = []
    if scen.problem is not None:
        prob = scen.problem(cfg)
        diags.extend(mp.validate_problem(prob, seed=int(cfg["master_seed"]) % (2 ** 32)))
    else:
        # linear drivers only; the sampled Lipschitz check is still exercised
        P, m = 64, int(cfg["m"])
        data = BseeData(np.zeros((P, m)), lambda k, y, Y: -0.5 * y, 0.5)
        try:
            rep = check_lipschitz(data, d=int(cfg["d"]))
            diags.append({"gate": "driver_lipschitz", "passed": True, "worst": rep.get("max_ratio", 0.0),
                          "bound": 0.5})
        except NonLipschitzDriver as exc:
            diags.append({"gate": "driver_lipschitz", "passed": False, "error": str(exc)})
    if "eps_list" in cfg:
        dt = cfg["horizon"] / cfg["steps"]
        diags.append({"gate": "spike_alignment", "passed": True, "dt": dt})
    return _plain(diags)
