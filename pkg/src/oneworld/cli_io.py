"""Scenario configs, run orchestration, artifact manifests and the ``oneworld`` CLI.

A config is one TOML file describing one scenario. It is validated against a
JSON schema (unknown keys rejected everywhere), filled with defaults and then
executed by :func:`run_scenario`, which writes the scenario outputs plus a
``manifest.json`` with the config hash, seed, library versions and a sha256 of
every emitted file.
"""
from __future__ import annotations

import copy
import difflib
import hashlib
import json
import math
import os
import platform
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import click
import jsonschema
import numpy as np
import scipy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .errors import ConfigError, InstabilityError, OneWorldError, ResourceCapError, VerificationError

SCENARIOS = ("grid", "paths", "double_slit", "param_flow", "adf", "branch", "feynman_kac", "verify")
U64_MAX = 2 ** 64 - 1
MANIFEST = "manifest.json"

# ---------------------------------------------------------------- schema

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_INT0 = {"type": "integer", "minimum": 0}
_BOOL = {"type": "boolean"}


def _arr(item, lo=1, hi=None):
    s = {"type": "array", "items": item, "minItems": lo}
    if hi is not None:
        s["maxItems"] = hi
    return s


def _num_or_arr(item):
    return {"anyOf": [item, _arr(item, 1, 2)]}


def _table(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


# scenario blocks share the scenario name, except the grid scenario whose
# numerical options sit under [solver] because [grid] is the mesh itself
BLOCKS = {
    "solver": _table({
        "form": {"enum": ["complex", "real"]},
        "absorber_width": _NONNEG,
        "absorber_strength": _NONNEG,
        "snapshots": _BOOL,
    }),
    "paths": _table({
        "n_paths": _INT0,
        "record_every": _INT1,
        "noise": _BOOL,
        "first_stream": _INT0,
    }),
    "double_slit": _table({
        "n_points": _arr(_INT1, 2, 2),
        "extent": _POS,
        "x0": _NUM,
        "p0": _NUM,
        "sigma_x": _POS,
        "sigma_y": _POS,
        "wall_position": _NUM,
        "wall_thickness": _POS,
        "wall_height": _POS,
        "slit_centers": _arr(_NUM),
        "slit_widths": _arr(_POS),
        "detector_x": _NUM,
        "absorber_width": _POS,
        "absorber_strength": _NONNEG,
        "n_paths": _INT0,
        "n_bins": _INT1,
        "y_range": _POS,
        "noise": _BOOL,
    }),
    "param_flow": _table({
        "family": {"enum": ["coherent_state", "skewed_gaussian", "two_gaussian_sum"]},
        "alpha": _POS,
        "c": _NUM,
        "weights": _arr(_POS, 2, 2),
        "u0": _arr(_NUM, 1, 2),
        "v0": _arr(_NUM, 1, 2),
        "mode": {"enum": ["hamilton", "alternate"]},
        "symmetric": _BOOL,
        "pair_tol": _POS,
    }),
    "adf": _table({
        "gamma_im": _NUM,
        "record_every": _INT1,
        "field": _BOOL,
    }),
    "branch": _table({
        "ratio": {"type": "number", "exclusiveMinimum": 1},
        "n_q": _INT1,
        "every": _INT0,
        "times": _arr(_NUM, 0),
        "kappa": _POS,
        "reach": _POS,
        "max_generation": _INT0,
        "leaf_cap": _INT1,
        "on_cap": {"enum": ["prune", "raise"]},
        "amp_floor": _NONNEG,
    }),
    "feynman_kac": _table({
        "lam": _NUM,
        "diffusion_D": _POS,
        "x0": _NUM,
        "t": _POS,
        "targets": _arr(_NUM),
        "n_samples": {"type": "integer", "minimum": 2},
        "n_steps": _INT1,
        "reference": _BOOL,
    }),
    "verify": _table({
        "suite": {"enum": ["primary"]},
        "filter": {"type": "string"},
    }),
}

SCENARIO_BLOCKS = {
    "grid": ("solver",),
    "paths": ("solver", "paths"),
    "double_slit": ("double_slit",),
    "param_flow": ("param_flow",),
    "adf": ("adf",),
    "branch": ("branch",),
    "feynman_kac": ("feynman_kac",),
    "verify": ("verify",),
}

SCHEMA = _table({
    "scenario": {"enum": list(SCENARIOS)},
    "seed": {"type": "integer", "minimum": 0, "maximum": U64_MAX},
    "out": {"type": "string"},
    "hbar": _POS,
    "mass": _POS,
    "threads": _INT1,
    "grid": _table({
        "lo": _arr(_NUM, 1, 2),
        "hi": _arr(_NUM, 1, 2),
        "n": _arr(_INT1, 1, 2),
    }),
    "potential": _table({
        "kind": {"enum": ["free", "harmonic", "gaussian_barrier", "eckart"]},
        "omega": _POS,
        "center": _num_or_arr(_NUM),
        "height": _NUM,
        "width": _POS,
    }),
    "initial": _table({
        "q0": _num_or_arr(_NUM),
        "p0": _num_or_arr(_NUM),
        "gamma": _num_or_arr(_POS),
    }),
    "time": _table({
        "dt": _POS,
        "n_steps": _INT1,
        "save_every": _INT1,
    }),
    **BLOCKS,
})

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "hbar": 1.0,
    "mass": 1.0,
    "grid": {"lo": [-20.0], "hi": [20.0], "n": [1024]},
    "potential": {"kind": "free"},
    "initial": {"q0": 0.0, "p0": 0.0, "gamma": 0.5},
    "time": {"dt": 1e-3, "n_steps": 1000, "save_every": 100},
}

BLOCK_DEFAULTS: dict[str, dict] = {
    "solver": {"form": "complex", "absorber_width": 0.0, "absorber_strength": 1.0,
               "snapshots": False},
    "paths": {"n_paths": 1000, "record_every": 1, "noise": True, "first_stream": 0},
    "double_slit": {},
    "param_flow": {"family": "coherent_state", "alpha": 0.5, "c": 0.0, "weights": [0.5, 0.5],
                   "mode": "hamilton", "symmetric": True, "pair_tol": 1e-10},
    "adf": {"gamma_im": 0.0, "record_every": 1, "field": True},
    "branch": {"ratio": 2.0, "n_q": 16, "every": 10, "times": [], "kappa": 1.0, "reach": 3.0,
               "leaf_cap": 100_000, "on_cap": "prune", "amp_floor": 0.0},
    "feynman_kac": {"lam": 1.0, "x0": 0.0, "t": 1.0, "targets": [0.0], "n_samples": 10_000,
                    "n_steps": 128, "reference": True},
    "verify": {"suite": "primary"},
}

_VALIDATOR = jsonschema.Draft7Validator(SCHEMA)


def _schema_at(path) -> dict:
    s = SCHEMA
    for key in path:
        props = s.get("properties", {}) if isinstance(s, dict) else {}
        if isinstance(key, str) and key in props:
            s = props[key]
        else:
            return {}
    return s


def _describe(err: jsonschema.ValidationError) -> list[str]:
    where = ".".join(str(k) for k in err.absolute_path)
    if err.validator == "additionalProperties":
        known = sorted(_schema_at(err.absolute_path).get("properties", {}))
        extra = sorted(set(err.instance) - set(known))
        out = []
        for key in extra:
            loc = f"{where}.{key}" if where else key
            hint = difflib.get_close_matches(key, known, n=1, cutoff=0.6)
            msg = f"{loc}: unknown key"
            if hint:
                msg += f" (did you mean '{hint[0]}'?)"
            out.append(msg)
        return out
    if err.validator == "anyOf":
        return [f"{where or '<root>'}: expected a number or a list of numbers, got {err.instance!r}"]
    return [f"{where or '<root>'}: {err.message}"]


# ---------------------------------------------------------------- config type

@dataclass
class ScenarioConfig:
    scenario: str
    seed: int
    hbar: float
    mass: float
    grid: dict
    potential: dict
    initial: dict
    time: dict
    blocks: dict = field(default_factory=dict)
    out: str | None = None
    threads: int | None = None
    raw: dict = field(default_factory=dict)

    def block(self, name: str) -> dict:
        return self.blocks[name]

    def canonical(self) -> str:
        body = {k: v for k, v in self.raw.items() if k not in ("out", "threads")}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @property
    def dims(self) -> int:
        return len(self.grid["n"])

    def per_axis(self, key: str) -> list[float]:
        v = self.initial[key]
        v = [float(v)] * self.dims if not isinstance(v, list) else [float(x) for x in v]
        return v


def _semantic_checks(cfg: dict) -> list[str]:
    bad = []
    sc = cfg["scenario"]
    allowed = SCENARIO_BLOCKS[sc]
    for name in BLOCKS:
        if name in cfg and name not in allowed:
            bad.append(f"{name}: block does not apply to scenario '{sc}'")
    g = cfg["grid"]
    if not len(g["lo"]) == len(g["hi"]) == len(g["n"]):
        bad.append("grid: lo, hi and n must have the same length")
    else:
        for a, (lo, hi, n) in enumerate(zip(g["lo"], g["hi"], g["n"])):
            if not hi > lo:
                bad.append(f"grid.hi: axis {a} upper bound must exceed lower bound")
            if n < 2 or n & (n - 1):
                bad.append(f"grid.n: axis {a} point count {n} must be a power of two")
    dims = len(g["n"])
    for key in ("q0", "p0", "gamma"):
        v = cfg["initial"][key]
        if isinstance(v, list) and len(v) != dims:
            bad.append(f"initial.{key}: expected {dims} value(s) for a {dims}D grid")
    pot = cfg["potential"]
    if pot["kind"] in ("gaussian_barrier", "eckart"):
        for key in ("height", "width"):
            if key not in pot:
                bad.append(f"potential.{key}: required for kind '{pot['kind']}'")
    unused = {"free": {"omega", "center", "height", "width"},
              "harmonic": {"height", "width"},
              "gaussian_barrier": {"omega"}, "eckart": {"omega"}}[pot["kind"]]
    for key in sorted(unused & set(pot)):
        bad.append(f"potential.{key}: not a parameter of kind '{pot['kind']}'")
    t = cfg["time"]
    if t["save_every"] > t["n_steps"]:
        bad.append("time.save_every: must not exceed time.n_steps")
    if sc in ("adf", "branch", "param_flow") and dims != 1:
        bad.append(f"grid: scenario '{sc}' is one-dimensional")
    if sc == "paths" and t["n_steps"] % t["save_every"]:
        bad.append("time.save_every: must divide time.n_steps for path sampling")
    pf = cfg.get("param_flow")
    if pf is not None:
        n_pairs = 2 if pf["family"] == "two_gaussian_sum" else 1
        for key in ("u0", "v0"):
            if key in pf and len(pf[key]) != n_pairs:
                bad.append(f"param_flow.{key}: family '{pf['family']}' needs {n_pairs} value(s)")
    ds = cfg.get("double_slit")
    if ds is not None and "slit_centers" in ds and "slit_widths" in ds:
        if len(ds["slit_centers"]) != len(ds["slit_widths"]):
            bad.append("double_slit.slit_widths: one width per slit center")
    return bad


def _fill(doc: dict) -> dict:
    cfg = copy.deepcopy(doc)
    for key, val in DEFAULTS.items():
        if isinstance(val, dict):
            # a given [grid] is taken whole; other tables merge over defaults
            base = {} if key == "grid" and key in cfg else copy.deepcopy(val)
            cfg[key] = {**base, **cfg.get(key, {})}
        else:
            cfg.setdefault(key, val)
    for name in SCENARIO_BLOCKS[cfg["scenario"]]:
        cfg[name] = {**copy.deepcopy(BLOCK_DEFAULTS[name]), **cfg.get(name, {})}
    return cfg


def validate_config(doc: dict, scenario: str | None = None) -> ScenarioConfig:
    """Validate a parsed TOML document; every violation is reported at once."""
    doc = dict(doc)
    if scenario is not None:
        if "scenario" in doc and doc["scenario"] != scenario:
            raise ConfigError("scenario mismatch", [
                f"scenario: file says '{doc['scenario']}' but '{scenario}' was requested"])
        doc["scenario"] = scenario
    errors = sorted(_VALIDATOR.iter_errors(doc), key=lambda e: [str(p) for p in e.absolute_path])
    bad = [m for e in errors for m in _describe(e)]
    if "scenario" not in doc:
        bad.insert(0, "scenario: required key is missing")
    if bad:
        raise ConfigError("invalid config", bad)
    cfg = _fill(doc)
    if "grid" in doc:
        g = doc["grid"]
        missing = [k for k in ("lo", "hi", "n") if k not in g]
        if missing:
            raise ConfigError("invalid config", [f"grid.{k}: required when [grid] is given" for k in missing])
    bad = _semantic_checks(cfg)
    if bad:
        raise ConfigError("invalid config", bad)
    return ScenarioConfig(
        scenario=cfg["scenario"], seed=int(cfg["seed"]), hbar=float(cfg["hbar"]),
        mass=float(cfg["mass"]), grid=cfg["grid"], potential=cfg["potential"],
        initial=cfg["initial"], time=cfg["time"],
        blocks={k: cfg[k] for k in SCENARIO_BLOCKS[cfg["scenario"]]},
        out=cfg.get("out"), threads=cfg.get("threads"), raw=cfg)


def parse_config_text(text: str, scenario: str | None = None) -> ScenarioConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}", [f"parse error: {exc}"]) from None
    return validate_config(doc, scenario)


def parse_config(path, scenario: str | None = None) -> ScenarioConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}", [f"config file not found: {p}"])
    try:
        return parse_config_text(p.read_text(), scenario)
    except ConfigError as exc:
        raise ConfigError(f"{p}: invalid config", [f"{p}: {v}" for v in exc.violations]) from None


# ---------------------------------------------------------------- builders

def build_grid(cfg: ScenarioConfig):
    from .core_fields import Grid
    g = cfg.grid
    if cfg.dims == 1:
        return Grid.line(g["lo"][0], g["hi"][0], g["n"][0])
    return Grid.plane(g["lo"], g["hi"], g["n"])


def build_potential(cfg: ScenarioConfig):
    from .core_fields import PotentialSpec
    p = cfg.potential
    kind = p["kind"]
    center = p.get("center", 0.0)
    if kind == "free":
        return PotentialSpec.free()
    if kind == "harmonic":
        return PotentialSpec.harmonic(p.get("omega", 1.0), center, cfg.mass)
    if kind == "gaussian_barrier":
        return PotentialSpec.gaussian_barrier(p["height"], p["width"], center)
    return PotentialSpec.eckart(p["height"], p["width"], center)


def _initial_field(cfg: ScenarioConfig, grid):
    from .core_fields import init_coherent_state
    q0, p0, gam = cfg.per_axis("q0"), cfg.per_axis("p0"), cfg.per_axis("gamma")
    if cfg.dims == 1:
        q0, p0, gam = q0[0], p0[0], gam[0]
    else:
        q0, p0, gam = tuple(q0), tuple(p0), tuple(gam)
    return init_coherent_state(grid, q0, p0, gam, cfg.hbar, cfg.mass)


def _absorber(block: dict):
    from .core_fields import AbsorbingMask
    if block.get("absorber_width", 0.0) > 0:
        return AbsorbingMask(block["absorber_width"], block["absorber_strength"])
    return None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


# ---------------------------------------------------------------- scenario runners

def _run_grid(cfg: ScenarioConfig, out: Path, seed: int, threads: int) -> list[str]:
    from .core_fields import (observe, propagate_complex, propagate_real_vector,
                              write_observables_csv, write_owf1)
    g = build_grid(cfg)
    V = build_potential(cfg)
    f0 = _initial_field(cfg, g)
    t = cfg.time
    sol = cfg.block("solver")
    save = t["save_every"]
    records = [observe(f0, V)]
    files = ["initial.owf", "observables.csv", "final.owf"]
    write_owf1(out / "initial.owf", f0)
    prev = [f0]

    def on_step(f, k):
        if k % save == 0:
            records.append(observe(f, V, prev[0]))
            if sol["snapshots"]:
                name = f"snap_{k:08d}.owf"
                write_owf1(out / name, f)
                files.append(name)
        prev[0] = f

    run = propagate_real_vector if sol["form"] == "real" else propagate_complex
    final = run(f0, V, t["dt"], t["n_steps"], _absorber(sol), on_step, 1)
    if t["n_steps"] % save:
        records.append(observe(final, V, prev[0] if prev[0] is not final else None))
    write_observables_csv(out / "observables.csv", records)
    write_owf1(out / "final.owf", final)
    return files


def _run_paths(cfg: ScenarioConfig, out: Path, seed: int, threads: int) -> list[str]:
    from .core_fields import density, write_owf1
    from .one_world import FieldSequence, ks_distance, sample_ensemble, write_ensemble_csv
    g = build_grid(cfg)
    V = build_potential(cfg)
    f0 = _initial_field(cfg, g)
    t = cfg.time
    pb = cfg.block("paths")
    seq = FieldSequence.from_propagation(f0, V, t["dt"], t["n_steps"], t["save_every"],
                                         _absorber(cfg.block("solver")))
    ens = sample_ensemble(seq, pb["n_paths"], t["dt"], t["n_steps"], seed=seed,
                          first_stream=pb["first_stream"], record_every=pb["record_every"],
                          noise=pb["noise"], threads=threads)
    write_ensemble_csv(out / "paths.csv", ens)
    final = seq.snapshot(len(seq.times) - 1)
    write_owf1(out / "final.owf", final)
    report = {"n_paths": pb["n_paths"], "t_end": float(seq.t_end),
              "alive": int(np.sum(ens.exit_step < 0))}
    if pb["n_paths"] and g.dims == 1:
        ends = ens.endpoints[:, 0]
        report["endpoint_mean"] = float(np.mean(ends))
        report["endpoint_std"] = float(np.std(ends))
        report["ks_distance"] = float(ks_distance(ends, g, density(final)))
        report["ks_band"] = 2.5 / math.sqrt(pb["n_paths"])
    _write_json(out / "report.json", report)
    return ["paths.csv", "final.owf", "report.json"]


def _run_double_slit(cfg: ScenarioConfig, out: Path, seed: int, threads: int) -> list[str]:
    from .core_fields import write_owf1
    from .one_world import (DoubleSlitConfig, double_slit_run, fringe_alignment, write_histogram_csv,
                            write_spots_csv)
    b = dict(cfg.block("double_slit"))
    for key in ("n_points", "slit_centers", "slit_widths"):
        if key in b:
            b[key] = tuple(b[key])
    t = cfg.time
    dsc = DoubleSlitConfig(**b, hbar=cfg.hbar, mass=cfg.mass, dt=t["dt"], n_steps=t["n_steps"],
                           save_every=t["save_every"], seed=seed)
    res = double_slit_run(dsc)
    write_spots_csv(out / "spots.csv", res.spots)
    write_histogram_csv(out / "histogram.csv", res.bin_centers, res.counts, res.reference_density)
    write_owf1(out / "final.owf", res.final_field)
    report = {"n_paths": dsc.n_paths, "detected": int(res.spots.shape[0]),
              "low_density_steps": res.low_density_steps}
    if res.spots.shape[0]:
        ref_b, hist_b, off = fringe_alignment(res.counts, res.reference_density)
        report.update(reference_maxima=ref_b, histogram_maxima=hist_b, offsets=off,
                      aligned=bool(len(off) and np.all(np.abs(off) <= 1)))
    _write_json(out / "report.json", report)
    return ["spots.csv", "histogram.csv", "final.owf", "report.json"]


def _run_param_flow(cfg: ScenarioConfig, out: Path, seed: int, threads: int) -> list[str]:
    from .param_space import (FAMILIES, ParameterState, alternate_compose, dynamical_pair_check,
                              hamilton_flow)
    b = cfg.block("param_flow")
    V = build_potential(cfg)
    kw = {"hbar": cfg.hbar, "mass": cfg.mass}
    if b["family"] == "skewed_gaussian":
        kw["c"] = b["c"]
    if b["family"] == "two_gaussian_sum":
        kw["weights"] = tuple(b["weights"])
    fam = FAMILIES[b["family"]](V, b["alpha"], **kw)
    n_pairs = fam.n_pairs
    q0 = cfg.per_axis("q0")[0]
    p0 = cfg.per_axis("p0")[0]
    u0 = b.get("u0", [q0] if n_pairs == 1 else [q0 - 2.0, q0 + 2.0])
    v0 = b.get("v0", [p0] * n_pairs)
    s = ParameterState(np.array(u0, float), np.array(v0, float))
    t = cfg.time
    if b["mode"] == "alternate":
        rep = alternate_compose(fam, s, t["dt"], t["n_steps"], symmetric=b["symmetric"])
    else:
        rep = hamilton_flow(fam, s, t["dt"], t["n_steps"])
    rep.write_csv(out / "flow.csv")
    pair = dynamical_pair_check(fam, s, b["pair_tol"])
    e = rep.energy
    report = {"family": b["family"], "mode": b["mode"], "energy_initial": float(e[0]),
              "energy_drift": float(np.max(np.abs(e - e[0]))),
              "pair_check": np.asarray(pair), "final_u": rep.final.u, "final_v": rep.final.v}
    _write_json(out / "report.json", report)
    return ["flow.csv", "report.json"]


def _run_adf(cfg: ScenarioConfig, out: Path, seed: int, threads: int) -> list[str]:
    from .adf_gaussian import ADFState, evaluate_adf, propagate_adf
    from .core_fields import write_owf1
    b = cfg.block("adf")
    V = build_potential(cfg)
    gam = complex(cfg.per_axis("gamma")[0], b["gamma_im"])
    s0 = ADFState.initial(cfg.per_axis("q0")[0], cfg.per_axis("p0")[0], gam, cfg.hbar, cfg.mass)
    t = cfg.time
    traj = propagate_adf(s0, V, t["dt"], t["n_steps"], record_every=b["record_every"])
    traj.write_csv(out / "adf.csv")
    files = ["adf.csv"]
    target = 2.0 * cfg.hbar / cfg.mass
    report = {"wronskian_target": target,
              "wronskian_max_dev": float(np.max(np.abs(traj.wronskian - target))),
              "maslov_final": int(traj.maslov[-1]), "q_final": float(traj.q[-1]),
              "p_final": float(traj.p[-1])}
    if b["field"]:
        write_owf1(out / "final.owf", evaluate_adf(traj.final, build_grid(cfg)))
        files.append("final.owf")
    _write_json(out / "report.json", report)
    return files + ["report.json"]


def _run_branch(cfg: ScenarioConfig, out: Path, seed: int, threads: int) -> list[str]:
    from .adf_gaussian import ADFState
    from .branching import (BranchTree, LeafEscapeWarning, SplitSchedule, WeierstrassPlan,
                            branch_propagate, norm_audit, superpose)
    from .core_fields import write_owf1
    b = cfg.block("branch")
    V = build_potential(cfg)
    g = build_grid(cfg)
    root = ADFState.initial(cfg.per_axis("q0")[0], cfg.per_axis("p0")[0], cfg.per_axis("gamma")[0],
                            cfg.hbar, cfg.mass)
    plan = WeierstrassPlan(ratio=b["ratio"], n_q=b["n_q"], amp_floor=b["amp_floor"])
    sched = SplitSchedule(times=tuple(b["times"]), every=b["every"], kappa=b["kappa"],
                          reach=b["reach"], plan=plan, max_generation=b.get("max_generation"),
                          leaf_cap=b["leaf_cap"], on_cap=b["on_cap"])
    tree = BranchTree(root)
    t = cfg.time
    branch_propagate(tree, V, t["dt"], t["n_steps"], sched)
    tree.write_jsonl(out / "tree.jsonl")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", LeafEscapeWarning)
        write_owf1(out / "superposed.owf", superpose(tree, g))
        audit = norm_audit(tree, g)
    report = {"leaves": int(tree.leaf_ids.size), "nodes": len(tree.nodes),
              "splits": tree.n_splits, "max_generation": int(np.max(tree.generations())),
              "split_budget": tree.split_budget, "pruned_norm": tree.pruned_norm,
              "norm_audit": audit,
              "escape_warnings": [str(w.message) for w in caught
                                  if issubclass(w.category, LeafEscapeWarning)]}
    _write_json(out / "report.json", report)
    return ["tree.jsonl", "superposed.owf", "report.json"]


def _run_feynman_kac(cfg: ScenarioConfig, out: Path, seed: int, threads: int) -> list[str]:
    from .one_world import crank_nicolson_green, feynman_kac_estimate
    b = cfg.block("feynman_kac")
    V = build_potential(cfg)
    D = b.get("diffusion_D", 0.5 * cfg.hbar / cfg.mass)
    xt = np.array(b["targets"], dtype=float)
    est, se = feynman_kac_estimate(V, b["lam"], D, xt, b["t"], b["n_samples"], b["x0"],
                                   b["n_steps"], seed)
    ref = np.full(xt.size, np.nan)
    if b["reference"]:
        x, G = crank_nicolson_green(V, b["lam"], D, b["x0"], b["t"])
        ref = np.interp(xt, x, G)
    with open(out / "fk.csv", "w") as fh:
        fh.write("x_target,estimate,std_error,reference\n")
        for row in zip(xt, est, se, ref):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return ["fk.csv"]


def _run_verify(cfg: ScenarioConfig, out: Path, seed: int, threads: int) -> list[str]:
    from .acceptance import run_suite
    b = cfg.block("verify")
    lines: list[str] = []
    results = run_suite(b["suite"], b.get("filter"), echo=lambda s: (lines.append(s), click.echo(s)))
    (out / "verify.txt").write_text("".join(s + "\n" for s in lines))
    failed = [r.number for r in results if not r.passed]
    if failed or not results:
        raise VerificationError(f"criteria failed: {failed}" if failed else "no criteria selected")
    return ["verify.txt"]


RUNNERS: dict[str, Callable[[ScenarioConfig, Path, int, int], list[str]]] = {
    "grid": _run_grid,
    "paths": _run_paths,
    "double_slit": _run_double_slit,
    "param_flow": _run_param_flow,
    "adf": _run_adf,
    "branch": _run_branch,
    "feynman_kac": _run_feynman_kac,
    "verify": _run_verify,
}


# ---------------------------------------------------------------- execution

def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the process exit status of its class."""
    if isinstance(exc, OneWorldError):
        return exc.exit_code
    if isinstance(exc, (ArithmeticError, np.linalg.LinAlgError)):
        return InstabilityError.exit_code
    if isinstance(exc, MemoryError):
        return ResourceCapError.exit_code
    if isinstance(exc, (ValueError, TypeError, KeyError)):
        return ConfigError.exit_code
    return 1


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    return {"oneworld": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def resolve_threads(threads: int | None, cfg: ScenarioConfig | None = None) -> int:
    if threads is None:
        env = os.environ.get("ONEWORLD_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigError("bad ONEWORLD_THREADS", [f"ONEWORLD_THREADS: not an integer: {env!r}"])
        elif cfg is not None and cfg.threads:
            threads = cfg.threads
    threads = 1 if threads is None else int(threads)
    if threads < 1:
        raise ConfigError("bad thread count", [f"threads: must be >= 1, got {threads}"])
    return threads


def run_scenario(cfg: ScenarioConfig, out_dir=None, seed: int | None = None,
                 threads: int | None = None) -> tuple[int, dict]:
    """Execute a validated config, write its outputs and ``manifest.json``.

    Returns (exit status, manifest). Errors do not propagate; they set the
    status by class and are recorded in the manifest together with any files
    already written.
    """
    from .core_fields import set_fft_workers
    out = Path(out_dir if out_dir is not None else (cfg.out or f"oneworld_{cfg.scenario}"))
    seed = cfg.seed if seed is None else int(seed)
    manifest: dict[str, Any] = {"scenario": cfg.scenario, "config_sha256": cfg.config_hash(),
                                "seed": seed, "versions": versions()}
    code = 0
    files: list[str] = []
    try:
        if not 0 <= seed <= U64_MAX:
            raise ConfigError("bad seed", [f"seed: must be an unsigned 64-bit integer, got {seed}"])
        n_thr = resolve_threads(threads, cfg)
        out.mkdir(parents=True, exist_ok=True)
        set_fft_workers(n_thr if n_thr > 1 else None)
        try:
            files = RUNNERS[cfg.scenario](cfg, out, seed, n_thr)
        finally:
            set_fft_workers(None)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an exit status
        code = exit_code_for(exc)
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
        if code == 1:
            manifest["error"]["class"] = "unexpected"
    manifest["exit_code"] = code
    listed = []
    for name in sorted(set(files) | {p.name for p in out.glob("*")} - {MANIFEST}) if out.is_dir() else []:
        p = out / name
        if p.is_file():
            listed.append({"path": name, "sha256": sha256_file(p), "bytes": p.stat().st_size})
    manifest["files"] = listed
    if out.is_dir():
        _write_json(out / MANIFEST, manifest)
    return code, manifest


# ---------------------------------------------------------------- CLI

class _U64(click.ParamType):
    name = "u64"

    def convert(self, value, param, ctx):
        try:
            v = int(value, 0) if isinstance(value, str) else int(value)
        except (TypeError, ValueError):
            self.fail(f"{value!r} is not an integer", param, ctx)
        if not 0 <= v <= U64_MAX:
            self.fail(f"{v} is outside the unsigned 64-bit range", param, ctx)
        return v


def _report_config_error(exc: ConfigError) -> None:
    click.echo("configuration error:", err=True)
    for v in exc.violations:
        click.echo(f"  - {v}", err=True)


def _scenario_command(name: str):
    @click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                  help="TOML scenario file.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                  help="Output directory (default: config 'out' or ./oneworld_<scenario>).")
    @click.option("--seed", type=_U64(), default=None, help="RNG seed, overrides the config.")
    @click.option("--threads", type=click.IntRange(min=1), default=None,
                  help="Worker threads (fallback: ONEWORLD_THREADS).")
    def cmd(config_path, out_dir, seed, threads):
        try:
            cfg = parse_config(config_path, scenario=name)
        except ConfigError as exc:
            _report_config_error(exc)
            sys.exit(exc.exit_code)
        code, manifest = run_scenario(cfg, out_dir, seed, threads)
        if code:
            err = manifest.get("error", {})
            click.echo(f"{name} failed ({err.get('type')}): {err.get('message')}", err=True)
        else:
            click.echo(f"{name}: wrote {len(manifest['files'])} file(s) + {MANIFEST}")
        sys.exit(code)

    cmd.__doc__ = f"Run the '{name}' scenario."
    return click.command(name=name)(cmd)


@click.group()
@click.version_option(__version__, prog_name="oneworld")
def main():
    """Grid, one-world path, parameter-flow and branching-Gaussian scenarios."""


for _name in SCENARIOS[:-1]:
    main.add_command(_scenario_command(_name))


@main.command()
@click.option("--suite", default="primary", type=click.Choice(["primary"]), show_default=True)
@click.option("--filter", "name_filter", default=None, help="Criterion name substring or number.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="If given, write verify.txt and a manifest there.")
def verify(suite, name_filter, out_dir):
    """Run the acceptance suite; exit 5 if any criterion fails."""
    if out_dir is not None:
        doc = {"scenario": "verify", "verify": {"suite": suite}}
        if name_filter:
            doc["verify"]["filter"] = name_filter
        code, _ = run_scenario(validate_config(doc), out_dir)
        sys.exit(code)
    from .acceptance import run_suite
    results = run_suite(suite, name_filter, echo=click.echo)
    if not results:
        click.echo(f"no criterion matches {name_filter!r}", err=True)
        sys.exit(VerificationError.exit_code)
    failed = [r.number for r in results if not r.passed]
    click.echo(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    sys.exit(VerificationError.exit_code if failed or not results else 0)


if __name__ == "__main__":
    main()
