"""Acceptance suite: thirteen end-to-end checks at their stated tolerances.

Each check returns a CriterionResult; ``run_suite`` runs a filtered subset
and ``format_line`` gives the one-line pass/fail summary.
"""
from __future__ import annotations

import math
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    runtime: float = 0.0

    def format_line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        parts = []
        for k, v in self.metrics.items():
            if isinstance(v, float):
                parts.append(f"{k}={v:.3g}")
            else:
                parts.append(f"{k}={v}")
        return f"[{tag}] {self.number:2d} {self.name} ({self.runtime:.1f}s): " + ", ".join(parts)


_REGISTRY: dict[int, tuple[str, Callable[[], tuple[bool, dict]]]] = {}


def _criterion(number: int, name: str):
    def wrap(fn):
        _REGISTRY[number] = (name, fn)
        return fn
    return wrap


def criteria() -> list[tuple[int, str]]:
    return [(k, _REGISTRY[k][0]) for k in sorted(_REGISTRY)]


def run_criterion(number: int) -> CriterionResult:
    name, fn = _REGISTRY[number]
    t0 = time.perf_counter()
    ok, metrics = fn()
    return CriterionResult(number, name, bool(ok), metrics, time.perf_counter() - t0)


def select(suite: str = "primary", name_filter: str | None = None) -> list[int]:
    if suite != "primary":
        raise ValueError(f"unknown suite {suite!r}; the only suite is 'primary'")
    out = []
    for k, name in criteria():
        if name_filter and name_filter not in name and name_filter != str(k):
            continue
        out.append(k)
    return out


def run_suite(suite: str = "primary", name_filter: str | None = None,
              echo: Callable[[str], None] | None = None) -> list[CriterionResult]:
    results = []
    for k in select(suite, name_filter):
        r = run_criterion(k)
        if echo is not None:
            echo(r.format_line())
        results.append(r)
    return results


# ---------------------------------------------------------------- grid solver

@_criterion(1, "real_complex_equivalence")
def _c1():
    from .core_fields import Grid, PotentialSpec, init_coherent_state, propagate_complex, propagate_real_vector
    g = Grid.line(-25.0, 25.0, 4096)
    f0 = init_coherent_state(g, 1.5, 0.5, 0.5 + 0.1j)
    V = PotentialSpec.harmonic(1.0)
    t0 = time.perf_counter()
    a = propagate_real_vector(f0, V, 1e-3, 10_000)
    t_real = time.perf_counter() - t0
    b = propagate_complex(f0, V, 1e-3, 10_000)
    dev = max(float(np.abs(a.phi_r - b.phi_r).max()), float(np.abs(a.phi_c - b.phi_c).max()))
    return dev < 1e-12 and t_real < 30.0, {"max_dev": dev, "real_runtime_s": t_real}


@_criterion(2, "free_gaussian_analytics")
def _c2():
    from .core_fields import Grid, PotentialSpec, density, energy, init_coherent_state, propagate_complex
    g = Grid.line(-40.0, 40.0, 2048)
    gam, T, n = 0.5, 2.0, 2000
    s0 = 1.0 / (4.0 * gam)
    V = PotentialSpec.free()
    f0 = init_coherent_state(g, -2.0, 1.0, gam)
    f1 = propagate_complex(f0, V, T / n, n)
    x = g.axes()[0]
    rho = density(f1)
    m = np.sum(rho * x) / np.sum(rho)
    width = math.sqrt(np.sum(rho * (x - m) ** 2) / np.sum(rho))
    exact = math.sqrt(s0 * (1.0 + (T / (2.0 * s0)) ** 2))
    rel = abs(width - exact) / exact
    dn = abs(f1.norm() - f0.norm())
    de = abs(energy(f1, V) - energy(f0, V))
    return rel < 1e-6 and dn < 1e-10 and de < 1e-8, {"width_rel": rel, "norm_drift": dn, "energy_drift": de}


@_criterion(3, "continuity_order")
def _c3():
    from .core_fields import Grid, PotentialSpec, continuity_residual, init_coherent_state, propagate_complex
    g = Grid.line(-20.0, 20.0, 1024)
    f0 = init_coherent_state(g, -2.0, 1.0, 0.5 + 0.2j)
    V = PotentialSpec.harmonic(1.0)
    dts = np.array([1e-3, 5e-4, 2.5e-4])
    res = np.array([continuity_residual(f0, propagate_complex(f0, V, dt, 1)) for dt in dts])
    order = float(np.polyfit(np.log(dts), np.log(res), 1)[0])
    return order >= 1.9, {"order": order, "residual_min": float(res.min())}


# ---------------------------------------------------------------- one-world paths

@_criterion(4, "ensemble_consistency")
def _c4():
    from .core_fields import Grid, PotentialSpec, density, init_coherent_state
    from .one_world import FieldSequence, ks_distance, sample_ensemble
    t0 = time.perf_counter()
    g = Grid.line(-64.0, 64.0, 1024)
    f = init_coherent_state(g, 0.0, 0.0, 1.0 / (4.0 * 25.0))
    seq = FieldSequence.from_propagation(f, PotentialSpec.free(), 1e-3, 500, 10)
    rho = density(seq.snapshot(seq.n_snapshots - 1))
    ks = []
    for n in (10_000, 20_000):
        ens = sample_ensemble(seq, n, 1e-3, seed=7, record_every=500)
        ks.append(ks_distance(ens.endpoints[:, 0], g, rho))
    runtime = time.perf_counter() - t0
    ok = (ks[0] < 2.5 / math.sqrt(1e4) and ks[1] < 2.5 / math.sqrt(2e4) and ks[1] < ks[0]
          and runtime < 30.0)
    return ok, {"ks_1e4": ks[0], "ks_2e4": ks[1], "runtime_s": runtime}


@_criterion(5, "classical_limit")
def _c5():
    from .core_fields import Grid, PotentialSpec, init_coherent_state
    from .one_world import FieldSequence, classical_limit_trajectory, sample_ensemble
    hb = 0.01
    g = Grid.line(-3.0, 3.0, 1024)
    f = init_coherent_state(g, 1.0, 0.0, 1.0 / (2.0 * hb), hbar=hb)
    V = PotentialSpec.harmonic(1.0)
    T = 2.0 * math.pi
    ng = int(round(T / 5e-4))
    seq = FieldSequence.from_propagation(f, V, T / ng, ng, 1)
    dtp = T / ng / 10
    ens = sample_ensemble(seq, 1, dtp, x0=[[1.0]], noise=False)
    cl = classical_limit_trajectory(1.0, 0.0, V, dtp, ng * 10)
    dev = float(np.abs(ens.positions[:, 0, 0] - cl.positions[:, 0]).max())
    return dev < 1e-4, {"max_dev": dev}


@_criterion(6, "double_slit")
def _c6():
    from dataclasses import replace
    from .one_world import DoubleSlitConfig, double_slit_run, fringe_alignment, single_slit_chi2
    t0 = time.perf_counter()
    cfg = DoubleSlitConfig(n_paths=100_000)
    two = double_slit_run(cfg)
    runtime = time.perf_counter() - t0
    ref_bins, hist_bins, off = fringe_alignment(two.counts, two.reference_density)
    one = double_slit_run(replace(cfg.with_single_slit(), n_paths=10_000))
    chi2, dof, p = single_slit_chi2(one.counts, two.reference_density)
    aligned = len(off) > 0 and bool(np.all(np.abs(off) <= 1))
    ok = aligned and p < 0.01 and runtime < 600.0
    return ok, {"offsets_bins": [int(o) for o in off], "single_slit_p": p,
                "detected": int(len(two.spots)), "runtime_s": runtime}


@_criterion(7, "feynman_kac")
def _c7():
    from .core_fields import PotentialSpec
    from .one_world import crank_nicolson_green, feynman_kac_estimate
    V = PotentialSpec.harmonic(1.0)
    xs = np.array([-1.5, -0.75, 0.0, 0.75, 1.5])
    x, G = crank_nicolson_green(V, 1.0, 0.5, 0.0, 1.0)
    ref = np.interp(xs, x, G)
    est, err = feynman_kac_estimate(V, 1.0, 0.5, xs, 1.0, 100_000, n_steps=128, seed=3)
    z = np.abs(est - ref) / err
    return bool(np.all(z < 3.0)), {"max_z": float(z.max())}


# ---------------------------------------------------------------- parameter flows

@_criterion(8, "parameter_flows")
def _c8():
    from .core_fields import PotentialSpec
    from .param_space import (CoherentState, ParameterState, SkewedGaussian, alternate_compose,
                              dynamical_pair_check, hamilton_flow)
    V = PotentialSpec.harmonic(1.0)
    s = ParameterState([1.0], [0.5])
    coh = CoherentState(V, alpha=0.5)
    rep = hamilton_flow(coh, s, 1e-3, int(round(10 * 2 * math.pi / 1e-3)))
    drift = float(np.abs(rep.energy - rep.energy[0]).max())
    pair_coh = bool(np.all(dynamical_pair_check(coh, s, 1e-10)))
    sk = SkewedGaussian(V, alpha=0.5, c=0.4)
    pair_sk = bool(np.all(dynamical_pair_check(sk, s, 1e-10)))
    a = alternate_compose(sk, s, 1e-2, 200)
    h = hamilton_flow(sk, s, 1e-2, 200)
    diff = float(np.abs(a.final.z - h.final.z).max())
    ok = drift < 1e-8 and pair_coh and not pair_sk and diff > 1e-6
    return ok, {"energy_drift": drift, "coherent_pair": pair_coh, "skewed_pair": pair_sk,
                "alt_vs_hamilton": diff}


@_criterion(9, "loop_invariance")
def _c9():
    from .core_fields import PotentialSpec
    from .param_space import CoherentState, circle_loop, loop_action_invariant
    fam = CoherentState(PotentialSpec.harmonic(1.0), alpha=0.5)
    loop = circle_loop([0.0], [0.0], 1.0, 256)
    before, after = loop_action_invariant(fam, loop, 1e-2, 2 * math.pi)
    rel = abs(after - before) / abs(before)
    return rel < 1e-3, {"before": before, "after": after, "rel_change": rel}


# ---------------------------------------------------------------- ADF packets

@_criterion(10, "wronskian_caustic")
def _c10():
    from .adf_gaussian import ADFState, caustic_limit_check, propagate_adf
    from .core_fields import PotentialSpec
    runs = {"free": (PotentialSpec.free(), 1.0), "harmonic": (PotentialSpec.harmonic(1.0), 1.0),
            "barrier": (PotentialSpec.gaussian_barrier(1.0, 1.0), -3.0)}
    dev = {}
    for name, (V, q0) in runs.items():
        tr = propagate_adf(ADFState.initial(q0, 1.0, 0.25 + 0.1j), V, 1e-3, 10_000)
        dev[name] = float(np.abs(tr.wronskian - 2.0).max())
    ck = caustic_limit_check(ADFState.initial(0.0, 1.0, 0.25), PotentialSpec.harmonic(1.0), 1e-3, 3.0)
    ok = max(dev.values()) < 1e-8 and math.isfinite(ck["peak"]) and ck["rel_error"] < 0.05
    return ok, {"wronskian_dev": max(dev.values()), "caustic_peak": ck["peak"],
                "caustic_rel_error": ck["rel_error"]}


# ---------------------------------------------------------------- branching

@_criterion(11, "weierstrass_exactness")
def _c11():
    from .adf_gaussian import ADFState
    from .branching import BranchTree, WeierstrassPlan, reconstruct, weierstrass_split
    from .core_fields import Grid
    g = Grid.line(-20.0, 20.0, 4096)
    errs = []
    moms = True
    for gamma, p0 in ((1.0 + 0.0j, 0.0), (1.0 + 0.5j, 1.0)):
        root = BranchTree(ADFState.initial(0.3, p0, gamma)).nodes[0]
        fam = weierstrass_split(root, WeierstrassPlan(gamma2_r=2.0, n_q=32))
        errs.append(reconstruct(fam, g)[1])
        moms &= all(n.p == n.p_parent - 2.0 * n.state.hbar * n.gamma_c * n.omega for n in fam)
    return max(errs) < 1e-10 and moms, {"l2_error": max(errs), "momentum_bitwise": moms}


# Barrier benchmark: barrier narrower than the mother packet, mean energy at the
# barrier top. The recrossing time is the first moment a leaf center with
# |amplitude| >= TURN_FLOOR * max reverses its momentum.
BARRIER = dict(height=4.5, width=1.0, q0=-6.0, p0=3.0, gamma=0.25, hbar=0.02,
               ratio=25.0, n_q=256, kappa=1.0, every=10, dt=1e-3, t_end=4.0,
               grid=(-16.0, 16.0, 16384), report_every=0.25)
TURN_FLOOR = 1e-3


def barrier_benchmark(params: dict | None = None) -> dict:
    """Two-generation tree against the grid solver for barrier scattering.

    Both solutions advance in lockstep. Overlaps are recorded at every
    ``report_every`` and at the recrossing time; the worst per-split
    reconstruction error (relative to the mother amplitude) is returned too.
    """
    from .adf_gaussian import ADFState, evaluate_adf
    from .branching import (BranchTree, LeafEscapeWarning, SplitSchedule, WeierstrassPlan,
                            _split_error, branch_propagate, overlap, superpose)
    from .core_fields import Grid, PotentialSpec, propagate_complex
    P = dict(BARRIER, **(params or {}))
    V = PotentialSpec.gaussian_barrier(P["height"], P["width"])
    g = Grid.line(*P["grid"])
    x = g.axes()[0]
    dv = g.cell_volume
    root = ADFState.initial(P["q0"], P["p0"], P["gamma"], P["hbar"])
    field = evaluate_adf(root, g)
    tree = BranchTree(root)
    split_errors = []
    base_split = tree.split

    def split(idx, plan):
        fams = base_split(idx, plan)
        split_errors.extend(_split_error(f) / abs(f[0].origin_amplitude) for f in fams)
        return fams

    tree.split = split
    sched = SplitSchedule(every=P["every"], kappa=P["kappa"], max_generation=2,
                          plan=WeierstrassPlan(ratio=P["ratio"], n_q=P["n_q"], amp_floor=1e-13))
    dt, chunk = P["dt"], P["every"]
    n_total = int(round(P["t_end"] / dt))
    report = max(1, int(round(P["report_every"] / dt)))
    out = {"t": [], "overlap": [], "transmitted_grid": [], "transmitted_tree": [], "leaves": [],
           "t_recross": None, "overlap_at_recross": None}
    sign0 = math.copysign(1.0, P["p0"])

    def record(s):
        out["t"].append(round(tree.time, 12))
        out["overlap"].append(overlap(field, s))
        out["transmitted_grid"].append(float(np.sum(np.abs(field.psi[x > 0]) ** 2) * dv / field.norm()))
        out["transmitted_tree"].append(float(np.sum(np.abs(s.psi[x > 0]) ** 2) * dv / s.norm()))
        out["leaves"].append(len(tree.leaf_ids))

    def sup():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LeafEscapeWarning)
            return superpose(tree, g)

    done = 0
    while done < n_total:
        n = min(chunk, n_total - done)
        branch_propagate(tree, V, dt, n, sched)
        field = propagate_complex(field, V, dt, n)
        done += n
        if out["t_recross"] is None:
            a = np.abs(tree.amplitudes())
            live = a >= TURN_FLOOR * a.max()
            if np.any(sign0 * tree.batch.p[live] < 0):
                out["t_recross"] = tree.time
                s = sup()
                out["overlap_at_recross"] = overlap(field, s)
                if done % report:
                    record(s)
        if done % report == 0:
            record(sup())
    out["max_split_error"] = max(split_errors) if split_errors else 0.0
    out["generations"] = max(n.generation for n in tree.nodes.values())
    return out


@_criterion(12, "branching_fidelity")
def _c12():
    r = barrier_benchmark()
    t_rc = r["t_recross"]
    if t_rc is None:
        return False, {"t_recross": None, "max_split_error": r["max_split_error"]}
    before = [o for t, o in zip(r["t"], r["overlap"]) if t <= t_rc + 1e-9]
    worst = min(before)
    ok = worst > 0.99 and r["max_split_error"] < 1e-8 and r["generations"] == 2
    after = {f"t{t:g}": round(o, 4) for t, o in zip(r["t"], r["overlap"]) if t > t_rc}
    return ok, {"t_recross": t_rc, "min_overlap_before": worst,
                "max_split_error": r["max_split_error"], "overlap_after (reported)": after}


# ---------------------------------------------------------------- determinism

DETERMINISM_CONFIGS = {
    "grid": """
scenario = "grid"
[grid]
lo = [-10.0]
hi = [10.0]
n = [256]
[potential]
kind = "harmonic"
omega = 1.0
[initial]
q0 = [1.0]
p0 = [0.5]
gamma = [0.5]
[time]
dt = 0.001
n_steps = 200
save_every = 50
""",
    "paths": """
scenario = "paths"
seed = 11
[grid]
lo = [-20.0]
hi = [20.0]
n = [256]
[potential]
kind = "free"
[initial]
gamma = [0.25]
[time]
dt = 0.002
n_steps = 100
save_every = 10
[paths]
n_paths = 200
record_every = 20
""",
    "branch": """
scenario = "branch"
[grid]
lo = [-20.0]
hi = [20.0]
n = [1024]
[potential]
kind = "gaussian_barrier"
height = 1.0
width = 0.3
[initial]
q0 = [-4.0]
p0 = [2.0]
gamma = [0.5]
[time]
dt = 0.002
n_steps = 300
[branch]
ratio = 2.0
n_q = 8
every = 25
max_generation = 2
""",
    "feynman_kac": """
scenario = "feynman_kac"
seed = 5
[potential]
kind = "harmonic"
omega = 1.0
[feynman_kac]
targets = [0.0, 0.5]
n_samples = 2000
n_steps = 32
""",
}


@_criterion(13, "determinism")
def _c13():
    from .cli_io import parse_config_text, run_scenario
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        for name, text in DETERMINISM_CONFIGS.items():
            sums = []
            for rep in range(2):
                cfg = parse_config_text(text)
                out = Path(tmp) / f"{name}_{rep}"
                _, manifest = run_scenario(cfg, out)
                sums.append({f["path"]: f["sha256"] for f in manifest["files"]})
            if sums[0] != sums[1] or not sums[0]:
                mismatched.append(name)
    return not mismatched, {"scenarios": len(DETERMINISM_CONFIGS), "mismatched": mismatched}
