"""One-world stochastic paths driven by the Schrodinger velocity field.

A path obeys dX = v(X, t) dt + sqrt(hbar/m) dW with v = j/rho taken from a
grid solution. Snapshots of the grid solution are held in a
:class:`FieldSequence` (or streamed through :class:`StreamingSequence`); the
drift is cubic in space and linear in time between snapshots. Randomness
comes from counter-based Philox streams, one per path, so an ensemble gives
the same numbers regardless of chunking or ordering.

Also here: the quantum Hamilton pair (X, P_X), the classical limit, a
Feynman-Kac Monte Carlo estimator for the diffusion Green function with a
Crank-Nicolson oracle, and the double-slit fringe experiment.
"""
from __future__ import annotations

import csv
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import solve_banded

from . import kernels
from .core_fields import (RHO_FLOOR, AbsorbingMask, Grid, PotentialSpec, SchrodingerField,
                          _propagate, density, init_coherent_state, local_velocity)
from .errors import GridMismatchError, OutOfSpanError

__all__ = [
    "WienerConfig", "FieldSequence", "StreamingSequence", "PathState", "OneWorldPath",
    "Ensemble", "drift_velocity", "imaginary_drift", "step_path", "integrate_quantum_hamilton",
    "classical_limit_trajectory", "sample_initial_positions", "sample_ensemble", "ks_distance",
    "wiener_increments", "DoubleSlitConfig", "DoubleSlitResult", "double_slit_run",
    "fringe_alignment", "single_slit_chi2", "feynman_kac_estimate", "heat_kernel",
    "crank_nicolson_green", "mehler_kernel", "write_ensemble_csv", "write_spots_csv",
    "write_histogram_csv",
]

_TIME_TOL = 1e-9


# ---------------------------------------------------------------- noise

@dataclass(frozen=True)
class WienerConfig:
    """Wiener noise settings. ``diffusion_D=None`` means hbar/(2m)."""

    diffusion_D: float | None = None
    seed: int = 0
    stream_id: int = 0

    def resolve_D(self, hbar: float, mass: float) -> float:
        d = 0.5 * hbar / mass if self.diffusion_D is None else float(self.diffusion_D)
        if not d > 0:
            raise ValueError("diffusion_D must be positive")
        return d


def wiener_increments(seed: int, step: int, streams, dt: float, diffusion_D: float,
                      dims: int = 1) -> np.ndarray:
    """dW with <dW^2> = 2 D dt for each stream at counter ``step``; shape (n, dims)."""
    z = kernels.normal_pairs(seed, step, kernels.PURPOSE_STEP, np.asarray(streams, dtype=np.uint64))
    return math.sqrt(2.0 * diffusion_D * dt) * z[:, :dims]


# ---------------------------------------------------------------- field sequences

def _velocity_arrays(f: SchrodingerField, floor: float) -> tuple[np.ndarray, np.ndarray]:
    v = local_velocity(f, floor=floor)
    m = np.ascontiguousarray(np.ma.getmaskarray(v)[0], dtype=np.uint8)
    return np.ascontiguousarray(v.filled(0.0)), m


class FieldSequence:
    """Snapshots at a uniform save interval on one grid.

    Velocity fields v = j/rho are computed lazily and cached (a few at a time).
    """

    def __init__(self, fields: Sequence[SchrodingerField], floor: float = RHO_FLOOR,
                 cache_size: int = 8):
        fields = list(fields)
        if not fields:
            raise ValueError("empty field sequence")
        g = fields[0].grid
        for f in fields[1:]:
            if f.grid != g:
                raise GridMismatchError("snapshots must share one grid")
        times = np.array([f.time for f in fields])
        if len(fields) > 1:
            dts = np.diff(times)
            if not np.all(dts > 0) or np.ptp(dts) > 1e-9 * max(1.0, abs(dts[0])):
                raise ValueError("snapshot times must be uniformly spaced and increasing")
            self.save_dt = float(dts.mean())
        else:
            self.save_dt = 0.0
        self.fields = fields
        self.grid = g
        self.hbar = fields[0].hbar
        self.mass = fields[0].mass
        self.t0 = float(times[0])
        self.n_snapshots = len(fields)
        self.floor = floor
        self._cache: OrderedDict[int, tuple[np.ndarray, np.ndarray]] = OrderedDict()
        self._cache_size = cache_size

    @classmethod
    def from_propagation(cls, field0: SchrodingerField, potential, dt: float, n_steps: int,
                         save_every: int, absorber: AbsorbingMask | None = None,
                         floor: float = RHO_FLOOR) -> "FieldSequence":
        snaps = [field0]
        _propagate(field0, potential, dt, n_steps, absorber,
                   lambda f, k: snaps.append(f) if k % save_every == 0 else None,
                   save_every, real=False)
        if n_steps % save_every:
            snaps.pop()
        return cls(snaps, floor=floor)

    @property
    def t_end(self) -> float:
        return self.t0 + (self.n_snapshots - 1) * self.save_dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.save_dt * np.arange(self.n_snapshots)

    def snapshot(self, i: int) -> SchrodingerField:
        return self.fields[i]

    def velocity_snapshot(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if i in self._cache:
            self._cache.move_to_end(i)
            return self._cache[i]
        out = _velocity_arrays(self.snapshot(i), self.floor)
        self._cache[i] = out
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return out

    def density_flux_snapshot(self, i: int) -> np.ndarray:
        """Stacked (rho, j_1, ..., j_dims) of snapshot i, cached."""
        cache = self.__dict__.setdefault("_rj_cache", OrderedDict())
        if i not in cache:
            from .core_fields import flux
            f = self.snapshot(i)
            cache[i] = np.ascontiguousarray(np.concatenate([density(f)[None], flux(f)]))
            if len(cache) > self._cache_size:
                cache.popitem(last=False)
        return cache[i]

    def bracket(self, t: float) -> tuple[int, float]:
        """Snapshot index i and weight wb with t = (1-wb) t_i + wb t_{i+1}."""
        if t < self.t0 - _TIME_TOL or t > self.t_end + _TIME_TOL:
            raise OutOfSpanError(f"t={t} outside [{self.t0}, {self.t_end}]")
        if self.n_snapshots == 1:
            return 0, 0.0
        s = (t - self.t0) / self.save_dt
        i = int(math.floor(s + _TIME_TOL))
        i = min(max(i, 0), self.n_snapshots - 1)
        wb = s - i
        if i == self.n_snapshots - 1 or abs(wb) < _TIME_TOL:
            wb = 0.0
        return i, float(min(max(wb, 0.0), 1.0))


class StreamingSequence(FieldSequence):
    """Field sequence fed by a propagation run and consumed in time order.

    Only a small window of snapshots is kept, which keeps long 2D runs within
    memory. Requests for snapshots older than the window fail.
    """

    def __init__(self, field0: SchrodingerField, potential, dt: float, n_steps: int,
                 save_every: int, absorber: AbsorbingMask | None = None,
                 floor: float = RHO_FLOOR, on_step=None, window: int = 3):
        if n_steps % save_every:
            raise ValueError("n_steps must be a multiple of save_every")
        self.grid = field0.grid
        self.hbar = field0.hbar
        self.mass = field0.mass
        self.t0 = float(field0.time)
        self.save_dt = dt * save_every
        self.n_snapshots = n_steps // save_every + 1
        self.floor = floor
        self._window = window
        self._fields: OrderedDict[int, SchrodingerField] = OrderedDict({0: field0})
        self._cache = OrderedDict()
        self._cache_size = window
        self._gen = self._run(field0, potential, dt, n_steps, save_every, absorber, on_step)
        self._next = 1

    @staticmethod
    def _run(field0, potential, dt, n_steps, save_every, absorber, on_step) -> Iterator[SchrodingerField]:
        # A generator cannot yield from inside the propagation callback, so
        # run one save interval at a time.
        f = field0
        done = 0
        while done < n_steps:
            cb = None
            if on_step is not None:
                base = done
                cb = lambda g, k: on_step(g, base + k)
            f = _propagate(f, potential, dt, save_every, absorber, cb, 1, real=False)
            done += save_every
            yield f

    def snapshot(self, i: int) -> SchrodingerField:
        while self._next <= i:
            self._fields[self._next] = next(self._gen)
            self._next += 1
            while len(self._fields) > self._window:
                self._fields.popitem(last=False)
        if i not in self._fields:
            raise OutOfSpanError(f"snapshot {i} already left the streaming window")
        return self._fields[i]

    def drain(self) -> None:
        """Run the remaining propagation (so step callbacks see every step)."""
        for f in self._gen:
            self._fields[self._next] = f
            self._next += 1
            while len(self._fields) > self._window:
                self._fields.popitem(last=False)


def drift_velocity(seq: FieldSequence, x, t: float) -> tuple[np.ndarray, np.ndarray]:
    """v(x, t): cubic in space, linear in time. Returns (values (n, dims), low-density flags)."""
    g = seq.grid
    x = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1, g.dims))
    i, wb = seq.bracket(t)
    va, ma = seq.velocity_snapshot(i)
    out, fl = kernels.interp_periodic(va, ma, g.origin, g.spacing_array, x)
    if wb > 0.0:
        vb, mb = seq.velocity_snapshot(i + 1)
        ob, flb = kernels.interp_periodic(vb, mb, g.origin, g.spacing_array, x)
        out = (1.0 - wb) * out + wb * ob
        fl = fl | flb
        out[fl != 0] = 0.0
    return out, fl


def imaginary_drift(field: SchrodingerField, x, diffusion_D: float | None = None) -> np.ndarray:
    """-(D/rho) grad rho at x (diagnostic only; never used to move paths)."""
    from .core_fields import _grad
    g = field.grid
    d = 0.5 * field.hbar / field.mass if diffusion_D is None else diffusion_D
    rho = density(field)
    m = (rho < RHO_FLOOR * rho.max()).astype(np.uint8)
    gr = np.stack(_grad(rho, g, "spectral"))
    a = -d * gr / np.where(m, 1.0, rho)
    a[:, m.astype(bool)] = 0.0
    x = np.asarray(x, dtype=float).reshape(-1, g.dims)
    out, _ = kernels.interp_periodic(np.ascontiguousarray(a), m, g.origin,
                                     g.spacing_array, x)
    return out


# ---------------------------------------------------------------- paths

@dataclass(frozen=True)
class PathState:
    """Positions of a batch of paths at time t after ``step`` EM steps."""

    x: np.ndarray
    t: float
    step: int
    stream_ids: np.ndarray
    seed: int = 0
    alive: np.ndarray | None = None
    low_density: np.ndarray | None = None

    @classmethod
    def start(cls, x0, t0: float, stream_ids, seed: int = 0, dims: int | None = None) -> "PathState":
        x = np.asarray(x0, dtype=float)
        if dims is not None:
            x = x.reshape(-1, dims)
        elif x.ndim < 2:
            x = x.reshape(-1, 1)
        ids = np.asarray(stream_ids, dtype=np.uint64).reshape(-1)
        if ids.size != x.shape[0]:
            raise ValueError("one stream id per path")
        n = x.shape[0]
        return cls(np.ascontiguousarray(x), float(t0), 0, ids, int(seed),
                   np.ones(n, dtype=bool), np.zeros(n, dtype=np.int64))


def step_path(state: PathState, seq: FieldSequence, dt: float, noise: bool = True,
              hbar_scale: float = 1.0) -> PathState:
    """One Euler-Maruyama step X += v(X, t) dt + sqrt(hbar/m) N(0, dt).

    ``noise=False`` drops the Wiener term; ``hbar_scale`` multiplies hbar in
    the noise amplitude only. Paths that leave the grid stop (alive=False).
    Masked (low-density) drift counts into ``state.low_density``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    g = seq.grid
    i, wb = seq.bracket(state.t)
    if state.t > seq.t_end - _TIME_TOL and seq.n_snapshots > 1:
        raise OutOfSpanError(f"no drift beyond t={seq.t_end}")
    va, ma = seq.velocity_snapshot(i)
    if wb > 0.0:
        vb, mb = seq.velocity_snapshot(i + 1)
    else:
        vb, mb = va, ma
    x = np.array(state.x, dtype=float, order="C")
    n, dims = x.shape
    amp = math.sqrt(hbar_scale * seq.hbar / seq.mass * dt) if noise else 0.0
    if amp > 0.0:
        z = kernels.normal_pairs(state.seed, state.step, kernels.PURPOSE_STEP, state.stream_ids)
    else:
        z = np.zeros((n, 2))
    alive = state.alive if state.alive is not None else np.ones(n, dtype=bool)
    flags = kernels.em_step(x, alive.astype(np.uint8), va, vb, ma, mb, float(wb),
                            g.origin, g.spacing_array, float(dt), amp,
                            np.ascontiguousarray(z))
    inside = g.contains(x)
    new_alive = alive & inside
    low = (state.low_density if state.low_density is not None else np.zeros(n, np.int64))
    low = low + (flags.astype(bool) & alive)
    return PathState(x, state.t + dt, state.step + 1, state.stream_ids, state.seed, new_alive, low)


@dataclass
class OneWorldPath:
    times: np.ndarray
    positions: np.ndarray
    stream_id: int = 0
    momenta: np.ndarray | None = None
    flags: np.ndarray | None = None
    exit_time: float | None = None


@dataclass
class Ensemble:
    """Batch of paths sharing one time axis. positions: (n_times, n_paths, dims)."""

    times: np.ndarray
    positions: np.ndarray
    stream_ids: np.ndarray
    flags: np.ndarray
    exit_step: np.ndarray
    low_density_steps: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[1]

    @property
    def endpoints(self) -> np.ndarray:
        return self.positions[-1]

    def path(self, k: int) -> OneWorldPath:
        e = int(self.exit_step[k])
        last = len(self.times) if e < 0 else e + 1
        return OneWorldPath(self.times[:last], self.positions[:last, k], int(self.stream_ids[k]),
                            None, self.flags[:last, k],
                            None if e < 0 else float(self.times[min(e, len(self.times) - 1)]))


def _run_paths(seq: FieldSequence, x0: np.ndarray, stream_ids: np.ndarray, seed: int,
               dt: float, n_steps: int, record_every: int, noise: bool,
               hbar_scale: float = 1.0) -> Ensemble:
    st = PathState.start(x0, seq.t0, stream_ids, seed, dims=seq.grid.dims)
    n_rec = n_steps // record_every + 1
    pos = np.empty((n_rec, st.x.shape[0], st.x.shape[1]))
    flags = np.zeros((n_rec, st.x.shape[0]), dtype=np.uint8)
    times = np.empty(n_rec)
    pos[0] = st.x
    times[0] = st.t
    exit_step = np.full(st.x.shape[0], -1, dtype=np.int64)
    r = 1
    prev_low = st.low_density
    for k in range(1, n_steps + 1):
        st = PathState(st.x, seq.t0 + (k - 1) * dt, st.step, st.stream_ids, st.seed,
                       st.alive, st.low_density)
        was = st.alive
        st = step_path(st, seq, dt, noise, hbar_scale)
        newly = was & ~st.alive
        exit_step[newly] = (k + record_every - 1) // record_every
        if k % record_every == 0:
            pos[r] = st.x
            times[r] = seq.t0 + k * dt
            flags[r] = (st.low_density > prev_low).astype(np.uint8)
            prev_low = st.low_density
            r += 1
    return Ensemble(times[:r], pos[:r], np.asarray(stream_ids, dtype=np.uint64), flags[:r],
                    exit_step, st.low_density)


def integrate_quantum_hamilton(x0, seq: FieldSequence, potential: PotentialSpec, dt: float,
                               n: int, seed: int = 0, stream_id: int = 0,
                               noise: bool = True) -> OneWorldPath:
    """X_t by :func:`step_path` plus the momentum-like record P_X.

    P starts at m j(X_0) and follows dP = -rho(X) grad V(X) dt. P is recorded
    only; it never feeds back into X, which the drift already determines.
    """
    g = seq.grid
    st = PathState.start(np.atleast_1d(np.asarray(x0, dtype=float)).reshape(1, g.dims),
                         seq.t0, [stream_id], seed, dims=g.dims)
    times = [st.t]
    xs = [st.x[0].copy()]
    fl = [0]
    rho0, j0 = _rho_and_flux_at(seq, st.x, st.t)
    p = seq.mass * j0[0]
    ps = [p.copy()]
    exit_t = None
    for k in range(n):
        x_old = st.x
        rho, _ = _rho_and_flux_at(seq, x_old, st.t)
        grads = potential.gradient(*[np.array([c]) for c in x_old[0]])
        force = -rho[0] * np.array([float(gv[0]) for gv in grads])
        low_before = int(st.low_density[0])
        st = step_path(st, seq, dt, noise)
        p = p + force * dt
        times.append(st.t)
        xs.append(st.x[0].copy())
        ps.append(p.copy())
        fl.append(int(st.low_density[0]) - low_before)
        if not st.alive[0]:
            exit_t = st.t
            break
    return OneWorldPath(np.array(times), np.array(xs), stream_id, np.array(ps),
                        np.array(fl, dtype=np.uint8), exit_t)


def _rho_and_flux_at(seq: FieldSequence, x: np.ndarray, t: float):
    """rho and j at positions x, linear in time between snapshots."""
    g = seq.grid
    i, wb = seq.bracket(t)

    def at(idx):
        vals, _ = kernels.interp_periodic(seq.density_flux_snapshot(idx), np.zeros(g.shape, np.uint8),
                                          g.origin, g.spacing_array, x)
        return vals

    vals = at(i)
    if wb > 0.0:
        vals = (1.0 - wb) * vals + wb * at(i + 1)
    return vals[:, 0], vals[:, 1:]


def classical_limit_trajectory(q0, p0, potential: PotentialSpec, dt: float, n: int,
                               mass: float = 1.0) -> OneWorldPath:
    """Leapfrog (kick-drift-kick) for dq/dt = p/m, dp/dt = -grad V. No noise."""
    q = np.atleast_1d(np.asarray(q0, dtype=float)).copy()
    p = np.atleast_1d(np.asarray(p0, dtype=float)).copy()
    qs = np.empty((n + 1, q.size))
    ps = np.empty((n + 1, q.size))
    qs[0], ps[0] = q, p

    def force(qv):
        return -np.array([float(np.asarray(gc).ravel()[0]) for gc in potential.gradient(*qv)])

    f = force(q)
    for k in range(1, n + 1):
        p = p + 0.5 * dt * f
        q = q + dt * p / mass
        f = force(q)
        p = p + 0.5 * dt * f
        qs[k], ps[k] = q, p
    return OneWorldPath(dt * np.arange(n + 1), qs, 0, ps)


# ---------------------------------------------------------------- ensembles

def _cell_cdf(weights: np.ndarray) -> np.ndarray:
    c = np.concatenate([[0.0], np.cumsum(weights)])
    return c / c[-1]


def sample_initial_positions(field: SchrodingerField, n: int, seed: int,
                             stream_ids=None) -> np.ndarray:
    """Inverse-CDF draws from rho on the grid, uniform within each cell.

    Cell i spans [x_i - h/2, x_i + h/2]. 2D draws take x from the marginal and
    y from the conditional row.
    """
    g = field.grid
    if n == 0:
        return np.empty((0, g.dims))
    ids = np.arange(n, dtype=np.uint64) if stream_ids is None else np.asarray(stream_ids, np.uint64)
    u = kernels.uniform_pairs(seed, 0, kernels.PURPOSE_INIT, ids)
    rho = density(field)
    ax = g.axes()
    h = g.spacing
    if g.dims == 1:
        edges = ax[0][0] - 0.5 * h[0] + h[0] * np.arange(g.shape[0] + 1)
        return np.interp(u[:, 0], _cell_cdf(rho), edges).reshape(-1, 1)
    ex = ax[0][0] - 0.5 * h[0] + h[0] * np.arange(g.shape[0] + 1)
    ey = ax[1][0] - 0.5 * h[1] + h[1] * np.arange(g.shape[1] + 1)
    xs = np.interp(u[:, 0], _cell_cdf(rho.sum(axis=1)), ex)
    rows = np.clip(np.floor((xs - ex[0]) / h[0]).astype(np.int64), 0, g.shape[0] - 1)
    ys = np.empty(n)
    for r in np.unique(rows):
        sel = rows == r
        ys[sel] = np.interp(u[sel, 1], _cell_cdf(rho[r]), ey)
    return np.stack([xs, ys], axis=1)


def sample_ensemble(seq: FieldSequence, n_paths: int, dt: float, n_steps: int | None = None,
                    seed: int = 0, first_stream: int = 0, record_every: int = 1,
                    noise: bool = True, threads: int = 1, x0=None) -> Ensemble:
    """Launch ``n_paths`` paths from rho(., t0) and integrate to the sequence end.

    Each path p uses Philox stream ``first_stream + p`` for both its initial
    draw and its increments, so results do not depend on ``threads``.
    """
    g = seq.grid
    if n_steps is None:
        n_steps = int(round((seq.t_end - seq.t0) / dt))
    if seq.t0 + n_steps * dt > seq.t_end + 1e-9 * max(1.0, seq.t_end):
        raise OutOfSpanError("requested integration runs past the field sequence")
    ids = first_stream + np.arange(n_paths, dtype=np.uint64)
    if n_paths == 0:
        n_rec = n_steps // record_every + 1
        return Ensemble(seq.t0 + dt * record_every * np.arange(n_rec), np.empty((n_rec, 0, g.dims)),
                        ids, np.zeros((n_rec, 0), np.uint8), np.empty(0, np.int64),
                        np.empty(0, np.int64))
    if x0 is None:
        x0 = sample_initial_positions(seq.snapshot(0), n_paths, seed, ids)
    x0 = np.asarray(x0, dtype=float).reshape(n_paths, g.dims)
    if threads <= 1 or n_paths < 2 * threads or isinstance(seq, StreamingSequence):
        return _run_paths(seq, x0, ids, seed, dt, n_steps, record_every, noise)
    chunks = np.array_split(np.arange(n_paths), threads)
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(lambda c: _run_paths(seq, x0[c], ids[c], seed, dt, n_steps,
                                                 record_every, noise), chunks))
    return Ensemble(parts[0].times, np.concatenate([p.positions for p in parts], axis=1), ids,
                    np.concatenate([p.flags for p in parts], axis=1),
                    np.concatenate([p.exit_step for p in parts]),
                    np.concatenate([p.low_density_steps for p in parts]))


def ks_distance(samples, grid: Grid, rho: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between samples and the grid density (1D).

    The grid CDF is piecewise linear: rho is constant on each cell.
    """
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    n = s.size
    if n == 0:
        raise ValueError("no samples")
    h = grid.spacing[0]
    edges = grid.axes()[0][0] - 0.5 * h + h * np.arange(grid.shape[0] + 1)
    cdf = np.interp(s, edges, _cell_cdf(np.asarray(rho, dtype=float)))
    k = np.arange(1, n + 1)
    return float(max(np.max(k / n - cdf), np.max(cdf - (k - 1) / n)))


# ---------------------------------------------------------------- double slit

@dataclass(frozen=True)
class DoubleSlitConfig:
    n_points: tuple[int, int] = (512, 512)
    extent: float = 40.0
    hbar: float = 1.0
    mass: float = 1.0
    x0: float = -20.0
    p0: float = 5.0
    sigma_x: float = 2.0
    sigma_y: float = 4.0
    wall_position: float = -10.0
    wall_thickness: float = 0.5
    wall_height: float = 200.0
    slit_centers: tuple[float, ...] = (-1.5, 1.5)
    slit_widths: tuple[float, ...] = (0.8, 0.8)
    detector_x: float = 20.0
    dt: float = 0.005
    n_steps: int = 2000
    save_every: int = 5
    absorber_width: float = 5.0
    absorber_strength: float = 40.0
    n_paths: int = 100_000
    seed: int = 0
    n_bins: int = 60
    y_range: float = 30.0
    noise: bool = True

    def with_single_slit(self, keep: int = 1) -> "DoubleSlitConfig":
        return replace(self, slit_centers=(self.slit_centers[keep],),
                       slit_widths=(self.slit_widths[keep],))


@dataclass
class DoubleSlitResult:
    spots: np.ndarray           # (n_detected, 2): stream_id, y at the detector
    bin_edges: np.ndarray
    counts: np.ndarray
    reference_density: np.ndarray  # time-integrated |psi|^2 on the detector line, per bin
    reference_flux: np.ndarray     # time-integrated positive j_x on the line, per bin
    line_y: np.ndarray
    line_density: np.ndarray
    line_flux: np.ndarray
    final_field: SchrodingerField
    low_density_steps: int = 0

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])


def _double_slit_setup(cfg: DoubleSlitConfig):
    L = cfg.extent
    g = Grid.plane((-L, -L), (L, L), cfg.n_points)
    pot = PotentialSpec.double_slit_mask(cfg.wall_position, cfg.slit_centers, cfg.slit_widths,
                                         cfg.wall_height, cfg.wall_thickness)
    gam = (1.0 / (4.0 * cfg.sigma_x ** 2), 1.0 / (4.0 * cfg.sigma_y ** 2))
    f0 = init_coherent_state(g, (cfg.x0, 0.0), (cfg.p0, 0.0), gam, cfg.hbar, cfg.mass)
    absorber = AbsorbingMask(cfg.absorber_width, cfg.absorber_strength)
    return g, pot, f0, absorber


def _bin_average(y, values, edges):
    out = np.empty(len(edges) - 1)
    fine = np.linspace(edges[0], edges[-1], 16 * (len(edges) - 1) + 1)
    fv = np.interp(fine, y, values)
    for b in range(len(edges) - 1):
        sel = (fine >= edges[b]) & (fine <= edges[b + 1])
        out[b] = trapezoid(fv[sel], fine[sel]) / (edges[b + 1] - edges[b])
    return out


def double_slit_run(cfg: DoubleSlitConfig) -> DoubleSlitResult:
    """Grid propagation through the slits plus one-world paths launched from rho(., 0).

    Paths step with the grid time step; drift snapshots are saved every
    ``save_every`` steps. A path is detected at its first crossing of
    x = detector_x (y linearly interpolated between the bracketing steps).
    """
    from .core_fields import flux
    g, pot, f0, absorber = _double_slit_setup(cfg)
    ax, ay = g.axes()
    hx = g.spacing[0]
    ix = int(math.floor((cfg.detector_x - ax[0]) / hx))
    wx = (cfg.detector_x - ax[ix]) / hx
    line_rho = np.zeros(g.shape[1])
    line_j = np.zeros(g.shape[1])

    def on_step(f: SchrodingerField, k: int):
        nonlocal line_rho, line_j
        rho = density(f)
        line_rho += cfg.dt * ((1 - wx) * rho[ix] + wx * rho[ix + 1])

    flux_every = cfg.save_every

    seq = StreamingSequence(f0, pot, cfg.dt, cfg.n_steps, cfg.save_every, absorber,
                            on_step=on_step)
    ids = np.arange(cfg.n_paths, dtype=np.uint64)
    x0 = sample_initial_positions(f0, cfg.n_paths, cfg.seed, ids)
    st = PathState.start(x0, 0.0, ids, cfg.seed, dims=2)
    detected_y = np.full(cfg.n_paths, np.nan)
    detected = np.zeros(cfg.n_paths, dtype=bool)
    for k in range(cfg.n_steps):
        if k % flux_every == 0:
            f = seq.snapshot(k // cfg.save_every)
            jx = flux(f)[0]
            line_j += cfg.dt * flux_every * np.maximum((1 - wx) * jx[ix] + wx * jx[ix + 1], 0.0)
        if cfg.n_paths == 0:
            continue
        x_old = st.x
        st = PathState(st.x, k * cfg.dt, st.step, st.stream_ids, st.seed, st.alive & ~detected,
                       st.low_density)
        alive_before = st.alive
        st = step_path(st, seq, cfg.dt, noise=cfg.noise)
        xn = st.x
        cross = alive_before & (x_old[:, 0] < cfg.detector_x) & (xn[:, 0] >= cfg.detector_x)
        if np.any(cross):
            s = (cfg.detector_x - x_old[cross, 0]) / (xn[cross, 0] - x_old[cross, 0])
            detected_y[cross] = x_old[cross, 1] + s * (xn[cross, 1] - x_old[cross, 1])
            detected |= cross
    seq.drain()
    final = seq.snapshot(seq.n_snapshots - 1)
    edges = np.linspace(-cfg.y_range, cfg.y_range, cfg.n_bins + 1)
    ys = detected_y[detected]
    counts, _ = np.histogram(ys, bins=edges)
    ref = _bin_average(ay, line_rho, edges)
    refj = _bin_average(ay, line_j, edges)
    spots = np.stack([ids[detected].astype(float), ys], axis=1) if cfg.n_paths else np.empty((0, 2))
    return DoubleSlitResult(spots, edges, counts, ref, refj, ay, line_rho, line_j, final,
                            int(st.low_density.sum()) if cfg.n_paths else 0)


def fringe_alignment(counts: np.ndarray, reference: np.ndarray, prominence: float = 0.1,
                     smooth: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Match reference maxima to histogram maxima.

    Peaks are local maxima with prominence above ``prominence`` times the
    series maximum; the histogram is optionally smoothed with a centered
    moving average of half-width ``smooth`` bins first. Returns the
    reference peak bins, the nearest histogram peak bins and their offsets
    (in bins).
    """
    from scipy.signal import find_peaks
    c = np.asarray(counts, dtype=float)
    if smooth > 0:
        k = np.ones(2 * smooth + 1) / (2 * smooth + 1)
        c = np.convolve(np.pad(c, smooth, mode="edge"), k, mode="valid")
    r = np.asarray(reference, dtype=float)
    pr, _ = find_peaks(np.pad(r, 1, constant_values=-np.inf), prominence=prominence * r.max())
    ph, _ = find_peaks(np.pad(c, 1, constant_values=-np.inf), prominence=prominence * c.max())
    pr = pr - 1
    ph = ph - 1
    if ph.size == 0:
        return pr, np.full(pr.shape, -1), np.full(pr.shape, np.iinfo(np.int64).max)
    near = np.array([ph[np.argmin(np.abs(ph - p))] for p in pr], dtype=np.int64)
    return pr, near, np.abs(near - pr)


def single_slit_chi2(counts: np.ndarray, reference: np.ndarray, min_expected: float = 5.0):
    """Pearson chi^2 of histogram counts against a reference profile.

    The reference is scaled to the same total; bins with expected count below
    ``min_expected`` are merged into their neighbour. Returns (chi2, dof, p).
    """
    from scipy.stats import chi2 as chi2_dist
    c = np.asarray(counts, dtype=float)
    r = np.clip(np.asarray(reference, dtype=float), 0.0, None)
    e = r / r.sum() * c.sum()
    obs, exp = [], []
    acc_o = acc_e = 0.0
    for o_, e_ in zip(c, e):
        acc_o += o_
        acc_e += e_
        if acc_e >= min_expected:
            obs.append(acc_o)
            exp.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 and exp:
        obs[-1] += acc_o
        exp[-1] += acc_e
    obs, exp = np.array(obs), np.array(exp)
    stat = float(np.sum((obs - exp) ** 2 / exp))
    dof = max(len(obs) - 1, 1)
    return stat, dof, float(chi2_dist.sf(stat, dof))


# ---------------------------------------------------------------- Feynman-Kac

def heat_kernel(x, x0: float, t: float, diffusion_D: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.exp(-(x - x0) ** 2 / (4.0 * diffusion_D * t)) / math.sqrt(4.0 * math.pi * diffusion_D * t)


def feynman_kac_estimate(potential: PotentialSpec, lam: float, diffusion_D: float, x_target,
                         t: float, n_samples: int, x0: float = 0.0, n_steps: int = 256,
                         seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Green function of d rho/dt = D rho'' - lam V rho from (x0, 0) to (x_target, t).

    G = heat kernel * E[exp(-lam int_0^t V(B_s) ds)] over Brownian bridges B
    pinned at x0 and x_target, with the time integral by the trapezoid rule
    on ``n_steps`` intervals. Returns (estimate, standard error) per target.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if n_samples < 2:
        raise ValueError("need at least two samples")
    xt = np.atleast_1d(np.asarray(x_target, dtype=float))
    ids = np.arange(n_samples, dtype=np.uint64)
    h = t / n_steps
    s = h * np.arange(n_steps + 1)
    # one free Brownian path per sample, reused for every target bridge
    w = np.zeros((n_samples, n_steps + 1))
    scale = math.sqrt(2.0 * diffusion_D * h)
    n_pairs = (n_steps + 1) // 2
    col = 1
    for k in range(n_pairs):
        z = kernels.normal_pairs(seed, k, kernels.PURPOSE_AUX, ids)
        for c in range(2):
            if col <= n_steps:
                w[:, col] = w[:, col - 1] + scale * z[:, c]
                col += 1
    bridge0 = w - np.outer(w[:, -1], s / t)
    est = np.empty(xt.size)
    err = np.empty(xt.size)
    tw = np.full(n_steps + 1, h)
    tw[0] = tw[-1] = 0.5 * h
    for i, x in enumerate(xt):
        path = x0 + (x - x0) * (s / t)[None, :] + bridge0
        vint = (np.asarray(potential.value(path)) * tw[None, :]).sum(axis=1)
        f = np.exp(-lam * vint)
        k = float(heat_kernel(x, x0, t, diffusion_D))
        est[i] = k * f.mean()
        err[i] = k * f.std(ddof=1) / math.sqrt(n_samples)
    return est, err


def crank_nicolson_green(potential: PotentialSpec, lam: float, diffusion_D: float, x0: float,
                         t: float, half_width: float = 12.0, n: int = 4001,
                         n_steps: int = 4000, rannacher: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference Green function of d rho/dt = D rho'' - lam V rho.

    Zero Dirichlet ends at x0 +/- half_width; the delta start is one node of
    height 1/dx. ``rannacher`` implicit-Euler half steps damp the start-up
    oscillation before Crank-Nicolson takes over. Returns (x, G).
    """
    x = x0 + np.linspace(-half_width, half_width, n)
    dx = x[1] - x[0]
    u = np.zeros(n)
    u[n // 2] = 1.0 / dx
    v = lam * np.asarray(potential.value(x), dtype=float)
    r = diffusion_D / dx ** 2

    def banded(theta_dt):
        ab = np.zeros((3, n))
        ab[0, 1:] = -theta_dt * r
        ab[1, :] = 1.0 + theta_dt * (2.0 * r + v)
        ab[2, :-1] = -theta_dt * r
        ab[0, 1] = 0.0
        ab[2, -2] = 0.0
        ab[1, 0] = ab[1, -1] = 1.0
        return ab

    def apply(theta_dt, w):
        out = w.copy()
        out[1:-1] = w[1:-1] + theta_dt * (r * (w[2:] - 2.0 * w[1:-1] + w[:-2]) - v[1:-1] * w[1:-1])
        out[0] = out[-1] = 0.0
        return out

    dt = t / n_steps
    done = 0.0
    ab_half = banded(0.5 * dt)
    for _ in range(rannacher):
        u = solve_banded((1, 1), ab_half, u)
        u[0] = u[-1] = 0.0
        done += 0.5 * dt
    steps_left = int(round((t - done) / dt))
    ab_cn = banded(0.5 * dt)
    for _ in range(steps_left):
        u = solve_banded((1, 1), ab_cn, apply(0.5 * dt, u))
        u[0] = u[-1] = 0.0
    return x, u


def mehler_kernel(x, x0: float, t: float, diffusion_D: float, lam: float, stiffness: float) -> np.ndarray:
    """Exact Green function for V = stiffness x^2 / 2 (imaginary-time oscillator)."""
    x = np.asarray(x, dtype=float)
    M = 1.0 / (2.0 * diffusion_D)
    w = math.sqrt(2.0 * diffusion_D * lam * stiffness)
    sh = math.sinh(w * t)
    pref = math.sqrt(M * w / (2.0 * math.pi * sh))
    return pref * np.exp(-M * w * ((x * x + x0 * x0) * math.cosh(w * t) - 2.0 * x * x0) / (2.0 * sh))


# ---------------------------------------------------------------- CSV output

def write_ensemble_csv(path, ens: Ensemble) -> None:
    dims = ens.positions.shape[2]
    head = ["stream_id", "time", "x"] + (["y"] if dims == 2 else []) + ["flag"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for k in range(len(ens)):
            last = ens.positions.shape[0] if ens.exit_step[k] < 0 else int(ens.exit_step[k]) + 1
            sid = int(ens.stream_ids[k])
            for r in range(min(last, ens.positions.shape[0])):
                row = [sid, repr(float(ens.times[r]))]
                row += [repr(float(v)) for v in ens.positions[r, k]]
                row.append(int(ens.flags[r, k]))
                w.writerow(row)


def write_spots_csv(path, spots: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stream_id", "y_detect"])
        for sid, y in spots:
            w.writerow([int(sid), repr(float(y))])


def write_histogram_csv(path, centers, counts, reference) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center", "count", "reference_density"])
        for c, n, r in zip(centers, counts, reference):
            w.writerow([repr(float(c)), int(n), repr(float(r))])
