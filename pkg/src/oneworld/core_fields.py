"""Grid representation of the Schrodinger vector (phi_r, phi_c).

Propagation is split-step spectral on a periodic box, either on the complex
function psi = phi_r + i phi_c or as coupled real updates of the two
components through the symplectic matrix J. Observables (density, flux,
local velocity and energy, moments, continuity residual) live here as well.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.fft as sfft

from .errors import (GridMismatchError, InstabilityError, NonPositiveWidthError,
                     PacketEscapesGridError)

# hbar d/dt (phi_r, phi_c) = J H (phi_r, phi_c)
J = np.array([[0.0, 1.0], [-1.0, 0.0]])

RHO_FLOOR = 1e-12
FFT_WORKERS: int | None = None


def set_fft_workers(n: int | None) -> None:
    global FFT_WORKERS
    FFT_WORKERS = n


@dataclass(frozen=True)
class Grid:
    extent_min: tuple[float, ...]
    extent_max: tuple[float, ...]
    n_points: tuple[int, ...]
    periodic: bool = True

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.extent_min))
        hi = tuple(float(v) for v in np.atleast_1d(self.extent_max))
        n = tuple(int(v) for v in np.atleast_1d(self.n_points))
        object.__setattr__(self, "extent_min", lo)
        object.__setattr__(self, "extent_max", hi)
        object.__setattr__(self, "n_points", n)
        if not (len(lo) == len(hi) == len(n)) or len(n) not in (1, 2):
            raise ValueError("grid must be 1D or 2D with matching extents")
        for a in range(len(n)):
            if n[a] < 4 or n[a] & (n[a] - 1):
                raise ValueError(f"n_points[{a}]={n[a]} is not a power of two")
            if not hi[a] > lo[a]:
                raise ValueError(f"extent_max[{a}] must exceed extent_min[{a}]")

    @classmethod
    def line(cls, lo: float, hi: float, n: int) -> "Grid":
        return cls((lo,), (hi,), (n,))

    @classmethod
    def plane(cls, lo: Sequence[float], hi: Sequence[float], n: Sequence[int]) -> "Grid":
        return cls(tuple(lo), tuple(hi), tuple(n))

    @property
    def dims(self) -> int:
        return len(self.n_points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n_points

    @cached_property
    def spacing(self) -> tuple[float, ...]:
        return tuple((h - l) / n for l, h, n in
                     zip(self.extent_min, self.extent_max, self.n_points))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def length(self) -> tuple[float, ...]:
        return tuple(h - l for l, h in zip(self.extent_min, self.extent_max))

    def axes(self) -> list[np.ndarray]:
        return [l + d * np.arange(n) for l, d, n in
                zip(self.extent_min, self.spacing, self.n_points)]

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def wavenumbers(self) -> list[np.ndarray]:
        return [2.0 * np.pi * np.fft.fftfreq(n, d) for n, d in zip(self.n_points, self.spacing)]

    def k_mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.wavenumbers(), indexing="ij")

    def k_squared(self, real: bool = False) -> np.ndarray:
        """|k|^2 on the full FFT layout, or the rfft layout if ``real``."""
        ks = self.wavenumbers()
        if real:
            ks = ks[:-1] + [2.0 * np.pi * np.fft.rfftfreq(self.n_points[-1], self.spacing[-1])]
        km = np.meshgrid(*ks, indexing="ij")
        return sum(k * k for k in km)

    @cached_property
    def origin(self) -> np.ndarray:
        return np.array(self.extent_min)

    @cached_property
    def spacing_array(self) -> np.ndarray:
        return np.array(self.spacing)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dims)
        if self.dims == 1:
            return (x[:, 0] >= self.extent_min[0]) & (x[:, 0] < self.extent_max[0])
        ok = np.ones(x.shape[0], dtype=bool)
        for a in range(self.dims):
            ok &= (x[:, a] >= self.extent_min[a]) & (x[:, a] < self.extent_max[a])
        return ok


# ---------------------------------------------------------------- potentials

@dataclass(frozen=True)
class PotentialSpec:
    """Static potential. ``kind`` is one of free, harmonic, gaussian_barrier,
    eckart, double_slit_mask, sampled. Barrier-type variants act on the first
    coordinate."""

    kind: str
    params: dict = field(default_factory=dict)

    @classmethod
    def free(cls) -> "PotentialSpec":
        return cls("free", {})

    @classmethod
    def harmonic(cls, omega: float, center=0.0, mass: float = 1.0) -> "PotentialSpec":
        return cls("harmonic", {"omega": float(omega), "center": center, "mass": float(mass)})

    @classmethod
    def gaussian_barrier(cls, height: float, width: float, center: float = 0.0) -> "PotentialSpec":
        if not math.isfinite(height):
            raise ValueError("barrier height must be finite")
        if width <= 0:
            raise ValueError("barrier width must be positive")
        return cls("gaussian_barrier", {"height": float(height), "width": float(width),
                                        "center": float(center)})

    @classmethod
    def eckart(cls, height: float, width: float, center: float = 0.0) -> "PotentialSpec":
        if not math.isfinite(height):
            raise ValueError("barrier height must be finite")
        if width <= 0:
            raise ValueError("barrier width must be positive")
        return cls("eckart", {"height": float(height), "width": float(width),
                              "center": float(center)})

    @classmethod
    def double_slit_mask(cls, wall_position: float, slit_centers: Sequence[float],
                         slit_widths: Sequence[float], wall_height: float,
                         wall_thickness: float = 0.5) -> "PotentialSpec":
        if not math.isfinite(wall_height):
            raise ValueError("wall height must be finite")
        if len(slit_centers) != len(slit_widths):
            raise ValueError("one width per slit")
        return cls("double_slit_mask", {
            "wall_position": float(wall_position),
            "slit_centers": tuple(float(c) for c in slit_centers),
            "slit_widths": tuple(float(w) for w in slit_widths),
            "wall_height": float(wall_height),
            "wall_thickness": float(wall_thickness)})

    @classmethod
    def sampled(cls, array: np.ndarray, grid: Grid) -> "PotentialSpec":
        arr = np.asarray(array, dtype=float)
        if arr.shape != grid.shape:
            raise ValueError(f"sampled potential shape {arr.shape} != grid {grid.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("sampled potential must be finite")
        return cls("sampled", {"array": arr, "grid": grid})

    def __hash__(self):
        return hash((self.kind, tuple(sorted((k, str(v)) for k, v in self.params.items()))))

    # evaluation on coordinates -------------------------------------------------
    def value(self, *coords) -> np.ndarray:
        p = self.params
        x = np.asarray(coords[0], dtype=float)
        if self.kind == "free":
            return np.zeros(np.broadcast(*coords).shape) if len(coords) > 1 else np.zeros_like(x)
        if self.kind == "harmonic":
            c = np.broadcast_to(np.atleast_1d(np.asarray(p["center"], dtype=float)), (len(coords),))
            r2 = sum((np.asarray(q, dtype=float) - c[a]) ** 2 for a, q in enumerate(coords))
            return 0.5 * p["mass"] * p["omega"] ** 2 * r2
        if self.kind == "gaussian_barrier":
            u = (x - p["center"]) / p["width"]
            out = p["height"] * np.exp(-0.5 * u * u)
            return np.broadcast_to(out, np.broadcast(*coords).shape).copy() if len(coords) > 1 else out
        if self.kind == "eckart":
            u = (x - p["center"]) / p["width"]
            out = p["height"] / np.cosh(u) ** 2
            return np.broadcast_to(out, np.broadcast(*coords).shape).copy() if len(coords) > 1 else out
        if self.kind == "double_slit_mask":
            if len(coords) != 2:
                raise ValueError("double_slit_mask needs two coordinates")
            y = np.asarray(coords[1], dtype=float)
            in_wall = np.abs(x - p["wall_position"]) <= 0.5 * p["wall_thickness"]
            open_ = np.zeros(np.broadcast(x, y).shape, dtype=bool)
            for c, w in zip(p["slit_centers"], p["slit_widths"]):
                open_ |= np.abs(y - c) < 0.5 * w
            return np.where(in_wall & ~open_, p["wall_height"], 0.0)
        if self.kind == "sampled":
            g: Grid = p["grid"]
            if g.dims != 1:
                raise NotImplementedError("off-grid sampling of a 2D sampled potential")
            return np.interp(x, g.axes()[0], p["array"], period=g.length[0])
        raise ValueError(f"unknown potential kind {self.kind!r}")

    def on_grid(self, grid: Grid) -> np.ndarray:
        if self.kind == "sampled":
            if self.params["grid"] != grid:
                raise GridMismatchError("sampled potential lives on a different grid")
            return np.array(self.params["array"], dtype=float)
        return np.asarray(self.value(*grid.mesh()), dtype=float)

    def gradient(self, *coords) -> list[np.ndarray]:
        """Analytic gradient (barrier variants depend on x only)."""
        p = self.params
        x = np.asarray(coords[0], dtype=float)
        zeros = [np.zeros(np.broadcast(*coords).shape) for _ in coords]
        if self.kind == "free":
            return zeros
        if self.kind == "harmonic":
            cs = np.broadcast_to(np.atleast_1d(np.asarray(p["center"], dtype=float)), (len(coords),))
            k = p["mass"] * p["omega"] ** 2
            return [k * (np.asarray(q, dtype=float) - cs[a]) + zeros[a] for a, q in enumerate(coords)]
        if self.kind == "gaussian_barrier":
            u = (x - p["center"]) / p["width"]
            zeros[0] = zeros[0] - p["height"] * u / p["width"] * np.exp(-0.5 * u * u)
            return zeros
        if self.kind == "eckart":
            u = (x - p["center"]) / p["width"]
            zeros[0] = zeros[0] - 2.0 * p["height"] / p["width"] * np.tanh(u) / np.cosh(u) ** 2
            return zeros
        if self.kind == "sampled" and len(coords) == 1:
            g: Grid = p["grid"]
            dv = spectral_derivative(p["array"], g, 0)
            return [np.interp(x, g.axes()[0], dv, period=g.length[0])]
        raise NotImplementedError(f"no analytic gradient for {self.kind}")

    def curvature(self, x) -> np.ndarray:
        """d2V/dx2 along the first coordinate (1D dynamics)."""
        p = self.params
        x = np.asarray(x, dtype=float)
        if self.kind == "free":
            return np.zeros_like(x)
        if self.kind == "harmonic":
            return np.full_like(x, p["mass"] * p["omega"] ** 2)
        if self.kind == "gaussian_barrier":
            u = (x - p["center"]) / p["width"]
            return p["height"] * (u * u - 1.0) / p["width"] ** 2 * np.exp(-0.5 * u * u)
        if self.kind == "eckart":
            u = (x - p["center"]) / p["width"]
            t = np.tanh(u)
            return 2.0 * p["height"] / p["width"] ** 2 * (3.0 * t * t - 1.0) / np.cosh(u) ** 2
        if self.kind == "sampled":
            g: Grid = p["grid"]
            d2 = spectral_derivative(spectral_derivative(p["array"], g, 0), g, 0)
            return np.interp(x, g.axes()[0], d2, period=g.length[0])
        raise NotImplementedError(f"no curvature for {self.kind}")

    def length_scale(self, x: float, reach: float = 0.0) -> float:
        """Variation length of the non-quadratic part of V felt within ``reach`` of x.

        Free and harmonic potentials are exactly quadratic, so the scale is
        infinite. Barrier features count only when their center lies within
        ``reach`` plus four of their own widths.
        """
        p = self.params
        if self.kind in ("free", "harmonic"):
            return math.inf
        if self.kind in ("gaussian_barrier", "eckart"):
            if abs(float(x) - p["center"]) <= reach + 4.0 * p["width"]:
                return p["width"]
            return math.inf
        if self.kind == "double_slit_mask":
            return min(min(p["slit_widths"]), p["wall_thickness"])
        if self.kind == "sampled":
            # smallest sqrt(|V''| / |V''''|) among nodes within reach where V varies
            g: Grid = p["grid"]
            arr = p["array"]
            if g.dims != 1:
                raise NotImplementedError("length scale for 2D sampled potentials")
            q = g.axes()[0]
            sel = np.abs(q - x) <= reach
            d2 = spectral_derivative(spectral_derivative(arr, g, 0), g, 0)
            d4 = spectral_derivative(spectral_derivative(d2, g, 0), g, 0)
            scale = np.max(np.abs(arr)) if np.any(arr) else 0.0
            live = sel & (np.abs(d4) > 1e-8 * max(scale, 1e-300))
            if not np.any(live):
                return math.inf
            return float(np.min(np.sqrt(np.abs(d2[live]) / np.abs(d4[live]) + 1e-300)))
        raise ValueError(f"unknown potential kind {self.kind!r}")


@dataclass(frozen=True)
class AbsorbingMask:
    """cos^2 ramp applied after each step inside a boundary layer.

    Per step the amplitude in the layer is multiplied by cos(pi s / 2)**(2*eta)
    with s in [0, 1] the depth into the layer and eta = strength*dt.
    """

    width: float
    strength: float = 1.0

    def factor(self, grid: Grid, dt: float) -> np.ndarray:
        eta = self.strength * abs(dt)
        out = np.ones(grid.shape)
        for a, ax in enumerate(grid.axes()):
            lo, hi = grid.extent_min[a], grid.extent_max[a]
            depth = np.maximum(np.maximum(lo + self.width - ax, ax - (hi - self.width)), 0.0)
            s = np.clip(depth / self.width, 0.0, 1.0)
            f = np.cos(0.5 * np.pi * s) ** (2.0 * eta)
            shape = [1] * grid.dims
            shape[a] = -1
            out = out * f.reshape(shape)
        return out


# ---------------------------------------------------------------- field type

@dataclass(frozen=True)
class SchrodingerField:
    grid: Grid
    phi_r: np.ndarray
    phi_c: np.ndarray
    time: float = 0.0
    hbar: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        pr = np.array(self.phi_r, dtype=np.float64)
        pc = np.array(self.phi_c, dtype=np.float64)
        if pr.shape != self.grid.shape or pc.shape != self.grid.shape:
            raise GridMismatchError(f"field arrays {pr.shape}/{pc.shape} vs grid {self.grid.shape}")
        if self.hbar <= 0 or self.mass <= 0:
            raise ValueError("hbar and mass must be positive")
        pr.setflags(write=False)
        pc.setflags(write=False)
        object.__setattr__(self, "phi_r", pr)
        object.__setattr__(self, "phi_c", pc)

    @classmethod
    def from_psi(cls, grid: Grid, psi: np.ndarray, time: float = 0.0,
                 hbar: float = 1.0, mass: float = 1.0) -> "SchrodingerField":
        psi = np.asarray(psi)
        return cls(grid, psi.real, psi.imag if np.iscomplexobj(psi) else np.zeros(psi.shape),
                   time, hbar, mass)

    @property
    def psi(self) -> np.ndarray:
        return self.phi_r + 1j * self.phi_c

    def norm(self) -> float:
        return float(np.sum(self.phi_r ** 2 + self.phi_c ** 2) * self.grid.cell_volume)

    def normalize(self) -> "SchrodingerField":
        n = self.norm()
        if not (n > 0 and math.isfinite(n)):
            raise ValueError("cannot normalize a zero or non-finite field")
        s = 1.0 / math.sqrt(n)
        return replace(self, phi_r=self.phi_r * s, phi_c=self.phi_c * s)

    def with_components(self, phi_r, phi_c, time: float) -> "SchrodingerField":
        return replace(self, phi_r=phi_r, phi_c=phi_c, time=time)


def init_coherent_state(grid: Grid, q0, p0, gamma, hbar: float = 1.0, mass: float = 1.0,
                        tail_tol: float = 1e-12) -> SchrodingerField:
    """Gaussian exp(-gamma (q-q0)^2 + i p0 (q-q0)/hbar), normalized on the grid.

    For 2D grids q0, p0 and gamma may be given per axis.
    """
    d = grid.dims
    q0 = np.broadcast_to(np.asarray(q0, dtype=float), (d,))
    p0 = np.broadcast_to(np.asarray(p0, dtype=float), (d,))
    gam = np.broadcast_to(np.asarray(gamma, dtype=complex), (d,))
    if np.any(gam.real <= 0):
        raise NonPositiveWidthError("Re(gamma) must be positive")
    psi = np.ones(grid.shape, dtype=complex)
    for a, x in enumerate(grid.mesh()):
        dx = x - q0[a]
        psi = psi * np.exp(-gam[a] * dx * dx + 1j * p0[a] * dx / hbar)
    rho = np.abs(psi) ** 2
    edge = _boundary_max(rho)
    if edge > tail_tol * rho.max():
        raise PacketEscapesGridError(f"boundary density ratio {edge / rho.max():.2e} exceeds {tail_tol:g}")
    f = SchrodingerField.from_psi(grid, psi, 0.0, hbar, mass)
    if np.all(p0 == 0) and np.all(gam.imag == 0):
        f = replace(f, phi_c=np.zeros(grid.shape))
    return f.normalize()


def _boundary_max(a: np.ndarray) -> float:
    m = 0.0
    for ax in range(a.ndim):
        m = max(m, float(np.max(np.take(a, [0, -1], axis=ax))))
    return m


# ---------------------------------------------------------------- propagation

class SplitStepPropagator:
    """Strang splitting exp(-iK dt/2) exp(-iV dt) exp(-iK dt/2) on a periodic grid.

    Consecutive half kinetic factors are fused into one full factor unless the
    state is needed between steps. Holds scratch data for one (grid, V, dt);
    not shareable while stepping.
    """

    def __init__(self, grid: Grid, v: np.ndarray, dt: float, hbar: float = 1.0,
                 mass: float = 1.0, absorber: AbsorbingMask | None = None,
                 check_cfl: bool = True):
        if check_cfl:
            cfl = hbar * abs(dt) / (mass * min(grid.spacing) ** 2)
            if cfl >= 10.0:
                raise ValueError(f"hbar*dt/(m*dx^2) = {cfl:.3g} >= 10")
        self.grid = grid
        self.dt = float(dt)
        self.hbar = hbar
        self.mass = mass
        v = np.asarray(v, dtype=float)
        k2 = grid.k_squared()
        self.kin = {1: np.exp(-1j * (hbar * k2 * dt / (4.0 * mass))),
                    2: np.exp(-1j * (hbar * k2 * dt / (2.0 * mass)))}
        # the real form rotates each Fourier mode by exp(J theta) with the
        # cos/sin read off the same complex exponentials
        self.krot = {h: (e.real.copy(), -e.imag) for h, e in self.kin.items()}
        beta = v * dt / hbar
        self.pot = np.exp(-1j * beta)
        self.vc = self.pot.real.copy()
        self.vs = -self.pot.imag
        self.mask = absorber.factor(grid, dt) if absorber is not None else None
        self._axes = tuple(range(grid.dims))

    # complex form
    def kick_complex(self, psi, halves: int = 1):
        ax, w = self._axes, FFT_WORKERS
        return sfft.ifftn(sfft.fftn(psi, axes=ax, workers=w) * self.kin[halves], axes=ax, workers=w)

    def potential_complex(self, psi):
        return psi * self.pot

    def step_complex(self, psi: np.ndarray) -> np.ndarray:
        psi = self.kick_complex(self.potential_complex(self.kick_complex(psi)))
        return psi * self.mask if self.mask is not None else psi

    # real-vector form
    def kick_real(self, pr, pc, halves: int = 1):
        ax, w = self._axes, FFT_WORKERS
        c, s = self.krot[halves]
        fr = sfft.fftn(pr, axes=ax, workers=w)
        fc = sfft.fftn(pc, axes=ax, workers=w)
        nr = sfft.ifftn(c * fr + s * fc, axes=ax, workers=w).real
        nc = sfft.ifftn(c * fc - s * fr, axes=ax, workers=w).real
        return nr, nc

    def potential_real(self, pr, pc):
        return self.vc * pr + self.vs * pc, self.vc * pc - self.vs * pr

    def step_real(self, pr: np.ndarray, pc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pr, pc = self.kick_real(*self.potential_real(*self.kick_real(pr, pc)))
        if self.mask is not None:
            pr, pc = pr * self.mask, pc * self.mask
        return pr, pc


def _check_norm(n_old: float, n_new: float, absorbing: bool, step: int) -> None:
    if not math.isfinite(n_new):
        raise InstabilityError(f"non-finite norm at step {step}")
    drift = (n_new - n_old) / n_old
    if (drift > 1e-8) or (not absorbing and abs(drift) > 1e-8):
        raise InstabilityError(f"norm drift {drift:.3e} at step {step} exceeds 1e-8")


def _potential_array(potential, grid: Grid) -> np.ndarray:
    if isinstance(potential, PotentialSpec):
        return potential.on_grid(grid)
    arr = np.asarray(potential, dtype=float)
    if arr.shape != grid.shape:
        raise GridMismatchError("potential array does not match grid")
    return arr


def propagate_complex(field: SchrodingerField, potential, dt: float, n_steps: int,
                      absorber: AbsorbingMask | None = None,
                      callback: Callable[[SchrodingerField, int], None] | None = None,
                      every: int = 1) -> SchrodingerField:
    """Advance ``n_steps`` Strang steps of size dt on psi = phi_r + i phi_c.

    ``callback(field, k)`` is called after every ``every``-th step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    return _propagate(field, potential, dt, n_steps, absorber, callback, every, real=False)


def propagate_real_vector(field: SchrodingerField, potential, dt: float, n_steps: int,
                          absorber: AbsorbingMask | None = None,
                          callback: Callable[[SchrodingerField, int], None] | None = None,
                          every: int = 1) -> SchrodingerField:
    """Same scheme as :func:`propagate_complex` written as real updates of (phi_r, phi_c)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return _propagate(field, potential, dt, n_steps, absorber, callback, every, real=True)


def _propagate(field, potential, dt, n_steps, absorber, callback, every, real,
               check_cfl=True):
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    if n_steps == 0:
        return field
    g = field.grid
    prop = SplitStepPropagator(g, _potential_array(potential, g), dt, field.hbar,
                               field.mass, absorber, check_cfl=check_cfl)
    dv = g.cell_volume
    t0 = field.time
    fuse = absorber is None
    if real:
        st = (np.array(field.phi_r), np.array(field.phi_c))
        kick = lambda s, h: prop.kick_real(*s, halves=h)
        pot = lambda s: prop.potential_real(*s)
        mask = lambda s: (s[0] * prop.mask, s[1] * prop.mask)
        norm = lambda s: float(np.sum(s[0] * s[0] + s[1] * s[1])) * dv
        parts = lambda s: s
    else:
        st = field.psi
        kick = lambda s, h: prop.kick_complex(s, halves=h)
        pot = prop.potential_complex
        mask = lambda s: s * prop.mask
        norm = lambda s: float(np.sum(s.real ** 2 + s.imag ** 2)) * dv
        parts = lambda s: (s.real, s.imag)
    n_old = norm(st)
    st = kick(st, 1)
    for k in range(1, n_steps + 1):
        st = pot(st)
        wanted = callback is not None and (k % every == 0 or k == n_steps)
        if k == n_steps or wanted or not fuse:
            st = kick(st, 1)
            if not fuse:
                st = mask(st)
            n_new = norm(st)
            if wanted:
                callback(field.with_components(*parts(st), t0 + k * dt), k)
            if k < n_steps:
                st = kick(st, 1)
        else:
            st = kick(st, 2)
            n_new = norm(st)
        _check_norm(n_old, n_new, absorber is not None, k)
        n_old = n_new
    return field.with_components(*parts(st), t0 + n_steps * dt)


def schrodinger_rhs_real(field: SchrodingerField, potential) -> np.ndarray:
    """(1/hbar) J H (phi_r, phi_c), stacked as shape (2, *grid)."""
    v = _potential_array(potential, field.grid)
    h = np.stack([apply_hamiltonian(field.phi_r, field.grid, v, field.hbar, field.mass).real,
                  apply_hamiltonian(field.phi_c, field.grid, v, field.hbar, field.mass).real])
    return np.tensordot(J, h, axes=1) / field.hbar


# ---------------------------------------------------------------- derivatives

def spectral_derivative(f: np.ndarray, grid: Grid, axis: int, order: int = 1) -> np.ndarray:
    k = grid.wavenumbers()[axis]
    shape = [1] * grid.dims
    shape[axis] = -1
    mult = (1j * k.reshape(shape)) ** order
    n = grid.n_points[axis]
    if n % 2 == 0 and order % 2 == 1:
        # drop the unpaired Nyquist mode for odd derivatives
        nyq = [slice(None)] * grid.dims
        nyq[axis] = n // 2
        mult = np.array(np.broadcast_to(mult, mult.shape))
        mult[tuple(nyq)] = 0.0
    out = sfft.ifft(sfft.fft(f, axis=axis, workers=FFT_WORKERS) * mult, axis=axis,
                    workers=FFT_WORKERS)
    return out.real if np.isrealobj(f) else out


def fd4_derivative(f: np.ndarray, spacing: float, axis: int = 0) -> np.ndarray:
    """4th-order centered difference; one-sided 4th-order stencils at the ends."""
    f = np.asarray(f)
    out = np.empty_like(f, dtype=np.result_type(f, float))
    fm = np.moveaxis(f, axis, 0)
    om = np.moveaxis(out, axis, 0)
    h = spacing
    om[2:-2] = (fm[:-4] - 8.0 * fm[1:-3] + 8.0 * fm[3:-1] - fm[4:]) / (12.0 * h)
    om[0] = (-25 * fm[0] + 48 * fm[1] - 36 * fm[2] + 16 * fm[3] - 3 * fm[4]) / (12.0 * h)
    om[1] = (-3 * fm[0] - 10 * fm[1] + 18 * fm[2] - 6 * fm[3] + fm[4]) / (12.0 * h)
    om[-1] = (25 * fm[-1] - 48 * fm[-2] + 36 * fm[-3] - 16 * fm[-4] + 3 * fm[-5]) / (12.0 * h)
    om[-2] = (3 * fm[-1] + 10 * fm[-2] - 18 * fm[-3] + 6 * fm[-4] - fm[-5]) / (12.0 * h)
    return out


def _grad(f: np.ndarray, grid: Grid, method: str) -> list[np.ndarray]:
    if method == "spectral":
        return [spectral_derivative(f, grid, a) for a in range(grid.dims)]
    if method == "fd4":
        return [fd4_derivative(f, grid.spacing[a], a) for a in range(grid.dims)]
    raise ValueError(f"unknown derivative method {method!r}")


def laplacian(f: np.ndarray, grid: Grid) -> np.ndarray:
    ax = tuple(range(grid.dims))
    out = sfft.ifftn(-grid.k_squared() * sfft.fftn(f, axes=ax, workers=FFT_WORKERS),
                     axes=ax, workers=FFT_WORKERS)
    return out.real if np.isrealobj(f) else out


def apply_hamiltonian(psi: np.ndarray, grid: Grid, v: np.ndarray, hbar: float,
                      mass: float) -> np.ndarray:
    return -0.5 * hbar ** 2 / mass * laplacian(psi, grid) + v * psi


# ---------------------------------------------------------------- observables

def density(field: SchrodingerField) -> np.ndarray:
    return field.phi_r ** 2 + field.phi_c ** 2


def flux(field: SchrodingerField, method: str = "spectral") -> np.ndarray:
    """j = (hbar/m)(phi_r grad phi_c - phi_c grad phi_r), shape (dims, *grid)."""
    gr = _grad(field.phi_r, field.grid, method)
    gc = _grad(field.phi_c, field.grid, method)
    c = field.hbar / field.mass
    return np.stack([c * (field.phi_r * b - field.phi_c * a) for a, b in zip(gr, gc)])


def low_density_mask(field: SchrodingerField, floor: float = RHO_FLOOR) -> np.ndarray:
    rho = density(field)
    return rho < floor * rho.max()


def local_velocity(field: SchrodingerField, method: str = "spectral",
                   floor: float = RHO_FLOOR) -> np.ma.MaskedArray:
    """v = j / rho, masked where rho < floor * max(rho)."""
    rho = density(field)
    m = rho < floor * rho.max()
    j = flux(field, method)
    safe = np.where(m, 1.0, rho)
    v = j / safe
    v[:, m] = 0.0
    return np.ma.MaskedArray(v, mask=np.broadcast_to(m, v.shape).copy())


def local_energy(field: SchrodingerField, potential, floor: float = RHO_FLOOR) -> np.ma.MaskedArray:
    """Re(H psi / psi), masked where rho < floor * max(rho)."""
    g = field.grid
    v = _potential_array(potential, g)
    psi = field.psi
    rho = density(field)
    m = rho < floor * rho.max()
    hpsi = apply_hamiltonian(psi, g, v, field.hbar, field.mass)
    # Re(H psi / psi) = Re(conj(psi) H psi) / rho
    e = (psi.real * hpsi.real + psi.imag * hpsi.imag) / np.where(m, 1.0, rho)
    e[m] = 0.0
    return np.ma.MaskedArray(e, mask=m)


def position_mean(field: SchrodingerField) -> np.ndarray:
    rho = density(field)
    tot = rho.sum()
    return np.array([float(np.sum(rho * x) / tot) for x in field.grid.mesh()])


def momentum_mean(field: SchrodingerField) -> np.ndarray:
    ax = tuple(range(field.grid.dims))
    ph = sfft.fftn(field.psi, axes=ax, workers=FFT_WORKERS)
    w = np.abs(ph) ** 2
    tot = w.sum()
    return np.array([float(field.hbar * np.sum(w * k) / tot) for k in field.grid.k_mesh()])


def energy(field: SchrodingerField, potential) -> float:
    """<psi|H|psi> / <psi|psi> with spectral kinetic energy."""
    g = field.grid
    v = _potential_array(potential, g)
    ax = tuple(range(g.dims))
    ph = sfft.fftn(field.psi, axes=ax, workers=FFT_WORKERS)
    w = np.abs(ph) ** 2
    kin = 0.5 * field.hbar ** 2 / field.mass * float(np.sum(w * g.k_squared()) / np.sum(w))
    rho = density(field)
    return kin + float(np.sum(rho * v) / np.sum(rho))


def ehrenfest_rates(field: SchrodingerField, potential, dt: float = 1e-3):
    """Return (d<q>/dt, d<p>/dt, -<grad V>).

    d<q>/dt is <p>/m; d<p>/dt is a centered difference of <p> over one step
    forward and one step backward in time, so it agrees with -<grad V> to
    O(dt^2).
    """
    g = field.grid
    fwd = _propagate(field, potential, dt, 1, None, None, 1, real=False, check_cfl=False)
    bwd = _propagate(field, potential, -dt, 1, None, None, 1, real=False, check_cfl=False)
    dp = (momentum_mean(fwd) - momentum_mean(bwd)) / (2.0 * dt)
    dq = momentum_mean(field) / field.mass
    rho = density(field)
    if isinstance(potential, PotentialSpec) and potential.kind not in ("sampled", "double_slit_mask"):
        grads = potential.gradient(*g.mesh())
    else:
        grads = _grad(_potential_array(potential, g), g, "spectral")
    force = -np.array([float(np.sum(rho * gv) / np.sum(rho)) for gv in grads])
    return dq, dp, force


def continuity_residual(field_t: SchrodingerField, field_t_plus_dt: SchrodingerField,
                        margin: int = 0) -> float:
    """L2 norm of (rho1 - rho0)/dt + div (j0 + j1)/2 over the interior."""
    if field_t.grid != field_t_plus_dt.grid:
        raise GridMismatchError("fields live on different grids")
    dt = field_t_plus_dt.time - field_t.time
    if not dt > 0:
        raise ValueError("second field must be later than the first")
    g = field_t.grid
    j = 0.5 * (flux(field_t) + flux(field_t_plus_dt))
    div = sum(spectral_derivative(j[a], g, a) for a in range(g.dims))
    r = (density(field_t_plus_dt) - density(field_t)) / dt + div
    if margin:
        sl = tuple(slice(margin, n - margin) for n in g.shape)
        r = r[sl]
    return float(math.sqrt(np.sum(r * r) * g.cell_volume))


def two_packet_flux_decomposition(R1, S1, R2, S2, hbar: float, mass: float,
                                  spacing: float | None = None, gradients=None):
    """Split m*j of psi = R1 e^{iS1/hbar} + R2 e^{iS2/hbar} into three terms.

    Returns (direct, sine cross, cosine cross); their sum equals m times the
    flux of the superposition. Gradients default to 4th-order differences on a
    1D grid of the given spacing; pass ``gradients=(dR1, dS1, dR2, dS2)`` to
    supply them directly.
    """
    R1, S1, R2, S2 = (np.asarray(a, dtype=float) for a in (R1, S1, R2, S2))
    if gradients is None:
        if spacing is None:
            raise ValueError("need spacing or explicit gradients")
        dR1, dS1, dR2, dS2 = (fd4_derivative(a, spacing) for a in (R1, S1, R2, S2))
    else:
        dR1, dS1, dR2, dS2 = (np.asarray(a, dtype=float) for a in gradients)
    direct = R1 ** 2 * dS1 + R2 ** 2 * dS2
    phase = (S1 - S2) / hbar
    sine = hbar * (R2 * dR1 - R1 * dR2) * np.sin(phase)
    cosine = R1 * R2 * (dS1 + dS2) * np.cos(phase)
    return direct, sine, cosine


def skew_form(phi_r: np.ndarray, phi_c: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Pointwise (phi_r, phi_c) . J f (phi_r, phi_c); zero by skew symmetry of J."""
    # grouping the common product first makes the cancellation exact in floating point
    return (J[0, 1] + J[1, 0]) * (f * phi_r * phi_c)


# ---------------------------------------------------------------- records and I/O

@dataclass(frozen=True)
class ObservableRecord:
    time: float
    norm: float
    energy: float
    position_mean: np.ndarray
    momentum_mean: np.ndarray
    continuity_residual: float


def observe(field: SchrodingerField, potential, previous: SchrodingerField | None = None) -> ObservableRecord:
    res = continuity_residual(previous, field) if previous is not None else 0.0
    return ObservableRecord(field.time, field.norm(), energy(field, potential),
                            position_mean(field), momentum_mean(field), res)


OBSERVABLE_HEADER = ["time", "norm", "energy", "q_mean", "p_mean", "continuity_residual"]


def _fmt_vec(v) -> str:
    v = np.atleast_1d(v)
    return ";".join(repr(float(x)) for x in v)


def write_observables_csv(path, records: Iterable[ObservableRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBSERVABLE_HEADER)
        for r in records:
            w.writerow([repr(float(r.time)), repr(float(r.norm)), repr(float(r.energy)),
                        _fmt_vec(r.position_mean), _fmt_vec(r.momentum_mean),
                        repr(float(r.continuity_residual))])


OWF_MAGIC = b"OWF1"


def write_owf1(path, field: SchrodingerField) -> None:
    g = field.grid
    head = OWF_MAGIC + struct.pack("<I", g.dims)
    head += struct.pack(f"<{g.dims}I", *g.n_points)
    ext = []
    for a in range(g.dims):
        ext += [g.extent_min[a], g.extent_max[a]]
    head += struct.pack(f"<{2 * g.dims}d", *ext)
    head += struct.pack("<3d", field.time, field.hbar, field.mass)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(field.phi_r, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(field.phi_c, dtype="<f8").tobytes())


def read_owf1(path) -> SchrodingerField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != OWF_MAGIC:
        raise ValueError("not an OWF1 file")
    off = 4
    (dims,) = struct.unpack_from("<I", raw, off)
    off += 4
    n = struct.unpack_from(f"<{dims}I", raw, off)
    off += 4 * dims
    ext = struct.unpack_from(f"<{2 * dims}d", raw, off)
    off += 16 * dims
    t, hbar, mass = struct.unpack_from("<3d", raw, off)
    off += 24
    size = int(np.prod(n))
    pr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(n)
    pc = np.frombuffer(raw, dtype="<f8", count=size, offset=off + 8 * size).reshape(n)
    grid = Grid(tuple(ext[0::2]), tuple(ext[1::2]), tuple(n))
    return SchrodingerField(grid, pr.astype(np.float64), pc.astype(np.float64), t, hbar, mass)
