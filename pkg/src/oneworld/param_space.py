"""Variational dynamics of a trial wavefunction psi(q; u, v) in parameter space.

Two flows act on the paired parameters (u_i, v_i):

* the energy flow F, Hamilton's equations for E(u, v) = <psi|H|psi>;
* the flux flow G, driven by the parameter-space fluxes
  j_u = -hbar Im<psi|d psi/du>, j_v = -hbar Im<psi|d psi/dv>.

G is generated by K = E + W, where the flux correction
W = E_v . (j_u - v) - E_u . j_v vanishes identically for a dynamical pair
(j_u = v, j_v = 0). For such families G and F coincide.

All family functionals accept batches: ``u`` and ``v`` have shape (..., n_pairs).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core_fields import PotentialSpec
from .errors import (GradientValidationError, InstabilityError,
                     SingularGeometryError)

GEOMETRY_COND_MAX = 1e12
QUAD_POINTS = 2048

# fourth-order symmetric composition
_CBRT2 = 2.0 ** (1.0 / 3.0)
_Y1 = 1.0 / (2.0 - _CBRT2)
_Y0 = -_CBRT2 / (2.0 - _CBRT2)


@dataclass(frozen=True)
class ParameterState:
    u: np.ndarray
    v: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, dtype=float))
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if u.shape != v.shape:
            raise ValueError(f"u and v must pair up: {u.shape} vs {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("parameter state must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.u, self.v], axis=-1)


# ---------------------------------------------------------------------------
# trial families
# ---------------------------------------------------------------------------

class TrialFamily:
    """Base class. Subclasses provide energy, grad, fluxes and psi."""

    n_pairs: int = 1
    separable: bool = False

    def __init__(self, potential: PotentialSpec, hbar: float = 1.0, mass: float = 1.0):
        self.potential = potential
        self.hbar = float(hbar)
        self.mass = float(mass)

    def energy(self, u, v) -> np.ndarray:
        raise NotImplementedError

    def grad(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def fluxes(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def psi(self, u, v, x) -> np.ndarray:
        """Normalized wavefunction of a single state on the points x."""
        raise NotImplementedError

    def support(self, u, v) -> tuple[float, float]:
        raise NotImplementedError

    def quadrature_grid(self, u, v, n: int = QUAD_POINTS) -> np.ndarray:
        lo, hi = self.support(u, v)
        return np.linspace(lo, hi, n, endpoint=False)

    # derived ------------------------------------------------------------------
    def flux_correction(self, u, v) -> np.ndarray:
        """W = E_v . (j_u - v) - E_u . j_v; zero for dynamical pairs."""
        hu, hv = self.grad(u, v)
        ju, jv = self.fluxes(u, v)
        return np.sum(hv * (ju - v) - hu * jv, axis=-1)

    def flux_functional(self, u, v) -> np.ndarray:
        """i hbar <psi|psi_dot> with the energy flow substituted: E_v . j_u - E_u . j_v."""
        hu, hv = self.grad(u, v)
        ju, jv = self.fluxes(u, v)
        return np.sum(hv * ju - hu * jv, axis=-1)


class SkewedGaussian(TrialFamily):
    """psi = N (1 + c x) exp(-alpha x^2) exp(i p0 x / hbar), x = q - q0.

    Parameters u = (q0,), v = (p0,). The shape constants alpha and c are
    fixed. Every moment is a polynomial times exp(-2 alpha x^2), so
    Gauss-Hermite quadrature is exact for free and harmonic potentials.
    """

    n_pairs = 1
    separable = True

    def __init__(self, potential: PotentialSpec, alpha: float, c: float = 0.0,
                 hbar: float = 1.0, mass: float = 1.0, n_nodes: int = 96):
        super().__init__(potential, hbar, mass)
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.alpha = float(alpha)
        self.c = float(c)
        y, w = np.polynomial.hermite.hermgauss(n_nodes)
        x = y / math.sqrt(2.0 * alpha)
        pref = (1.0 + self.c * x) ** 2
        self._x = x
        self._rho = w * pref / np.sum(w * pref)
        self.mu = float(np.sum(self._rho * x))
        dr = self.c - 2.0 * self.alpha * x * (1.0 + self.c * x)
        self.shape_kinetic = float(np.sum(w * dr * dr) / np.sum(w * pref))
        self.m2 = float(np.sum(self._rho * x * x))
        self._norm = 1.0 / math.sqrt(math.sqrt(math.pi / (2.0 * alpha))
                                     * (1.0 + self.c ** 2 / (4.0 * alpha)))
        # closed-form moments for quadratic potentials
        self._quadratic = None
        if potential.kind == "free":
            self._quadratic = (0.0, 0.0)
        elif potential.kind == "harmonic":
            pp = potential.params
            self._quadratic = (pp["mass"] * pp["omega"] ** 2, float(np.ravel(pp["center"])[0]))

    def _q(self, u):
        return np.asarray(u, dtype=float)[..., :1] + self._x

    def potential_mean(self, u) -> np.ndarray:
        if self._quadratic is not None:
            k, c0 = self._quadratic
            d = np.asarray(u, dtype=float)[..., 0] - c0
            return 0.5 * k * (d * d + 2.0 * d * self.mu + self.m2)
        return np.sum(self._rho * self.potential.value(self._q(u)), axis=-1)

    def energy(self, u, v):
        v = np.asarray(v, dtype=float)
        kin = v[..., 0] ** 2 / (2.0 * self.mass) + self.hbar ** 2 * self.shape_kinetic / (2.0 * self.mass)
        return kin + self.potential_mean(u)

    def grad(self, u, v):
        v = np.asarray(v, dtype=float)
        if self._quadratic is not None:
            k, c0 = self._quadratic
            return k * (np.asarray(u, dtype=float) - c0 + self.mu), v / self.mass
        hu = np.sum(self._rho * self.potential.gradient(self._q(u))[0], axis=-1)[..., None]
        return hu, v / self.mass

    def fluxes(self, u, v):
        v = np.asarray(v, dtype=float)
        return v.copy(), np.full_like(v, -self.mu)

    def psi(self, u, v, x):
        q0 = float(np.asarray(u).ravel()[0])
        p0 = float(np.asarray(v).ravel()[0])
        d = np.asarray(x, dtype=float) - q0
        return (self._norm * (1.0 + self.c * d) * np.exp(-self.alpha * d * d)
                * np.exp(1j * p0 * d / self.hbar))

    def support(self, u, v):
        q0 = float(np.asarray(u).ravel()[0])
        half = math.sqrt(40.0 / self.alpha)
        return q0 - half, q0 + half


class CoherentState(SkewedGaussian):
    """Fixed-width Gaussian with u = (q0,), v = (p0,): a dynamical pair."""

    def __init__(self, potential: PotentialSpec, alpha: float, hbar: float = 1.0,
                 mass: float = 1.0, n_nodes: int = 96):
        super().__init__(potential, alpha, 0.0, hbar, mass, n_nodes)
        self.mu = 0.0


class TwoGaussianSum(TrialFamily):
    """psi proportional to sqrt(w1) g1 + sqrt(w2) g2 with coherent g_i(q_i, p_i).

    u = (q1, q2), v = (w1 p1, w2 p2). With this scaling each (q_i, v_i) is a
    dynamical pair while the packets do not overlap. Functionals use uniform
    grid quadrature of QUAD_POINTS nodes.
    """

    n_pairs = 2
    separable = False

    def __init__(self, potential: PotentialSpec, alpha: float, weights=(0.5, 0.5),
                 hbar: float = 1.0, mass: float = 1.0, n_quad: int = QUAD_POINTS):
        super().__init__(potential, hbar, mass)
        self.alpha = float(alpha)
        w = np.asarray(weights, dtype=float)
        if w.shape != (2,) or np.any(w <= 0):
            raise ValueError("two positive weights required")
        self.weights = w
        self.n_quad = int(n_quad)

    def support(self, u, v):
        u = np.asarray(u, dtype=float).ravel()
        half = math.sqrt(40.0 / self.alpha)
        return float(u.min()) - half, float(u.max()) + half

    def _parts(self, u, v, x):
        u = np.asarray(u, dtype=float).ravel()
        v = np.asarray(v, dtype=float).ravel()
        p = v / self.weights
        a = self.alpha
        nrm = (2.0 * a / math.pi) ** 0.25
        d = x[None, :] - u[:, None]
        g = nrm * np.exp(-a * d * d + 1j * p[:, None] * d / self.hbar)
        k = -2.0 * a * d + 1j * p[:, None] / self.hbar
        return d, g, k

    def _state(self, u, v):
        x = self.quadrature_grid(u, v, self.n_quad)
        dx = x[1] - x[0]
        d, g, k = self._parts(u, v, x)
        sw = np.sqrt(self.weights)[:, None]
        phi = np.sum(sw * g, axis=0)
        lap = np.sum(sw * (k * k - 2.0 * self.alpha) * g, axis=0)
        hphi = -self.hbar ** 2 / (2.0 * self.mass) * lap + self.potential.value(x) * phi
        dq = sw * (-k) * g
        dv = sw * (1j * d / self.hbar) * g / self.weights[:, None]
        nn = np.sum(np.abs(phi) ** 2) * dx
        return x, dx, phi, hphi, dq, dv, nn

    def _single(self, u, v):
        x, dx, phi, hphi, dq, dv, nn = self._state(u, v)
        e = float(np.real(np.sum(np.conj(phi) * hphi)) * dx / nn)
        res = hphi - e * phi
        hu = 2.0 * np.real(np.sum(np.conj(dq) * res, axis=1)) * dx / nn
        hv = 2.0 * np.real(np.sum(np.conj(dv) * res, axis=1)) * dx / nn
        ju = -self.hbar * np.imag(np.sum(np.conj(phi) * dq, axis=1)) * dx / nn
        jv = -self.hbar * np.imag(np.sum(np.conj(phi) * dv, axis=1)) * dx / nn
        return e, hu, hv, ju, jv

    def _batched(self, u, v, pick):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        lead = u.shape[:-1]
        uf = u.reshape(-1, 2)
        vf = v.reshape(-1, 2)
        outs = [self._single(uf[i], vf[i]) for i in range(uf.shape[0])]
        return pick(outs, lead)

    def energy(self, u, v):
        return self._batched(u, v, lambda o, lead: np.array([r[0] for r in o]).reshape(lead))

    def grad(self, u, v):
        return self._batched(u, v, lambda o, lead: (
            np.array([r[1] for r in o]).reshape(lead + (2,)),
            np.array([r[2] for r in o]).reshape(lead + (2,))))

    def fluxes(self, u, v):
        return self._batched(u, v, lambda o, lead: (
            np.array([r[3] for r in o]).reshape(lead + (2,)),
            np.array([r[4] for r in o]).reshape(lead + (2,))))

    def psi(self, u, v, x):
        x = np.asarray(x, dtype=float)
        _, g, _ = self._parts(u, v, x)
        phi = np.sum(np.sqrt(self.weights)[:, None] * g, axis=0)
        xq = self.quadrature_grid(u, v, self.n_quad)
        _, gq, _ = self._parts(u, v, xq)
        phq = np.sum(np.sqrt(self.weights)[:, None] * gq, axis=0)
        nn = np.sum(np.abs(phq) ** 2) * (xq[1] - xq[0])
        return phi / math.sqrt(nn)


FAMILIES = {"coherent_state": CoherentState, "skewed_gaussian": SkewedGaussian,
            "two_gaussian_sum": TwoGaussianSum}


# ---------------------------------------------------------------------------
# checks and diagnostics
# ---------------------------------------------------------------------------

def _split(z, n):
    return z[..., :n], z[..., n:]


def _fd_gradient(fun, z: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar (batched) function of z along its last axis."""
    z = np.asarray(z, dtype=float)
    g = np.empty_like(z)
    for i in range(z.shape[-1]):
        step = h * np.maximum(1.0, np.abs(z[..., i]))
        zp = z.copy()
        zm = z.copy()
        zp[..., i] += step
        zm[..., i] -= step
        g[..., i] = (fun(zp) - fun(zm)) / (2.0 * step)
    return g


def validate_gradients(family: TrialFamily, state: ParameterState, h: float = 1e-5,
                       rtol: float = 1e-4) -> float:
    """Compare analytic energy gradients with central differences.

    Returns the largest relative mismatch; raises when it exceeds ``rtol``.
    """
    n = family.n_pairs
    hu, hv = family.grad(state.u, state.v)
    ana = np.concatenate([hu, hv])
    num = _fd_gradient(lambda z: family.energy(*_split(z, n)), state.z, h)
    scale = max(1.0, float(np.max(np.abs(num))))
    err = float(np.max(np.abs(ana - num))) / scale
    if err > rtol:
        raise GradientValidationError(f"analytic vs finite-difference gradient mismatch {err:.3e}")
    return err


def parameter_fluxes(family: TrialFamily, state: ParameterState) -> tuple[np.ndarray, np.ndarray]:
    return family.fluxes(state.u, state.v)


def parameter_fluxes_numeric(family: TrialFamily, state: ParameterState,
                             h: float = 1e-6, n: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference cross-check of the fluxes on a fine uniform grid."""
    lo, hi = family.support(state.u, state.v)
    x = np.linspace(lo, hi, n, endpoint=False)
    dx = x[1] - x[0]
    psi0 = family.psi(state.u, state.v, x)
    z = state.z
    out = np.empty(z.size)
    for i in range(z.size):
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        dpsi = (family.psi(*_split(zp, z.size // 2), x) - family.psi(*_split(zm, z.size // 2), x)) / (2 * h)
        out[i] = -family.hbar * np.imag(np.sum(np.conj(psi0) * dpsi) * dx)
    return _split(out, z.size // 2)


def geometry_condition(family: TrialFamily, state: ParameterState, h: float = 1e-6) -> float:
    """Condition number of the real overlap metric Re<d_i psi | d_j psi>."""
    x = family.quadrature_grid(state.u, state.v)
    dx = x[1] - x[0]
    z = state.z
    n = family.n_pairs
    tang = []
    for i in range(z.size):
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        tang.append((family.psi(*_split(zp, n), x) - family.psi(*_split(zm, n), x)) / (2 * h))
    t = np.array(tang)
    metric = np.real(np.conj(t) @ t.T) * dx
    return float(np.linalg.cond(metric))


def check_geometry(family: TrialFamily, state: ParameterState) -> float:
    cond = geometry_condition(family, state)
    if not math.isfinite(cond) or cond > GEOMETRY_COND_MAX:
        raise SingularGeometryError(f"parameter metric condition number {cond:.3e} exceeds {GEOMETRY_COND_MAX:g}")
    return cond


def wellposedness_determinant(family: TrialFamily, state: ParameterState,
                              h: float = 1e-5) -> np.ndarray:
    """Per-pair determinant |E_u E_v ; W_u W_v| of the energy/flux Poisson block."""
    n = family.n_pairs
    hu, hv = family.grad(state.u, state.v)
    gw = _fd_gradient(lambda z: family.flux_correction(*_split(z, n)), state.z, h)
    wu, wv = _split(gw, n)
    return hu * wv - hv * wu


def dynamical_pair_check(family: TrialFamily, state: ParameterState, tol: float) -> np.ndarray:
    """True per pair where j_u matches v and j_v vanishes, both within tol."""
    ju, jv = family.fluxes(state.u, state.v)
    return (np.abs(ju - state.v) <= tol) & (np.abs(jv) <= tol)


def flux_identity(family: TrialFamily, state: ParameterState, udot, vdot,
                  h: float = 1e-5) -> tuple[float, float]:
    """Both sides of i hbar <psi|psi_dot> = u_dot . j_u + v_dot . j_v.

    The direct side differentiates psi along the given rate by central
    differences and integrates on the family quadrature grid.
    """
    udot = np.asarray(udot, dtype=float)
    vdot = np.asarray(vdot, dtype=float)
    ju, jv = family.fluxes(state.u, state.v)
    recon = float(np.dot(udot, ju) + np.dot(vdot, jv))
    x = family.quadrature_grid(state.u, state.v)
    dx = x[1] - x[0]
    psi0 = family.psi(state.u, state.v, x)
    pp = family.psi(state.u + h * udot, state.v + h * vdot, x)
    pm = family.psi(state.u - h * udot, state.v - h * vdot, x)
    direct = float(-family.hbar * np.imag(np.sum(np.conj(psi0) * (pp - pm)) * dx / (2 * h)))
    return recon, direct


# ---------------------------------------------------------------------------
# flows
# ---------------------------------------------------------------------------

def _leapfrog(family: TrialFamily, u, v, dt):
    hu, _ = family.grad(u, v)
    v = v - 0.5 * dt * hu
    _, hv = family.grad(u, v)
    u = u + dt * hv
    hu, _ = family.grad(u, v)
    v = v - 0.5 * dt * hu
    return u, v


def _implicit_midpoint(family: TrialFamily, u, v, dt, tol=1e-14, max_iter=200):
    u1, v1 = u, v
    for _ in range(max_iter):
        hu, hv = family.grad(0.5 * (u + u1), 0.5 * (v + v1))
        un = u + dt * hv
        vn = v - dt * hu
        delta = max(float(np.max(np.abs(un - u1))), float(np.max(np.abs(vn - v1))))
        u1, v1 = un, vn
        scale = max(1.0, float(np.max(np.abs(u1))), float(np.max(np.abs(v1))))
        if delta <= tol * scale:
            return u1, v1
    raise InstabilityError("implicit midpoint iteration did not converge")


def _hamilton(family: TrialFamily, u, v, dt):
    if dt == 0.0:
        return u, v
    base = _leapfrog if family.separable else _implicit_midpoint
    for w in (_Y1, _Y0, _Y1):
        u, v = base(family, u, v, w * dt)
    return u, v


def _correction_midpoint(family: TrialFamily, u, v, dt, h=1e-5):
    """Explicit midpoint on du/dt = dW/dv, dv/dt = -dW/du."""
    n = family.n_pairs

    def rate(z):
        g = _fd_gradient(lambda y: family.flux_correction(*_split(y, n)), z, h)
        gu, gv = _split(g, n)
        return np.concatenate([gv, -gu], axis=-1)

    z = np.concatenate([u, v], axis=-1)
    zm = z + 0.5 * dt * rate(z)
    z1 = z + dt * rate(zm)
    return _split(z1, n)


def _flux(family: TrialFamily, u, v, dt):
    if dt == 0.0:
        return u, v
    u, v = _hamilton(family, u, v, 0.5 * dt)
    u, v = _correction_midpoint(family, u, v, dt)
    return _hamilton(family, u, v, 0.5 * dt)


def _check_dt(dt):
    if not math.isfinite(dt):
        raise ValueError("dt must be finite")


def hamilton_flow_step(family: TrialFamily, state: ParameterState, dt: float,
                       validate: bool = False) -> ParameterState:
    """Energy flow du/dt = E_v, dv/dt = -E_u.

    Fourth-order composition of leapfrog (separable E) or implicit midpoint
    (otherwise). A negative dt integrates backwards.
    """
    _check_dt(dt)
    if validate:
        validate_gradients(family, state)
    u, v = _hamilton(family, state.u, state.v, dt)
    return ParameterState(u, v, state.time + dt)


def flux_flow_step(family: TrialFamily, state: ParameterState, dt: float,
                   check: bool = True, validate: bool = False) -> ParameterState:
    """Flux flow: the Hamilton flow of K = E + W, split symmetrically around W."""
    _check_dt(dt)
    if check:
        check_geometry(family, state)
    if validate:
        validate_gradients(family, state)
    u, v = _flux(family, state.u, state.v, dt)
    return ParameterState(u, v, state.time + dt)


def flux_generator(family: TrialFamily, u, v) -> np.ndarray:
    """K = E + W, conserved by the flux flow."""
    return family.energy(u, v) + family.flux_correction(u, v)


@dataclass
class FlowReport:
    times: np.ndarray
    u: np.ndarray
    v: np.ndarray
    energy: np.ndarray
    norm_rate: np.ndarray
    j_u: np.ndarray
    j_v: np.ndarray
    det: np.ndarray
    loop_action: list = field(default_factory=list)

    @property
    def final(self) -> ParameterState:
        return ParameterState(self.u[-1], self.v[-1], float(self.times[-1]))

    def write_csv(self, path) -> None:
        n = self.u.shape[-1]
        header = (["time"] + [f"u{i}" for i in range(n)] + [f"v{i}" for i in range(n)]
                  + ["energy", "norm_rate"] + [f"det_pair_{i}" for i in range(n)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k in range(self.times.size):
                row = [self.times[k], *self.u[k], *self.v[k], self.energy[k],
                       self.norm_rate[k], *self.det[k]]
                w.writerow([repr(float(x)) for x in row])


def alternate_compose(family: TrialFamily, state: ParameterState, dt: float, n: int,
                      symmetric: bool = True, check_every: int = 100,
                      diagnostics: bool = True) -> FlowReport:
    """Alternate short energy-flow and flux-flow segments.

    Each macro step of length dt applies F(dt/2) and G(dt/2). With
    ``symmetric`` the energy flow is split as F(dt/4) G(dt/2) F(dt/4), which
    is conjugate to the plain alternation and second order. ``norm_rate``
    records the change of K across each G segment divided by its length.
    """
    _check_dt(dt)
    u, v = state.u.copy(), state.v.copy()
    rows = []

    def record(t, u, v, rate):
        ju, jv = family.fluxes(u, v)
        det = (wellposedness_determinant(family, ParameterState(u, v, t))
               if diagnostics else np.zeros_like(u))
        rows.append((t, u.copy(), v.copy(), float(family.energy(u, v)), rate, ju, jv, det))

    record(state.time, u, v, 0.0)
    t = state.time
    for k in range(n):
        if check_every and k % check_every == 0:
            check_geometry(family, ParameterState(u, v, t))
        if symmetric:
            u, v = _hamilton(family, u, v, 0.25 * dt)
        else:
            u, v = _hamilton(family, u, v, 0.5 * dt)
        k0 = float(flux_generator(family, u, v))
        u, v = _flux(family, u, v, 0.5 * dt)
        rate = (float(flux_generator(family, u, v)) - k0) / (0.5 * dt) if dt else 0.0
        if symmetric:
            u, v = _hamilton(family, u, v, 0.25 * dt)
        t = state.time + (k + 1) * dt
        record(t, u, v, rate)
    return FlowReport(
        times=np.array([r[0] for r in rows]),
        u=np.array([r[1] for r in rows]),
        v=np.array([r[2] for r in rows]),
        energy=np.array([r[3] for r in rows]),
        norm_rate=np.array([r[4] for r in rows]),
        j_u=np.array([r[5] for r in rows]),
        j_v=np.array([r[6] for r in rows]),
        det=np.array([r[7] for r in rows]))


def hamilton_flow(family: TrialFamily, state: ParameterState, dt: float, n: int) -> FlowReport:
    """Pure energy flow sampled every step, in FlowReport form."""
    u, v = state.u.copy(), state.v.copy()
    us, vs, es = [u], [v], [float(family.energy(u, v))]
    for _ in range(n):
        u, v = _hamilton(family, u, v, dt)
        us.append(u)
        vs.append(v)
        es.append(float(family.energy(u, v)))
    us = np.array(us)
    vs = np.array(vs)
    ju, jv = family.fluxes(us, vs)
    return FlowReport(times=state.time + dt * np.arange(n + 1), u=us, v=vs, energy=np.array(es),
                      norm_rate=np.zeros(n + 1), j_u=ju, j_v=jv, det=np.zeros_like(us))


# ---------------------------------------------------------------------------
# loop invariant
# ---------------------------------------------------------------------------

def circle_loop(center_u: Sequence[float], center_v: Sequence[float], radius: float,
                n_vertices: int, pair: int = 0) -> np.ndarray:
    """Closed polygon (n_vertices + 1 rows, last = first) of stacked (u, v)."""
    cu = np.asarray(center_u, dtype=float)
    cv = np.asarray(center_v, dtype=float)
    th = 2.0 * np.pi * np.arange(n_vertices + 1) / n_vertices
    th[-1] = 0.0
    z = np.tile(np.concatenate([cu, cv]), (n_vertices + 1, 1))
    z[:, pair] += radius * np.cos(th)
    z[:, cu.size + pair] += radius * np.sin(th)
    return z


def loop_action(loop: np.ndarray, n_pairs: int) -> float:
    """Trapezoidal sum of v . du around a closed polygon of (u, v) rows."""
    u, v = _split(np.asarray(loop, dtype=float), n_pairs)
    du = np.diff(u, axis=0)
    vm = 0.5 * (v[1:] + v[:-1])
    return float(np.sum(vm * du))


def transport_loop(family: TrialFamily, loop: np.ndarray, dt: float, T: float,
                   symmetric: bool = True) -> np.ndarray:
    """Move every vertex by the alternated flow for time T (vertices batched)."""
    n = family.n_pairs
    z = np.asarray(loop, dtype=float)
    u, v = _split(z.copy(), n)
    steps = int(round(T / dt)) if dt else 0
    for _ in range(steps):
        if symmetric:
            u, v = _hamilton(family, u, v, 0.25 * dt)
            u, v = _flux(family, u, v, 0.5 * dt)
            u, v = _hamilton(family, u, v, 0.25 * dt)
        else:
            u, v = _hamilton(family, u, v, 0.5 * dt)
            u, v = _flux(family, u, v, 0.5 * dt)
    return np.concatenate([u, v], axis=-1)


def loop_action_invariant(family: TrialFamily, loop: np.ndarray, dt: float,
                          T: float) -> tuple[float, float]:
    loop = np.asarray(loop, dtype=float)
    if not np.array_equal(loop[0], loop[-1]):
        raise ValueError("loop must be closed (first vertex equals last)")
    before = loop_action(loop, family.n_pairs)
    after = loop_action(transport_loop(family, loop, dt, T), family.n_pairs)
    return before, after


def write_loop_csv(path, loop: np.ndarray, n_pairs: int) -> None:
    loop = np.asarray(loop, dtype=float)
    header = ["vertex_id"] + [f"u{i}" for i in range(n_pairs)] + [f"v{i}" for i in range(n_pairs)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, row in enumerate(loop):
            w.writerow([k] + [repr(float(x)) for x in row])
