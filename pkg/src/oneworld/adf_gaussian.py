"""Single complex Gaussian carried by a classical trajectory (1D).

The packet is psi = g exp(-Gamma (x - q)^2) exp(i (S + p (x - q)) / hbar).
The center (q, p, S) follows Hamilton's equations and the classical action.
A bundle of four neighbors (+/- offsets in q and in p) yields the 2x2
stability matrix M, from which

    sigma = M_qq,  sigma_dot = M_pq / m,
    zeta  = d0 M_qq + 2 hbar M_qp  (the companion solution),

and the exponent parameters c + i d = 1/gamma evolve by

    c_dot = 2 (sigma_dot / sigma) c,
    d_dot = 2 (sigma_dot / sigma) d + 2 hbar / m,

so that c = a sigma^2 and d = sigma zeta with a = c0 (sigma(0) = 1).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .core_fields import Grid, SchrodingerField, _boundary_max
from .errors import AmbiguousZeroError, NeighborCollapseError, PacketEscapesGridError

NEIGHBOR_OFFSET = 1e-5
CAUSTIC_FLAG = 1e-10
MASLOV_ZERO_TOL = 1e-10
# switch to the (sigma, zeta) form when one RK4 step would resolve sigma poorly
REGULARIZE_RATE = 2e-3
REGULARIZE_SIGMA = 1e-6


@dataclass(frozen=True)
class ClassicalCenter:
    q: float
    p: float
    S: float = 0.0
    mass: float = 1.0
    t: float = 0.0


def _force(potential, q):
    return -np.asarray(potential.gradient(q)[0], dtype=float)


def _leapfrog(q, p, potential, dt, mass):
    ph = p + 0.5 * dt * _force(potential, q)
    q1 = q + dt * ph / mass
    p1 = ph + 0.5 * dt * _force(potential, q1)
    return q1, p1, ph


_CBRT2 = 2.0 ** (1.0 / 3.0)
_YOSHIDA = (1.0 / (2.0 - _CBRT2), -_CBRT2 / (2.0 - _CBRT2), 1.0 / (2.0 - _CBRT2))


def _substeps(dt: float, order: int) -> tuple[float, ...]:
    if order == 2:
        return (dt,)
    if order == 4:
        return tuple(w * dt for w in _YOSHIDA)
    raise ValueError("order must be 2 or 4")


def hj_step(center: ClassicalCenter, potential, dt: float, order: int = 2) -> ClassicalCenter:
    """Leapfrog step of the center. The action gains the discrete Lagrangian
    dt * (p_half^2 / 2m - (V(q0) + V(q1)) / 2).

    ``order=4`` composes three leapfrog substeps (Yoshida triple jump).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    c = center
    for h in _substeps(dt, order):
        c = _hj_leapfrog(c, potential, h)
    return replace(c, t=center.t + dt)


def _hj_leapfrog(center: ClassicalCenter, potential, h: float) -> ClassicalCenter:
    m = center.mass
    q = np.float64(center.q)
    q1, p1, ph = _leapfrog(q, np.float64(center.p), potential, h, m)
    v0 = float(potential.value(q))
    v1 = float(potential.value(q1))
    S = center.S + float(h * (ph * ph / (2.0 * m) - 0.5 * (v0 + v1)))
    return ClassicalCenter(float(q1), float(p1), S, m, center.t + h)


@dataclass(frozen=True)
class DeviationBundle:
    """Reference center plus neighbors at (q +/- eps_q, p) and (q, p +/- eps_p).

    ``neighbors`` holds the (dq, dp) displacements from the center, which keeps
    the small differences free of cancellation against the center coordinates.

    ``sigma_prev`` and ``sigma_dot_prev`` keep the values of the previous step
    for the exponent integrator. ``offset`` selects which column of M is
    reported as sigma: "position" (M_qq, the default used by the exponent)
    or "momentum" (m M_qp).
    """

    center: ClassicalCenter
    neighbors: np.ndarray
    eps_q: float
    eps_p: float
    offset: str = "position"
    sigma_prev: float | None = None
    sigma_dot_prev: float | None = None

    @classmethod
    def around(cls, center: ClassicalCenter, eps_q: float = NEIGHBOR_OFFSET,
               eps_p: float = NEIGHBOR_OFFSET, offset: str = "position") -> "DeviationBundle":
        if offset not in ("position", "momentum"):
            raise ValueError("offset must be 'position' or 'momentum'")
        nb = np.array([[eps_q, 0.0], [-eps_q, 0.0], [0.0, eps_p], [0.0, -eps_p]])
        return cls(center, nb, float(eps_q), float(eps_p), offset)

    @property
    def monodromy(self) -> np.ndarray:
        nb = self.neighbors
        dq = (nb[0] - nb[1]) / (2.0 * self.eps_q)
        dp = (nb[2] - nb[3]) / (2.0 * self.eps_p)
        return np.array([[dq[0], dp[0]], [dq[1], dp[1]]])

    @property
    def sigma(self) -> float:
        M = self.monodromy
        if self.offset == "position":
            return float(M[0, 0])
        return float(M[0, 1] * self.center.mass)

    @property
    def sigma_dot(self) -> float:
        M = self.monodromy
        if self.offset == "position":
            return float(M[1, 0] / self.center.mass)
        return float(M[1, 1])

    def zeta(self, d0: float, hbar: float) -> tuple[float, float]:
        """Companion solution (zeta, zeta_dot) with zeta(0) = d0, zeta_dot(0) = 2 hbar / m."""
        M = self.monodromy
        m = self.center.mass
        z = d0 * M[0, 0] + 2.0 * hbar * M[0, 1]
        zd = (d0 * M[1, 0] + 2.0 * hbar * M[1, 1]) / m
        return float(z), float(zd)


def deviation_step(bundle: DeviationBundle, potential, dt: float, order: int = 2) -> DeviationBundle:
    """Advance the center and its neighbors by the same leapfrog step.

    Neighbor displacements are updated with force differences, which is the
    leapfrog of the neighbor minus the leapfrog of the center.
    """
    c = bundle.center
    m = c.mass
    nb = bundle.neighbors
    for h in _substeps(dt, order):
        nxt = _hj_leapfrog(c, potential, h)
        q0 = np.float64(c.q)
        q1 = np.float64(nxt.q)
        dph = nb[:, 1] + 0.5 * h * (_force(potential, q0 + nb[:, 0]) - _force(potential, q0))
        dq1 = nb[:, 0] + h * dph / m
        dp1 = dph + 0.5 * h * (_force(potential, q1 + dq1) - _force(potential, q1))
        nb = np.stack([dq1, dp1], axis=1)
        c = nxt
    center = replace(c, t=bundle.center.t + dt)
    disp = np.hypot(nb[0, 0] - nb[1, 0], nb[0, 1] - nb[1, 1])
    disp2 = np.hypot(nb[2, 0] - nb[3, 0], nb[2, 1] - nb[3, 1])
    if min(disp, disp2) < 1e-12:
        raise NeighborCollapseError(f"neighbor displacement {min(disp, disp2):.2e} below 1e-12")
    return DeviationBundle(center, nb, bundle.eps_q, bundle.eps_p, bundle.offset,
                           bundle.sigma, bundle.sigma_dot)


@dataclass(frozen=True)
class GaussianExponent:
    """1/gamma = c + i d, with invariants a = c0 and d0 kept for the regularized form."""

    c: float
    d: float
    a: float
    d0: float
    maslov: int = 0
    sign: int = 1
    regularized: bool = False

    @classmethod
    def initial(cls, gamma: complex) -> "GaussianExponent":
        inv = 1.0 / complex(gamma)
        if inv.real <= 0:
            raise ValueError("Re(1/gamma) must be positive")
        return cls(inv.real, inv.imag, inv.real, inv.imag)

    @property
    def gamma(self) -> complex:
        return 1.0 / complex(self.c, self.d)


def _hermite(s0, s1, ds0, ds1, dt, tau):
    """Cubic Hermite value and slope at fraction tau of the step."""
    h00 = 2 * tau ** 3 - 3 * tau ** 2 + 1
    h10 = tau ** 3 - 2 * tau ** 2 + tau
    h01 = -2 * tau ** 3 + 3 * tau ** 2
    h11 = tau ** 3 - tau ** 2
    val = h00 * s0 + h10 * dt * ds0 + h01 * s1 + h11 * dt * ds1
    d00 = 6 * tau ** 2 - 6 * tau
    d10 = 3 * tau ** 2 - 4 * tau + 1
    d01 = -6 * tau ** 2 + 6 * tau
    d11 = 3 * tau ** 2 - 2 * tau
    der = (d00 * s0 + d01 * s1) / dt + d10 * ds0 + d11 * ds1
    return val, der


def _sign(s: float, scale: float) -> int:
    if abs(s) <= MASLOV_ZERO_TOL * scale:
        return 0
    return 1 if s > 0 else -1


def exponent_step(exponent: GaussianExponent, bundle: DeviationBundle, hbar: float,
                  mass: float, dt: float, sigma_scale: float = 1.0) -> GaussianExponent:
    """Advance (c, d) over the step that produced ``bundle``.

    RK4 with sigma at the stage times from cubic Hermite interpolation of the
    bracketing bundle values. Where sigma is small or changes quickly within
    the step, (c, d) are taken from the smooth (sigma, zeta) form instead.
    """
    if bundle.offset != "position":
        raise ValueError("exponent dynamics use the position-offset bundle")
    if bundle.sigma_prev is None:
        raise ValueError("bundle has no previous step")
    s0, ds0 = bundle.sigma_prev, bundle.sigma_dot_prev
    s1, ds1 = bundle.sigma, bundle.sigma_dot
    rate = max(abs(ds0 / s0) if s0 else math.inf, abs(ds1 / s1) if s1 else math.inf)
    near = min(abs(s0), abs(s1)) < REGULARIZE_SIGMA * sigma_scale
    mid_val, _ = _hermite(s0, s1, ds0, ds1, dt, 0.5)
    crosses = (s0 > 0) != (s1 > 0) or (mid_val > 0) != (s0 > 0)
    ex = exponent
    new_sign = _sign(s1, sigma_scale)
    maslov = ex.maslov
    if new_sign != 0 and ex.sign != 0 and new_sign != ex.sign:
        maslov += 1
    if new_sign == 0:
        new_sign = ex.sign
    if near or crosses or dt * rate > REGULARIZE_RATE:
        zeta, _ = bundle.zeta(ex.d0, hbar)
        return replace(ex, c=ex.a * s1 * s1, d=s1 * zeta, maslov=maslov, sign=new_sign,
                       regularized=True)

    def f(tau, y):
        s, ds = _hermite(s0, s1, ds0, ds1, dt, tau)
        k = 2.0 * ds / s
        return np.array([k * y[0], k * y[1] + 2.0 * hbar / mass])

    y = np.array([ex.c, ex.d])
    k1 = f(0.0, y)
    k2 = f(0.5, y + 0.5 * dt * k1)
    k3 = f(0.5, y + 0.5 * dt * k2)
    k4 = f(1.0, y + dt * k3)
    y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return replace(ex, c=float(y[0]), d=float(y[1]), maslov=maslov, sign=new_sign,
                   regularized=False)


def wronskian(bundle: DeviationBundle, exponent: GaussianExponent, hbar: float,
              mass: float) -> tuple[float, bool]:
    """sigma zeta_dot - sigma_dot zeta with zeta = d / sigma from the integrated d.

    zeta_dot comes from the bundle's companion solution, so the value checks
    the integrated exponent against the exact linear dynamics. The flag is set
    when |sigma| < 1e-10, where d / sigma is taken from the regularized form.
    """
    s = bundle.sigma
    sd = bundle.sigma_dot
    zb, zbd = bundle.zeta(exponent.d0, hbar)
    flag = abs(s) < CAUSTIC_FLAG
    zeta = zb if flag else exponent.d / s
    return s * zbd - sd * zeta, flag


def maslov_update(sigma_history: Iterable[float], tol: float = MASLOV_ZERO_TOL) -> int:
    """Number of sign changes of sigma.

    Samples with |sigma| <= tol * max|sigma| count as zeros. A zero whose
    neighbors share a sign is a grazing touch and raises AmbiguousZeroError.
    """
    s = np.asarray(list(sigma_history), dtype=float)
    if s.size == 0:
        return 0
    scale = float(np.max(np.abs(s))) or 1.0
    signs = np.where(np.abs(s) <= tol * scale, 0, np.sign(s)).astype(int)
    count = 0
    last = 0
    k = 0
    while k < signs.size:
        if signs[k] == 0:
            j = k
            while j < signs.size and signs[j] == 0:
                j += 1
            if 0 < k and j < signs.size and last != 0 and signs[j] == last:
                raise AmbiguousZeroError(f"sigma touches zero near sample {k} without changing sign")
            k = j
            continue
        if last != 0 and signs[k] != last:
            count += 1
        last = signs[k]
        k += 1
    return count


@dataclass(frozen=True)
class ADFState:
    bundle: DeviationBundle
    exponent: GaussianExponent
    hbar: float = 1.0
    # unwrapped phase of a sigma + i zeta, continued step by step
    winding_hint: float = 0.0

    @property
    def center(self) -> ClassicalCenter:
        return self.bundle.center

    @classmethod
    def initial(cls, q0: float, p0: float, gamma: complex, hbar: float = 1.0,
                mass: float = 1.0, S0: float = 0.0, t0: float = 0.0) -> "ADFState":
        center = ClassicalCenter(float(q0), float(p0), float(S0), float(mass), float(t0))
        return cls(DeviationBundle.around(center), GaussianExponent.initial(gamma), float(hbar))

    def total_gamma(self) -> complex:
        """Exponent of (x - q)^2 including the Hamilton-Jacobi quadratic phase.

        Equals 1/(c + i d) - i m sigma_dot / (2 hbar sigma) and stays finite at
        sigma = 0 through the Wronskian identity.
        """
        b = self.bundle
        ex = self.exponent
        s, sd = b.sigma, b.sigma_dot
        z, zd = b.zeta(ex.d0, self.hbar)
        m = b.center.mass
        return m * complex(zd, -ex.a * sd) / (2.0 * self.hbar * complex(ex.a * s, z))

    def prefactor(self) -> complex:
        """g = (2/pi)^(1/4) a^(1/4) (a sigma + i zeta)^(-1/2) on the continuous branch.

        The branch is fixed by the unwrapped phase of a sigma + i zeta, which
        carries the Maslov phase through each zero of sigma.
        """
        b = self.bundle
        ex = self.exponent
        z, _ = b.zeta(ex.d0, self.hbar)
        w = complex(ex.a * b.sigma, z)
        theta = _unwrap_near(math.atan2(w.imag, w.real), self.winding_hint)
        return ((2.0 / math.pi) ** 0.25 * ex.a ** 0.25 * abs(w) ** -0.5
                * complex(math.cos(-0.5 * theta), math.sin(-0.5 * theta)))


def _unwrap_near(angle: float, ref: float) -> float:
    return angle + 2.0 * math.pi * round((ref - angle) / (2.0 * math.pi))


def adf_step(state: ADFState, potential, dt: float, sigma_scale: float = 1.0,
             order: int = 4) -> ADFState:
    """One packet step. The bundle uses the fourth-order composition by
    default so that its sigma is as accurate as the RK4 exponent update."""
    b1 = deviation_step(state.bundle, potential, dt, order)
    m = b1.center.mass
    ex1 = exponent_step(state.exponent, b1, state.hbar, m, dt, sigma_scale)
    z, _ = b1.zeta(ex1.d0, state.hbar)
    theta = _unwrap_near(math.atan2(z, ex1.a * b1.sigma), state.winding_hint)
    return ADFState(b1, ex1, state.hbar, theta)


@dataclass
class ADFTrajectory:
    time: np.ndarray
    q: np.ndarray
    p: np.ndarray
    S: np.ndarray
    sigma: np.ndarray
    sigma_dot: np.ndarray
    c: np.ndarray
    d: np.ndarray
    maslov: np.ndarray
    wronskian: np.ndarray
    re_gamma: np.ndarray
    final: ADFState

    HEADER = ("time", "q_cl", "p_cl", "S_cl", "sigma", "c", "d", "maslov", "wronskian")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for k in range(self.time.size):
                w.writerow([repr(float(self.time[k])), repr(float(self.q[k])), repr(float(self.p[k])),
                            repr(float(self.S[k])), repr(float(self.sigma[k])), repr(float(self.c[k])),
                            repr(float(self.d[k])), int(self.maslov[k]), repr(float(self.wronskian[k]))])


def propagate_adf(state: ADFState, potential, dt: float, n_steps: int,
                  record_every: int = 1) -> ADFTrajectory:
    """Advance an ADF packet and record its scalar history."""
    rows = []

    def record(s: ADFState):
        b = s.bundle
        ex = s.exponent
        w, _ = wronskian(b, ex, s.hbar, b.center.mass)
        cd = complex(ex.c, ex.d)
        re_g = (1.0 / cd).real if abs(cd) > 0 else math.inf
        rows.append((b.center.t, b.center.q, b.center.p, b.center.S, b.sigma, b.sigma_dot,
                     ex.c, ex.d, ex.maslov, w, re_g))

    record(state)
    for k in range(1, n_steps + 1):
        state = adf_step(state, potential, dt)
        if k % record_every == 0 or k == n_steps:
            record(state)
    arr = list(zip(*rows))
    return ADFTrajectory(*(np.array(a) for a in arr[:8]), np.array(arr[8], dtype=int),
                         np.array(arr[9]), np.array(arr[10]), state)


def smooth_re_gamma(state: ADFState) -> float:
    """Re[1/(c + i d)] in the form a / (a^2 sigma^2 + zeta^2), finite at caustics."""
    ex = state.exponent
    z, _ = state.bundle.zeta(ex.d0, state.hbar)
    s = state.bundle.sigma
    return ex.a / (ex.a ** 2 * s * s + z * z)


def caustic_limit_check(state: ADFState, potential, dt: float, t_max: float,
                        window: float | None = None) -> dict:
    """Run through the first zero of sigma and compare the peak of Re[1/(c + i d)]
    with a sigma_1^2 (m / 2 hbar)^2, sigma_1 being the fitted slope at the zero.

    Returns a dict with peak, predicted, t_star, sigma_1, d_slope and the
    relative error.
    """
    a = state.exponent.a
    m = state.center.mass
    hbar = state.hbar
    ts, ss, rg, ds = [], [], [], []
    s = state
    n = int(round(t_max / dt))
    for _ in range(n):
        s = adf_step(s, potential, dt)
        ts.append(s.center.t)
        ss.append(s.bundle.sigma)
        rg.append(smooth_re_gamma(s))
        ds.append(s.exponent.d)
    ts = np.array(ts)
    ss = np.array(ss)
    rg = np.array(rg)
    ds = np.array(ds)
    cross = np.nonzero(np.signbit(ss[1:]) != np.signbit(ss[:-1]))[0]
    if cross.size == 0:
        raise ValueError("no zero of sigma within t_max")
    k = int(cross[0])
    t_star = ts[k] - ss[k] * (ts[k + 1] - ts[k]) / (ss[k + 1] - ss[k])
    lo = max(0, k - 3)
    hi = min(ts.size, k + 5)
    sigma_1 = float(np.polyfit(ts[lo:hi] - t_star, ss[lo:hi], 1)[0])
    d_slope = float(np.polyfit(ts[lo:hi] - t_star, ds[lo:hi], 1)[0])
    if window is None:
        window = 0.25 * abs(1.0 / sigma_1) if sigma_1 else 10 * dt
    sel = np.abs(ts - t_star) <= window
    peak = float(np.max(rg[sel]))
    predicted = a * sigma_1 ** 2 * (m / (2.0 * hbar)) ** 2
    return {"peak": peak, "predicted": predicted, "t_star": float(t_star), "sigma_1": sigma_1,
            "d_slope": d_slope, "expected_d_slope": -2.0 * hbar / m,
            "rel_error": abs(peak - predicted) / predicted}


def evaluate_adf(state: ADFState, grid: Grid, tail_tol: float = 1e-12) -> SchrodingerField:
    """Packet on a 1D grid, normalized analytically (no renormalization)."""
    if grid.dims != 1:
        raise ValueError("ADF packets are one-dimensional")
    c = state.center
    gam = state.total_gamma()
    if gam.real <= 0:
        raise ValueError("packet exponent lost positivity")
    x = grid.axes()[0]
    dx = x - c.q
    psi = state.prefactor() * np.exp(-gam * dx * dx + 1j * (c.S + c.p * dx) / state.hbar)
    rho = np.abs(psi) ** 2
    if _boundary_max(rho) > tail_tol * rho.max():
        raise PacketEscapesGridError("ADF packet does not fit the grid")
    return SchrodingerField.from_psi(grid, psi, c.t, state.hbar, c.mass)


class ADFBatch:
    """Many independent packets stepped together with array arithmetic.

    Same update rules as ``adf_step`` (fourth-order bundle, RK4 or regularized
    exponent). All packets share hbar, mass and the current time.
    """

    def __init__(self, states: list[ADFState]):
        if not states:
            raise ValueError("empty batch")
        self.hbar = states[0].hbar
        self.mass = states[0].center.mass
        self.t = states[0].center.t
        self.eps_q = np.array([s.bundle.eps_q for s in states])
        self.eps_p = np.array([s.bundle.eps_p for s in states])
        self.q = np.array([s.center.q for s in states], dtype=float)
        self.p = np.array([s.center.p for s in states], dtype=float)
        self.S = np.array([s.center.S for s in states], dtype=float)
        self.nb = np.array([s.bundle.neighbors for s in states], dtype=float)
        ex = [s.exponent for s in states]
        self.c = np.array([e.c for e in ex])
        self.d = np.array([e.d for e in ex])
        self.a = np.array([e.a for e in ex])
        self.d0 = np.array([e.d0 for e in ex])
        self.maslov = np.array([e.maslov for e in ex], dtype=int)
        self.sign = np.array([e.sign for e in ex], dtype=int)
        self.regularized = np.array([e.regularized for e in ex], dtype=bool)
        self.winding = np.array([s.winding_hint for s in states], dtype=float)

    def __len__(self) -> int:
        return self.q.size

    def monodromy(self) -> np.ndarray:
        dq = (self.nb[:, 0] - self.nb[:, 1]) / (2.0 * self.eps_q[:, None])
        dp = (self.nb[:, 2] - self.nb[:, 3]) / (2.0 * self.eps_p[:, None])
        return np.stack([np.stack([dq[:, 0], dp[:, 0]], -1), np.stack([dq[:, 1], dp[:, 1]], -1)], 1)

    def sigma(self) -> tuple[np.ndarray, np.ndarray]:
        M = self.monodromy()
        return M[:, 0, 0], M[:, 1, 0] / self.mass

    def zeta(self) -> tuple[np.ndarray, np.ndarray]:
        M = self.monodromy()
        z = self.d0 * M[:, 0, 0] + 2.0 * self.hbar * M[:, 0, 1]
        zd = (self.d0 * M[:, 1, 0] + 2.0 * self.hbar * M[:, 1, 1]) / self.mass
        return z, zd

    def _leapfrog(self, potential, h):
        m = self.mass
        q0 = self.q
        f0 = _force(potential, q0)
        ph = self.p + 0.5 * h * f0
        q1 = q0 + h * ph / m
        f1 = _force(potential, q1)
        p1 = ph + 0.5 * h * f1
        self.S = self.S + h * (ph * ph / (2.0 * m)
                               - 0.5 * (potential.value(q0) + potential.value(q1)))
        nb = self.nb
        dph = nb[:, :, 1] + 0.5 * h * (_force(potential, q0[:, None] + nb[:, :, 0]) - f0[:, None])
        dq1 = nb[:, :, 0] + h * dph / m
        dp1 = dph + 0.5 * h * (_force(potential, q1[:, None] + dq1) - f1[:, None])
        self.nb = np.stack([dq1, dp1], axis=-1)
        self.q, self.p = q1, p1

    def step(self, potential, dt: float, sigma_scale: float = 1.0) -> None:
        s0, ds0 = self.sigma()
        for h in _substeps(dt, 4):
            self._leapfrog(potential, h)
        self.t += dt
        s1, ds1 = self.sigma()
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = np.maximum(np.abs(ds0 / s0), np.abs(ds1 / s1))
        rate = np.where(np.isfinite(rate), rate, np.inf)
        mid, _ = _hermite(s0, s1, ds0, ds1, dt, 0.5)
        near = np.minimum(np.abs(s0), np.abs(s1)) < REGULARIZE_SIGMA * sigma_scale
        crosses = ((s0 > 0) != (s1 > 0)) | ((mid > 0) != (s0 > 0))
        reg = near | crosses | (dt * rate > REGULARIZE_RATE)
        new_sign = np.where(np.abs(s1) <= MASLOV_ZERO_TOL * sigma_scale, 0, np.sign(s1)).astype(int)
        flip = (new_sign != 0) & (self.sign != 0) & (new_sign != self.sign)
        self.maslov = self.maslov + flip
        self.sign = np.where(new_sign == 0, self.sign, new_sign)
        hb = 2.0 * self.hbar / self.mass
        safe0 = np.where(reg, 1.0, s0)
        safe1 = np.where(reg, 1.0, s1)

        def f(tau, c, d):
            s, ds = _hermite(safe0, safe1, np.where(reg, 0.0, ds0), np.where(reg, 0.0, ds1), dt, tau)
            k = 2.0 * ds / s
            return k * c, k * d + hb

        c, d = self.c, self.d
        k1 = f(0.0, c, d)
        k2 = f(0.5, c + 0.5 * dt * k1[0], d + 0.5 * dt * k1[1])
        k3 = f(0.5, c + 0.5 * dt * k2[0], d + 0.5 * dt * k2[1])
        k4 = f(1.0, c + dt * k3[0], d + dt * k3[1])
        c_rk = c + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        d_rk = d + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        z, _ = self.zeta()
        self.c = np.where(reg, self.a * s1 * s1, c_rk)
        self.d = np.where(reg, s1 * z, d_rk)
        self.regularized = reg
        ang = np.arctan2(z, self.a * s1)
        self.winding = ang + 2.0 * np.pi * np.round((self.winding - ang) / (2.0 * np.pi))

    def total_gamma(self) -> np.ndarray:
        s, sd = self.sigma()
        z, zd = self.zeta()
        return self.mass * (zd - 1j * self.a * sd) / (2.0 * self.hbar * (self.a * s + 1j * z))

    def prefactor(self) -> np.ndarray:
        s, _ = self.sigma()
        z, _ = self.zeta()
        w = np.abs(self.a * s + 1j * z)
        return (2.0 / np.pi) ** 0.25 * self.a ** 0.25 * w ** -0.5 * np.exp(-0.5j * self.winding)

    def state(self, i: int) -> ADFState:
        s, ds = self.sigma()
        center = ClassicalCenter(float(self.q[i]), float(self.p[i]), float(self.S[i]), self.mass, self.t)
        b = DeviationBundle(center, self.nb[i].copy(), float(self.eps_q[i]), float(self.eps_p[i]),
                            "position", float(s[i]), float(ds[i]))
        ex = GaussianExponent(float(self.c[i]), float(self.d[i]), float(self.a[i]), float(self.d0[i]),
                              int(self.maslov[i]), int(self.sign[i]), bool(self.regularized[i]))
        return ADFState(b, ex, self.hbar, float(self.winding[i]))

    def states(self) -> list[ADFState]:
        return [self.state(i) for i in range(len(self))]

    def evaluate(self, x: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
        """Sum of weight_i * psi_i(x); weights default to one."""
        gam = self.total_gamma()
        pre = self.prefactor()
        w = np.ones(len(self), dtype=complex) if weights is None else np.asarray(weights, dtype=complex)
        out = np.zeros(x.shape, dtype=complex)
        coef = w * pre * np.exp(1j * self.S / self.hbar)
        for i in range(len(self)):
            dx = x - self.q[i]
            out += coef[i] * np.exp(-gam[i] * dx * dx + 1j * self.p[i] * dx / self.hbar)
        return out

    _ARRAYS = ("eps_q", "eps_p", "q", "p", "S", "nb", "c", "d", "a", "d0", "maslov", "sign",
               "regularized", "winding")

    def take(self, index) -> "ADFBatch":
        """Sub-batch of the packets selected by an index array or mask."""
        out = object.__new__(ADFBatch)
        out.hbar, out.mass, out.t = self.hbar, self.mass, self.t
        for name in self._ARRAYS:
            setattr(out, name, getattr(self, name)[index])
        return out

    @staticmethod
    def concat(batches: list["ADFBatch"]) -> "ADFBatch":
        batches = [b for b in batches if b is not None and len(b)]
        if not batches:
            raise ValueError("empty batch")
        out = object.__new__(ADFBatch)
        b0 = batches[0]
        out.hbar, out.mass, out.t = b0.hbar, b0.mass, b0.t
        for name in ADFBatch._ARRAYS:
            setattr(out, name, np.concatenate([getattr(b, name) for b in batches]))
        return out
