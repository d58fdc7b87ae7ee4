"""Weierstrass splitting of complex Gaussians and branch-tree propagation (1D).

A packet exp(-g1 (x - q0)^2 + i p0 (x - q0) / hbar) with g1 = g1r + i g1c is
written as an integral over displacements W of narrower packets,

    sqrt((A + g2r) / pi) * Int dW exp(-A W^2) exp(i p0 W / hbar - i g1c W^2)
        * exp(-g2 (x - q0 - W)^2 + i pW (x - q0 - W) / hbar),

with g2 = g2r + i g1c, pW = p0 - 2 hbar g1c W and 1/g1r = 1/A + 1/g2r.
The W integral is discretized with the Gauss-Hermite rule matched to
exp(-A W^2). Each daughter then moves as an independent ADF packet.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .adf_gaussian import ADFBatch, ADFState
from .core_fields import Grid, SchrodingerField, _boundary_max
from .errors import BudgetExceededError, InvalidPlanError

LEAF_CAP = 100_000


class LeafEscapeWarning(UserWarning):
    """A leaf packet is not contained in the evaluation grid."""


@dataclass(frozen=True)
class WeierstrassPlan:
    """Daughter exponent choice plus quadrature order.

    Either ``gamma2_r`` (absolute) or ``ratio`` (gamma2_r = ratio * gamma1_r)
    is used; ``gamma2_r`` wins when both are given.
    """

    gamma2_r: float | None = None
    ratio: float = 2.0
    n_q: int = 16
    # daughters whose |amplitude| falls below amp_floor * max |amplitude| are dropped
    amp_floor: float = 0.0

    def __post_init__(self):
        if self.n_q < 1:
            raise InvalidPlanError("n_q must be at least 1")

    def resolve(self, gamma1_r: float) -> tuple[float, float]:
        """(gamma2_r, A) for a mother with real exponent part gamma1_r."""
        if not gamma1_r > 0:
            raise InvalidPlanError(f"mother exponent real part must be positive, got {gamma1_r}")
        g2 = float(self.gamma2_r) if self.gamma2_r is not None else self.ratio * gamma1_r
        if not g2 > gamma1_r:
            raise InvalidPlanError(
                f"daughter exponent {g2} must exceed mother exponent {gamma1_r}")
        A = 1.0 / (1.0 / gamma1_r - 1.0 / g2)
        return g2, A

    def quadrature(self, A: float) -> tuple[np.ndarray, np.ndarray]:
        """Nodes W_k and weights with Int exp(-A W^2) f(W) dW ~ sum w_k f(W_k)."""
        x, w = np.polynomial.hermite.hermgauss(self.n_q)
        s = math.sqrt(A)
        return x / s, w / s


@dataclass(frozen=True)
class BranchNode:
    """One packet of the tree, as created (root or split daughter).

    ``amplitude`` multiplies the packet's own ADF wavefunction, so
    ``amplitude * evaluate_adf(state)`` is this node's contribution. The
    packet's prefactor carries the normalization ratio from creation onward.
    """

    id: int
    parent: int | None
    generation: int
    t_split: float
    omega: float
    omega_history: tuple[tuple[float, float], ...]
    q: float
    p: float
    p_parent: float
    gamma_c: float
    amplitude: complex
    state: ADFState
    weight: float = 1.0
    origin: ADFState | None = None
    origin_amplitude: complex = 1.0

    @property
    def c(self) -> float:
        return self.state.exponent.c

    @property
    def d(self) -> float:
        return self.state.exponent.d

    def momentum_check(self) -> bool:
        """Momentum bookkeeping recomputed from stored values."""
        if self.parent is None:
            return True
        return self.p == self.p_parent - 2.0 * self.state.hbar * self.gamma_c * self.omega


def leaf_width(state: ADFState) -> float:
    """Spatial width 1/sqrt(Re Gamma) of the packet."""
    g = state.total_gamma()
    return 1.0 / math.sqrt(g.real) if g.real > 0 else math.inf


def weierstrass_split(node: BranchNode, plan: WeierstrassPlan, first_id: int = 0) -> list[BranchNode]:
    """Replace ``node`` by its quadrature family of daughters."""
    st = node.state
    hbar = st.hbar
    c = st.center
    g1 = st.total_gamma()
    g2r, A = plan.resolve(g1.real)
    gc = g1.imag
    omegas, weights = plan.quadrature(A)
    lead = node.amplitude * st.prefactor() * math.sqrt((A + g2r) / math.pi)
    out = []
    for k, (om, w) in enumerate(zip(omegas, weights)):
        om = float(om)
        q = c.q + om
        p = c.p - 2.0 * hbar * gc * om
        d_state = ADFState.initial(q, p, complex(g2r, gc), hbar, c.mass, c.S, c.t)
        phase = np.exp(1j * (c.p * om / hbar - gc * om * om))
        amp = complex(lead * w * phase / d_state.prefactor())
        out.append(BranchNode(first_id + k, node.id, node.generation + 1, c.t, om,
                              node.omega_history + ((c.t, om),), q, p, c.p, gc, amp,
                              d_state, float(w), st, node.amplitude))
    return out


def _packet(state: ADFState, x: np.ndarray) -> np.ndarray:
    c = state.center
    dx = x - c.q
    return state.prefactor() * np.exp(-state.total_gamma() * dx * dx + 1j * (c.S + c.p * dx) / state.hbar)


def reconstruct(daughters: list[BranchNode], grid: Grid,
                mother: tuple[ADFState, complex] | None = None) -> tuple[SchrodingerField, float]:
    """Coherent sum of one split's daughters and its L2 distance to the mother."""
    if not daughters:
        raise ValueError("no daughters")
    x = grid.axes()[0]
    psi = np.zeros(x.shape, dtype=complex)
    for n in daughters:
        psi += n.amplitude * _packet(n.state, x)
    if mother is None:
        ms, ma = daughters[0].origin, daughters[0].origin_amplitude
    else:
        ms, ma = mother
    ref = ma * _packet(ms, x)
    err = math.sqrt(float(np.sum(np.abs(psi - ref) ** 2)) * grid.cell_volume)
    st = daughters[0].state
    return SchrodingerField.from_psi(grid, psi, st.center.t, st.hbar, st.center.mass), err


def _split_error(daughters: list[BranchNode]) -> float:
    """Absolute L2 reconstruction error on a local grid covering the family."""
    ms = daughters[0].origin
    w1 = leaf_width(ms)
    w2 = leaf_width(daughters[0].state)
    qs = [n.q for n in daughters]
    lo = min(min(qs) - 10 * w2, ms.center.q - 10 * w1)
    hi = max(max(qs) + 10 * w2, ms.center.q + 10 * w1)
    kmax = max(1.0 / min(w1, w2), max(abs(n.p) for n in daughters) / ms.hbar)
    n = 1 << int(math.ceil(math.log2(min(1 << 16, max(2048, 16 * (hi - lo) * kmax)))))
    _, err = reconstruct(daughters, Grid.line(lo, hi, n))
    return err


def split_trigger(state: ADFState, potential, kappa: float = 1.0, reach: float = 3.0) -> bool:
    """True when the potential varies on a scale shorter than kappa * width.

    Only features within ``reach`` widths of the center are considered.
    """
    w = leaf_width(state)
    if not math.isfinite(w):
        return False
    scale = potential.length_scale(state.center.q, reach * w)
    return scale < kappa * w


@dataclass(frozen=True)
class SplitSchedule:
    """When and how leaves split.

    Splits are considered at ``times`` (to within half a step) or, if no
    times are given, every ``every`` steps (0 disables splitting).
    """

    times: tuple[float, ...] = ()
    every: int = 0
    kappa: float = 1.0
    reach: float = 3.0
    plan: WeierstrassPlan = field(default_factory=WeierstrassPlan)
    max_generation: int | None = None
    leaf_cap: int = LEAF_CAP
    on_cap: str = "prune"

    def __post_init__(self):
        if self.on_cap not in ("prune", "raise"):
            raise ValueError("on_cap must be 'prune' or 'raise'")
        if self.every < 0:
            raise ValueError("every must be non-negative")

    def due(self, step: int, t: float, dt: float) -> bool:
        if self.times:
            return any(abs(t - s) <= 0.5 * abs(dt) for s in self.times)
        return self.every > 0 and step % self.every == 0


class BranchTree:
    """All nodes ever created, the live leaves and the normalization audit.

    Live leaves are held in one ADFBatch; ``leaf_ids`` gives the node id of
    each batch slot.
    """

    def __init__(self, root: ADFState, amplitude: complex = 1.0):
        c = root.center
        node = BranchNode(0, None, 0, c.t, 0.0, (), c.q, c.p, c.p, 0.0, complex(amplitude), root)
        self.nodes: dict[int, BranchNode] = {0: node}
        self.leaf_ids = np.array([0], dtype=np.int64)
        self._batch = ADFBatch([root])
        self.split_budget = 0.0
        self.pruned_norm = 0.0
        self.n_splits = 0
        self._next_id = 1

    @property
    def batch(self) -> ADFBatch:
        return self._batch

    @property
    def leaves(self) -> list[BranchNode]:
        """Leaf nodes carrying their current packet state."""
        return [replace(self.nodes[int(i)], state=self._batch.state(k))
                for k, i in enumerate(self.leaf_ids)]

    @property
    def time(self) -> float:
        return self._batch.t

    @property
    def budget(self) -> float:
        """Bound on the change of the superposed L2 norm from truncations."""
        return self.split_budget + self.pruned_norm

    def amplitudes(self) -> np.ndarray:
        return np.array([self.nodes[int(i)].amplitude for i in self.leaf_ids], dtype=complex)

    def generations(self) -> np.ndarray:
        return np.array([self.nodes[int(i)].generation for i in self.leaf_ids], dtype=int)

    def split(self, leaf_index=None, plan: WeierstrassPlan | None = None) -> list[list[BranchNode]]:
        """Split the leaves at the given batch positions (all if None).

        Unsplit leaves keep their order; daughters are appended after them.
        Returns the daughter family of each split leaf.
        """
        plan = plan or WeierstrassPlan()
        n = len(self.leaf_ids)
        chosen = np.zeros(n, dtype=bool)
        if leaf_index is None:
            chosen[:] = True
        else:
            chosen[np.asarray(leaf_index, dtype=int)] = True
        families = []
        new_states: list[ADFState] = []
        new_ids: list[int] = []
        for k in np.flatnonzero(chosen):
            leaf = replace(self.nodes[int(self.leaf_ids[k])], state=self._batch.state(int(k)))
            fam = weierstrass_split(leaf, plan, self._next_id)
            self._next_id += len(fam)
            if plan.amp_floor > 0:
                top = max(abs(d.amplitude) for d in fam)
                fam = [d for d in fam if abs(d.amplitude) >= plan.amp_floor * top]
            self.split_budget += _split_error(fam)
            self.n_splits += 1
            for d in fam:
                self.nodes[d.id] = d
                new_ids.append(d.id)
                new_states.append(d.state)
            families.append(fam)
        if families:
            kept = self._batch.take(~chosen)
            self._batch = ADFBatch.concat([kept, ADFBatch(new_states)])
            self.leaf_ids = np.concatenate([self.leaf_ids[~chosen], np.array(new_ids, dtype=np.int64)])
        return families

    def enforce_cap(self, cap: int, on_cap: str = "prune") -> None:
        """Keep at most ``cap`` leaves, dropping the smallest amplitudes first."""
        n = len(self.leaf_ids)
        if n <= cap:
            return
        if on_cap == "raise":
            raise BudgetExceededError(f"leaf count {n} exceeds cap {cap}")
        amps = np.abs(self.amplitudes())
        keep = np.sort(np.argsort(-amps, kind="stable")[:cap])
        mask = np.zeros(n, dtype=bool)
        mask[keep] = True
        # every leaf packet has unit norm, so |amplitude| is its L2 norm
        self.pruned_norm += float(np.sum(amps[~mask]))
        self.leaf_ids = self.leaf_ids[mask]
        self._batch = self._batch.take(mask)

    def trigger_mask(self, potential, kappa: float = 1.0, reach: float = 3.0,
                     max_generation: int | None = None) -> np.ndarray:
        """Leaves meeting the split criterion (vectorized ``split_trigger``)."""
        g = self._batch.total_gamma().real
        with np.errstate(divide="ignore"):
            w = np.where(g > 0, 1.0 / np.sqrt(np.maximum(g, 0.0)), np.inf)
        out = np.zeros(len(w), dtype=bool)
        for k in range(len(w)):
            if np.isfinite(w[k]):
                out[k] = potential.length_scale(self._batch.q[k], reach * w[k]) < kappa * w[k]
        if max_generation is not None:
            out &= self.generations() < max_generation
        return out

    def step(self, potential, dt: float) -> None:
        self._batch.step(potential, dt)

    def write_jsonl(self, path) -> None:
        """One node per line: id, parent, t_split, omega, q, p, c, d, amp_re, amp_im."""
        with open(path, "w") as fh:
            for i in sorted(self.nodes):
                n = self.nodes[i]
                rec = {"id": n.id, "parent": n.parent, "t_split": n.t_split, "omega": n.omega,
                       "q": n.q, "p": n.p, "c": n.c, "d": n.d,
                       "amp_re": n.amplitude.real, "amp_im": n.amplitude.imag}
                fh.write(json.dumps(rec) + "\n")


def branch_propagate(tree: BranchTree, potential, dt: float, n_steps: int,
                     schedule: SplitSchedule | None = None, callback=None) -> BranchTree:
    """Advance all leaves, splitting those that meet the trigger at due times.

    ``callback(tree, step)`` runs after each step if given.
    """
    schedule = schedule or SplitSchedule()
    for step in range(n_steps):
        if schedule.due(step, tree.time, dt):
            mask = tree.trigger_mask(potential, schedule.kappa, schedule.reach,
                                     schedule.max_generation)
            if mask.any():
                tree.split(np.flatnonzero(mask), schedule.plan)
                tree.enforce_cap(schedule.leaf_cap, schedule.on_cap)
        tree.step(potential, dt)
        if callback is not None:
            callback(tree, step)
    return tree


def superpose(tree: BranchTree, grid: Grid, tail_tol: float = 1e-12) -> SchrodingerField:
    """Amplitude-weighted coherent sum of the leaves on a 1D grid."""
    if grid.dims != 1:
        raise ValueError("branch trees are one-dimensional")
    x = grid.axes()[0]
    b = tree.batch
    gam = b.total_gamma()
    coef = tree.amplitudes() * b.prefactor() * np.exp(1j * b.S / b.hbar)
    psi = np.zeros(x.shape, dtype=complex)
    escaped = []
    for k in range(len(b)):
        dx = x - b.q[k]
        part = coef[k] * np.exp(-gam[k] * dx * dx + 1j * b.p[k] * dx / b.hbar)
        rho = part.real ** 2 + part.imag ** 2
        top = rho.max()
        if top > 0 and _boundary_max(rho) > tail_tol * top:
            escaped.append(int(tree.leaf_ids[k]))
        psi += part
    if escaped:
        warnings.warn(f"{len(escaped)} leaves extend past the grid (first ids {escaped[:5]})",
                      LeafEscapeWarning, stacklevel=2)
    return SchrodingerField.from_psi(grid, psi, b.t, b.hbar, b.mass)


def norm_audit(tree: BranchTree, grid: Grid) -> dict:
    """Superposed L2 norm against the accumulated truncation budget."""
    f = superpose(tree, grid)
    norm = math.sqrt(f.norm())
    root = abs(tree.nodes[0].amplitude)
    return {"norm": norm, "expected": root, "budget": tree.budget,
            "within": abs(norm - root) <= tree.budget + 1e-12 * max(root, 1.0)}


def overlap(a: SchrodingerField, b: SchrodingerField) -> float:
    """|<a|b>| / (|a| |b|)."""
    dv = a.grid.cell_volume
    num = abs(np.vdot(a.psi, b.psi)) * dv
    return float(num / math.sqrt(a.norm() * b.norm()))
