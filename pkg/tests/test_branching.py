import json
import math

import numpy as np
import pytest

from oneworld.adf_gaussian import ADFState, adf_step, evaluate_adf
from oneworld.branching import (
    BranchTree, LeafEscapeWarning, SplitSchedule, WeierstrassPlan, branch_propagate, leaf_width,
    norm_audit, overlap, reconstruct, split_trigger, superpose, weierstrass_split,
)
from oneworld.core_fields import Grid, PotentialSpec
from oneworld.errors import BudgetExceededError, InvalidPlanError

FREE = PotentialSpec.free()
HARM = PotentialSpec.harmonic(1.0)


@pytest.fixture
def grid():
    return Grid.line(-20.0, 20.0, 4096)


def root(q0=0.3, p0=0.0, gamma=1.0):
    return BranchTree(ADFState.initial(q0, p0, gamma)).nodes[0]


def l2(a, b, grid):
    return math.sqrt(float(np.sum(np.abs(a - b) ** 2)) * grid.cell_volume)


# ---------------------------------------------------------------- plan

def test_plan_resolve():
    g2, A = WeierstrassPlan(ratio=2.0).resolve(1.0)
    assert g2 == 2.0 and abs(A - 2.0) < 1e-15
    g2, A = WeierstrassPlan(gamma2_r=4.0, ratio=9.0).resolve(1.0)
    assert g2 == 4.0 and abs(A - 4.0 / 3.0) < 1e-15


@pytest.mark.parametrize("kw,g1", [({"ratio": 1.0}, 1.0), ({"gamma2_r": 0.5}, 1.0),
                                   ({"ratio": 2.0}, -1.0), ({"ratio": 2.0}, 0.0)])
def test_plan_rejects(kw, g1):
    with pytest.raises(InvalidPlanError):
        WeierstrassPlan(**kw).resolve(g1)


def test_plan_rejects_empty_quadrature():
    with pytest.raises(InvalidPlanError):
        WeierstrassPlan(n_q=0)


def test_quadrature_integrates_gaussian_moments():
    w, wt = WeierstrassPlan(n_q=12).quadrature(2.0)
    assert abs(np.sum(wt) - math.sqrt(math.pi / 2.0)) < 1e-13
    assert abs(np.sum(wt * w * w) - math.sqrt(math.pi / 2.0) / 4.0) < 1e-13


# ---------------------------------------------------------------- split

def test_real_exponent_daughters_share_momentum():
    fam = weierstrass_split(root(p0=0.7), WeierstrassPlan(n_q=8))
    assert all(d.p == 0.7 for d in fam)
    assert all(d.momentum_check() for d in fam)


def test_chirped_daughter_momentum():
    node = root(p0=1.0, gamma=complex(1.0, 0.5))
    fam = weierstrass_split(node, WeierstrassPlan(n_q=8))
    for d in fam:
        assert d.momentum_check()
        assert abs(d.p - (1.0 - 2.0 * 0.5 * d.omega)) < 1e-15
    # one displacement worked by hand: p0 = 1, gamma_c = 0.5, omega = 0.2 gives 0.8
    assert 1.0 - 2.0 * 1.0 * 0.5 * 0.2 == pytest.approx(0.8)


def test_daughters_positions_and_widths():
    fam = weierstrass_split(root(q0=0.3), WeierstrassPlan(ratio=2.0, n_q=6))
    assert np.allclose([d.q - 0.3 for d in fam], [d.omega for d in fam])
    for d in fam:
        assert abs(d.state.total_gamma() - 2.0) < 1e-14
        assert abs(leaf_width(d.state) - 1 / math.sqrt(2.0)) < 1e-14


def test_reconstruction_converges_in_n_q(grid):
    errs = []
    for n_q in (4, 8, 16, 32):
        _, err = reconstruct(weierstrass_split(root(), WeierstrassPlan(gamma2_r=2.0, n_q=n_q)), grid)
        errs.append(err)
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-10


def test_chirped_reconstruction(grid):
    fam = weierstrass_split(root(p0=1.0, gamma=complex(1.0, 0.5)), WeierstrassPlan(gamma2_r=2.0, n_q=32))
    _, err = reconstruct(fam, grid)
    assert err < 1e-10


def test_reconstruct_requires_daughters(grid):
    with pytest.raises(ValueError):
        reconstruct([], grid)


# ---------------------------------------------------------------- tree

def test_unsplit_leaf_is_the_adf_packet(grid):
    s = ADFState.initial(-2.0, 1.0, complex(0.5, 0.2))
    tree = branch_propagate(BranchTree(s), FREE, 0.01, 200)
    ref = s
    for _ in range(200):
        ref = adf_step(ref, FREE, 0.01)
    assert len(tree.leaves) == 1
    assert np.max(np.abs(superpose(tree, grid).psi - evaluate_adf(ref, grid).psi)) < 1e-12


def test_split_then_free_matches_unsplit(grid):
    s = ADFState.initial(-1.0, 1.0, complex(1.0, 0.3))
    tree = BranchTree(s)
    tree.split(plan=WeierstrassPlan(gamma2_r=2.0, n_q=32))
    branch_propagate(tree, FREE, 0.01, 100)
    ref = s
    for _ in range(100):
        ref = adf_step(ref, FREE, 0.01)
    assert l2(superpose(tree, grid).psi, evaluate_adf(ref, grid).psi, grid) < 1e-8


def test_symmetric_split_density(grid):
    tree = BranchTree(ADFState.initial(0.0, 0.0, 1.0))
    tree.split(plan=WeierstrassPlan(n_q=9))
    branch_propagate(tree, HARM, 0.01, 100)
    rho = np.abs(superpose(tree, grid).psi) ** 2
    # grid is symmetric about zero apart from the extra node at the low end
    assert np.max(np.abs(rho[1:] - rho[1:][::-1])) < 1e-12


def test_split_budget_accumulates():
    tree = BranchTree(ADFState.initial(0.0, 0.0, 1.0))
    tree.split(plan=WeierstrassPlan(n_q=4))
    b1 = tree.budget
    tree.split([0], WeierstrassPlan(n_q=4))
    assert 0 < b1 < tree.budget
    assert tree.n_splits == 2 and len(tree.leaves) == 7
    assert sorted(tree.generations().tolist()) == [1, 1, 1, 2, 2, 2, 2]


def test_amp_floor_drops_small_daughters():
    tree = BranchTree(ADFState.initial(0.0, 0.0, 1.0))
    fam = tree.split(plan=WeierstrassPlan(n_q=20, amp_floor=1e-3))[0]
    assert 0 < len(fam) < 20
    assert len(tree.leaves) == len(fam)


# ---------------------------------------------------------------- trigger

def test_split_trigger_cases():
    barrier = PotentialSpec.gaussian_barrier(1.0, 0.5)
    wide = ADFState.initial(-1.0, 1.0, 0.1)
    narrow = ADFState.initial(-1.0, 1.0, 20.0)
    assert split_trigger(wide, barrier)
    assert not split_trigger(narrow, barrier)
    assert not split_trigger(wide, HARM)
    assert not split_trigger(ADFState.initial(-30.0, 1.0, 0.1), barrier)


def test_schedule_times_and_every():
    s = SplitSchedule(times=(0.5,))
    assert s.due(0, 0.5, 0.01) and not s.due(0, 0.52, 0.01)
    s = SplitSchedule(every=10)
    assert s.due(20, 0.0, 0.01) and not s.due(21, 0.0, 0.01)
    assert not SplitSchedule().due(0, 0.0, 0.01)
    with pytest.raises(ValueError):
        SplitSchedule(on_cap="ignore")
    with pytest.raises(ValueError):
        SplitSchedule(every=-1)


def test_max_generation_limits_splits():
    barrier = PotentialSpec.gaussian_barrier(1.0, 0.5)
    tree = BranchTree(ADFState.initial(-1.5, 1.0, 0.1))
    sched = SplitSchedule(every=1, plan=WeierstrassPlan(n_q=3), max_generation=2)
    branch_propagate(tree, barrier, 0.01, 5, sched)
    assert tree.generations().max() == 2


# ---------------------------------------------------------------- caps

def test_cap_prune():
    tree = BranchTree(ADFState.initial(0.0, 0.0, 1.0))
    tree.split(plan=WeierstrassPlan(n_q=10))
    amps = np.sort(np.abs(tree.amplitudes()))
    tree.enforce_cap(6)
    assert len(tree.leaves) == 6
    assert abs(tree.pruned_norm - np.sum(amps[:4])) < 1e-15
    assert set(np.abs(tree.amplitudes())) == set(amps[4:])


def test_cap_raise():
    tree = BranchTree(ADFState.initial(0.0, 0.0, 1.0))
    tree.split(plan=WeierstrassPlan(n_q=10))
    with pytest.raises(BudgetExceededError):
        tree.enforce_cap(6, "raise")
    tree.enforce_cap(10, "raise")


# ---------------------------------------------------------------- audit and output

@pytest.mark.parametrize("potential", [FREE, HARM])
def test_norm_audit_quadratic(potential):
    grid = Grid.line(-40.0, 40.0, 8192)
    tree = BranchTree(ADFState.initial(0.5, 0.5, complex(1.0, 0.2)))
    sched = SplitSchedule(plan=WeierstrassPlan(n_q=24, amp_floor=1e-12))
    # quadratic potentials never trigger, so split by hand
    tree.split(plan=sched.plan)
    branch_propagate(tree, potential, 0.01, 100)
    tree.split(plan=sched.plan)
    branch_propagate(tree, potential, 0.01, 100)
    audit = norm_audit(tree, grid)
    assert audit["within"], audit


def test_superpose_warns_on_escaped_leaf():
    tree = BranchTree(ADFState.initial(0.0, 0.0, 0.05))
    with pytest.warns(LeafEscapeWarning):
        superpose(tree, Grid.line(-10.0, 10.0, 256))
    with pytest.raises(ValueError):
        superpose(tree, Grid.plane([-5, -5], [5, 5], [16, 16]))


def test_jsonl(tmp_path):
    tree = BranchTree(ADFState.initial(0.0, 0.0, 1.0))
    tree.split(plan=WeierstrassPlan(n_q=3))
    tree.write_jsonl(tmp_path / "t.jsonl")
    recs = [json.loads(line) for line in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert len(recs) == 4
    assert set(recs[0]) == {"id", "parent", "t_split", "omega", "q", "p", "c", "d", "amp_re", "amp_im"}
    assert recs[0]["parent"] is None and all(r["parent"] == 0 for r in recs[1:])


def test_overlap_of_identical_fields(grid):
    f = evaluate_adf(ADFState.initial(0.0, 1.0, 0.5), grid)
    assert abs(overlap(f, f) - 1.0) < 1e-14
