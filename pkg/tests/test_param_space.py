import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oneworld.core_fields import PotentialSpec
from oneworld.errors import GradientValidationError, SingularGeometryError
from oneworld.param_space import (
    CoherentState, ParameterState, SkewedGaussian, TwoGaussianSum, alternate_compose, check_geometry,
    circle_loop, dynamical_pair_check, flux_flow_step, flux_generator, flux_identity, hamilton_flow,
    hamilton_flow_step, loop_action, loop_action_invariant, parameter_fluxes,
    parameter_fluxes_numeric, transport_loop, validate_gradients, wellposedness_determinant,
)

HARM = PotentialSpec.harmonic(1.0)
FREE = PotentialSpec.free()

# frozen from an independent 200001-point grid quadrature of -hbar Im<psi|d psi/d p0>
# for alpha = 0.5, c = 0.3, q0 = 0.4, p0 = 0.7
SKEWED_JV = -0.2870813397044205
# frozen from a direct flux-flow vs Hamilton-flow run: one step dt = 0.1 from (1, 0)
SKEWED_CORRECTION = (-0.0014348875697023367, -0.028672590044503454)


def state(u, v):
    return ParameterState(np.atleast_1d(np.asarray(u, float)), np.atleast_1d(np.asarray(v, float)))


def test_state_validation():
    with pytest.raises(ValueError):
        ParameterState(np.zeros(2), np.zeros(1))
    with pytest.raises(ValueError):
        ParameterState(np.array([np.nan]), np.zeros(1))


# ---------------------------------------------------------------- fluxes

def test_coherent_fluxes():
    fam = CoherentState(HARM, alpha=0.5)
    ju, jv = parameter_fluxes(fam, state(0.3, 1.7))
    assert ju[0] == 1.7 and jv[0] == 0.0


def test_coherent_fluxes_numeric_cross_check():
    fam = CoherentState(HARM, alpha=0.5)
    ju, jv = parameter_fluxes_numeric(fam, state(0.3, 1.7))
    assert abs(ju[0] - 1.7) < 1e-6 and abs(jv[0]) < 1e-6


def test_skewed_flux_matches_quadrature_oracle():
    fam = SkewedGaussian(HARM, alpha=0.5, c=0.3)
    _, jv = parameter_fluxes(fam, state(0.4, 0.7))
    assert abs(jv[0] - SKEWED_JV) < 1e-10


def test_two_gaussian_fluxes_numeric_cross_check():
    fam = TwoGaussianSum(HARM, alpha=0.5, weights=(0.3, 0.7))
    s = state([-1.0, 0.8], [0.2, -0.3])
    ana = parameter_fluxes(fam, s)
    num = parameter_fluxes_numeric(fam, s)
    assert np.allclose(ana[0], num[0], atol=1e-6) and np.allclose(ana[1], num[1], atol=1e-6)


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("fam,s", [
    (CoherentState(HARM, 0.5), state(0.7, -0.4)),
    (SkewedGaussian(PotentialSpec.gaussian_barrier(1.0, 1.0), 0.5, c=0.4), state(0.7, -0.4)),
    (TwoGaussianSum(PotentialSpec.eckart(1.0, 1.5), 0.6), state([-1.0, 1.2], [0.3, -0.2])),
])
def test_gradients_match_finite_differences(fam, s):
    assert validate_gradients(fam, s, rtol=1e-6) < 1e-6


def test_gradient_validation_raises():
    class Broken(CoherentState):
        def grad(self, u, v):
            hu, hv = super().grad(u, v)
            return hu + 1.0, hv

    with pytest.raises(GradientValidationError):
        validate_gradients(Broken(HARM, 0.5), state(0.5, 0.5))


# ---------------------------------------------------------------- flows

def test_coherent_hamilton_flow_ellipse_and_energy():
    fam = CoherentState(HARM, alpha=0.5)
    s = state(1.0, 0.0)
    n = int(round(10 * 2 * math.pi / 1e-2))
    rep = hamilton_flow(fam, s, 1e-2, n)
    t = rep.times
    assert np.max(np.abs(rep.u[:, 0] - np.cos(t))) < 1e-6
    assert np.max(np.abs(rep.v[:, 0] + np.sin(t))) < 1e-6
    assert np.max(np.abs(rep.energy - rep.energy[0])) < 1e-8


def test_energy_drift_per_step_small():
    fam = CoherentState(HARM, alpha=0.5)
    s = state(1.0, 0.3)
    s1 = hamilton_flow_step(fam, s, 1e-3)
    assert abs(fam.energy(s1.u, s1.v) - fam.energy(s.u, s.v)) < 1e-10


def test_free_coherent_flow():
    fam = CoherentState(FREE, alpha=0.5, mass=2.0)
    rep = hamilton_flow(fam, state(0.5, 1.0), 0.01, 300)
    assert np.all(rep.v[:, 0] == 1.0)
    assert np.max(np.abs(rep.u[:, 0] - (0.5 + 0.5 * rep.times))) < 1e-12


@pytest.mark.parametrize("fam,s", [
    (CoherentState(HARM, 0.5), state(1.0, 0.2)),
    (SkewedGaussian(PotentialSpec.gaussian_barrier(1.0, 1.0), 0.5, c=0.4), state(-1.0, 0.5)),
    (TwoGaussianSum(HARM, 0.6), state([-2.0, 2.0], [0.1, -0.1])),
])
def test_time_reversal(fam, s):
    fwd = s
    for _ in range(20):
        fwd = hamilton_flow_step(fam, fwd, 0.01)
    back = fwd
    for _ in range(20):
        back = hamilton_flow_step(fam, back, -0.01)
    assert np.max(np.abs(back.z - s.z)) < 1e-10


def test_flux_step_coherent_equals_hamilton():
    fam = CoherentState(PotentialSpec.gaussian_barrier(1.0, 1.0), alpha=0.5)
    s = state(-0.5, 0.8)
    a = flux_flow_step(fam, s, 0.05)
    # the flux step brackets W between two energy half steps; W vanishes here
    b = hamilton_flow_step(fam, hamilton_flow_step(fam, s, 0.025), 0.025)
    assert np.max(np.abs(a.z - b.z)) < 1e-10
    assert np.max(np.abs(a.z - hamilton_flow_step(fam, s, 0.05).z)) < 1e-7


def test_flux_step_zero_dt_identity():
    fam = SkewedGaussian(HARM, 0.5, c=0.3)
    s = state(0.4, 0.2)
    assert np.array_equal(flux_flow_step(fam, s, 0.0).z, s.z)


def test_flux_step_skewed_correction_frozen():
    fam = SkewedGaussian(HARM, alpha=0.5, c=0.3)
    s = state(1.0, 0.0)
    d = flux_flow_step(fam, s, 0.1).z - hamilton_flow_step(fam, s, 0.1).z
    assert np.allclose(d, SKEWED_CORRECTION, rtol=1e-6, atol=0)


def test_flux_generator_conserved():
    fam = SkewedGaussian(PotentialSpec.gaussian_barrier(1.0, 1.5), alpha=0.5, c=0.3)
    s = state(-1.0, 0.6)
    k0 = float(flux_generator(fam, s.u, s.v))
    for _ in range(10):
        s = flux_flow_step(fam, s, 1e-3)
        assert abs(float(flux_generator(fam, s.u, s.v)) - k0) < 1e-8


def test_alternate_coherent_equals_hamilton():
    fam = CoherentState(HARM, alpha=0.5)
    s = state(1.0, 0.5)
    a = alternate_compose(fam, s, 0.01, 200)
    # each macro step is four energy quarter steps when W vanishes
    h = hamilton_flow(fam, s, 0.0025, 800)
    assert np.max(np.abs(a.u - h.u[::4])) < 1e-10 and np.max(np.abs(a.v - h.v[::4])) < 1e-10


def test_alternate_zero_steps():
    fam = SkewedGaussian(HARM, 0.5, c=0.3)
    s = state(0.4, 0.2)
    rep = alternate_compose(fam, s, 0.01, 0)
    assert np.array_equal(rep.final.u, s.u) and np.array_equal(rep.final.v, s.v)


def test_alternate_composition_second_order():
    # defect against a fine reference of the same composition
    fam = SkewedGaussian(HARM, alpha=0.5, c=0.3)
    s = state(1.0, 0.0)
    T = 0.4
    ref = alternate_compose(fam, s, T / 256, 256, diagnostics=False).final.z
    errs = [np.max(np.abs(alternate_compose(fam, s, T / n, n, diagnostics=False).final.z - ref))
            for n in (4, 8)]
    assert 3.6 < errs[0] / errs[1] < 4.4


def test_plain_alternation_first_order():
    fam = SkewedGaussian(HARM, alpha=0.5, c=0.3)
    s = state(1.0, 0.0)
    T = 0.4
    ref = alternate_compose(fam, s, T / 256, 256, symmetric=False, diagnostics=False).final.z
    errs = [np.max(np.abs(alternate_compose(fam, s, T / n, n, symmetric=False,
                                            diagnostics=False).final.z - ref)) for n in (4, 8)]
    assert 1.6 < errs[0] / errs[1] < 2.4


def test_skewed_alternate_differs_from_hamilton():
    fam = SkewedGaussian(HARM, alpha=0.5, c=0.3)
    s = state(1.0, 0.0)
    a = alternate_compose(fam, s, 0.01, 100, diagnostics=False)
    h = hamilton_flow(fam, s, 0.01, 100)
    assert np.max(np.abs(a.u - h.u)) > 1e-4


# ---------------------------------------------------------------- diagnostics

def test_pair_checks():
    assert dynamical_pair_check(CoherentState(HARM, 0.5), state(0.3, 1.1), 1e-10).all()
    assert not dynamical_pair_check(SkewedGaussian(HARM, 0.5, c=0.3), state(0.3, 1.1), 1e-10).any()
    two = TwoGaussianSum(HARM, 0.5)
    assert dynamical_pair_check(two, state([-6.0, 6.0], [0.2, -0.1]), 1e-6).all()
    assert not dynamical_pair_check(two, state([-0.3, 0.3], [0.2, -0.1]), 1e-6).all()


def test_pair_check_follows_overlap_decay():
    # the pair defect of the sum tracks the packet overlap exp(-alpha d^2 / 2)
    two = TwoGaussianSum(HARM, 0.5)
    prev = np.inf
    for d in (2.0, 3.0, 4.0, 6.0, 8.0):
        ju, jv = two.fluxes(np.array([-d / 2, d / 2]), np.array([0.2, -0.1]))
        defect = max(np.max(np.abs(ju - [0.2, -0.1])), np.max(np.abs(jv)))
        assert defect < prev
        assert defect < 10 * math.exp(-0.5 * d * d / 2) * d
        prev = defect


def test_wellposedness_determinant():
    fam = CoherentState(HARM, 0.5)
    rep = hamilton_flow(fam, state(1.0, 0.0), 0.05, 40)
    for u, v in zip(rep.u, rep.v):
        assert np.all(np.abs(wellposedness_determinant(fam, ParameterState(u, v))) < 1e-8)
    sk = SkewedGaussian(PotentialSpec.gaussian_barrier(1.0, 1.0), 0.5, c=0.4)
    assert np.all(np.abs(wellposedness_determinant(sk, state(0.5, 0.9))) > 1e-6)


def test_wellposedness_zero_rows():
    fam = CoherentState(FREE, 0.5)
    assert np.all(wellposedness_determinant(fam, state(0.0, 0.0)) == 0.0)


def test_flux_identity():
    fam = SkewedGaussian(HARM, 0.5, c=0.3)
    s = state(0.4, 0.7)
    recon, direct = flux_identity(fam, s, np.array([0.3]), np.array([-0.8]))
    assert abs(recon - direct) < 1e-8


def test_singular_geometry():
    class Degenerate(CoherentState):
        def psi(self, u, v, x):
            return super().psi(np.zeros_like(np.asarray(u)), v, x)

    with pytest.raises(SingularGeometryError):
        check_geometry(Degenerate(HARM, 0.5), state(0.3, 0.2))


# ---------------------------------------------------------------- loop invariant

def test_loop_area_preserved_harmonic():
    fam = CoherentState(HARM, 0.5)
    loop = circle_loop([1.0], [0.0], 0.5, 256)
    before, after = loop_action_invariant(fam, loop, 2 * math.pi / 200, 2 * math.pi)
    # trapezoid area of the inscribed polygon, taken against the exact circle at 4096 vertices
    fine = loop_action(circle_loop([1.0], [0.0], 0.5, 4096), 1)
    assert abs(fine + math.pi * 0.25) < 1e-5
    assert abs(after - before) / abs(before) < 1e-3


def test_zero_radius_loop():
    fam = CoherentState(HARM, 0.5)
    before, after = loop_action_invariant(fam, circle_loop([1.0], [0.0], 0.0, 16), 0.1, 1.0)
    assert before == 0.0 and after == 0.0


def test_free_shear_preserves_area():
    fam = CoherentState(FREE, 0.5)
    loop = circle_loop([0.0], [0.0], 1.0, 128)
    moved = transport_loop(fam, loop, 0.1, 3.0)
    # analytic free map: u -> u + v t
    assert np.allclose(moved[:, 0], loop[:, 0] + 3.0 * loop[:, 1], atol=1e-12)
    assert abs(loop_action(moved, 1) - loop_action(loop, 1)) < 1e-12


def test_open_loop_rejected():
    fam = CoherentState(HARM, 0.5)
    with pytest.raises(ValueError):
        loop_action_invariant(fam, circle_loop([0.0], [0.0], 1.0, 8)[:-1], 0.1, 1.0)


@settings(max_examples=20, deadline=None)
@given(q0=st.floats(-2, 2), p0=st.floats(-2, 2), alpha=st.floats(0.2, 2.0))
def test_property_coherent_flows_coincide(q0, p0, alpha):
    fam = CoherentState(HARM, alpha)
    s = state(q0, p0)
    h = hamilton_flow_step(fam, hamilton_flow_step(fam, s, 0.025), 0.025)
    f = flux_flow_step(fam, s, 0.05, check=False)
    assert np.max(np.abs(h.z - f.z)) < 1e-9
    assert dynamical_pair_check(fam, s, 1e-10).all()


@settings(max_examples=20, deadline=None)
@given(q0=st.floats(-2, 2), p0=st.floats(-2, 2), c=st.floats(-0.8, 0.8))
def test_property_gradients(q0, p0, c):
    fam = SkewedGaussian(PotentialSpec.gaussian_barrier(1.0, 1.0), 0.5, c=c)
    assert validate_gradients(fam, state(q0, p0), rtol=1e-6) < 1e-6


def test_flow_report_csv(tmp_path):
    fam = CoherentState(HARM, 0.5)
    rep = alternate_compose(fam, state(1.0, 0.0), 0.1, 5)
    rep.write_csv(tmp_path / "f.csv")
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert rows[0].startswith("time,u0,v0,energy") and len(rows) == 7
