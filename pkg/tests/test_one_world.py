import math

import numpy as np
import pytest
from scipy import signal, stats

from oneworld import kernels
from oneworld.core_fields import (Grid, PotentialSpec, SchrodingerField, density, init_coherent_state,
                                  local_velocity, propagate_complex)
from oneworld.errors import OutOfSpanError
from oneworld.one_world import (
    DoubleSlitConfig, FieldSequence, PathState, classical_limit_trajectory, crank_nicolson_green,
    double_slit_run, drift_velocity, feynman_kac_estimate, heat_kernel, imaginary_drift,
    integrate_quantum_hamilton, ks_distance, mehler_kernel, sample_ensemble, single_slit_chi2,
    step_path, wiener_increments,
)


def plane_wave_sequence(k=None, n_steps=20, dt=1e-3, mass=1.0):
    g = Grid.line(0.0, 2 * math.pi * 4, 256)
    k = g.wavenumbers()[0][3] if k is None else k
    x = g.axes()[0]
    f = SchrodingerField(g, np.cos(k * x), np.sin(k * x), 0.0, 1.0, mass)
    return FieldSequence.from_propagation(f, PotentialSpec.free(), dt, n_steps, 5), k


@pytest.fixture(scope="module")
def free_seq():
    g = Grid.line(-30.0, 30.0, 1024)
    f = init_coherent_state(g, 0.0, 1.0, 0.25)
    return FieldSequence.from_propagation(f, PotentialSpec.free(), 1e-3, 400, 10)


# ---------------------------------------------------------------- noise

def test_wiener_second_moment():
    D, dt = 0.5, 1e-3
    dw = wiener_increments(1, 0, np.arange(1_000_000, dtype=np.uint64), dt, D)[:, 0]
    sq = dw * dw
    se = sq.std() / math.sqrt(sq.size)
    assert abs(sq.mean() - 2 * D * dt) < 3 * se


def test_philox_streams_are_reproducible():
    ids = np.arange(5, dtype=np.uint64)
    a = kernels.normal_pairs(7, 3, kernels.PURPOSE_STEP, ids)
    b = kernels.normal_pairs(7, 3, kernels.PURPOSE_STEP, ids[::-1])
    assert np.array_equal(a, b[::-1])
    assert not np.array_equal(a, kernels.normal_pairs(7, 4, kernels.PURPOSE_STEP, ids))


# ---------------------------------------------------------------- drift

def test_plane_wave_drift():
    seq, k = plane_wave_sequence(mass=2.0)
    v, fl = drift_velocity(seq, np.linspace(0.3, 20.0, 17), 0.0123)
    assert np.allclose(v, k / 2.0, atol=1e-10) and not fl.any()


def test_real_field_drift_is_zero():
    g = Grid.line(-20.0, 20.0, 512)
    f = init_coherent_state(g, 0.0, 0.0, 0.5)
    seq = FieldSequence([f])
    v, _ = drift_velocity(seq, np.linspace(-2, 2, 9), 0.0)
    assert np.all(v == 0.0)


def test_drift_at_packet_center(free_seq):
    # free coherent state keeps p0 = 1, the center moves at unit speed
    for t in (0.0, 0.2, 0.35):
        v, _ = drift_velocity(free_seq, [1.0 * t], t)
        assert abs(v[0, 0] - 1.0) < 1e-6


def test_drift_matches_local_velocity(free_seq):
    f = free_seq.snapshot(10)
    x = f.grid.axes()[0]
    ref = local_velocity(f).data[0]
    nodes = x[400:620:7]
    v, _ = drift_velocity(free_seq, nodes, f.time)
    assert np.max(np.abs(v[:, 0] - ref[400:620:7])) < 1e-12
    # midpoints against a fine spectral interpolation of the same field
    fine = Grid.line(-30.0, 30.0, 8192)
    psi = signal.resample(f.psi, 8192)
    fv = local_velocity(SchrodingerField.from_psi(fine, psi, f.time)).data[0]
    mids = nodes + 0.5 * f.grid.spacing[0]
    v, _ = drift_velocity(free_seq, mids, f.time)
    assert np.max(np.abs(v[:, 0] - np.interp(mids, fine.axes()[0], fv))) < 1e-6


def test_drift_out_of_span(free_seq):
    with pytest.raises(OutOfSpanError):
        drift_velocity(free_seq, [0.0], 5.0)


def test_imaginary_drift():
    g = Grid.line(-20.0, 20.0, 512)
    gamma = 0.5
    f = init_coherent_state(g, 1.0, 0.0, gamma)
    w = math.sqrt(1.0 / (2 * gamma))        # rho ~ exp(-(x - q0)^2 / w^2)
    D = 0.5
    a = imaginary_drift(f, [1.0 + w, 1.0])
    assert abs(a[0, 0] - D * 2 * w / w ** 2) < 1e-6
    assert abs(a[1, 0]) < 1e-10
    seq, _ = plane_wave_sequence()
    assert np.max(np.abs(imaginary_drift(seq.snapshot(0), np.linspace(1, 20, 5)))) < 1e-10


# ---------------------------------------------------------------- path steps

def test_zero_noise_plane_wave_step():
    seq, k = plane_wave_sequence()
    st = PathState.start([1.0, 2.0, 3.0], 0.0, [0, 1, 2])
    out = step_path(st, seq, 1e-3, noise=False)
    assert np.allclose(out.x[:, 0] - st.x[:, 0], k * 1e-3, atol=1e-15)


def test_step_reproducible(free_seq):
    st = PathState.start([0.1, -0.3], 0.0, [5, 9], seed=4)
    a = step_path(step_path(st, free_seq, 1e-3), free_seq, 1e-3)
    b = step_path(step_path(st, free_seq, 1e-3), free_seq, 1e-3)
    assert np.array_equal(a.x, b.x)


def test_step_rejects_bad_dt(free_seq):
    with pytest.raises(ValueError):
        step_path(PathState.start([0.0], 0.0, [0]), free_seq, 0.0)


def test_wiener_variance_growth():
    # broad rest Gaussian: the drift is negligible, increments are pure Wiener
    g = Grid.line(-80.0, 80.0, 1024)
    f = init_coherent_state(g, 0.0, 0.0, 1.0 / (4 * 10.0 ** 2))
    seq = FieldSequence.from_propagation(f, PotentialSpec.free(), 1e-2, 50, 10)
    ens = sample_ensemble(seq, 4000, 1e-2, seed=2)
    d = ens.endpoints[:, 0] - ens.positions[0, :, 0]
    t = 0.5
    var = d.var()
    se = var * math.sqrt(2.0 / (d.size - 1))
    assert abs(var - t) < 3 * se


def test_quantum_hamilton_free_momentum_constant(free_seq):
    path = integrate_quantum_hamilton([0.0], free_seq, PotentialSpec.free(), 1e-3, 100, seed=1)
    assert np.all(path.momenta == path.momenta[0])
    again = integrate_quantum_hamilton([0.0], free_seq, PotentialSpec.free(), 1e-3, 100, seed=1)
    assert np.array_equal(path.positions, again.positions)


def test_quantum_hamilton_harmonic_force():
    g = Grid.line(-64.0, 64.0, 1024)
    f = init_coherent_state(g, 0.0, 0.0, 1.0 / (4 * 8.0 ** 2))
    V = PotentialSpec.harmonic(1.0)
    seq = FieldSequence.from_propagation(f, V, 1e-3, 200, 10)
    path = integrate_quantum_hamilton([0.5], seq, V, 1e-3, 200, seed=3)
    dP = np.diff(path.momenta[:, 0]) / 1e-3
    X = path.positions[:-1, 0]
    rho = np.interp(X, g.axes()[0], density(f))
    # rho is nearly constant near the center, so dP/dt ~ -rho * omega^2 X
    assert np.max(np.abs(dP + rho * X) / np.abs(rho * X)) < 0.05


# ---------------------------------------------------------------- classical limit

def test_classical_harmonic_ten_periods():
    dt = 2e-4
    n = int(round(10 * 2 * math.pi / dt))
    tr = classical_limit_trajectory(1.0, 0.0, PotentialSpec.harmonic(1.0), dt, n)
    assert np.max(np.abs(tr.positions[:, 0] - np.cos(tr.times))) < 1e-6


def test_classical_energy_bounded():
    tr = classical_limit_trajectory(1.0, 0.5, PotentialSpec.harmonic(1.0), 2e-4, 100_000)
    e = 0.5 * tr.momenta[:, 0] ** 2 + 0.5 * tr.positions[:, 0] ** 2
    assert np.max(np.abs(e - e[0])) < 1e-8


def test_classical_free_straight_line():
    tr = classical_limit_trajectory(0.5, 1.5, PotentialSpec.free(), 0.01, 1000, mass=2.0)
    assert np.max(np.abs(tr.positions[:, 0] - (0.5 + 0.75 * tr.times))) < 1e-12
    assert np.all(tr.momenta == 1.5)


def test_zero_noise_follows_classical_path():
    # near-delta packet: hbar small, coherent width, half a harmonic period
    hb = 0.01
    g = Grid.line(-3.0, 3.0, 1024)
    f = init_coherent_state(g, 1.0, 0.0, 1.0 / (2.0 * hb), hbar=hb)
    V = PotentialSpec.harmonic(1.0)
    n = int(round(math.pi / 1e-3))
    seq = FieldSequence.from_propagation(f, V, math.pi / n, n, 1)
    dtp = math.pi / n / 5
    ens = sample_ensemble(seq, 1, dtp, noise=False, x0=[[1.0]])
    cl = classical_limit_trajectory(1.0, 0.0, V, dtp, 5 * n)
    assert np.max(np.abs(ens.positions[:, 0, 0] - cl.positions[:, 0])) < 1e-4


# ---------------------------------------------------------------- ensembles

def test_empty_ensemble(free_seq):
    ens = sample_ensemble(free_seq, 0, 1e-3)
    assert len(ens) == 0 and ens.endpoints.shape == (0, 1)


def test_ensemble_threads_do_not_change_results(free_seq):
    a = sample_ensemble(free_seq, 64, 1e-3, seed=9, record_every=50)
    b = sample_ensemble(free_seq, 64, 1e-3, seed=9, record_every=50, threads=3)
    assert np.array_equal(a.positions, b.positions)


def test_ensemble_ks_envelope():
    # broad packet: the Wiener excess hbar t / m is small next to the width squared
    g = Grid.line(-40.0, 40.0, 1024)
    f = init_coherent_state(g, 0.0, 0.0, 1.0 / (4 * 5.0 ** 2))
    seq = FieldSequence.from_propagation(f, PotentialSpec.free(), 1e-3, 500, 10)
    rho = density(seq.snapshot(len(seq.times) - 1))
    for n in (2000, 8000):
        ens = sample_ensemble(seq, n, 1e-3, seed=21, record_every=500)
        assert ks_distance(ens.endpoints[:, 0], g, rho) < 2.5 / math.sqrt(n)


def test_path_variance_follows_the_sde(free_seq):
    # For a free Gaussian the drift is linear, X = s(t) [X0/s0 + sqrt(hbar/m) int dW/s], so
    # Var X_T = s(T)^2 (1 + 2 atan(T / (2 s0^2))) with hbar = m = 1, s0 = 1. The grid
    # density has variance s(T)^2 only: the Wiener term is not compensated.
    T, s0 = 0.4, 1.0
    s2 = s0 ** 2 * (1 + (T / (2 * s0 ** 2)) ** 2)
    ens = sample_ensemble(free_seq, 8000, 1e-3, seed=21, record_every=400)
    var = ens.endpoints[:, 0].var()
    se = var * math.sqrt(2.0 / 7999)
    assert abs(var - s2 * (1 + 2 * math.atan(T / (2 * s0 ** 2)))) < 3 * se
    assert var - s2 > 10 * se


def test_ks_distance_of_exact_quantiles():
    g = Grid.line(-20.0, 20.0, 512)
    rho = density(init_coherent_state(g, 0.0, 0.0, 0.5))
    h = g.spacing[0]
    edges = g.axes()[0][0] - 0.5 * h + h * np.arange(513)
    cdf = np.concatenate([[0], np.cumsum(rho)]) / rho.sum()
    n = 1000
    s = np.interp((np.arange(n) + 0.5) / n, cdf, edges)
    assert ks_distance(s, g, rho) <= 0.5 / n + 1e-12


# ---------------------------------------------------------------- double slit

SMALL_SLIT = dict(n_points=(128, 128), extent=20.0, x0=-8.0, p0=4.0, sigma_x=1.5, sigma_y=2.0,
                  wall_position=-4.0, slit_centers=(-1.5, 1.5), slit_widths=(1.0, 1.0),
                  detector_x=6.0, dt=0.01, n_steps=400, save_every=2, absorber_width=3.0,
                  n_bins=24, y_range=15.0)


@pytest.fixture(scope="module")
def small_slit():
    return double_slit_run(DoubleSlitConfig(**SMALL_SLIT, n_paths=6000, seed=5))


def test_double_slit_histogram_symmetric(small_slit):
    c = small_slit.counts.astype(float)
    a, b = c, c[::-1]
    sel = (a + b) > 0
    stat = np.sum((a[sel] - b[sel]) ** 2 / (a[sel] + b[sel])) / 2
    assert stats.chi2.sf(stat, sel.sum() // 2) > 1e-3


def test_double_slit_reference_symmetric(small_slit):
    r = small_slit.reference_density
    assert np.max(np.abs(r - r[::-1])) < 1e-6 * r.max()


def test_double_slit_no_paths():
    res = double_slit_run(DoubleSlitConfig(**SMALL_SLIT, n_paths=0))
    assert res.spots.shape == (0, 2) and res.counts.sum() == 0
    assert res.reference_density.max() > 0


def test_single_slit_chi2_identical_profiles():
    ref = np.exp(-np.linspace(-3, 3, 30) ** 2)
    counts = np.round(ref / ref.sum() * 10_000)
    _, _, p = single_slit_chi2(counts, ref)
    assert p > 0.99


# ---------------------------------------------------------------- Feynman-Kac

def test_fk_free_is_heat_kernel():
    xt = np.array([-1.0, 0.0, 0.7])
    est, se = feynman_kac_estimate(PotentialSpec.free(), 1.0, 0.5, xt, 1.0, 200, seed=1)
    assert np.allclose(est, heat_kernel(xt, 0.0, 1.0, 0.5), rtol=1e-14)
    assert np.all(se == 0.0)


def test_fk_constant_potential():
    g = Grid.line(-50.0, 50.0, 64)
    V0 = 0.8
    V = PotentialSpec.sampled(np.full(64, V0), g)
    xt = np.array([0.0, 1.0])
    est, _ = feynman_kac_estimate(V, 1.5, 0.5, xt, 1.0, 100, seed=2)
    assert np.allclose(est, heat_kernel(xt, 0.0, 1.0, 0.5) * math.exp(-1.5 * V0), rtol=1e-12)


def test_fk_harmonic_against_crank_nicolson():
    V = PotentialSpec.harmonic(1.0)
    xt = np.array([-0.8, 0.0, 1.1])
    est, se = feynman_kac_estimate(V, 1.0, 0.5, xt, 1.0, 20_000, n_steps=128, seed=11)
    x, G = crank_nicolson_green(V, 1.0, 0.5, 0.0, 1.0)
    ref = np.interp(xt, x, G)
    assert np.all(np.abs(est - ref) < 3 * se)


def test_crank_nicolson_against_mehler():
    x, G = crank_nicolson_green(PotentialSpec.harmonic(1.0), 1.0, 0.5, 0.0, 1.0)
    exact = mehler_kernel(x, 0.0, 1.0, 0.5, 1.0, 1.0)
    assert np.max(np.abs(G - exact)) < 1e-4 * exact.max()


def test_fk_rejects_bad_time():
    with pytest.raises(ValueError):
        feynman_kac_estimate(PotentialSpec.free(), 1.0, 0.5, 0.0, 0.0, 10)
