import numpy as np
import pytest

from homokin import boltzmann, hydro
from homokin.boltzmann import VelocityEnsemble
from homokin.deformation import DeformationMatrix
from homokin.errors import InsufficientSignal, NotNearEquilibrium
from homokin.models import HydroState, ViscosityLaw


def test_euler_shear_is_stationary(shear):
    series = hydro.euler_solve(HydroState(rho=1.2, theta=0.8), shear, 0.01, 2.0)
    assert all(s.rho == pytest.approx(1.2, abs=1e-14) for s in series)
    assert all(s.theta == pytest.approx(0.8, abs=1e-14) for s in series)


def test_euler_dilation_closed_form(expansion):
    state = HydroState(rho=1.0, theta=2.0)
    series = hydro.euler_solve(state, expansion, 0.001, 1.0)
    assert series[-1].rho == pytest.approx(1.0 / 8.0, rel=1e-10)
    assert series[-1].theta == pytest.approx(2.0 / 4.0, rel=1e-10)
    closed = hydro.euler_closed_form(state, expansion, 1.0)
    assert closed.rho == pytest.approx(1.0 / 8.0)
    assert closed.theta == pytest.approx(0.5)


def test_euler_at_rest(at_rest):
    series = hydro.euler_solve(HydroState(rho=1.0, theta=1.0), at_rest, 0.1, 1.0)
    assert [(s.rho, s.theta) for s in series] == [(1.0, 1.0)] * len(series)


@pytest.mark.parametrize("omega", [1.0, 0.5])
def test_navier_stokes_simple_shear_closed_form(omega):
    K = 1.5
    shear = DeformationMatrix.simple_shear(K)
    visc = ViscosityLaw(mu0=0.8, omega_exp=omega, epsilon=0.2)
    series = hydro.navier_stokes_solve(HydroState(rho=1.0, theta=1.0), shear, visc, 0.001, 2.0, stride=100)
    t = np.array([s.t for s in series])
    theta = np.array([s.theta for s in series])
    np.testing.assert_allclose(theta, hydro.ns_closed_form_simple_shear(1.0, K, visc, t), rtol=1e-8)


def test_sqrt_viscosity_closed_form_shape():
    visc = ViscosityLaw(mu0=1.0, omega_exp=0.5, epsilon=0.1)
    t = 3.0
    expected = (1.0 + 0.1 * t) ** 2
    assert float(hydro.ns_closed_form_simple_shear(1.0, 2.0, visc, t)) == pytest.approx(expected)


def test_zero_epsilon_matches_euler_bitwise():
    A = np.array([[0.1, 1.0, 0.0], [0.0, -0.05, 0.0], [0.0, 0.0, 0.2]])
    d = DeformationMatrix(A)
    state = HydroState(rho=1.0, theta=1.0)
    euler = hydro.euler_solve(state, d, 0.01, 1.0)
    ns = hydro.navier_stokes_solve(state, d, ViscosityLaw(mu0=3.0, epsilon=0.0), 0.01, 1.0)
    assert [(s.rho, s.theta) for s in euler] == [(s.rho, s.theta) for s in ns]


def test_ns_euler_gap_is_first_order_in_epsilon(shear):
    state = HydroState(rho=1.0, theta=1.0)
    euler = hydro.euler_solve(state, shear, 0.01, 1.0)[-1].theta
    gaps = []
    for eps in (0.1, 0.05, 0.025):
        ns = hydro.navier_stokes_solve(state, shear, ViscosityLaw(mu0=1.0, epsilon=eps), 0.01, 1.0)[-1].theta
        gaps.append(ns - euler)
    assert gaps[0] / gaps[1] == pytest.approx(2.0, rel=0.05)
    assert gaps[1] / gaps[2] == pytest.approx(2.0, rel=0.05)


def test_euler_series_has_small_residuals(expansion):
    series = hydro.euler_solve(HydroState(rho=1.0, theta=1.0), expansion, 0.001, 1.0)
    report = hydro.conservation_residual(hydro.moments_from_hydro(series), expansion)
    assert report.max_r1 < 1e-3
    assert report.max_r3 < 1e-3
    assert len(report.t) == len(series)


def test_residual_halves_twice_with_stride(expansion):
    def worst(stride):
        series = hydro.euler_solve(HydroState(rho=1.0, theta=1.0), expansion, 0.001, 1.0, stride=stride)
        return hydro.conservation_residual(hydro.moments_from_hydro(series), expansion).max_r1

    assert worst(20) / worst(10) == pytest.approx(4.0, rel=0.2)


def test_constant_series_has_zero_residuals(at_rest):
    series = hydro.moments_from_hydro([HydroState(rho=1.0, theta=1.0, t=0.1 * k) for k in range(10)])
    report = hydro.conservation_residual(series, at_rest)
    assert report.max_r1 == 0.0
    assert report.max_r3 == 0.0


def test_residual_requires_uniform_grid(at_rest):
    series = hydro.moments_from_hydro([HydroState(rho=1.0, theta=1.0, t=t) for t in (0.0, 0.1, 0.3, 0.4)])
    with pytest.raises(ValueError):
        hydro.conservation_residual(series, at_rest)


def test_dsmc_residuals_are_small(maxwell_kernel):
    shear = DeformationMatrix.simple_shear(0.5)
    ens = VelocityEnsemble.maxwellian(5000, seed=1)
    series = boltzmann.run_homoenergetic(ens, shear, maxwell_kernel, 0.02, 2.0)
    report = hydro.conservation_residual(series, shear)
    assert report.max_r1 < 1e-10
    assert report.max_r3 < 0.05


def _seed_residuals(deformation, kernel, n, dt, horizon, stride, seeds):
    r3 = []
    for seed in seeds:
        ens = VelocityEnsemble.maxwellian(n, seed=seed)
        series = boltzmann.run_homoenergetic(ens, deformation, kernel, dt, horizon, stride=stride)
        r3.append(hydro.conservation_residual(series, deformation).r3)
    return np.array(r3)


def test_dsmc_energy_residual_is_noise_around_zero(maxwell_kernel):
    shear = DeformationMatrix.simple_shear(0.5)
    r3 = _seed_residuals(shear, maxwell_kernel, 2000, 0.02, 2.0, 1, range(8))
    mean = r3.mean(axis=0)
    band = 3.0 * r3.std(axis=0, ddof=1) / np.sqrt(r3.shape[0])
    assert np.mean(np.abs(mean) <= band) >= 0.9


def test_dsmc_energy_residual_is_second_order(maxwell_kernel):
    # shear plus dilation, so the discretization error stands well above the sampling noise
    A = [[0.5, 1.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]]
    deformation = DeformationMatrix(A)

    def worst(dt):
        r3 = _seed_residuals(deformation, maxwell_kernel, 20_000, dt, 1.0, 5, range(8))
        return float(np.max(np.abs(r3.mean(axis=0))))

    assert 3.0 < worst(0.02) / worst(0.01) < 5.0


def test_calibration_recovers_viscosity():
    K = 1.0
    shear = DeformationMatrix.simple_shear(K)
    visc = ViscosityLaw(mu0=0.7, omega_exp=1.0, epsilon=0.1)
    series = hydro.navier_stokes_solve(HydroState(rho=1.0, theta=1.0), shear, visc, 0.001, 2.0, stride=20)
    cal = hydro.calibrate_viscosity(hydro.moments_from_hydro(series), shear, 1.0, 0.1)
    assert cal.mu0_hat == pytest.approx(0.7, rel=0.01)
    assert cal.ci_low <= cal.mu0_hat <= cal.ci_high
    assert cal.K == K
    assert cal.n_samples == len(series)


def test_calibration_interval_covers_truth_under_random_walk_noise():
    shear = DeformationMatrix.simple_shear(1.0)
    visc = ViscosityLaw(mu0=0.7, omega_exp=1.0, epsilon=0.1)
    clean = hydro.navier_stokes_solve(HydroState(rho=1.0, theta=1.0), shear, visc, 0.001, 2.0, stride=20)
    covered = 0
    for seed in range(40):
        walk = np.cumsum(np.random.default_rng(seed).normal(scale=0.002, size=len(clean)))
        noisy = [HydroState(rho=s.rho, theta=s.theta * (1.0 + w), t=s.t) for s, w in zip(clean, walk)]
        cal = hydro.calibrate_viscosity(hydro.moments_from_hydro(noisy), shear, 1.0, 0.1)
        covered += cal.ci_low <= 0.7 <= cal.ci_high
    assert covered >= 34


def test_calibration_rejects_flat_series():
    series = hydro.moments_from_hydro([HydroState(rho=1.0, theta=1.0, t=0.1 * k) for k in range(10)])
    with pytest.raises(InsufficientSignal):
        hydro.calibrate_viscosity(series, DeformationMatrix.simple_shear(0.0), 1.0, 0.1)


def test_calibration_rejects_anisotropic_series(shear, maxwell_kernel):
    ens = VelocityEnsemble.gaussian(1000, [3.0, 0.5, 0.5], seed=2)
    series = boltzmann.run_homoenergetic(ens, shear, maxwell_kernel, 0.05, 0.5, collisions=False)
    with pytest.raises(NotNearEquilibrium):
        hydro.calibrate_viscosity(series, shear, 1.0, 1.0)
