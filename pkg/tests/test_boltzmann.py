import logging

import numpy as np
import pytest

from homokin import boltzmann
from homokin.boltzmann import VelocityEnsemble
from homokin.deformation import DeformationMatrix
from homokin.errors import InsufficientGrowth
from homokin.models import CollisionKernel, Moments


def _anisotropy(m):
    P = np.array(m.P)
    return np.linalg.norm(P - m.rho * m.theta * np.eye(3), "fro")


def test_deformation_substep_shear(shear):
    ens = VelocityEnsemble([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]], 2.0)
    out = boltzmann.deformation_substep(ens, shear, 0.1)
    np.testing.assert_allclose(out.w[0], [-0.1, 1.0, 0.0], atol=1e-14)
    assert out.number_density == pytest.approx(2.0)
    assert out.t == pytest.approx(0.1)


def test_deformation_substep_identity(at_rest):
    ens = VelocityEnsemble.maxwellian(10, seed=1)
    out = boltzmann.deformation_substep(ens, at_rest, 0.3)
    np.testing.assert_array_equal(out.w, ens.w)


def test_deformation_substep_dilutes(expansion):
    ens = VelocityEnsemble.maxwellian(10, rho=1.0, seed=1)
    out = boltzmann.deformation_substep(ens, expansion, 1.0)
    assert out.number_density == pytest.approx(1 / 8)
    np.testing.assert_allclose(out.w, 0.5 * ens.w)


def test_scatter_conserves_momentum_and_energy():
    rng = np.random.default_rng(0)
    w, ws = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
    omega = rng.normal(size=(100, 3))
    omega /= np.linalg.norm(omega, axis=1, keepdims=True)
    a, b = boltzmann.scatter(w, ws, omega)
    np.testing.assert_allclose(a + b, w + ws, atol=1e-12)
    np.testing.assert_allclose(np.sum(a * a + b * b, axis=1), np.sum(w * w + ws * ws, axis=1), atol=1e-12)


def test_equal_velocities_do_not_change(maxwell_kernel):
    ens = VelocityEnsemble([[0.3, -0.2, 0.1], [0.3, -0.2, 0.1]], 1.0)
    out = boltzmann.collision_substep(ens, maxwell_kernel, 5.0)
    np.testing.assert_array_equal(out.w, ens.w)


@pytest.mark.parametrize("kind", ["maxwell", "hard_sphere"])
def test_collisions_conserve_ensemble_energy(kind):
    kernel = CollisionKernel(kind=kind, b0=1.0, diameter=0.5, knudsen=1.0)
    ens = VelocityEnsemble.gaussian(2000, [3.0, 1.0, 0.5], seed=2)
    before = boltzmann.moments(ens)
    out = ens
    for _ in range(20):
        out = boltzmann.collision_substep(out, kernel, 0.05)
    after = boltzmann.moments(out)
    assert after.e == pytest.approx(before.e, rel=1e-12)
    np.testing.assert_allclose(after.u_w, before.u_w, atol=1e-12)
    assert after.rho == before.rho


def test_anisotropy_relaxes(maxwell_kernel, at_rest):
    ens = VelocityEnsemble.gaussian(5000, [3.0, 1.0, 0.5], seed=3)
    series = boltzmann.run_homoenergetic(ens, at_rest, maxwell_kernel, 0.1, 10.0, stride=10)
    gaps = [_anisotropy(m) for m in series]
    assert gaps[-1] < 0.1 * gaps[0]
    early = gaps[:6]
    assert all(b < a for a, b in zip(early, early[1:]))
    assert series[-1].e == pytest.approx(series[0].e, rel=1e-12)


def test_collision_remainder_is_carried(maxwell_kernel):
    ens = VelocityEnsemble.maxwellian(10, seed=4)
    # 0.5 * 10 * 1 * 1 * 0.03 = 0.15 candidates per substep
    out = ens
    for _ in range(6):
        out = boltzmann.collision_substep(out, maxwell_kernel, 0.03)
    assert out.candidate_remainder == pytest.approx(0.9 - np.floor(0.9), abs=1e-12)


def test_many_collisions_per_step_warns(maxwell_kernel, caplog):
    ens = VelocityEnsemble.maxwellian(100, seed=5)
    with caplog.at_level(logging.WARNING, logger="homokin.boltzmann"):
        boltzmann.collision_substep(ens, maxwell_kernel, 1.0)
    assert "reduce dt" in caplog.text


def test_hard_sphere_majorant_only_grows():
    kernel = CollisionKernel(kind="hard_sphere", diameter=0.3, knudsen=1.0)
    ens = VelocityEnsemble.maxwellian(500, seed=6)
    out = boltzmann.collision_substep(ens, kernel, 0.05)
    first = out.g_max
    assert first > 0
    out = boltzmann.collision_substep(out, kernel, 0.05)
    assert out.g_max >= first


def test_hard_sphere_collision_count_ignores_stale_majorant():
    kernel = CollisionKernel(kind="hard_sphere", diameter=1.0, knudsen=1.0)
    fresh = VelocityEnsemble.maxwellian(20_000, seed=7)
    stale = VelocityEnsemble.maxwellian(20_000, seed=7)
    c = np.linalg.norm(fresh.w - fresh.w.mean(axis=0), axis=1)
    stale.g_max = 0.25 * boltzmann.MAJORANT_FACTOR * 2.0 * float(c.max())

    def collided(ens):
        out = boltzmann.collision_substep(ens, kernel, 0.02)
        return int(np.sum(np.any(out.w != ens.w, axis=1))), out.g_max

    n_fresh, _ = collided(fresh)
    n_stale, raised = collided(stale)
    assert raised > stale.g_max
    # about 1400 collisions expected either way
    assert n_stale / n_fresh == pytest.approx(1.0, abs=0.15)


def test_moments_of_equal_velocities():
    ens = VelocityEnsemble(np.tile([1.0, 2.0, 3.0], (5, 1)), 1.0)
    m = boltzmann.moments(ens)
    assert m.theta == 0.0
    np.testing.assert_array_equal(np.array(m.P), 0.0)
    np.testing.assert_allclose(m.u_w, [1.0, 2.0, 3.0])


def test_moments_of_standard_gaussian():
    m = boltzmann.moments(VelocityEnsemble.maxwellian(100_000, seed=7))
    assert m.theta == pytest.approx(1.0, abs=0.015)
    np.testing.assert_allclose(np.array(m.P), np.eye(3), atol=0.02)
    np.testing.assert_allclose(m.q, 0.0, atol=0.1)
    assert m.e == pytest.approx(1.5 * m.theta)


def test_moments_of_anisotropic_gaussian():
    m = boltzmann.moments(VelocityEnsemble.gaussian(100_000, [2.0, 1.0, 1.0], seed=8))
    assert m.theta == pytest.approx(4 / 3, abs=0.02)
    np.testing.assert_allclose(np.diag(np.array(m.P)), [2.0, 1.0, 1.0], atol=0.04)


def test_equilibrium_without_deformation_keeps_theta(maxwell_kernel, at_rest):
    ens = VelocityEnsemble.maxwellian(2000, seed=9)
    series = boltzmann.run_homoenergetic(ens, at_rest, maxwell_kernel, 0.1, 2.0, stride=5)
    thetas = [m.theta for m in series]
    np.testing.assert_allclose(thetas, thetas[0], rtol=1e-12)


def test_shear_heats_the_gas(maxwell_kernel, shear):
    ens = VelocityEnsemble.maxwellian(4000, seed=10)
    series = boltzmann.run_homoenergetic(ens, shear, maxwell_kernel, 0.05, 3.0, stride=10)
    t = np.array([m.t for m in series])
    theta = np.array([m.theta for m in series])
    assert np.polyfit(t[len(t) // 2:], theta[len(t) // 2:], 1)[0] > 0
    assert theta[-1] > theta[0]


def test_positive_shear_gives_negative_shear_stress(maxwell_kernel):
    shear = DeformationMatrix.simple_shear(1.0)
    ens = VelocityEnsemble.maxwellian(5000, seed=19)
    dsmc = boltzmann.run_homoenergetic(ens, shear, maxwell_kernel, 0.05, 2.0, stride=4)
    initial = Moments(t=0.0, rho=1.0, u_w=[0, 0, 0], e=1.5, theta=1.0, P=np.eye(3).tolist(), q=[0, 0, 0])
    bgk = boltzmann.bgk_moment_oracle(initial, shear, boltzmann.effective_relaxation_rate(maxwell_kernel, 1.0), 0.01, 2.0)
    for series in (dsmc, bgk):
        P12 = np.array([m.P[0][1] for m in series if m.t >= 0.2])
        assert P12.size > 0
        assert np.all(P12 < 0)


def test_collisionless_run_matches_flow_map(shear, maxwell_kernel):
    ens = VelocityEnsemble.maxwellian(50, seed=11)
    series = boltzmann.run_homoenergetic(ens, shear, maxwell_kernel, 0.1, 1.0, collisions=False)
    M = shear.flow_map(0.0, 1.0)
    P0 = np.array(series[0].P)
    np.testing.assert_allclose(np.array(series[-1].P), M @ P0 @ M.T, atol=1e-12)


def test_same_seed_same_series(shear, maxwell_kernel):
    def run():
        ens = VelocityEnsemble.maxwellian(300, seed=12)
        return [m.theta for m in boltzmann.run_homoenergetic(ens, shear, maxwell_kernel, 0.1, 1.0)]

    assert run() == run()


def test_selfsimilar_needs_growth(maxwell_kernel, at_rest):
    ens = VelocityEnsemble.maxwellian(500, seed=13)
    series = boltzmann.run_homoenergetic(ens, at_rest, maxwell_kernel, 0.1, 2.0)
    with pytest.raises(InsufficientGrowth):
        boltzmann.selfsimilar_diagnostic(series)


def test_selfsimilar_at_equilibrium(maxwell_kernel, at_rest):
    ens = VelocityEnsemble.maxwellian(10_000, seed=14)
    series = boltzmann.run_homoenergetic(ens, at_rest, maxwell_kernel, 0.1, 4.0)
    report = boltzmann.selfsimilar_diagnostic(series, require_growth=False)
    assert report.beta_ci_low <= 1e-12 and report.beta_ci_high >= -1e-12
    np.testing.assert_allclose(np.array(report.normalized_P_limit), np.eye(3), atol=0.08)


def test_bgk_relaxation_closed_form(at_rest):
    P0 = np.diag([2.0, 0.7, 0.3])
    initial = Moments(t=0.0, rho=1.0, u_w=[0, 0, 0], e=1.5, theta=1.0, P=P0.tolist(), q=[0, 0, 0])
    nu = 0.8
    series = boltzmann.bgk_moment_oracle(initial, at_rest, nu, 0.01, 2.0)
    expected = np.eye(3) + (P0 - np.eye(3)) * np.exp(-nu * 2.0)
    np.testing.assert_allclose(np.array(series[-1].P), expected, atol=1e-8)


def test_bgk_rhs_matches_quadrature():
    P = np.array([[1.5, 0.2, 0.0], [0.2, 0.9, 0.1], [0.0, 0.1, 0.6]])
    L = np.array([[0.1, 0.8, 0.0], [0.0, -0.05, 0.2], [0.0, 0.0, 0.3]])
    d_rho, dP = boltzmann.bgk_rhs(1.3, P, L, 0.7)
    q_rho, qP = boltzmann.bgk_rhs_by_quadrature(P, 1.3, L, 0.7)
    assert q_rho == pytest.approx(d_rho, rel=1e-10)
    np.testing.assert_allclose(qP, dP, atol=1e-10)


def test_bgk_energy_identity(shear):
    P0 = np.diag([1.4, 0.9, 0.7])
    theta0 = np.trace(P0) / 3
    initial = Moments(t=0.0, rho=1.0, u_w=[0, 0, 0], e=1.5 * theta0, theta=theta0, P=P0.tolist(), q=[0, 0, 0])
    series = boltzmann.bgk_moment_oracle(initial, shear, 2.0, 0.001, 1.0)
    t = np.array([m.t for m in series])
    e = np.array([m.e for m in series])
    PL = np.array([np.sum(np.array(m.P) * shear.eval_L(m.t)) for m in series])
    residual = np.gradient(e, t, edge_order=2) + PL
    assert np.max(np.abs(residual)) < 1e-5


def test_stiff_bgk_approaches_viscous_heating():
    K = 1.0
    shear = DeformationMatrix.simple_shear(K)
    theta0 = 1.0
    initial = Moments(t=0.0, rho=1.0, u_w=[0, 0, 0], e=1.5, theta=1.0, P=np.eye(3).tolist(), q=[0, 0, 0])
    nu = 200.0
    series = boltzmann.bgk_moment_oracle(initial, shear, nu, 1e-3, 1.0)
    # large-nu limit: theta' = (2/3) theta K^2 / nu
    expected = theta0 * np.exp(2.0 * K * K / (3.0 * nu))
    assert series[-1].theta - theta0 == pytest.approx(expected - theta0, rel=0.02)


def test_relaxation_rate_and_default_dt(maxwell_kernel):
    assert boltzmann.effective_relaxation_rate(maxwell_kernel, 2.0) == pytest.approx(0.8)
    dt = boltzmann.default_dt(maxwell_kernel, 1.0)
    assert dt == pytest.approx(0.2)
    hs = CollisionKernel(kind="hard_sphere", diameter=1.0, knudsen=1.0)
    with pytest.raises(ValueError):
        boltzmann.effective_relaxation_rate(hs, 1.0)


@pytest.mark.slow
def test_maxwellian_is_a_fixed_point(maxwell_kernel, at_rest):
    ens = VelocityEnsemble.maxwellian(20_000, seed=15)
    series = boltzmann.run_homoenergetic(ens, at_rest, maxwell_kernel, 0.1, 1000.0, stride=1000)
    sigma = np.sqrt(2.0 / 20_000)
    for m in series:
        np.testing.assert_allclose(np.diag(np.array(m.P)), 1.0, atol=5 * sigma)


@pytest.mark.slow
def test_selfsimilar_profile_under_shear(maxwell_kernel):
    shear = DeformationMatrix.simple_shear(0.5)
    ens = VelocityEnsemble.maxwellian(50_000, seed=16)
    series = boltzmann.run_homoenergetic(ens, shear, maxwell_kernel, 0.05, 40.0, stride=10)
    report = boltzmann.selfsimilar_diagnostic(series)
    assert report.beta_hat > 0
    assert report.self_similar


@pytest.mark.slow
def test_selfsimilar_rate_forgets_the_initial_anisotropy(maxwell_kernel):
    shear = DeformationMatrix.simple_shear(0.5)
    reports = []
    for cov, seed in (([3.0, 1.0, 0.5], 17), ([0.5, 1.0, 3.0], 18)):
        ens = VelocityEnsemble.gaussian(50_000, cov, seed=seed)
        series = boltzmann.run_homoenergetic(ens, shear, maxwell_kernel, 0.05, 40.0, stride=10)
        reports.append(boltzmann.selfsimilar_diagnostic(series))
    a, b = reports
    assert a.beta_hat > 0 and b.beta_hat > 0
    assert a.beta_ci_low <= b.beta_ci_high and b.beta_ci_low <= a.beta_ci_high
    assert a.self_similar and b.self_similar
    np.testing.assert_allclose(a.normalized_P_limit, b.normalized_P_limit, atol=0.05)


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["maxwell", "hard_sphere"])
def test_million_collisions_conserve_energy_and_momentum(kind):
    kernel = CollisionKernel(kind=kind, b0=1.0, diameter=0.5, knudsen=1.0)
    ens = VelocityEnsemble.gaussian(100_000, [3.0, 1.0, 0.5], seed=20)
    before = boltzmann.moments(ens)
    out = ens
    # Maxwell: 0.5 * 1e5 * 0.1 = 5000 accepted collisions per call, 10^6 in total
    for _ in range(200):
        out = boltzmann.collision_substep(out, kernel, 0.1)
    after = boltzmann.moments(out)
    assert after.theta == pytest.approx(before.theta, rel=1e-10)
    np.testing.assert_allclose(after.u_w, before.u_w, atol=1e-12)
    assert not np.array_equal(out.w, ens.w)
