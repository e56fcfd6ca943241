import logging
import math
from typing import List, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from homokin.boltzmann import series_arrays
from homokin.deformation import DeformationMatrix
from homokin.errors import InsufficientSignal, NotNearEquilibrium
from homokin.models import HydroState, Moments, ResidualReport, ViscosityCalibration, ViscosityLaw
from homokin.ode import rk4_step

logger = logging.getLogger(__name__)

EQUILIBRIUM_LIMIT = 0.2
SIGNAL_FLOOR = 1e-14


def _integrate(
    state: HydroState,
    deformation: DeformationMatrix,
    visc: Optional[ViscosityLaw],
    dt: float,
    horizon: float,
    stride: int,
) -> List[HydroState]:
    """Euler 与 NS 共用的 RK4；visc 为 None 或 epsilon = 0 时热源项恰为 0"""
    deformation.check_horizon(state.t + horizon)
    eps = 0.0 if visc is None else visc.epsilon

    def rhs(t, rho, theta):
        L = deformation.eval_L(t)
        tr = float(np.trace(L))
        heat = 0.0
        if eps:
            heat = eps * visc.mu(theta) * deformation.heating_invariant(t)
        return -tr * rho, -(2.0 / 3.0) * tr * theta + heat

    rho, theta, t0 = state.rho, state.theta, state.t
    out = [HydroState(rho=rho, theta=theta, t=t0)]
    n_steps = int(round(horizon / dt))
    for k in range(n_steps):
        rho, theta = rk4_step(rhs, t0 + k * dt, (rho, theta), dt)
        if (k + 1) % stride == 0 or k + 1 == n_steps:
            out.append(HydroState(rho=rho, theta=theta, t=t0 + (k + 1) * dt))
    return out


def euler_solve(state: HydroState, deformation: DeformationMatrix, dt: float, horizon: float, stride: int = 1) -> List[HydroState]:
    return _integrate(state, deformation, None, dt, horizon, stride)


def navier_stokes_solve(
    state: HydroState,
    deformation: DeformationMatrix,
    visc: ViscosityLaw,
    dt: float,
    horizon: float,
    stride: int = 1,
) -> List[HydroState]:
    return _integrate(state, deformation, visc, dt, horizon, stride)


def euler_closed_form(state: HydroState, deformation: DeformationMatrix, t: float) -> HydroState:
    ratio = deformation.detI_tA(state.t) / deformation.detI_tA(t)
    return HydroState(rho=state.rho * ratio, theta=state.theta * ratio ** (2.0 / 3.0), t=t)


def ns_closed_form_simple_shear(theta0: float, K: float, visc: ViscosityLaw, t):
    """简单剪切下 theta' = eps mu0 theta^omega K^2 / 2 的解析解"""
    c = visc.epsilon * visc.mu0 * K * K / 2.0
    t = np.asarray(t, dtype=float)
    if visc.omega_exp == 1.0:
        return theta0 * np.exp(c * t)
    a = 1.0 - visc.omega_exp
    return (theta0 ** a + a * c * t) ** (1.0 / a)


def moments_from_hydro(series: Sequence[HydroState]) -> List[Moments]:
    """理想气体封闭 P = rho theta I，e = 3 theta / 2"""
    out = []
    for s in series:
        P = (s.rho * s.theta * np.eye(3)).tolist()
        out.append(Moments(t=s.t, rho=s.rho, u_w=[0.0, 0.0, 0.0], e=1.5 * s.theta, theta=s.theta, P=P, q=[0.0, 0.0, 0.0]))
    return out


def _uniform_times(t: np.ndarray) -> None:
    if t.size < 3:
        raise ValueError("residuals need at least three samples")
    steps = np.diff(t)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        raise ValueError("series must have a uniform output stride")


def conservation_residual(series: Sequence[Moments], deformation: DeformationMatrix) -> ResidualReport:
    """r1 = drho/dt + Tr[L] rho，r3 = rho de/dt + P:L，中心差分，端点单侧"""
    t, rho, e, theta, P = series_arrays(series)
    _uniform_times(t)
    Ls = np.array([deformation.eval_L(s) for s in t])
    trL = np.trace(Ls, axis1=1, axis2=2)
    r1 = np.gradient(rho, t, edge_order=2) + trL * rho
    r3 = rho * np.gradient(e, t, edge_order=2) + np.einsum("kij,kij->k", P, Ls)

    rate = float(np.max(np.linalg.norm(Ls, ord=2, axis=(1, 2)))) or 1.0
    scale = float(np.max(rho * theta)) * rate or rate
    return ResidualReport(
        t=t.tolist(),
        r1=r1.tolist(),
        r3=r3.tolist(),
        max_r1=float(np.max(np.abs(r1))) / (float(np.max(rho)) * rate),
        max_r3=float(np.max(np.abs(r3))) / scale,
        scale=scale,
    )


def calibrate_viscosity(
    series: Sequence[Moments],
    deformation: DeformationMatrix,
    omega_exp: float,
    epsilon: float,
    anisotropy_limit: float = EQUILIBRIUM_LIMIT,
) -> ViscosityCalibration:
    """对加热律的逐段增量做过原点最小二乘，拟合 mu0：

    Δtheta_k + ∫_k (2/3) Tr[L] theta ds = mu0 * eps ∫_k theta^omega S(s) ds

    相邻增量的残差近似独立，置信区间取 t 分布，自由度为增量个数减一。
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    t, rho, _, theta, P = series_arrays(series)
    if t.size < 3:
        raise InsufficientSignal(f"calibration needs at least three samples, got {t.size}")
    anisotropy = np.linalg.norm(P / (rho * theta)[:, None, None] - np.eye(3), "fro", axis=(1, 2))
    worst = float(anisotropy.max())
    if worst >= anisotropy_limit:
        raise NotNearEquilibrium(f"max ||P/(rho theta) - I||_F = {worst:.3f} >= {anisotropy_limit}")

    trL = np.array([np.trace(deformation.eval_L(s)) for s in t])
    S = np.array([deformation.heating_invariant(s) for s in t])
    # per-interval trapezoid integrals
    dY = np.diff(theta) + np.diff(cumulative_trapezoid((2.0 / 3.0) * trL * theta, t, initial=0.0))
    dX = epsilon * np.diff(cumulative_trapezoid(theta ** omega_exp * S, t, initial=0.0))
    sxx = float(dX @ dX)
    if sxx <= SIGNAL_FLOOR or abs(float(np.sum(dY))) <= SIGNAL_FLOOR * max(1.0, float(theta[0])):
        raise InsufficientSignal("no measurable viscous heating in the series")

    mu0 = float(dX @ dY) / sxx
    resid = dY - mu0 * dX
    dof = dY.size - 1
    se = math.sqrt(float(resid @ resid) / dof / sxx)
    half = float(stats.t.ppf(0.975, dof)) * se
    logger.info(f"calibrated mu0={mu0:.5g} +/- {half:.2g} (omega={omega_exp}, eps={epsilon})")
    return ViscosityCalibration(
        mu0_hat=mu0,
        ci_low=mu0 - half,
        ci_high=mu0 + half,
        omega_exp=omega_exp,
        K=deformation.shear_rate,
        epsilon=epsilon,
        n_samples=int(t.size),
    )
