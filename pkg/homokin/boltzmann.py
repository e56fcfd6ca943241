import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import stats

from homokin.deformation import DeformationMatrix
from homokin.errors import InsufficientGrowth, MajorantOverflow
from homokin.models import CollisionKernel, Moments, SelfSimilarReport
from homokin.ode import rk4_step
from homokin.rng import STREAM_COLLISION, STREAM_INIT, make_rng

logger = logging.getLogger(__name__)

MAJORANT_FACTOR = 1.5
COLLISION_WARN = 0.5
COLLISION_TARGET = 0.2
SELFSIMILAR_GROWTH = 4.0
SELFSIMILAR_TOL = 0.02
SELFSIMILAR_BATCHES = 5


class VelocityEnsemble:
    """空间均匀的 DSMC 粒子集合，数密度 rho 单独记账"""

    def __init__(
        self,
        w,
        number_density: float,
        t: float = 0.0,
        rng_seed: int = 0,
        rng: Optional[np.random.Generator] = None,
        g_max: Optional[float] = None,
        candidate_remainder: float = 0.0,
    ):
        w = np.array(w, dtype=float)
        if w.ndim != 2 or w.shape[1] != 3:
            raise ValueError(f"w must be (N,3), got {w.shape}")
        if w.shape[0] < 2:
            raise ValueError("a velocity ensemble needs at least two particles")
        if not number_density > 0:
            raise ValueError(f"number_density must be positive, got {number_density}")
        self.w = w
        self.number_density = float(number_density)
        self.t = float(t)
        self.rng_seed = int(rng_seed)
        self.rng = rng if rng is not None else make_rng(rng_seed, STREAM_COLLISION)
        self.g_max = g_max
        self.candidate_remainder = candidate_remainder

    @classmethod
    def gaussian(cls, n: int, cov, rho: float = 1.0, seed: int = 0, t: float = 0.0) -> "VelocityEnsemble":
        cov = np.asarray(cov, dtype=float)
        if cov.shape == (3,):
            cov = np.diag(cov)
        rng = make_rng(seed, STREAM_INIT)
        w = rng.multivariate_normal(np.zeros(3), cov, size=n, method="cholesky")
        w -= w.mean(axis=0)
        return cls(w, rho, t=t, rng_seed=seed)

    @classmethod
    def maxwellian(cls, n: int, theta: float = 1.0, rho: float = 1.0, seed: int = 0, t: float = 0.0) -> "VelocityEnsemble":
        return cls.gaussian(n, theta * np.eye(3), rho=rho, seed=seed, t=t)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def evolve(self, w: np.ndarray, number_density: Optional[float] = None, t: Optional[float] = None) -> "VelocityEnsemble":
        """新状态共享随机流与优势速度"""
        return VelocityEnsemble(
            w,
            self.number_density if number_density is None else number_density,
            t=self.t if t is None else t,
            rng_seed=self.rng_seed,
            rng=self.rng,
            g_max=self.g_max,
            candidate_remainder=self.candidate_remainder,
        )


def deformation_substep(ens: VelocityEnsemble, deformation: DeformationMatrix, dt: float) -> VelocityEnsemble:
    M = deformation.flow_map(ens.t, ens.t + dt)
    ratio = deformation.detI_tA(ens.t) / deformation.detI_tA(ens.t + dt)
    return ens.evolve(ens.w @ M.T, number_density=ens.number_density * ratio, t=ens.t + dt)


def _collision_rate(kernel: CollisionKernel, g_max: float) -> float:
    if kernel.kind == "maxwell":
        return kernel.b0
    return math.pi * kernel.diameter ** 2 * g_max


def _sample_omega(kernel: CollisionKernel, g: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    m = g.shape[0]
    if kernel.kind == "maxwell":
        omega = rng.standard_normal((m, 3))
        return omega / np.linalg.norm(omega, axis=1, keepdims=True)
    # density proportional to |g_hat . omega|
    gnorm = np.linalg.norm(g, axis=1, keepdims=True)
    ghat = np.where(gnorm > 0, g / np.where(gnorm > 0, gnorm, 1.0), np.array([0.0, 0.0, 1.0]))
    helper = np.where(np.abs(ghat[:, :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    e1 = np.cross(ghat, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(ghat, e1)
    cos_a = np.sqrt(rng.random(m))[:, None]
    sin_a = np.sqrt(1.0 - cos_a ** 2)
    phi = 2.0 * np.pi * rng.random(m)[:, None]
    return cos_a * ghat + sin_a * (np.cos(phi) * e1 + np.sin(phi) * e2)


def scatter(w: np.ndarray, w_star: np.ndarray, omega: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """w' = w + ((w* - w).omega) omega，w*' = w* - ((w* - w).omega) omega"""
    dv = np.sum((w_star - w) * omega, axis=1, keepdims=True) * omega
    return w + dv, w_star - dv


def collision_substep(ens: VelocityEnsemble, kernel: CollisionKernel, dt: float) -> VelocityEnsemble:
    """NTC 碰撞子步：候选对数正比于 g_max，按 |g|/g_max 接受。

    g_max 在步内上调时，剩余候选数按 新/旧 比例放大，接受率因此与 g_max 无关。
    """
    w = ens.w.copy()
    n = ens.n
    rng = ens.rng
    g_max = ens.g_max
    if kernel.kind == "hard_sphere" and g_max is None:
        c = np.linalg.norm(w - w.mean(axis=0), axis=1)
        g_max = MAJORANT_FACTOR * 2.0 * float(c.max()) or 1.0
    rate = _collision_rate(kernel, g_max or 0.0)
    budget = 0.5 * n * ens.number_density * rate * dt / kernel.knudsen + ens.candidate_remainder
    per_particle = 2.0 * math.floor(budget) / n
    if per_particle > COLLISION_WARN:
        logger.warning(f"{per_particle:.3f} collision candidates per particle per step; reduce dt")

    while budget >= 1.0:
        perm = rng.permutation(n)
        m = min(int(budget), n // 2)
        i, j = perm[:m], perm[m:2 * m]
        g = w[j] - w[i]
        if kernel.kind == "hard_sphere":
            gnorm = np.linalg.norm(g, axis=1)
            observed = float(gnorm.max())
            if observed > g_max:
                raised = MAJORANT_FACTOR * observed
                budget *= raised / g_max
                logger.debug(f"hard-sphere majorant raised to {raised:.4g}, {budget:.1f} candidates left")
                g_max = raised
            if not math.isfinite(g_max) or not observed <= g_max:
                raise MajorantOverflow(f"relative speed {observed} exceeds majorant {g_max}")
            accept = rng.random(m) < gnorm / g_max
            i, j, g = i[accept], j[accept], g[accept]
        omega = _sample_omega(kernel, g, rng)
        w[i], w[j] = scatter(w[i], w[j], omega)
        budget -= m

    out = ens.evolve(w)
    out.g_max = g_max
    out.candidate_remainder = budget
    return out


def moments(ens: VelocityEnsemble) -> Moments:
    w = ens.w
    rho = ens.number_density
    u = w.mean(axis=0)
    c = w - u
    c2 = np.sum(c * c, axis=1)
    P = rho * (c.T @ c) / ens.n
    P = 0.5 * (P + P.T)
    e = 0.5 * float(c2.mean())
    q = rho * (c * c2[:, None]).mean(axis=0)
    return Moments(t=ens.t, rho=rho, u_w=u.tolist(), e=e, theta=2.0 * e / 3.0, P=P.tolist(), q=q.tolist())


def run_homoenergetic(
    ens: VelocityEnsemble,
    deformation: DeformationMatrix,
    kernel: CollisionKernel,
    dt: float,
    horizon: float,
    stride: int = 1,
    collisions: bool = True,
) -> List[Moments]:
    """半步碰撞、整步形变、半步碰撞的 Strang 交替，每 stride 步输出一次矩"""
    deformation.check_horizon(ens.t + horizon)
    n_steps = int(round(horizon / dt))
    series = [moments(ens)]
    current = ens
    for k in range(1, n_steps + 1):
        if collisions:
            current = collision_substep(current, kernel, 0.5 * dt)
        current = deformation_substep(current, deformation, dt)
        if collisions:
            current = collision_substep(current, kernel, 0.5 * dt)
        if k % stride == 0 or k == n_steps:
            series.append(moments(current))
    logger.info(f"DSMC run finished: N={ens.n}, {n_steps} steps, theta {series[0].theta:.4g} -> {series[-1].theta:.4g}")
    return series


def series_arrays(series: Sequence[Moments]):
    """把矩序列转成 numpy 数组 (t, rho, e, theta, P)"""
    t = np.array([m.t for m in series])
    rho = np.array([m.rho for m in series])
    e = np.array([m.e for m in series])
    theta = np.array([m.theta for m in series])
    P = np.array([m.P for m in series])
    return t, rho, e, theta, P


def selfsimilar_diagnostic(
    series: Sequence[Moments],
    require_growth: bool = True,
    tolerance: float = SELFSIMILAR_TOL,
) -> SelfSimilarReport:
    t, rho, _, theta, P = series_arrays(series)
    growth = float(theta.max() / theta[0])
    if growth < SELFSIMILAR_GROWTH:
        if require_growth:
            raise InsufficientGrowth(f"theta grew {growth:.3f}x, need at least {SELFSIMILAR_GROWTH}x")
        window = np.arange(t.size)
    else:
        start = int(np.argmax(theta >= SELFSIMILAR_GROWTH * theta[0]))
        window = np.arange(start, t.size)
    tail = window[window.size // 2:]
    if tail.size < 4:
        raise InsufficientGrowth(f"only {tail.size} samples in the fit window")

    fit = stats.linregress(t[tail], np.log(theta[tail]))
    beta = 0.5 * float(fit.slope)
    # batch-means stderr: log theta residuals are autocorrelated
    batches = [b for b in np.array_split(tail, min(SELFSIMILAR_BATCHES, tail.size // 2)) if b.size >= 2]
    slopes = np.array([0.5 * stats.linregress(t[b], np.log(theta[b])).slope for b in batches])
    stderr = float(slopes.std(ddof=1) / math.sqrt(slopes.size)) if slopes.size > 1 else math.inf
    half = float(stats.t.ppf(0.975, max(slopes.size - 1, 1))) * stderr

    normalized = P[tail] / (rho[tail] * theta[tail])[:, None, None]
    mid = tail.size // 2
    drift = float(np.linalg.norm(normalized[:mid].mean(axis=0) - normalized[mid:].mean(axis=0), "fro"))
    return SelfSimilarReport(
        beta_hat=beta,
        beta_stderr=stderr,
        beta_ci_low=beta - half,
        beta_ci_high=beta + half,
        normalized_P_limit=normalized.mean(axis=0).tolist(),
        normalized_P_std=normalized.std(axis=0).tolist(),
        drift=drift,
        tolerance=tolerance,
        self_similar=drift < tolerance,
        growth=growth,
    )


def bgk_rhs(rho: float, P: np.ndarray, L: np.ndarray, nu: float) -> Tuple[float, np.ndarray]:
    trL = float(np.trace(L))
    theta = np.trace(P) / (3.0 * rho)
    dP = -(L @ P + P @ L.T) - trL * P - nu * (P - rho * theta * np.eye(3))
    return -trL * rho, dP


def bgk_rhs_by_quadrature(P, rho: float, L, nu: float, n_nodes: int = 6) -> Tuple[float, np.ndarray]:
    """在高斯密度 g = rho N(0, P/rho) 上直接数值求 d/dt ∫ w_i w_j g 与 d/dt ∫ g。

    被积函数取自 ∂g/∂t = (L w).∇_w g + nu (M[rho,theta] - g)。
    """
    P = np.asarray(P, dtype=float)
    L = np.asarray(L, dtype=float)
    sigma = P / rho
    C = np.linalg.cholesky(sigma)
    sigma_inv = np.linalg.inv(sigma)
    theta = np.trace(P) / (3.0 * rho)

    x, wts = hermegauss(n_nodes)
    grid = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).reshape(-1, 3)
    weight = np.einsum("a,b,c->abc", wts, wts, wts).reshape(-1) / (2.0 * np.pi) ** 1.5

    w = grid @ C.T
    # (L w).grad g / g = -(L w) . sigma^{-1} w
    drift = -np.einsum("ni,ij,nj->n", w @ L.T, sigma_inv, w)
    d_rho = rho * float(np.sum(weight * drift))
    second = np.einsum("n,ni,nj->ij", weight * drift, w, w)
    w_eq = math.sqrt(theta) * grid
    relax = nu * (np.einsum("n,ni,nj->ij", weight, w_eq, w_eq) - np.einsum("n,ni,nj->ij", weight, w, w))
    return d_rho, rho * (second + relax)


def bgk_moment_oracle(
    initial: Moments,
    deformation: DeformationMatrix,
    nu_collision: float,
    dt: float,
    horizon: float,
    stride: int = 1,
) -> List[Moments]:
    """BGK 弛豫封闭下 (rho, P) 的 RK4 积分"""
    if nu_collision <= 0:
        raise ValueError(f"nu_collision must be positive, got {nu_collision}")
    deformation.check_horizon(initial.t + horizon)
    rho = initial.rho
    P = np.array(initial.P, dtype=float)
    t0 = initial.t
    u_w = list(initial.u_w)

    def record(t, rho, P):
        e = float(np.trace(P) / (2.0 * rho))
        P = 0.5 * (P + P.T)
        return Moments(t=t, rho=rho, u_w=u_w, e=e, theta=2.0 * e / 3.0, P=P.tolist(), q=[0.0, 0.0, 0.0])

    def f(t, rho, P):
        return bgk_rhs(rho, P, deformation.eval_L(t), nu_collision)

    series = [record(t0, rho, P)]
    n_steps = int(round(horizon / dt))
    for k in range(n_steps):
        rho, P = rk4_step(f, t0 + k * dt, (rho, P), dt)
        if (k + 1) % stride == 0 or k + 1 == n_steps:
            series.append(record(t0 + (k + 1) * dt, rho, P))
    return series


def effective_relaxation_rate(kernel: CollisionKernel, rho: float, theta: Optional[float] = None) -> float:
    """各向同性 Maxwell 核下应力的弛豫率 0.4 rho b0 / eps；硬球为平均相对速度下的估计值"""
    if kernel.kind == "maxwell":
        return 0.4 * rho * kernel.b0 / kernel.knudsen
    if theta is None:
        raise ValueError("hard-sphere relaxation estimate needs theta")
    mean_g = math.sqrt(16.0 * theta / math.pi)
    return 0.4 * rho * math.pi * kernel.diameter ** 2 * mean_g / kernel.knudsen


def default_dt(kernel: CollisionKernel, rho: float, theta: float = 1.0, target: float = COLLISION_TARGET) -> float:
    """每粒子每步期望碰撞数为 target 的时间步"""
    if kernel.kind == "maxwell":
        rate = rho * kernel.b0
    else:
        rate = rho * math.pi * kernel.diameter ** 2 * math.sqrt(16.0 * theta / math.pi)
    return target * kernel.knudsen / rate
