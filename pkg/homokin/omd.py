import logging
import math
from typing import List, Optional, Sequence

import numpy as np

from homokin.deformation import DeformationMatrix
from homokin.errors import ParticleOverlap

logger = logging.getLogger(__name__)

OVERLAP_FRACTION = 1e-10
# pair distances evaluated per chunk; keeps (chunk, sources, 3) temporaries bounded
CHUNK_BUDGET = 2_000_000


class Scaling:
    UNIT = "unit"
    MEAN_FIELD = "mean_field"
    BOLTZMANN = "boltzmann"

    def __init__(self, kind: str = UNIT, n: Optional[int] = None, epsilon: Optional[float] = None):
        if kind not in (self.UNIT, self.MEAN_FIELD, self.BOLTZMANN):
            raise ValueError(f"unknown scaling: {kind}")
        if epsilon is not None and epsilon <= 0:
            raise ValueError(f"boltzmann epsilon must be positive, got {epsilon}")
        self.kind = kind
        self.n = n
        self.epsilon = epsilon

    @classmethod
    def unit(cls) -> "Scaling":
        return cls(cls.UNIT)

    @classmethod
    def mean_field(cls, n: Optional[int] = None) -> "Scaling":
        return cls(cls.MEAN_FIELD, n=n)

    @classmethod
    def boltzmann(cls, epsilon: Optional[float] = None) -> "Scaling":
        return cls(cls.BOLTZMANN, epsilon=epsilon)

    def __repr__(self) -> str:
        return f"Scaling({self.kind}, n={self.n}, epsilon={self.epsilon})"


class PairPotential:
    """径向对势 U(r)，截断处平移使 U(cutoff) = 0。

    shift="energy" 时力在截断处有跳变；shift="force" 时 phi 也平移为 phi(r) - phi(cutoff)，
    U 相应加上 (r - cutoff) phi(cutoff)，力在截断处连续。

    scalar_force 返回 phi(r) = -U'(r)，粒子 i 受力为 phi(r) (x_i - x_j)/r。
    """

    KINDS = ("inverse_power", "harmonic", "truncated_lj")
    SHIFTS = ("energy", "force")

    def __init__(self, kind: str, cutoff: float = math.inf, epsilon_scale: float = 1.0, shift: str = "energy", **params):
        if kind not in self.KINDS:
            raise ValueError(f"unknown potential kind: {kind}")
        if shift not in self.SHIFTS:
            raise ValueError(f"unknown cutoff shift: {shift}")
        if not cutoff > 0:
            raise ValueError(f"cutoff must be positive, got {cutoff}")
        if not epsilon_scale > 0:
            raise ValueError(f"epsilon_scale must be positive, got {epsilon_scale}")
        self.kind = kind
        self.cutoff = float(cutoff)
        self.epsilon_scale = float(epsilon_scale)
        self.shift = shift
        self.params = params
        if kind == "inverse_power":
            self.alpha = float(params.get("alpha", 1.0))
            self.strength = float(params.get("strength", 1.0))
        elif kind == "harmonic":
            self.k = float(params.get("k", 1.0))
            self.r0 = float(params.get("r0", 0.0))
        else:
            self.depth = float(params.get("depth", 1.0))
            self.sigma = float(params.get("sigma", 1.0))

    @classmethod
    def inverse_power(cls, alpha: float, strength: float = 1.0, **kwargs) -> "PairPotential":
        return cls("inverse_power", alpha=alpha, strength=strength, **kwargs)

    @classmethod
    def harmonic(cls, k: float, r0: float = 0.0, **kwargs) -> "PairPotential":
        return cls("harmonic", k=k, r0=r0, **kwargs)

    @classmethod
    def truncated_lj(cls, depth: float = 1.0, sigma: float = 1.0, **kwargs) -> "PairPotential":
        return cls("truncated_lj", depth=depth, sigma=sigma, **kwargs)

    @classmethod
    def from_config(cls, cfg) -> "PairPotential":
        params = {}
        if cfg.kind == "inverse_power":
            params = {"alpha": cfg.alpha, "strength": cfg.strength}
        elif cfg.kind == "harmonic":
            params = {"k": cfg.k, "r0": cfg.r0}
        elif cfg.kind == "truncated_lj":
            params = {"depth": cfg.depth, "sigma": cfg.sigma}
        return cls(cfg.kind, cutoff=cfg.cutoff, epsilon_scale=cfg.epsilon_scale, shift=cfg.shift, **params)

    @property
    def singular_at_origin(self) -> bool:
        return self.kind != "harmonic"

    def raw_energy(self, r: np.ndarray) -> np.ndarray:
        if self.kind == "inverse_power":
            return self.strength * r ** (-self.alpha)
        if self.kind == "harmonic":
            return 0.5 * self.k * (r - self.r0) ** 2
        sr6 = (self.sigma / r) ** 6
        return 4.0 * self.depth * (sr6 * sr6 - sr6)

    def raw_scalar_force(self, r: np.ndarray) -> np.ndarray:
        if self.kind == "inverse_power":
            return self.strength * self.alpha * r ** (-self.alpha - 1.0)
        if self.kind == "harmonic":
            return -self.k * (r - self.r0)
        sr6 = (self.sigma / r) ** 6
        return 24.0 * self.depth * (2.0 * sr6 * sr6 - sr6) / r

    def raw_force_slope(self, r: np.ndarray) -> np.ndarray:
        """d phi / dr"""
        if self.kind == "inverse_power":
            return -self.strength * self.alpha * (self.alpha + 1.0) * r ** (-self.alpha - 2.0)
        if self.kind == "harmonic":
            return -self.k * np.ones_like(r)
        s6 = self.sigma ** 6
        return 24.0 * self.depth * (-26.0 * s6 * s6 * r ** (-14.0) + 7.0 * s6 * r ** (-8.0))

    def scaled(self, scaling: Optional[Scaling] = None, n: Optional[int] = None) -> "ScaledPotential":
        scaling = scaling or Scaling.unit()
        if scaling.kind == Scaling.MEAN_FIELD:
            count = scaling.n or n
            if not count:
                raise ValueError("mean_field scaling needs the particle count N")
            return ScaledPotential(self, factor=1.0 / count, length=1.0)
        if scaling.kind == Scaling.BOLTZMANN:
            eps = scaling.epsilon or self.epsilon_scale
            return ScaledPotential(self, factor=1.0 / eps, length=eps)
        return ScaledPotential(self, factor=1.0, length=1.0)

    def __repr__(self) -> str:
        return f"PairPotential({self.kind}, {self.params}, cutoff={self.cutoff}, shift={self.shift})"


class ScaledPotential:
    """U_s(r) = factor * U(r / length)，对应 unit / mean_field / boltzmann 三种标度"""

    def __init__(self, pot: PairPotential, factor: float, length: float):
        self.pot = pot
        self.factor = factor
        self.length = length
        self.cutoff = pot.cutoff * length
        self.overlap_length = OVERLAP_FRACTION * (self.cutoff if math.isfinite(self.cutoff) else 1.0)
        self._shift = 0.0
        self._force_shift = 0.0
        if math.isfinite(pot.cutoff):
            rc = np.array(pot.cutoff)
            self._shift = float(pot.raw_energy(rc))
            if pot.shift == "force":
                self._force_shift = float(pot.raw_scalar_force(rc))

    def scalar_force(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        out = (self.factor / self.length) * (self.pot.raw_scalar_force(r / self.length) - self._force_shift)
        return np.where(r < self.cutoff, out, 0.0)

    def energy(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        s = r / self.length
        out = self.factor * (self.pot.raw_energy(s) - self._shift)
        if self._force_shift:
            out = out + self.factor * (s - self.pot.cutoff) * self._force_shift
        return np.where(r < self.cutoff, out, 0.0)

    def force_slope(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        out = (self.factor / self.length ** 2) * self.pot.raw_force_slope(r / self.length)
        return np.where(r < self.cutoff, out, 0.0)


def _pair_terms(targets: np.ndarray, sources: np.ndarray, pot: ScaledPotential, skip: Optional[np.ndarray]):
    """逐块生成 (start, stop, d, r, active)，d = target - source"""
    m, s = targets.shape[0], sources.shape[0]
    chunk = max(1, CHUNK_BUDGET // max(s, 1))
    for start in range(0, m, chunk):
        stop = min(start + chunk, m)
        d = targets[start:stop, None, :] - sources[None, :, :]
        r = np.sqrt(np.einsum("msk,msk->ms", d, d))
        active = r < pot.cutoff
        if skip is not None:
            rows = np.arange(stop - start)
            cols = skip[start:stop]
            keep = cols >= 0
            active[rows[keep], cols[keep]] = False
        close = active & (r < pot.overlap_length)
        if np.any(close):
            if pot.pot.singular_at_origin:
                i, j = np.argwhere(close)[0]
                raise ParticleOverlap(f"target {start + i} and source {j} are {r[i, j]:.3e} apart")
            active &= ~close
        yield start, stop, d, r, active


def pairwise_force_sum(
    targets: np.ndarray,
    sources: np.ndarray,
    pot: ScaledPotential,
    skip: Optional[np.ndarray] = None,
    source_weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """sum_j c_j phi(|x - y_j|) (x - y_j)/|x - y_j|，按固定顺序求和；c_j 默认为 1"""
    targets = np.atleast_2d(targets)
    out = np.zeros_like(targets, dtype=float)
    for start, stop, d, r, active in _pair_terms(targets, sources, pot, skip):
        coef = np.zeros_like(r)
        coef[active] = pot.scalar_force(r[active]) / r[active]
        if source_weights is not None:
            coef *= source_weights[None, :]
        out[start:stop] = np.einsum("ms,msk->mk", coef, d)
    return out


def pairwise_energy_sum(
    targets: np.ndarray, sources: np.ndarray, pot: ScaledPotential, skip: Optional[np.ndarray] = None
) -> float:
    total = 0.0
    for _, _, _, r, active in _pair_terms(np.atleast_2d(targets), sources, pot, skip):
        total += float(np.sum(pot.energy(r[active])))
    return total


class ParticleSystem:
    """(x, w) 坐标下的模拟粒子；像粒子不存状态，按需由 LatticeSpec 生成"""

    def __init__(self, x, w, t: float, deformation: DeformationMatrix):
        x = np.array(x, dtype=float)
        w = np.array(w, dtype=float)
        if x.ndim != 2 or x.shape[1] != 3 or x.shape != w.shape:
            raise ValueError(f"x and w must both be (N,3), got {x.shape} and {w.shape}")
        if x.shape[0] < 1:
            raise ValueError("a particle system needs at least one particle")
        self.x = x
        self.w = w
        self.t = float(t)
        self.deformation = deformation

    @classmethod
    def from_velocities(cls, x, v, t: float, deformation: DeformationMatrix) -> "ParticleSystem":
        x = np.array(x, dtype=float)
        L = deformation.eval_L(t)
        return cls(x, np.asarray(v, dtype=float) - x @ L.T, t, deformation)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def velocities(self) -> np.ndarray:
        return self.w + self.x @ self.deformation.eval_L(self.t).T

    def copy(self) -> "ParticleSystem":
        return ParticleSystem(self.x.copy(), self.w.copy(), self.t, self.deformation)


class LatticeSpec:
    def __init__(self, nu: Sequence[Sequence[int]], extent: int, basis=None):
        nu = np.array(nu, dtype=int).reshape(-1, 3)
        self.nu = nu[np.any(nu != 0, axis=1)]
        self.extent = int(extent)
        self.basis = np.eye(3) if basis is None else np.array(basis, dtype=float).reshape(3, 3)

    @classmethod
    def cube(cls, extent: int, basis=None) -> "LatticeSpec":
        rng = range(-extent, extent + 1)
        nu = [(a, b, c) for a in rng for b in rng for c in rng]
        return cls(nu, extent, basis)

    @classmethod
    def empty(cls) -> "LatticeSpec":
        return cls(np.zeros((0, 3), dtype=int), 0)

    @classmethod
    def from_config(cls, cfg) -> "LatticeSpec":
        if cfg is None:
            return cls.empty()
        return cls.cube(cfg.extent, basis=cfg.basis)

    def __len__(self) -> int:
        return self.nu.shape[0]

    def offsets(self, deformation: DeformationMatrix, t: float) -> np.ndarray:
        """像粒子平移 (I+tA) B nu，形状 (K,3)"""
        G = (np.eye(3) + t * deformation.A) @ self.basis
        return self.nu @ G.T


def _sources(sys: ParticleSystem, lat: LatticeSpec) -> np.ndarray:
    offsets = lat.offsets(sys.deformation, sys.t)
    if offsets.shape[0] == 0:
        return sys.x
    return np.concatenate([sys.x] + [sys.x + off for off in offsets], axis=0)


def forces(sys: ParticleSystem, pot: Optional[PairPotential], lat: LatticeSpec, scaling: Optional[Scaling] = None) -> np.ndarray:
    if pot is None:
        return np.zeros_like(sys.x)
    scaled = pot.scaled(scaling, n=sys.n)
    return pairwise_force_sum(sys.x, _sources(sys, lat), scaled, skip=np.arange(sys.n))


def total_force(sys: ParticleSystem, pot: Optional[PairPotential], lat: LatticeSpec, i: int, scaling: Optional[Scaling] = None) -> np.ndarray:
    if pot is None:
        return np.zeros(3)
    scaled = pot.scaled(scaling, n=sys.n)
    return pairwise_force_sum(sys.x[i:i + 1], _sources(sys, lat), scaled, skip=np.array([i]))[0]


def energy(sys: ParticleSystem, pot: Optional[PairPotential], lat: LatticeSpec, scaling: Optional[Scaling] = None) -> float:
    kinetic = 0.5 * float(np.sum(sys.w * sys.w))
    if pot is None:
        return kinetic
    scaled = pot.scaled(scaling, n=sys.n)
    return kinetic + 0.5 * pairwise_energy_sum(sys.x, _sources(sys, lat), scaled, skip=np.arange(sys.n))


def image_positions(sys: ParticleSystem, lat: LatticeSpec) -> np.ndarray:
    offsets = lat.offsets(sys.deformation, sys.t)
    return sys.x[None, :, :] + offsets[:, None, :]


def image_velocities(sys: ParticleSystem, lat: LatticeSpec) -> np.ndarray:
    shift = lat.nu @ (sys.deformation.A @ lat.basis).T
    return sys.velocities()[None, :, :] + shift[:, None, :]


def _drift(sys: ParticleSystem, h: float) -> ParticleSystem:
    # force-free flight: v is constant, w follows the exact propagator
    v = sys.velocities()
    M = sys.deformation.flow_map(sys.t, sys.t + h)
    return ParticleSystem(sys.x + h * v, sys.w @ M.T, sys.t + h, sys.deformation)


def step(
    sys: ParticleSystem,
    pot: Optional[PairPotential],
    lat: LatticeSpec,
    dt: float,
    scaling: Optional[Scaling] = None,
) -> ParticleSystem:
    """Strang 分裂：半步精确形变漂移、整步力冲量、半步漂移"""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    half = _drift(sys, 0.5 * dt)
    if pot is not None:
        half = ParticleSystem(half.x, half.w + dt * forces(half, pot, lat, scaling), half.t, half.deformation)
    return _drift(half, 0.5 * dt)


def run(
    sys: ParticleSystem,
    pot: Optional[PairPotential],
    lat: LatticeSpec,
    dt: float,
    horizon: float,
    scaling: Optional[Scaling] = None,
    stride: int = 1,
) -> List[ParticleSystem]:
    sys.deformation.check_horizon(sys.t + horizon)
    n_steps = int(round(horizon / dt))
    snapshots = [sys]
    current = sys
    for k in range(1, n_steps + 1):
        current = step(current, pot, lat, dt, scaling)
        if k % stride == 0 or k == n_steps:
            snapshots.append(current)
    logger.debug(f"OMD run: {n_steps} steps, {len(snapshots)} snapshots")
    return snapshots


def verify_indistinguishability(
    sys: ParticleSystem,
    pot: Optional[PairPotential],
    lat: LatticeSpec,
    dt: float,
    horizon: float,
    scaling: Optional[Scaling] = None,
    particle: int = 0,
    nu: Sequence[int] = (1, 0, 0),
) -> float:
    """把一个像粒子在原始 (x,v) 变量下用速度 Verlet 直接积分，与 OMD 生成的轨迹比较。

    像粒子 (particle, nu) 的邻域是 OMD 晶格整体平移 nu 后的原子集合，不含其自身。
    返回位置与速度的最大偏差。
    """
    nu = np.asarray(nu, dtype=int)
    if not np.any(nu):
        raise ValueError("nu = 0 is the simulated copy itself")
    deformation = sys.deformation
    deformation.check_horizon(sys.t + horizon)
    basis_nu = lat.basis @ nu
    velocity_shift = deformation.A @ basis_nu
    neighbour_nu = np.concatenate([np.zeros((1, 3), dtype=int), lat.nu], axis=0) + nu
    scaled = pot.scaled(scaling, n=sys.n) if pot is not None else None

    def omd_image(s: ParticleSystem):
        G = np.eye(3) + s.t * deformation.A
        return s.x[particle] + G @ basis_nu, s.velocities()[particle] + velocity_shift

    def direct_force(s: ParticleSystem, x_point: np.ndarray) -> np.ndarray:
        if scaled is None:
            return np.zeros(3)
        G = (np.eye(3) + s.t * deformation.A) @ lat.basis
        offsets = neighbour_nu @ G.T
        sources = np.concatenate([s.x + off for off in offsets], axis=0)
        # block 0 is the image's own cell, so the image itself sits at row `particle`
        return pairwise_force_sum(x_point[None, :], sources, scaled, skip=np.array([particle]))[0]

    x_img, v_img = omd_image(sys)
    current = sys
    deviation = 0.0
    for _ in range(int(round(horizon / dt))):
        v_half = v_img + 0.5 * dt * direct_force(current, x_img)
        x_img = x_img + dt * v_half
        current = step(current, pot, lat, dt, scaling)
        v_img = v_half + 0.5 * dt * direct_force(current, x_img)
        x_ref, v_ref = omd_image(current)
        deviation = max(deviation, float(np.max(np.abs(x_img - x_ref))), float(np.max(np.abs(v_img - v_ref))))
    return deviation
