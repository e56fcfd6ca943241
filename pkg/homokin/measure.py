import logging
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import distance
from scipy.stats import wasserstein_distance

from homokin.errors import UnsupportedMeasure
from homokin.rng import STREAM_PROJECTION, make_rng

logger = logging.getLogger(__name__)

MAX_ASSIGNMENT_SIZE = 2048
WEIGHT_TOL = 1e-12


class EmpiricalMeasure:
    """相空间 (x,w) ∈ R^6 上的加权点云"""

    def __init__(self, points, weights=None):
        points = np.array(points, dtype=float)
        if points.ndim == 1:
            points = points.reshape(1, -1)
        if points.ndim != 2 or points.shape[1] != 6:
            raise ValueError(f"points must be (N,6), got {points.shape}")
        n = points.shape[0]
        if n < 1:
            raise ValueError("an empirical measure needs at least one point")
        if weights is None:
            weights = np.full(n, 1.0 / n)
        else:
            weights = np.array(weights, dtype=float)
            if weights.shape != (n,):
                raise ValueError(f"weights must have shape ({n},), got {weights.shape}")
            if np.any(weights < 0):
                raise ValueError("weights must be non-negative")
            if abs(weights.sum() - 1.0) > WEIGHT_TOL:
                raise ValueError(f"weights must sum to 1, got {weights.sum()!r}")
        self.points = points
        self.weights = weights

    @classmethod
    def from_arrays(cls, x, w, weights=None) -> "EmpiricalMeasure":
        return cls(np.concatenate([np.asarray(x, dtype=float), np.asarray(w, dtype=float)], axis=1), weights)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def w(self) -> np.ndarray:
        return self.points[:, 3:]

    def is_uniform(self) -> bool:
        return bool(np.all(np.abs(self.weights - 1.0 / self.n) <= WEIGHT_TOL))

    def shifted(self, c) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.points + np.asarray(c, dtype=float), self.weights.copy())

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(n={self.n}, uniform={self.is_uniform()})"


def w1_exact(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """等样本量、均匀权重下的 W1，化为指派问题精确求解（欧氏 R^6 代价）"""
    if mu.n != nu.n:
        raise UnsupportedMeasure(f"assignment W1 needs equal sizes, got {mu.n} and {nu.n}")
    if not (mu.is_uniform() and nu.is_uniform()):
        raise UnsupportedMeasure("assignment W1 needs uniform weights")
    if mu.n > MAX_ASSIGNMENT_SIZE:
        raise UnsupportedMeasure(f"assignment W1 is limited to N <= {MAX_ASSIGNMENT_SIZE}, got {mu.n}")
    cost = distance.cdist(mu.points, nu.points, "euclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / mu.n)


def random_directions(n_projections: int, seed: int, dim: int = 6) -> np.ndarray:
    rng = make_rng(seed, STREAM_PROJECTION)
    u = rng.standard_normal((n_projections, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def w1_sliced(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    n_projections: int = 64,
    seed: int = 0,
    directions: Optional[np.ndarray] = None,
) -> float:
    """随机单位方向上一维 W1 的平均；directions 给定时不再随机抽样"""
    if directions is None:
        if n_projections < 1:
            raise ValueError(f"n_projections must be positive, got {n_projections}")
        directions = random_directions(n_projections, seed)
    else:
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    proj_mu = mu.points @ directions.T
    proj_nu = nu.points @ directions.T
    values = np.array([
        wasserstein_distance(proj_mu[:, k], proj_nu[:, k], mu.weights, nu.weights)
        for k in range(directions.shape[0])
    ])
    return float(np.sum(values) / values.size)
