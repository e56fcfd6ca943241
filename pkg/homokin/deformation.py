import logging
from typing import List, Optional, Sequence

import numpy as np

from homokin.errors import SingularDeformation

logger = logging.getLogger(__name__)

SINGULAR_DET = 1e-12
# relative imaginary part below which an eigenvalue counts as real
IMAG_TOL = 1e-5

_I3 = np.eye(3)


class DeformationMatrix:
    """仿射形变 A 及其诱导流 L(t) = A(I+tA)^{-1}。

    值语义：A 在构造时复制并设为只读，所有方法都是输入的确定性函数。
    """

    def __init__(self, A):
        A = np.array(A, dtype=float)
        if A.shape == (9,):
            A = A.reshape(3, 3)
        if A.shape != (3, 3):
            raise ValueError(f"deformation matrix must be 3x3, got shape {A.shape}")
        A.setflags(write=False)
        self.A = A
        self.t_star = self._find_t_star()
        logger.debug(f"deformation A={A.tolist()} t*={self.t_star}")

    @classmethod
    def simple_shear(cls, K: float) -> "DeformationMatrix":
        A = np.zeros((3, 3))
        A[0, 1] = K
        return cls(A)

    @classmethod
    def dilation(cls, a: float) -> "DeformationMatrix":
        return cls(a * _I3)

    @classmethod
    def from_config(cls, values: Sequence[float]) -> "DeformationMatrix":
        return cls(np.asarray(values, dtype=float).reshape(3, 3))

    def to_config(self) -> List[float]:
        return [float(v) for v in self.A.reshape(-1)]

    @property
    def shear_rate(self) -> float:
        return float(self.A[0, 1])

    def _find_t_star(self) -> Optional[float]:
        """det(I+tA) = prod(1 + t lambda_i)，t* = min(-1/lambda) 取自负实特征值。

        偶数重根处 det 不变号，但照样是奇点。虚部不超过 IMAG_TOL 相对量的特征值按实数处理，
        亏损块在浮点下会裂成这样的近共轭对。
        """
        if not np.any(self.A):
            return None
        eig = np.linalg.eigvals(self.A)
        scale = np.maximum(1.0, np.abs(eig))
        real_neg = eig.real[(np.abs(eig.imag) <= IMAG_TOL * scale) & (eig.real < 0)]
        if real_neg.size == 0:
            return None
        return float(np.min(-1.0 / real_neg))

    def _check(self, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError(f"time must be non-negative, got {t}")
        if self.t_star is not None and t >= self.t_star:
            raise SingularDeformation(f"t={t} is at or beyond the blow-up time t*={self.t_star}")
        B = _I3 + t * self.A
        det = np.linalg.det(B)
        if abs(det) < SINGULAR_DET:
            raise SingularDeformation(f"|det(I+tA)|={abs(det):.3e} at t={t}")
        return B

    def detI_tA(self, t: float) -> float:
        return float(np.linalg.det(_I3 + t * self.A))

    def eval_L(self, t: float) -> np.ndarray:
        B = self._check(t)
        # L B = A  <=>  B^T L^T = A^T
        return np.linalg.solve(B.T, self.A.T).T

    def flow_map(self, t0: float, t1: float) -> np.ndarray:
        """dw/dt = -L(t)w 的精确传播子 M(t0,t1) = (I+t1 A)^{-1}(I+t0 A)"""
        if t1 < t0:
            raise ValueError(f"flow_map requires t0 <= t1, got {t0} > {t1}")
        B0 = self._check(t0)
        B1 = self._check(t1)
        return np.linalg.solve(B1, B0)

    def heating_invariant(self, t: float) -> float:
        L = self.eval_L(t)
        tr = np.trace(L)
        return 0.5 * (np.trace(L @ L) + np.sum(L * L) - (2.0 / 3.0) * tr * tr)

    def riccati_residual(self, t: float, h: float) -> float:
        dL = (self.eval_L(t + h) - self.eval_L(t - h)) / (2.0 * h)
        L = self.eval_L(t)
        return float(np.max(np.abs(dL + L @ L)))

    def log_det_rate(self, t: float, h: float) -> float:
        return (np.log(abs(self.detI_tA(t + h))) - np.log(abs(self.detI_tA(t - h)))) / (2.0 * h)

    def check_horizon(self, horizon: float) -> None:
        if self.t_star is not None and horizon >= self.t_star:
            raise SingularDeformation(f"horizon {horizon} reaches the blow-up time t*={self.t_star:.6g}")

    def __repr__(self) -> str:
        return f"DeformationMatrix(A={self.A.tolist()}, t_star={self.t_star})"
