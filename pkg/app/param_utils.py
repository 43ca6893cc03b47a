"""
パラメータ空間のユーティリティ

w = (w^c, w^m) ∈ R^{2k+k} のブロック構造ベクトルと、
単位球への射影・正規化を提供します。
"""

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# 実行可能性判定の許容誤差（丸め誤差のみを吸収する）
FEASIBILITY_TOL = 1e-12


class InfeasibleVectorError(ValueError):
    """非有限値や単位球外のベクトルが渡された"""


@dataclass(frozen=True, eq=False)
class ParamVector:
    """w = (w^c, w^m)。code_block は長さ 2k、message_block は長さ k"""

    code_block: np.ndarray
    message_block: np.ndarray

    def __post_init__(self):
        code = np.asarray(self.code_block, dtype=np.float64)
        message = np.asarray(self.message_block, dtype=np.float64)
        if code.ndim != 1 or message.ndim != 1:
            raise InfeasibleVectorError("blocks must be 1-d vectors")
        if code.shape[0] != 2 * message.shape[0]:
            raise InfeasibleVectorError(
                f"block lengths must be 2k and k, got {code.shape[0]} and {message.shape[0]}"
            )
        object.__setattr__(self, "code_block", code)
        object.__setattr__(self, "message_block", message)

    @property
    def k(self) -> int:
        return self.message_block.shape[0]

    @classmethod
    def zeros(cls, k: int) -> "ParamVector":
        return cls(np.zeros(2 * k), np.zeros(k))

    @classmethod
    def from_flat(cls, flat: np.ndarray, k: int) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        return cls(flat[: 2 * k].copy(), flat[2 * k :].copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.code_block, self.message_block])

    def norm(self) -> float:
        return float(np.sqrt(self.code_block @ self.code_block + self.message_block @ self.message_block))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.code_block)) and np.all(np.isfinite(self.message_block)))

    def is_feasible(self, tol: float = FEASIBILITY_TOL) -> bool:
        return self.is_finite() and self.norm() <= 1.0 + tol

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return ParamVector(self.code_block + other.code_block, self.message_block + other.message_block)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return ParamVector(self.code_block - other.code_block, self.message_block - other.message_block)

    def scale(self, c: float) -> "ParamVector":
        return ParamVector(c * self.code_block, c * self.message_block)

    def dot(self, other: "ParamVector") -> float:
        return float(self.code_block @ other.code_block + self.message_block @ other.message_block)


def project_unit_ball(w: ParamVector) -> ParamVector:
    """
    単位球への射影 Π

    Args:
        w: 有限なパラメータベクトル

    Returns:
        ParamVector: ‖w‖ ≤ 1 ならそのまま、そうでなければ w/‖w‖
    """
    if not w.is_finite():
        raise InfeasibleVectorError("cannot project a vector with non-finite entries")
    norm = w.norm()
    if norm <= 1.0:
        return w
    projected = w.scale(1.0 / norm)
    # 丸めで 1 をわずかに超えた場合は縮めて冪等性を保つ
    shrink = np.nextafter(1.0, 0.0)
    while projected.norm() > 1.0:
        projected = projected.scale(shrink)
    return projected


def unit_normalize(x: np.ndarray) -> np.ndarray:
    """x̄ = x/‖x‖。ゼロベクトルは G(0)=0 の規約に合わせてゼロを返す"""
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.sqrt(x @ x))
    if norm == 0.0:
        return np.zeros_like(x)
    return x / norm


def require_feasible(w: ParamVector, context: str = "") -> None:
    """許容誤差を超えて単位球の外にあるベクトルを拒否する"""
    if not w.is_feasible():
        raise InfeasibleVectorError(f"infeasible point{' in ' + context if context else ''}: norm={w.norm()!r}")


def random_feasible(rng: np.random.Generator, k: int, radius_max: float = 1.0) -> ParamVector:
    """単位球内の一様ランダムな点（方向は一様、半径は体積一様）"""
    d = 3 * k
    direction = unit_normalize(rng.standard_normal(d))
    radius = radius_max * rng.uniform() ** (1.0 / d)
    return ParamVector.from_flat(radius * direction, k)
