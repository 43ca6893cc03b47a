"""
Feldman 関数 h^ζ のサービスモジュール

h^ζ(w, i) = max{ζ(1−ρ/2), max_{x∈W_i} ⟨w, x̄⟩}
W_i はメッセージビット i が +1（GF(2) で 0）の符号語集合です。
インデックス i は 0 始まり（0 ≤ i < k）で扱います。
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.code_service import BinaryCode, code_service

logger = logging.getLogger(__name__)


class IndexOutOfRangeError(ValueError):
    """インデックス i が [0, k) の外"""


@dataclass(frozen=True, eq=False)
class FeldmanSpec:
    code: BinaryCode
    zeta: float
    floor: float

    @classmethod
    def create(cls, code: BinaryCode, zeta: float) -> "FeldmanSpec":
        if not 0.0 < zeta <= 1.0:
            raise ValueError(f"zeta must be in (0, 1], got {zeta}")
        return cls(code=code, zeta=zeta, floor=zeta * (1.0 - code.rho / 2.0))


@dataclass(frozen=True, eq=False)
class FeldmanEvaluation:
    """一回の相関スキャンから得た全 i についての h の値と選択された部分勾配"""

    scores: np.ndarray  # 2^k
    best_value: np.ndarray  # k: max_{x∈W_i} ⟨w, x̄⟩
    best_index: np.ndarray  # k: 最良符号語の表インデックス（同値は最小インデックス）
    values: np.ndarray  # k: h^ζ(w, i)
    floor_branch: np.ndarray  # k: 定数枝を選んだか（部分勾配 0）
    floor_tie: np.ndarray  # k: 定数枝と最良相関が完全に一致した


def _check_index(spec: FeldmanSpec, i: int) -> None:
    if not 0 <= i < spec.code.k:
        raise IndexOutOfRangeError(f"index {i} out of range [0, {spec.code.k})")


def _w_i_view(scores: np.ndarray, k: int, i: int) -> np.ndarray:
    """ビット i が 0 の要素だけを見るビュー（形状 (2^{k-1-i}, 2^i)）"""
    return scores.reshape(1 << (k - 1 - i), 2, 1 << i)[:, 0, :]


def _best_in_w_i(scores: np.ndarray, k: int, i: int) -> Tuple[float, int]:
    view = _w_i_view(scores, k, i)
    flat = int(np.argmax(view))
    block, offset = divmod(flat, 1 << i)
    return float(view[block, offset]), block * (1 << (i + 1)) + offset


class FeldmanService:
    def evaluate_all(self, spec: FeldmanSpec, wc: np.ndarray, scores: Optional[np.ndarray] = None) -> FeldmanEvaluation:
        """
        全 i についての h^ζ(wc, i) を一回のスキャンでまとめて評価する

        Args:
            spec: Feldman 関数の定義
            wc: 長さ 2k の符号ブロック
            scores: 既に計算済みの相関（あれば再利用）

        Returns:
            FeldmanEvaluation: 値・最良符号語・枝の選択
        """
        code = spec.code
        if scores is None:
            scores = code_service.correlation_scan(code, wc)
        best_value = np.empty(code.k)
        best_index = np.empty(code.k, dtype=np.int64)
        for i in range(code.k):
            best_value[i], best_index[i] = _best_in_w_i(scores, code.k, i)
        # 同値は定数枝へ（部分勾配 0）
        floor_branch = spec.floor >= best_value
        return FeldmanEvaluation(
            scores=scores,
            best_value=best_value,
            best_index=best_index,
            values=np.maximum(spec.floor, best_value),
            floor_branch=floor_branch,
            floor_tie=spec.floor == best_value,
        )

    def h_eval(self, spec: FeldmanSpec, wc: np.ndarray, i: int) -> float:
        _check_index(spec, i)
        scores = code_service.correlation_scan(spec.code, wc)
        best, _ = _best_in_w_i(scores, spec.code.k, i)
        return max(spec.floor, best)

    def h_subgrad(self, spec: FeldmanSpec, wc: np.ndarray, i: int) -> np.ndarray:
        """
        h^ζ(·, i) の部分勾配をひとつ選んで返す

        定数枝が勝つか同値なら 0、そうでなければ最良符号語 x̄*
        （同値の符号語は表インデックスの小さい方）。
        """
        _check_index(spec, i)
        scores = code_service.correlation_scan(spec.code, wc)
        best, index = _best_in_w_i(scores, spec.code.k, i)
        if spec.floor >= best:
            return np.zeros(spec.code.n)
        return code_service.codeword_unit(spec.code, index)

    def subgrad_from(self, spec: FeldmanSpec, evaluation: FeldmanEvaluation, i: int) -> np.ndarray:
        if evaluation.floor_branch[i]:
            return np.zeros(spec.code.n)
        return code_service.codeword_unit(spec.code, int(evaluation.best_index[i]))

    def h_certified_eval(self, spec: FeldmanSpec, c: float, u: np.ndarray, i: int) -> Tuple[float, float]:
        """
        wc = c·Ḡ(u) のときの h^ζ(wc, i) を W_i をスキャンせずに区間で囲む

        Returns:
            Tuple[float, float]: [lo, hi]。u(i) = +1 なら退化区間
        """
        _check_index(spec, i)
        if c < 0:
            raise ValueError(f"c must be nonnegative, got {c}")
        u = np.asarray(u)
        if u[i] == 1:
            value = max(spec.floor, c)
            return value, value
        # 距離 ≥ 2kρ より ⟨Ḡ(u), x̄⟩ ≤ 1 − 2ρ
        return spec.floor, max(spec.floor, c * (1.0 - 2.0 * spec.code.rho))

    def h_sample(self, evaluation: FeldmanEvaluation, mult: np.ndarray) -> float:
        """h_S = (1/m) Σ_j h(w, z_j)。多重度で重み付けする"""
        return float(mult @ evaluation.values) / float(mult.sum())

    def h_population(self, evaluation: FeldmanEvaluation) -> float:
        """一様分布 D 上の h_D"""
        return float(evaluation.values.mean())

    def sample_subgrad(self, spec: FeldmanSpec, evaluation: FeldmanEvaluation, mult: np.ndarray) -> np.ndarray:
        """∇h_S の選択: 各 i の選択を多重度で平均する"""
        g = np.zeros(spec.code.n)
        m = float(mult.sum())
        for i in np.flatnonzero(mult):
            if not evaluation.floor_branch[i]:
                g += mult[i] * code_service.codeword_unit(spec.code, int(evaluation.best_index[i]))
        return g / m


# シングルトンインスタンス
feldman_service = FeldmanService()
