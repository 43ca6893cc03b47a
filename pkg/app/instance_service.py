"""
ハードインスタンスのサービスモジュール

f(w,i) = h^ζ(w^c,i) − ⟨w^m, δ_i⟩ + max{p(w),0} + (λ^m/2)‖w^m‖² + (λ^c/2)‖w^c‖²
p(w)   = max_{v∈{−1,1}^k} γ^m⟨v, w^m⟩ − γ^c⟨Ḡ(v), w^c⟩

ERM 用と GD 用の損失は同じ形で、パラメータの選び方（schedule_service）だけが異なります。
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from app.code_service import BinaryCode, code_service
from app.feldman_service import FeldmanEvaluation, FeldmanSpec, feldman_service
from app.param_utils import ParamVector, random_feasible, require_feasible
from app.rng_utils import stream

logger = logging.getLogger(__name__)

DEFAULT_BRUTE_FORCE_CAP = 20


class CapabilityError(RuntimeError):
    """全数評価の上限を超えた、または証明付き評価が使えない"""


class PreconditionError(ValueError):
    """証明付き評価の前提（候補 = sign(w^m) など）が満たされない"""


class Mode(str, Enum):
    ERM = "ERM"
    GD = "GD"


@dataclass(frozen=True)
class RelaxMultipliers:
    """
    証明中の定数 9, 27/2, 18, 30, 4 に掛ける倍率

    enabled が True のときだけパラメータ上限（≤ 1 など）の違反も許す。
    """

    enabled: bool = False
    erm_lambda_m_low: float = 1.0  # 9/√m
    erm_lambda_m_high: float = 1.0  # 27/(2√m)
    gd_lambda_m: float = 1.0  # 18/√(2m)
    gd_gamma_c: float = 1.0  # 30
    gd_lambda_c: float = 1.0  # 4/(ρηT)

    @property
    def scales_constants(self) -> bool:
        return any(
            value != 1.0
            for value in (
                self.erm_lambda_m_low,
                self.erm_lambda_m_high,
                self.gd_lambda_m,
                self.gd_gamma_c,
                self.gd_lambda_c,
            )
        )


@dataclass(frozen=True)
class RegimeCheck:
    name: str
    lhs: float
    rhs: float
    relation: str  # "<=", "<", ">="
    passed: bool


@dataclass(frozen=True)
class RegimeReport:
    checks: List[RegimeCheck]
    caps: List[RegimeCheck]

    @property
    def regime_ok(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def caps_ok(self) -> bool:
        return all(check.passed for check in self.caps)

    def failing(self) -> List[str]:
        return [check.name for check in self.checks + self.caps if not check.passed]

    def as_dict(self) -> dict:
        return {
            "regime_ok": self.regime_ok,
            "caps_ok": self.caps_ok,
            "checks": [check.__dict__ for check in self.checks],
            "caps": [check.__dict__ for check in self.caps],
        }


@dataclass(frozen=True)
class InstanceParams:
    mode: Mode
    k: int
    m: int
    zeta: float
    gamma_c: float
    gamma_m: float
    lambda_c: float
    lambda_m: float
    rho: float
    relax: RelaxMultipliers = field(default_factory=RelaxMultipliers)
    eta: Optional[float] = None
    T: Optional[int] = None
    lam: Optional[float] = None
    epsilon: Optional[float] = None
    regime: Optional[RegimeReport] = None
    brute_force_cap: Optional[int] = None  # None ならサービスの既定値

    @property
    def alpha(self) -> float:
        return min(self.lambda_m, self.lambda_c)

    def as_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "k": self.k,
            "m": self.m,
            "zeta": self.zeta,
            "gamma_c": self.gamma_c,
            "gamma_m": self.gamma_m,
            "lambda_c": self.lambda_c,
            "lambda_m": self.lambda_m,
            "rho": self.rho,
            "alpha": self.alpha,
            "eta": self.eta,
            "T": self.T,
            "lambda": self.lam,
            "epsilon": self.epsilon,
            "relax": self.relax.__dict__,
        }


@dataclass(frozen=True, eq=False)
class SampleStats:
    m: int
    k: int
    draws: np.ndarray
    mult: np.ndarray
    vS: np.ndarray
    vSs: np.ndarray
    vS_norm: float
    conditioned: bool

    @property
    def unsampled_fraction(self) -> float:
        """|{i ∉ S}| / k"""
        return float(np.count_nonzero(self.mult == 0)) / self.k


@dataclass(frozen=True)
class RiskValue:
    kind: str  # "exact" | "interval"
    lo: float
    hi: float

    @classmethod
    def exact(cls, value: float) -> "RiskValue":
        return cls("exact", value, value)

    def contains(self, value: float, tol: float = 1e-12) -> bool:
        return self.lo - tol <= value <= self.hi + tol

    def __sub__(self, other: "RiskValue") -> "RiskValue":
        kind = "exact" if self.kind == other.kind == "exact" else "interval"
        return RiskValue(kind, self.lo - other.hi, self.hi - other.lo)


@dataclass(frozen=True, eq=False)
class PEvaluation:
    value: float
    argmax_index: int
    argmax_v: np.ndarray
    margin: float
    tie: bool


@dataclass(frozen=True, eq=False)
class CertifiedP:
    value: float
    certified_unique: bool
    slack: float


@dataclass(frozen=True, eq=False)
class PointEvaluation:
    """ある点 w における一回のスキャンから得た h と p の評価"""

    w: ParamVector
    feldman: FeldmanEvaluation
    p: PEvaluation


@dataclass(frozen=True)
class LipschitzAudit:
    max_norm: float
    general_bound: float
    unit_caps_hold: bool
    capped_bound: float = 7.0

    @property
    def ok(self) -> bool:
        within_general = self.max_norm <= self.general_bound + 1e-9
        within_capped = (not self.unit_caps_hold) or self.max_norm <= self.capped_bound + 1e-9
        return within_general and within_capped


def general_lipschitz_bound(params: InstanceParams) -> float:
    """‖∂f‖ ≤ 4 + γ^m√k + γ^c + λ^m + λ^c（単位球上）"""
    return 4.0 + params.gamma_m * math.sqrt(params.k) + params.gamma_c + params.lambda_m + params.lambda_c


def unit_caps_hold(params: InstanceParams) -> bool:
    return params.lambda_m <= 1.0 and params.lambda_c <= 1.0 and params.gamma_c <= 1.0 and params.gamma_m * math.sqrt(params.k) <= 1.0


def lipschitz_bound(params: InstanceParams) -> float:
    """上限が成り立てば 7、そうでなければ一般の上界（緩和された定数）"""
    return 7.0 if unit_caps_hold(params) else general_lipschitz_bound(params)


def delta_vector(m: int, k: int, i: int) -> np.ndarray:
    """δ_i(j) = 1/m − 2 (j = i)、1/m (j ≠ i)"""
    if not 0 <= i < k:
        raise IndexError(f"index {i} out of range [0, {k})")
    delta = np.full(k, 1.0 / m)
    delta[i] -= 2.0
    return delta


def sample_stats(draws: Sequence[int], k: int) -> SampleStats:
    """
    サンプル S から v_S, v_S^s と条件付け事象 ‖v_S‖ ≤ 3√m を計算する

    Args:
        draws: [0, k) のインデックス列
        k: 定義域の大きさ

    Returns:
        SampleStats: 多重度と v_S 系のベクトル
    """
    draws = np.asarray(draws, dtype=np.int64)
    m = draws.shape[0]
    if m == 0:
        raise ValueError("sample must not be empty")
    if np.any(draws < 0) or np.any(draws >= k):
        raise IndexError(f"sample indices must lie in [0, {k})")
    mult = np.bincount(draws, minlength=k)
    # v_S = Σ_j δ_{z_j} = m·(1/m) − 2·m_i
    vS = 1.0 - 2.0 * mult
    vSs = np.where(mult >= 1, -1.0, 1.0)
    vS_norm = float(np.sqrt(vS @ vS))
    return SampleStats(
        m=m,
        k=k,
        draws=draws,
        mult=mult,
        vS=vS,
        vSs=vSs,
        vS_norm=vS_norm,
        conditioned=vS_norm <= 3.0 * math.sqrt(m),
    )


def draw_sample(m: int, k: int, rng: np.random.Generator) -> SampleStats:
    """S ~ Uniform([k])^m"""
    return sample_stats(rng.integers(0, k, size=m), k)


def _lex_key(indices: np.ndarray, k: int) -> np.ndarray:
    """v を (v(0), v(1), ...) の辞書順（+1 < −1）で比べるためのキー（ビット反転）"""
    key = np.zeros_like(indices)
    for i in range(k):
        key |= ((indices >> i) & 1) << (k - 1 - i)
    return key


class InstanceService:
    def __init__(self, brute_force_cap: int = DEFAULT_BRUTE_FORCE_CAP):
        self.brute_force_cap = brute_force_cap

    def cap_for(self, params: InstanceParams) -> int:
        """全数評価する k の上限（パラメータが持っていればそちらを使う）"""
        return self.brute_force_cap if params.brute_force_cap is None else params.brute_force_cap

    # ---------- p(w) ----------

    def p_objective(self, params: InstanceParams, code: BinaryCode, w: ParamVector, corr: Optional[np.ndarray] = None) -> np.ndarray:
        """全 v についての γ^m⟨v, w^m⟩ − γ^c⟨Ḡ(v), w^c⟩"""
        if corr is None:
            corr = code_service.correlation_scan(code, w.code_block)
        return params.gamma_m * code_service.message_scan(code, w.message_block) - params.gamma_c * corr

    def p_eval_bruteforce(
        self,
        params: InstanceParams,
        code: BinaryCode,
        w: ParamVector,
        corr: Optional[np.ndarray] = None,
        cap: Optional[int] = None,
    ) -> PEvaluation:
        """
        p(w) を 2^k 個の符号ベクトル全てで評価する

        同値の最大は辞書順最小の v を選び、margin = 0 を記録する。
        """
        cap = self.cap_for(params) if cap is None else cap
        if code.k > cap:
            raise CapabilityError(f"k={code.k} exceeds brute-force cap {cap}; use p_eval_certified")
        if not w.is_finite():
            raise ValueError("w must be finite")
        objective = self.p_objective(params, code, w, corr)
        value = float(objective.max())
        winners = np.flatnonzero(objective == value)
        if winners.shape[0] > 1:
            argmax_index = int(winners[np.argmin(_lex_key(winners, code.k))])
            margin = 0.0
        else:
            argmax_index = int(winners[0])
            margin = value - float(np.partition(objective, -2)[-2]) if objective.shape[0] > 1 else math.inf
        return PEvaluation(
            value=value,
            argmax_index=argmax_index,
            argmax_v=code_service.message_of(code, argmax_index),
            margin=margin,
            tie=winners.shape[0] > 1,
        )

    def p_eval_certified(self, params: InstanceParams, code: BinaryCode, w: ParamVector, candidate: np.ndarray) -> CertifiedP:
        """
        候補 v = sign(w^m) が p の一意な最大化点であることをスキャンなしで証明する

        一か所でも符号を反転すると第一項は 2γ^m·min|w^m(i)| 以上減り、
        第二項は Cauchy–Schwarz により高々 2γ^c‖w^c‖ しか増えない。
        """
        candidate = np.asarray(candidate, dtype=np.float64)
        wm = w.message_block
        if np.any(wm == 0):
            raise PreconditionError("w^m has zero entries; sign candidate undefined")
        if not np.array_equal(candidate, np.sign(wm)):
            raise PreconditionError("candidate must equal sign(w^m)")
        value = params.gamma_m * float(candidate @ wm) - params.gamma_c * float(
            code_service.encode_unit(code, candidate) @ w.code_block
        )
        flip_loss = 2.0 * params.gamma_m * float(np.min(np.abs(wm)))
        max_gain = 2.0 * params.gamma_c * float(np.sqrt(w.code_block @ w.code_block))
        return CertifiedP(value=value, certified_unique=flip_loss > max_gain, slack=flip_loss - max_gain)

    def _p_at(self, params: InstanceParams, code: BinaryCode, w: ParamVector, corr: np.ndarray) -> PEvaluation:
        cap = self.cap_for(params)
        if code.k <= cap:
            return self.p_eval_bruteforce(params, code, w, corr, cap=cap)
        candidate = np.sign(w.message_block)
        if np.any(candidate == 0):
            if not np.any(w.flat()):
                return PEvaluation(0.0, 0, np.ones(code.k), 0.0, True)
            raise CapabilityError("p argmax cannot be certified at a point with zero message entries")
        certified = self.p_eval_certified(params, code, w, candidate)
        if not certified.certified_unique:
            raise CapabilityError(f"p argmax not certifiable at k={code.k} (slack {certified.slack:.3e})")
        return PEvaluation(
            value=certified.value,
            argmax_index=code_service.message_index(code, candidate),
            argmax_v=candidate,
            margin=certified.slack,
            tie=False,
        )

    # ---------- 評価と部分勾配 ----------

    def evaluate_point(self, params: InstanceParams, code: BinaryCode, spec: FeldmanSpec, w: ParamVector) -> PointEvaluation:
        """h と p の評価を一回の相関スキャンで共有する"""
        corr = code_service.correlation_scan(code, w.code_block)
        return PointEvaluation(
            w=w,
            feldman=feldman_service.evaluate_all(spec, w.code_block, scores=corr),
            p=self._p_at(params, code, w, corr),
        )

    def _p_subgrad(self, params: InstanceParams, code: BinaryCode, evaluation: PointEvaluation):
        # p(w) = 0 の同値は 0 ∈ ∂max{p, 0} を選ぶ
        if evaluation.p.value <= 0.0:
            return np.zeros(code.n), np.zeros(code.k)
        v = evaluation.p.argmax_v
        return -params.gamma_c * code_service.encode_unit(code, v), params.gamma_m * v

    def _regularizer(self, params: InstanceParams, w: ParamVector) -> float:
        return 0.5 * params.lambda_m * float(w.message_block @ w.message_block) + 0.5 * params.lambda_c * float(
            w.code_block @ w.code_block
        )

    def loss_values(self, params: InstanceParams, evaluation: PointEvaluation) -> np.ndarray:
        """全 i についての f(w, i)"""
        w = evaluation.w
        wm = w.message_block
        linear = wm.sum() / params.m - 2.0 * wm  # ⟨w^m, δ_i⟩
        return evaluation.feldman.values - linear + max(evaluation.p.value, 0.0) + self._regularizer(params, w)

    def loss_value(self, params: InstanceParams, code: BinaryCode, spec: FeldmanSpec, w: ParamVector, i: int) -> float:
        return float(self.loss_values(params, self.evaluate_point(params, code, spec, w))[i])

    def loss_subgrad(
        self,
        params: InstanceParams,
        code: BinaryCode,
        spec: FeldmanSpec,
        w: ParamVector,
        i: int,
        evaluation: Optional[PointEvaluation] = None,
    ) -> ParamVector:
        """f(·, i) の w における部分勾配"""
        if evaluation is None:
            require_feasible(w, "loss_subgrad")
            evaluation = self.evaluate_point(params, code, spec, w)
        p_c, p_m = self._p_subgrad(params, code, evaluation)
        g_c = feldman_service.subgrad_from(spec, evaluation.feldman, i) + params.lambda_c * w.code_block + p_c
        g_m = -delta_vector(params.m, params.k, i) + params.lambda_m * w.message_block + p_m
        return ParamVector(g_c, g_m)

    def empirical_subgrad(
        self,
        params: InstanceParams,
        code: BinaryCode,
        spec: FeldmanSpec,
        w: ParamVector,
        S: SampleStats,
        evaluation: Optional[PointEvaluation] = None,
    ) -> ParamVector:
        """∇F_S の選択。線形項は −v_S/m にまとまる"""
        if evaluation is None:
            evaluation = self.evaluate_point(params, code, spec, w)
        p_c, p_m = self._p_subgrad(params, code, evaluation)
        g_c = feldman_service.sample_subgrad(spec, evaluation.feldman, S.mult) + params.lambda_c * w.code_block + p_c
        g_m = -S.vS / S.m + params.lambda_m * w.message_block + p_m
        return ParamVector(g_c, g_m)

    def empirical_risk_value(self, params: InstanceParams, evaluation: PointEvaluation, S: SampleStats) -> float:
        return float(S.mult @ self.loss_values(params, evaluation)) / S.m

    # ---------- リスク ----------

    def risk(
        self,
        params: InstanceParams,
        code: BinaryCode,
        spec: FeldmanSpec,
        w: ParamVector,
        S: Optional[SampleStats] = None,
        method: str = "auto",
    ) -> RiskValue:
        """
        経験リスク（S を渡した場合）または一様分布 D 上の母集団リスク

        Args:
            method: "auto" | "exact" | "interval"。interval は w^c = c·Ḡ(u) の形を要求する
        """
        require_feasible(w, "risk")
        if S is not None:
            return RiskValue.exact(self.empirical_risk_value(params, self.evaluate_point(params, code, spec, w), S))

        if method == "exact" or (method == "auto" and code.k <= self.cap_for(params)):
            return RiskValue.exact(float(self.loss_values(params, self.evaluate_point(params, code, spec, w)).mean()))
        return self._population_interval(params, code, spec, w)

    def _population_interval(self, params: InstanceParams, code: BinaryCode, spec: FeldmanSpec, w: ParamVector) -> RiskValue:
        wc = w.code_block
        c = float(np.sqrt(wc @ wc))
        if c == 0.0:
            u = np.ones(code.k)
        else:
            u = np.where(wc[: code.k] >= 0, 1.0, -1.0)
            if not np.allclose(wc, c * code_service.encode_unit(code, u), rtol=0.0, atol=1e-12):
                raise CapabilityError("interval risk requires w^c proportional to an encoded message")
        bounds = np.array([feldman_service.h_certified_eval(spec, c, u, i) for i in range(code.k)])

        wm = w.message_block
        if np.any(wm):
            candidate = np.sign(wm)
            certified = self.p_eval_certified(params, code, w, candidate)
            if not certified.certified_unique:
                raise CapabilityError("p argmax not certifiable for interval risk")
            p_plus = max(certified.value, 0.0)
        elif c == 0.0:
            p_plus = 0.0
        else:
            raise CapabilityError("p cannot be certified with w^m = 0 and w^c ≠ 0")

        # E_i[δ_i] = (1/m − 2/k)·1 （k = 2m なら 0）
        linear = (1.0 / params.m - 2.0 / params.k) * float(wm.sum())
        rest = -linear + p_plus + self._regularizer(params, w)
        return RiskValue("interval", float(bounds[:, 0].mean()) + rest, float(bounds[:, 1].mean()) + rest)

    def population_gap(self, params: InstanceParams, code: BinaryCode, spec: FeldmanSpec, w: ParamVector, method: str = "auto") -> RiskValue:
        """F(w) − F(0)"""
        zero = ParamVector.zeros(code.k)
        return self.risk(params, code, spec, w, method=method) - self.risk(params, code, spec, zero, method=method)

    def feldman_gap(self, spec: FeldmanSpec, wc: np.ndarray) -> float:
        """h_D(w^c) − ζ(1−ρ/2)。証明が直接下から抑える量"""
        return feldman_service.h_population(feldman_service.evaluate_all(spec, wc)) - spec.floor

    # ---------- 性質の検査 ----------

    def strong_convexity_probe(self, params: InstanceParams, code: BinaryCode, spec: FeldmanSpec, pairs: int = 200, seed: int = 0) -> float:
        """
        ランダムな実行可能点の組 (w1, w2) について
        2[f(w2,i) − f(w1,i) − ⟨g, w2 − w1⟩]/‖w2 − w1‖²（g は w1 での部分勾配）の最小値
        """
        rng = stream(seed, 0, "strong-convexity")
        worst = math.inf
        for _ in range(pairs):
            w1 = random_feasible(rng, code.k)
            w2 = random_feasible(rng, code.k)
            diff = w2 - w1
            dist2 = diff.dot(diff)
            if dist2 == 0.0:
                continue
            ev1 = self.evaluate_point(params, code, spec, w1)
            ev2 = self.evaluate_point(params, code, spec, w2)
            f1 = self.loss_values(params, ev1)
            f2 = self.loss_values(params, ev2)
            for i in range(code.k):
                g = self.loss_subgrad(params, code, spec, w1, i, evaluation=ev1)
                worst = min(worst, 2.0 * (f2[i] - f1[i] - g.dot(diff)) / dist2)
        return worst

    def lipschitz_audit(self, params: InstanceParams, code: BinaryCode, spec: FeldmanSpec, n_points: int = 10_000, seed: int = 0) -> LipschitzAudit:
        """ランダムな実行可能点での部分勾配ノルムの最大値を二つの上界と比べる"""
        rng = stream(seed, 0, "lipschitz")
        max_norm = 0.0
        for _ in range(n_points):
            w = random_feasible(rng, code.k)
            evaluation = self.evaluate_point(params, code, spec, w)
            for i in range(code.k):
                max_norm = max(max_norm, self.loss_subgrad(params, code, spec, w, i, evaluation=evaluation).norm())
        general = general_lipschitz_bound(params)
        caps = unit_caps_hold(params)
        audit = LipschitzAudit(max_norm=max_norm, general_bound=general, unit_caps_hold=caps)
        logger.info(f"[AUDIT] max subgradient norm {max_norm:.4f} (general bound {general:.4f}, caps hold: {caps})")
        return audit


# シングルトンインスタンス
instance_service = InstanceService()
