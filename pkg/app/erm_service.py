"""
強凸インスタンスの経験リスク最小化（ERM）のサービスモジュール

F_S の一意な最小化点の閉形式
  w̃^c = (γ^c/λ^c) Ḡ(v_S^s)
  w̃^m = (1/λ^m)((1/m)v_S − γ^m v_S^s)
と、その大域最適性のランダム検査、ε-ERM の探索、GD の最適化誤差の測定を提供します。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from app.code_service import BinaryCode, code_service
from app.feldman_service import FeldmanSpec
from app.gd_service import CertificatePolicy, GDConfig, gd_service
from app.instance_service import (
    InstanceParams,
    Mode,
    SampleStats,
    instance_service,
    lipschitz_bound,
    unit_caps_hold,
)
from app.param_utils import ParamVector, project_unit_ball, random_feasible, unit_normalize
from app.rng_utils import stream
from app.schedule_service import RegimeError, schedule_service

logger = logging.getLogger(__name__)

STATIONARITY_TOLERANCE = 1e-9
EXCESS_TOLERANCE = 1e-12
QUADRATIC_TOLERANCE = 1e-9


class OptimalityViolationError(RuntimeError):
    """ランダム検査点が最小化点より小さい経験リスクを与えた"""

    def __init__(self, message: str, counterexamples: List[dict]):
        super().__init__(message)
        self.counterexamples = counterexamples


@dataclass(frozen=True, eq=False)
class ErmSolution:
    w_star: ParamVector
    stationarity_residual: float
    feasibility_margin: float  # 1 − ‖w_star‖
    empirical_risk: float


@dataclass(frozen=True)
class OptimalityReport:
    probes: int
    min_excess: float  # min F_S(w) − F_S(w_star)
    min_quadratic_slack: float  # min F_S(w) − F_S(w_star) − (α/2)‖w − w_star‖²
    violations: List[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class EpsilonProbe:
    radius: float
    empirical_gap: float  # F_S(w) − F_S(w_star)
    population_gap: float  # F(w) − F(0) の下端
    kept: bool


@dataclass(frozen=True)
class EpsilonProbeReport:
    epsilon: float
    radius_max: float
    erm_gap: float
    lipschitz: float  # 上限が成り立てば 7
    lipschitz_relaxed: bool  # 上限が崩れ、一般の上界で代用した
    gap_floor: float  # min{ρ/(72λm^{1.5}), ρ/12}
    analytic_bound: float  # gap_floor − 7√(2ε/λ)
    probes: List[EpsilonProbe]

    @property
    def kept(self) -> List[EpsilonProbe]:
        return [probe for probe in self.probes if probe.kept]

    @property
    def acceptance_rate(self) -> float:
        return len(self.kept) / len(self.probes) if self.probes else 0.0

    def transport_ok(self, tol: float = 1e-9) -> bool:
        """保持された各 ε-ERM について population_gap ≥ erm_gap − L·r"""
        return all(p.population_gap >= self.erm_gap - self.lipschitz * p.radius - tol for p in self.kept)

    @property
    def analytic_floor(self) -> float:
        """保持された ε-ERM の母集団ギャップの下界 gap_floor − L·√(2ε/α)（L = 7 なら analytic_bound と同じ形）"""
        return self.gap_floor - self.lipschitz * self.radius_max

    def analytic_ok(self, tol: float = 1e-9) -> bool:
        """厳密な ERM のギャップが gap_floor 以上で、保持された各 ε-ERM が analytic_floor 以上"""
        return self.erm_gap >= self.gap_floor - tol and all(p.population_gap >= self.analytic_floor - tol for p in self.kept)


@dataclass(frozen=True)
class OptimizationErrorPoint:
    eta: float
    T: int
    error: float  # F_S(接尾平均) − F_S(w_star)


class ErmService:
    def closed_form_minimizer(self, params: InstanceParams, code: BinaryCode, spec: FeldmanSpec, S: SampleStats) -> ErmSolution:
        """
        F_S の一意な最小化点を閉形式で求め、証明と同じ枝の選択で停留性を確認する

        Args:
            params: ERM モードのパラメータ
            code: 二値符号
            spec: Feldman 関数の定義
            S: サンプル

        Returns:
            ErmSolution: 最小化点・停留性残差・実行可能性の余裕・経験リスク
        """
        if params.mode is not Mode.ERM:
            raise ValueError(f"closed-form minimizer requires ERM mode, got {params.mode.value}")
        if params.regime is not None and params.regime.failing() and not params.relax.enabled:
            failing = params.regime.failing()
            raise RegimeError(f"ERM regime fails without relax: {', '.join(failing)}", failing)

        code_block = (params.gamma_c / params.lambda_c) * code_service.encode_unit(code, S.vSs)
        message_block = (S.vS / S.m - params.gamma_m * S.vSs) / params.lambda_m
        w_star = ParamVector(code_block, message_block)

        evaluation = instance_service.evaluate_point(params, code, spec, w_star)
        residual = instance_service.empirical_subgrad(params, code, spec, w_star, S, evaluation=evaluation).norm()
        if residual > STATIONARITY_TOLERANCE:
            logger.warning(f"[TRIAL] closed-form minimizer has stationarity residual {residual:.3e}")
        return ErmSolution(
            w_star=w_star,
            stationarity_residual=residual,
            feasibility_margin=1.0 - w_star.norm(),
            empirical_risk=instance_service.empirical_risk_value(params, evaluation, S),
        )

    def _empirical(self, params: InstanceParams, code: BinaryCode, spec: FeldmanSpec, S: SampleStats, w: ParamVector) -> float:
        return instance_service.empirical_risk_value(params, instance_service.evaluate_point(params, code, spec, w), S)

    def verify_global_optimality(
        self,
        params: InstanceParams,
        code: BinaryCode,
        spec: FeldmanSpec,
        S: SampleStats,
        sol: ErmSolution,
        probes: int = 1000,
        seed: int = 0,
        raise_on_violation: bool = False,
    ) -> OptimalityReport:
        """
        ランダムな実行可能点（と 0, w_star 自身）で
        F_S(w) ≥ F_S(w_star) − 1e−12 と F_S(w) ≥ F_S(w_star) + (α/2)‖w − w_star‖² − 1e−9 を確認する
        """
        rng = stream(seed, 0, "optimality-probe")
        points = [ParamVector.zeros(code.k), sol.w_star]
        points += [random_feasible(rng, code.k) for _ in range(probes)]

        alpha = params.alpha
        min_excess = math.inf
        min_slack = math.inf
        violations: List[dict] = []
        for index, w in enumerate(points):
            excess = self._empirical(params, code, spec, S, w) - sol.empirical_risk
            diff = w - sol.w_star
            slack = excess - 0.5 * alpha * diff.dot(diff)
            min_excess = min(min_excess, excess)
            min_slack = min(min_slack, slack)
            if excess < -EXCESS_TOLERANCE or slack < -QUADRATIC_TOLERANCE:
                violations.append({"probe": index, "excess": excess, "quadratic_slack": slack, "w": w.flat().tolist()})

        report = OptimalityReport(probes=len(points), min_excess=min_excess, min_quadratic_slack=min_slack, violations=violations)
        if violations:
            logger.error(f"[TRIAL] {len(violations)} optimality probe(s) beat the closed-form minimizer")
            if raise_on_violation:
                raise OptimalityViolationError(f"{len(violations)} probe(s) violate optimality", violations)
        return report

    def epsilon_erm_probe(
        self,
        params: InstanceParams,
        code: BinaryCode,
        spec: FeldmanSpec,
        S: SampleStats,
        epsilon: float,
        n_probes: int = 200,
        seed: int = 0,
        sol: Optional[ErmSolution] = None,
    ) -> EpsilonProbeReport:
        """
        w_star を中心とする半径 √(2ε/α) の球から点を取り、真の ε-ERM だけを残して母集団ギャップを測る

        半径 0 の点（w_star 自身）は常に最初に含まれる。
        """
        if epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        sol = sol or self.closed_form_minimizer(params, code, spec, S)
        rng = stream(seed, 0, "epsilon-probe")
        radius_max = math.sqrt(2.0 * epsilon / params.alpha)
        erm_gap = instance_service.population_gap(params, code, spec, sol.w_star).lo

        probes: List[EpsilonProbe] = []
        for index in range(n_probes + 1):
            radius = 0.0 if index == 0 else float(rng.uniform(0.0, radius_max))
            direction = ParamVector.from_flat(unit_normalize(rng.standard_normal(3 * code.k)), code.k)
            w = project_unit_ball(sol.w_star + direction.scale(radius))
            empirical_gap = self._empirical(params, code, spec, S, w) - sol.empirical_risk
            kept = empirical_gap <= epsilon
            population_gap = instance_service.population_gap(params, code, spec, w).lo if kept else math.nan
            # 射影で縮んだ場合に備え、実際の距離を記録する
            probes.append(EpsilonProbe(radius=(w - sol.w_star).norm(), empirical_gap=empirical_gap, population_gap=population_gap, kept=kept))

        report = EpsilonProbeReport(
            epsilon=epsilon,
            radius_max=radius_max,
            erm_gap=erm_gap,
            lipschitz=lipschitz_bound(params),
            lipschitz_relaxed=not unit_caps_hold(params),
            gap_floor=schedule_service.erm_gap_floor(params),
            analytic_bound=schedule_service.erm_analytic_bound(params),
            probes=probes,
        )
        if report.lipschitz_relaxed:
            logger.warning(f"[TRIAL] epsilon-ERM transport uses relaxed Lipschitz constant {report.lipschitz:.4f} instead of 7")
        logger.info(f"[TRIAL] epsilon-ERM probe: {len(report.kept)}/{len(probes)} kept (eps={epsilon:.3e})")
        return report

    def gd_optimization_error(
        self,
        params: InstanceParams,
        code: BinaryCode,
        spec: FeldmanSpec,
        S: SampleStats,
        etas: Sequence[float],
        T: int,
        suffix_s: int = 0,
        sol: Optional[ErmSolution] = None,
    ) -> List[OptimizationErrorPoint]:
        """強凸インスタンス上で GD を走らせ、各 η について接尾平均の経験リスクの最適値からの差を測る"""
        sol = sol or self.closed_form_minimizer(params, code, spec, S)
        points = []
        for eta in etas:
            cfg = GDConfig(eta=eta, T=T, suffix_s=suffix_s, certificate_policy=CertificatePolicy.IGNORE)
            rec = gd_service.run_gd(params, code, spec, S, cfg)
            error = self._empirical(params, code, spec, S, rec.suffix_avg) - sol.empirical_risk
            points.append(OptimizationErrorPoint(eta=eta, T=T, error=error))
            logger.info(f"[TRIAL] optimization error eta={eta} T={T}: {error:.3e}")
        return points

    def optimization_error_shape_ok(self, points: Sequence[OptimizationErrorPoint], tol: float = 1e-12) -> bool:
        """ηT の増加に対して最適化誤差が増えない（1/(ηT) 項が支配する範囲）"""
        ordered = sorted(points, key=lambda p: p.eta * p.T)
        return all(b.error <= a.error + tol for a, b in zip(ordered, ordered[1:]))


# シングルトンインスタンス
erm_service = ErmService()
