"""
パラメータスケジュールのサービスモジュール

ERM インスタンス（λ-強凸）と GD インスタンスのパラメータ割り当て、
各レジーム不等式の判定レポート、証明の連鎖から得られる予測下界を提供します。
"""

import logging
import math
from typing import List, Optional

from app.instance_service import (
    InstanceParams,
    Mode,
    RegimeCheck,
    RegimeReport,
    RelaxMultipliers,
    SampleStats,
)

logger = logging.getLogger(__name__)

# ERM の ε を決める定数 4·72²
_ERM_EPS_DENOM = 4.0 * 72.0**2


class RegimeError(ValueError):
    """緩和なしではレジーム不等式が満たされない"""

    def __init__(self, message: str, failing: List[str]):
        super().__init__(message)
        self.failing = failing


def _check(name: str, lhs: float, relation: str, rhs: float) -> RegimeCheck:
    if relation == "<=":
        passed = lhs <= rhs
    elif relation == "<":
        passed = lhs < rhs
    elif relation == ">=":
        passed = lhs >= rhs
    elif relation == ">":
        passed = lhs > rhs
    else:
        raise ValueError(f"unknown relation {relation}")
    return RegimeCheck(name=name, lhs=float(lhs), rhs=float(rhs), relation=relation, passed=bool(passed))


def _caps(zeta: float, gamma_c: float, gamma_m: float, lambda_c: float, lambda_m: float, k: int) -> List[RegimeCheck]:
    return [
        _check("zeta <= 1", zeta, "<=", 1.0),
        _check("gamma_c <= 1", gamma_c, "<=", 1.0),
        _check("lambda_m <= 1", lambda_m, "<=", 1.0),
        _check("lambda_c <= 1", lambda_c, "<=", 1.0),
        _check("gamma_m <= 1/sqrt(k)", gamma_m, "<=", 1.0 / math.sqrt(k)),
    ]


class ScheduleService:
    def erm_epsilon(self, lam: float, rho: float, m: int, explicit_lam: bool = False) -> float:
        """既定の λ なら λρ²/(4·72²·7⁴)、明示された λ なら ρ²/(4·72²·7²·λm³)"""
        if not explicit_lam:
            return lam * rho**2 / (_ERM_EPS_DENOM * 7.0**4)
        return rho**2 / (_ERM_EPS_DENOM * 7.0**2 * lam * m**3)

    def erm_regime(self, params: InstanceParams) -> RegimeReport:
        m, relax = params.m, params.relax
        sqrt_m = math.sqrt(m)
        checks = [
            _check("9/sqrt(m) <= lambda_m", params.lambda_m, ">=", 9.0 * relax.erm_lambda_m_low / sqrt_m),
            _check("lambda_m < 27/(2 sqrt(m))", params.lambda_m, "<", 13.5 * relax.erm_lambda_m_high / sqrt_m),
            _check("gamma_m <= 1/(2m)", params.gamma_m, "<=", 1.0 / (2.0 * m)),
            _check("gamma_c <= gamma_m/(9 sqrt(m))", params.gamma_c, "<=", params.gamma_m / (9.0 * sqrt_m)),
            _check("lambda_c >= 3 gamma_c", params.lambda_c, ">=", 3.0 * params.gamma_c),
            _check("zeta >= gamma_c/lambda_c", params.zeta, ">=", params.gamma_c / params.lambda_c),
        ]
        if params.lam is not None:
            checks.append(_check("lambda <= 1/sqrt(m)", params.lam, "<=", 1.0 / sqrt_m))
        caps = _caps(params.zeta, params.gamma_c, params.gamma_m, params.lambda_c, params.lambda_m, params.k)
        return RegimeReport(checks=checks, caps=caps)

    def gd_regime(self, params: InstanceParams) -> RegimeReport:
        m, relax, eta, T = params.m, params.relax, params.eta, params.T
        sqrt_m = math.sqrt(m)
        eta_T = eta * T
        checks = [
            _check("18/sqrt(2m) <= lambda_m", params.lambda_m, ">=", 18.0 * relax.gd_lambda_m / math.sqrt(2.0 * m)),
            _check("lambda_m < 18/sqrt(m)", params.lambda_m, "<", 18.0 * relax.gd_lambda_m / sqrt_m),
            # スケジュール自身が等号で達成するので非厳密に判定する
            _check("gamma_m <= 1/m - lambda_m/(18 sqrt(m))", params.gamma_m, "<=", 1.0 / m - params.lambda_m / (18.0 * sqrt_m) + 1e-15),
            _check("gamma_m > 0", params.gamma_m, ">", 0.0),
            _check(
                "gamma_c <= sqrt(gamma_m/(30 sqrt(m) eta T))",
                params.gamma_c,
                "<=",
                math.sqrt(max(params.gamma_m, 0.0) / (30.0 * relax.gd_gamma_c * sqrt_m * eta_T)),
            ),
            _check("gamma_c <= lambda_c/sqrt(3)", params.gamma_c, "<=", params.lambda_c / math.sqrt(3.0)),
            _check("zeta >= gamma_c/lambda_c", params.zeta, ">=", params.gamma_c / params.lambda_c),
            _check("eta T > sqrt(m)", eta_T, ">", sqrt_m),
            _check("eta lambda_m < 1", eta * params.lambda_m, "<", 1.0),
            _check("eta lambda_c < 1", eta * params.lambda_c, "<", 1.0),
        ]
        caps = _caps(params.zeta, params.gamma_c, params.gamma_m, params.lambda_c, params.lambda_m, params.k)
        caps += [
            _check("m > 80^2", m, ">", 80.0**2),
            _check("m > 16/rho^2", m, ">", 16.0 / params.rho**2),
        ]
        return RegimeReport(checks=checks, caps=caps)

    def schedule(
        self,
        m: int,
        rho: float,
        mode: Mode,
        eta: Optional[float] = None,
        T: Optional[int] = None,
        lam: Optional[float] = None,
        epsilon: Optional[float] = None,
        relax: Optional[RelaxMultipliers] = None,
        k: Optional[int] = None,
        brute_force_cap: Optional[int] = None,
    ) -> InstanceParams:
        """
        証明のパラメータ割り当てを返す

        Args:
            m: サンプルサイズ
            rho: 符号の測定された相対距離
            mode: ERM または GD
            eta, T: GD のステップ幅と反復回数（GD モードで必須）
            lam: ERM の強凸性 λ（省略時は 7/m^{1.5}）
            epsilon: ERM の ε（省略時は λ に応じた既定値）
            relax: 定数の倍率と上限違反の許可
            k: 定義域サイズ（省略時は 2m）
            brute_force_cap: p を全数評価する k の上限（省略時はサービスの既定値）

        Returns:
            InstanceParams: regime にレジーム判定レポートを持つ
        """
        relax = relax or RelaxMultipliers()
        k = k if k is not None else 2 * m
        mode = Mode(mode)
        if mode is Mode.ERM:
            params = self._erm_params(m, k, rho, lam, epsilon, relax, eta, T)
            report = self.erm_regime(params)
        else:
            if eta is None or T is None:
                raise ValueError("GD schedule needs eta and T")
            params = self._gd_params(m, k, rho, eta, T, relax)
            report = self.gd_regime(params)

        params = InstanceParams(**{**params.__dict__, "regime": report, "brute_force_cap": brute_force_cap})
        failing = report.failing()
        if failing:
            if not relax.enabled:
                logger.error(f"[SCHEDULE] {mode.value} regime infeasible at m={m}: {failing}")
                raise RegimeError(f"{mode.value} regime infeasible without relax: {', '.join(failing)}", failing)
            logger.warning(f"[SCHEDULE] {mode.value} regime relaxed at m={m}; failing: {failing}")
        logger.info(
            f"[SCHEDULE] {mode.value} m={m} k={k} zeta={params.zeta:.4g} gamma_c={params.gamma_c:.4g} "
            f"gamma_m={params.gamma_m:.4g} lambda_c={params.lambda_c:.4g} lambda_m={params.lambda_m:.4g}"
        )
        return params

    def _erm_params(self, m, k, rho, lam, epsilon, relax, eta, T) -> InstanceParams:
        explicit_lam = lam is not None
        lam = 7.0 / m**1.5 if lam is None else lam
        if epsilon is None:
            epsilon = self.erm_epsilon(lam, rho, m, explicit_lam)
        sqrt_m = math.sqrt(m)
        gamma_m = 1.0 / (2.0 * m)
        gamma_c = min(gamma_m / (9.0 * sqrt_m), lam / 3.0)
        return InstanceParams(
            mode=Mode.ERM,
            k=k,
            m=m,
            zeta=gamma_c / lam,
            gamma_c=gamma_c,
            gamma_m=gamma_m,
            lambda_c=lam,
            lambda_m=9.0 * relax.erm_lambda_m_low / sqrt_m,
            rho=rho,
            relax=relax,
            eta=eta,
            T=T,
            lam=lam,
            epsilon=epsilon,
        )

    def _gd_params(self, m, k, rho, eta, T, relax) -> InstanceParams:
        sqrt_m = math.sqrt(m)
        eta_T = eta * T
        lambda_m = 18.0 * relax.gd_lambda_m / math.sqrt(2.0 * m)
        gamma_m = 1.0 / m - lambda_m / (18.0 * sqrt_m)
        lambda_c = 4.0 * relax.gd_lambda_c / (rho * eta_T)
        gamma_c = min(math.sqrt(max(gamma_m, 0.0) / (30.0 * relax.gd_gamma_c * sqrt_m * eta_T)), lambda_c / math.sqrt(3.0))
        return InstanceParams(
            mode=Mode.GD,
            k=k,
            m=m,
            zeta=gamma_c / lambda_c,
            gamma_c=gamma_c,
            gamma_m=gamma_m,
            lambda_c=lambda_c,
            lambda_m=lambda_m,
            rho=rho,
            relax=relax,
            eta=eta,
            T=T,
        )

    # ---------- 予測下界 ----------

    def erm_gap_floor(self, params: InstanceParams) -> float:
        """厳密な ERM のギャップの下界 min{ρ/(72λm^{1.5}), ρ/12}"""
        lam, rho, m = params.lam, params.rho, params.m
        return min(rho / (72.0 * lam * m**1.5), rho / 12.0)

    def erm_analytic_bound(self, params: InstanceParams) -> float:
        """min{ρ/(72λm^{1.5}), ρ/12} − 7√(2ε/λ)"""
        eps = params.epsilon or 0.0
        return self.erm_gap_floor(params) - 7.0 * math.sqrt(2.0 * eps / params.lam)

    def erm_chain_bound(self, params: InstanceParams, S: SampleStats) -> float:
        """|{i∉S}|/k · max{0, γ^c/λ^c − ζ(1−ρ/2)}（ζ = γ^c/λ^c なら ≥ ρζ/4）"""
        ratio = params.gamma_c / params.lambda_c
        return S.unsampled_fraction * max(0.0, ratio - params.zeta * (1.0 - params.rho / 2.0))

    def gd_analytic_bound(self, params: InstanceParams) -> float:
        """min{(ρ²/32)√((1−1/√2)ηT/(30m^{3/2})), ρ/(8√3)}"""
        rho, m, eta_T = params.rho, params.m, params.eta * params.T
        return min(
            rho**2 / 32.0 * math.sqrt((1.0 - 1.0 / math.sqrt(2.0)) * eta_T / (30.0 * m**1.5)),
            rho / (8.0 * math.sqrt(3.0)),
        )

    def gd_chain_bound(self, params: InstanceParams, S: SampleStats) -> float:
        """|{i∉S}|/k · max{0, (γ^c/λ^c)(1 − 1/(λ^c ηT)) − ζ(1−ρ/2)}"""
        eta_T = params.eta * params.T
        ratio = params.gamma_c / params.lambda_c
        return S.unsampled_fraction * max(
            0.0, ratio * (1.0 - 1.0 / (params.lambda_c * eta_T)) - params.zeta * (1.0 - params.rho / 2.0)
        )


# シングルトンインスタンス
schedule_service = ScheduleService()
