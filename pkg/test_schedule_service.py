"""
Test for parameter schedule service
"""

import math

import pytest

from app.instance_service import Mode, RelaxMultipliers, sample_stats
from app.schedule_service import RegimeError, schedule_service

RHO = 0.125


class TestErmSchedule:
    """強凸インスタンスのスケジュールのテストクラス"""

    def setup_method(self):
        self.relax = RelaxMultipliers(enabled=True)

    def test_default_lambda_assignment(self):
        """λ = 7/m^{1.5} の割り当てと既定の ε"""
        params = schedule_service.schedule(m=8, rho=RHO, mode=Mode.ERM, relax=self.relax)
        lam = 7 / 8**1.5
        assert params.k == 16
        assert params.lam == pytest.approx(lam)
        assert params.lambda_c == pytest.approx(lam)
        assert params.lambda_m == pytest.approx(9 / math.sqrt(8))
        assert params.gamma_m == pytest.approx(1 / 16)
        assert params.gamma_c == pytest.approx(min(1 / (16 * 9 * math.sqrt(8)), lam / 3))
        assert params.zeta == pytest.approx(params.gamma_c / params.lambda_c)
        assert params.epsilon == pytest.approx(lam * RHO**2 / (4 * 72**2 * 7**4))
        assert params.alpha == pytest.approx(lam)

    def test_regime_holds_but_caps_do_not(self):
        """m = 8 では不等式は成り立つが λ^m ≤ 1 などの上限は破れる"""
        params = schedule_service.schedule(m=8, rho=RHO, mode=Mode.ERM, relax=self.relax)
        assert params.regime.regime_ok
        assert not params.regime.caps_ok
        assert "lambda_m <= 1" in params.regime.failing()

    def test_without_relax_raises(self):
        """緩和なしで上限が破れると RegimeError"""
        with pytest.raises(RegimeError) as exc_info:
            schedule_service.schedule(m=8, rho=RHO, mode=Mode.ERM)
        assert "lambda_m <= 1" in exc_info.value.failing

    def test_explicit_lambda_uses_second_epsilon(self):
        """λ を指定すると ε = ρ²/(4·72²·7²·λm³)"""
        params = schedule_service.schedule(m=8, rho=RHO, mode=Mode.ERM, lam=0.2, relax=self.relax)
        assert params.epsilon == pytest.approx(RHO**2 / (4 * 72**2 * 7**2 * 0.2 * 8**3))
        assert params.lambda_c == 0.2

    def test_lambda_above_inverse_sqrt_m_fails(self):
        """λ > 1/√m はレジーム違反"""
        params = schedule_service.schedule(m=8, rho=RHO, mode=Mode.ERM, lam=0.5, relax=self.relax)
        assert "lambda <= 1/sqrt(m)" in params.regime.failing()

    def test_relax_multiplier_scales_lambda_m(self):
        """倍率は証明中の定数に掛かる"""
        relax = RelaxMultipliers(enabled=True, erm_lambda_m_low=0.5)
        params = schedule_service.schedule(m=8, rho=RHO, mode=Mode.ERM, relax=relax)
        assert params.lambda_m == pytest.approx(4.5 / math.sqrt(8))
        assert relax.scales_constants

    def test_bounds(self):
        """連鎖の下界は未サンプル割合が 1/2 以上なら ρζ/4 以上"""
        params = schedule_service.schedule(m=4, rho=RHO, mode=Mode.ERM, relax=self.relax, k=8)
        S = sample_stats([0, 0, 3, 5], 8)
        bound = schedule_service.erm_chain_bound(params, S)
        assert bound == pytest.approx(5 / 8 * params.zeta * RHO / 2)
        assert bound >= RHO * params.zeta / 4
        analytic = schedule_service.erm_analytic_bound(params)
        assert analytic == pytest.approx(
            min(RHO / (72 * params.lam * 4**1.5), RHO / 12) - 7 * math.sqrt(2 * params.epsilon / params.lam)
        )

    def test_gap_floor_is_rho_zeta_over_4(self):
        """既定の λ では ρ/(72λm^{1.5}) = ρζ/4"""
        for m in (4, 8):
            params = schedule_service.schedule(m=m, rho=RHO, mode=Mode.ERM, relax=self.relax)
            assert schedule_service.erm_gap_floor(params) == pytest.approx(RHO * params.zeta / 4)
            assert schedule_service.erm_analytic_bound(params) == pytest.approx(
                schedule_service.erm_gap_floor(params) - 7 * math.sqrt(2 * params.epsilon / params.lam)
            )


class TestGdSchedule:
    """GD インスタンスのスケジュールのテストクラス"""

    def setup_method(self):
        self.relax = RelaxMultipliers(enabled=True)

    def test_assignment(self):
        """λ^m, γ^m, λ^c, γ^c の割り当て"""
        params = schedule_service.schedule(m=8, rho=RHO, mode=Mode.GD, eta=0.05, T=1000, relax=self.relax)
        eta_T = 50.0
        lambda_m = 18 / math.sqrt(16)
        gamma_m = 1 / 8 - lambda_m / (18 * math.sqrt(8))
        lambda_c = 4 / (RHO * eta_T)
        assert params.lambda_m == pytest.approx(lambda_m)
        assert params.gamma_m == pytest.approx(gamma_m)
        assert params.lambda_c == pytest.approx(lambda_c)
        assert params.gamma_c == pytest.approx(min(math.sqrt(gamma_m / (30 * math.sqrt(8) * eta_T)), lambda_c / math.sqrt(3)))
        assert params.zeta == pytest.approx(params.gamma_c / params.lambda_c)

    def test_gamma_m_equality_is_accepted(self):
        """γ^m はスケジュールで等号になるので非厳密に判定する"""
        params = schedule_service.schedule(m=8, rho=RHO, mode=Mode.GD, eta=0.05, T=1000, relax=self.relax)
        check = next(c for c in params.regime.checks if c.name.startswith("gamma_m <="))
        assert check.passed
        assert params.regime.regime_ok

    def test_desk_scale_caps(self):
        """m ≤ 80² と m ≤ 16/ρ² は上限違反として報告される"""
        params = schedule_service.schedule(m=8, rho=RHO, mode=Mode.GD, eta=0.05, T=1000, relax=self.relax)
        failing = params.regime.failing()
        assert "m > 80^2" in failing
        assert "m > 16/rho^2" in failing

    def test_short_horizon(self):
        """ηT ≤ √m はレジーム違反"""
        params = schedule_service.schedule(m=8, rho=RHO, mode=Mode.GD, eta=0.05, T=40, relax=self.relax)
        assert "eta T > sqrt(m)" in params.regime.failing()
        with pytest.raises(RegimeError):
            schedule_service.schedule(m=8, rho=RHO, mode=Mode.GD, eta=0.05, T=40)

    def test_requires_eta_and_T(self):
        with pytest.raises(ValueError):
            schedule_service.schedule(m=8, rho=RHO, mode=Mode.GD, relax=self.relax)

    def test_bounds_grow_with_horizon(self):
        """解析的な下界は ηT とともに増え、ρ/(8√3) で頭打ちになる"""
        short = schedule_service.schedule(m=8, rho=RHO, mode=Mode.GD, eta=0.05, T=1000, relax=self.relax)
        long = schedule_service.schedule(m=8, rho=RHO, mode=Mode.GD, eta=0.05, T=4000, relax=self.relax)
        assert schedule_service.gd_analytic_bound(long) > schedule_service.gd_analytic_bound(short)
        assert schedule_service.gd_analytic_bound(long) <= RHO / (8 * math.sqrt(3))

    def test_chain_bound(self):
        """(γ^c/λ^c)(1 − 1/(λ^c ηT)) − ζ(1−ρ/2) に未サンプル割合を掛ける"""
        params = schedule_service.schedule(m=8, rho=RHO, mode=Mode.GD, eta=0.05, T=1000, relax=self.relax)
        S = sample_stats(list(range(8)), 16)
        ratio = params.gamma_c / params.lambda_c
        expected = 0.5 * max(0.0, ratio * (1 - 1 / (params.lambda_c * 50.0)) - params.zeta * (1 - RHO / 2))
        assert schedule_service.gd_chain_bound(params, S) == pytest.approx(expected)
        assert schedule_service.gd_chain_bound(params, S) > 0


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
