"""
Test for hard instance service
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from app.code_service import code_service
from app.feldman_service import FeldmanSpec
from app.instance_service import (
    CapabilityError,
    InstanceService,
    PreconditionError,
    RiskValue,
    delta_vector,
    general_lipschitz_bound,
    instance_service,
    lipschitz_bound,
    unit_caps_hold,
    sample_stats,
)
from app.param_utils import InfeasibleVectorError, ParamVector, random_feasible
from app.rng_utils import stream


class TestSampleStats:
    """サンプル統計のテストクラス"""

    def test_delta_vector(self):
        """δ_i は i 成分だけ 1/m − 2、他は 1/m"""
        delta = delta_vector(4, 8, 2)
        assert delta[2] == pytest.approx(0.25 - 2)
        assert np.all(np.delete(delta, 2) == 0.25)
        with pytest.raises(IndexError):
            delta_vector(4, 8, 8)

    def test_vS_from_multiplicities(self, sample8):
        """v_S = Σ δ_{z_j}、v_S^s は S に含まれる成分が −1"""
        expected = sum(delta_vector(4, 8, i) for i in [0, 0, 3, 5])
        np.testing.assert_allclose(sample8.vS, expected)
        np.testing.assert_array_equal(sample8.vSs, [-1, 1, 1, -1, 1, -1, 1, 1])
        assert sample8.vS_norm == pytest.approx(4.0)
        assert sample8.conditioned
        assert sample8.unsampled_fraction == pytest.approx(5 / 8)

    def test_unconditioned_sample(self):
        """全ドローが同じインデックスなら ‖v_S‖ > 3√m"""
        S = sample_stats([1, 1, 1, 1], 8)
        assert S.vS_norm == pytest.approx(math.sqrt(49 + 7))
        assert not S.conditioned

    def test_invalid_samples(self):
        """空のサンプルや範囲外のインデックスは拒否される"""
        with pytest.raises(ValueError):
            sample_stats([], 8)
        with pytest.raises(IndexError):
            sample_stats([0, 8], 8)


class TestPEvaluation:
    """p(w) の評価のテストクラス"""

    def setup_method(self):
        self.rng = stream(0, 0, "p-test")

    def test_zero_is_a_full_tie(self, erm_setup):
        """w = 0 では全符号ベクトルが同値で、辞書順最小の v = (+1, ..., +1) を選ぶ"""
        code, params, _ = erm_setup
        p = instance_service.p_eval_bruteforce(params, code, ParamVector.zeros(8))
        assert p.value == 0.0
        assert p.tie
        assert p.margin == 0.0
        np.testing.assert_array_equal(p.argmax_v, np.ones(8))

    def test_bruteforce_matches_dense_maximum(self, erm_setup):
        """全 v を素朴に列挙した最大値と一致する"""
        code, params, _ = erm_setup
        w = random_feasible(self.rng, 8)
        values = [
            params.gamma_m * code_service.message_of(code, j) @ w.message_block
            - params.gamma_c * code_service.codeword_unit(code, j) @ w.code_block
            for j in range(256)
        ]
        p = instance_service.p_eval_bruteforce(params, code, w)
        assert p.value == pytest.approx(max(values), abs=1e-12)

    def test_certified_agrees_with_bruteforce(self, erm_setup):
        """一意性を証明できた点では全数評価と同じ最大化点と値になる"""
        code, params, _ = erm_setup
        claims = 0
        for _ in range(200):
            w = random_feasible(self.rng, 8)
            candidate = np.sign(w.message_block)
            certified = instance_service.p_eval_certified(params, code, w, candidate)
            if not certified.certified_unique:
                continue
            claims += 1
            brute = instance_service.p_eval_bruteforce(params, code, w)
            assert not brute.tie
            np.testing.assert_array_equal(brute.argmax_v, candidate)
            assert brute.value == pytest.approx(certified.value, abs=1e-12)
        assert claims > 0

    def test_certified_preconditions(self, erm_setup):
        """候補が sign(w^m) でない、または w^m に 0 がある"""
        code, params, _ = erm_setup
        w = ParamVector(np.zeros(16), np.full(8, 0.1))
        with pytest.raises(PreconditionError):
            instance_service.p_eval_certified(params, code, w, -np.ones(8))
        w0 = ParamVector(np.zeros(16), np.array([0.1] * 7 + [0.0]))
        with pytest.raises(PreconditionError):
            instance_service.p_eval_certified(params, code, w0, np.ones(8))

    def test_bruteforce_cap(self, erm_setup):
        """k が上限を超えると全数評価は使えない"""
        code, params, _ = erm_setup
        with pytest.raises(CapabilityError):
            InstanceService(brute_force_cap=4).p_eval_bruteforce(params, code, ParamVector.zeros(8))

    def test_bruteforce_cap_from_params(self, erm_setup):
        """上限はパラメータか引数で渡し、サービスの既定値は変わらない"""
        code, params, _ = erm_setup
        capped = replace(params, brute_force_cap=4)
        with pytest.raises(CapabilityError):
            instance_service.p_eval_bruteforce(capped, code, ParamVector.zeros(8))
        with pytest.raises(CapabilityError):
            instance_service.p_eval_bruteforce(params, code, ParamVector.zeros(8), cap=4)
        assert instance_service.cap_for(capped) == 4
        assert instance_service.cap_for(params) == instance_service.brute_force_cap
        assert instance_service.p_eval_bruteforce(params, code, ParamVector.zeros(8)).tie

    def test_certified_path_above_cap(self, erm_setup, sample8):
        """上限を超える k では証明付き評価に切り替わる"""
        code, params, spec = erm_setup
        capped = InstanceService(brute_force_cap=4)
        w = ParamVector(np.zeros(16), 0.05 * sample8.vSs)
        evaluation = capped.evaluate_point(params, code, spec, w)
        np.testing.assert_array_equal(evaluation.p.argmax_v, sample8.vSs)
        assert evaluation.p.value == pytest.approx(params.gamma_m * 0.05 * 8)


class TestLoss:
    """損失と部分勾配のテストクラス"""

    def setup_method(self):
        self.rng = stream(0, 0, "loss-test")

    def test_loss_values_match_single_index(self, erm_setup):
        """まとめて計算した f(w, i) と個別の値が一致する"""
        code, params, spec = erm_setup
        w = random_feasible(self.rng, 8)
        values = instance_service.loss_values(params, instance_service.evaluate_point(params, code, spec, w))
        for i in range(8):
            assert instance_service.loss_value(params, code, spec, w, i) == pytest.approx(values[i])

    def test_subgradient_inequality(self, gd_setup):
        """f(w2,i) ≥ f(w1,i) + ⟨g, w2 − w1⟩"""
        code, params, spec = gd_setup
        for _ in range(30):
            w1 = random_feasible(self.rng, 8)
            w2 = random_feasible(self.rng, 8)
            for i in range(8):
                g = instance_service.loss_subgrad(params, code, spec, w1, i)
                lhs = instance_service.loss_value(params, code, spec, w2, i)
                rhs = instance_service.loss_value(params, code, spec, w1, i) + g.dot(w2 - w1)
                assert lhs >= rhs - 1e-10

    def test_subgrad_requires_feasible_point(self, erm_setup):
        """単位球外の点での部分勾配は拒否される"""
        code, params, spec = erm_setup
        with pytest.raises(InfeasibleVectorError):
            instance_service.loss_subgrad(params, code, spec, ParamVector(np.zeros(16), np.ones(8)), 0)

    def test_empirical_subgrad_is_average(self, erm_setup, sample8):
        """∇F_S は各ドローの部分勾配の平均"""
        code, params, spec = erm_setup
        w = random_feasible(self.rng, 8)
        evaluation = instance_service.evaluate_point(params, code, spec, w)
        expected = sum(
            (instance_service.loss_subgrad(params, code, spec, w, int(i), evaluation=evaluation) for i in sample8.draws),
            ParamVector.zeros(8),
        ).scale(1 / 4)
        g = instance_service.empirical_subgrad(params, code, spec, w, sample8, evaluation=evaluation)
        np.testing.assert_allclose(g.flat(), expected.flat(), atol=1e-12)

    def test_strong_convexity_curvature(self, gd_setup):
        """観測される曲率は α = min(λ^m, λ^c) 以上"""
        code, params, spec = gd_setup
        assert instance_service.strong_convexity_probe(params, code, spec, pairs=30) >= params.alpha - 1e-9

    def test_curvature_on_pure_quadratic(self, gd_setup):
        """γ = 0 で h が定数枝に留まれば曲率はちょうど λ"""
        code, params, spec = gd_setup
        quadratic = replace(params, gamma_c=0.0, gamma_m=0.0, lambda_c=0.3, lambda_m=0.3, zeta=1.0)
        flat_spec = FeldmanSpec.create(code, 1.0)
        # 線形項 ⟨δ_i, w^m⟩ は曲率に寄与しない
        assert instance_service.strong_convexity_probe(quadratic, code, flat_spec, pairs=20) == pytest.approx(0.3, abs=1e-9)

    def test_curvature_without_regularizer(self, gd_setup):
        """λ^m = λ^c = 0 でも凸なので曲率は負にならない"""
        code, params, spec = gd_setup
        convex_only = replace(params, lambda_c=0.0, lambda_m=0.0)
        assert instance_service.strong_convexity_probe(convex_only, code, spec, pairs=20) >= -1e-9

    def test_three_point_convexity(self, gd_setup):
        """f(θa + (1−θ)b, i) ≤ θf(a, i) + (1−θ)f(b, i)"""
        code, params, spec = gd_setup
        for _ in range(20):
            a = random_feasible(self.rng, 8)
            b = random_feasible(self.rng, 8)
            theta = float(self.rng.uniform())
            mid = a.scale(theta) + b.scale(1 - theta)
            for i in range(8):
                lhs = instance_service.loss_value(params, code, spec, mid, i)
                rhs = theta * instance_service.loss_value(params, code, spec, a, i) + (1 - theta) * instance_service.loss_value(params, code, spec, b, i)
                assert lhs <= rhs + 1e-10

    def test_lipschitz_audit(self, gd_setup):
        """部分勾配ノルムが一般の上界に収まる"""
        code, params, spec = gd_setup
        audit = instance_service.lipschitz_audit(params, code, spec, n_points=100)
        assert audit.ok
        assert audit.max_norm <= general_lipschitz_bound(params)
        assert not unit_caps_hold(params)
        assert lipschitz_bound(params) == general_lipschitz_bound(params)

    def test_lipschitz_bound_with_caps(self, gd_setup):
        """上限がすべて成り立てば 7 で抑える"""
        _, params, _ = gd_setup
        small = replace(params, lambda_m=0.9, lambda_c=0.9, gamma_c=0.5, gamma_m=0.1)
        assert unit_caps_hold(small)
        assert lipschitz_bound(small) == 7.0


class TestRisk:
    """リスク評価のテストクラス"""

    def test_population_risk_at_zero_is_floor(self, erm_setup):
        """F(0) = ζ(1−ρ/2)"""
        code, params, spec = erm_setup
        risk = instance_service.risk(params, code, spec, ParamVector.zeros(8))
        assert risk.kind == "exact"
        assert risk.lo == pytest.approx(spec.floor)
        interval = instance_service.risk(params, code, spec, ParamVector.zeros(8), method="interval")
        assert interval.contains(spec.floor)

    def test_interval_contains_exact(self, erm_setup, sample8):
        """w = (c·Ḡ(v_S^s), w^m) では区間が全数評価の値を含む"""
        code, params, spec = erm_setup
        for c in (0.0, params.zeta / 2, params.zeta, 0.2):
            w = ParamVector(c * code_service.encode_unit(code, sample8.vSs), 0.02 * sample8.vSs)
            exact = instance_service.risk(params, code, spec, w, method="exact")
            interval = instance_service.risk(params, code, spec, w, method="interval")
            assert interval.kind == "interval"
            assert interval.contains(exact.lo)

    def test_interval_requires_encoded_direction(self, erm_setup):
        """w^c が符号語の方向でなければ区間評価は使えない"""
        code, params, spec = erm_setup
        wc = np.zeros(16)
        wc[0] = 0.1
        with pytest.raises(CapabilityError):
            instance_service.risk(params, code, spec, ParamVector(wc, np.full(8, 0.01)), method="interval")

    def test_empirical_risk(self, erm_setup, sample8):
        """S を渡すと経験リスク"""
        code, params, spec = erm_setup
        w = ParamVector.zeros(8)
        assert instance_service.risk(params, code, spec, w, S=sample8).lo == pytest.approx(spec.floor)

    def test_risk_rejects_infeasible(self, erm_setup):
        code, params, spec = erm_setup
        with pytest.raises(InfeasibleVectorError):
            instance_service.risk(params, code, spec, ParamVector(np.ones(16), np.zeros(8)))

    def test_risk_value_difference(self):
        """区間の差は区間"""
        diff = RiskValue("interval", 1.0, 2.0) - RiskValue.exact(0.5)
        assert (diff.kind, diff.lo, diff.hi) == ("interval", 0.5, 1.5)
        assert (RiskValue.exact(1.0) - RiskValue.exact(0.25)).kind == "exact"

    def test_feldman_gap(self, erm_setup, sample8):
        """w^c = c·Ḡ(v_S^s) の Feldman 成分は未サンプル割合 × (c − floor)"""
        code, params, spec = erm_setup
        c = 2 * params.zeta
        gap = instance_service.feldman_gap(spec, c * code_service.encode_unit(code, sample8.vSs))
        assert gap >= sample8.unsampled_fraction * (c - spec.floor) - 1e-12
        assert instance_service.feldman_gap(spec, np.zeros(16)) == pytest.approx(0.0, abs=1e-15)


def test_feldman_spec_floor_matches_params(erm_setup):
    """Feldman 関数の ζ はスケジュールの ζ"""
    code, params, spec = erm_setup
    assert spec.zeta == params.zeta
    assert FeldmanSpec.create(code, params.zeta).floor == spec.floor


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
