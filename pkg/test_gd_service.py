"""
Test for projected subgradient descent service
"""

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from app.code_service import code_service
from app.feldman_service import FeldmanSpec
from app.gd_service import (
    CertificatePolicy,
    CertificateViolationError,
    GDConfig,
    StepCertificate,
    gd_service,
)


class TestGDConfig:
    """GDConfig の検証のテストクラス"""

    def test_rejects_invalid_values(self):
        """η ∈ (0, 1)、T ≥ 1、0 ≤ s < T、record_every ≥ 1"""
        with pytest.raises(ValueError):
            GDConfig(eta=1.0, T=10)
        with pytest.raises(ValueError):
            GDConfig(eta=0.1, T=0)
        with pytest.raises(ValueError):
            GDConfig(eta=0.1, T=10, suffix_s=10)
        with pytest.raises(ValueError):
            GDConfig(eta=0.1, T=10, record_every=0)


class TestStepCertificate:
    """ステップ証明書のテストクラス"""

    def test_first_step_needs_zero_branch(self):
        """t = 1 では p ≤ 0 の枝だけを要求する"""
        cert = StepCertificate(1, True, False, False, True, 0.0, 0.0)
        assert cert.ok
        assert StepCertificate(1, True, True, True, True, 0.1, 0.5).failed() == ["p_zero_branch"]

    def test_later_steps_need_vSs_argmax(self):
        """t ≥ 2 では p の最大化点が v_S^s で p > 0"""
        cert = StepCertificate(2, True, False, True, True, 0.0, 0.1)
        assert cert.failed() == ["p_argmax_is_vSs"]
        assert StepCertificate(3, False, True, True, False, 0.1, 0.1).failed() == ["feldman_zero", "projection_inactive"]

    def test_tie_break_is_not_a_failure(self):
        """同値の選択規則が効いても証明書は失敗しない"""
        assert StepCertificate(2, True, True, True, True, 0.0, 0.1, tie_break_used=True).ok


class TestClosedForm:
    """閉形式の軌道のテストクラス"""

    def test_first_iterate(self, gd_setup, sample8):
        """w_1 = (0, (η/m) v_S)"""
        code, params, _ = gd_setup
        w1 = gd_service.closed_form_iterate(params, code, sample8, 1)
        assert not np.any(w1.code_block)
        np.testing.assert_allclose(w1.message_block, 0.05 / 4 * sample8.vS)

    def test_limit(self, gd_setup, sample8):
        """t → ∞ で ERM と同じ形の点に近づく"""
        code, params, _ = gd_setup
        w = gd_service.closed_form_iterate(params, code, sample8, 100_000)
        expected_c = params.gamma_c / params.lambda_c * code_service.encode_unit(code, sample8.vSs)
        expected_m = (sample8.vS / 4 - params.gamma_m * sample8.vSs) / params.lambda_m
        np.testing.assert_allclose(w.code_block, expected_c, atol=1e-12)
        np.testing.assert_allclose(w.message_block, expected_m, atol=1e-12)

    def test_requires_positive_t(self, gd_setup, sample8):
        code, params, _ = gd_setup
        with pytest.raises(ValueError):
            gd_service.closed_form_iterate(params, code, sample8, 0)


class TestRunGD:
    """GD の実行と軌道の記録のテストクラス"""

    def test_trajectory_matches_closed_form(self, gd_setup, sample8):
        """証明書がすべて成り立ち、閉形式と 1e-8 以内で一致する"""
        code, params, spec = gd_setup
        rec = gd_service.run_gd(params, code, spec, sample8, GDConfig(eta=0.05, T=200))
        assert rec.certificates_ok
        assert rec.max_closed_form_dev <= 1e-8
        assert rec.first_divergence_step is None
        assert all(w.is_feasible() for w in rec.iterates)
        assert not any(c.tie_break_used for c in rec.certificates)
        assert len(rec.iterates) == 200
        assert rec.risk_trace.shape == (201,)
        assert rec.risk_trace[-1] < rec.risk_trace[0]

    def test_single_step(self, gd_setup, sample8):
        """T = 1 の最終点は閉形式と厳密に一致する"""
        code, params, spec = gd_setup
        rec = gd_service.run_gd(params, code, spec, sample8, GDConfig(eta=0.05, T=1))
        assert rec.max_closed_form_dev == 0.0
        np.testing.assert_array_equal(rec.final.message_block, 0.05 * (sample8.vS / 4))

    def test_deterministic(self, gd_setup, sample8):
        """同じ入力からは同じ軌道"""
        code, params, spec = gd_setup
        a = gd_service.run_gd(params, code, spec, sample8, GDConfig(eta=0.05, T=50))
        b = gd_service.run_gd(params, code, spec, sample8, GDConfig(eta=0.05, T=50))
        np.testing.assert_array_equal(a.final.flat(), b.final.flat())
        np.testing.assert_array_equal(a.risk_trace, b.risk_trace)

    def test_suffix_average(self, gd_setup, sample8):
        """w_{S,s} は最後の T − s 個の反復点の平均"""
        code, params, spec = gd_setup
        rec = gd_service.run_gd(params, code, spec, sample8, GDConfig(eta=0.05, T=20, suffix_s=5))
        expected = np.mean([w.flat() for w in rec.iterates[5:]], axis=0)
        np.testing.assert_allclose(rec.suffix_avg.flat(), expected, atol=1e-15)
        np.testing.assert_allclose(gd_service.suffix_average(rec, 0).flat(), np.mean([w.flat() for w in rec.iterates], axis=0), atol=1e-15)
        assert gd_service.suffix_average(rec, 19) is rec.final
        with pytest.raises(ValueError):
            gd_service.suffix_average(rec, 20)

    def test_strided_storage(self, gd_setup, sample8):
        """保存上限を超えると反復点を間引き、任意の s の接尾平均は出せない"""
        code, params, spec = gd_setup
        cfg = GDConfig(eta=0.05, T=40, suffix_s=10, max_stored_floats=24 * 10)
        rec = gd_service.run_gd(params, code, spec, sample8, cfg)
        assert rec.stride == 4
        assert not rec.full_storage
        assert rec.recorded_steps.tolist() == list(range(4, 41, 4))
        assert gd_service.suffix_average(rec, 10) is rec.suffix_avg
        with pytest.raises(ValueError):
            gd_service.suffix_average(rec, 3)

    def test_compare_trajectory(self, gd_setup, sample8):
        """保存済みの反復点と閉形式の比較"""
        code, params, spec = gd_setup
        rec = gd_service.run_gd(params, code, spec, sample8, GDConfig(eta=0.05, T=30))
        max_dev, first = gd_service.compare_trajectory(rec, params, code, sample8)
        assert max_dev <= 1e-8
        assert first is None


class TestCertificateViolations:
    """証明書が破れる場合のテストクラス"""

    def _broken(self, gd_setup):
        code, params, _ = gd_setup
        # γ^c を大きくすると符号ブロックが ζ を超えて Feldman 関数が活性化する
        params = replace(params, gamma_c=0.5)
        return code, params, FeldmanSpec.create(code, params.zeta)

    def test_warn_policy_continues(self, gd_setup, sample8):
        """warn ではそのまま続行し、閉形式から外れたステップを記録する"""
        code, params, spec = self._broken(gd_setup)
        rec = gd_service.run_gd(params, code, spec, sample8, GDConfig(eta=0.05, T=100))
        assert not rec.certificates_ok
        assert rec.violations > 0
        assert rec.first_divergence_step is not None and rec.first_divergence_step >= 2
        assert len(rec.iterates) == 100

    def test_abort_policy_raises(self, gd_setup, sample8):
        """abort では最初の違反で止まる"""
        code, params, spec = self._broken(gd_setup)
        cfg = GDConfig(eta=0.05, T=100, certificate_policy=CertificatePolicy.ABORT)
        with pytest.raises(CertificateViolationError) as exc_info:
            gd_service.run_gd(params, code, spec, sample8, cfg)
        assert exc_info.value.step >= 2
        assert exc_info.value.failed

    def test_ignore_policy(self, gd_setup, sample8):
        """ignore では違反を数えない"""
        code, params, spec = self._broken(gd_setup)
        cfg = GDConfig(eta=0.05, T=50, certificate_policy=CertificatePolicy.IGNORE)
        rec = gd_service.run_gd(params, code, spec, sample8, cfg)
        assert rec.violations == 0


class TestTrajectoryDump:
    """軌道 CSV の出力のテストクラス"""

    def test_dump_trajectory(self, gd_setup, sample8, tmp_path):
        """ステップごとのノルム・証明書・閉形式との差を書き出す"""
        code, params, spec = gd_setup
        path = tmp_path / "traj" / "trajectory.csv"
        gd_service.run_gd(params, code, spec, sample8, GDConfig(eta=0.05, T=25, dump_trajectory=path))
        frame = pd.read_csv(path)
        assert len(frame) == 25
        assert frame["t"].tolist() == list(range(1, 26))
        assert {"wc_norm", "wm_norm", "p_margin", "feldman_zero", "closed_form_dev"} <= set(frame.columns)
        assert frame["feldman_zero"].all()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
