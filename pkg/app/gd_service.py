"""
射影付き部分勾配降下法（GD）のサービスモジュール

w_t = Π(w_{t−1} − η g_t)、g_t は w_{t−1} での経験リスクの部分勾配。
各ステップで部分勾配を計算したのと同じ評価から証明書を記録し、
閉形式の軌道と突き合わせます。
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from app.code_service import BinaryCode, code_service
from app.feldman_service import FeldmanSpec
from app.instance_service import InstanceParams, PointEvaluation, SampleStats, instance_service
from app.param_utils import ParamVector, project_unit_ball

logger = logging.getLogger(__name__)

TRAJECTORY_TOLERANCE = 1e-8
# 保存する反復点の浮動小数点数の上限（超えたら間引く）
DEFAULT_MAX_STORED_FLOATS = 5_000_000


class CertificatePolicy(str, Enum):
    WARN = "warn"
    ABORT = "abort"
    IGNORE = "ignore"


class CertificateViolationError(RuntimeError):
    """abort ポリシーで証明書が破れた"""

    def __init__(self, message: str, step: int, failed: List[str]):
        super().__init__(message)
        self.step = step
        self.failed = failed


@dataclass(frozen=True)
class GDConfig:
    eta: float
    T: int
    suffix_s: int = 0
    record_every: int = 1
    certificate_policy: CertificatePolicy = CertificatePolicy.WARN
    max_stored_floats: int = DEFAULT_MAX_STORED_FLOATS
    dump_trajectory: Optional[Path] = None

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must be in (0, 1), got {self.eta}")
        if self.T < 1:
            raise ValueError(f"T must be positive, got {self.T}")
        if not 0 <= self.suffix_s < self.T:
            raise ValueError(f"suffix_s must be in [0, T), got {self.suffix_s}")
        if self.record_every < 1:
            raise ValueError(f"record_every must be positive, got {self.record_every}")


@dataclass(frozen=True)
class StepCertificate:
    """ステップ t の部分勾配を問い合わせた点 w_{t−1} での証明書"""

    t: int
    feldman_zero: bool
    p_argmax_is_vSs: bool
    p_positive: bool
    projection_inactive: bool
    p_margin: float
    p_value: float
    tie_break_used: bool = False  # 同値の選択規則が効いた（失敗扱いではない）

    def failed(self) -> List[str]:
        checks = {"feldman_zero": self.feldman_zero, "projection_inactive": self.projection_inactive}
        if self.t == 1:
            # w_0 = 0 では p = 0 で、max{p, 0} の 0 側の枝を取る
            checks["p_zero_branch"] = self.p_value <= 0.0
        else:
            checks["p_argmax_is_vSs"] = self.p_argmax_is_vSs
            checks["p_positive"] = self.p_positive
        return [name for name, passed in checks.items() if not passed]

    @property
    def ok(self) -> bool:
        return not self.failed()


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    T: int
    eta: float
    suffix_s: int
    stride: int
    recorded_steps: np.ndarray  # 保存した t
    iterates: List[ParamVector]  # recorded_steps に対応する w_t
    certificates: List[StepCertificate]  # 全ステップ
    risk_trace: np.ndarray  # F_S(w_0), ..., F_S(w_T)
    norms_c: np.ndarray  # ‖w_t^c‖ (t = 1..T)
    norms_m: np.ndarray  # ‖w_t^m‖ (t = 1..T)
    deviations: np.ndarray  # ‖w_t − 閉形式‖∞ (t = 1..T)
    suffix_avg: ParamVector
    final: ParamVector
    max_closed_form_dev: float
    first_divergence_step: Optional[int]
    violations: int = 0

    @property
    def certificates_ok(self) -> bool:
        return self.violations == 0

    @property
    def full_storage(self) -> bool:
        return self.stride == 1

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "t": np.arange(1, self.T + 1),
                "wc_norm": self.norms_c,
                "wm_norm": self.norms_m,
                "p_margin": [c.p_margin for c in self.certificates],
                "feldman_zero": [c.feldman_zero for c in self.certificates],
                "p_argmax_is_vSs": [c.p_argmax_is_vSs for c in self.certificates],
                "p_positive": [c.p_positive for c in self.certificates],
                "projection_inactive": [c.projection_inactive for c in self.certificates],
                "tie_break_used": [c.tie_break_used for c in self.certificates],
                "closed_form_dev": self.deviations,
            }
        )


def _certificate(t: int, evaluation: PointEvaluation, S: SampleStats, pre_norm: float) -> StepCertificate:
    sampled = S.mult > 0
    return StepCertificate(
        t=t,
        feldman_zero=bool(np.all(evaluation.feldman.floor_branch[sampled])),
        p_argmax_is_vSs=bool(np.array_equal(evaluation.p.argmax_v, S.vSs)),
        p_positive=evaluation.p.value > 0.0,
        projection_inactive=pre_norm <= 1.0,
        p_margin=float(evaluation.p.margin),
        p_value=float(evaluation.p.value),
        # w_0 = 0 では p の全候補が同値なので t = 1 は数えない
        tie_break_used=bool(np.any(evaluation.feldman.floor_tie[sampled])) or (t > 1 and evaluation.p.tie),
    )


class GDService:
    def __init__(self, tolerance: float = TRAJECTORY_TOLERANCE):
        self.tolerance = tolerance

    def closed_form_iterate(
        self, params: InstanceParams, code: BinaryCode, S: SampleStats, t: int, eta: Optional[float] = None
    ) -> ParamVector:
        """
        証明書が成り立つ限りの GD 軌道の閉形式

        w_t^c = (γ^c/λ^c)(1−(1−ηλ^c)^{t−1}) Ḡ(v_S^s)
        w_t^m = (1−ηλ^m)^{t−1}(η/m)v_S + [(1−(1−ηλ^m)^{t−1})/λ^m]((1/m)v_S − γ^m v_S^s)
        """
        if t < 1:
            raise ValueError(f"closed form is defined for t >= 1, got {t}")
        eta = params.eta if eta is None else eta
        if eta is None:
            raise ValueError("step size eta is required")
        decay_c = (1.0 - eta * params.lambda_c) ** (t - 1)
        decay_m = (1.0 - eta * params.lambda_m) ** (t - 1)
        code_block = (params.gamma_c / params.lambda_c) * (1.0 - decay_c) * code_service.encode_unit(code, S.vSs)
        message_block = decay_m * (eta / S.m) * S.vS + ((1.0 - decay_m) / params.lambda_m) * (
            S.vS / S.m - params.gamma_m * S.vSs
        )
        return ParamVector(code_block, message_block)

    def run_gd(self, params: InstanceParams, code: BinaryCode, spec: FeldmanSpec, S: SampleStats, cfg: GDConfig) -> TrajectoryRecord:
        """
        w_0 = 0 から T ステップの射影付き部分勾配降下を実行する

        Args:
            params: インスタンスのパラメータ
            code: 二値符号
            spec: Feldman 関数の定義
            S: サンプル
            cfg: ステップ幅・反復回数・接尾平均・証明書ポリシー

        Returns:
            TrajectoryRecord: 反復点・ステップごとの証明書・接尾平均・閉形式との差
        """
        k, T, eta = code.k, cfg.T, cfg.eta
        dim = 3 * k
        stride = cfg.record_every
        if math.ceil(T / stride) * dim > cfg.max_stored_floats:
            stride = math.ceil(T * dim / cfg.max_stored_floats)
            logger.warning(f"[TRIAL] iterate storage strided to every {stride} steps (T={T})")

        w = ParamVector.zeros(k)
        risk_trace = np.empty(T + 1)
        norms_c = np.empty(T)
        norms_m = np.empty(T)
        deviations = np.empty(T)
        certificates: List[StepCertificate] = []
        recorded_steps: List[int] = []
        iterates: List[ParamVector] = []
        suffix_sum = np.zeros(dim)
        violations = 0
        first_divergence: Optional[int] = None
        ties = 0

        for t in range(1, T + 1):
            evaluation = instance_service.evaluate_point(params, code, spec, w)
            risk_trace[t - 1] = instance_service.empirical_risk_value(params, evaluation, S)
            g = instance_service.empirical_subgrad(params, code, spec, w, S, evaluation=evaluation)
            stepped = w - g.scale(eta)
            pre_norm = stepped.norm()
            w = project_unit_ball(stepped)

            cert = _certificate(t, evaluation, S, pre_norm)
            certificates.append(cert)
            if cert.tie_break_used:
                ties += 1
                if ties == 1:
                    logger.warning(f"[CERT] step {t}: tie-break convention exercised")
            if cfg.certificate_policy is not CertificatePolicy.IGNORE:
                failed = cert.failed()
                if failed:
                    violations += 1
                    if cfg.certificate_policy is CertificatePolicy.ABORT:
                        logger.error(f"[CERT] step {t}: certificate failed {failed}")
                        raise CertificateViolationError(f"certificate failed at step {t}: {failed}", t, failed)
                    if violations == 1:
                        logger.warning(f"[CERT] step {t}: certificate failed {failed}; continuing")

            closed = self.closed_form_iterate(params, code, S, t, eta)
            deviations[t - 1] = float(np.max(np.abs(w.flat() - closed.flat())))
            if first_divergence is None and deviations[t - 1] > self.tolerance:
                first_divergence = t
            norms_c[t - 1] = float(np.sqrt(w.code_block @ w.code_block))
            norms_m[t - 1] = float(np.sqrt(w.message_block @ w.message_block))

            if t > cfg.suffix_s:
                suffix_sum += w.flat()
            if t % stride == 0 or t == T:
                recorded_steps.append(t)
                iterates.append(w)
            logger.debug(f"[TRIAL] step {t}: F_S={risk_trace[t - 1]:.6g} p={cert.p_value:.3g} dev={deviations[t - 1]:.2e}")

        final_eval = instance_service.evaluate_point(params, code, spec, w)
        risk_trace[T] = instance_service.empirical_risk_value(params, final_eval, S)
        if violations:
            logger.warning(f"[CERT] {violations} of {T} steps failed certificates")

        record = TrajectoryRecord(
            T=T,
            eta=eta,
            suffix_s=cfg.suffix_s,
            stride=stride,
            recorded_steps=np.asarray(recorded_steps, dtype=np.int64),
            iterates=iterates,
            certificates=certificates,
            risk_trace=risk_trace,
            norms_c=norms_c,
            norms_m=norms_m,
            deviations=deviations,
            suffix_avg=ParamVector.from_flat(suffix_sum / (T - cfg.suffix_s), k),
            final=w,
            max_closed_form_dev=float(deviations.max()),
            first_divergence_step=first_divergence,
            violations=violations,
        )
        if cfg.dump_trajectory is not None:
            self.dump_trajectory(record, cfg.dump_trajectory)
        return record

    def compare_trajectory(self, rec: TrajectoryRecord, params: InstanceParams, code: BinaryCode, S: SampleStats) -> Tuple[float, Optional[int]]:
        """保存された反復点と閉形式の max ノルム差、および最初に許容誤差を超えたステップ"""
        max_dev = 0.0
        first: Optional[int] = None
        for t, w in zip(rec.recorded_steps, rec.iterates):
            dev = float(np.max(np.abs(w.flat() - self.closed_form_iterate(params, code, S, int(t), rec.eta).flat())))
            max_dev = max(max_dev, dev)
            if first is None and dev > self.tolerance:
                first = int(t)
        return max_dev, first

    def suffix_average(self, rec: TrajectoryRecord, s: int) -> ParamVector:
        """w_{S,s} = (1/(T−s)) Σ_{t=s+1}^T w_t"""
        if not 0 <= s < rec.T:
            raise ValueError(f"s must be in [0, {rec.T}), got {s}")
        if s == rec.suffix_s:
            return rec.suffix_avg
        if s == rec.T - 1:
            return rec.final
        if not rec.full_storage:
            raise ValueError(f"iterates stored every {rec.stride} steps; suffix average for s={s} unavailable")
        stacked = np.stack([w.flat() for w in rec.iterates[s:]])
        return ParamVector.from_flat(stacked.mean(axis=0), rec.final.k)

    def dump_trajectory(self, rec: TrajectoryRecord, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rec.to_frame().to_csv(path, index=False)
        logger.info(f"[REPORT] trajectory written to {path}")
        return path


# シングルトンインスタンス
gd_service = GDService()
