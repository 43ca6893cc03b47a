"""
実験結果のレポート出力サービス

試行単位の CSV、集計 JSON（設定のエコーと符号のフィンガープリント付き）、
受け入れ基準ごとの合否を並べたサマリーを書き出します。
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from app.code_service import BinaryCode

logger = logging.getLogger(__name__)

TRIAL_COLUMNS = [
    "trial_index",
    "seed",
    "mode",
    "m",
    "k",
    "eta",
    "T",
    "s",
    "conditioned",
    "vS_norm",
    "gap_empirical",
    "gap_pop_lo",
    "gap_pop_hi",
    "gap_feldman",
    "bound_predicted",
    "bound_analytic",
    "certificates_ok",
    "max_traj_dev",
    "runtime_ms",
]

DEFAULT_FORMATS = ("csv", "json", "summary")

# 実行ごとに変わる列。record_runtime=False なら 0 を書く
NONDETERMINISTIC_COLUMNS = ["runtime_ms"]


class ReportWriteError(RuntimeError):
    """レポートファイルの書き込みに失敗した"""

    def __init__(self, message: str, path: Path):
        super().__init__(f"{message}: {path}")
        self.path = path


def _clean(value: Any) -> Any:
    """JSON に書けない値（NaN、numpy のスカラー）を変換する"""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _median(series: pd.Series) -> Optional[float]:
    return float(series.median()) if len(series) else None


class ReportService:
    def trials_frame(self, results: Iterable) -> pd.DataFrame:
        rows = [result.to_row() for result in results]
        return pd.DataFrame(rows, columns=TRIAL_COLUMNS)

    def read_trials(self, path: Path) -> pd.DataFrame:
        """emit_report が書いた CSV を浮動小数点を丸めずに読み戻す"""
        return pd.read_csv(path, float_precision="round_trip")

    def aggregates(self, frame: pd.DataFrame) -> Dict[str, Any]:
        """
        試行表からの集計（モードごと、境界の検査は条件付き試行のみ）

        CSV を読み戻した表からも同じ値になる。
        """
        summary: Dict[str, Any] = {"n_trials": int(len(frame)), "modes": {}}
        if frame.empty:
            summary["conditioned_fraction"] = None
            return summary
        conditioned_flags = frame["conditioned"].astype(bool)
        summary["conditioned_fraction"] = float(conditioned_flags.mean())
        for mode, group in frame.groupby("mode", sort=True):
            cond = group[group["conditioned"].astype(bool)]
            summary["modes"][str(mode)] = {
                "n_trials": int(len(group)),
                "n_conditioned": int(len(cond)),
                "median_gap": _median(cond["gap_pop_lo"]),
                "min_gap": float(cond["gap_pop_lo"].min()) if len(cond) else None,
                "median_gap_feldman": _median(cond["gap_feldman"]),
                "median_bound": _median(cond["bound_predicted"]),
                "bound_pass_rate": float((cond["gap_pop_lo"] >= cond["bound_predicted"] - 1e-9).mean()) if len(cond) else None,
                "certificate_pass_rate": float(cond["certificates_ok"].astype(bool).mean()) if len(cond) else None,
                "max_traj_dev": float(group["max_traj_dev"].max()),
            }
        return summary

    def _write(self, path: Path, writer) -> Path:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            writer(path)
        except OSError as e:
            logger.error(f"Error writing report {path}: {e}")
            raise ReportWriteError(f"cannot write report ({e.strerror or e})", path) from e
        logger.info(f"[REPORT] wrote {path}")
        return path

    def emit_report(
        self,
        results: Sequence,
        out_dir: Path,
        formats: Sequence[str] = DEFAULT_FORMATS,
        config_echo: Optional[Dict[str, Any]] = None,
        code: Optional[BinaryCode] = None,
        acceptance=None,
        sweep=None,
        extra: Optional[Dict[str, Any]] = None,
        stem: str = "trials",
        record_runtime: bool = True,
    ) -> Dict[str, Path]:
        """
        レポートファイルを書き出す

        Args:
            results: TrialResult の列（空でもよい）
            out_dir: 出力ディレクトリ
            formats: "csv" / "json" / "summary" の組み合わせ
            config_echo: 実行を再現できる設定
            code: フィンガープリントを記録する符号
            acceptance: AcceptanceReport（あれば基準ごとの合否を書く）
            sweep: SweepResult（あれば格子点の表を書く）
            extra: JSON に追加する値
            stem: ファイル名の接頭辞
            record_runtime: False なら実行時間の列を 0 にしてファイルをバイト単位で再現可能にする

        Returns:
            Dict[str, Path]: 形式 → 書き出したパス
        """
        unknown = set(formats) - set(DEFAULT_FORMATS)
        if unknown:
            raise ValueError(f"unknown report formats: {sorted(unknown)}")
        out_dir = Path(out_dir)
        frame = self.trials_frame(results)
        if not record_runtime:
            frame[NONDETERMINISTIC_COLUMNS] = 0
        written: Dict[str, Path] = {}

        if "csv" in formats:
            written["csv"] = self._write(out_dir / f"{stem}.csv", lambda p: frame.to_csv(p, index=False, float_format="%.17g"))

        payload: Dict[str, Any] = {"config": config_echo or {}, "aggregates": self.aggregates(frame)}
        payload["schema"] = {"columns": TRIAL_COLUMNS, "nondeterministic_columns": NONDETERMINISTIC_COLUMNS if record_runtime else []}
        if code is not None:
            payload["code"] = {"k": code.k, "rho": code.rho, "seed": code.seed, "fingerprint": code.fingerprint()}
        if acceptance is not None:
            payload["criteria"] = [
                {"id": c.id, "name": c.name, "passed": c.passed, "detail": c.detail} for c in acceptance.criteria
            ]
            payload["passed"] = acceptance.passed
            payload["runtime_s"] = acceptance.runtime_s
        if sweep is not None:
            payload["sweep"] = {
                "axis": sweep.axis,
                "slope": sweep.slope,
                "monotone": sweep.monotone,
                "points": sweep.points.to_dict(orient="records"),
                "plateau": sweep.plateau.to_dict(orient="records"),
            }
        if extra:
            payload.update(extra)

        if "json" in formats:
            text = json.dumps(_clean(payload), indent=2, ensure_ascii=False)
            written["json"] = self._write(out_dir / f"{stem}.json", lambda p: p.write_text(text, encoding="utf-8"))

        if "summary" in formats:
            text = self.summary_text(payload)
            written["summary"] = self._write(out_dir / f"{stem}_summary.txt", lambda p: p.write_text(text, encoding="utf-8"))
        return written

    def summary_text(self, payload: Dict[str, Any]) -> str:
        lines = ["SCO overfitting lab report", "=" * 40]
        agg = payload["aggregates"]
        lines.append(f"trials: {agg['n_trials']}  conditioned fraction: {agg.get('conditioned_fraction')}")
        for mode, stats in agg.get("modes", {}).items():
            lines.append(
                f"  [{mode}] conditioned {stats['n_conditioned']}/{stats['n_trials']}  "
                f"median gap {stats['median_gap']}  median bound {stats['median_bound']}  "
                f"bound pass rate {stats['bound_pass_rate']}"
            )
        if "code" in payload:
            code = payload["code"]
            lines.append(f"code: k={code['k']} rho={code['rho']} fingerprint={code['fingerprint'][:16]}")
        if "criteria" in payload:
            lines.append("")
            lines.append("acceptance criteria")
            for c in payload["criteria"]:
                lines.append(f"  {c['id']:>2}. [{'PASS' if c['passed'] else 'FAIL'}] {c['name']}")
            lines.append(f"overall: {'PASS' if payload['passed'] else 'FAIL'}")
        if "sweep" in payload:
            lines.append(f"sweep slope: {payload['sweep']['slope']}  monotone: {payload['sweep']['monotone']}")
        return "\n".join(lines) + "\n"


# シングルトンインスタンス
report_service = ReportService()
