"""
実験設定の読み込みと検証

優先順位: モデルの既定値 < 環境変数 (LAB_THREADS, LAB_LOG_LEVEL, LAB_OUT_DIR)
< TOML 設定ファイル < --set section.key=value などのコマンドライン指定
"""

import logging
import math
import os
import tomllib
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.code_service import CODE_FORMAT_VERSION
from app.gd_service import CertificatePolicy, GDConfig
from app.instance_service import DEFAULT_BRUTE_FORCE_CAP, Mode, RelaxMultipliers

logger = logging.getLogger(__name__)

__version__ = "0.1.0"
ACCEPTANCE_SUITE_VERSION = 1

_ENV_KEYS = {
    "LAB_THREADS": "threads",
    "LAB_LOG_LEVEL": "log_level",
    "LAB_OUT_DIR": "out_dir",
}


class ConfigError(ValueError):
    """設定の未知キー・型不一致・項目間の矛盾（キーパス付き）"""

    def __init__(self, errors: list):
        self.errors = errors
        super().__init__("; ".join(f"{e['loc']}: {e['msg']}" for e in errors))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CodeSection(_Section):
    target_rho: float = Field(0.10, gt=0.0, lt=0.5)
    seed: int = Field(1, ge=0)
    max_retries: int = Field(20, ge=1)
    path: Optional[str] = None


class InstanceSection(_Section):
    mode: Mode = Mode.ERM
    m: int = Field(8, ge=1)
    k: int = Field(16, ge=2, le=28)
    allow_nonstandard: bool = False
    lam: Optional[float] = Field(None, gt=0.0)
    epsilon: Optional[float] = Field(None, gt=0.0)
    brute_force_cap: int = Field(DEFAULT_BRUTE_FORCE_CAP, ge=1, le=28)


class GDSection(_Section):
    eta: float = Field(0.05, gt=0.0, lt=1.0)
    T: int = Field(1000, ge=1)
    suffix_s: int = Field(0, ge=0)
    record_every: int = Field(1, ge=1)
    certificate_policy: CertificatePolicy = CertificatePolicy.WARN
    dump_trajectory: Optional[str] = None
    sweep_eta: float = Field(0.1, gt=0.0, lt=1.0)
    sweep_j_max: int = Field(6, ge=2)
    corollary3_multiplier: float = Field(4.0, gt=0.0)

    def to_gd_config(self) -> GDConfig:
        return GDConfig(
            eta=self.eta,
            T=self.T,
            suffix_s=self.suffix_s,
            record_every=self.record_every,
            certificate_policy=self.certificate_policy,
            dump_trajectory=Path(self.dump_trajectory) if self.dump_trajectory else None,
        )


class HarnessSection(_Section):
    seed: int = Field(0, ge=0)
    trials: int = Field(500, ge=1)
    gd_trials: int = Field(200, ge=1)
    sweep_trials: int = Field(40, ge=1)
    concentration_trials: int = Field(2000, ge=100)
    optimality_probes: int = Field(1000, ge=0)
    epsilon_probes: int = Field(200, ge=0)
    lipschitz_points: int = Field(10_000, ge=1)
    argmax_queries: int = Field(10_000, ge=0)
    pair_samples: int = Field(10_000, ge=0)
    # None なら条件付き試行すべて
    transport_trials: Optional[int] = Field(None, ge=1)
    trajectory_argmax_trials: Optional[int] = Field(None, ge=1)
    min_conditioned_fraction: float = Field(0.47, ge=0.0, le=1.0)
    record_runtime: bool = True


class RelaxSection(_Section):
    enabled: bool = True
    erm_lambda_m_low: float = Field(1.0, gt=0.0)
    erm_lambda_m_high: float = Field(1.0, gt=0.0)
    gd_lambda_m: float = Field(1.0, gt=0.0)
    gd_gamma_c: float = Field(1.0, gt=0.0)
    gd_lambda_c: float = Field(1.0, gt=0.0)

    def to_multipliers(self) -> RelaxMultipliers:
        return RelaxMultipliers(**self.model_dump())


class LabConfig(_Section):
    code: CodeSection = Field(default_factory=CodeSection)
    instance: InstanceSection = Field(default_factory=InstanceSection)
    gd: GDSection = Field(default_factory=GDSection)
    harness: HarnessSection = Field(default_factory=HarnessSection)
    relax: RelaxSection = Field(default_factory=RelaxSection)
    out_dir: str = "out"
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    log_level: str = "INFO"

    @model_validator(mode="after")
    def _cross_field(self) -> "LabConfig":
        inst, gd = self.instance, self.gd
        if inst.k != 2 * inst.m and not inst.allow_nonstandard:
            raise ValueError(f"instance.k: k={inst.k} must equal 2m={2 * inst.m} unless instance.allow_nonstandard is set")
        if gd.suffix_s >= gd.T:
            raise ValueError(f"gd.suffix_s: must be < gd.T={gd.T}")
        if inst.mode is Mode.GD and gd.eta * gd.T <= math.sqrt(inst.m):
            raise ValueError(f"gd.T: GD mode requires eta*T > sqrt(m) ({gd.eta * gd.T} <= {math.sqrt(inst.m):.4f})")
        if inst.mode is Mode.ERM and inst.lam is not None and inst.lam > 1.0 / math.sqrt(inst.m):
            raise ValueError(f"instance.lam: ERM mode requires lambda <= 1/sqrt(m) = {1.0 / math.sqrt(inst.m):.4f}")
        if self.log_level.upper() not in logging.getLevelNamesMapping():
            raise ValueError(f"log_level: unknown level {self.log_level}")
        return self

    def echo(self) -> Dict[str, Any]:
        """出力に埋め込む完全な設定（再現に十分）"""
        data = self.model_dump(mode="json")
        data["versions"] = versions()
        return data


def versions() -> Dict[str, Any]:
    return {
        "package": __version__,
        "code_format": CODE_FORMAT_VERSION,
        "acceptance_suite": ACCEPTANCE_SUITE_VERSION,
    }


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    node = data
    keys = dotted.split(".")
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError([{"loc": dotted, "msg": f"{key} is not a section"}])
        node = child
    node[keys[-1]] = value


def _merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def parse_assignment(text: str) -> tuple:
    """'section.key=value' を (dotted_key, value) に分ける"""
    if "=" not in text:
        raise ConfigError([{"loc": text, "msg": "override must look like section.key=value"}])
    key, value = text.split("=", 1)
    key = key.strip()
    value = value.strip()
    if value.lower() in ("none", "null"):
        return key, None
    return key, value


def parse_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> LabConfig:
    """
    設定を組み立てて検証する

    Args:
        path: TOML 設定ファイル（省略可）
        overrides: {"gd.eta": 0.1, ...} のようなドット区切りキーの上書き

    Returns:
        LabConfig: 既定値を埋めた検証済みの設定
    """
    data: Dict[str, Any] = {}
    for env_key, field_name in _ENV_KEYS.items():
        value = os.getenv(env_key)
        if value:
            data[field_name] = value

    if path is not None:
        path = Path(path)
        try:
            with path.open("rb") as f:
                _merge(data, tomllib.load(f))
        except FileNotFoundError:
            raise ConfigError([{"loc": str(path), "msg": "config file not found"}])
        except tomllib.TOMLDecodeError as e:
            raise ConfigError([{"loc": str(path), "msg": f"TOML parse error: {e}"}])

    for dotted, value in (overrides or {}).items():
        _set_dotted(data, dotted, value)

    try:
        config = LabConfig.model_validate(data)
    except ValidationError as e:
        errors = [
            {"loc": ".".join(str(part) for part in err["loc"]) or "config", "msg": err["msg"]}
            for err in e.errors()
        ]
        logger.error(f"Error validating config: {errors}")
        raise ConfigError(errors) from e

    if config.relax.enabled:
        logger.info(f"[SCHEDULE] relaxed regime enabled: {config.relax.model_dump()}")
    return config
