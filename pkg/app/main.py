import asyncio
import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
from dotenv import load_dotenv

from app.code_service import CodeFormatError, code_service
from app.config import ConfigError, LabConfig, parse_assignment, parse_config, versions
from app.experiment_service import (
    build_context,
    corollary3_run,
    mc_concentration,
    run_acceptance,
    run_trials,
    sweep_eta_T,
)
from app.instance_service import Mode
from app.report_service import report_service

# Configure logging
load_dotenv()
logger = logging.getLogger(__name__)

EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _fail(failures: List[Dict[str, Any]], code: int) -> None:
    """機械可読な失敗リストを stderr に出して終了する"""
    click.echo(json.dumps({"failures": failures}, ensure_ascii=False, default=str), err=True)
    sys.exit(code)


def common_options(func):
    """全サブコマンド共通の --config / --set / --seed / --out / --threads / --trials"""

    @click.option("--config", "config_path", type=click.Path(path_type=Path), default=None, help="TOML config file")
    @click.option("--set", "assignments", multiple=True, help="override as section.key=value")
    @click.option("--seed", type=int, default=None, help="master seed (harness.seed)")
    @click.option("--out", "out_dir", type=str, default=None, help="output directory")
    @click.option("--threads", type=int, default=None, help="worker processes")
    @click.option("--trials", type=int, default=None, help="number of trials (harness.trials)")
    @functools.wraps(func)
    def wrapper(config_path, assignments, seed, out_dir, threads, trials, **kwargs):
        overrides: Dict[str, Any] = {}
        try:
            for text in assignments:
                key, value = parse_assignment(text)
                overrides[key] = value
            options = {"harness.seed": seed, "out_dir": out_dir, "threads": threads, "harness.trials": trials}
            overrides.update({key: value for key, value in options.items() if value is not None})
            config = parse_config(config_path, overrides)
        except ConfigError as e:
            _fail(e.errors, EXIT_ERROR)
        _configure_logging(config.log_level)
        try:
            return func(config, **kwargs)
        except SystemExit:
            raise
        except Exception as e:
            logger.error(f"Error running {func.__name__}: {e}")
            _fail([{"command": func.__name__, "error": f"{type(e).__name__}: {e}"}], EXIT_ERROR)

    return wrapper


def _finish(failures: List[Dict[str, Any]]) -> None:
    if failures:
        _fail(failures, EXIT_CHECK_FAILED)
    click.echo("OK")


@click.group()
@click.version_option(
    version=json.dumps(versions()),
    prog_name="lab",
    message="%(prog)s %(version)s",
)
def cli():
    """強凸・凸 SCO の過学習インスタンスの実験ハーネス"""


@cli.group()
def code():
    """二値符号の構成と検証"""


@code.command("build")
@click.option("--k", type=int, default=16, show_default=True)
@click.option("--rho", "target_rho", type=float, default=0.10, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--retries", type=int, default=20, show_default=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
def code_build(k: int, target_rho: float, seed: int, retries: int, out_path: Path):
    """符号を構成してファイルに保存する"""
    _configure_logging("INFO")
    try:
        built = code_service.build_code(k, target_rho=target_rho, seed=seed, max_retries=retries)
        code_service.save(built, out_path)
    except Exception as e:
        logger.error(f"Error building code: {e}")
        _fail([{"command": "code build", "error": f"{type(e).__name__}: {e}"}], EXIT_ERROR)
    click.echo(json.dumps({"k": built.k, "rho": built.rho, "fingerprint": built.fingerprint(), "path": str(out_path)}))


@code.command("verify")
@click.option("--in", "in_path", type=click.Path(exists=True, path_type=Path), required=True)
def code_verify(in_path: Path):
    """保存された符号を読み込み、相対距離を全数検証する"""
    _configure_logging("INFO")
    try:
        loaded = code_service.load(in_path)
    except (CodeFormatError, OSError) as e:
        logger.error(f"Error verifying code: {e}")
        _fail([{"command": "code verify", "path": str(in_path), "error": str(e)}], EXIT_CHECK_FAILED)
    click.echo(json.dumps({"k": loaded.k, "rho": loaded.rho, "target_rho": loaded.target_rho, "fingerprint": loaded.fingerprint()}))
    if loaded.rho < loaded.target_rho:
        _fail([{"command": "code verify", "rho": loaded.rho, "target_rho": loaded.target_rho}], EXIT_CHECK_FAILED)


@cli.command()
@common_options
@click.option("--mode", type=click.Choice([m.value for m in Mode]), default=None)
@click.option("--start", type=int, default=0, show_default=True, help="first trial index")
def trial(config: LabConfig, mode: Optional[str], start: int):
    """試行を実行して CSV / JSON / サマリーを書き出す"""
    mode = Mode(mode) if mode else config.instance.mode
    indices = range(start, start + config.harness.trials)
    probes = config.harness.optimality_probes if mode is Mode.ERM else 0
    results = asyncio.run(run_trials(config, indices, mode=mode, optimality_probes=probes))
    ctx = build_context(config, mode)
    report_service.emit_report(
        results, Path(config.out_dir), config_echo=config.echo(), code=ctx.code, extra={"schedule": ctx.params.as_dict(), "regime": ctx.params.regime.as_dict()},
        record_runtime=config.harness.record_runtime,
    )
    failures = [
        {"trial_index": r.trial_index, "bound_ok": r.bound_ok, "certificates_ok": r.certificates_ok, "checks": r.checks}
        for r in results
        if r.conditioned and not (r.bound_ok and r.certificates_ok and all(r.checks.values()))
    ]
    _finish(failures)


@cli.command()
@common_options
def sweep(config: LabConfig):
    """ηT の格子で GD のギャップの伸び方を測る"""
    result = asyncio.run(sweep_eta_T(config))
    ctx = build_context(config, Mode.GD)
    report_service.emit_report(
        result.trials, Path(config.out_dir), config_echo=config.echo(), code=ctx.code, sweep=result, stem="sweep", record_runtime=config.harness.record_runtime
    )
    failures = []
    if not result.monotone:
        failures.append({"check": "monotone", "medians": result.points["median_gap"].tolist()})
    if not result.slope_ok:
        failures.append({"check": "slope", "slope": result.slope})
    if not result.plateau_ok:
        failures.append({"check": "plateau", "max_dev": result.plateau["gap_dev"].max() if not result.plateau.empty else None})
    _finish(failures)


@cli.command()
@common_options
def concentration(config: LabConfig):
    """‖v_S‖ ≤ 3√m となるサンプルの割合を測る"""
    harness = config.harness
    fraction = mc_concentration(config.instance.m, config.instance.k, harness.concentration_trials, harness.seed)
    click.echo(json.dumps({"m": config.instance.m, "k": config.instance.k, "trials": harness.concentration_trials, "fraction": fraction}))
    if fraction < harness.min_conditioned_fraction:
        _fail([{"check": "concentration", "fraction": fraction, "threshold": harness.min_conditioned_fraction}], EXIT_CHECK_FAILED)


@cli.command()
@common_options
@click.option("--index", "trial_index", type=int, default=0, show_default=True)
def corollary3(config: LabConfig, trial_index: int):
    """強凸インスタンス上の GD が ε-ERM になり ERM と同じギャップを持つことを確認する"""
    result = corollary3_run(config, trial_index)
    ctx = build_context(config, Mode.ERM)
    report_service.emit_report(
        [result.trial], Path(config.out_dir), config_echo=config.echo(), code=ctx.code, extra={"corollary3": result.as_dict()}, stem="corollary3", record_runtime=config.harness.record_runtime
    )
    checks = result.as_dict()
    failures = [{"check": key} | checks for key in ("accuracy_reached", "gap_matches_erm", "halving_monotone") if not checks[key]]
    _finish(failures)


@cli.command()
@common_options
def accept(config: LabConfig):
    """受け入れ基準をすべて実行する"""
    report = asyncio.run(run_acceptance(config))
    ctx = build_context(config, Mode.ERM)
    report_service.emit_report(
        report.trials, Path(config.out_dir), config_echo=config.echo(), code=ctx.code, acceptance=report, sweep=report.sweep, stem="accept", record_runtime=config.harness.record_runtime
    )
    _finish(report.failures())


if __name__ == "__main__":
    cli()
