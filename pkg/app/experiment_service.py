"""
モンテカルロ実験ハーネスのサービスモジュール

試行ごとの乱数ストリームは (master_seed, trial_index, tag) で決まるので、
ワーカー数や実行順序に関係なく結果が再現します。
試行はプロセスプールで並列に実行し、結果は trial_index 順に並べ直します。
"""

import asyncio
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.code_service import BinaryCode, code_service, get_code
from app.config import LabConfig
from app.erm_service import erm_service
from app.feldman_service import FeldmanSpec
from app.gd_service import CertificatePolicy, GDConfig, TRAJECTORY_TOLERANCE, gd_service
from app.instance_service import (
    InstanceParams,
    Mode,
    RiskValue,
    SampleStats,
    draw_sample,
    instance_service,
)
from app.param_utils import ParamVector, random_feasible
from app.rng_utils import stream
from app.schedule_service import schedule_service

logger = logging.getLogger(__name__)

GAP_TOLERANCE = 1e-9
PLATEAU_TOLERANCE = 1e-6
SLOPE_RANGE = (0.4, 0.6)
SUITE_TIME_LIMIT_S = 600.0


@dataclass(frozen=True, eq=False)
class TrialContext:
    code: BinaryCode
    params: InstanceParams
    spec: FeldmanSpec


@dataclass(frozen=True, eq=False)
class TrialResult:
    trial_index: int
    seed: int
    S: SampleStats
    conditioned: bool
    mode: Mode
    eta: Optional[float]
    T: Optional[int]
    s: Optional[int]
    gap_empirical: float  # F_S(w) − F_S(0)
    gap_population: RiskValue  # F(w) − F(0)
    gap_feldman: float  # h_D(w^c) − ζ(1−ρ/2)
    bound_predicted: float
    bound_analytic: float
    certificates_ok: bool
    max_traj_dev: float
    runtime_ms: int
    checks: Dict[str, bool] = field(default_factory=dict)

    @property
    def bound_ok(self) -> bool:
        return self.gap_population.lo >= self.bound_predicted - GAP_TOLERANCE

    def to_row(self) -> Dict[str, Any]:
        return {
            "trial_index": self.trial_index,
            "seed": self.seed,
            "mode": self.mode.value,
            "m": self.S.m,
            "k": self.S.k,
            "eta": self.eta,
            "T": self.T,
            "s": self.s,
            "conditioned": self.conditioned,
            "vS_norm": self.S.vS_norm,
            "gap_empirical": self.gap_empirical,
            "gap_pop_lo": self.gap_population.lo,
            "gap_pop_hi": self.gap_population.hi,
            "gap_feldman": self.gap_feldman,
            "bound_predicted": self.bound_predicted,
            "bound_analytic": self.bound_analytic,
            "certificates_ok": self.certificates_ok,
            "max_traj_dev": self.max_traj_dev,
            "runtime_ms": self.runtime_ms,
        }


@dataclass(frozen=True, eq=False)
class SweepResult:
    axis: str
    points: pd.DataFrame  # 格子点ごとの集計（条件付き試行のみ）
    slope: float
    monotone: bool
    plateau: pd.DataFrame
    trials: List[TrialResult]

    @property
    def slope_ok(self) -> bool:
        return SLOPE_RANGE[0] <= self.slope <= SLOPE_RANGE[1]

    @property
    def plateau_ok(self) -> bool:
        if self.plateau.empty:
            return False
        devs = self.plateau.groupby("multiplier")["gap_dev"].max().sort_index().to_numpy()
        return bool(devs[-1] <= PLATEAU_TOLERANCE and np.all(np.diff(devs) <= PLATEAU_TOLERANCE))


@dataclass(frozen=True, eq=False)
class Corollary3Result:
    trial: TrialResult
    T: int
    epsilon: float
    empirical_suboptimality: float  # F_S(w^GD) − F_S(w_star)
    half_T_suboptimality: float
    erm_gap: float
    gd_gap: float

    @property
    def accuracy_reached(self) -> bool:
        return self.empirical_suboptimality <= self.epsilon

    @property
    def gap_matches_erm(self) -> bool:
        return abs(self.gd_gap - self.erm_gap) <= PLATEAU_TOLERANCE

    @property
    def halving_monotone(self) -> bool:
        return self.half_T_suboptimality >= self.empirical_suboptimality - 1e-12

    def as_dict(self) -> Dict[str, Any]:
        return {
            "trial_index": self.trial.trial_index,
            "T": self.T,
            "epsilon": self.epsilon,
            "empirical_suboptimality": self.empirical_suboptimality,
            "half_T_suboptimality": self.half_T_suboptimality,
            "erm_gap": self.erm_gap,
            "gd_gap": self.gd_gap,
            "accuracy_reached": self.accuracy_reached,
            "gap_matches_erm": self.gap_matches_erm,
            "halving_monotone": self.halving_monotone,
        }


@dataclass(frozen=True)
class CriterionResult:
    id: int
    name: str
    passed: bool
    detail: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class AcceptanceReport:
    criteria: List[CriterionResult]
    trials: List[TrialResult]
    sweep: Optional[SweepResult]
    runtime_s: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def failures(self) -> List[Dict[str, Any]]:
        return [{"id": c.id, "name": c.name, "detail": c.detail} for c in self.criteria if not c.passed]


# ---------- 試行の組み立て ----------


def build_context(
    config: LabConfig,
    mode: Mode,
    eta: Optional[float] = None,
    T: Optional[int] = None,
) -> TrialContext:
    """符号（プロセスごとにキャッシュ）・スケジュール・Feldman 関数を組み立てる"""
    inst = config.instance
    code = get_code(inst.k, config.code.target_rho, config.code.seed, config.code.max_retries, config.code.path)
    if mode is Mode.GD:
        eta = config.gd.eta if eta is None else eta
        T = config.gd.T if T is None else T
    params = schedule_service.schedule(
        m=inst.m,
        rho=code.rho,
        mode=mode,
        eta=eta,
        T=T,
        lam=inst.lam,
        epsilon=inst.epsilon,
        relax=config.relax.to_multipliers(),
        k=inst.k,
        brute_force_cap=inst.brute_force_cap,
    )
    return TrialContext(code=code, params=params, spec=FeldmanSpec.create(code, params.zeta))


def sample_for_trial(config: LabConfig, trial_index: int) -> SampleStats:
    return draw_sample(config.instance.m, config.instance.k, stream(config.harness.seed, trial_index, "sample"))


def _empirical_gap(ctx: TrialContext, S: SampleStats, w: ParamVector) -> float:
    zero = ParamVector.zeros(ctx.code.k)
    values = [
        instance_service.empirical_risk_value(ctx.params, instance_service.evaluate_point(ctx.params, ctx.code, ctx.spec, point), S)
        for point in (w, zero)
    ]
    return values[0] - values[1]


def run_trial(
    config: LabConfig,
    trial_index: int,
    mode: Optional[Mode] = None,
    eta: Optional[float] = None,
    T: Optional[int] = None,
    optimality_probes: int = 0,
) -> TrialResult:
    """
    一回の試行: S ~ Uniform([k])^m を引き、ERM か GD を実行してギャップと予測下界を計算する

    Args:
        config: 実験設定
        trial_index: 試行番号（乱数ストリームのキー）
        mode: ERM または GD（省略時は設定の instance.mode）
        eta, T: GD のステップ幅と反復回数の上書き
        optimality_probes: ERM で大域最適性をランダム検査する点の数

    Returns:
        TrialResult: 試行の結果
    """
    mode = Mode(mode or config.instance.mode)
    started = time.perf_counter()
    try:
        ctx = build_context(config, mode, eta, T)
        S = sample_for_trial(config, trial_index)
        checks: Dict[str, bool] = {}
        max_dev = 0.0
        s = None
        if mode is Mode.ERM:
            sol = erm_service.closed_form_minimizer(ctx.params, ctx.code, ctx.spec, S)
            w = sol.w_star
            checks["stationary"] = sol.stationarity_residual <= 1e-9
            checks["feasible"] = sol.feasibility_margin >= -1e-12
            if optimality_probes:
                report = erm_service.verify_global_optimality(
                    ctx.params, ctx.code, ctx.spec, S, sol, probes=optimality_probes, seed=config.harness.seed + trial_index
                )
                checks["optimality"] = report.ok
            certificates_ok = all(checks.values())
            bound = schedule_service.erm_chain_bound(ctx.params, S)
            analytic = schedule_service.erm_analytic_bound(ctx.params)
        else:
            gd_cfg = config.gd.to_gd_config()
            gd_cfg = GDConfig(
                eta=ctx.params.eta,
                T=ctx.params.T,
                suffix_s=min(gd_cfg.suffix_s, ctx.params.T - 1),
                record_every=gd_cfg.record_every,
                certificate_policy=gd_cfg.certificate_policy,
                dump_trajectory=gd_cfg.dump_trajectory.with_name(f"{gd_cfg.dump_trajectory.stem}_{trial_index}.csv")
                if gd_cfg.dump_trajectory
                else None,
            )
            rec = gd_service.run_gd(ctx.params, ctx.code, ctx.spec, S, gd_cfg)
            s = gd_cfg.suffix_s
            w = gd_service.suffix_average(rec, s)
            max_dev = rec.max_closed_form_dev
            checks["certificates"] = rec.certificates_ok
            checks["closed_form"] = max_dev <= TRAJECTORY_TOLERANCE
            checks["feasible"] = bool(np.all([x.is_feasible() for x in rec.iterates]))
            certificates_ok = rec.certificates_ok
            bound = schedule_service.gd_chain_bound(ctx.params, S)
            analytic = schedule_service.gd_analytic_bound(ctx.params)

        gap_population = instance_service.population_gap(ctx.params, ctx.code, ctx.spec, w)
        if mode is Mode.ERM and ctx.code.k <= instance_service.cap_for(ctx.params):
            # 区間評価が全数評価の値を含むこと
            interval = instance_service.population_gap(ctx.params, ctx.code, ctx.spec, w, method="interval")
            checks["interval_contains_exact"] = interval.contains(gap_population.lo)

        result = TrialResult(
            trial_index=trial_index,
            seed=config.harness.seed,
            S=S,
            conditioned=S.conditioned,
            mode=mode,
            eta=ctx.params.eta,
            T=ctx.params.T,
            s=s,
            gap_empirical=_empirical_gap(ctx, S, w),
            gap_population=gap_population,
            gap_feldman=instance_service.feldman_gap(ctx.spec, w.code_block),
            bound_predicted=bound,
            bound_analytic=analytic,
            certificates_ok=certificates_ok,
            max_traj_dev=max_dev,
            runtime_ms=int((time.perf_counter() - started) * 1000),
            checks=checks,
        )
    except Exception as e:
        logger.error(f"Error in trial {trial_index} ({mode.value}): {e}")
        e.add_note(f"trial_index={trial_index} mode={mode.value}")
        raise
    logger.debug(f"[TRIAL] {trial_index} {mode.value}: gap={gap_population.lo:.4e} bound={bound:.4e}")
    return result


# ---------- 並列実行 ----------


def _executor(threads: int):
    return ProcessPoolExecutor(max_workers=threads) if threads > 1 else ThreadPoolExecutor(max_workers=1)


async def run_jobs(threads: int, fn: Callable, args: Sequence) -> List[Any]:
    """fn(arg) をワーカープールで実行し、引数の順に結果を返す"""
    loop = asyncio.get_running_loop()
    with _executor(threads) as executor:
        futures = [loop.run_in_executor(executor, fn, arg) for arg in args]
        return list(await asyncio.gather(*futures))


async def run_trials(
    config: LabConfig,
    indices: Sequence[int],
    mode: Optional[Mode] = None,
    eta: Optional[float] = None,
    T: Optional[int] = None,
    optimality_probes: int = 0,
) -> List[TrialResult]:
    """複数の試行を並列に実行する（結果は trial_index の順）"""
    mode = Mode(mode or config.instance.mode)
    logger.info(f"[TRIAL] starting {len(indices)} {mode.value} trial(s) on {config.threads} worker(s)")
    job = partial(run_trial, config, mode=mode, eta=eta, T=T, optimality_probes=optimality_probes)
    results = await run_jobs(config.threads, job, list(indices))
    logger.info(f"[TRIAL] finished {len(results)} {mode.value} trial(s)")
    return results


# ---------- 集中度 ----------


def mc_concentration(m: int, k: int, trials: int, seed: int) -> float:
    """‖v_S‖ ≤ 3√m となるサンプルの割合（試行と同じ乱数ストリームを使う）"""
    if trials < 100:
        raise ValueError(f"trials must be at least 100, got {trials}")
    hits = sum(draw_sample(m, k, stream(seed, index, "sample")).conditioned for index in range(trials))
    return hits / trials


def exact_conditioned_fraction(m: int, k: int, max_samples: int = 1_000_000) -> float:
    """全 k^m 個のサンプルを列挙した条件付き事象の確率"""
    if k**m > max_samples:
        raise ValueError(f"k^m = {k**m} samples exceed enumeration limit {max_samples}")
    threshold = 3.0 * math.sqrt(m)
    hits = 0
    for draws in itertools.product(range(k), repeat=m):
        mult = np.bincount(np.asarray(draws), minlength=k)
        v = 1.0 - 2.0 * mult
        hits += float(np.sqrt(v @ v)) <= threshold
    return hits / k**m


# ---------- スイープ ----------


def eta_T_grid(config: LabConfig) -> List[tuple]:
    """ηT = 2^j √m (j = 1..j_max) を固定 η の T で実現する格子"""
    eta = config.gd.sweep_eta
    root_m = math.sqrt(config.instance.m)
    return [(eta, math.ceil(2**j * root_m / eta)) for j in range(1, config.gd.sweep_j_max + 1)]


def _conditioned_aggregate(trials: Sequence[TrialResult]) -> Dict[str, Any]:
    conditioned = [t for t in trials if t.conditioned]
    gaps = np.array([t.gap_population.lo for t in conditioned])
    feldman = np.array([t.gap_feldman for t in conditioned])
    return {
        "n_trials": len(trials),
        "n_conditioned": len(conditioned),
        "median_gap": float(np.median(gaps)) if conditioned else math.nan,
        "min_gap": float(gaps.min()) if conditioned else math.nan,
        "median_gap_feldman": float(np.median(feldman)) if conditioned else math.nan,
        "median_bound": float(np.median([t.bound_predicted for t in conditioned])) if conditioned else math.nan,
        "cert_pass_rate": float(np.mean([t.certificates_ok for t in conditioned])) if conditioned else math.nan,
    }


def _plateau_job(config: LabConfig, arg: tuple) -> Dict[str, Any]:
    trial_index, multiplier = arg
    result = corollary3_run(config, trial_index, multiplier=multiplier, check_halving=False, floor_T=False)
    return {
        "trial_index": trial_index,
        "multiplier": multiplier,
        "T": result.T,
        "erm_gap": result.erm_gap,
        "gd_gap": result.gd_gap,
        "gap_dev": abs(result.gd_gap - result.erm_gap),
    }


async def sweep_eta_T(config: LabConfig, grid: Optional[Sequence[tuple]] = None, plateau_multipliers: Sequence[float] = (1.0, 2.0, 4.0)) -> SweepResult:
    """
    ηT の格子で GD インスタンスを走らせ、条件付き試行の中央値ギャップの傾きを測る

    傾きは ηT に比例して伸びる Feldman 成分 gap_feldman で当てはめる。
    あわせて強凸インスタンス上の GD が ηT ≳ m^{3/2} で ERM のギャップに張り付くことを確認する。
    """
    grid = list(grid or eta_T_grid(config))
    root_m = math.sqrt(config.instance.m)
    for eta, T in grid:
        if eta * T <= root_m:
            raise ValueError(f"grid point eta={eta}, T={T} violates eta*T > sqrt(m)")

    indices = list(range(config.harness.sweep_trials))
    rows = []
    all_trials: List[TrialResult] = []
    for eta, T in grid:
        trials = await run_trials(config, indices, mode=Mode.GD, eta=eta, T=T)
        all_trials.extend(trials)
        ctx = build_context(config, Mode.GD, eta, T)
        rows.append(
            {"eta": eta, "T": T, "eta_T": eta * T, "analytic_bound": schedule_service.gd_analytic_bound(ctx.params)}
            | _conditioned_aggregate(trials)
        )
    points = pd.DataFrame(rows)

    valid = points[np.isfinite(points["median_gap_feldman"]) & (points["median_gap_feldman"] > 0)]
    slope = float(np.polyfit(np.log(valid["eta_T"]), np.log(valid["median_gap_feldman"]), 1)[0]) if len(valid) >= 2 else math.nan
    medians = points["median_gap"].to_numpy()
    monotone = bool(np.all(np.diff(medians) >= -GAP_TOLERANCE))

    conditioned = [i for i in indices if sample_for_trial(config, i).conditioned][: min(10, len(indices))]
    plateau_rows = await run_jobs(
        config.threads, partial(_plateau_job, config), [(i, mult) for i in conditioned for mult in plateau_multipliers]
    )
    plateau = pd.DataFrame(plateau_rows, columns=["trial_index", "multiplier", "T", "erm_gap", "gd_gap", "gap_dev"])
    logger.info(f"[TRIAL] sweep slope {slope:.3f}, monotone={monotone}")
    return SweepResult(axis="eta_T", points=points, slope=slope, monotone=monotone, plateau=plateau, trials=all_trials)


# ---------- 系 3 ----------


def corollary3_run(
    config: LabConfig,
    trial_index: int = 0,
    multiplier: Optional[float] = None,
    check_halving: bool = True,
    floor_T: bool = True,
) -> Corollary3Result:
    """
    強凸インスタンス上で ηT ≳ m^{3/2} の GD を走らせ、最終反復が ε-ERM になり
    母集団ギャップが厳密 ERM のギャップと一致することを確認する
    """
    started = time.perf_counter()
    ctx = build_context(config, Mode.ERM)
    params = ctx.params
    S = sample_for_trial(config, trial_index)
    sol = erm_service.closed_form_minimizer(params, ctx.code, ctx.spec, S)
    eta = config.gd.eta
    multiplier = config.gd.corollary3_multiplier if multiplier is None else multiplier
    T = math.ceil(multiplier * config.instance.m**1.5 / eta)
    if floor_T:
        T = max(T, config.gd.T)

    def suboptimality(steps: int) -> tuple:
        rec = gd_service.run_gd(params, ctx.code, ctx.spec, S, GDConfig(eta=eta, T=steps, suffix_s=steps - 1, certificate_policy=CertificatePolicy.IGNORE))
        value = instance_service.empirical_risk_value(params, instance_service.evaluate_point(params, ctx.code, ctx.spec, rec.final), S)
        return rec, value - sol.empirical_risk

    rec, sub = suboptimality(T)
    half_sub = suboptimality(max(T // 2, 1))[1] if check_halving else math.nan
    erm_gap = instance_service.population_gap(params, ctx.code, ctx.spec, sol.w_star).lo
    gd_gap_value = instance_service.population_gap(params, ctx.code, ctx.spec, rec.final)

    trial = TrialResult(
        trial_index=trial_index,
        seed=config.harness.seed,
        S=S,
        conditioned=S.conditioned,
        mode=Mode.ERM,
        eta=eta,
        T=T,
        s=T - 1,
        gap_empirical=_empirical_gap(ctx, S, rec.final),
        gap_population=gd_gap_value,
        gap_feldman=instance_service.feldman_gap(ctx.spec, rec.final.code_block),
        bound_predicted=schedule_service.erm_chain_bound(params, S),
        bound_analytic=schedule_service.erm_analytic_bound(params),
        certificates_ok=rec.certificates_ok,
        max_traj_dev=rec.max_closed_form_dev,
        runtime_ms=int((time.perf_counter() - started) * 1000),
    )
    result = Corollary3Result(
        trial=trial,
        T=T,
        epsilon=params.epsilon,
        empirical_suboptimality=sub,
        half_T_suboptimality=half_sub,
        erm_gap=erm_gap,
        gd_gap=gd_gap_value.lo,
    )
    if not result.accuracy_reached:
        logger.warning(f"[TRIAL] corollary3 trial {trial_index}: suboptimality {sub:.3e} exceeds epsilon {params.epsilon:.3e}")
    return result


# ---------- 受け入れ検査 ----------


def _code_certification(config: LabConfig) -> CriterionResult:
    inst = config.instance
    started = time.perf_counter()
    code = get_code(inst.k, config.code.target_rho, config.code.seed, config.code.max_retries, config.code.path)
    build_s = time.perf_counter() - started
    started = time.perf_counter()
    rho = code_service.verify_relative_distance(code)
    verify_s = time.perf_counter() - started

    rng = stream(config.harness.seed, 0, "code-pairs")
    pairs = rng.integers(0, code.size, size=(config.harness.pair_samples, 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    max_corr = -math.inf
    for a, b in pairs:
        corr = float(code_service.codeword_unit(code, int(a)) @ code_service.codeword_unit(code, int(b)))
        max_corr = max(max_corr, corr)
    passed = (
        rho >= config.code.target_rho
        and verify_s < 10.0
        and max_corr <= 1.0 - 2.0 * rho + 1e-12
        and max_corr < 1.0 - rho / 2.0
    )
    return CriterionResult(
        1,
        "code certification",
        passed,
        {"k": code.k, "rho": rho, "build_s": build_s, "verify_s": verify_s, "max_pair_correlation": max_corr, "fingerprint": code.fingerprint()},
    )


def _erm_probe_job(config: LabConfig, trial_index: int) -> Dict[str, Any]:
    ctx = build_context(config, Mode.ERM)
    S = sample_for_trial(config, trial_index)
    report = erm_service.epsilon_erm_probe(
        ctx.params, ctx.code, ctx.spec, S, ctx.params.epsilon, n_probes=config.harness.epsilon_probes, seed=config.harness.seed + trial_index
    )
    return {
        "trial_index": trial_index,
        "transport_ok": report.transport_ok(),
        "analytic_ok": report.analytic_ok(),
        "erm_gap": report.erm_gap,
        "analytic_floor": report.analytic_floor,
        "lipschitz": report.lipschitz,
        "lipschitz_relaxed": report.lipschitz_relaxed,
        "kept": len(report.kept),
        "acceptance_rate": report.acceptance_rate,
        "radius_max": report.radius_max,
    }


def _argmax_job(config: LabConfig, chunk: tuple) -> Dict[str, Any]:
    """ランダムな実行可能点で証明付き評価の一意性の主張を全数評価と突き合わせる"""
    chunk_index, size, mode = chunk
    ctx = build_context(config, mode)
    rng = stream(config.harness.seed, chunk_index, "argmax")
    claims = disagreements = 0
    for _ in range(size):
        w = random_feasible(rng, ctx.code.k)
        claims_unique, agrees = _argmax_agrees(ctx, w)
        claims += claims_unique
        disagreements += not agrees
    return {"queries": size, "claims": claims, "disagreements": disagreements}


def _argmax_agrees(ctx: TrialContext, w: ParamVector) -> tuple:
    candidate = np.sign(w.message_block)
    if np.any(candidate == 0):
        return False, True
    certified = instance_service.p_eval_certified(ctx.params, ctx.code, w, candidate)
    if not certified.certified_unique:
        return False, True
    brute = instance_service.p_eval_bruteforce(ctx.params, ctx.code, w)
    agrees = (not brute.tie) and np.array_equal(brute.argmax_v, candidate) and math.isclose(brute.value, certified.value, rel_tol=0.0, abs_tol=1e-12)
    return True, agrees


def _trajectory_argmax_job(config: LabConfig, trial_index: int) -> Dict[str, Any]:
    ctx = build_context(config, Mode.GD)
    S = sample_for_trial(config, trial_index)
    rec = gd_service.run_gd(ctx.params, ctx.code, ctx.spec, S, GDConfig(eta=ctx.params.eta, T=ctx.params.T, certificate_policy=CertificatePolicy.IGNORE))
    claims = disagreements = 0
    for w in rec.iterates:
        claims_unique, agrees = _argmax_agrees(ctx, w)
        claims += claims_unique
        disagreements += not agrees
    return {"queries": len(rec.iterates), "claims": claims, "disagreements": disagreements}


def _lipschitz_job(config: LabConfig, mode: Mode) -> Dict[str, Any]:
    ctx = build_context(config, mode)
    audit = instance_service.lipschitz_audit(ctx.params, ctx.code, ctx.spec, n_points=config.harness.lipschitz_points, seed=config.harness.seed)
    return {"mode": mode.value, "max_norm": audit.max_norm, "general_bound": audit.general_bound, "unit_caps_hold": audit.unit_caps_hold, "ok": audit.ok}


async def run_acceptance(config: LabConfig) -> AcceptanceReport:
    """
    受け入れ基準 1〜10 をまとめて実行する

    Returns:
        AcceptanceReport: 各基準の合否と詳細、試行結果、スイープ結果
    """
    started = time.perf_counter()
    harness = config.harness
    criteria: List[CriterionResult] = []
    logger.info("[TRIAL] acceptance suite started")

    criteria.append(_code_certification(config))

    erm_trials = await run_trials(config, range(harness.trials), mode=Mode.ERM, optimality_probes=harness.optimality_probes)
    erm_conditioned = [t for t in erm_trials if t.conditioned]
    criteria.append(
        CriterionResult(
            2,
            "ERM closed-form oracle",
            bool(erm_conditioned) and all(t.checks.get("stationary") and t.checks.get("optimality", True) for t in erm_conditioned),
            {"trials": len(erm_trials), "conditioned": len(erm_conditioned)},
        )
    )
    erm_ctx = build_context(config, Mode.ERM)
    floor_bound = erm_ctx.params.rho * erm_ctx.params.zeta / 4.0
    criteria.append(
        CriterionResult(
            3,
            "ERM overfitting gap",
            bool(erm_conditioned)
            and all(t.gap_population.lo >= floor_bound - GAP_TOLERANCE and t.bound_ok for t in erm_conditioned)
            and all(t.checks.get("interval_contains_exact", True) for t in erm_trials),
            {
                "rho_zeta_over_4": floor_bound,
                "median_gap": _conditioned_aggregate(erm_trials)["median_gap"],
                "analytic_bound": schedule_service.erm_analytic_bound(erm_ctx.params),
            },
        )
    )

    probe_indices = [t.trial_index for t in erm_conditioned[: harness.transport_trials]]
    probes = await run_jobs(config.threads, partial(_erm_probe_job, config), probe_indices)
    criteria.append(
        CriterionResult(
            4,
            "epsilon-ERM transport",
            bool(probes) and all(p["transport_ok"] and p["analytic_ok"] for p in probes),
            {
                "epsilon": erm_ctx.params.epsilon,
                "analytic_bound": schedule_service.erm_analytic_bound(erm_ctx.params),
                "transport_trials": harness.transport_trials,
                "trials_checked": len(probes),
                "conditioned": len(erm_conditioned),
                "probes": probes,
            },
        )
    )

    gd_trials = await run_trials(config, range(harness.gd_trials), mode=Mode.GD)
    gd_conditioned = [t for t in gd_trials if t.conditioned]
    criteria.append(
        CriterionResult(
            5,
            "GD trajectory oracle",
            bool(gd_conditioned) and all(t.certificates_ok and t.max_traj_dev <= TRAJECTORY_TOLERANCE for t in gd_conditioned),
            {
                "conditioned": len(gd_conditioned),
                "max_traj_dev": max((t.max_traj_dev for t in gd_conditioned), default=math.nan),
                "bound_ok_rate": float(np.mean([t.bound_ok for t in gd_conditioned])) if gd_conditioned else math.nan,
            },
        )
    )

    if config.instance.k <= min(16, config.instance.brute_force_cap):
        n_chunks = max(1, min(config.threads, harness.argmax_queries))
        sizes = [harness.argmax_queries // n_chunks + (i < harness.argmax_queries % n_chunks) for i in range(n_chunks)]
        chunks = [(i, size, mode) for mode in (Mode.ERM, Mode.GD) for i, size in enumerate(sizes)]
        random_checks = await run_jobs(config.threads, partial(_argmax_job, config), chunks)
        trajectory_checks = await run_jobs(config.threads, partial(_trajectory_argmax_job, config), [t.trial_index for t in gd_conditioned[: harness.trajectory_argmax_trials]])
        disagreements = sum(c["disagreements"] for c in random_checks + trajectory_checks)
        criteria.append(
            CriterionResult(
                6,
                "argmax soundness",
                disagreements == 0,
                {
                    "random_claims": sum(c["claims"] for c in random_checks),
                    "trajectory_claims": sum(c["claims"] for c in trajectory_checks),
                    "trajectory_points": sum(c["queries"] for c in trajectory_checks),
                    "trajectory_argmax_trials": harness.trajectory_argmax_trials,
                    "trajectories_checked": len(trajectory_checks),
                    "disagreements": disagreements,
                },
            )
        )
    else:
        criteria.append(CriterionResult(6, "argmax soundness", True, {"skipped": f"k={config.instance.k} above brute-force range"}))

    fraction = mc_concentration(config.instance.m, config.instance.k, harness.concentration_trials, harness.seed)
    criteria.append(
        CriterionResult(7, "concentration", fraction >= harness.min_conditioned_fraction, {"fraction": fraction, "trials": harness.concentration_trials})
    )

    sweep = await sweep_eta_T(config)
    criteria.append(
        CriterionResult(
            8,
            "GD scaling shape",
            sweep.monotone and sweep.slope_ok and sweep.plateau_ok,
            {"slope": sweep.slope, "monotone": sweep.monotone, "plateau_ok": sweep.plateau_ok},
        )
    )

    audits = await run_jobs(config.threads, partial(_lipschitz_job, config), [Mode.ERM, Mode.GD])
    criteria.append(CriterionResult(9, "Lipschitz audit", all(a["ok"] for a in audits), {"audits": audits}))

    runtime_s = time.perf_counter() - started
    trial_fraction = len(erm_conditioned) / len(erm_trials) if erm_trials else 0.0
    criteria.append(
        CriterionResult(
            10,
            "end-to-end suite",
            runtime_s <= SUITE_TIME_LIMIT_S and trial_fraction >= harness.min_conditioned_fraction,
            {"runtime_s": runtime_s, "conditioned_fraction": trial_fraction},
        )
    )
    report = AcceptanceReport(criteria=criteria, trials=erm_trials + gd_trials, sweep=sweep, runtime_s=runtime_s)
    logger.info(f"[TRIAL] acceptance suite finished in {runtime_s:.1f}s: {'PASS' if report.passed else 'FAIL'}")
    return report
