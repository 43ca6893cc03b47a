"""
テスト共通のフィクスチャ

k = 8（m = 4）の小さな符号をほとんどのテストで使い、
k = 16 の符号は既定設定の確認にだけ使う。
"""

from pathlib import Path

import pytest

from app.code_service import get_code
from app.config import parse_config
from app.feldman_service import FeldmanSpec
from app.instance_service import Mode, RelaxMultipliers, sample_stats
from app.schedule_service import schedule_service


@pytest.fixture(scope="session")
def code8():
    return get_code(8, 0.10, 1, 20)


@pytest.fixture(scope="session")
def code16():
    return get_code(16, 0.10, 1, 20)


@pytest.fixture
def relax():
    return RelaxMultipliers(enabled=True)


@pytest.fixture
def sample8():
    """m = 4, k = 8: インデックス 0 を 2 回、3 と 5 を 1 回"""
    return sample_stats([0, 0, 3, 5], 8)


@pytest.fixture
def erm_setup(code8, relax):
    params = schedule_service.schedule(m=4, rho=code8.rho, mode=Mode.ERM, relax=relax, k=8)
    return code8, params, FeldmanSpec.create(code8, params.zeta)


@pytest.fixture
def gd_setup(code8, relax):
    params = schedule_service.schedule(m=4, rho=code8.rho, mode=Mode.GD, eta=0.05, T=200, relax=relax, k=8)
    return code8, params, FeldmanSpec.create(code8, params.zeta)


@pytest.fixture
def small_overrides(tmp_path: Path):
    return {
        "instance.m": 4,
        "instance.k": 8,
        "gd.T": 200,
        "harness.trials": 4,
        "harness.gd_trials": 4,
        "harness.sweep_trials": 4,
        "harness.concentration_trials": 100,
        "harness.optimality_probes": 20,
        "harness.epsilon_probes": 20,
        "harness.lipschitz_points": 50,
        "harness.argmax_queries": 50,
        "harness.pair_samples": 100,
        "gd.sweep_j_max": 3,
        "threads": 1,
        "out_dir": str(tmp_path / "out"),
    }


@pytest.fixture
def small_config(small_overrides):
    return parse_config(overrides=small_overrides)
