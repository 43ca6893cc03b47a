"""
乱数ストリームのユーティリティ

(master_seed, trial_index, stream_tag) をキーにしたカウンタベースの
Philox ストリームを作ります。試行の実行順序やワーカー数に依存せず、
同じキーからは常に同じ乱数列が得られます。
"""

import hashlib

import numpy as np


def _tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:4], "little")


def stream(master_seed: int, trial_index: int, tag: str) -> np.random.Generator:
    """キー (master_seed, trial_index, tag) の独立な乱数生成器"""
    seed_seq = np.random.SeedSequence([int(master_seed), int(trial_index), _tag_key(tag)])
    return np.random.Generator(np.random.Philox(seed_seq))
