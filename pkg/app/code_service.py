"""
二値符号 G のサービスモジュール

組織符号 [I | M] のランダム構成、全数検証による相対距離の証明、
符号化、ビットパック表に対する相関スキャンを提供します。

ビット規約: +1 ↔ GF(2) の 0、−1 ↔ GF(2) の 1。
符号語 j は 64bit ワード 1 個に格納され、下位 k ビットがメッセージ
（j 自身）、上位 k ビットがパリティです。
"""

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

CODE_FORMAT_VERSION = 1
MAX_K = 28
_MAGIC = b"SCOC"
_HEADER = struct.Struct("<4sHHqdd")

# SWAR popcount 用の定数
_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)

# バイト値 → 8 ビットの展開表
_BYTE_BITS = ((np.arange(256)[:, None] >> np.arange(8)[None, :]) & 1).astype(np.float64)


class CodeConstructionError(RuntimeError):
    """リトライ上限までに目標距離の符号が見つからなかった"""

    def __init__(self, message: str, best_rho: float):
        super().__init__(message)
        self.best_rho = best_rho


class CodeFormatError(ValueError):
    """符号ファイルのヘッダや内容が不正"""


@dataclass(frozen=True, eq=False)
class BinaryCode:
    k: int
    generator: np.ndarray  # k×2k, uint8, [I | M]
    codeword_table: np.ndarray  # 2^k 個の uint64
    rho: float
    target_rho: float
    seed: int
    zero_maps_to_zero: bool = True  # G(0) = 0 の拡張（表には載せない）
    parity_rows: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return 2 * self.k

    @property
    def size(self) -> int:
        return self.codeword_table.shape[0]

    @property
    def parity_matrix(self) -> np.ndarray:
        return self.generator[:, self.k :]

    def fingerprint(self) -> str:
        return hashlib.sha256(np.packbits(self.parity_matrix).tobytes()).hexdigest()


def popcount64(words: np.ndarray) -> np.ndarray:
    """SWAR による 64bit popcount"""
    x = np.asarray(words, dtype=np.uint64).copy()
    x -= (x >> np.uint64(1)) & _M1
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    x *= _H01
    x >>= np.uint64(56)
    return x


def _pack_rows(matrix: np.ndarray) -> np.ndarray:
    weights = np.uint64(1) << np.arange(matrix.shape[1], dtype=np.uint64)
    return (matrix.astype(np.uint64) * weights).sum(axis=1).astype(np.uint64)


def _build_table(parity_rows: np.ndarray, k: int) -> np.ndarray:
    """線形性を使って 2^k 個のパリティを倍々で埋める"""
    parity = np.zeros(1 << k, dtype=np.uint64)
    for i in range(k):
        half = 1 << i
        parity[half : 2 * half] = parity[:half] ^ parity_rows[i]
    messages = np.arange(1 << k, dtype=np.uint64)
    return messages | (parity << np.uint64(k))


def _signed_sums(words: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """
    各ワードについて Σ_b sign_b · weights[b] を計算する（sign_b = 1 − 2·bit_b）

    バイト単位の参照表でビットを展開するので、表のスキャンは
    ceil(nbits/8) 回のギャザーで済む。
    """
    nbits = weights.shape[0]
    nbytes = (nbits + 7) // 8
    padded = np.zeros(8 * nbytes)
    padded[:nbits] = weights
    set_sum = np.zeros(words.shape[0])
    for p in range(nbytes):
        lut = _BYTE_BITS @ padded[8 * p : 8 * p + 8]
        byte = ((words >> np.uint64(8 * p)) & np.uint64(0xFF)).astype(np.intp)
        set_sum += lut[byte]
    return padded.sum() - 2.0 * set_sum


class CodeService:
    def __init__(self, max_k: int = MAX_K):
        self.max_k = max_k

    def from_parity_matrix(self, parity_matrix: np.ndarray, seed: int = 0, target_rho: float = 0.0) -> BinaryCode:
        """パリティ行列 M から符号を組み立て、相対距離を全数検証する"""
        parity_matrix = np.asarray(parity_matrix, dtype=np.uint8) & 1
        k = parity_matrix.shape[0]
        if parity_matrix.shape != (k, k):
            raise CodeFormatError(f"parity matrix must be k×k, got {parity_matrix.shape}")
        if not 1 <= k <= self.max_k:
            raise CodeFormatError(f"k must be in [1, {self.max_k}], got {k}")
        generator = np.concatenate([np.eye(k, dtype=np.uint8), parity_matrix], axis=1)
        parity_rows = _pack_rows(parity_matrix)
        table = _build_table(parity_rows, k)
        code = BinaryCode(
            k=k,
            generator=generator,
            codeword_table=table,
            rho=0.0,
            target_rho=target_rho,
            seed=seed,
            parity_rows=parity_rows,
        )
        return replace(code, rho=self.verify_relative_distance(code))

    def build_code(self, k: int, target_rho: float = 0.10, seed: int = 1, max_retries: int = 20) -> BinaryCode:
        """
        ランダムな組織線形符号 [I | M] を構成する

        Args:
            k: メッセージ長（2 ≤ k ≤ 28）
            target_rho: 目標相対距離（0 < ρ < 1/2）
            seed: M を生成する乱数シード
            max_retries: 試行回数の上限

        Returns:
            BinaryCode: 測定された相対距離 ρ ≥ target_rho の符号
        """
        if not 2 <= k <= self.max_k:
            raise ValueError(f"k must be in [2, {self.max_k}], got {k}")
        if not 0.0 < target_rho < 0.5:
            raise ValueError(f"target_rho must be in (0, 1/2), got {target_rho}")

        required_weight = math.ceil(target_rho * 2 * k - 1e-9)
        rng = np.random.default_rng(seed)
        best_rho = 0.0
        for attempt in range(1, max_retries + 1):
            parity_matrix = rng.integers(0, 2, size=(k, k), dtype=np.uint8)
            code = self.from_parity_matrix(parity_matrix, seed=seed, target_rho=target_rho)
            best_rho = max(best_rho, code.rho)
            if round(code.rho * 2 * k) >= required_weight:
                logger.info(f"[CODE] built k={k} rho={code.rho:.4f} (target {target_rho}) after {attempt} attempt(s)")
                return code
            logger.debug(f"[CODE] attempt {attempt} rejected: rho={code.rho:.4f}")

        logger.error(f"[CODE] construction failed for k={k}, target {target_rho}: best rho={best_rho:.4f}")
        raise CodeConstructionError(
            f"no code with relative distance >= {target_rho} after {max_retries} attempts (best {best_rho:.4f})",
            best_rho=best_rho,
        )

    def verify_relative_distance(self, code: BinaryCode) -> float:
        """線形符号なので非ゼロ符号語の最小重み / 2k が対距離の最小値に等しい"""
        if code.size < 2:
            return 0.0
        weights = popcount64(code.codeword_table[1:])
        return float(weights.min()) / code.n

    def message_index(self, code: BinaryCode, v: np.ndarray) -> int:
        """±1 メッセージ → 表のインデックス（v(i) = −1 のビットが立つ）"""
        v = np.asarray(v)
        if v.shape != (code.k,) or not np.all(np.isin(v, (-1, 1))):
            raise ValueError(f"message must be a ±1 vector of length {code.k}")
        bits = (v == -1).astype(np.int64)
        return int((bits << np.arange(code.k)).sum())

    def message_of(self, code: BinaryCode, index: int) -> np.ndarray:
        bits = (int(index) >> np.arange(code.k)) & 1
        return (1 - 2 * bits).astype(np.float64)

    def codeword_signs(self, code: BinaryCode, index: int) -> np.ndarray:
        word = int(code.codeword_table[index])
        bits = (word >> np.arange(code.n)) & 1
        return (1 - 2 * bits).astype(np.float64)

    def codeword_unit(self, code: BinaryCode, index: int) -> np.ndarray:
        """x̄_j = x_j / √(2k)"""
        return self.codeword_signs(code, index) / math.sqrt(code.n)

    def encode(self, code: BinaryCode, v: np.ndarray) -> np.ndarray:
        """
        G(v) を ±1 ベクトルで返す。v = 0 は G(0) = 0 の拡張に従う
        """
        v = np.asarray(v, dtype=np.float64)
        if v.shape == (code.k,) and code.zero_maps_to_zero and not np.any(v):
            return np.zeros(code.n)
        return self.codeword_signs(code, self.message_index(code, v))

    def encode_unit(self, code: BinaryCode, v: np.ndarray) -> np.ndarray:
        """Ḡ(v)"""
        return self.encode(code, v) / math.sqrt(code.n)

    def correlation_scan(self, code: BinaryCode, wc: np.ndarray) -> np.ndarray:
        """
        全符号語との相関 scores[j] = ⟨wc, x̄_j⟩ を一回のスキャンで計算する
        """
        wc = np.asarray(wc, dtype=np.float64)
        if wc.shape != (code.n,):
            raise ValueError(f"wc must have length {code.n}, got {wc.shape}")
        if not np.all(np.isfinite(wc)):
            raise ValueError("wc must be finite")
        if not np.any(wc):
            return np.zeros(code.size)
        return _signed_sums(code.codeword_table, wc) / math.sqrt(code.n)

    def message_scan(self, code: BinaryCode, wm: np.ndarray) -> np.ndarray:
        """全メッセージ v_j について ⟨v_j, wm⟩（組織符号の下位 k ビットを使う）"""
        wm = np.asarray(wm, dtype=np.float64)
        if wm.shape != (code.k,):
            raise ValueError(f"wm must have length {code.k}, got {wm.shape}")
        if not np.any(wm):
            return np.zeros(code.size)
        return _signed_sums(code.codeword_table, wm)

    def save(self, code: BinaryCode, path: Path) -> Path:
        """ヘッダ (magic, version, k, seed, rho, target_rho) + M の行優先パックビット"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = _HEADER.pack(_MAGIC, CODE_FORMAT_VERSION, code.k, code.seed, code.rho, code.target_rho)
        path.write_bytes(header + np.packbits(code.parity_matrix, axis=None).tobytes())
        logger.info(f"[CODE] saved k={code.k} rho={code.rho:.4f} to {path}")
        return path

    def load(self, path: Path) -> BinaryCode:
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise CodeFormatError(f"{path}: file too short for header")
        magic, version, k, seed, rho, target_rho = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise CodeFormatError(f"{path}: bad magic {magic!r}")
        if version != CODE_FORMAT_VERSION:
            raise CodeFormatError(f"{path}: unsupported format version {version}")
        payload = np.frombuffer(raw[_HEADER.size :], dtype=np.uint8)
        if payload.shape[0] != (k * k + 7) // 8:
            raise CodeFormatError(f"{path}: payload length {payload.shape[0]} does not match k={k}")
        parity_matrix = np.unpackbits(payload, count=k * k).reshape(k, k)
        code = self.from_parity_matrix(parity_matrix, seed=seed, target_rho=target_rho)
        if code.rho != rho:
            raise CodeFormatError(f"{path}: recorded rho {rho} but verification gives {code.rho}")
        return code


# シングルトンインスタンス
code_service = CodeService()


@lru_cache(maxsize=8)
def get_code(k: int, target_rho: float, seed: int, max_retries: int, path: Optional[str] = None) -> BinaryCode:
    """ワーカープロセスごとに符号を一度だけ構成（またはロード）する"""
    if path:
        return code_service.load(Path(path))
    return code_service.build_code(k, target_rho=target_rho, seed=seed, max_retries=max_retries)
