"""
有状态检测器

每个账号维护一个嵌入缓冲区；新查询与缓冲区中 k 个最近邻的平均距离低于 ρ 时
判定为攻击、计数并清空缓冲区。阈值在良性数据的无重置流上按目标误报率标定。
"""
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from reprogram_lab.data import LabeledDataset
from reprogram_lab.encoder import SimilarityEncoder, embed
from reprogram_lab.errors import ConfigError, InvariantError, StatsError
from reprogram_lab.models import QueryRecord
from reprogram_lab.numkernel import SeedLike, Tensor, make_rng

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["account", "query_index", "buffer_size_before", "mean_knn_distance", "verdict"]


class Verdict(Enum):
    """单次查询的判定结果"""
    PASS = "pass"
    FLAGGED = "flagged"


@dataclass(frozen=True)
class DetectorConfig:
    """ρ = 0 表示检测器关闭（永不报警）"""

    k: int
    rho: float
    encoder: Optional[SimilarityEncoder] = None
    ban_on_detect: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k 必须 >= 1: {self.k}")
        if not np.isfinite(self.rho) or self.rho < 0:
            raise ConfigError(f"ρ 必须是有限非负数: {self.rho}")

    @property
    def enabled(self) -> bool:
        return self.rho > 0


class DetectorState:
    """单个账号的缓冲区（无上限，按需扩容）与计数器"""

    def __init__(self, queries: int = 0, detections: int = 0):
        self.queries = queries
        self.detections = detections
        self._buffer: Optional[Tensor] = None
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def buffer(self) -> Tensor:
        if self._buffer is None:
            return np.zeros((0, 0))
        return self._buffer[:self._size]

    def append(self, embedding: Tensor) -> None:
        if self._buffer is None:
            self._buffer = np.zeros((16, embedding.size))
        elif self._size == self._buffer.shape[0]:
            grown = np.zeros((2 * self._size, self._buffer.shape[1]))
            grown[:self._size] = self._buffer
            self._buffer = grown
        self._buffer[self._size] = embedding
        self._size += 1

    def clear(self) -> None:
        self._size = 0


@dataclass(frozen=True)
class DetectionStats:
    queries: int
    detections: int
    k: int
    sigma: float
    sigma_star: float


def mean_knn_distance(buffer: Tensor, embedding: Tensor, k: int) -> float:
    """embedding 与缓冲区中 k 个最近邻的平均 L2 距离"""
    distances = np.linalg.norm(buffer - embedding[None, :], axis=1)
    if distances.size > k:
        distances = np.partition(distances, k - 1)[:k]
    return float(np.mean(distances))


def observe_embedding(state: DetectorState, cfg: DetectorConfig,
                      embedding: Tensor) -> Tuple[Verdict, Optional[float]]:
    """处理一个已嵌入的查询，返回（判定, 平均近邻距离；预热阶段为 None）"""
    embedding = np.asarray(embedding, dtype=np.float64).reshape(-1)
    state.queries += 1
    if len(state) < cfg.k:
        state.append(embedding)
        return Verdict.PASS, None

    distance = mean_knn_distance(state.buffer, embedding, cfg.k)
    if cfg.enabled and distance < cfg.rho:
        state.detections += 1
        state.clear()
        verdict = Verdict.FLAGGED
    else:
        state.append(embedding)
        verdict = Verdict.PASS
    if state.detections > state.queries // (cfg.k + 1):
        raise InvariantError(f"D={state.detections} 超过上界 ⌊Q/(k+1)⌋={state.queries // (cfg.k + 1)}")
    return verdict, distance


def observe(state: DetectorState, cfg: DetectorConfig, x: Tensor) -> Verdict:
    """嵌入原始查询后判定"""
    if cfg.encoder is None:
        raise ConfigError("检测器配置缺少相似度编码器")
    verdict, _ = observe_embedding(state, cfg, embed(cfg.encoder, x))
    return verdict


def reset(state: DetectorState, preserve_counters: bool = True) -> DetectorState:
    """清空缓冲区；preserve_counters=False 时视为新账号，计数器归零"""
    if preserve_counters:
        return DetectorState(state.queries, state.detections)
    return DetectorState()


def detection_stats(queries: int, detections: int, k: int) -> DetectionStats:
    """σ = D/Q，σ* = (k+1)·σ"""
    if queries <= 0:
        raise StatsError("Q = 0 时检测统计量无定义")
    sigma = detections / queries
    return DetectionStats(queries, detections, k, sigma, (k + 1) * sigma)


def stats(state: DetectorState, k: int) -> DetectionStats:
    return detection_stats(state.queries, state.detections, k)


class StatefulDetector:
    """挂在 QueryChannel 上的观察者：每个账号一个状态机，记录检测日志"""

    def __init__(self, cfg: DetectorConfig, keep_log: bool = True):
        if cfg.encoder is None:
            raise ConfigError("检测器配置缺少相似度编码器")
        self.cfg = cfg
        self.keep_log = keep_log
        self.states: Dict[int, DetectorState] = {}
        self.log: List[tuple] = []
        self._lock = threading.Lock()

    def _state(self, account: int) -> DetectorState:
        with self._lock:
            return self.states.setdefault(account, DetectorState())

    def notify(self, record: QueryRecord) -> bool:
        """返回 True 表示应封禁该账号"""
        state = self._state(record.account)
        size_before = len(state)
        verdict, distance = observe_embedding(state, self.cfg, embed(self.cfg.encoder, record.input))
        if self.keep_log:
            with self._lock:
                self.log.append((record.account, record.sequence_index, size_before,
                                 "warmup" if distance is None else distance, verdict.value))
        if verdict is Verdict.FLAGGED:
            logger.debug("账号 %d 第 %d 次查询被判定为攻击", record.account, record.sequence_index)
        return verdict is Verdict.FLAGGED and self.cfg.ban_on_detect

    def totals(self, accounts: Optional[List[int]] = None) -> Tuple[int, int]:
        """(Q, D) 汇总"""
        chosen = [self.states[a] for a in (accounts if accounts is not None else self.states) if a in self.states]
        return sum(s.queries for s in chosen), sum(s.detections for s in chosen)

    def stats(self, accounts: Optional[List[int]] = None) -> DetectionStats:
        queries, detections = self.totals(accounts)
        return detection_stats(queries, detections, self.cfg.k)

    def reset_account(self, account: int, preserve_counters: bool = True) -> None:
        with self._lock:
            if account in self.states:
                self.states[account] = reset(self.states[account], preserve_counters)

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.log, columns=LOG_COLUMNS)

    def write_log(self, path: str) -> None:
        self.log_frame().to_csv(path, index=False)


@dataclass
class CalibrationReport:
    k: int
    target_fpr: float
    rho: float
    achieved_fpr: float
    distances: Tensor = field(repr=False, default_factory=lambda: np.zeros(0))

    def as_row(self) -> Dict[str, float]:
        return {"k": self.k, "target_fpr": self.target_fpr, "rho": self.rho, "achieved_fpr": self.achieved_fpr}


def no_reset_distances(embeddings: Tensor, k: int) -> Tensor:
    """按顺序流式处理：第 k+1 个起，每个嵌入与此前所有嵌入的 k 近邻平均距离"""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    return np.array([mean_knn_distance(embeddings[:i], embeddings[i], k) for i in range(k, len(embeddings))])


def threshold_from_distances(distances: Tensor, target_fpr: float) -> float:
    """下尾分位数：严格小于 ρ 的距离个数不超过 ⌊fpr·m⌋"""
    ordered = np.sort(np.asarray(distances, dtype=np.float64))
    m = ordered.size
    if m == 0:
        raise ConfigError("没有可用于标定的距离")
    allowed = int(np.floor(target_fpr * m))
    if allowed == 0:
        return float(ordered[0])
    if allowed >= m:
        return float(np.nextafter(ordered[-1], np.inf))
    return float(ordered[allowed])


def calibrate_threshold(encoder: SimilarityEncoder, benign: LabeledDataset, k: int, target_fpr: float,
                        seed: SeedLike) -> CalibrationReport:
    """把良性样本按随机顺序无重置地流过检测器，取距离的 target_fpr 下尾分位数作为 ρ"""
    if len(benign) <= k:
        raise ConfigError(f"标定需要多于 k={k} 个良性样本，实际 {len(benign)}")
    if not 0.0 <= target_fpr <= 1.0:
        raise ConfigError(f"target_fpr 必须位于 [0, 1]: {target_fpr}")
    order = make_rng(seed).permutation(len(benign))
    distances = no_reset_distances(embed(encoder, benign.samples[order]), k)
    rho = threshold_from_distances(distances, target_fpr)
    achieved = float(np.mean(distances < rho))
    logger.info("检测阈值标定: k=%d, 目标误报率=%.4f, ρ=%.6f, 实际误报率=%.4f", k, target_fpr, rho, achieved)
    return CalibrationReport(k, target_fpr, rho, achieved, distances)


def restream_fpr(encoder: SimilarityEncoder, benign: LabeledDataset, k: int, rho: float, seed: SeedLike) -> float:
    """以给定 ρ 在无重置流上复测误报率"""
    order = make_rng(seed).permutation(len(benign))
    distances = no_reset_distances(embed(encoder, benign.samples[order]), k)
    return float(np.mean(distances < rho)) if distances.size else 0.0
