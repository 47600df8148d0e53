"""
觀測管線：請求結果 → 10 秒滑動視窗統計 → 離散化觀測
"""

import bisect
import logging
import threading
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Protocol

import httpx

from ..models.schemas import DiscretizationConfig, RequestStatus, Tier
from ..utils.percentiles import nearest_rank
from .generative_model import ObservationTuple

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class RequestOutcome:
    timestamp: float
    tier: Tier
    status: RequestStatus
    latency_ms: Optional[float] = None

    def __post_init__(self):
        if self.status == RequestStatus.SUCCESS and self.latency_ms is None:
            raise ValueError("成功的請求必須帶有 latency_ms")
        if self.latency_ms is not None and self.latency_ms < 0:
            raise ValueError(f"latency_ms 必須 >= 0: {self.latency_ms}")

    def to_record(self) -> dict:
        return {
            "t": self.timestamp,
            "tier": self.tier.value,
            "status": self.status.value,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RequestOutcome":
        return cls(
            timestamp=float(rec["t"]),
            tier=Tier(rec["tier"]),
            status=RequestStatus(rec["status"]),
            latency_ms=rec.get("latency_ms"),
        )


class WindowStats(NamedTuple):
    p95_ms: float
    rate_rps: float
    queue_depth: float
    error_rate: float


class MetricWindow:
    """
    時間排序的滑動視窗。

    add() 可由多個完成回呼同時呼叫；讀取時在同一把鎖內淘汰並複製，
    保證 window_stats 看到一致的快照。
    """

    def __init__(self, duration: float = 10.0):
        if duration <= 0:
            raise ValueError("duration 必須 > 0")
        self.duration = duration
        self._samples: deque = deque()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._samples)

    def add(self, outcome: RequestOutcome):
        with self._lock:
            # 完成順序可能與時間戳不一致，插入時維持排序
            if self._samples and outcome.timestamp < self._samples[-1].timestamp:
                items = list(self._samples)
                keys = [o.timestamp for o in items]
                items.insert(bisect.bisect_right(keys, outcome.timestamp), outcome)
                self._samples = deque(items)
            else:
                self._samples.append(outcome)

    def _evict(self, now: float):
        cutoff = now - self.duration
        while self._samples and self._samples[0].timestamp < cutoff:
            self._samples.popleft()

    def snapshot(self, now: float) -> List[RequestOutcome]:
        with self._lock:
            self._evict(now)
            return [o for o in self._samples if o.timestamp <= now]


def window_stats(w: MetricWindow, now: float, queue: float = 0.0) -> WindowStats:
    """(p95, rate, queue, error_rate)；空視窗回傳 (0, 0, queue, 0)"""
    samples = w.snapshot(now)
    total = len(samples)
    if total == 0:
        return WindowStats(0.0, 0.0, float(queue), 0.0)
    latencies = [o.latency_ms for o in samples if o.status == RequestStatus.SUCCESS]
    failures = total - len(latencies)
    return WindowStats(
        p95_ms=nearest_rank(latencies, 95),
        rate_rps=total / w.duration,
        queue_depth=float(queue),
        error_rate=failures / max(1, total),
    )


def _bin(value: float, thresholds) -> int:
    # 等於門檻時歸入上一個 bin
    return bisect.bisect_right(thresholds, value)


def discretize(p95: float, rate: float, queue: float, error_rate: float,
               cfg: DiscretizationConfig = DiscretizationConfig()) -> ObservationTuple:
    return ObservationTuple(
        latency_bin=_bin(p95, cfg.latency_thresholds_ms),
        rate_bin=_bin(rate, cfg.rate_thresholds_rps),
        queue_bin=_bin(queue, cfg.queue_thresholds),
        error_bin=_bin(error_rate, (cfg.error_threshold,)),
    )


def discretize_stats(stats: WindowStats, cfg: DiscretizationConfig = DiscretizationConfig()) -> ObservationTuple:
    return discretize(stats.p95_ms, stats.rate_rps, stats.queue_depth, stats.error_rate, cfg)


def discretize_utilization(u: float, cfg: DiscretizationConfig = DiscretizationConfig()) -> int:
    """CPU 使用率 → {0 idle, 1 moderate, 2 saturated}"""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"使用率必須在 [0, 1]: {u}")
    return _bin(u, cfg.utilization_thresholds_fraction)


def discretize_readings(readings: Dict[Tier, float],
                        cfg: DiscretizationConfig = DiscretizationConfig()) -> Dict[Tier, int]:
    return {tier: discretize_utilization(u, cfg) for tier, u in readings.items()}


class UtilizationSource(Protocol):
    async def poll(self) -> Optional[Dict[Tier, float]]:
        ...


class HttpUtilizationSource:
    """從 metrics 端點抓取各層級 CPU 使用率 JSON：{"light":0.42,"medium":0.77,"heavy":0.21}"""

    def __init__(self, url: str, client: Optional[httpx.AsyncClient] = None, timeout: float = 2.0):
        self.url = url
        self._client = client
        self._timeout = timeout
        self.poll_count = 0
        self.error_count = 0

    async def poll(self) -> Optional[Dict[Tier, float]]:
        self.poll_count += 1
        try:
            if self._client is not None:
                resp = await self._client.get(self.url, timeout=self._timeout)
            else:
                async with httpx.AsyncClient(timeout=self._timeout) as client:
                    resp = await client.get(self.url)
            resp.raise_for_status()
            data = resp.json()
            readings = {}
            for tier in Tier:
                if tier.value in data:
                    readings[tier] = min(1.0, max(0.0, float(data[tier.value])))
            return readings or None
        except (httpx.HTTPError, ValueError, TypeError) as e:
            self.error_count += 1
            logger.warning(f"⚠️ 使用率抓取失敗 {self.url}: {e}")
            return None


class TierHealth:
    """
    各層級在一個使用率輪詢週期內的失敗比例，作為 CPU 使用率的補充讀值。

    快速失敗的層級 CPU 閒置，但對路由而言等同飽和；讀值取 max(CPU, 失敗比例)。
    週期內沒有流量的層級沿用上一期的值乘上 decay。
    可直接掛成 Dispatcher 的 outcome sink。
    """

    def __init__(self, decay: float = 0.5):
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay 必須在 [0, 1]: {decay}")
        self.decay = decay
        self._requests: Dict[Tier, int] = {t: 0 for t in Tier}
        self._failures: Dict[Tier, int] = {t: 0 for t in Tier}
        self.failure_ratio: Dict[Tier, float] = {t: 0.0 for t in Tier}
        self._lock = threading.Lock()

    def __call__(self, outcome: RequestOutcome):
        with self._lock:
            self._requests[outcome.tier] += 1
            if outcome.status != RequestStatus.SUCCESS:
                self._failures[outcome.tier] += 1

    def roll(self) -> Dict[Tier, float]:
        """結算本週期並重設計數"""
        with self._lock:
            for tier in Tier:
                n = self._requests[tier]
                if n > 0:
                    self.failure_ratio[tier] = self._failures[tier] / n
                else:
                    self.failure_ratio[tier] *= self.decay
                self._requests[tier] = 0
                self._failures[tier] = 0
            return dict(self.failure_ratio)

    def combine(self, cpu: Dict[Tier, float]) -> Dict[Tier, float]:
        """結算後與 CPU 讀值合併；只回報 cpu 中有的層級"""
        health = self.roll()
        return {tier: max(float(u), health[Tier(tier)]) for tier, u in cpu.items()}
