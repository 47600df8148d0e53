"""
請求分派：依目前權重快照為每個請求獨立抽樣層級，轉發並回報結果

同一個 Dispatcher 同時服務 HTTP 代理模式（dispatch / forward）與模擬模式
（route / begin / complete 由模擬器在虛擬時間內呼叫）。
"""

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import httpx
import numpy as np

from ..models.schemas import TIER_ORDER, RequestStatus, Tier
from .observation import MetricWindow, RequestOutcome

logger = logging.getLogger(__name__)

# RFC 9110 hop-by-hop headers，不轉發
HOP_BY_HOP = {
    "connection", "keep-alive", "proxy-authenticate", "proxy-authorization",
    "te", "trailers", "transfer-encoding", "upgrade",
}


def strip_hop_headers(headers: Mapping[str, str]) -> Dict[str, str]:
    return {k: v for k, v in headers.items() if k.lower() not in HOP_BY_HOP}


@dataclass
class TierEndpoint:
    """層級端點與其 in-flight 計數"""
    tier: Tier
    target: Optional[str] = None  # URL；模擬模式為 None
    timeout_ms: float = 10000.0
    _in_flight: int = field(default=0, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def in_flight(self) -> int:
        return self._in_flight

    def acquire(self):
        with self._lock:
            self._in_flight += 1

    def release(self):
        with self._lock:
            if self._in_flight <= 0:
                raise RuntimeError(f"{self.tier.value} in_flight 計數不平衡")
            self._in_flight -= 1


@dataclass(frozen=True)
class WeightSnapshot:
    weights: Tuple[float, float, float]  # (w_light, w_medium, w_heavy)
    epoch: int = 0

    def __post_init__(self):
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise ValueError(f"權重必須是 3 個非負值: {self.weights}")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"權重總和必須為 1: {self.weights}")

    def as_dict(self) -> Dict[str, float]:
        return {t.value: w for t, w in zip(TIER_ORDER, self.weights)}


class WeightBoard:
    """決策端發布、分派端讀取的權重快照；讀取永不阻塞在推論上"""

    def __init__(self, weights: Sequence[float] = (0.33, 0.33, 0.34)):
        self._lock = threading.Lock()
        self._snapshot = WeightSnapshot(tuple(float(w) for w in weights), 0)

    @property
    def current(self) -> WeightSnapshot:
        return self._snapshot

    def publish(self, weights: Sequence[float]) -> WeightSnapshot:
        with self._lock:
            snap = WeightSnapshot(tuple(float(w) for w in weights), self._snapshot.epoch + 1)
            self._snapshot = snap
        return snap


def choose_tier(w: WeightSnapshot, rng: np.random.Generator) -> Tier:
    """依權重抽樣層級，權重為 0 的層級不會被選中"""
    cum = np.cumsum(w.weights)
    u = rng.random() * cum[-1]
    idx = int(np.searchsorted(cum, u, side="right"))
    return TIER_ORDER[min(idx, len(TIER_ORDER) - 1)]


@dataclass
class ForwardRequest:
    method: str
    path: str
    headers: Dict[str, str] = field(default_factory=dict)
    content: bytes = b""
    params: List[Tuple[str, str]] = field(default_factory=list)


OutcomeSink = Callable[[RequestOutcome], None]


class Dispatcher:
    """每個請求獨立讀取權重快照並抽樣；不重試"""

    def __init__(self, endpoints: Iterable[TierEndpoint], board: WeightBoard, window: MetricWindow,
                 rng: Optional[np.random.Generator] = None, *,
                 client: Optional[httpx.AsyncClient] = None,
                 clock: Callable[[], float] = time.monotonic,
                 sinks: Sequence[OutcomeSink] = ()):
        self.endpoints: Dict[Tier, TierEndpoint] = {e.tier: e for e in endpoints}
        self.board = board
        self.window = window
        self.rng = rng or np.random.default_rng()
        self.client = client
        self.clock = clock
        self.sinks: List[OutcomeSink] = list(sinks)
        self._last_epoch = -1
        self.routed: Dict[Tier, int] = {t: 0 for t in TIER_ORDER}

    def route(self) -> TierEndpoint:
        snap = self.board.current
        if snap.epoch < self._last_epoch:
            raise RuntimeError(f"權重快照 epoch 倒退: {snap.epoch} < {self._last_epoch}")
        self._last_epoch = snap.epoch
        tier = choose_tier(snap, self.rng)
        self.routed[tier] += 1
        return self.endpoints[tier]

    def begin(self, endpoint: TierEndpoint):
        endpoint.acquire()

    def complete(self, endpoint: TierEndpoint, outcome: RequestOutcome):
        """每個請求恰好呼叫一次：平衡計數並回報給觀測管線"""
        endpoint.release()
        self.window.add(outcome)
        for sink in self.sinks:
            sink(outcome)

    @property
    def in_flight_total(self) -> int:
        return sum(e.in_flight for e in self.endpoints.values())

    async def dispatch(self, request: ForwardRequest,
                       endpoint: TierEndpoint) -> Tuple[RequestOutcome, Optional[httpx.Response]]:
        """
        轉發到層級端點。
        2xx → success；逾時 → timeout；連線失敗或非 2xx → error。
        失敗是資料而非例外。
        """
        if self.client is None:
            raise RuntimeError("HTTP 模式需要 httpx.AsyncClient")
        url = endpoint.target.rstrip("/") + "/" + request.path.lstrip("/")
        headers = strip_hop_headers(request.headers)
        headers.pop("host", None)

        self.begin(endpoint)
        started = time.perf_counter()
        response: Optional[httpx.Response] = None
        status, latency = RequestStatus.ERROR, None
        try:
            response = await self.client.request(
                request.method, url, params=request.params, headers=headers,
                content=request.content, timeout=endpoint.timeout_ms / 1000.0,
            )
            elapsed_ms = (time.perf_counter() - started) * 1000.0
            if response.is_success:
                status, latency = RequestStatus.SUCCESS, elapsed_ms
            else:
                status, latency = RequestStatus.ERROR, None
        except httpx.TimeoutException:
            status, latency = RequestStatus.TIMEOUT, None
            logger.debug(f"{endpoint.tier.value} 請求逾時")
        except httpx.HTTPError as e:
            status, latency = RequestStatus.ERROR, None
            logger.debug(f"{endpoint.tier.value} 請求失敗: {e!r}")
        finally:
            # 取消時也要平衡計數
            outcome = RequestOutcome(self.clock(), endpoint.tier, status, latency)
            self.complete(endpoint, outcome)
        return outcome, response

    async def forward(self, request: ForwardRequest) -> Tuple[RequestOutcome, Optional[httpx.Response]]:
        return await self.dispatch(request, self.route())
