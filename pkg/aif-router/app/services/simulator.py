"""
邊緣叢集離散事件模擬器

三個異質層級，各自為單一佇列、多 slot 的服務站；服務時間與核心數成反比，
並可注入 Pod 重啟與強制錯誤區間。虛擬時間單位為秒，延遲單位為毫秒。
事件依 (time, seq) 排序，同時間的事件依加入順序處理。
"""

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Deque, Dict, List, Optional, Tuple

import numpy as np

from ..models.schemas import (
    TIER_ORDER,
    RequestStatus,
    ScenarioSpec,
    Tier,
    TierSpec,
    WorkloadSpec,
)
from .dispatcher import Dispatcher, TierEndpoint, WeightBoard
from .observation import (
    MetricWindow,
    RequestOutcome,
    TierHealth,
    discretize_readings,
    discretize_stats,
    window_stats,
)
from .policy_engine import PolicyEngine

logger = logging.getLogger(__name__)


class EventKind(str, Enum):
    ARRIVAL = "arrival"
    SERVICE_COMPLETE = "service_complete"
    REQUEST_TIMEOUT = "request_timeout"
    RESTART_DOWN = "restart_down"
    RESTART_UP = "restart_up"
    FAST_TICK = "fast_tick"
    SLOW_TICK = "slow_tick"
    UTIL_POLL = "util_poll"


class SimClock:
    """虛擬時鐘；可直接當作 Dispatcher 的 clock"""

    def __init__(self, now: float = 0.0):
        self.now = now

    def __call__(self) -> float:
        return self.now


def service_time(tier: TierSpec, rng: np.random.Generator, reference_cores: float = 8.0) -> float:
    """base · (reference_cores / capacity_cores) · lognormal(0, σ)，單位 ms"""
    jitter = rng.lognormal(0.0, tier.service_jitter) if tier.service_jitter > 0 else 1.0
    return tier.base_service_ms * (reference_cores / tier.capacity_cores) * jitter


def generate_workload(spec: WorkloadSpec, rng: np.random.Generator,
                      duration: Optional[float] = None) -> np.ndarray:
    """
    產生排序後的到達時間。

    burst：on / off 交替，on 期間的 Poisson 速率放大為 target · (on + off) / on，
    使整體平均等於 target_rps；steady：整段固定速率。
    """
    duration = spec.run_duration_s if duration is None else duration
    if spec.pattern == "steady" or spec.burst_off_s == 0:
        phases = [(0.0, duration, spec.target_rps)]
    else:
        cycle = spec.burst_on_s + spec.burst_off_s
        rate_on = spec.target_rps * cycle / spec.burst_on_s
        phases = []
        start = 0.0
        while start < duration:
            phases.append((start, min(start + spec.burst_on_s, duration), rate_on))
            start += cycle

    chunks = []
    for a, b, rate in phases:
        n = rng.poisson(rate * (b - a))
        chunks.append(np.sort(rng.uniform(a, b, n)))
    return np.concatenate(chunks) if chunks else np.empty(0)


@dataclass(slots=True)
class SimRequest:
    id: int
    arrival_s: float
    endpoint: TierEndpoint
    started_s: Optional[float] = None
    done: bool = False


class TierModel:
    """模擬層級的執行期狀態"""

    def __init__(self, spec: TierSpec, reference_cores: float = 8.0):
        self.spec = spec
        self.reference_cores = reference_cores
        self.slots = spec.slots
        self.queue: Deque[SimRequest] = deque()
        self.in_service: Dict[int, SimRequest] = {}
        self.up = True
        self.generation = 0
        self._busy_area = 0.0
        self._last_account = 0.0
        self._down_since: Optional[float] = None
        self.downtime_s = 0.0
        self.restarts = 0

    @property
    def name(self) -> Tier:
        return self.spec.name

    @property
    def busy(self) -> int:
        return len(self.in_service)

    def service_time(self, rng: np.random.Generator) -> float:
        return service_time(self.spec, rng, self.reference_cores)

    def account(self, now: float):
        """累積 busy slot · 秒"""
        self._busy_area += self.busy * (now - self._last_account)
        self._last_account = now

    def utilization(self, now: float, window: float) -> float:
        """上次查詢以來的 slot 忙碌比例"""
        self.account(now)
        u = self._busy_area / (self.slots * window) if window > 0 else 0.0
        self._busy_area = 0.0
        return min(1.0, max(0.0, u))

    def fault_probability(self, now: float) -> float:
        for fw in self.spec.fault_windows:
            if fw.start_s <= now < fw.end_s:
                return fw.error_probability
        return 0.0

    def mark_down(self, now: float):
        self.up = False
        self.generation += 1
        self.restarts += 1
        self._down_since = now

    def mark_up(self, now: float):
        self.up = True
        if self._down_since is not None:
            self.downtime_s += now - self._down_since
        self._down_since = None

    def downtime_until(self, now: float) -> float:
        extra = now - self._down_since if self._down_since is not None else 0.0
        return self.downtime_s + extra


@dataclass
class SimulationResult:
    outcomes: List[RequestOutcome]
    arrivals: int
    duration_s: float
    end_time_s: float
    weight_history: List[Tuple[float, Tuple[float, float, float]]] = field(default_factory=list)
    mode_history: List[Tuple[float, str]] = field(default_factory=list)
    error_rate_history: List[Tuple[float, float]] = field(default_factory=list)
    downtime_s: Dict[str, float] = field(default_factory=dict)
    restarts: Dict[str, int] = field(default_factory=dict)
    routed: Dict[str, int] = field(default_factory=dict)


class EdgeSimulator:
    """
    單執行緒的虛擬時間模擬；引擎與分派器在同一個時鐘下運作。

    engine 為 None 時權重固定為 board 的初始值（baseline / capacity 策略）。
    """

    def __init__(self, scenario: ScenarioSpec, board: WeightBoard,
                 engine: Optional[PolicyEngine] = None, *, seed: int = 0,
                 duration_s: Optional[float] = None, window_s: float = 10.0):
        self.scenario = scenario
        self.board = board
        self.engine = engine
        self.duration = duration_s if duration_s is not None else scenario.workload.run_duration_s
        self.timeout_s = scenario.timeout_ms / 1000.0

        (workload_seq, route_seq, service_seq,
         restart_seq, fault_seq) = np.random.SeedSequence(seed).spawn(5)
        self.workload_rng = np.random.default_rng(workload_seq)
        self.service_rng = np.random.default_rng(service_seq)
        self.restart_rng = np.random.default_rng(restart_seq)
        self.fault_rng = np.random.default_rng(fault_seq)

        self.clock = SimClock()
        self.window = MetricWindow(window_s)
        self.tiers: Dict[Tier, TierModel] = {
            t.name: TierModel(t, scenario.reference_cores) for t in scenario.tiers
        }
        self.health = TierHealth()
        endpoints = [TierEndpoint(t, None, scenario.timeout_ms) for t in TIER_ORDER]
        self.dispatcher = Dispatcher(endpoints, board, self.window,
                                     np.random.default_rng(route_seq), clock=self.clock,
                                     sinks=[self.health])

        self._events: List[Tuple[float, int, EventKind, Any]] = []
        self._seq = 0
        self._next_request_id = 0
        self._unresolved = 0
        self._pending_util: Optional[Dict[Tier, int]] = None
        self._last_util_poll = 0.0
        self.arrivals = 0
        self.outcomes: List[RequestOutcome] = []
        self.weight_history: List[Tuple[float, Tuple[float, float, float]]] = []
        self.error_rate_history: List[Tuple[float, float]] = []
        self._scheduled = False

    # ---- 事件佇列 ---------------------------------------------------------

    def _push(self, t: float, kind: EventKind, payload: Any = None):
        heapq.heappush(self._events, (t, self._seq, kind, payload))
        self._seq += 1

    def schedule_initial(self):
        """到達事件、週期事件（util_poll → fast_tick → slow_tick 同時間依此順序）、首次重啟"""
        if self._scheduled:
            return
        self._scheduled = True
        for t in generate_workload(self.scenario.workload, self.workload_rng, self.duration):
            self._push(float(t), EventKind.ARRIVAL)

        cfg = self.scenario.engine
        periodic = [
            (self.scenario.util_poll_period_s, EventKind.UTIL_POLL),
            (cfg.fast_period_s, EventKind.FAST_TICK),
            (cfg.slow_period_s, EventKind.SLOW_TICK),
        ]
        ticks = []
        for period, kind in periodic:
            k = 1
            while k * period <= self.duration + 1e-9:
                ticks.append((round(k * period, 9), kind))
                k += 1
        order = {kind: i for i, (_, kind) in enumerate(periodic)}
        for t, kind in sorted(ticks, key=lambda x: (x[0], order[x[1]])):
            self._push(t, kind)

        for tier in self.tiers.values():
            if tier.spec.restart is not None:
                self._push(self.restart_rng.exponential(tier.spec.restart.mean_up_s),
                           EventKind.RESTART_DOWN, tier.name)

    # ---- 主迴圈 -----------------------------------------------------------

    def step(self) -> List[RequestOutcome]:
        """處理最早的事件，回傳這一步產生的結果"""
        t, _, kind, payload = heapq.heappop(self._events)
        self.clock.now = t
        before = len(self.outcomes)
        handler = getattr(self, f"_on_{kind.value}")
        handler(payload)
        return self.outcomes[before:]

    def run(self) -> SimulationResult:
        self.schedule_initial()
        while self._events:
            t = self._events[0][0]
            if t > self.duration and self._unresolved == 0:
                break
            self.step()
        end = max(self.clock.now, self.duration)
        logger.debug(f"模擬結束 t={end:.1f}s，到達 {self.arrivals}，結果 {len(self.outcomes)}")
        return SimulationResult(
            outcomes=self.outcomes,
            arrivals=self.arrivals,
            duration_s=self.duration,
            end_time_s=end,
            weight_history=self.weight_history,
            mode_history=list(self.engine.state.mode_changes) if self.engine else [],
            error_rate_history=self.error_rate_history,
            downtime_s={t.value: m.downtime_until(self.duration) for t, m in self.tiers.items()},
            restarts={t.value: m.restarts for t, m in self.tiers.items()},
            routed={t.value: n for t, n in self.dispatcher.routed.items()},
        )

    # ---- 請求生命週期 -----------------------------------------------------

    def _resolve(self, req: SimRequest, status: RequestStatus, latency_ms: Optional[float] = None):
        req.done = True
        self._unresolved -= 1
        outcome = RequestOutcome(self.clock.now, req.endpoint.tier, status, latency_ms)
        self.dispatcher.complete(req.endpoint, outcome)
        self.outcomes.append(outcome)

    def _start_service(self, tier: TierModel, req: SimRequest):
        now = self.clock.now
        tier.account(now)
        req.started_s = now
        tier.in_service[req.id] = req
        done_at = now + tier.service_time(self.service_rng) / 1000.0
        self._push(done_at, EventKind.SERVICE_COMPLETE, (tier.name, req, tier.generation))

    def _on_arrival(self, _payload):
        now = self.clock.now
        endpoint = self.dispatcher.route()
        self.dispatcher.begin(endpoint)
        req = SimRequest(self._next_request_id, now, endpoint)
        self._next_request_id += 1
        self.arrivals += 1
        self._unresolved += 1
        tier = self.tiers[endpoint.tier]

        if not tier.up:
            self._resolve(req, RequestStatus.ERROR)
            return
        p = tier.fault_probability(now)
        if p > 0 and self.fault_rng.random() < p:
            self._resolve(req, RequestStatus.ERROR)
            return

        if tier.busy < tier.slots:
            self._start_service(tier, req)
        elif len(tier.queue) < tier.spec.queue_capacity:
            tier.queue.append(req)
        else:
            self._resolve(req, RequestStatus.ERROR)
            return
        self._push(now + self.timeout_s, EventKind.REQUEST_TIMEOUT, req)

    def _on_service_complete(self, payload):
        tier_name, req, generation = payload
        tier = self.tiers[tier_name]
        if generation != tier.generation:
            return
        now = self.clock.now
        tier.account(now)
        tier.in_service.pop(req.id, None)
        if not req.done:
            self._resolve(req, RequestStatus.SUCCESS, (now - req.arrival_s) * 1000.0)
        while tier.queue and tier.busy < tier.slots:
            nxt = tier.queue.popleft()
            if not nxt.done:
                self._start_service(tier, nxt)

    def _on_request_timeout(self, req: SimRequest):
        if req.done:
            return
        tier = self.tiers[req.endpoint.tier]
        if req.started_s is None:
            try:
                tier.queue.remove(req)
            except ValueError:
                pass
        # 服務中的請求繼續佔用 slot 直到完成
        self._resolve(req, RequestStatus.TIMEOUT)

    def _on_restart_down(self, tier_name: Tier):
        now = self.clock.now
        tier = self.tiers[tier_name]
        tier.account(now)
        tier.mark_down(now)
        failed = list(tier.in_service.values()) + list(tier.queue)
        tier.in_service.clear()
        tier.queue.clear()
        for req in failed:
            if not req.done:
                self._resolve(req, RequestStatus.ERROR)
        logger.debug(f"{tier_name.value} 重啟 t={now:.1f}s，失敗 {len(failed)} 個請求")
        self._push(now + tier.spec.restart.down_duration_s, EventKind.RESTART_UP, tier_name)

    def _on_restart_up(self, tier_name: Tier):
        now = self.clock.now
        tier = self.tiers[tier_name]
        tier.account(now)
        tier.mark_up(now)
        self._push(now + self.restart_rng.exponential(tier.spec.restart.mean_up_s),
                   EventKind.RESTART_DOWN, tier_name)

    # ---- 週期事件 ---------------------------------------------------------

    def _on_util_poll(self, _payload):
        now = self.clock.now
        period = now - self._last_util_poll
        self._last_util_poll = now
        readings = {name: tier.utilization(now, period) for name, tier in self.tiers.items()}
        readings = self.health.combine(readings)
        self._pending_util = discretize_readings(readings, self.scenario.discretization)

    def _on_fast_tick(self, _payload):
        now = self.clock.now
        stats = window_stats(self.window, now, self.dispatcher.in_flight_total)
        self.error_rate_history.append((now, stats.error_rate))
        if self.engine is not None:
            obs = discretize_stats(stats, self.scenario.discretization)
            util, self._pending_util = self._pending_util, None
            policy = self.engine.fast_tick(obs, util, now=now, error_rate=stats.error_rate)
            self.board.publish(policy.weights)
        self.weight_history.append((now, self.board.current.weights))

    def _on_slow_tick(self, _payload):
        if self.engine is not None:
            self.engine.slow_tick(self.clock.now)
