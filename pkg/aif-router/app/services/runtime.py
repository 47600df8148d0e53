"""
即時代理模式的執行期組裝：引擎、權重看板、分派器與三個背景迴圈
"""

import asyncio
import logging
import time
from typing import Awaitable, Callable, Dict, Optional

import httpx
import numpy as np

from ..models.errors import ConfigurationError
from ..models.schemas import TIER_ORDER, ServeConfig, Tier
from .dispatcher import Dispatcher, TierEndpoint, WeightBoard
from .generative_model import belief_entropy, belief_marginals, decode_state
from .model_store import load_model
from .observation import (
    HttpUtilizationSource,
    MetricWindow,
    TierHealth,
    discretize_readings,
    discretize_stats,
    window_stats,
)
from .policy_engine import PolicyEngine, base_preferences

logger = logging.getLogger(__name__)

Broadcaster = Callable[[dict], Awaitable[None]]


class RouterRuntime:
    """serve 模式的服務集合"""

    def __init__(self, config: ServeConfig, *, transport: Optional[httpx.AsyncBaseTransport] = None,
                 clock: Callable[[], float] = time.monotonic):
        names = sorted(t.name.value for t in config.tiers)
        if names != sorted(t.value for t in Tier):
            raise ConfigurationError(f"serve 模式需要 light/medium/heavy 三個層級端點，收到 {names}")
        self.config = config
        self.clock = clock

        engine_cfg = config.engine_config()
        model = None
        if config.model_in:
            model = load_model(config.model_in, preferences=base_preferences(engine_cfg))
        self.engine = PolicyEngine(
            engine_cfg, model,
            discretization=config.discretization,
            trace_path=config.trace_path,
            experience_log_path=config.experience_log_path,
            start_time=clock(),
        )
        self.board = WeightBoard(self.engine.weights)
        self.window = MetricWindow(config.window_s)
        self.health = TierHealth()
        self.client = httpx.AsyncClient(transport=transport)
        route_seed = np.random.SeedSequence([engine_cfg.rng_seed, 1])
        self.dispatcher = Dispatcher(
            [TierEndpoint(t.name, t.url, t.timeout_ms) for t in config.tiers],
            self.board, self.window, np.random.default_rng(route_seed),
            client=self.client, clock=clock, sinks=[self.health],
        )
        self.util_source = HttpUtilizationSource(config.metrics_url, self.client) if config.metrics_url else None
        self._pending_util: Optional[Dict[Tier, int]] = None
        self.broadcast: Optional[Broadcaster] = None
        self.started_at = time.time()
        self.tick_errors = 0

    # ---- 單步（可直接測試） -------------------------------------------------

    def decision_step(self, now: Optional[float] = None) -> dict:
        """一次快迴圈：視窗統計 → 離散化 → 引擎 → 發布權重"""
        now = self.clock() if now is None else now
        stats = window_stats(self.window, now, self.dispatcher.in_flight_total)
        obs = discretize_stats(stats, self.config.discretization)
        util, self._pending_util = self._pending_util, None
        policy = self.engine.fast_tick(obs, util, now=now, error_rate=stats.error_rate)
        snap = self.board.publish(policy.weights)
        return {
            "t": now,
            "obs": list(obs),
            "policy": policy.id,
            "weights": snap.as_dict(),
            "epoch": snap.epoch,
            "mode": self.engine.state.mode,
            "error_rate": stats.error_rate,
            "p95_ms": stats.p95_ms,
            "rate_rps": stats.rate_rps,
        }

    def ingest_utilization(self, readings: Dict[Tier, float]):
        """CPU 讀值與本週期的失敗比例取大者後離散化"""
        readings = self.health.combine(readings)
        self._pending_util = discretize_readings(readings, self.config.discretization)

    # ---- 背景迴圈 -----------------------------------------------------------

    async def decision_loop(self):
        period = self.config.engine.fast_period_s
        logger.info(f"🧠 決策迴圈啟動（每 {period}s）")
        while True:
            try:
                record = self.decision_step()
                if self.broadcast is not None:
                    await self.broadcast(record)
            except asyncio.CancelledError:
                raise
            except Exception as e:
                # 權重保持上一個有效快照
                self.tick_errors += 1
                logger.error(f"❌ 決策迴圈錯誤: {e}")
            await asyncio.sleep(period)

    async def learning_loop(self):
        period = self.config.engine.slow_period_s
        logger.info(f"📚 學習迴圈啟動（每 {period}s）")
        while True:
            await asyncio.sleep(period)
            try:
                await asyncio.to_thread(self.engine.slow_tick, self.clock())
            except Exception as e:
                logger.error(f"❌ 學習迴圈錯誤: {e}")

    async def utilization_loop(self):
        if self.util_source is None:
            logger.info("未設定 metrics_url，僅以觀測推論使用率")
            return
        period = self.config.util_poll_period_s
        while True:
            try:
                readings = await self.util_source.poll()
                if readings:
                    self.ingest_utilization(readings)
            except Exception as e:
                logger.error(f"❌ 使用率迴圈錯誤: {e}")
            await asyncio.sleep(period)

    async def aclose(self):
        await self.client.aclose()
        self.engine.close()

    # ---- 內省 -------------------------------------------------------------

    def status(self) -> dict:
        st = self.engine.state
        snap = self.board.current
        return {
            "status": "ok",
            "uptime_s": round(time.time() - self.started_at, 1),
            "mode": st.mode,
            "tick_count": st.tick_count,
            "tick_errors": self.tick_errors,
            "model_version": self.engine.model_version,
            "replay_size": len(self.engine.buffer),
            "policy": self.engine.current_policy.id,
            "weights": snap.as_dict(),
            "epoch": snap.epoch,
            "in_flight": {t.value: self.dispatcher.endpoints[t].in_flight for t in TIER_ORDER},
            "routed": {t.value: n for t, n in self.dispatcher.routed.items()},
            "last_error_rate": st.last_error_rate,
        }

    def belief_summary(self, top: int = 5) -> dict:
        b = self.engine.state.belief
        order = np.argsort(-b, kind="stable")[:top]
        return {
            "entropy": belief_entropy(b),
            "top_states": [
                {"index": int(i), "state": decode_state(int(i))._asdict(), "p": float(b[i])}
                for i in order
            ],
            "marginals": {k: v.tolist() for k, v in belief_marginals(b).items()},
        }
