from fastapi import FastAPI, WebSocket
import uvicorn
import asyncio
import logging
from contextlib import asynccontextmanager
from typing import Optional

import httpx

from . import __version__
from .config import settings
from .api.routes import router as api_router
from .api import routes as api_routes
from .api.proxy import router as proxy_router
from .api import proxy as api_proxy
from .api.websocket import websocket_endpoint, websocket_manager, start_heartbeat_task
from .models.schemas import ServeConfig
from .services.runtime import RouterRuntime

# 設置日誌
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def create_app(serve_config: Optional[ServeConfig] = None, *,
               transport: Optional[httpx.AsyncBaseTransport] = None,
               start_loops: bool = True) -> FastAPI:
    """建立代理應用；serve_config 省略時由環境變數組出"""
    runtime = RouterRuntime(serve_config or settings.serve_config(), transport=transport)
    runtime.broadcast = websocket_manager.broadcast

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        """應用生命週期管理"""
        logger.info("🚀 啟動 AIF-Router 代理服務...")
        tasks = []
        if start_loops:
            tasks = [
                asyncio.create_task(runtime.decision_loop()),
                asyncio.create_task(runtime.learning_loop()),
                asyncio.create_task(runtime.utilization_loop()),
                asyncio.create_task(start_heartbeat_task()),
            ]
        tiers = ", ".join(f"{t.value}={e.target}" for t, e in runtime.dispatcher.endpoints.items())
        logger.info(f"🎉 AIF-Router 啟動完成 ({tiers})")

        yield

        logger.info("🔄 正在關閉服務...")
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        await runtime.aclose()
        logger.info("✅ 服務已關閉")

    app = FastAPI(
        title="AIF-Router",
        description="以主動推論動態調整邊緣層級權重的 HTTP 路由器",
        version=__version__,
        lifespan=lifespan,
    )
    app.state.runtime = runtime

    # 覆寫路由模組中的佔位函式
    app.dependency_overrides[api_routes.get_runtime] = lambda: runtime
    app.dependency_overrides[api_proxy.get_dispatcher] = lambda: runtime.dispatcher

    app.include_router(api_router, prefix="/api")

    @app.websocket("/ws")
    async def websocket_route(websocket: WebSocket):
        await websocket_endpoint(websocket)

    # catch-all 代理必須最後註冊
    app.include_router(proxy_router)
    return app


if __name__ == "__main__":
    uvicorn.run(
        "app.main:create_app",
        factory=True,
        host=settings.host,
        port=settings.port,
        log_level=settings.log_level.lower()
    )
