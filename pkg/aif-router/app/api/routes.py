import asyncio
import os
import tempfile
import time

from fastapi import APIRouter, Depends, HTTPException, Response

from ..models.schemas import HealthCheck
from ..services.model_store import save_model
from ..services.runtime import RouterRuntime
from .websocket import websocket_manager

router = APIRouter()


# 由主應用以 dependency_overrides 覆寫
async def get_runtime() -> RouterRuntime:
    pass


def _require(runtime: RouterRuntime) -> RouterRuntime:
    if runtime is None:
        raise HTTPException(status_code=503, detail="路由器尚未初始化")
    return runtime


@router.get("/status")
async def get_system_status(runtime: RouterRuntime = Depends(get_runtime)):
    """系統狀態端點"""
    try:
        return _require(runtime).status()
    except HTTPException:
        raise
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"System error: {str(e)}")


@router.get("/health", response_model=HealthCheck)
async def health_check(runtime: RouterRuntime = Depends(get_runtime)):
    """健康檢查端點"""
    runtime = _require(runtime)
    connections = {
        "tiers": {t.value: e.target for t, e in runtime.dispatcher.endpoints.items()},
        "metrics": runtime.util_source is not None,
        "websocket_clients": websocket_manager.get_connected_clients(),
    }
    status = "healthy" if runtime.engine.state.tick_count > 0 else "starting"
    return HealthCheck(status=status, timestamp=time.time(), connections=connections)


@router.get("/weights")
async def get_weights(runtime: RouterRuntime = Depends(get_runtime)):
    """目前發布中的路由權重"""
    runtime = _require(runtime)
    snap = runtime.board.current
    policy = runtime.engine.current_policy
    probs = runtime.engine.action_probabilities()
    return {
        "weights": snap.as_dict(),
        "epoch": snap.epoch,
        "policy": {"id": policy.id, "label": policy.label},
        "mode": runtime.engine.state.mode,
        "action_probabilities": probs.tolist() if probs is not None else None,
    }


@router.get("/belief")
async def get_belief(top: int = 5, runtime: RouterRuntime = Depends(get_runtime)):
    """信念狀態摘要：熵、機率最高的狀態、各維度邊際"""
    if not 1 <= top <= 243:
        raise HTTPException(status_code=400, detail="top 必須在 1..243")
    return _require(runtime).belief_summary(top)


@router.get("/model")
async def download_model(runtime: RouterRuntime = Depends(get_runtime)):
    """下載目前的模型快照（.npz）"""
    model = _require(runtime).engine.model
    fd, tmp = tempfile.mkstemp(suffix=".npz")
    os.close(fd)
    try:
        await asyncio.to_thread(save_model, model, tmp)
        with open(tmp, "rb") as fh:
            content = fh.read()
    finally:
        os.unlink(tmp)
    return Response(
        content=content,
        media_type="application/octet-stream",
        headers={"content-disposition": 'attachment; filename="aif_model.npz"'},
    )
