"""
HTTP 代理路由：所有非 /api、/ws 的請求依權重轉發到層級端點

有後端回應時原樣回傳（含非 2xx）；無回應時 502，逾時 504。
"""

import logging

from fastapi import APIRouter, Depends, Request, Response
from fastapi.responses import JSONResponse

from ..models.schemas import RequestStatus
from ..services.dispatcher import Dispatcher, ForwardRequest, strip_hop_headers

logger = logging.getLogger(__name__)

router = APIRouter()

# httpx 已解碼內容，長度與編碼標頭需重新計算
_RESPONSE_DROP = {"content-length", "content-encoding"}


async def get_dispatcher() -> Dispatcher:
    pass


@router.api_route("/{path:path}", methods=["GET", "POST", "PUT", "PATCH", "DELETE", "HEAD", "OPTIONS"])
async def proxy(path: str, request: Request, dispatcher: Dispatcher = Depends(get_dispatcher)):
    fwd = ForwardRequest(
        method=request.method,
        path="/" + path,
        headers=dict(request.headers),
        content=await request.body(),
        params=list(request.query_params.multi_items()),
    )
    outcome, upstream = await dispatcher.forward(fwd)
    tier = outcome.tier.value

    if outcome.status == RequestStatus.TIMEOUT:
        return JSONResponse(status_code=504, content={"detail": "upstream timeout", "tier": tier},
                            headers={"x-aif-tier": tier})
    if upstream is None:
        return JSONResponse(status_code=502, content={"detail": "upstream unavailable", "tier": tier},
                            headers={"x-aif-tier": tier})

    headers = {k: v for k, v in strip_hop_headers(upstream.headers).items() if k.lower() not in _RESPONSE_DROP}
    headers["x-aif-tier"] = tier
    return Response(content=upstream.content, status_code=upstream.status_code, headers=headers)
