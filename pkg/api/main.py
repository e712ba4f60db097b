from __future__ import annotations

import asyncio
import logging
import os
from contextlib import suppress
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from detector.network import MLPModel, load_checkpoint
from detector.transfer import classify_raw
from gridsim.errors import FdiaError

logging.basicConfig(
    level=os.getenv("LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s %(name)s :: %(message)s",
)
logger = logging.getLogger("fdia-api")

MODEL_CHECKPOINT = os.getenv("FDIA_MODEL_CHECKPOINT")
REPORT_DIR = Path(os.getenv("FDIA_REPORT_DIR", "reports"))
REPORT_SUFFIXES = {".md", ".csv", ".json"}

app = FastAPI(title="FDIA Detection API", version="0.1.0")

_raw_origins = os.getenv("API_CORS_ORIGINS", "*")
if _raw_origins == "*":
    _allowed_origins = ["*"]
else:
    _allowed_origins = [origin.strip() for origin in _raw_origins.split(",") if origin.strip()]

app.add_middleware(
    CORSMiddleware,
    allow_origins=_allowed_origins,
    allow_credentials=False,
    allow_methods=["*"],
    allow_headers=["*"],
)

_model: MLPModel | None = None
_loaded_from: str | None = None
_last_load: datetime | None = None
_last_error: str | None = None
_model_lock = asyncio.Lock()
_reload_lock = asyncio.Lock()
_reload_task: asyncio.Task[None] | None = None


class ClassifyRequest(BaseModel):
    features: List[List[float]] = Field(..., min_length=1, description="Raw (unnormalized) feature rows.")


class RowVerdict(BaseModel):
    verdict: str
    p_attack: float
    p_normal: float


class ClassifyResponse(BaseModel):
    checkpoint: str
    step: int
    results: List[RowVerdict]


async def _reload_model() -> None:
    global _model, _loaded_from, _last_load, _last_error
    async with _reload_lock:
        path = MODEL_CHECKPOINT
        if not path:
            async with _model_lock:
                _last_error = "FDIA_MODEL_CHECKPOINT is not set"
            return
        try:
            model = await asyncio.to_thread(load_checkpoint, Path(path))
            if model.norm_stats is None:
                raise FdiaError(f"{path} carries no normalization statistics")
            async with _model_lock:
                _model = model.eval()
                _loaded_from = path
                _last_load = datetime.now(timezone.utc)
                _last_error = None
            logger.info("Loaded checkpoint %s (step %d)", path, model.step)
        except Exception as exc:  # noqa: BLE001 - keep serving the previous model
            logger.exception("Checkpoint reload failed")
            async with _model_lock:
                _last_error = str(exc)


@app.on_event("startup")
async def _on_startup() -> None:
    await _reload_model()


@app.on_event("shutdown")
async def _on_shutdown() -> None:
    if _reload_task is None:
        return
    _reload_task.cancel()
    with suppress(asyncio.CancelledError):
        await _reload_task


@app.get("/health")
async def health() -> dict:
    async with _model_lock:
        loaded_at = _last_load.isoformat() if _last_load else None
        status = "ok" if _model is not None and _last_error is None else "degraded"
        return {"status": status, "checkpoint": _loaded_from, "loaded_at": loaded_at, "error": _last_error}


def _report_files() -> List[Path]:
    if not REPORT_DIR.exists():
        return []
    return sorted(p for p in REPORT_DIR.iterdir() if p.is_file() and p.suffix in REPORT_SUFFIXES)


@app.get("/api/reports")
async def list_reports() -> dict:
    files = await asyncio.to_thread(_report_files)
    return {"reports": [{"name": p.name, "bytes": p.stat().st_size} for p in files]}


@app.get("/api/reports/{name}")
async def get_report(name: str) -> dict:
    files = {p.name: p for p in await asyncio.to_thread(_report_files)}
    path = files.get(name)
    if path is None:
        raise HTTPException(status_code=404, detail="Report not found")
    return {"name": name, "content": path.read_text(encoding="utf-8")}


@app.post("/api/classify", response_model=ClassifyResponse)
async def classify(request: ClassifyRequest) -> ClassifyResponse:
    async with _model_lock:
        model, source = _model, _loaded_from
    if model is None:
        raise HTTPException(status_code=503, detail="No detector model loaded")

    widths = {len(row) for row in request.features}
    expected = model.config.input_dim
    if widths != {expected}:
        raise HTTPException(
            status_code=422,
            detail=f"Each feature row must have {expected} values, got widths {sorted(widths)}",
        )
    result = await asyncio.to_thread(classify_raw, model, np.asarray(request.features, dtype=np.float64))
    rows = [
        RowVerdict(verdict=verdict.value, p_attack=float(p[0]), p_normal=float(p[1]))
        for verdict, p in zip(result.verdicts, result.probs)
    ]
    return ClassifyResponse(checkpoint=source or "", step=model.step, results=rows)


@app.post("/api/reload", status_code=202)
async def trigger_reload() -> dict:
    global _reload_task
    _reload_task = asyncio.create_task(_reload_model())
    return {"status": "scheduled", "checkpoint": MODEL_CHECKPOINT}
