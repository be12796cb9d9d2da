from contextlib import asynccontextmanager
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
import logging
import time
from typing import Callable
import uuid

from config.config import CHECKPOINT, JSON_LOGS, LOG_DIR, LOG_LEVEL, LOG_TO_FILE
from imputad import __version__
from imputad.errors import ImputadError
from logging_config import setup_logging

# Configure logging for the API
logger = setup_logging(
    log_level=LOG_LEVEL,
    app_name='api_server',
    log_dir=LOG_DIR,
    log_to_file=LOG_TO_FILE,
    json_logs=JSON_LOGS
)

# HTTP status per error category
STATUS_BY_CATEGORY = {
    "config": 400,
    "checkpoint": 409,
    "data": 422,
    "inference": 422,
    "metrics": 422,
    "training": 422,
}


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info(
        "API server starting up",
        extra={'event_type': 'server_startup', 'checkpoint': CHECKPOINT or None, 'version': __version__}
    )
    yield
    logger.info("API server shutting down", extra={'event_type': 'server_shutdown'})


app = FastAPI(
    title="imputad API",
    description="Anomaly scoring with a trained imputation-diffusion checkpoint",
    version=__version__,
    lifespan=lifespan,
)


def _request_context(request: Request) -> dict:
    return {
        'request_id': getattr(request.state, 'request_id', 'unknown'),
        'method': request.method,
        'path': request.url.path,
    }


@app.middleware("http")
async def log_requests(request: Request, call_next: Callable):
    request.state.request_id = str(uuid.uuid4())
    started = time.perf_counter()
    context = _request_context(request)

    logger.info(
        f"{request.method} {request.url.path} received",
        extra={
            'event_type': 'request_start',
            'client_host': request.client.host if request.client else "unknown",
            **context,
        }
    )
    try:
        response = await call_next(request)
    except Exception as e:
        logger.error(
            f"{request.method} {request.url.path} failed",
            exc_info=True,
            extra={
                'event_type': 'request_error',
                'error': str(e),
                'duration_ms': round((time.perf_counter() - started) * 1000, 2),
                **context,
            }
        )
        raise

    duration_ms = round((time.perf_counter() - started) * 1000, 2)
    logger.info(
        f"{request.method} {request.url.path} -> {response.status_code} in {duration_ms} ms",
        extra={'event_type': 'request_complete', 'status_code': response.status_code, 'duration_ms': duration_ms, **context}
    )
    response.headers["X-Request-ID"] = context['request_id']
    response.headers["X-Duration-Ms"] = str(duration_ms)
    return response


@app.get("/health")
async def health_check():
    logger.debug("Health check endpoint called", extra={'event_type': 'health_check'})
    return {"status": "ok", "service": "imputad API", "version": __version__}


@app.exception_handler(ImputadError)
async def imputad_exception_handler(request: Request, exc: ImputadError):
    status = STATUS_BY_CATEGORY.get(exc.category, 400)
    logger.warning(
        f"Request rejected ({exc.category}): {exc}",
        extra={'event_type': 'request_rejected', 'category': exc.category, 'status_code': status, **_request_context(request)}
    )
    return JSONResponse(status_code=status, content={"error": exc.category, "message": str(exc)})


@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    logger.error(
        f"Unhandled {type(exc).__name__} on {request.method} {request.url.path}",
        exc_info=True,
        extra={'event_type': 'unhandled_exception', 'error': str(exc), **_request_context(request)}
    )
    return JSONResponse(status_code=500, content={"error": "internal", "message": type(exc).__name__})


from api.routers import detection, metrics  # noqa: E402

app.include_router(detection.router)
app.include_router(metrics.router)
