from fastapi import APIRouter, Request
from pydantic import BaseModel, Field
from typing import List, Optional
import logging
import math

from imputad.metrics import evaluate_all

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/metrics", tags=["Metrics"])


class EvaluateRequest(BaseModel):
    pred: List[int] = Field(..., description="Predicted 0/1 label per timestamp")
    truth: List[int] = Field(..., description="Ground-truth 0/1 label per timestamp")
    score: Optional[List[float]] = Field(None, description="Continuous score for the threshold-free metrics")
    buffer: Optional[int] = Field(None, ge=0, description="Range-AUC buffer; default half the mean event length")


class MetricsResponse(BaseModel):
    precision: float
    recall: float
    f1: float
    f1_raw: float
    precision_raw: float
    recall_raw: float
    r_auc: Optional[float] = Field(None, description="Range-aware PR area; null when undefined")
    r_auc_roc: Optional[float] = Field(None, description="Range-aware ROC area; null when undefined")
    add: Optional[float] = Field(None, description="Mean detection delay in timestamps; null without events")
    gap: Optional[float] = Field(None, description="Mean score on anomalous minus normal timestamps; null unless both occur")
    n_events: int
    buffer: int


def _finite_or_none(value: float) -> Optional[float]:
    return None if math.isnan(value) else value


@router.post("/evaluate", response_model=MetricsResponse)
def evaluate(body: EvaluateRequest, request: Request):
    """
    Compute point-adjusted and raw P/R/F1, range AUC and detection delay.
    """
    logger.info(
        "Processing metrics request",
        extra={
            'event_type': 'metrics_request',
            'request_id': getattr(request.state, "request_id", "unknown"),
            'length': len(body.truth)
        }
    )
    report = evaluate_all(body.pred, body.truth, score=body.score, buffer=body.buffer)
    data = report.to_dict()
    for key in ("r_auc", "r_auc_roc", "add", "gap"):
        data[key] = _finite_or_none(data[key])
    return MetricsResponse(**data)
