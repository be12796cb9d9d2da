from fastapi import APIRouter, Depends, Request
from pydantic import BaseModel, Field
from typing import List, Optional
import logging

import numpy as np

from api.dependencies import get_detector
from config.config import API_SEED
from imputad.dataset import RawSeries
from imputad.detector import Detector
from imputad.errors import DataError

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/detection", tags=["Detection"])


class DetectionRequest(BaseModel):
    values: List[List[float]] = Field(..., description="L rows of K feature values, raw units")
    labels: Optional[List[int]] = Field(None, description="Optional 0/1 ground truth per row")
    seed: int = Field(API_SEED, description="Seed of the reverse-chain noise; defaults to IMPUTAD_API_SEED")


class DetectionResponse(BaseModel):
    score: List[float] = Field(..., description="Final-step imputation error per timestamp")
    votes: List[int] = Field(..., description="Votes per timestamp across the voting steps")
    labels: List[int] = Field(..., description="Final 0/1 anomaly label per timestamp")
    n_anomalies: int = Field(..., description="Number of timestamps labeled anomalous")
    untrained: bool = Field(False, description="True when the served network was never trained")


@router.post("/score", response_model=DetectionResponse)
def score_series(body: DetectionRequest, request: Request, detector: Detector = Depends(get_detector)):
    """
    Score a raw multivariate series with the served checkpoint.
    """
    request_id = getattr(request.state, "request_id", "unknown")
    values = np.asarray(body.values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise DataError("values must be a non-empty list of equally long rows")
    logger.info(
        "Processing detection request",
        extra={
            'event_type': 'detection_request',
            'request_id': request_id,
            'rows': int(values.shape[0]),
            'features': int(values.shape[1])
        }
    )
    series = RawSeries(values=values, labels=body.labels, name="request")
    result = detector.detect(series, seed=body.seed)
    return DetectionResponse(
        score=result.score.tolist(),
        votes=result.votes.tolist(),
        labels=result.labels.tolist(),
        n_anomalies=result.n_anomalies,
        untrained=result.untrained,
    )
