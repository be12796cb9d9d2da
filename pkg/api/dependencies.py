import logging
from functools import lru_cache

from config.config import CHECKPOINT, DEVICE, WORKERS
from imputad.detector import Detector
from imputad.errors import CheckpointError

logger = logging.getLogger(__name__)


@lru_cache(maxsize=1)
def _load_detector(path: str) -> Detector:
    detector = Detector.from_path(path, workers=WORKERS, device=DEVICE)
    logger.info(
        f"Detector loaded from {path}",
        extra={'event_type': 'detector_loaded', 'path': path, 'n_features': detector.n_features},
    )
    return detector


# Dependency returning the detector served by the API
def get_detector() -> Detector:
    if not CHECKPOINT:
        raise CheckpointError("IMPUTAD_CHECKPOINT is not set; the API has no checkpoint to serve")
    return _load_detector(CHECKPOINT)
