"""
Checkpoint persistence.

A checkpoint is a single ``torch.save`` dict holding everything inference
needs to reproduce training: network config and weights, noise schedule,
normalizer stats, variant flags and run metadata. Only plain containers and
tensors are stored, so it loads with ``weights_only=True``.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import torch

from config.timezone_config import timestamp
from imputad.dataset import NormStats
from imputad.denoiser import MODEL_VERSION, DenoiserConfig, ImputationTransformer, build_denoiser
from imputad.diffusion import NoiseSchedule
from imputad.errors import CheckpointError
from imputad.masking import MaskingConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
REQUIRED_KEYS = ("format", "model_version", "denoiser", "n_features", "state_dict", "schedule", "stats", "variant", "metadata")


@dataclass
class Checkpoint:
    model: ImputationTransformer
    schedule: NoiseSchedule
    stats: NormStats
    variant: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    training_state: Optional[Dict[str, Any]] = None

    @property
    def n_features(self) -> int:
        return self.model.n_features

    @property
    def epoch(self) -> int:
        return int(self.metadata.get("epoch", 0))


def variant_flags(masking: MaskingConfig, reference_mode: str, cfg: DenoiserConfig, window: int) -> Dict[str, Any]:
    """Flags inference checks a checkpoint against before running a variant."""
    return {
        "mask_strategy": masking.strategy,
        "masking": masking.model_dump(),
        "reference_mode": reference_mode,
        "use_temporal": cfg.use_temporal,
        "use_spatial": cfg.use_spatial,
        "window": int(window),
    }


def save_checkpoint(
    path: str,
    model: ImputationTransformer,
    schedule: NoiseSchedule,
    stats: NormStats,
    variant: Dict[str, Any],
    metadata: Optional[Dict[str, Any]] = None,
    config: Optional[Dict[str, Any]] = None,
    training_state: Optional[Dict[str, Any]] = None,
) -> str:
    """Write a checkpoint atomically (temp file + rename) and return its path."""
    metadata = dict(metadata or {})
    metadata.setdefault("created_at", timestamp())
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_version": model.version,
        "denoiser": model.config.model_dump(),
        "n_features": model.n_features,
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "schedule": schedule.to_dict(),
        "stats": stats.to_dict(),
        "variant": dict(variant),
        "metadata": metadata,
        "config": dict(config or {}),
        "training_state": training_state,
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + ".tmp"
    try:
        torch.save(payload, tmp_path)
        os.replace(tmp_path, path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    logger.info(
        f"Checkpoint saved to {path}",
        extra={'event_type': 'checkpoint_saved', 'path': path, 'epoch': metadata.get("epoch"),
               'tag': metadata.get("tag")},
    )
    return path


def load_checkpoint(path: str, device: str = "cpu") -> Checkpoint:
    """Load and validate a checkpoint, rebuilding the network in eval mode."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location=device, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc

    if not isinstance(payload, dict):
        raise CheckpointError(f"checkpoint {path} is not a checkpoint dict")
    missing = [key for key in REQUIRED_KEYS if key not in payload]
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing {missing}")
    if payload["format"] != CHECKPOINT_FORMAT:
        raise CheckpointError(f"checkpoint format {payload['format']} is not supported (expected {CHECKPOINT_FORMAT})")
    if payload["model_version"] != MODEL_VERSION:
        raise CheckpointError(
            f"checkpoint was written by network version {payload['model_version']}, this build is {MODEL_VERSION}"
        )

    try:
        cfg = DenoiserConfig(**payload["denoiser"])
        model = build_denoiser(cfg, payload["n_features"])
        model.load_state_dict(payload["state_dict"], strict=True)
        schedule = NoiseSchedule.from_dict(payload["schedule"])
        stats = NormStats.from_dict(payload["stats"])
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc
    if schedule.T != cfg.T:
        raise CheckpointError(f"checkpoint schedule has T={schedule.T}, network embeds T={cfg.T}")
    if stats.n_features != model.n_features:
        raise CheckpointError(f"normalizer covers {stats.n_features} features, network {model.n_features}")

    model.to(device).eval()
    logger.debug(f"Loaded checkpoint {path}", extra={'event_type': 'checkpoint_loaded', 'path': path})
    return Checkpoint(
        model=model,
        schedule=schedule,
        stats=stats,
        variant=dict(payload["variant"]),
        metadata=dict(payload["metadata"]),
        config=dict(payload.get("config") or {}),
        training_state=payload.get("training_state"),
    )
