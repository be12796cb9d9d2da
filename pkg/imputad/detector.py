"""
Ensemble anomaly inference.

Each test window is imputed under every mask of its policy set by running the
reverse chain from pure noise. The partially denoised state is snapshotted at
the voting steps, compared against the (normalized) ground truth, thresholded
per step and the per-step labels are summed into votes.

Step indices follow the diffusion module: ``t`` counts down from ``T`` to 1 and
the snapshot taken at ``t`` is the state after that reverse iteration, so the
snapshot at ``FINAL_STEP = 1`` is the fully denoised output.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field, field_validator, model_validator

from imputad.checkpoint import Checkpoint, load_checkpoint
from imputad.dataset import RawSeries, windowize
from imputad.denoiser import DenoiserInput, ImputationTransformer, is_untrained, predict_noise, reference_values
from imputad.diffusion import (
    Generators,
    NoiseSchedule,
    implied_noise,
    make_generator,
    record_forward_trajectory,
    reverse_step,
    standard_normal,
)
from imputad.errors import ConfigError, InferenceError
from imputad.masking import MaskingConfig, MaskPair, merge_imputations, random_pair

logger = logging.getLogger(__name__)

FINAL_STEP = 1
PREDICTION_COLUMNS = ("timestamp", "score", "votes", "label")


def default_vote_steps(n_steps: int = 10, every: int = 3) -> List[int]:
    """Every ``every``-th reverse iteration among the last ones, ending at the final step."""
    return [FINAL_STEP + every * i for i in reversed(range(n_steps))]


class EnsembleConfig(BaseModel):
    tau_quantile: float = Field(0.02, gt=0.0, lt=1.0, description="Upper-tail fraction flagged at the final step")
    xi: int = Field(8, ge=0, description="A timestamp is anomalous with strictly more than xi votes")
    vote_steps: List[int] = Field(default_factory=default_vote_steps, description="Reverse iterations that vote")

    @field_validator("vote_steps")
    @classmethod
    def _distinct_positive(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("vote_steps must not be empty")
        if any(t < 1 for t in value):
            raise ValueError(f"vote steps are 1-based, got {value}")
        if len(set(value)) != len(value):
            raise ValueError(f"vote steps must be distinct, got {value}")
        return sorted(value, reverse=True)

    @model_validator(mode="after")
    def _xi_below_steps(self):
        if self.xi >= self.n_vote_steps:
            raise ValueError(f"xi={self.xi} can never be exceeded with {self.n_vote_steps} vote steps")
        return self

    @property
    def n_vote_steps(self) -> int:
        return len(self.vote_steps)

    def recorded_steps(self) -> List[int]:
        return sorted(set(self.vote_steps) | {FINAL_STEP}, reverse=True)

    def check_schedule(self, T: int):
        outside = [t for t in self.vote_steps if t > T]
        if outside:
            raise ConfigError(f"vote steps {outside} exceed the {T} diffusion steps of the schedule")

    def non_ensemble(self) -> "EnsembleConfig":
        return EnsembleConfig(tau_quantile=self.tau_quantile, xi=0, vote_steps=[FINAL_STEP])


@dataclass(frozen=True)
class StepErrorStack:
    """Per-cell squared imputation errors, step -> (L, K)."""
    errors: Dict[int, np.ndarray]

    def __post_init__(self):
        for t, err in self.errors.items():
            if np.any(err < 0):
                raise InferenceError(f"negative squared error at step {t}")

    @property
    def steps(self) -> List[int]:
        return sorted(self.errors, reverse=True)

    @property
    def reduced(self) -> Dict[int, np.ndarray]:
        """Per-timestamp errors: mean over features."""
        return {t: err.mean(axis=-1) for t, err in self.errors.items()}


@dataclass
class DetectionResult:
    votes: np.ndarray
    labels: np.ndarray
    score: np.ndarray
    step_labels: Dict[int, np.ndarray] = field(default_factory=dict)
    thresholds: Dict[int, float] = field(default_factory=dict)
    final_threshold: float = float("nan")
    untrained: bool = False

    @property
    def length(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_anomalies(self) -> int:
        return int(self.labels.sum())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "timestamp": np.arange(self.length),
            "score": self.score,
            "votes": self.votes,
            "label": self.labels,
        }, columns=list(PREDICTION_COLUMNS))

    def write_csv(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.8g")
        return path

    def write_thresholds(self, path: str) -> str:
        """Final-step threshold and per-step thresholds, keyed by step, as JSON."""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as handle:
            json.dump({
                "final_threshold": self.final_threshold,
                "thresholds": {str(t): tau for t, tau in sorted(self.thresholds.items(), reverse=True)},
            }, handle, indent=2)
        return path


# --- reverse imputation -------------------------------------------------------

NoiseFn = Callable[[DenoiserInput], torch.Tensor]


def reverse_impute(
    model: Optional[ImputationTransformer],
    x0: torch.Tensor,
    mask,
    policy,
    sched: NoiseSchedule,
    record_steps: Iterable[int],
    generators: Generators = None,
    reference_mode: str = "unconditional",
    noise_fn: Optional[NoiseFn] = None,
) -> Dict[int, torch.Tensor]:
    """
    Impute the masked cells of ``x0`` by running the reverse chain from step T.

    Observed cells are not sampled: they follow a recorded forward trajectory
    and are reset to its state after every reverse iteration, reaching their
    original values at the end. In unconditional mode the network sees the
    trajectory's noise on those cells, never their values. ``noise_fn``
    replaces the network (an oracle in tests).

    Returns:
        step -> state after the reverse iteration at that step, for every step
        in ``record_steps``.
    """
    mask = torch.as_tensor(mask, dtype=x0.dtype, device=x0.device).expand_as(x0)
    keep = set(int(t) for t in record_steps)
    for t in keep:
        sched.check_step(t)
    predict = noise_fn or (lambda inp: predict_noise(model, inp))

    trajectory = record_forward_trajectory(x0, sched, generators)
    x = standard_normal(x0.shape, generators, dtype=x0.dtype, device=x0.device)
    snapshots: Dict[int, torch.Tensor] = {}
    for t in range(sched.T, 0, -1):
        state = x * (1.0 - mask) + trajectory.state(t) * mask
        noise = implied_noise(trajectory.state(t), x0, t, sched)
        inp = DenoiserInput.build(state, reference_values(noise, x0, reference_mode), mask, t, policy)
        eps_hat = predict(inp)
        z = standard_normal(x0.shape, generators, dtype=x0.dtype, device=x0.device) if t > 1 else None
        x = reverse_step(state, eps_hat, t, sched, z)
        observed = trajectory.state(t - 1) if t > 1 else x0
        x = x * (1.0 - mask) + observed * mask
        if not torch.all(torch.isfinite(x)):
            raise InferenceError(f"non-finite state after reverse iteration t={t}")
        if t in keep:
            snapshots[t] = x.clone()
    return snapshots


# --- errors, thresholds, votes ------------------------------------------------

def step_errors(imputations: Sequence[Dict[int, np.ndarray]], truth: np.ndarray, masks: Sequence[np.ndarray]) -> Dict[int, np.ndarray]:
    """
    Merge the imputations of every mask per step and square the error to ``truth``.

    Cells no mask imputes take the true value, so their error is zero.
    """
    if not imputations or len(imputations) != len(masks):
        raise InferenceError(f"got {len(imputations)} imputations for {len(masks)} masks: missing policy")
    steps = set(imputations[0])
    for other in imputations[1:]:
        if set(other) != steps:
            raise InferenceError(f"imputations cover different steps: {sorted(steps)} vs {sorted(other)}")

    errors = {}
    for t in steps:
        if len(masks) == 2:
            merged = merge_imputations(imputations[0][t], imputations[1][t], MaskPair(m0=masks[0], m1=masks[1]))
        else:
            merged = truth * np.prod(masks, axis=0)
            for pred, mask in zip(imputations, masks):
                merged = merged + pred[t] * (1.0 - mask)
        errors[t] = (np.asarray(truth) - merged) ** 2
    return errors


def final_threshold(stack: StepErrorStack, cfg: EnsembleConfig) -> float:
    """Upper ``tau_quantile`` of the per-timestamp final-step error."""
    if FINAL_STEP not in stack.errors:
        raise InferenceError("error stack has no final step")
    final = stack.errors[FINAL_STEP]
    if final.shape[0] == 0:
        raise InferenceError("empty evaluation span")
    return float(np.quantile(final.mean(axis=-1), 1.0 - cfg.tau_quantile))


def step_thresholds(stack: StepErrorStack, cfg: EnsembleConfig) -> Dict[int, float]:
    """
    Per-step thresholds: the final-step upper quantile rescaled by the ratio of
    total final-step error to total step-``t`` error.
    """
    tau_final = final_threshold(stack, cfg)
    total_final = float(stack.errors[FINAL_STEP].sum())

    thresholds = {}
    for t in cfg.vote_steps:
        if t not in stack.errors:
            raise InferenceError(f"error stack is missing vote step {t}")
        total = float(stack.errors[t].sum())
        thresholds[t] = tau_final * total_final / total if total > 0 else float("inf")
    return thresholds


def step_labels(stack: StepErrorStack, cfg: EnsembleConfig, thresholds: Optional[Dict[int, float]] = None) -> Dict[int, np.ndarray]:
    """Label timestamps whose step error reaches the step threshold; a zero error never does."""
    thresholds = thresholds if thresholds is not None else step_thresholds(stack, cfg)
    reduced = stack.reduced
    return {t: ((reduced[t] >= tau) & (reduced[t] > 0)).astype(np.int64) for t, tau in thresholds.items()}


def vote(labels: Dict[int, np.ndarray], cfg: EnsembleConfig, score: Optional[np.ndarray] = None) -> DetectionResult:
    missing = [t for t in cfg.vote_steps if t not in labels]
    if missing:
        raise InferenceError(f"labels missing for vote steps {missing}")
    votes = np.sum([np.asarray(labels[t], dtype=np.int64) for t in cfg.vote_steps], axis=0)
    final = (votes > cfg.xi).astype(np.int64)
    score = np.zeros(votes.shape) if score is None else np.asarray(score, dtype=np.float64)
    return DetectionResult(votes=votes, labels=final, score=score, step_labels={t: labels[t] for t in cfg.vote_steps})


# --- full-series detection ----------------------------------------------------

def _window_masks(masking: MaskingConfig, W: int, K: int, window_idx: int, seed: int):
    if masking.strategy == "random":
        rng = np.random.default_rng([int(seed), int(window_idx)])
        return random_pair(W, K, masking.miss_prob, rng).policies()
    return masking.policies(W, K)


def _assemble(window_errors: Dict[int, np.ndarray], starts: List[int], scored: np.ndarray, length: int) -> Dict[int, np.ndarray]:
    """
    Place per-window errors on the series axis.

    Timestamp ``l`` takes its error from the last window that imputes it;
    timestamps no window imputes keep error zero.
    """
    owner = np.full(length, -1, dtype=np.int64)
    offset = np.zeros(length, dtype=np.int64)
    for w, start in enumerate(starts):
        cols = np.nonzero(scored[w])[0]
        owner[start + cols] = w
        offset[start + cols] = cols
    covered = owner >= 0
    out = {}
    for t, err in window_errors.items():
        series = np.zeros((length, err.shape[-1]))
        series[covered] = err[owner[covered], offset[covered]]
        out[t] = series
    return out


def detect(
    model: ImputationTransformer,
    test: RawSeries,
    stats,
    sched: NoiseSchedule,
    ecfg: EnsembleConfig,
    masking: Optional[MaskingConfig] = None,
    window: int = 100,
    reference_mode: str = "unconditional",
    seed: int = 0,
    workers: int = 1,
    batch_size: int = 16,
    device: str = "cpu",
) -> DetectionResult:
    """
    Score a full test series.

    Args:
        model: Trained noise predictor.
        test: Raw test series.
        stats: Normalizer fitted on the training split.
        sched: Schedule the model was trained with.
        ecfg: Thresholding and voting configuration.
        masking: Mask policy set; forecasting windows advance by half a window.
        window: Detection window length.
        reference_mode: ``unconditional`` or ``conditional``.
        seed: Every window draws from generators keyed by (seed, window, mask).
        workers: Threads running window batches concurrently.
        batch_size: Windows per reverse-chain batch.
        device: Torch device.

    Returns:
        Series-length DetectionResult; ``score`` is the final-step error.
    """
    masking = masking or MaskingConfig()
    if test.n_features != model.n_features:
        raise InferenceError(f"test series has {test.n_features} features, the checkpoint was trained on {model.n_features}")
    ecfg.check_schedule(sched.T)
    untrained = is_untrained(model)
    if untrained:
        logger.warning("Network output head is still zero-initialized; scores are meaningless",
                       extra={'event_type': 'untrained_model'})

    stride = window // 2 if masking.strategy == "forecasting" else None
    windows = windowize(test, stats, window, stride)
    values = windows.stacked()
    n, W, K = values.shape
    masks = [_window_masks(masking, W, K, w, seed) for w in range(n)]
    n_masks = len(masks[0])
    record = ecfg.recorded_steps()
    model = model.to(device).eval()

    def run_batch(idxs: List[int]) -> Dict[int, np.ndarray]:
        x0 = torch.as_tensor(values[idxs], dtype=torch.float32, device=device)
        imputations = []
        with torch.no_grad():
            for mi in range(n_masks):
                mask = np.stack([masks[w][mi][0] for w in idxs])
                policy = masks[idxs[0]][mi][1]
                generators = [make_generator(seed, w, mi) for w in idxs]
                snaps = reverse_impute(model, x0, mask, policy, sched, record, generators, reference_mode)
                imputations.append({t: s.cpu().numpy().astype(np.float64) for t, s in snaps.items()})
        batch_masks = [np.stack([masks[w][mi][0] for w in idxs]) for mi in range(n_masks)]
        errors = step_errors(imputations, values[idxs], batch_masks)
        logger.debug(
            f"Imputed windows {idxs[0]}..{idxs[-1]}",
            extra={'event_type': 'inference_window_batch', 'first_window': idxs[0], 'n_windows': len(idxs)},
        )
        return errors

    batches = [list(range(b, min(b + batch_size, n))) for b in range(0, n, batch_size)]
    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        results = list(pool.map(run_batch, batches))
    window_errors = {t: np.concatenate([r[t] for r in results]) for t in record}

    scored = np.stack([np.any(np.sum([1.0 - m for m, _ in masks[w]], axis=0) > 0, axis=-1) for w in range(n)])
    stack = StepErrorStack(errors=_assemble(window_errors, windows.starts, scored, test.length))
    thresholds = step_thresholds(stack, ecfg)
    result = vote(step_labels(stack, ecfg, thresholds), ecfg, score=stack.reduced[FINAL_STEP])
    result.thresholds = thresholds
    result.final_threshold = final_threshold(stack, ecfg)
    result.untrained = untrained
    logger.info(
        f"Detected {result.n_anomalies} anomalous timestamps out of {test.length} in '{test.name}'",
        extra={'event_type': 'detection_complete', 'series': test.name, 'length': test.length,
               'n_anomalies': result.n_anomalies, 'n_windows': n, 'strategy': masking.strategy},
    )
    return result


# --- ablation variants --------------------------------------------------------

@dataclass(frozen=True)
class VariantSpec:
    """What a variant trains and scores with."""
    mask_strategy: str = "grating"
    reference_mode: str = "unconditional"
    use_temporal: bool = True
    use_spatial: bool = True
    ensemble: bool = True

    def mismatches(self, flags: Dict) -> List[str]:
        wanted = {
            "mask_strategy": self.mask_strategy,
            "reference_mode": self.reference_mode,
            "use_temporal": self.use_temporal,
            "use_spatial": self.use_spatial,
        }
        return [f"{key}={flags.get(key)!r} (needs {value!r})" for key, value in wanted.items() if flags.get(key) != value]


VARIANTS: Dict[str, VariantSpec] = {
    "imputation": VariantSpec(),
    "forecasting": VariantSpec(mask_strategy="forecasting"),
    "reconstruction": VariantSpec(mask_strategy="reconstruction"),
    "conditional": VariantSpec(reference_mode="conditional"),
    "non_ensemble": VariantSpec(ensemble=False),
    "random_mask": VariantSpec(mask_strategy="random"),
    "no_spatial": VariantSpec(use_spatial=False),
    "no_temporal": VariantSpec(use_temporal=False),
}


def detect_variant(
    mode: str,
    checkpoint: Checkpoint,
    test: RawSeries,
    ecfg: EnsembleConfig,
    seed: int = 0,
    workers: int = 1,
    batch_size: int = 16,
    device: str = "cpu",
) -> DetectionResult:
    """Run ``detect`` the way ablation variant ``mode`` prescribes, after checking the checkpoint fits it."""
    if mode not in VARIANTS:
        raise ConfigError(f"unknown variant '{mode}', expected one of {list(VARIANTS)}")
    spec = VARIANTS[mode]
    problems = spec.mismatches(checkpoint.variant)
    if problems:
        raise InferenceError(f"checkpoint does not fit variant '{mode}': {', '.join(problems)}")
    masking = MaskingConfig(**checkpoint.variant.get("masking", {"strategy": spec.mask_strategy}))
    return detect(
        checkpoint.model,
        test,
        checkpoint.stats,
        checkpoint.schedule,
        ecfg if spec.ensemble else ecfg.non_ensemble(),
        masking=masking,
        window=int(checkpoint.variant.get("window", 100)),
        reference_mode=spec.reference_mode,
        seed=seed,
        workers=workers,
        batch_size=batch_size,
        device=device,
    )


class Detector:
    """A loaded checkpoint bound to an ensemble config; what the HTTP API serves."""

    def __init__(self, checkpoint: Checkpoint, ecfg: Optional[EnsembleConfig] = None, mode: str = "imputation",
                 workers: int = 1, batch_size: int = 16, device: str = "cpu"):
        self.checkpoint = checkpoint
        self.ecfg = ecfg or EnsembleConfig(**checkpoint.config.get("ensemble", {}))
        self.mode = mode
        self.workers = workers
        self.batch_size = batch_size
        self.device = device

    @classmethod
    def from_path(cls, path: str, **kwargs) -> "Detector":
        return cls(load_checkpoint(path, device=kwargs.get("device", "cpu")), **kwargs)

    @property
    def n_features(self) -> int:
        return self.checkpoint.n_features

    @property
    def window(self) -> int:
        return int(self.checkpoint.variant.get("window", 100))

    def detect(self, series: RawSeries, seed: int = 0) -> DetectionResult:
        return detect_variant(self.mode, self.checkpoint, series, self.ecfg, seed=seed,
                              workers=self.workers, batch_size=self.batch_size, device=self.device)
