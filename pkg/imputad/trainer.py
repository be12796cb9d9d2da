"""
Self-supervised training of the noise predictor.

Every window is imputed under each mask of its policy set: a step ``t`` is
drawn per example, all cells are diffused in closed form, and the squared
error between the true and the predicted noise is accumulated over the
masked cells only.
"""
import csv
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, field_validator
from torch.optim import Adam
from torch.optim.lr_scheduler import MultiStepLR

from imputad.dataset import MtsWindow, WindowSet
from imputad.denoiser import DenoiserInput, ImputationTransformer, predict_noise, reference_values
from imputad.diffusion import NoiseSchedule, make_generator, standard_normal
from imputad.errors import InferenceError, TrainingError
from imputad.masking import SENTINEL_POLICY, MaskingConfig, random_mask

logger = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("epoch", "loss", "seconds")


class LRDecay(BaseModel):
    milestones: List[float] = Field(default_factory=lambda: [0.75, 0.9], description="Fractions of the epoch budget")
    gamma: float = Field(0.1, gt=0.0, le=1.0, description="Multiplicative decay at each milestone")

    @field_validator("milestones")
    @classmethod
    def _fractions(cls, value: List[float]) -> List[float]:
        if any(not 0.0 < m <= 1.0 for m in value):
            raise ValueError(f"lr milestones must be fractions in (0, 1], got {value}")
        if list(value) != sorted(value):
            raise ValueError(f"lr milestones must be increasing, got {value}")
        return value


class TrainConfig(BaseModel):
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(1e-6, ge=0.0)
    lr_decay: LRDecay = Field(default_factory=LRDecay)
    seed: int = 0
    mask_policy: MaskingConfig = Field(default_factory=MaskingConfig)
    loss_reduction: Literal["masked_mean"] = "masked_mean"
    reference_mode: Literal["unconditional", "conditional"] = "unconditional"
    device: str = "cpu"


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    loss: float
    seconds: float
    policy_losses: Tuple[float, ...] = ()

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise TrainingError(f"epoch {self.epoch} finished with non-finite loss {self.loss}")


@dataclass
class LossBreakdown:
    """Loss of one batch plus the per-mask contributions (masked mean of each mask separately)."""
    loss: torch.Tensor
    policy_losses: List[float] = field(default_factory=list)
    masked_cells: List[float] = field(default_factory=list)
    steps: List[torch.Tensor] = field(default_factory=list)


Checkpointer = Callable[[str, TrainRecord, Dict], None]


def masked_noise_loss(eps: torch.Tensor, eps_hat: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Sum of squared noise errors over masked cells, and the number of masked cells."""
    target = 1.0 - mask
    residual = (eps - eps_hat) * target
    return (residual ** 2).sum(), target.sum()


def compute_loss(
    model: ImputationTransformer,
    x0: torch.Tensor,
    masks: Sequence[Tuple[Union[np.ndarray, torch.Tensor], Union[int, torch.Tensor]]],
    sched: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    reference_mode: str = "unconditional",
) -> LossBreakdown:
    """
    Masked noise-prediction loss of a (B, W, K) batch under each (mask, policy).

    The squared errors of all masks are pooled and divided by the pooled
    masked-cell count, so an all-zero prediction scores E[eps^2] = 1.
    """
    B = x0.shape[0]
    alpha_bar = sched.tensors(device=x0.device, dtype=x0.dtype)["alpha_bar"]
    sq_total = x0.new_zeros(())
    cells_total = x0.new_zeros(())
    breakdown = LossBreakdown(loss=sq_total)

    for mask, policy in masks:
        mask = torch.as_tensor(mask, dtype=x0.dtype, device=x0.device).expand_as(x0)
        t = torch.randint(1, sched.T + 1, (B,), generator=generator).to(x0.device)
        eps = standard_normal(x0.shape, generator, dtype=x0.dtype, device=x0.device)
        a = alpha_bar[t - 1].view(B, 1, 1)
        state = a.sqrt() * x0 + (1.0 - a).sqrt() * eps

        inp = DenoiserInput.build(state, reference_values(eps, x0, reference_mode), mask, t, policy)
        eps_hat = predict_noise(model, inp)
        sq, cells = masked_noise_loss(eps, eps_hat, mask)

        sq_total = sq_total + sq
        cells_total = cells_total + cells
        breakdown.policy_losses.append(float(sq.detach() / cells.clamp(min=1.0)))
        breakdown.masked_cells.append(float(cells))
        breakdown.steps.append(t)

    if float(cells_total) == 0:
        raise TrainingError("mask set leaves no cell to impute")
    breakdown.loss = sq_total / cells_total
    return breakdown


def training_step(
    model: ImputationTransformer,
    optimizer: torch.optim.Optimizer,
    x0: torch.Tensor,
    masks,
    sched: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    reference_mode: str = "unconditional",
) -> LossBreakdown:
    """One optimizer update on a batch; aborts with diagnostics on a non-finite loss."""
    model.train()
    optimizer.zero_grad()
    try:
        terms = compute_loss(model, x0, masks, sched, generator, reference_mode)
    except InferenceError as exc:
        raise TrainingError(f"forward pass failed: {exc}") from exc
    if not torch.isfinite(terms.loss):
        steps = sorted({int(s) for t in terms.steps for s in t})
        raise TrainingError(
            f"non-finite loss {float(terms.loss)} (per-mask losses {terms.policy_losses}, steps {steps}, "
            f"input range [{float(x0.min())}, {float(x0.max())}])"
        )
    terms.loss.backward()
    optimizer.step()
    return terms


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> Tuple[Adam, MultiStepLR]:
    optimizer = Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    milestones = sorted({max(1, int(m * cfg.epochs)) for m in cfg.lr_decay.milestones})
    return optimizer, MultiStepLR(optimizer, milestones=milestones, gamma=cfg.lr_decay.gamma)


def batch_masks(masking: MaskingConfig, shape, rng: np.random.Generator):
    """(mask, policy) list for a (B, W, K) batch; random masks differ per example."""
    B, W, K = shape
    if masking.strategy == "random":
        m = np.stack([random_mask(W, K, masking.miss_prob, rng) for _ in range(B)])
        return [(m, SENTINEL_POLICY), (1.0 - m, SENTINEL_POLICY)]
    return masking.policies(W, K)


def _as_array(windows) -> np.ndarray:
    if isinstance(windows, WindowSet):
        return windows.stacked()
    if isinstance(windows, np.ndarray):
        return windows
    return np.stack([w.values if isinstance(w, MtsWindow) else np.asarray(w) for w in windows]) if len(windows) else np.empty(0)


def _append_log(log_path: str, record: TrainRecord, fresh: bool):
    mode = "w" if fresh or not os.path.exists(log_path) else "a"
    with open(log_path, mode, newline="") as handle:
        writer = csv.writer(handle)
        if mode == "w":
            writer.writerow(TRAIN_LOG_COLUMNS)
        writer.writerow([record.epoch, f"{record.loss:.8f}", f"{record.seconds:.3f}"])


def train(
    model: ImputationTransformer,
    windows: Union[WindowSet, Sequence[MtsWindow], np.ndarray],
    cfg: TrainConfig,
    sched: NoiseSchedule,
    start_epoch: int = 0,
    log_path: Optional[str] = None,
    checkpointer: Optional[Checkpointer] = None,
    optimizer_state: Optional[Dict] = None,
    best_loss: float = float("inf"),
) -> Tuple[ImputationTransformer, List[TrainRecord]]:
    """
    Train ``model`` for epochs ``start_epoch + 1 .. cfg.epochs``.

    Each epoch draws its shuffling, steps, noises and random masks from
    generators keyed by ``(cfg.seed, epoch)``, so a resumed run replays the
    same epochs an uninterrupted run would.

    Args:
        model: Network to train in place.
        windows: Normalized training windows.
        cfg: Training configuration.
        sched: Noise schedule.
        start_epoch: Epochs already completed (resume).
        log_path: CSV file receiving one ``epoch,loss,seconds`` row per epoch.
        checkpointer: Called with ``"best"`` on every loss improvement and
            ``"final"`` at the end, together with the optimizer state.
        optimizer_state: Optimizer state dict to resume from.
        best_loss: Best epoch loss seen before ``start_epoch``.

    Returns:
        The trained model and the records of the epochs run here.
    """
    data = torch.as_tensor(_as_array(windows), dtype=torch.float32)
    if data.numel() == 0 or data.dim() != 3:
        raise TrainingError("empty dataset: no training windows")
    if data.shape[2] != model.n_features:
        raise TrainingError(f"windows have {data.shape[2]} features, the network was built for {model.n_features}")
    if start_epoch >= cfg.epochs:
        raise TrainingError(f"already trained for {start_epoch} epochs, nothing left of the {cfg.epochs} epoch budget")

    device = torch.device(cfg.device)
    model.to(device)
    optimizer, scheduler = build_optimizer(model, cfg)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
        scheduler.last_epoch = start_epoch

    n = data.shape[0]
    records: List[TrainRecord] = []
    logger.info(
        f"Training on {n} windows of shape {tuple(data.shape[1:])} for epochs {start_epoch + 1}..{cfg.epochs}",
        extra={'event_type': 'train_start', 'n_windows': n, 'start_epoch': start_epoch, 'epochs': cfg.epochs},
    )

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        started = time.perf_counter()
        generator = make_generator(cfg.seed, epoch)
        mask_rng = np.random.default_rng([cfg.seed, epoch])
        order = torch.randperm(n, generator=generator)

        batch_losses, per_mask = [], []
        for begin in range(0, n, cfg.batch_size):
            x0 = data[order[begin:begin + cfg.batch_size]].to(device)
            masks = batch_masks(cfg.mask_policy, x0.shape, mask_rng)
            try:
                terms = training_step(model, optimizer, x0, masks, sched, generator, cfg.reference_mode)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {begin // cfg.batch_size}: {exc}") from exc
            batch_losses.append(float(terms.loss))
            per_mask.append(terms.policy_losses)
        scheduler.step()

        record = TrainRecord(
            epoch=epoch,
            loss=float(np.mean(batch_losses)),
            seconds=time.perf_counter() - started,
            policy_losses=tuple(float(v) for v in np.mean(per_mask, axis=0)),
        )
        records.append(record)
        logger.info(
            f"Epoch {epoch}/{cfg.epochs} loss={record.loss:.6f} ({record.seconds:.2f}s)",
            extra={'event_type': 'train_epoch_complete', 'epoch': epoch, 'loss': record.loss,
                   'seconds': record.seconds, 'policy_losses': list(record.policy_losses),
                   'lr': optimizer.param_groups[0]["lr"]},
        )
        if log_path:
            _append_log(log_path, record, fresh=(epoch == 1))

        state = {"optimizer": optimizer.state_dict(), "best_loss": min(best_loss, record.loss)}
        if record.loss < best_loss:
            best_loss = record.loss
            if checkpointer:
                checkpointer("best", record, state)

    if checkpointer:
        checkpointer("final", records[-1], {"optimizer": optimizer.state_dict(), "best_loss": best_loss})
    model.eval()
    return model, records
