"""
Mask construction and merging.

Masks are float arrays of shape (W, K) holding 1 for observed cells and 0 for
masked (to be imputed) cells.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from imputad.dataset import MtsWindow
from imputad.errors import ConfigError, DataError

MASK_STRATEGIES = ("grating", "random", "forecasting", "reconstruction")
GRATING_POLICIES = (0, 1)
SENTINEL_POLICY = 2
N_POLICIES = 3


@dataclass(frozen=True)
class MaskPair:
    """Two complementary masks; every cell is masked by exactly one of them."""
    m0: np.ndarray
    m1: np.ndarray
    policy_ids: Tuple[int, int] = GRATING_POLICIES

    def __post_init__(self):
        if self.m0.shape != self.m1.shape:
            raise DataError(f"mask shapes differ: {self.m0.shape} vs {self.m1.shape}")
        if not np.array_equal(self.m0 + self.m1, np.ones_like(self.m0)):
            raise DataError("masks of a pair must be complementary")

    def policies(self) -> List[Tuple[np.ndarray, int]]:
        return [(self.m0, self.policy_ids[0]), (self.m1, self.policy_ids[1])]


@dataclass(frozen=True)
class MaskedWindow:
    window: MtsWindow
    mask: np.ndarray
    policy: int

    def __post_init__(self):
        if self.mask.shape != self.window.values.shape:
            raise DataError(f"mask shape {self.mask.shape} does not match window {self.window.values.shape}")

    @property
    def observed(self) -> np.ndarray:
        return self.window.values * self.mask


def grating_masks(W: int, K: int, n_masked: int = 5, n_unmasked: int = 5) -> MaskPair:
    """
    Staggered masked/unmasked time segments, identical across features.

    The time axis is split into ``n_masked + n_unmasked`` equal segments; policy 0
    masks the even segments and policy 1 the odd ones.
    """
    if n_masked != n_unmasked:
        raise ConfigError(f"grating needs equal masked and unmasked segment counts, got {n_masked} and {n_unmasked}")
    n_segments = n_masked + n_unmasked
    if n_segments < 2 or W % n_segments:
        raise ConfigError(f"window length W={W} is not divisible by the {n_segments} grating segments")
    segment = np.arange(W) // (W // n_segments)
    observed0 = (segment % 2 == 1).astype(np.float64)
    m0 = np.repeat(observed0[:, None], K, axis=1)
    return MaskPair(m0=m0, m1=1.0 - m0, policy_ids=GRATING_POLICIES)


def random_mask(W: int, K: int, miss_prob: float = 0.5, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """I.i.d. cell mask with at least one masked and one observed cell."""
    if not 0 < miss_prob < 1:
        raise ConfigError(f"miss_prob must lie in (0, 1), got {miss_prob}")
    if W * K < 2:
        raise ConfigError(f"a {W}x{K} window cannot hold both a masked and an observed cell")
    rng = rng if rng is not None else np.random.default_rng()
    while True:
        mask = (rng.random((W, K)) >= miss_prob).astype(np.float64)
        if 0 < mask.sum() < mask.size:
            return mask


def random_pair(W: int, K: int, miss_prob: float = 0.5, rng: Optional[np.random.Generator] = None) -> MaskPair:
    mask = random_mask(W, K, miss_prob, rng)
    return MaskPair(m0=mask, m1=1.0 - mask, policy_ids=(SENTINEL_POLICY, SENTINEL_POLICY))


def ablation_mask(W: int, K: int, mode: str) -> np.ndarray:
    """Forecasting observes the first half and masks the second; reconstruction masks everything."""
    if mode == "forecasting":
        if W % 2:
            raise ConfigError(f"forecasting mask needs an even window length, got W={W}")
        mask = np.ones((W, K))
        mask[W // 2:] = 0.0
        return mask
    if mode == "reconstruction":
        return np.zeros((W, K))
    raise ConfigError(f"unknown ablation mask mode '{mode}'")


def mask_policies(
    strategy: str,
    W: int,
    K: int,
    n_masked: int = 5,
    n_unmasked: int = 5,
    miss_prob: float = 0.5,
    rng: Optional[np.random.Generator] = None,
) -> List[Tuple[np.ndarray, int]]:
    """
    The (mask, policy) list a window is imputed under for a masking strategy.

    Grating and random strategies return a complementary pair; the ablation
    strategies return a single mask tagged with the sentinel policy.
    """
    if strategy == "grating":
        return grating_masks(W, K, n_masked, n_unmasked).policies()
    if strategy == "random":
        return random_pair(W, K, miss_prob, rng).policies()
    if strategy in ("forecasting", "reconstruction"):
        return [(ablation_mask(W, K, strategy), SENTINEL_POLICY)]
    raise ConfigError(f"unknown masking strategy '{strategy}', expected one of {MASK_STRATEGIES}")


def merge_imputations(pred0, pred1, pair: MaskPair):
    """Take ``pred0`` where ``m0`` masks and ``pred1`` where ``m1`` masks."""
    if pred0.shape[-2:] != pair.m0.shape[-2:] or pred1.shape[-2:] != pair.m1.shape[-2:]:
        raise DataError(
            f"prediction shapes {tuple(pred0.shape)} / {tuple(pred1.shape)} do not match mask {pair.m0.shape}"
        )
    return pred0 * (1.0 - pair.m0) + pred1 * (1.0 - pair.m1)


class MaskingConfig(BaseModel):
    strategy: str = Field("grating", description="grating, random, forecasting or reconstruction")
    n_masked: int = Field(5, ge=1, description="Masked grating segments per window")
    n_unmasked: int = Field(5, ge=1, description="Unmasked grating segments per window")
    miss_prob: float = Field(0.5, gt=0.0, lt=1.0, description="Cell masking probability of the random strategy")

    @field_validator("strategy")
    @classmethod
    def _known_strategy(cls, value: str) -> str:
        if value not in MASK_STRATEGIES:
            raise ValueError(f"unknown masking strategy '{value}', expected one of {MASK_STRATEGIES}")
        return value

    @model_validator(mode="after")
    def _staggered(self):
        if self.n_masked != self.n_unmasked:
            raise ValueError("grating needs equal masked and unmasked segment counts")
        return self

    def policies(self, W: int, K: int, rng: Optional[np.random.Generator] = None) -> List[Tuple[np.ndarray, int]]:
        return mask_policies(self.strategy, W, K, self.n_masked, self.n_unmasked, self.miss_prob, rng)
