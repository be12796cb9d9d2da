"""
Noise schedule, forward corruption and the reverse Gaussian transition.

Step indices are 1-based throughout: ``t`` runs from 1 (least noisy) to ``T``.
Internally the schedule vectors are 0-based numpy arrays, so ``beta[t - 1]``
is the noise level of step ``t``.
"""
from dataclasses import dataclass
from typing import Dict, List, Sequence, Union

import numpy as np
import torch

from imputad.errors import ConfigError, InferenceError

SCHEDULE_SHAPES = ("quadratic", "linear")

Generators = Union[torch.Generator, Sequence[torch.Generator], None]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    tilde_beta: np.ndarray
    shape: str = "quadratic"

    def check_step(self, t: int):
        if not 1 <= int(t) <= self.T:
            raise InferenceError(f"diffusion step {t} outside [1, {self.T}]")

    def beta_at(self, t: int) -> float:
        self.check_step(t)
        return float(self.beta[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self.check_step(t)
        return float(self.alpha_bar[t - 1])

    def tilde_beta_at(self, t: int) -> float:
        self.check_step(t)
        return float(self.tilde_beta[t - 1])

    def tensors(self, device=None, dtype=torch.float32) -> Dict[str, torch.Tensor]:
        """Schedule vectors as tensors, for batched gathers during training."""
        return {
            "beta": torch.tensor(np.array(self.beta), device=device, dtype=dtype),
            "alpha_bar": torch.tensor(np.array(self.alpha_bar), device=device, dtype=dtype),
        }

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist(), "shape": self.shape}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return schedule_from_beta(np.asarray(data["beta"], dtype=np.float64), shape=data.get("shape", "custom"))


def schedule_from_beta(beta: np.ndarray, shape: str = "custom") -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ConfigError("beta must be a non-empty vector")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigError("every beta must lie strictly between 0 and 1")
    alpha_bar = np.cumprod(1.0 - beta)
    tilde_beta = beta.copy()
    tilde_beta[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    for arr in (beta, alpha_bar, tilde_beta):
        arr.setflags(write=False)
    return NoiseSchedule(T=int(beta.size), beta=beta, alpha_bar=alpha_bar, tilde_beta=tilde_beta, shape=shape)


def build_schedule(T: int = 50, beta_min: float = 1e-4, beta_max: float = 0.5, shape: str = "quadratic") -> NoiseSchedule:
    """
    Build a predefined noise schedule.

    Args:
        T: Number of diffusion steps.
        beta_min: Noise level of step 1.
        beta_max: Noise level of step T. Equal to ``beta_min`` gives a constant schedule.
        shape: ``"quadratic"`` interpolates the square roots, ``"linear"`` the values.

    Returns:
        NoiseSchedule with cumulative products and posterior variances filled in.
    """
    if int(T) < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}")
    if shape == "quadratic":
        beta = np.linspace(beta_min ** 0.5, beta_max ** 0.5, int(T)) ** 2
    elif shape == "linear":
        beta = np.linspace(beta_min, beta_max, int(T))
    else:
        raise ConfigError(f"unknown schedule shape '{shape}', expected one of {SCHEDULE_SHAPES}")
    return schedule_from_beta(beta, shape=shape)


def standard_normal(shape, generator: Generators = None, dtype=torch.float32, device=None) -> torch.Tensor:
    """
    Draw standard normal noise.

    A sequence of generators draws one batch row from each, so every window keeps
    its own reproducible stream regardless of how windows are batched.
    """
    if generator is None or isinstance(generator, torch.Generator):
        return torch.randn(shape, generator=generator, dtype=dtype).to(device)
    rows = [torch.randn(tuple(shape[1:]), generator=g, dtype=dtype) for g in generator]
    if len(rows) != shape[0]:
        raise InferenceError(f"got {len(rows)} generators for a batch of {shape[0]}")
    return torch.stack(rows).to(device)


def forward_corrupt(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form forward marginal: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    alpha_bar = sched.alpha_bar_at(t)
    return alpha_bar ** 0.5 * x0 + (1.0 - alpha_bar) ** 0.5 * eps


def implied_noise(x_t, x0, t: int, sched: NoiseSchedule):
    """Inverse of :func:`forward_corrupt`: the noise that takes ``x0`` to ``x_t`` in one draw."""
    alpha_bar = sched.alpha_bar_at(t)
    return (x_t - alpha_bar ** 0.5 * x0) / (1.0 - alpha_bar) ** 0.5


@dataclass
class ForwardTrajectory:
    """Per-step noises and states of one forward run; index ``t - 1`` holds step ``t``."""
    noises: List[torch.Tensor]
    states: List[torch.Tensor]

    def state(self, t: int) -> torch.Tensor:
        return self.states[t - 1]

    def noise(self, t: int) -> torch.Tensor:
        return self.noises[t - 1]


def record_forward_trajectory(x0: torch.Tensor, sched: NoiseSchedule, generator: Generators = None) -> ForwardTrajectory:
    """Run the forward Markov chain step by step, keeping every noise draw and state."""
    noises, states = [], []
    state = x0
    for t in range(1, sched.T + 1):
        beta = sched.beta_at(t)
        eps = standard_normal(x0.shape, generator, dtype=x0.dtype, device=x0.device)
        state = (1.0 - beta) ** 0.5 * state + beta ** 0.5 * eps
        noises.append(eps)
        states.append(state)
    return ForwardTrajectory(noises=noises, states=states)


def closed_form_noise(trajectory: ForwardTrajectory, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """
    The single standard-normal draw that reproduces ``states[t]`` through
    :func:`forward_corrupt`, built from the recorded per-step noises.
    """
    sched.check_step(t)
    total = torch.zeros_like(trajectory.noises[0])
    for i in range(1, t + 1):
        carry = float(np.prod(np.sqrt(1.0 - sched.beta[i:t])))
        total = total + carry * sched.beta_at(i) ** 0.5 * trajectory.noise(i)
    return total / (1.0 - sched.alpha_bar_at(t)) ** 0.5


def oracle_noise(trajectory: ForwardTrajectory, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """
    Recorded step noise rescaled to the reverse parameterization.

    Feeding it to :func:`reverse_step` with ``z = 0`` maps ``states[t]`` exactly
    onto ``states[t - 1]`` (and onto ``x0`` at ``t = 1``).
    """
    scale = ((1.0 - sched.alpha_bar_at(t)) / sched.beta_at(t)) ** 0.5
    return scale * trajectory.noise(t)


def reverse_step(x_t, eps_hat, t: int, sched: NoiseSchedule, z=None):
    """
    One reverse Gaussian transition with fixed posterior variance.

    Args:
        x_t: State at step ``t``.
        eps_hat: Predicted noise.
        t: Current step, 1..T.
        sched: Noise schedule.
        z: Standard normal sample for ``t > 1``; pass zeros (or None) at ``t = 1``.

    Returns:
        mu + sqrt(tilde_beta_t) * z.
    """
    beta = sched.beta_at(t)
    alpha_bar = sched.alpha_bar_at(t)
    mu = (x_t - beta / (1.0 - alpha_bar) ** 0.5 * eps_hat) / (1.0 - beta) ** 0.5
    if z is None:
        return mu
    return mu + sched.tilde_beta_at(t) ** 0.5 * z


def make_generator(seed: int, *keys: int) -> torch.Generator:
    """A CPU generator seeded deterministically from ``seed`` and any integer keys."""
    mixed = np.random.SeedSequence([int(seed)] + [int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0]
    generator = torch.Generator()
    generator.manual_seed(int(mixed) & 0x7FFF_FFFF_FFFF_FFFF)
    return generator

