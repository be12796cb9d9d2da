"""
Synthetic benchmark: sinusoids plus noise with injected anomalous events.
"""
import logging
import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import pandas as pd

from imputad.errors import DataError

logger = logging.getLogger(__name__)

EVENT_KINDS = ("spike", "level_shift", "correlation_break")


@dataclass(frozen=True)
class InjectedEvent:
    kind: str
    start: int
    end: int
    feature: int


def _base_signals(length: int, n_features: int, rng: np.random.Generator, noise: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    periods = 40.0 + 25.0 * np.arange(n_features)
    phases = rng.uniform(0, 2 * np.pi, n_features)
    t = np.arange(length)[:, None]
    clean = np.sin(2 * np.pi * t / periods + phases)
    return clean + noise * rng.standard_normal((length, n_features)), periods, phases


def inject_events(values: np.ndarray, offset: int, periods, phases, n_events: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, List[InjectedEvent]]:
    """
    Inject ``n_events`` events, one per equal slice of the series, cycling
    through spikes, level shifts and correlation breaks (one feature's phase
    decoupled from the others).
    """
    length, n_features = values.shape
    slot = length // n_events
    if slot < 30:
        raise DataError(f"test length {length} is too short for {n_events} events")
    values = values.copy()
    labels = np.zeros(length, dtype=np.int64)
    events = []
    for i in range(n_events):
        kind = EVENT_KINDS[i % len(EVENT_KINDS)]
        size = int(rng.integers(3, 6)) if kind == "spike" else int(rng.integers(10, 21))
        start = i * slot + int(rng.integers(5, slot - size - 5))
        end = start + size
        feature = int(rng.integers(n_features))
        if kind == "spike":
            values[start:end, feature] += rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 4.0)
        elif kind == "level_shift":
            values[start:end, feature] += rng.choice([-1.0, 1.0]) * rng.uniform(1.5, 2.0)
        else:
            t = np.arange(offset + start, offset + end)
            values[start:end, feature] = np.sin(2 * np.pi * t / periods[feature] + phases[feature] + np.pi)
        labels[start:end] = 1
        events.append(InjectedEvent(kind=kind, start=start, end=end, feature=feature))
    return values, labels, events


def make_synthetic_dataset(
    out_dir: str,
    n_features: int = 3,
    train_len: int = 4000,
    test_len: int = 2000,
    n_events: int = 12,
    seed: int = 0,
    noise: float = 0.05,
) -> str:
    """
    Write ``train.csv``, ``test.csv`` and ``test_label.csv`` into ``out_dir``.

    Args:
        out_dir: Target dataset directory (created if missing).
        n_features: Number of sinusoidal features, each with its own period and phase.
        train_len: Rows of the clean training split.
        test_len: Rows of the test split.
        n_events: Anomalous events injected into the test split.
        seed: Seed of every random draw.
        noise: Standard deviation of the additive Gaussian noise.

    Returns:
        str: The dataset directory.
    """
    if n_features < 1 or n_events < 1:
        raise DataError("need at least one feature and one event")
    rng = np.random.default_rng(seed)
    series, periods, phases = _base_signals(train_len + test_len, n_features, rng, noise)
    train, test = series[:train_len], series[train_len:]
    test, labels, events = inject_events(test, train_len, periods, phases, n_events, rng)

    os.makedirs(out_dir, exist_ok=True)
    columns = [f"f{k}" for k in range(n_features)]
    pd.DataFrame(train, columns=columns).to_csv(os.path.join(out_dir, "train.csv"), index=False)
    pd.DataFrame(test, columns=columns).to_csv(os.path.join(out_dir, "test.csv"), index=False)
    pd.DataFrame({"label": labels}).to_csv(os.path.join(out_dir, "test_label.csv"), index=False)
    logger.info(
        f"Synthetic dataset written to {out_dir}: {n_features} features, {n_events} events",
        extra={'event_type': 'synthetic_dataset_written', 'path': out_dir, 'n_features': n_features,
               'train_len': train_len, 'test_len': test_len, 'anomaly_rate': float(labels.mean()),
               'events': [e.kind for e in events]},
    )
    return out_dir
