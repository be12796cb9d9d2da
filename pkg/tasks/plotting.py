import logging
import os
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)


def _shade(ax, mask: np.ndarray, color: str, label: str):
    edges = np.diff(np.r_[0, mask.astype(np.int64), 0])
    for i, (start, end) in enumerate(zip(np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0])):
        ax.axvspan(start, end, color=color, alpha=0.25, label=label if i == 0 else None)


def plot_detection(path: str, score, truth, votes, labels, threshold: Optional[float] = None, xi: Optional[int] = None) -> str:
    """
    Score, votes and final labels over time with the ground truth shaded.

    Returns:
        str: The PNG path written.
    """
    score = np.asarray(score, dtype=np.float64)
    truth = np.asarray(truth)
    votes = np.asarray(votes)
    labels = np.asarray(labels)
    x = np.arange(score.shape[0])

    fig, (ax_score, ax_votes) = plt.subplots(2, 1, figsize=(12, 5), sharex=True)
    ax_score.plot(x, score, lw=0.8, color="tab:blue", label="final-step error")
    if threshold is not None and np.isfinite(threshold):
        ax_score.axhline(threshold, color="tab:red", ls="--", lw=0.8, label="threshold")
    _shade(ax_score, truth, "tab:orange", "ground truth")
    ax_score.set_ylabel("score")
    ax_score.legend(loc="upper right", fontsize=8)

    ax_votes.step(x, votes, where="mid", lw=0.8, color="tab:gray", label="votes")
    if xi is not None:
        ax_votes.axhline(xi, color="tab:red", ls="--", lw=0.8, label="vote threshold")
    _shade(ax_votes, labels, "tab:green", "detected")
    ax_votes.set_ylabel("votes")
    ax_votes.set_xlabel("timestamp")
    ax_votes.legend(loc="upper right", fontsize=8)

    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.debug(f"Detection plot written to {path}", extra={'event_type': 'plot_written', 'path': path})
    return path
