import logging
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)  # Module-specific logger

METRIC_COLUMNS = ("P", "R", "F1", "F1_raw", "R_AUC_PR", "R_AUC_ROC", "ADD", "GAP")
ABLATION_COLUMNS = ("P", "R", "F1", "R_AUC_PR", "ADD", "GAP")
GROUP_COLUMNS = ("dataset", "mode")


def summarize_runs(rows) -> pd.DataFrame:
    """
    Mean and standard deviation of every metric across seeds.

    Args:
        rows (list[dict] | DataFrame): Metric rows with dataset, mode, seed and metric columns.

    Returns:
        DataFrame: One row per (dataset, mode) with ``<metric>_mean``, ``<metric>_std`` and ``n_seeds``.
    """
    frame = pd.DataFrame(rows)
    if frame.empty:
        logger.warning("No metric rows to summarize.", extra={'event_type': 'summary_empty'})
        return pd.DataFrame(columns=list(GROUP_COLUMNS) + ["n_seeds"])
    metrics = [c for c in METRIC_COLUMNS if c in frame.columns]
    grouped = frame.groupby(list(GROUP_COLUMNS), sort=False)[metrics]
    summary = grouped.agg(["mean", "std"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    # a single seed has no spread
    summary = summary.fillna({f"{metric}_std": 0.0 for metric in metrics})
    summary["n_seeds"] = frame.groupby(list(GROUP_COLUMNS), sort=False).size()
    return summary.reset_index()


def _cell(mean: float, std: float) -> str:
    if np.isnan(mean):
        return "n/a"
    return f"{mean:.4f} ± {std:.4f}"


def format_ablation_table(rows, failures: Optional[Mapping[str, str]] = None, order: Optional[Iterable[str]] = None) -> pd.DataFrame:
    """
    Consolidated ablation table: one row per variant, ``mean ± std`` cells.

    Args:
        rows: Metric rows of the variants that ran.
        failures (dict, optional): Variant -> error category of the variants that failed.
        order (iterable, optional): Row order of the variants.

    Returns:
        DataFrame: Columns mode, P, R, F1, R_AUC_PR, ADD, GAP, status. GAP is the mean
        final-step error on anomalous minus normal timestamps.
    """
    failures = dict(failures or {})
    summary = summarize_runs(rows)
    by_mode: Dict[str, pd.Series] = {row["mode"]: row for _, row in summary.iterrows()} if not summary.empty else {}
    modes = list(order) if order is not None else list(by_mode) + [m for m in failures if m not in by_mode]

    table = []
    for mode in modes:
        entry = {"mode": mode}
        if mode in by_mode:
            row = by_mode[mode]
            for column in ABLATION_COLUMNS:
                entry[column] = _cell(row.get(f"{column}_mean", np.nan), row.get(f"{column}_std", np.nan))
            entry["status"] = "ok"
        else:
            for column in ABLATION_COLUMNS:
                entry[column] = "-"
            entry["status"] = f"failed ({failures.get(mode, 'not run')})"
        table.append(entry)
    return pd.DataFrame(table, columns=["mode", *ABLATION_COLUMNS, "status"])
