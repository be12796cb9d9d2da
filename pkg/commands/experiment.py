"""
Experiment commands: prepare a dataset, train, detect and evaluate.

Artifacts live under ``<out_dir>/<dataset>/``: normalizer stats and the
dataset summary at the top, ``<mode>/seed_<n>/`` per run (checkpoints,
``train_log.csv``, ``predictions.csv``, plot) and the shared ``metrics.csv``
and ``metrics_summary.csv``.
"""
import json
import logging
import os
from typing import Dict, List, Optional

import pandas as pd

from config.experiment import ExperimentConfig
from config.timezone_config import timestamp
from imputad.checkpoint import load_checkpoint, save_checkpoint, variant_flags
from imputad.dataset import DatasetSplits, check_layout, fit_normalizer, load_dataset_dir, load_label_file, windowize
from imputad.denoiser import build_denoiser
from imputad.detector import VARIANTS, detect_variant
from imputad.errors import DataError, MetricsError
from imputad.metrics import MetricsReport, evaluate_all, events_from_labels
from imputad.trainer import train
from tasks.plotting import plot_detection
from tasks.synthetic import make_synthetic_dataset
from tasks.summary import METRIC_COLUMNS, summarize_runs

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "metrics_summary.csv"
THRESHOLDS_FILE = "thresholds.json"
METRICS_ROW_COLUMNS = ("dataset", "mode", *METRIC_COLUMNS, "seed", "run_at")


def dataset_name(cfg: ExperimentConfig) -> str:
    return os.path.basename(os.path.normpath(cfg.dataset.path))


def dataset_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, dataset_name(cfg))


def training_mode(mode: str) -> str:
    """Variants that only change inference reuse the checkpoint of the variant they derive from."""
    return "imputation" if not VARIANTS[mode].ensemble else mode


def run_dir(cfg: ExperimentConfig, seed: int, mode: Optional[str] = None) -> str:
    return os.path.join(dataset_dir(cfg), mode or cfg.mode, f"seed_{seed}")


def checkpoint_path(cfg: ExperimentConfig, seed: int, tag: str = "final", mode: Optional[str] = None) -> str:
    return os.path.join(run_dir(cfg, seed, training_mode(mode or cfg.mode)), f"checkpoint_{tag}.pt")


def _load_splits(cfg: ExperimentConfig) -> DatasetSplits:
    return load_dataset_dir(cfg.dataset.path)


def cmd_prepare(cfg: ExperimentConfig) -> Dict:
    """Validate the dataset layout, fit the normalizer and write ``stats.json`` and ``summary.json``."""
    problems = check_layout(cfg.dataset.path)
    if problems:
        raise DataError("dataset layout invalid: " + "; ".join(problems))
    splits = _load_splits(cfg)
    stats = fit_normalizer(splits.train)
    labels = splits.test.labels
    summary = {
        "name": splits.name,
        "n_features": splits.train.n_features,
        "train_length": splits.train.length,
        "test_length": splits.test.length,
        "anomaly_rate": float(labels.mean()),
        "n_events": len(events_from_labels(labels)),
        "replaced_cells": splits.train.replaced_cells + splits.test.replaced_cells,
    }
    out = dataset_dir(cfg)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "stats.json"), "w", encoding="utf-8") as handle:
        json.dump(stats.to_dict(), handle, indent=2)
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as handle:
        json.dump(summary, handle, indent=2)
    logger.info(f"Prepared dataset '{splits.name}'", extra={'event_type': 'dataset_prepared', **summary})
    return summary


def cmd_train(cfg: ExperimentConfig, seed: Optional[int] = None, resume: Optional[str] = None) -> str:
    """
    Train the checkpoint of ``cfg.mode`` for one seed.

    Returns:
        str: Path of the final checkpoint.
    """
    mode = training_mode(cfg.mode)
    seed = cfg.seed if seed is None else int(seed)
    vcfg = cfg.for_variant(mode).with_seed(seed)
    splits = _load_splits(vcfg)
    stats = fit_normalizer(splits.train)
    windows = windowize(splits.train, stats, vcfg.dataset.window, vcfg.dataset.train_stride)
    sched = vcfg.schedule.build()
    out = run_dir(vcfg, seed, mode)
    os.makedirs(out, exist_ok=True)

    start_epoch, optimizer_state, best_loss = 0, None, float("inf")
    if resume:
        checkpoint = load_checkpoint(resume, device=vcfg.train.device)
        model = checkpoint.model
        start_epoch = checkpoint.epoch
        optimizer_state = (checkpoint.training_state or {}).get("optimizer")
        best_loss = float(checkpoint.metadata.get("best_loss", best_loss))
        logger.info(f"Resuming from {resume} at epoch {start_epoch}",
                    extra={'event_type': 'train_resume', 'path': resume, 'epoch': start_epoch})
    else:
        model = build_denoiser(vcfg.denoiser, splits.train.n_features, seed=seed)

    flags = variant_flags(vcfg.masking, vcfg.train.reference_mode, vcfg.denoiser, vcfg.dataset.window)
    config_snapshot = vcfg.model_dump(mode="json")

    def checkpointer(tag, record, state):
        save_checkpoint(
            checkpoint_path(vcfg, seed, tag, mode),
            model,
            sched,
            stats,
            flags,
            metadata={"epoch": record.epoch, "loss": record.loss, "best_loss": state["best_loss"],
                      "seed": seed, "tag": tag, "dataset": splits.name},
            config=config_snapshot,
            training_state={"optimizer": state["optimizer"]},
        )

    train(
        model,
        windows,
        vcfg.train,
        sched,
        start_epoch=start_epoch,
        log_path=os.path.join(out, "train_log.csv"),
        checkpointer=checkpointer,
        optimizer_state=optimizer_state,
        best_loss=best_loss,
    )
    return checkpoint_path(vcfg, seed, "final", mode)


def cmd_detect(cfg: ExperimentConfig, checkpoint: Optional[str] = None, seed: Optional[int] = None) -> str:
    """
    Score the test split with a checkpoint.

    Returns:
        str: Path of ``predictions.csv`` (timestamp, score, votes, label). The
        thresholds the labels were cut with go to ``thresholds.json`` beside it.
    """
    seed = cfg.seed if seed is None else int(seed)
    checkpoint = checkpoint or checkpoint_path(cfg, seed)
    ckpt = load_checkpoint(checkpoint, device=cfg.train.device)
    splits = _load_splits(cfg)
    if ckpt.n_features != splits.test.n_features:
        raise DataError(
            f"checkpoint {checkpoint} was trained on {ckpt.n_features} features, "
            f"dataset '{splits.name}' has {splits.test.n_features}"
        )
    result = detect_variant(
        cfg.mode, ckpt, splits.test, cfg.ensemble,
        seed=seed, workers=cfg.workers, batch_size=cfg.inference_batch_size, device=cfg.train.device,
    )
    path = result.write_csv(os.path.join(run_dir(cfg, seed), "predictions.csv"))
    result.write_thresholds(os.path.join(run_dir(cfg, seed), THRESHOLDS_FILE))
    logger.info(f"Predictions written to {path}",
                extra={'event_type': 'predictions_written', 'path': path, 'n_anomalies': result.n_anomalies})
    return path


def _upsert_metrics(path: str, row: Dict) -> pd.DataFrame:
    """Replace the row of the same (dataset, mode, seed) so reruns stay idempotent."""
    frame = pd.read_csv(path) if os.path.exists(path) else pd.DataFrame(columns=list(METRICS_ROW_COLUMNS))
    if not frame.empty:
        same = (frame["dataset"] == row["dataset"]) & (frame["mode"] == row["mode"]) & (frame["seed"] == row["seed"])
        frame = frame[~same]
    frame = pd.concat([frame, pd.DataFrame([row])], ignore_index=True) if not frame.empty else pd.DataFrame([row])
    frame = frame.sort_values(["dataset", "mode", "seed"], kind="mergesort")[list(METRICS_ROW_COLUMNS)]
    frame.to_csv(path, index=False)
    return frame


def _final_threshold(predictions: str) -> Optional[float]:
    path = os.path.join(os.path.dirname(predictions), THRESHOLDS_FILE)
    if not os.path.exists(path):
        logger.warning(f"No {THRESHOLDS_FILE} next to {predictions}; plotting without a threshold",
                       extra={'event_type': 'thresholds_missing', 'path': path})
        return None
    with open(path) as handle:
        return float(json.load(handle)["final_threshold"])


def evaluate_predictions(cfg: ExperimentConfig, predictions: str, seed: int, plot: bool = True) -> MetricsReport:
    """Metrics of one predictions file; appends its row to ``metrics.csv`` and refreshes the summary."""
    if not os.path.exists(predictions):
        raise DataError(f"predictions file {predictions} does not exist")
    frame = pd.read_csv(predictions)
    truth = load_label_file(os.path.join(cfg.dataset.path, "test_label.csv"))
    if len(frame) != truth.size:
        raise MetricsError(f"{len(frame)} predictions for {truth.size} labels")
    report = evaluate_all(frame["label"].to_numpy(), truth, score=frame["score"].to_numpy())

    row = {"dataset": dataset_name(cfg), "mode": cfg.mode, **report.to_row(), "seed": int(seed), "run_at": timestamp()}
    out = dataset_dir(cfg)
    os.makedirs(out, exist_ok=True)
    rows = _upsert_metrics(os.path.join(out, METRICS_FILE), row)
    summarize_runs(rows).to_csv(os.path.join(out, SUMMARY_FILE), index=False)

    if plot:
        plot_detection(
            os.path.join(os.path.dirname(predictions), "detection.png"),
            frame["score"].to_numpy(), truth, frame["votes"].to_numpy(), frame["label"].to_numpy(),
            threshold=_final_threshold(predictions),
            xi=cfg.ensemble.xi if VARIANTS[cfg.mode].ensemble else 0,
        )
    return report


def cmd_evaluate(cfg: ExperimentConfig, predictions: Optional[str] = None, seed: Optional[int] = None) -> List[MetricsReport]:
    """
    Evaluate one predictions file, or the predictions of every configured seed.

    Returns:
        list[MetricsReport]: One report per evaluated seed.
    """
    if predictions:
        return [evaluate_predictions(cfg, predictions, cfg.seed if seed is None else seed)]
    seeds = cfg.seeds if seed is None else [int(seed)]
    return [evaluate_predictions(cfg, os.path.join(run_dir(cfg, s), "predictions.csv"), s) for s in seeds]


def run_seed(cfg: ExperimentConfig, seed: int, retrain: bool = True) -> MetricsReport:
    """Train (unless a checkpoint exists and ``retrain`` is off), detect and evaluate one seed."""
    checkpoint = checkpoint_path(cfg, seed)
    if retrain or not os.path.exists(checkpoint):
        checkpoint = cmd_train(cfg, seed=seed)
    predictions = cmd_detect(cfg, checkpoint=checkpoint, seed=seed)
    return evaluate_predictions(cfg, predictions, seed)


def cmd_synth(cfg: ExperimentConfig, n_features: int = 3, train_len: int = 4000, test_len: int = 2000,
              n_events: int = 12, seed: Optional[int] = None) -> str:
    """Write the synthetic benchmark into ``cfg.dataset.path``."""
    return make_synthetic_dataset(cfg.dataset.path, n_features=n_features, train_len=train_len,
                                  test_len=test_len, n_events=n_events, seed=cfg.seed if seed is None else seed)
