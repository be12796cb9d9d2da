import logging
import os
from typing import Dict, List, Optional, Sequence

import pandas as pd

from commands.experiment import dataset_dir, run_seed
from config.experiment import ExperimentConfig
from imputad.detector import VARIANTS
from imputad.errors import ImputadError
from tasks.summary import format_ablation_table

logger = logging.getLogger(__name__)

ABLATION_FILE = "ablation.csv"


def cmd_ablate(cfg: ExperimentConfig, modes: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Run every ablation variant over the configured seeds and tabulate them.

    All variants share the seed list. A variant that fails is logged and listed
    in the table with its error category; the others still run.

    Args:
        cfg: Base experiment config.
        modes: Variants to run (default: all).

    Returns:
        DataFrame: The consolidated table, also written to ``ablation.csv``.
    """
    modes = list(modes or VARIANTS)
    rows: List[Dict] = []
    failures: Dict[str, str] = {}

    for mode in modes:
        try:
            vcfg = cfg.for_variant(mode)
            for seed in vcfg.seeds:
                # inference-only variants reuse the checkpoint trained for their base variant
                report = run_seed(vcfg, seed, retrain=VARIANTS[mode].ensemble)
                rows.append({"dataset": os.path.basename(dataset_dir(vcfg)), "mode": mode, "seed": seed, **report.to_row()})
        except ImputadError as exc:
            failures[mode] = exc.category
            logger.error(
                f"Variant '{mode}' failed: {exc}",
                exc_info=True,
                extra={'event_type': 'ablation_variant_failed', 'mode': mode, 'category': exc.category},
            )
        except Exception as exc:
            failures[mode] = ImputadError.category
            logger.error(
                f"Variant '{mode}' failed unexpectedly: {exc}",
                exc_info=True,
                extra={'event_type': 'ablation_variant_failed', 'mode': mode, 'category': ImputadError.category},
            )
        else:
            logger.info(f"Variant '{mode}' finished", extra={'event_type': 'ablation_variant_complete', 'mode': mode})

    table = format_ablation_table(rows, failures=failures, order=modes)
    out = dataset_dir(cfg)
    os.makedirs(out, exist_ok=True)
    table.to_csv(os.path.join(out, ABLATION_FILE), index=False)
    logger.info(
        f"Ablation finished: {len(modes) - len(failures)} of {len(modes)} variants succeeded",
        extra={'event_type': 'ablation_complete', 'failed': sorted(failures)},
    )
    return table
