"""Robustness of saved fold models to increasing modality-level missingness."""
import logging

import numpy as np
import pandas as pd

from cohort.missingness import apply_missingness, check_grid
from engine.trainer import score_run
from errors import ContractError
from evaluation.metrics import SUMMARY_METRICS, summarize

logger = logging.getLogger(__name__)

GRID_STEP = 0.1


def default_grid(baseline):
    """The natural baseline followed by every multiple of 0.1 above it, up to 1."""
    above = np.arange(np.floor(baseline / GRID_STEP) + 1, round(1 / GRID_STEP) + 1) * GRID_STEP
    return [float(baseline)] + [float(round(f, 10)) for f in above if f > baseline + 1e-9]


def sweep_missingness(plan, restored, cohort, modality, fractions=None, seed=0):
    """Mask `modality` at each fraction and re-score the frozen fold models.

    Masking is drawn once per fraction over the whole cohort; every fold model
    is then judged on its own test rows. One row per fraction with the mean and
    SEM of each metric across folds.
    """
    if modality not in cohort.blocks:
        raise ContractError(f'cohort has no modality {modality!r}')
    if not any(modality in saved.model.modalities for saved in restored):
        logger.warning('no saved model reads %s; the sweep will be flat', modality)
    baseline = cohort.blocks[modality].missing_fraction
    grid = check_grid(baseline, default_grid(baseline) if fractions is None else fractions)

    rows = []
    for fraction in grid:
        masked = apply_missingness(cohort, modality, fraction, seed=seed)
        reports, _ = score_run(plan, restored, masked)
        row = {'modality': modality, 'fraction': fraction,
               'realized': masked.blocks[modality].missing_fraction}
        for metric, (mean, sem) in summarize(reports).items():
            row[metric] = mean
            row[f'{metric}_sem'] = sem
        rows.append(row)
        logger.info('%s missing %.3f: harrell %.4f', modality, row['realized'], row['harrell_c'])
    columns = ['modality', 'fraction', 'realized']
    for metric in SUMMARY_METRICS:
        columns += [metric, f'{metric}_sem']
    return pd.DataFrame(rows, columns=columns)
