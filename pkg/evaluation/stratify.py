"""Risk-group stratification: cutoff, Kaplan-Meier curves and log-rank per endpoint."""
import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import pandas as pd

from errors import ContractError
from evaluation.metrics import km_estimate, logrank_test, optimal_threshold

logger = logging.getLogger(__name__)

HIGH = 'high'
LOW = 'low'


def assign_groups(scores, cutoff):
    return np.where(np.asarray(scores, dtype=np.float64) > cutoff, HIGH, LOW)


@dataclass
class Stratification:
    cutoff: float
    cutoff_source: str
    groups: pd.DataFrame
    curves: pd.DataFrame
    report: pd.DataFrame
    endpoints: Dict[str, dict] = field(default_factory=dict)


def align_scores(pooled, patient_ids):
    """Pooled scores reordered to `patient_ids`; every patient must be covered."""
    lookup = dict(zip(pooled['patient_id'].astype(str), pooled['pooled_score'].astype(float)))
    missing = [pid for pid in patient_ids if pid not in lookup]
    if missing:
        raise ContractError(f'pooled scores do not cover {len(missing)} patients, e.g. {missing[0]!r}')
    return np.array([lookup[pid] for pid in patient_ids])


def stratify(patient_ids, scores, outcomes, cutoff=None):
    """Split patients at a cutoff and compare the groups on every endpoint.

    `outcomes` maps endpoint name to (times, events) aligned with `patient_ids`;
    the first endpoint (overall survival) drives the cutoff search when no
    cutoff is given.
    """
    if not outcomes:
        raise ContractError('stratification needs at least one endpoint')
    scores = np.asarray(scores, dtype=np.float64)
    names = list(outcomes)
    source = 'fixed'
    if cutoff is None:
        times, events = outcomes[names[0]]
        cutoff = optimal_threshold(scores, times, events).cutoff
        source = f'optimal on {names[0]}'
    groups = assign_groups(scores, cutoff)
    high = groups == HIGH
    if high.all() or not high.any():
        raise ContractError(f'cutoff {cutoff:g} leaves one risk group empty')
    logger.info('cutoff %.6g (%s): %d high-risk, %d low-risk', cutoff, source, high.sum(), (~high).sum())

    curve_rows, report_rows, endpoints = [], [], {}
    for name in names:
        times, events = (np.asarray(a) for a in outcomes[name])
        result = logrank_test(times[high], events[high], times[~high], events[~high])
        for label, members in ((HIGH, high), (LOW, ~high)):
            curve = km_estimate(times[members], events[members])
            curve_rows.extend({'endpoint': name, 'group': label, **row} for row in curve.rows())
        row = {
            'endpoint': name,
            'cutoff': float(cutoff),
            'n_high': int(high.sum()),
            'n_low': int((~high).sum()),
            'events_high': int(events[high].sum()),
            'events_low': int(events[~high].sum()),
            'chi2': result.chi2,
            'p_value': result.p_value,
        }
        report_rows.append(row)
        endpoints[name] = row

    group_frame = pd.DataFrame({'patient_id': list(patient_ids), 'pooled_score': scores, 'risk_group': groups})
    return Stratification(float(cutoff), source, group_frame, pd.DataFrame(curve_rows),
                          pd.DataFrame(report_rows), endpoints)
