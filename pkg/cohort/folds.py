import logging
from pathlib import Path

import numpy as np
import pandas as pd

from errors import ConfigError, ParseError
from models import Cohort, FoldPlan

logger = logging.getLogger(__name__)


def stratified_kfold(cohort, k=5, seed=0):
    """Event-stratified k-fold assignment.

    Events are shuffled and dealt round-robin over the folds, then censored
    patients continue the same deal, so fold sizes differ by at most one and
    per-fold event counts by at most one.
    """
    events = cohort.events if isinstance(cohort, Cohort) else np.asarray(cohort, dtype=bool)
    if k < 2:
        raise ConfigError(f'k-fold needs k >= 2, got {k}')
    event_rows = np.flatnonzero(events)
    censored_rows = np.flatnonzero(~events)
    for label, rows in (('event', event_rows), ('censored', censored_rows)):
        if len(rows) < k:
            raise ConfigError(f'{label} stratum has {len(rows)} patients, fewer than k={k}')

    rng = np.random.default_rng(seed)
    assignments = np.empty(len(events), dtype=np.int64)
    shuffled_events = rng.permutation(event_rows)
    shuffled_censored = rng.permutation(censored_rows)
    assignments[shuffled_events] = np.arange(len(shuffled_events)) % k
    assignments[shuffled_censored] = (len(shuffled_events) + np.arange(len(shuffled_censored))) % k
    plan = FoldPlan(k, assignments)
    logger.debug('fold sizes %s', plan.to_dict()['sizes'])
    return plan


def write_folds(plan, patient_ids, path):
    frame = pd.DataFrame({'patient_id': patient_ids, 'fold': plan.assignments})
    frame.to_csv(path, index=False, lineterminator='\n')
    return Path(path)


def read_folds(path, patient_ids):
    """FoldPlan from a folds.csv, ordered like `patient_ids`."""
    path = Path(path)
    if not path.exists():
        raise ParseError('folds file not found', path=path)
    frame = pd.read_csv(path, dtype={'patient_id': str})
    if list(frame.columns) != ['patient_id', 'fold']:
        raise ParseError('header must be patient_id,fold', path=path, row=1)
    lookup = dict(zip(frame['patient_id'], frame['fold'].astype(int)))
    missing = [pid for pid in patient_ids if pid not in lookup]
    if missing:
        raise ParseError(f'{len(missing)} patients have no fold, e.g. {missing[0]!r}', path=path)
    assignments = np.array([lookup[pid] for pid in patient_ids], dtype=np.int64)
    return FoldPlan(int(assignments.max()) + 1, assignments)
