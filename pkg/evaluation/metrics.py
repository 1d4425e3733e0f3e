"""Censoring-aware discrimination metrics and Kaplan-Meier estimation.

Concordance conventions: a pair (i, j) is comparable when T_i < T_j and
patient i had the event; a higher score for i is concordant and equal scores
count one half. Pairs tied in time are never comparable.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc

from errors import ContractError, NoEventsError, UndefinedMetricError
from models import MetricsReport, SurvivalCurve

logger = logging.getLogger(__name__)

HORIZON_PERCENTILES = (25, 50, 75)


def _check(scores, times, events):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events, dtype=bool).reshape(-1)
    if not (len(scores) == len(times) == len(events)):
        raise ContractError('scores, times and events must have equal lengths')
    return scores, times, events


def _pair_credit(scores):
    """credit[i, j] = 1 if s_i > s_j, 0.5 if equal, 0 otherwise."""
    return (scores[:, None] > scores[None, :]) + 0.5 * (scores[:, None] == scores[None, :])


def _weighted_concordance(scores, times, events, weights, tau=np.inf):
    comparable = events[:, None] & (times[:, None] < times[None, :]) & (times <= tau)[:, None]
    pair_weight = np.where(comparable, weights[:, None], 0.0)
    total = pair_weight.sum()
    if not comparable.any():
        raise UndefinedMetricError('undefined concordance: no comparable pairs')
    if not total > 0 or not np.isfinite(total):
        raise UndefinedMetricError('IPCW undefined: censoring survival reaches 0 before the events')
    return float((pair_weight * _pair_credit(scores)).sum() / total)


def harrell_c(scores, times, events):
    scores, times, events = _check(scores, times, events)
    return _weighted_concordance(scores, times, events, np.ones(len(scores)))


# ============== KAPLAN-MEIER ==============
def km_estimate(times, events):
    """Product-limit estimate evaluated at every distinct observed time."""
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events, dtype=bool).reshape(-1)
    if len(times) == 0:
        raise ContractError('Kaplan-Meier needs at least one patient')
    grid, inverse = np.unique(times, return_inverse=True)
    deaths = np.bincount(inverse, weights=events.astype(np.float64), minlength=len(grid))
    leaving = np.bincount(inverse, minlength=len(grid))
    at_risk = len(times) - np.concatenate([[0], np.cumsum(leaving)[:-1]])
    survival = np.cumprod(1.0 - deaths / at_risk)
    return SurvivalCurve(grid, survival, at_risk.astype(np.int64), deaths.astype(np.int64))


def km_censoring(times, events):
    """G(t): Kaplan-Meier of the censoring distribution."""
    return km_estimate(times, ~np.asarray(events, dtype=bool))


# ============== IPCW METRICS ==============
def uno_c(scores, times, events, tau=None):
    """Uno's concordance with weights 1 / G(T_i-)^2, truncated at tau."""
    scores, times, events = _check(scores, times, events)
    if not events.any():
        raise UndefinedMetricError('undefined concordance: no events')
    if tau is None:
        tau = times[events].max()
    g = km_censoring(times, events).left_limit(times)
    with np.errstate(divide='ignore'):
        weights = np.where(g > 0, 1.0 / np.square(g), np.inf)
    weights = np.where(events, weights, 0.0)
    return _weighted_concordance(scores, times, events, weights, tau)


def cumulative_dynamic_auc(scores, times, events, horizon, censoring=None):
    """IPCW cumulative/dynamic AUC at one horizon; cases weighted by 1 / G(T_i-)."""
    scores, times, events = _check(scores, times, events)
    cases = events & (times <= horizon)
    controls = times > horizon
    if not cases.any() or not controls.any():
        raise UndefinedMetricError(f'no cases or no controls at horizon {horizon:g}')
    curve = censoring or km_censoring(times, events)
    g = curve.left_limit(times[cases])
    if np.any(g <= 0):
        raise UndefinedMetricError('IPCW undefined: censoring survival reaches 0 before a case')
    weights = 1.0 / g
    credit = _pair_credit(scores)[np.ix_(cases, controls)]
    return float((weights[:, None] * credit).sum() / (weights.sum() * controls.sum()))


def default_horizons(times, events):
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if not events.any():
        raise UndefinedMetricError('no event times to place horizons on')
    return [float(h) for h in np.percentile(times[events], HORIZON_PERCENTILES)]


def td_auc(scores, times, events, horizons=None):
    """AUC per horizon (quartiles of event times by default); undefined horizons are dropped."""
    scores, times, events = _check(scores, times, events)
    horizons = default_horizons(times, events) if horizons is None else list(horizons)
    censoring = km_censoring(times, events)
    values = {}
    for horizon in horizons:
        try:
            values[horizon] = cumulative_dynamic_auc(scores, times, events, horizon, censoring)
        except UndefinedMetricError as exc:
            logger.warning('td-AUC horizon %g excluded: %s', horizon, exc)
    if not values:
        raise UndefinedMetricError('td-AUC undefined at every horizon')
    return values


def td_auc_mean(scores, times, events, horizons=None):
    return float(np.mean(list(td_auc(scores, times, events, horizons).values())))


# ============== LOG-RANK ==============
@dataclass
class LogRankResult:
    chi2: float
    p_value: float
    observed_a: float
    expected_a: float
    variance: float


def chi2_sf_1df(statistic):
    """Upper tail of the chi-square distribution with one degree of freedom."""
    return float(gammaincc(0.5, statistic / 2.0))


def logrank_test(times_a, events_a, times_b, events_b):
    times_a = np.asarray(times_a, dtype=np.float64)
    times_b = np.asarray(times_b, dtype=np.float64)
    events_a = np.asarray(events_a, dtype=bool)
    events_b = np.asarray(events_b, dtype=bool)
    if len(times_a) == 0 or len(times_b) == 0:
        raise ContractError('log-rank test needs two nonempty groups')
    if not (events_a.any() or events_b.any()):
        raise NoEventsError('no events in either group')

    event_times = np.unique(np.concatenate([times_a[events_a], times_b[events_b]]))
    n_a = (times_a[None, :] >= event_times[:, None]).sum(axis=1).astype(np.float64)
    n_b = (times_b[None, :] >= event_times[:, None]).sum(axis=1).astype(np.float64)
    d_a = (events_a[None, :] & (times_a[None, :] == event_times[:, None])).sum(axis=1)
    d_b = (events_b[None, :] & (times_b[None, :] == event_times[:, None])).sum(axis=1)
    n = n_a + n_b
    d = d_a + d_b
    expected = d * n_a / n
    with np.errstate(invalid='ignore', divide='ignore'):
        variance = np.where(n > 1, d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1), 0.0)
    observed_a = float(d_a.sum())
    expected_a = float(expected.sum())
    total_variance = float(variance.sum())
    if total_variance <= 0:
        return LogRankResult(0.0, 1.0, observed_a, expected_a, total_variance)
    chi2 = (observed_a - expected_a) ** 2 / total_variance
    return LogRankResult(float(chi2), chi2_sf_1df(chi2), observed_a, expected_a, total_variance)


# ============== FOLD REPORTS ==============
def _safe(metric, *args):
    try:
        return metric(*args)
    except UndefinedMetricError as exc:
        logger.warning('%s undefined: %s', metric.__name__, exc)
        return None


def evaluate(scores, times, events, fold=None):
    """Harrell C, Uno C and td-AUC of one evaluation set; undefined values become NaN."""
    scores, times, events = _check(scores, times, events)
    harrell = _safe(harrell_c, scores, times, events)
    uno = _safe(uno_c, scores, times, events)
    auc = _safe(td_auc, scores, times, events) or {}
    return MetricsReport(
        fold=fold,
        n=len(scores),
        n_events=int(events.sum()),
        harrell_c=float('nan') if harrell is None else harrell,
        uno_c=float('nan') if uno is None else uno,
        td_auc=auc,
    )


SUMMARY_METRICS = ('harrell_c', 'uno_c', 'td_auc_mean')


def mean_sem(values):
    """Mean and standard error of the mean (sample std / sqrt(k)), ignoring NaN."""
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return float('nan'), float('nan')
    if values.size == 1:
        return float(values[0]), float('nan')
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def summarize(reports):
    """{metric: (mean, sem)} across fold reports."""
    return {metric: mean_sem([getattr(report, metric) for report in reports]) for metric in SUMMARY_METRICS}


# ============== RISK THRESHOLD ==============
@dataclass
class ThresholdResult:
    cutoff: float
    chi2: float
    p_value: float
    n_high: int
    n_low: int


MIN_GROUP_FRACTION = 0.1


def optimal_threshold(scores, times, events, min_fraction=MIN_GROUP_FRACTION):
    """Cutoff among the 10th..90th score percentiles minimizing the log-rank p-value.

    Patients with score > cutoff form the high-risk group. Each side must hold
    at least `min_fraction` of the patients; ties in p go to the cutoff nearest
    the median score.
    """
    scores, times, events = _check(scores, times, events)
    n = len(scores)
    if n < 10:
        raise ContractError(f'threshold search needs at least 10 patients, got {n}')
    median = float(np.median(scores))
    best = None
    for cutoff in np.unique(np.percentile(scores, np.arange(10, 91))):
        high = scores > cutoff
        n_high = int(high.sum())
        if n_high < min_fraction * n or n - n_high < min_fraction * n:
            continue
        result = logrank_test(times[high], events[high], times[~high], events[~high])
        key = (result.p_value, abs(cutoff - median), cutoff)
        if best is None or key < best[0]:
            best = (key, ThresholdResult(float(cutoff), result.chi2, result.p_value, n_high, n - n_high))
    if best is None:
        raise UndefinedMetricError('no valid cutoff: every split leaves a group under '
                                   f'{min_fraction:.0%} of patients')
    return best[1]
