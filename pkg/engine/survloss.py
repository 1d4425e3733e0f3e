"""Cox negative log partial likelihood with Breslow ties.

Risk sets are inclusive (T_j >= T_i) and local to the batch that is passed in;
the loss of a cohort is not the sum of the losses of its batches.
"""
import numpy as np
from scipy.special import logsumexp

from errors import NoEventsError
from models import BatchOutcome


def _as_batch(batch_or_scores, times=None, events=None):
    if isinstance(batch_or_scores, BatchOutcome):
        return batch_or_scores
    return BatchOutcome(batch_or_scores, times, events)


def _risk_terms(batch):
    if not batch.events.any():
        raise NoEventsError()
    at_risk = batch.times[None, :] >= batch.times[:, None]
    scores = np.broadcast_to(batch.scores, at_risk.shape)
    log_risk = logsumexp(scores, b=at_risk, axis=1)
    return at_risk, log_risk


def cox_nll(batch, times=None, events=None):
    """L = -(1/N_ob) * sum over events of [y_i - log sum_{T_j >= T_i} exp(y_j)]"""
    batch = _as_batch(batch, times, events)
    _, log_risk = _risk_terms(batch)
    n_observed = batch.events.sum()
    return float(-np.sum(batch.scores[batch.events] - log_risk[batch.events]) / n_observed)


def cox_nll_grad(batch, times=None, events=None):
    """dL/dy_k = -(1/N_ob) [C_k - sum_{i: C_i=1, T_k >= T_i} exp(y_k) / sum_{T_j >= T_i} exp(y_j)]"""
    batch = _as_batch(batch, times, events)
    at_risk, log_risk = _risk_terms(batch)
    n_observed = batch.events.sum()
    shares = np.where(at_risk, np.exp(batch.scores[None, :] - log_risk[:, None]), 0.0)
    expected = shares[batch.events].sum(axis=0)
    return -(batch.events.astype(np.float64) - expected) / n_observed


def cox_loss(scores, times, events):
    """Record the loss as one graph node over a (batch,) score tensor."""
    batch = BatchOutcome(scores.value, times, events)
    value = np.asarray(cox_nll(batch))
    grad = cox_nll_grad(batch).reshape(scores.shape)
    return scores.graph.record('cox_nll', value, (scores,), lambda g: (g * grad,))
