"""Optimisation: AdamW, the warmup/plateau/decay schedule, early stopping and
the cross-validation driver."""
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from cohort.folds import read_folds, stratified_kfold
from cohort.preprocess import BlockTransform, apply_transforms, check_provenance, preprocess_cohort
from engine import diffcore as dc
from engine.checkpoint import fold_checkpoint_path, load_checkpoint, save_checkpoint
from engine.fusion import (FusionModel, ModelSpec, UnimodalModel, build_model, load_parameters,
                           parameter_arrays, take_rows)
from engine.survloss import cox_loss, cox_nll
from errors import ConfigError, ParseError, SurvivalError
from evaluation.metrics import evaluate, summarize
from models import FoldRoles, FusionMode

logger = logging.getLogger(__name__)


# ============== CONFIGURATION ==============
@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    early_stop_patience: int = 50
    batch_size: int = 32
    weight_decay: float = 1e-5
    lr_min: float = 1e-8
    lr_max: float = 1e-5
    warmup_epochs: int = 50
    plateau_patience: int = 20
    decay_steps: int = 12
    encoder_lr_factor: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    improvement_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_min < self.lr_max:
            raise ConfigError(f'need 0 < lr_min < lr_max, got {self.lr_min} and {self.lr_max}')
        for name in ('max_epochs', 'early_stop_patience', 'batch_size', 'plateau_patience', 'decay_steps'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be positive')
        if self.warmup_epochs < 0 or self.weight_decay < 0:
            raise ConfigError('warmup_epochs and weight_decay must be non-negative')

    @classmethod
    def from_config(cls, mapping):
        """Build from UPPERCASE configuration keys; missing keys keep their defaults."""
        values = {}
        for f in fields(cls):
            key = f.name.upper()
            if key in mapping:
                values[f.name] = mapping[key]
        return cls(**values)


# ============== SCHEDULE ==============
@dataclass
class ScheduleState:
    epoch: int = 0
    best: float = math.inf
    since: int = 0
    decay_step: Optional[int] = None


def lr_at(state, config):
    """Learning rate for the epoch `state.epoch` is about to run."""
    if state.decay_step is not None:
        k = min(state.decay_step, config.decay_steps)
        if k >= config.decay_steps:
            return config.lr_min
        return config.lr_max * (config.lr_min / config.lr_max) ** (k / config.decay_steps)
    if state.epoch < config.warmup_epochs:
        return config.lr_min + (config.lr_max - config.lr_min) * state.epoch / config.warmup_epochs
    return config.lr_max


def advance(state, val_loss, config):
    """Fold one validation loss into the schedule; returns the next state."""
    improved = val_loss < state.best - config.improvement_tol
    best = val_loss if improved else state.best
    since = 0 if improved else state.since + 1
    decay_step = state.decay_step
    if decay_step is not None:
        decay_step = min(decay_step + 1, config.decay_steps)
    elif state.epoch + 1 >= config.warmup_epochs and since >= config.plateau_patience:
        decay_step = 1
        logger.info('plateau after epoch %d: decaying learning rate over %d steps',
                    state.epoch, config.decay_steps)
    return ScheduleState(state.epoch + 1, best, since, decay_step)


# ============== OPTIMIZER ==============
@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params, grads, lr, config, state, lr_factors=None):
    """One AdamW update in place; frozen parameters are never touched."""
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, grad in grads.items():
        if not params.is_trainable(name):
            continue
        theta = params[name]
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * np.square(grad)
        rate = lr * (lr_factors or {}).get(name, 1.0)
        step = rate * (m / correction1) / (np.sqrt(v / correction2) + config.adam_eps)
        theta -= step + rate * config.weight_decay * theta
    return params


# ============== BATCHES ==============
class StratifiedBatchSampler:
    """Minibatches that each contain at least one event.

    Events are dealt round-robin first and censored patients after them, so
    the batch count is capped by the number of events.
    """

    def __init__(self, events, batch_size):
        self.events = np.asarray(events, dtype=bool)
        if not self.events.any():
            raise ConfigError('training split has no events')
        n = len(self.events)
        self.n_batches = max(1, min(math.ceil(n / batch_size), int(self.events.sum())))

    def batches(self, rng):
        order = np.concatenate([rng.permutation(np.flatnonzero(self.events)),
                                rng.permutation(np.flatnonzero(~self.events))])
        slots = np.arange(len(order)) % self.n_batches
        batches = [np.sort(order[slots == b]) for b in range(self.n_batches)]
        return [batches[b] for b in rng.permutation(self.n_batches)]


# ============== TRAINING ==============
@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float

    def to_dict(self):
        return {'epoch': self.epoch, 'train_loss': self.train_loss, 'val_loss': self.val_loss, 'lr': self.lr}


@dataclass
class TrainResult:
    model: object
    log: List[EpochRecord]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool


def train_fold(model, cohort, roles, config, rng=None, stage='model'):
    """Fit `model` on roles.train, early-stopping on roles.validation.

    The parameters with the lowest validation loss are restored before
    returning.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    train_rows, val_rows = np.asarray(roles.train), np.asarray(roles.validation)
    if not cohort.events[train_rows].any():
        raise ConfigError(f'{stage}: no events in the training split')
    if not cohort.events[val_rows].any():
        raise ConfigError(f'{stage}: no events in the validation split')

    train_inputs = cohort.inputs(train_rows, model.modalities)
    val_inputs = cohort.inputs(val_rows, model.modalities)
    train_times, train_events = cohort.times[train_rows], cohort.events[train_rows]
    val_times, val_events = cohort.times[val_rows], cohort.events[val_rows]

    sampler = StratifiedBatchSampler(train_events, config.batch_size)
    params = model.params
    factors = {name: model.lr_factor(name, config) for name in params}
    optimizer = AdamState()
    state = ScheduleState()
    log = []
    best_snapshot, best_epoch = params.snapshot(), -1
    stopped_early = False

    for epoch in range(config.max_epochs):
        lr = lr_at(state, config)
        batches = sampler.batches(rng)
        if epoch == 0:
            model.prepare(train_inputs, batches[0])
            best_snapshot = params.snapshot()
        losses = []
        for rows in batches:
            graph = dc.ValueGraph()
            leaves = params.bind(graph)
            scores = model.forward(graph, leaves, take_rows(train_inputs, rows))
            loss = cox_loss(scores, train_times[rows], train_events[rows])
            adamw_step(params, dc.backward(graph, loss), lr, config, optimizer, factors)
            losses.append(loss.item())
        val_loss = cox_nll(model.predict(val_inputs), val_times, val_events)
        record = EpochRecord(epoch, float(np.mean(losses)), val_loss, lr)
        log.append(record)
        logger.debug('%s epoch %d: train %.6f val %.6f lr %.3g', stage, epoch,
                     record.train_loss, val_loss, lr)
        state = advance(state, val_loss, config)
        if state.since == 0:
            best_snapshot, best_epoch = params.snapshot(), epoch
        if state.since >= config.early_stop_patience:
            stopped_early = True
            logger.info('%s: early stop at epoch %d (best epoch %d)', stage, epoch, best_epoch)
            break

    params.restore(best_snapshot)
    return TrainResult(model, log, best_epoch, state.best, stopped_early)


# ============== CROSS-VALIDATION ==============
@dataclass
class FoldOutcome:
    fold: int
    roles: FoldRoles
    model: object
    transforms: dict
    report: object
    test_scores: np.ndarray
    logs: Dict[str, List[EpochRecord]] = field(default_factory=dict)


@dataclass
class CVResult:
    plan: object
    folds: List[FoldOutcome]
    pooled_scores: np.ndarray

    @property
    def reports(self):
        return [outcome.report for outcome in self.folds]

    def summary(self):
        return summarize(self.reports)


def fold_rng(seed, fold):
    return np.random.default_rng([seed, fold])


def _modality_roles(cohort, roles, modality):
    """Train/validation rows having `modality`, falling back to all rows when a subset has no events."""
    present = cohort.blocks[modality].present

    def narrowed(rows):
        subset = rows[present[rows]]
        if len(subset) and cohort.events[subset].any():
            return subset
        logger.warning('fold %d: too few %s patients with events; using every patient', roles.fold, modality)
        return rows

    return FoldRoles(roles.fold, narrowed(roles.train), narrowed(roles.validation), roles.test)


def _train_unimodal(model, cohort, roles, config, rng, logs, stage):
    result = train_fold(model, cohort, _modality_roles(cohort, roles, model.modality), config, rng, stage)
    logs[stage] = result.log
    return model


def _load_pretrained(path, fold):
    checkpoint = load_checkpoint(fold_checkpoint_path(path, fold))
    return checkpoint.arrays


def check_pretrained_folds(spec, cohort, plan):
    """Pretrained runs must have used the same fold assignment."""
    for modality, path in spec.pretrained.items():
        theirs = read_folds(Path(path) / 'folds.csv', cohort.patient_ids)
        if not np.array_equal(theirs.assignments, plan.assignments):
            raise ConfigError(f'pretrained {modality} run at {path} used a different fold plan')


def run_fold(cohort, spec, config, plan, fold, standardize_ordinal=True, standardize_imaging=True):
    roles = plan.roles(fold)
    logger.info('fold %d: %d train, %d validation, %d test', fold, len(roles.train),
                len(roles.validation), len(roles.test))
    fold_cohort, transforms = preprocess_cohort(cohort, roles.train, standardize_ordinal, standardize_imaging)
    held_out = [cohort.patient_ids[i] for i in roles.test]
    check_provenance(transforms, held_out)

    rng = fold_rng(config.seed, fold)
    feature_specs = {name: block.specs for name, block in fold_cohort.blocks.items()}
    model = build_model(spec, feature_specs, rng=rng)
    logs = {}

    if spec.mode == FusionMode.LATE:
        for name, member in model.members.items():
            _train_unimodal(member, fold_cohort, roles, config, rng, logs, f'unimodal_{name}')
    elif spec.mode == FusionMode.UNIMODAL:
        _train_unimodal(model, fold_cohort, roles, config, rng, logs, 'unimodal')
    elif isinstance(model, FusionModel):
        for name in model.modalities:
            if name in spec.pretrained:
                model.load_encoder(name, _load_pretrained(spec.pretrained[name], fold))
                continue
            unimodal = UnimodalModel(spec.unimodal(name), feature_specs, rng=rng)
            _train_unimodal(unimodal, fold_cohort, roles, config, rng, logs, f'pretrain_{name}')
            model.load_encoder(name, dict(unimodal.params.items()))
        model.apply_freezing()
        logs['fusion'] = train_fold(model, fold_cohort, roles, config, rng, 'fusion').log
    else:
        logs['linear'] = train_fold(model, fold_cohort, roles, config, rng, 'linear').log

    test_inputs = fold_cohort.inputs(roles.test, model.modalities)
    scores = model.predict(test_inputs)
    report = evaluate(scores, fold_cohort.times[roles.test], fold_cohort.events[roles.test], fold)
    logger.info('fold %d: harrell %.4f uno %.4f td-auc %.4f', fold, report.harrell_c, report.uno_c,
                report.td_auc_mean)
    return FoldOutcome(fold, roles, model, transforms, report, scores, logs)


def run_cv(cohort, spec, config, k=5, plan=None, executor=None, standardize_ordinal=True,
           standardize_imaging=True):
    """k-fold cross-validation: per-fold reports plus pooled test-fold scores."""
    plan = plan or stratified_kfold(cohort, k, config.seed)
    if spec.pretrained:
        check_pretrained_folds(spec, cohort, plan)

    def one(fold):
        try:
            return run_fold(cohort, spec, config, plan, fold, standardize_ordinal, standardize_imaging)
        except SurvivalError as exc:
            raise type(exc)(f'fold {fold}: {exc.message}') from exc

    folds = executor.map(one, range(plan.k)) if executor is not None else [one(f) for f in range(plan.k)]
    pooled = np.full(cohort.n_patients, np.nan)
    for outcome in folds:
        pooled[outcome.roles.test] = outcome.test_scores
    return CVResult(plan, folds, pooled)


# ============== SAVED FOLDS ==============
def transform_arrays(transforms):
    arrays = {}
    for transform in transforms.values():
        arrays.update(transform.to_arrays())
    return arrays


def save_fold(outdir, outcome, spec):
    """Checkpoint one fold: parameters, fitted transforms and the manifest."""
    return save_checkpoint(fold_checkpoint_path(outdir, outcome.fold), parameter_arrays(outcome.model),
                           manifest=spec.to_ini(), extra=transform_arrays(outcome.transforms))


@dataclass
class RestoredFold:
    fold: int
    spec: object
    model: object
    transforms: dict

    def score(self, cohort, rows):
        """Risk scores of `rows` under the fold's own preprocessing."""
        transformed = apply_transforms(cohort, self.transforms)
        return self.model.predict(transformed.inputs(rows, self.model.modalities))


def restore_fold(run_dir, cohort, fold, settings):
    path = fold_checkpoint_path(run_dir, fold)
    checkpoint = load_checkpoint(path)
    if checkpoint.manifest is None:
        raise ParseError('checkpoint carries no manifest', path=path)
    spec = ModelSpec.from_manifest(path, settings, data=checkpoint.manifest)
    feature_specs = {name: block.specs for name, block in cohort.blocks.items()}
    model = load_parameters(build_model(spec, feature_specs), checkpoint.arrays)
    names = sorted({key[len('transform.'):].rsplit('.', 1)[0]
                    for key in checkpoint.extra if key.startswith('transform.')})
    transforms = {name: BlockTransform.from_arrays(name, checkpoint.extra) for name in names}
    return RestoredFold(fold, spec, model, transforms)


def restore_run(run_dir, cohort, settings):
    """Fold plan and every fold model saved by a `train` run."""
    plan = read_folds(Path(run_dir) / 'folds.csv', cohort.patient_ids)
    return plan, [restore_fold(run_dir, cohort, fold, settings) for fold in range(plan.k)]


def score_run(plan, restored, cohort):
    """Re-score each fold model on its own test rows; returns (reports, pooled scores)."""
    reports = []
    pooled = np.full(cohort.n_patients, np.nan)
    for saved in restored:
        rows = plan.roles(saved.fold).test
        scores = saved.score(cohort, rows)
        pooled[rows] = scores
        reports.append(evaluate(scores, cohort.times[rows], cohort.events[rows], saved.fold))
    return reports, pooled
