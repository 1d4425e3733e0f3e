import numpy as np
import pytest

from cohort.folds import stratified_kfold
from engine import diffcore as dc
from engine.fusion import ModelSpec, build_model
from engine.survloss import cox_nll
from engine.trainer import (AdamState, ScheduleState, StratifiedBatchSampler, TrainConfig, adamw_step, advance,
                            fold_rng, lr_at, run_cv, run_fold, train_fold)
from errors import ConfigError
from extensions import FoldExecutor
from models import FoldPlan, FoldRoles, FusionMode

PROTOCOL = TrainConfig()
SIZES = dict(d_model=4, n_heads=2, n_layers=1, ff_dim=8, head_trees=2, head_depth=2,
             fusion_trees=2, fusion_depth=2, mlp_hidden=4)


def quick_config(**overrides):
    values = dict(max_epochs=6, early_stop_patience=4, batch_size=16, lr_min=1e-4, lr_max=1e-2,
                  warmup_epochs=1, plateau_patience=2, decay_steps=3)
    values.update(overrides)
    return TrainConfig(**values)


# ============== SCHEDULE ==============
def test_warmup_points():
    assert lr_at(ScheduleState(epoch=0), PROTOCOL) == 1e-8
    assert lr_at(ScheduleState(epoch=25), PROTOCOL) == pytest.approx(1e-8 + 0.5 * (1e-5 - 1e-8), rel=1e-12)
    assert lr_at(ScheduleState(epoch=50), PROTOCOL) == 1e-5
    assert lr_at(ScheduleState(epoch=400), PROTOCOL) == 1e-5


def test_decay_reaches_lr_min_exactly_after_twelve_steps():
    rates = [lr_at(ScheduleState(epoch=100, decay_step=k), PROTOCOL) for k in range(1, 13)]
    assert all(a > b for a, b in zip(rates, rates[1:]))
    assert rates[-1] == PROTOCOL.lr_min
    assert lr_at(ScheduleState(epoch=200, decay_step=40), PROTOCOL) == PROTOCOL.lr_min


def test_plateau_triggers_decay_only_after_warmup():
    config = TrainConfig(warmup_epochs=3, plateau_patience=2, decay_steps=4)
    state = ScheduleState()
    for loss in (1.0, 1.0, 1.0):
        state = advance(state, loss, config)
    # two epochs without improvement, epoch index 2 reached the end of warmup
    assert state.since == 2
    assert state.decay_step == 1
    state = advance(state, 0.5, config)
    assert state.decay_step == 2
    assert state.since == 0


def test_no_decay_during_warmup():
    config = TrainConfig(warmup_epochs=10, plateau_patience=2)
    state = ScheduleState()
    for _ in range(5):
        state = advance(state, 1.0, config)
    assert state.decay_step is None
    assert state.since == 4


def test_improvement_tolerance():
    config = TrainConfig(improvement_tol=0.1)
    state = advance(ScheduleState(), 1.0, config)
    state = advance(state, 0.95, config)
    assert state.best == 1.0 and state.since == 1


def phase_of(state):
    if state.decay_step is not None:
        return 'decay'
    return 'warmup' if state.epoch < PROTOCOL.warmup_epochs else 'plateau'


def test_schedule_is_piecewise_monotone_and_bounded():
    state, trace = ScheduleState(), []
    for epoch in range(200):
        trace.append((phase_of(state), lr_at(state, PROTOCOL)))
        state = advance(state, 1.0 / (epoch + 1) if epoch < 80 else 0.0125, PROTOCOL)

    phases = [phase for phase, _ in trace]
    assert phases == sorted(phases, key=['warmup', 'plateau', 'decay'].index)
    assert {'warmup', 'plateau', 'decay'} == set(phases)
    assert all(PROTOCOL.lr_min <= rate <= PROTOCOL.lr_max for _, rate in trace)

    rates = {name: [rate for phase, rate in trace if phase == name] for name in ('warmup', 'plateau', 'decay')}
    assert all(a < b for a, b in zip(rates['warmup'], rates['warmup'][1:]))
    assert set(rates['plateau']) == {PROTOCOL.lr_max}
    assert all(a >= b for a, b in zip(rates['decay'], rates['decay'][1:]))
    assert rates['decay'][-1] == PROTOCOL.lr_min


@pytest.mark.parametrize('values', [dict(lr_min=1e-3, lr_max=1e-4), dict(batch_size=0),
                                    dict(warmup_epochs=-1)])
def test_config_invariants(values):
    with pytest.raises(ConfigError):
        TrainConfig(**values)


def test_from_config_reads_uppercase_keys(app):
    config = TrainConfig.from_config(app.config)
    assert config.max_epochs == app.config['MAX_EPOCHS']
    assert config.seed == 0


# ============== OPTIMIZER ==============
def test_adamw_first_step_moves_by_lr_times_sign():
    params = dc.ParameterSet()
    params.add('w', np.array([1.0, -2.0]))
    params.add('frozen', np.array([3.0]), trainable=False)
    config = TrainConfig(weight_decay=0.0)
    adamw_step(params, {'w': np.array([0.5, -4.0]), 'frozen': np.array([1.0])}, 0.1, config, AdamState())
    assert params['w'] == pytest.approx([0.9, -1.9], abs=1e-6)
    assert params['frozen'][0] == 3.0


def test_adamw_decoupled_weight_decay_and_factors():
    params = dc.ParameterSet()
    params.add('w', np.array([2.0]))
    config = TrainConfig(weight_decay=0.5)
    adamw_step(params, {'w': np.array([0.0])}, 0.1, config, AdamState(), lr_factors={'w': 0.5})
    # zero gradient: only decay, at the scaled rate 0.05
    assert params['w'][0] == pytest.approx(2.0 - 0.05 * 0.5 * 2.0)


# ============== BATCHES ==============
def test_every_batch_has_an_event():
    events = np.zeros(40, dtype=bool)
    events[[3, 17, 29]] = True
    sampler = StratifiedBatchSampler(events, batch_size=8)
    assert sampler.n_batches == 3
    batches = sampler.batches(np.random.default_rng(0))
    assert sorted(np.concatenate(batches).tolist()) == list(range(40))
    assert all(events[b].any() for b in batches)


def test_sampler_needs_events():
    with pytest.raises(ConfigError):
        StratifiedBatchSampler(np.zeros(5, dtype=bool), 2)


def test_fold_rng_is_independent_of_order():
    assert fold_rng(3, 1).random() == fold_rng(3, 1).random()
    assert fold_rng(3, 1).random() != fold_rng(3, 2).random()


# ============== TRAINING ==============
def test_train_fold_lowers_training_loss_and_restores_best(cohort):
    spec = ModelSpec('unimodal', ['tabular'], **SIZES)
    model = build_model(spec, {n: b.specs for n, b in cohort.blocks.items()}, np.random.default_rng(0))
    plan = stratified_kfold(cohort, 3, seed=0)
    roles = plan.roles(0)
    result = train_fold(model, cohort, roles, quick_config(max_epochs=10), np.random.default_rng(0))
    assert len(result.log) >= 1
    assert model.head.thresholds_ready
    val_rows = roles.validation
    val_loss = cox_nll(model.predict(cohort.inputs(val_rows, model.modalities)),
                       cohort.times[val_rows], cohort.events[val_rows])
    assert val_loss == pytest.approx(result.best_val_loss)
    assert result.best_val_loss - min(record.val_loss for record in result.log) <= 1e-6


def test_train_fold_needs_events_in_both_splits(cohort):
    spec = ModelSpec('unimodal', ['tabular'], **SIZES)
    model = build_model(spec, {n: b.specs for n, b in cohort.blocks.items()})
    censored = np.flatnonzero(~cohort.events)
    roles = FoldRoles(0, np.arange(cohort.n_patients), censored[:3], censored[3:6])
    with pytest.raises(ConfigError):
        train_fold(model, cohort, roles, quick_config())


def test_early_fusion_keeps_pretrained_encoders_frozen(cohort):
    spec = ModelSpec('early', ['tabular', 'wsi'], **SIZES)
    plan = stratified_kfold(cohort, 3, seed=0)
    outcome = run_fold(cohort, spec, quick_config(max_epochs=3), plan, 0)
    assert set(outcome.logs) == {'pretrain_tabular', 'pretrain_wsi', 'fusion'}
    assert all(not outcome.model.params.is_trainable(name)
               for name in outcome.model.params if name.startswith('encoder.'))


def test_run_fold_never_fits_transforms_on_test_patients(cohort):
    spec = ModelSpec('linear-cph', ['tabular', 'wsi'], **SIZES)
    plan = stratified_kfold(cohort, 3, seed=0)
    outcome = run_fold(cohort, spec, quick_config(max_epochs=3), plan, 1)
    test_ids = {cohort.patient_ids[i] for i in outcome.roles.test}
    for transform in outcome.transforms.values():
        assert test_ids.isdisjoint(transform.provenance)
    assert set(outcome.logs) == {'linear'}


@pytest.mark.parametrize('mode, modalities', [('unimodal', ['wsi']), ('late', ['tabular', 'wsi']),
                                              ('intermediate', ['tabular', 'wsi'])])
def test_run_cv_pools_every_patient_once(cohort, mode, modalities):
    spec = ModelSpec(mode, modalities, **SIZES)
    result = run_cv(cohort, spec, quick_config(max_epochs=2), k=3)
    assert len(result.folds) == 3
    assert np.all(np.isfinite(result.pooled_scores))
    summary = result.summary()
    assert set(summary) == {'harrell_c', 'uno_c', 'td_auc_mean'}


def test_run_cv_is_independent_of_jobs(cohort):
    spec = ModelSpec(FusionMode.UNIMODAL, ['tabular'], **SIZES)
    serial = run_cv(cohort, spec, quick_config(max_epochs=2), k=3, executor=FoldExecutor(1))
    parallel = run_cv(cohort, spec, quick_config(max_epochs=2), k=3, executor=FoldExecutor(3))
    assert np.array_equal(serial.pooled_scores, parallel.pooled_scores)


def test_run_cv_prefixes_errors_with_the_fold(cohort):
    spec = ModelSpec('unimodal', ['tabular'], **SIZES)
    # every event sits in fold 0, so the first rotation trains on censored patients only
    plan = FoldPlan(3, np.where(cohort.events, 0, np.arange(cohort.n_patients) % 3))
    with pytest.raises(ConfigError, match=r"^fold 0: "):
        run_cv(cohort, spec, quick_config(), plan=plan)
