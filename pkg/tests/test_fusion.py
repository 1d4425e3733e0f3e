import numpy as np
import pytest

from config import Settings, TestingConfig
from engine.fusion import (FusionModel, LateFusionModel, LinearCoxModel, ModelSpec, UnimodalModel, build_model,
                           forward_fused, late_fuse, linear_cph_forward, load_parameters, parameter_arrays)
from errors import ConfigError, ContractError
from models import FeatureKind, FeatureSpec, FusionMode, HeadKind, ModalityInput

SIZES = dict(d_model=4, n_heads=2, n_layers=1, ff_dim=8, head_trees=2, head_depth=2,
             fusion_trees=2, fusion_depth=2, mlp_hidden=4)


def spec_for(mode, modalities, **options):
    return ModelSpec(mode, modalities, **{**SIZES, **options})


def feature_specs(cohort):
    return {name: block.specs for name, block in cohort.blocks.items()}


def all_rows(cohort):
    return cohort.inputs(np.arange(cohort.n_patients))


def settings():
    values = Settings()
    values.from_object(TestingConfig)
    return values


# ============== LATE FUSION ==============
def test_late_fuse_sums_ranks():
    fused = late_fuse([np.array([1.0, 2.0, 3.0]), np.array([3.0, 2.0, 1.0])])
    assert fused.tolist() == [4.0, 4.0, 4.0]


def test_late_fuse_averages_tied_ranks():
    fused = late_fuse({'a': np.array([1.0, 1.0, 5.0]), 'b': np.array([0.0, 1.0, 2.0])})
    assert fused.tolist() == [2.5, 3.5, 6.0]


def test_late_fuse_gives_absent_patients_the_median_rank():
    fused = late_fuse({'a': np.array([1.0, 2.0, 3.0, 4.0]), 'b': np.array([9.0, 1.0, 2.0, 3.0])},
                      present={'b': np.array([False, True, True, True])})
    # b: absent patient -> 2.5, present ranks 1..3 rescaled by 5/4
    assert fused == pytest.approx([1 + 2.5, 2 + 1.25, 3 + 2.5, 4 + 3.75])
    # rescaled present ranks average to the median rank handed to the absent patient
    assert np.mean(fused[1:] - [2, 3, 4]) == pytest.approx(2.5)


@pytest.mark.parametrize('transform', [np.exp, np.arctan, lambda s: 3.0 * s - 7.0, lambda s: s ** 3])
def test_late_fuse_ignores_monotone_transforms(transform):
    rng = np.random.default_rng(4)
    a, b = np.round(rng.normal(size=(2, 30)), 1)
    present = {'b': rng.random(30) < 0.7}
    reference = late_fuse({'a': a, 'b': b}, present=present)
    assert np.array_equal(late_fuse({'a': transform(a), 'b': b}, present=present), reference)
    assert np.array_equal(late_fuse({'a': a, 'b': transform(b)}, present=present), reference)


def test_late_fuse_contract():
    with pytest.raises(ContractError):
        late_fuse([np.zeros(3)])
    with pytest.raises(ContractError):
        late_fuse([np.zeros(3), np.zeros(4)])


# ============== MANIFEST ==============
def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(FusionMode.UNIMODAL, ['tabular', 'wsi'])
    with pytest.raises(ConfigError):
        ModelSpec(FusionMode.LATE, ['tabular'])
    with pytest.raises(ConfigError):
        ModelSpec(FusionMode.EARLY, [])
    with pytest.raises(ConfigError):
        ModelSpec(FusionMode.EARLY, ['tabular', 'wsi'], pretrained={'ct': 'runs/ct'})
    with pytest.raises(ValueError):
        ModelSpec('stacked', ['tabular'])


def test_modalities_are_sorted_and_deduplicated():
    spec = ModelSpec('intermediate', ['wsi', 'tabular', 'wsi'])
    assert spec.modalities == ['tabular', 'wsi']
    assert spec.mode == FusionMode.INTERMEDIATE


def test_manifest_round_trip(tmp_path):
    spec = spec_for('intermediate', ['tabular', 'wsi'], group_sizes={'wsi': 3},
                    pretrained={'wsi': 'runs/wsi'})
    path = tmp_path / 'manifest.ini'
    path.write_text(spec.to_ini())
    assert ModelSpec.from_manifest(path, settings()) == spec


def test_manifest_defaults_come_from_settings(tmp_path):
    path = tmp_path / 'manifest.ini'
    path.write_text('[model]\nmode = unimodal\nmodalities = wsi\nhead = mlp\n\n[encoder.wsi]\ngroup_size = 4\n')
    spec = ModelSpec.from_manifest(path, settings())
    assert spec.head == HeadKind.MLP
    assert spec.d_model == TestingConfig.D_MODEL
    assert spec.group_size_for('wsi') == 4
    assert spec.group_size_for('tabular') == 1


@pytest.mark.parametrize('text', [
    '[encoder]\nd_model = 8\n',
    '[model]\nmode = early\n',
    '[model]\nmode = early\nmodalities = a, b\n[encoder]\nwidth = 3\n',
    '[model]\nmode = early\nmodalities = a, b\n[decoder]\nx = 1\n',
    '[model]\nmode = early\nmodalities = a, b\n[head]\nn_trees = many\n',
    '[model]\nmode = mixture\nmodalities = a, b\n',
])
def test_manifest_errors(tmp_path, text):
    path = tmp_path / 'manifest.ini'
    path.write_text(text)
    with pytest.raises(ConfigError):
        ModelSpec.from_manifest(path, settings())


def test_manifest_from_text():
    text = spec_for('late', ['tabular', 'wsi']).to_ini()
    spec = ModelSpec.from_manifest('fold_0.ckpt', settings(), data=text)
    assert spec.mode == FusionMode.LATE


def test_missing_manifest_file(tmp_path):
    with pytest.raises(ConfigError):
        ModelSpec.from_manifest(tmp_path / 'absent.ini', settings())


# ============== MODELS ==============
@pytest.mark.parametrize('mode, cls', [
    ('unimodal', UnimodalModel),
    ('early', FusionModel),
    ('intermediate', FusionModel),
    ('late', LateFusionModel),
    ('linear-cph', LinearCoxModel),
])
def test_build_model_per_mode(cohort, mode, cls):
    modalities = ['wsi'] if mode == 'unimodal' else ['tabular', 'wsi']
    model = build_model(spec_for(mode, modalities), feature_specs(cohort), np.random.default_rng(0))
    assert isinstance(model, cls)
    scores = model.predict(all_rows(cohort))
    assert scores.shape == (cohort.n_patients,)
    assert np.all(np.isfinite(scores))


def test_build_model_needs_every_block(cohort):
    with pytest.raises(ConfigError):
        build_model(spec_for('unimodal', ['ct']), feature_specs(cohort))


def test_absent_modality_in_input_is_a_contract_error(cohort):
    model = build_model(spec_for('intermediate', ['tabular', 'wsi']), feature_specs(cohort))
    with pytest.raises(ContractError):
        model.predict(cohort.inputs(np.arange(5), ['tabular']))


def test_early_fusion_freezes_encoders(cohort, train_config):
    model = build_model(spec_for('early', ['tabular', 'wsi']), feature_specs(cohort))
    encoder_names = [name for name in model.params if name.startswith('encoder.')]
    assert encoder_names
    assert all(not model.params.is_trainable(name) for name in encoder_names)
    assert model.params.is_trainable('fusion.response')


def test_intermediate_fusion_slows_encoders(cohort, train_config):
    model = build_model(spec_for('intermediate', ['tabular', 'wsi']), feature_specs(cohort))
    assert model.lr_factor('encoder.wsi.bias', train_config) == train_config.encoder_lr_factor
    assert model.lr_factor('fusion.response', train_config) == 1.0
    assert model.params.is_trainable('encoder.wsi.bias')


def test_fused_representation_concatenates_in_lexical_order(cohort):
    model = build_model(spec_for('intermediate', ['wsi', 'tabular']), feature_specs(cohort))
    assert model.modalities == ['tabular', 'wsi']
    assert model.head.in_dim == model.encoders['tabular'].output_dim + model.encoders['wsi'].output_dim


def test_fused_scores_ignore_masked_values(cohort):
    model = build_model(spec_for('intermediate', ['tabular', 'wsi']), feature_specs(cohort))
    inputs = all_rows(cohort)
    rng = np.random.default_rng(5)
    noisy = {}
    for name, item in inputs.items():
        values = item.values.copy()
        values[~item.observed] = rng.normal(scale=100.0, size=int((~item.observed).sum()))
        if name == 'tabular':
            values[~item.observed[:, -1], -1] = 7.0
        noisy[name] = ModalityInput(values, item.observed)
    assert np.array_equal(forward_fused(inputs, model), forward_fused(noisy, model))


def test_forward_fused_needs_a_fusion_model(cohort):
    model = build_model(spec_for('unimodal', ['wsi']), feature_specs(cohort))
    with pytest.raises(ContractError):
        forward_fused(all_rows(cohort), model)


def test_mlp_head_uses_no_attention_layers(cohort):
    model = build_model(spec_for('unimodal', ['tabular'], head='mlp'), feature_specs(cohort))
    assert model.encoder.n_layers == 0
    assert 'head.tabular.w1' in model.params


def test_late_fusion_member_without_modality_contributes_median_rank(cohort):
    model = build_model(spec_for('late', ['tabular', 'wsi']), feature_specs(cohort))
    inputs = all_rows(cohort)
    member = model.member_scores(inputs)
    present = {name: inputs[name].observed.any(axis=1) for name in model.modalities}
    assert np.array_equal(model.predict(inputs), late_fuse(member, present))
    assert not present['wsi'].all()


def test_parameters_round_trip_into_a_fresh_model(cohort):
    spec = spec_for('late', ['tabular', 'wsi'])
    model = build_model(spec, feature_specs(cohort), np.random.default_rng(1))
    fresh = build_model(spec, feature_specs(cohort), np.random.default_rng(2))
    load_parameters(fresh, dict(parameter_arrays(model).items()))
    inputs = all_rows(cohort)
    assert np.array_equal(model.predict(inputs), fresh.predict(inputs))


# ============== LINEAR CPH ==============
def test_linear_cph_forward_skips_unobserved_entries():
    y = linear_cph_forward(np.array([[1.0, 50.0], [2.0, 3.0]]), np.array([[True, False], [True, True]]),
                           np.array([2.0, 1.0]), bias=0.5)
    assert y.tolist() == [2.5, 7.5]


def test_linear_cox_one_hot_and_mean_imputation():
    specs = {'tabular': [FeatureSpec('age'), FeatureSpec('site', FeatureKind.CATEGORICAL, 3)]}
    model = LinearCoxModel(ModelSpec('linear-cph', ['tabular']), specs)
    assert model.columns == [('tabular', 0, None), ('tabular', 1, 0), ('tabular', 1, 1), ('tabular', 1, 2)]
    values = np.array([[1.0, 0.0], [3.0, 2.0], [0.0, 2.0]])
    observed = np.array([[True, True], [True, True], [False, False]])
    train = {'tabular': ModalityInput(values, observed)}
    model.prepare(train, np.arange(3))
    design = model.design(train)
    assert design[:, 0].tolist() == [1.0, 3.0, 2.0]
    assert design[2, 1:].tolist() == [0.5, 0.0, 0.5]
    assert design[1, 1:].tolist() == [0.0, 0.0, 1.0]
    assert not model.params.is_trainable('cph.impute_mean')
