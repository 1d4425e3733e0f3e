import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from app import cli, create_app
from conftest import TEST_CONFIG
from evaluation.sweep import default_grid

QUICK = '[trainer]\nmax_epochs = 3\nearly_stop_patience = 3\nwarmup_epochs = 1\n'


def invoke(app, *args):
    result = CliRunner().invoke(cli, [str(a) for a in args], obj=app)
    assert result.exit_code == 0, result.output
    return result


def files_of(directory):
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob('*')) if p.is_file()}


@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp('cli')
    app = create_app(test_config=TEST_CONFIG, env='testing')
    config = root / 'quick.ini'
    config.write_text(QUICK, encoding='utf-8')
    cohort = root / 'cohort'
    invoke(app, 'synth', cohort, '--preset', 'complementary', '--n', 60, '--seed', 3)
    run = root / 'run'
    invoke(app, 'train', cohort, run, '--mode', 'intermediate', '--modality', 'tabular',
           '--modality', 'wsi', '--config', config)
    return {'root': root, 'app': app, 'config': config, 'cohort': cohort, 'run': run}


# ============== SYNTH ==============
def test_synth_is_byte_identical_across_reruns(tmp_path, app):
    invoke(app, 'synth', tmp_path / 'a', '--preset', 'complementary', '--n', 40, '--seed', 8)
    invoke(app, 'synth', tmp_path / 'b', '--preset', 'complementary', '--n', 40, '--seed', 8)
    first, second = files_of(tmp_path / 'a'), files_of(tmp_path / 'b')
    assert {'outcome.csv', 'block_tabular.csv', 'block_wsi.csv', 'truth.csv', 'synth_spec.ini',
            'config.resolved', 'endpoint_pfs.csv', 'endpoint_dm.csv'} <= set(first)
    assert first == second


def test_synth_spec_file_reproduces_the_cohort(tmp_path, app):
    invoke(app, 'synth', tmp_path / 'a', '--preset', 'complementary', '--n', 40, '--seed', 2)
    invoke(app, 'synth', tmp_path / 'b', '--spec', tmp_path / 'a' / 'synth_spec.ini', '--seed', 2)
    assert (tmp_path / 'a' / 'outcome.csv').read_bytes() == (tmp_path / 'b' / 'outcome.csv').read_bytes()


def test_synth_rejects_a_bad_spec(tmp_path, app):
    spec = tmp_path / 'bad.ini'
    spec.write_text('[cohort]\ncensoring = 1.5\n\n[modality.tabular]\nwidth = 3\n', encoding='utf-8')
    result = CliRunner().invoke(cli, ['synth', str(tmp_path / 'out'), '--spec', str(spec)], obj=app)
    assert result.exit_code == 1
    assert 'censoring rate 1.5' in result.output


# ============== TRAIN ==============
def test_train_writes_the_run_layout(workspace):
    run = workspace['run']
    for name in ('config.resolved', 'manifest.ini', 'folds.csv', 'cv_report.csv', 'pooled_scores.csv'):
        assert (run / name).is_file()
    assert sorted(p.name for p in (run / 'checkpoints').iterdir()) == ['fold_0.ckpt', 'fold_1.ckpt', 'fold_2.ckpt']
    assert {p.name for p in (run / 'logs').iterdir()} == {
        f'fold_{k}_{stage}.csv' for k in range(3) for stage in ('pretrain_tabular', 'pretrain_wsi', 'fusion')}
    log = pd.read_csv(run / 'logs' / 'fold_0_fusion.csv')
    assert list(log.columns) == ['epoch', 'train_loss', 'val_loss', 'lr']

    report = pd.read_csv(run / 'cv_report.csv')
    assert len(report) == 4
    assert report['fold'].tolist() == ['0', '1', '2', 'mean']
    assert report['n'].iloc[:3].sum() == 60
    assert report['harrell_c'].iloc[3] == pytest.approx(report['harrell_c'].iloc[:3].mean())

    pooled = pd.read_csv(run / 'pooled_scores.csv', dtype={'patient_id': str})
    assert list(pooled.columns) == ['patient_id', 'fold', 'pooled_score']
    assert len(pooled) == 60 and np.isfinite(pooled['pooled_score']).all()
    resolved = (run / 'config.resolved').read_text()
    assert '[command]' in resolved and 'name = train' in resolved and 'max_epochs = 3' in resolved


def test_train_reruns_are_byte_identical(workspace, tmp_path):
    again = tmp_path / 'again'
    invoke(workspace['app'], 'train', workspace['cohort'], again, '--mode', 'intermediate',
           '--modality', 'tabular', '--modality', 'wsi', '--config', workspace['config'], '--jobs', 3)
    first, second = files_of(workspace['run']), files_of(again)
    assert set(first) == set(second)
    for name in first:
        if name != 'config.resolved':
            assert first[name] == second[name], name


def test_train_from_a_manifest(workspace, tmp_path):
    manifest = tmp_path / 'manifest.ini'
    manifest.write_text('[model]\nmode = linear-cph\nmodalities = tabular, wsi\n', encoding='utf-8')
    invoke(workspace['app'], 'train', workspace['cohort'], tmp_path / 'cph', '--manifest', manifest,
           '--config', workspace['config'])
    assert (tmp_path / 'cph' / 'manifest.ini').read_text().startswith('[model]')
    assert len(pd.read_csv(tmp_path / 'cph' / 'cv_report.csv')) == 4


def test_train_needs_a_model(workspace, tmp_path):
    result = CliRunner().invoke(cli, ['train', str(workspace['cohort']), str(tmp_path / 'x')],
                                obj=workspace['app'])
    assert result.exit_code == 2
    result = CliRunner().invoke(cli, ['train', str(tmp_path / 'nowhere'), str(tmp_path / 'x'),
                                      '--mode', 'unimodal', '--modality', 'wsi'], obj=workspace['app'])
    assert result.exit_code == 1
    assert 'outcome.csv' in result.output


# ============== EVAL ==============
def test_eval_reproduces_the_training_report(workspace):
    run = workspace['run']
    invoke(workspace['app'], 'eval', run, workspace['cohort'], '--pooled')
    trained = pd.read_csv(run / 'cv_report.csv')
    evaluated = pd.read_csv(run / 'eval_report.csv')
    pd.testing.assert_frame_equal(trained, evaluated, check_exact=False, rtol=1e-10)
    scores = pd.read_csv(run / 'eval_scores.csv')
    expected = pd.read_csv(run / 'pooled_scores.csv')
    assert np.allclose(scores['pooled_score'], expected['pooled_score'], rtol=1e-10, atol=0)
    resolved = (run / 'eval.resolved').read_text()
    assert 'name = eval' in resolved and 'pooled = true' in resolved
    assert 'name = train' in (run / 'config.resolved').read_text()


def test_eval_without_checkpoints(workspace, tmp_path):
    result = CliRunner().invoke(cli, ['eval', str(tmp_path), str(workspace['cohort'])], obj=workspace['app'])
    assert result.exit_code == 1


# ============== SWEEP ==============
def test_sweep_starts_at_the_trained_scores(workspace):
    out = workspace['root'] / 'sweep'
    invoke(workspace['app'], 'sweep-missing', workspace['run'], workspace['cohort'], '--modality', 'wsi',
           '--out', out)
    frame = pd.read_csv(out / 'sweep.csv')
    assert len(frame) == len(default_grid(0.4)) == 7
    assert frame['fraction'].iloc[0] == pytest.approx(0.4)
    assert np.all(np.diff(frame['realized']) > 0)
    assert frame['realized'].iloc[-1] == 1.0
    report = pd.read_csv(workspace['run'] / 'cv_report.csv')
    assert frame['harrell_c'].iloc[0] == pytest.approx(report['harrell_c'].iloc[3], rel=1e-10)
    assert (out / 'config.resolved').is_file()


def test_sweep_with_explicit_fractions(workspace, tmp_path):
    invoke(workspace['app'], 'sweep-missing', workspace['run'], workspace['cohort'], '--modality', 'wsi',
           '--fractions', '0.4,0.9', '--out', tmp_path)
    assert pd.read_csv(tmp_path / 'sweep.csv')['fraction'].tolist() == [0.4, 0.9]


def test_sweep_rejects_fractions_below_the_baseline(workspace, tmp_path):
    result = CliRunner().invoke(cli, ['sweep-missing', str(workspace['run']), str(workspace['cohort']),
                                      '--modality', 'wsi', '--fractions', '0.1,0.5', '--out', str(tmp_path)],
                                obj=workspace['app'])
    assert result.exit_code == 1
    assert 'baseline' in result.output


# ============== STRATIFY ==============
def test_stratify_end_to_end(workspace, tmp_path):
    invoke(workspace['app'], 'stratify', workspace['run'] / 'pooled_scores.csv', tmp_path,
           '--cohort', workspace['cohort'])
    report = pd.read_csv(tmp_path / 'logrank_report.csv')
    assert report['endpoint'].tolist() == ['os', 'dm', 'pfs']
    groups = pd.read_csv(tmp_path / 'risk_groups.csv')
    assert len(groups) == 60 and set(groups['risk_group']) == {'high', 'low'}
    curves = pd.read_csv(tmp_path / 'km_curves.csv')
    assert {'endpoint', 'group', 'time', 'survival', 'at_risk', 'events'} <= set(curves.columns)
    assert 'cutoff_source = optimal on os' in (tmp_path / 'config.resolved').read_text()


def test_stratify_constant_scores_fail_cleanly(workspace, tmp_path):
    pooled = pd.read_csv(workspace['run'] / 'pooled_scores.csv', dtype={'patient_id': str})
    pooled['pooled_score'] = 0.0
    path = tmp_path / 'flat.csv'
    pooled.to_csv(path, index=False)
    result = CliRunner().invoke(cli, ['stratify', str(path), str(tmp_path / 'out'), '--cohort',
                                      str(workspace['cohort'])], obj=workspace['app'])
    assert result.exit_code == 1
    assert 'no valid cutoff' in result.output


def test_sweep_into_the_run_dir_keeps_the_training_config(workspace):
    run = workspace['run']
    trained = (run / 'config.resolved').read_bytes()
    invoke(workspace['app'], 'sweep-missing', run, workspace['cohort'], '--modality', 'wsi',
           '--fractions', '0.4,1.0')
    assert (run / 'config.resolved').read_bytes() == trained
    resolved = (run / 'sweep.resolved').read_text()
    assert 'name = sweep-missing' in resolved and 'fractions = 0.4, 1.0' in resolved
    assert pd.read_csv(run / 'sweep.csv')['fraction'].tolist() == [0.4, 1.0]
