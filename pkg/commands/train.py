import logging

import click
import numpy as np
import pandas as pd

from cohort.folds import stratified_kfold, write_folds
from cohort.io import load_cohort_dir
from commands import prepare_outdir, surface_errors, write_csv, write_resolved
from engine.fusion import ModelSpec
from engine.trainer import TrainConfig, run_cv, save_fold
from evaluation.metrics import SUMMARY_METRICS, summarize
from extensions import executor
from models import FusionMode, HeadKind

logger = logging.getLogger(__name__)


def report_frame(reports):
    """One row per fold followed by a `mean` row carrying the SEM of each metric."""
    rows = [report.to_dict() for report in reports]
    summary = summarize(reports)
    row = {'fold': 'mean'}
    for metric in SUMMARY_METRICS:
        row[metric], row[f'{metric}_sem'] = summary[metric]
    rows.append(row)
    columns = ['fold', 'n', 'n_events']
    for metric in SUMMARY_METRICS:
        columns += [metric, f'{metric}_sem']
    frame = pd.DataFrame(rows)
    extra = [c for c in frame.columns if c not in columns]
    return frame.reindex(columns=columns + extra)


def pooled_frame(patient_ids, plan, scores):
    return pd.DataFrame({'patient_id': patient_ids, 'fold': plan.assignments, 'pooled_score': scores})


def resolve_spec(settings, manifest, mode, modalities, head):
    if manifest:
        return ModelSpec.from_manifest(manifest, settings)
    if not mode or not modalities:
        raise click.UsageError('give --manifest, or --mode with at least one --modality')
    return ModelSpec.from_settings(settings, mode, modalities, head)


@click.command('train')
@click.argument('cohort_dir', type=click.Path(file_okay=False))
@click.argument('outdir', type=click.Path(file_okay=False))
@click.option('--manifest', type=click.Path(dir_okay=False), help='Model manifest INI.')
@click.option('--mode', type=click.Choice([m.value for m in FusionMode]),
              help='Model mode when no manifest is given.')
@click.option('--modality', 'modalities', multiple=True, help='Modality to use; repeatable.')
@click.option('--head', type=click.Choice([h.value for h in HeadKind]), default='odst', show_default=True)
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='INI config file.')
@click.option('--seed', type=int, help='Seed for folds, initialisation and batching.')
@click.option('--folds', 'k', type=int, help='Number of cross-validation folds.')
@click.option('--jobs', type=int, help='Folds trained in parallel.')
@click.pass_obj
@surface_errors
def train_cmd(app, cohort_dir, outdir, manifest, mode, modalities, head, config_path, seed, k, jobs):
    """Cross-validate a model on the cohort in COHORT_DIR; results go to OUTDIR."""
    app.configure(config_path, {'SEED': seed, 'FOLDS': k, 'JOBS': jobs})
    settings = app.config
    cohort = load_cohort_dir(cohort_dir)
    spec = resolve_spec(settings, manifest, mode, modalities, head)
    config = TrainConfig.from_config(settings)
    plan = stratified_kfold(cohort, settings['FOLDS'], settings['SEED'])
    logger.info('training %s on %s, %d folds', spec.mode.value, ', '.join(spec.modalities), plan.k)

    result = run_cv(cohort, spec, config, plan=plan, executor=executor,
                    standardize_ordinal=settings['STANDARDIZE_ORDINAL'],
                    standardize_imaging=settings['STANDARDIZE_IMAGING'])

    out = prepare_outdir(outdir)
    write_resolved(out, settings, 'train', {'cohort': cohort_dir, 'manifest': manifest,
                                            'mode': spec.mode.value, 'modalities': spec.modalities,
                                            'head': spec.head.value})
    (out / 'manifest.ini').write_text(spec.to_ini(), encoding='utf-8')
    write_folds(plan, cohort.patient_ids, out / 'folds.csv')
    logs = prepare_outdir(out / 'logs')
    for outcome in result.folds:
        save_fold(out, outcome, spec)
        for stage, log in outcome.logs.items():
            write_csv(pd.DataFrame([record.to_dict() for record in log],
                                   columns=['epoch', 'train_loss', 'val_loss', 'lr']),
                      logs / f'fold_{outcome.fold}_{stage}.csv')
    write_csv(report_frame(result.reports), out / 'cv_report.csv')
    write_csv(pooled_frame(cohort.patient_ids, plan, result.pooled_scores), out / 'pooled_scores.csv')

    summary = result.summary()
    mean, sem = summary['harrell_c']
    click.echo(f'harrell C {mean:.4f} +/- {sem:.4f} over {plan.k} folds -> {out}')
    if not np.isfinite(result.pooled_scores).all():
        logger.warning('some pooled scores are not finite')
