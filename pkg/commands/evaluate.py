import logging
from pathlib import Path

import click

from cohort.io import load_cohort_dir
from commands import surface_errors, write_csv, write_resolved
from commands.train import pooled_frame, report_frame
from engine.trainer import restore_run, score_run

logger = logging.getLogger(__name__)


@click.command('eval')
@click.argument('run_dir', type=click.Path(file_okay=False))
@click.argument('cohort_dir', type=click.Path(file_okay=False))
@click.option('--pooled/--no-pooled', default=False,
              help='Also write the re-scored pooled_scores to eval_scores.csv.')
@click.pass_obj
@surface_errors
def eval_cmd(app, run_dir, cohort_dir, pooled):
    """Re-score the fold checkpoints of a `train` run on their test folds.

    Writes eval_report.csv and eval.resolved into RUN_DIR.
    """
    cohort = load_cohort_dir(cohort_dir)
    plan, restored = restore_run(run_dir, cohort, app.config)
    reports, scores = score_run(plan, restored, cohort)
    out = Path(run_dir)
    write_resolved(out, app.config, 'eval', {'run': run_dir, 'cohort': cohort_dir, 'pooled': pooled},
                   filename='eval.resolved')
    report = report_frame(reports)
    write_csv(report, out / 'eval_report.csv')
    if pooled:
        write_csv(pooled_frame(cohort.patient_ids, plan, scores), out / 'eval_scores.csv')
    mean, sem = report.iloc[-1][['harrell_c', 'harrell_c_sem']]
    click.echo(f'harrell C {mean:.4f} +/- {sem:.4f} over {plan.k} folds')
