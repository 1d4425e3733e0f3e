import logging
from pathlib import Path

import click

from cohort.io import load_cohort_dir
from commands import prepare_outdir, surface_errors, write_csv, write_resolved
from engine.trainer import restore_run
from evaluation.sweep import sweep_missingness

logger = logging.getLogger(__name__)


def parse_fractions(ctx, param, value):
    if not value:
        return None
    try:
        return [float(part) for part in value.split(',') if part.strip()]
    except ValueError:
        raise click.BadParameter(f'expected comma-separated fractions, got {value!r}')


@click.command('sweep-missing')
@click.argument('run_dir', type=click.Path(file_okay=False))
@click.argument('cohort_dir', type=click.Path(file_okay=False))
@click.option('--modality', required=True, help='Modality to mask.')
@click.option('--fractions', callback=parse_fractions,
              help='Ascending missing fractions, e.g. 0.665,0.8,1.0. Defaults to the baseline '
                   'and every tenth above it.')
@click.option('--out', 'outdir', type=click.Path(file_okay=False),
              help='Output directory; defaults to RUN_DIR.')
@click.option('--seed', type=int, help='Seed of the masking draw.')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='INI config file.')
@click.pass_obj
@surface_errors
def sweep_cmd(app, run_dir, cohort_dir, modality, fractions, outdir, seed, config_path):
    """Re-evaluate the saved fold models of RUN_DIR while masking one modality."""
    app.configure(config_path, {'SEED': seed})
    settings = app.config
    cohort = load_cohort_dir(cohort_dir)
    plan, restored = restore_run(run_dir, cohort, settings)
    frame = sweep_missingness(plan, restored, cohort, modality, fractions, seed=settings['SEED'])

    out = prepare_outdir(outdir or run_dir)
    in_run_dir = Path(out).resolve() == Path(run_dir).resolve()
    write_resolved(out, settings, 'sweep-missing',
                   {'run': run_dir, 'cohort': cohort_dir, 'modality': modality, 'fractions': fractions},
                   filename='sweep.resolved' if in_run_dir else 'config.resolved')
    write_csv(frame, out / 'sweep.csv')
    click.echo(f'{len(frame)} fractions -> {out / "sweep.csv"}')
