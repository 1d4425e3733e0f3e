import logging

import click
import numpy as np
import pandas as pd

from cohort.io import cohort_files, read_outcome
from commands import prepare_outdir, surface_errors, write_csv, write_resolved
from errors import ParseError
from evaluation.stratify import align_scores, stratify

logger = logging.getLogger(__name__)

PRIMARY = 'os'


def parse_endpoints(ctx, param, value):
    endpoints = {}
    for item in value:
        name, sep, path = item.partition('=')
        if not sep or not name.strip() or not path.strip():
            raise click.BadParameter(f'expected NAME=PATH, got {item!r}')
        endpoints[name.strip()] = path.strip()
    return endpoints


def _aligned(path, patient_ids):
    ids, times, events = read_outcome(path)
    order = {pid: i for i, pid in enumerate(ids)}
    missing = [pid for pid in patient_ids if pid not in order]
    if missing:
        raise ParseError(f'{len(missing)} patients missing, e.g. {missing[0]!r}', path=path)
    rows = np.array([order[pid] for pid in patient_ids])
    return times[rows], events[rows]


def read_scores(path):
    try:
        frame = pd.read_csv(path, dtype={'patient_id': str})
    except (FileNotFoundError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ParseError(f'unreadable scores file: {exc}', path=path)
    if not {'patient_id', 'pooled_score'} <= set(frame.columns):
        raise ParseError('scores need patient_id and pooled_score columns', path=path, row=1)
    return frame


@click.command('stratify')
@click.argument('scores_path', type=click.Path(dir_okay=False))
@click.argument('outdir', type=click.Path(file_okay=False))
@click.option('--outcome', type=click.Path(dir_okay=False),
              help='Overall-survival outcome file (patient_id,time_days,event).')
@click.option('--cohort', 'cohort_dir', type=click.Path(file_okay=False),
              help='Cohort directory; supplies outcome.csv and every endpoint_<name>.csv.')
@click.option('--endpoint', 'endpoints', multiple=True, callback=parse_endpoints,
              help='Secondary endpoint as NAME=PATH; repeatable.')
@click.option('--cutoff', type=float, help='Fixed risk cutoff instead of the log-rank optimum.')
@click.pass_obj
@surface_errors
def stratify_cmd(app, scores_path, outdir, outcome, cohort_dir, endpoints, cutoff):
    """Split patients into risk groups by pooled score and compare their survival."""
    if cohort_dir:
        files = cohort_files(cohort_dir)
        outcome = outcome or files['outcome_path']
        endpoints = {**files['endpoint_paths'], **endpoints}
    if not outcome:
        raise click.UsageError('give --outcome or --cohort')

    patient_ids, times, events = read_outcome(outcome)
    outcomes = {PRIMARY: (times, events)}
    for name, path in sorted(endpoints.items()):
        outcomes[name] = _aligned(path, patient_ids)
    scores = align_scores(read_scores(scores_path), patient_ids)
    result = stratify(patient_ids, scores, outcomes, cutoff=cutoff)

    out = prepare_outdir(outdir)
    write_resolved(out, app.config, 'stratify', {'scores': scores_path, 'outcome': outcome,
                                                 'endpoints': [f'{k}={v}' for k, v in sorted(endpoints.items())],
                                                 'cutoff': result.cutoff, 'cutoff_source': result.cutoff_source})
    write_csv(result.groups, out / 'risk_groups.csv')
    write_csv(result.curves, out / 'km_curves.csv')
    write_csv(result.report, out / 'logrank_report.csv')
    p_value = result.endpoints[PRIMARY]['p_value']
    click.echo(f'cutoff {result.cutoff:.6g} ({result.cutoff_source}), log-rank p = {p_value:.4g}')
