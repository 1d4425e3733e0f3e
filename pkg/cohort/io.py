"""CSV ingestion and export of cohorts.

Layout of a cohort directory:

    outcome.csv           patient_id,time_days,event
    block_<name>.csv      patient_id,<feature columns...>; empty cell = unobserved,
                          absent row = modality missing for that patient
    features.ini          [<block>] <column> = numerical | ordinal | categorical:<k>
    endpoint_<name>.csv   secondary endpoints, same header as outcome.csv
    truth.csv             patient_id,true_risk (synthetic cohorts only)
"""
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from iniconfig import IniConfig, ParseError as IniParseError

from errors import ParseError
from models import Cohort, FeatureKind, FeatureSpec, ModalityBlock

logger = logging.getLogger(__name__)

OUTCOME_HEADER = ['patient_id', 'time_days', 'event']
FLOAT_FORMAT = '%.17g'


def _read_table(path):
    path = Path(path)
    if not path.exists():
        raise ParseError('file not found', path=path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ParseError(f'unreadable CSV: {exc}', path=path)
    if not len(frame.columns) or frame.columns[0] != 'patient_id':
        raise ParseError('header must start with patient_id', path=path, row=1)
    duplicated = frame['patient_id'].duplicated()
    if duplicated.any():
        row = int(np.flatnonzero(duplicated.to_numpy())[0]) + 2
        raise ParseError(f'duplicate patient id {frame["patient_id"].iloc[row - 2]!r}',
                         path=path, row=row, column='patient_id')
    return frame


def read_outcome(path):
    frame = _read_table(path)
    if list(frame.columns) != OUTCOME_HEADER:
        raise ParseError(f'header must be {",".join(OUTCOME_HEADER)}', path=path, row=1)
    times = np.empty(len(frame))
    events = np.empty(len(frame), dtype=bool)
    for i, (time_text, event_text) in enumerate(zip(frame['time_days'], frame['event'])):
        try:
            times[i] = float(time_text)
        except ValueError:
            raise ParseError(f'time {time_text!r} is not a number', path=path, row=i + 2, column='time_days')
        if times[i] < 0 or not np.isfinite(times[i]):
            raise ParseError(f'time {time_text!r} must be finite and non-negative',
                             path=path, row=i + 2, column='time_days')
        if event_text.strip() not in ('0', '1'):
            raise ParseError(f'event {event_text!r} must be 0 or 1', path=path, row=i + 2, column='event')
        events[i] = event_text.strip() == '1'
    return list(frame['patient_id']), times, events


def read_feature_specs(path):
    """Parse the sidecar into {block: {column: FeatureSpec}}."""
    try:
        ini = IniConfig(str(path))
    except IniParseError as exc:
        raise ParseError(str(exc), path=path)
    specs = {}
    for section in ini:
        block_specs = {}
        for column, text in section.items():
            kind, _, cardinality = text.strip().partition(':')
            try:
                kind = FeatureKind(kind.strip())
                card = int(cardinality) if cardinality else 0
            except ValueError:
                raise ParseError(f'bad feature kind {text!r}', path=path, column=column)
            if kind == FeatureKind.CATEGORICAL and card < 1:
                raise ParseError('categorical features need a cardinality, e.g. categorical:3',
                                 path=path, column=column)
            block_specs[column] = FeatureSpec(column, kind, card)
        specs[section.name] = block_specs
    return specs


def _read_block(name, path, patient_ids, declared):
    frame = _read_table(path)
    columns = list(frame.columns[1:])
    if not columns:
        raise ParseError('block has no feature columns', path=path, row=1)
    unknown = set(declared) - set(columns)
    if unknown:
        raise ParseError(f'sidecar declares columns absent from the block: {sorted(unknown)}', path=path)
    specs = [declared.get(column, FeatureSpec(column)) for column in columns]
    index = {pid: i for i, pid in enumerate(patient_ids)}

    n, d = len(patient_ids), len(columns)
    values = np.zeros((n, d))
    observed = np.zeros((n, d), dtype=bool)
    present = np.zeros(n, dtype=bool)
    for r, row in enumerate(frame.itertuples(index=False, name=None)):
        pid = row[0]
        if pid not in index:
            raise ParseError(f'patient {pid!r} not in the outcome file', path=path, row=r + 2,
                             column='patient_id')
        i = index[pid]
        present[i] = True
        for j, cell in enumerate(row[1:]):
            text = cell.strip()
            if not text:
                continue
            try:
                value = float(text)
            except ValueError:
                raise ParseError(f'{text!r} is not a number', path=path, row=r + 2, column=columns[j])
            spec = specs[j]
            if spec.is_categorical and (value != int(value) or not 0 <= value < spec.cardinality):
                raise ParseError(f'unknown categorical level {text!r}', path=path, row=r + 2,
                                 column=columns[j])
            values[i, j] = value
            observed[i, j] = True
    logger.debug('block %s: %d of %d patients present', name, int(present.sum()), n)
    return ModalityBlock(name, specs, values, observed, present)


def load_cohort(outcome_path, block_paths, features_path=None, endpoint_paths=None, truth_path=None):
    """Parse an outcome file plus one CSV per modality into a Cohort."""
    patient_ids, times, events = read_outcome(outcome_path)
    if not patient_ids:
        raise ParseError('outcome file lists no patients', path=outcome_path, row=2)
    declared = read_feature_specs(features_path) if features_path else {}
    blocks = {name: _read_block(name, path, patient_ids, declared.get(name, {}))
              for name, path in sorted(block_paths.items())}

    endpoints = {}
    for name, path in sorted((endpoint_paths or {}).items()):
        ids, t, e = read_outcome(path)
        if sorted(ids) != sorted(patient_ids):
            raise ParseError(f'endpoint {name!r} does not cover the same patients', path=path)
        order = {pid: i for i, pid in enumerate(ids)}
        rows = np.array([order[pid] for pid in patient_ids])
        endpoints[name] = (t[rows], e[rows])

    true_risk = None
    if truth_path:
        truth = _read_table(truth_path)
        lookup = dict(zip(truth['patient_id'], truth['true_risk'].astype(float)))
        true_risk = np.array([lookup[pid] for pid in patient_ids])
    return Cohort(patient_ids, times, events, blocks, true_risk=true_risk, endpoints=endpoints)


def cohort_files(directory):
    """Locate the files of a cohort directory written by `write_cohort`."""
    directory = Path(directory)
    outcome = directory / 'outcome.csv'
    if not outcome.exists():
        raise ParseError('no outcome.csv in cohort directory', path=directory)
    blocks = {p.stem[len('block_'):]: p for p in sorted(directory.glob('block_*.csv'))}
    endpoints = {p.stem[len('endpoint_'):]: p for p in sorted(directory.glob('endpoint_*.csv'))}
    features = directory / 'features.ini'
    truth = directory / 'truth.csv'
    return {
        'outcome_path': outcome,
        'block_paths': blocks,
        'features_path': features if features.exists() else None,
        'endpoint_paths': endpoints,
        'truth_path': truth if truth.exists() else None,
    }


def load_cohort_dir(directory):
    return load_cohort(**cohort_files(directory))


def _outcome_frame(patient_ids, times, events):
    return pd.DataFrame({'patient_id': patient_ids, 'time_days': times,
                         'event': np.asarray(events, dtype=int)})


def _write_csv(frame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep='', lineterminator='\n',
                 encoding='utf-8')


def write_cohort(cohort, outdir):
    """Write a cohort in the layout `load_cohort_dir` reads; returns the paths written."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = {}

    path = outdir / 'outcome.csv'
    _write_csv(_outcome_frame(cohort.patient_ids, cohort.times, cohort.events), path)
    written['outcome'] = path

    sidecar = []
    for name in cohort.modalities:
        block = cohort.blocks[name]
        rows = np.flatnonzero(block.present)
        data = {'patient_id': [cohort.patient_ids[i] for i in rows]}
        for j, spec in enumerate(block.specs):
            column = np.where(block.observed[rows, j], block.values[rows, j], np.nan)
            if spec.kind != FeatureKind.NUMERICAL:
                column = pd.array(np.where(np.isnan(column), 0, column).astype(np.int64), dtype='Int64')
                column[~block.observed[rows, j]] = pd.NA
            data[spec.name] = column
        path = outdir / f'block_{name}.csv'
        _write_csv(pd.DataFrame(data), path)
        written[f'block_{name}'] = path
        special = [spec for spec in block.specs if spec.kind != FeatureKind.NUMERICAL]
        if special:
            sidecar.append(f'[{name}]')
            sidecar.extend(f'{spec.name} = {spec.describe()}' for spec in special)
            sidecar.append('')

    if sidecar:
        path = outdir / 'features.ini'
        path.write_text('\n'.join(sidecar), encoding='utf-8')
        written['features'] = path

    for name, (times, events) in sorted(cohort.endpoints.items()):
        path = outdir / f'endpoint_{name}.csv'
        _write_csv(_outcome_frame(cohort.patient_ids, times, events), path)
        written[f'endpoint_{name}'] = path

    if cohort.true_risk is not None:
        path = outdir / 'truth.csv'
        _write_csv(pd.DataFrame({'patient_id': cohort.patient_ids, 'true_risk': cohort.true_risk}), path)
        written['truth'] = path
    if cohort.true_weights is not None:
        path = outdir / 'true_weights.csv'
        _write_csv(pd.DataFrame({'weight': cohort.true_weights}), path)
        written['true_weights'] = path
    logger.info('wrote cohort of %d patients to %s', cohort.n_patients, outdir)
    return written
