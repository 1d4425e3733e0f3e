"""Click commands, one module per subcommand, registered by app.register_commands."""
import functools
import logging
from pathlib import Path

import click

from config import format_value
from errors import SurvivalError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'


def surface_errors(fn):
    """Turn toolkit errors into a one-line diagnostic with exit status 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SurvivalError as exc:
            logger.debug('command failed', exc_info=True)
            raise click.ClickException(' '.join(str(exc).split()))

    return wrapper


def prepare_outdir(path):
    outdir = Path(path)
    outdir.mkdir(parents=True, exist_ok=True)
    return outdir


def write_resolved(outdir, settings, command, parameters, filename='config.resolved'):
    """Write every setting plus the command and its parameters to outdir/filename.

    Commands that write into an existing run directory pass their own filename
    so the config.resolved of `train` stays untouched.
    """
    values = {'name': command}
    for key, value in parameters.items():
        if value is None or value == () or value == []:
            continue
        if isinstance(value, (list, tuple)):
            value = ', '.join(format_value(v) for v in value)
        values[key] = value
    path = Path(outdir) / filename
    path.write_text(settings.to_ini({'command': values}), encoding='utf-8')
    return path


def write_csv(frame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n', encoding='utf-8')
    logger.info('wrote %s', path)
    return Path(path)
