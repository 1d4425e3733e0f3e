"""Parameter checkpoint archives.

A checkpoint is a zip file. Each parameter is stored as `params/<name>.npy`
holding a little-endian float64 array (`<f8`) with its shape in the npy
header. `frozen.txt` lists frozen parameter names one per line and
`manifest.ini` (optional) holds the model manifest. Member timestamps are
fixed so identical parameters produce identical bytes.
"""
import io
import logging
import zipfile
from pathlib import Path

import numpy as np

from engine import diffcore as dc
from errors import ParseError

logger = logging.getLogger(__name__)

FIXED_DATE = (1980, 1, 1, 0, 0, 0)
PARAM_DIR = 'params/'


def _member(name):
    info = zipfile.ZipInfo(name, date_time=FIXED_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def _npy_bytes(array):
    buffer = io.BytesIO()
    np.save(buffer, np.ascontiguousarray(array, dtype='<f8'), allow_pickle=False)
    return buffer.getvalue()


def save_checkpoint(path, params, manifest=None, extra=None):
    """Write `params` (a ParameterSet or a name -> array map) to `path`.

    `extra` maps additional names to arrays stored next to the parameters,
    e.g. fitted preprocessing statistics.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(params.items())
    frozen = sorted(getattr(params, 'frozen', ()))
    with zipfile.ZipFile(path, 'w') as archive:
        for name in sorted(arrays):
            archive.writestr(_member(f'{PARAM_DIR}{name}.npy'), _npy_bytes(arrays[name]))
        for name in sorted(extra or {}):
            archive.writestr(_member(f'extra/{name}.npy'), _npy_bytes(extra[name]))
        archive.writestr(_member('frozen.txt'), ''.join(f'{name}\n' for name in frozen))
        if manifest is not None:
            archive.writestr(_member('manifest.ini'), manifest)
    logger.info('wrote checkpoint %s (%d parameters)', path, len(arrays))
    return path


class Checkpoint:
    """Contents of a checkpoint archive."""

    def __init__(self, arrays, frozen, manifest=None, extra=None):
        self.arrays = arrays
        self.frozen = set(frozen)
        self.manifest = manifest
        self.extra = extra or {}

    def to_parameter_set(self):
        params = dc.ParameterSet()
        for name in sorted(self.arrays):
            params.add(name, self.arrays[name], trainable=name not in self.frozen)
        return params


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise ParseError('checkpoint not found', path=path)
    arrays, extra, frozen, manifest = {}, {}, [], None
    try:
        with zipfile.ZipFile(path) as archive:
            for name in archive.namelist():
                if name.endswith('.npy'):
                    with archive.open(name) as handle:
                        array = np.load(io.BytesIO(handle.read()), allow_pickle=False)
                    key = name[:-len('.npy')]
                    if key.startswith(PARAM_DIR):
                        arrays[key[len(PARAM_DIR):]] = array.astype(np.float64)
                    elif key.startswith('extra/'):
                        extra[key[len('extra/'):]] = array.astype(np.float64)
                elif name == 'frozen.txt':
                    frozen = [line for line in archive.read(name).decode('utf-8').splitlines() if line]
                elif name == 'manifest.ini':
                    manifest = archive.read(name).decode('utf-8')
    except (zipfile.BadZipFile, ValueError) as exc:
        raise ParseError(f'unreadable checkpoint: {exc}', path=path)
    return Checkpoint(arrays, frozen, manifest, extra)


def fold_checkpoint_path(outdir, fold):
    """Where `train` stores the model of one fold inside its output directory."""
    return Path(outdir) / 'checkpoints' / f'fold_{fold}.ckpt'
