import os
from dotenv import load_dotenv
from iniconfig import IniConfig, ParseError as IniParseError

from errors import ConfigError

# Load environment variables from a local .env file when present
load_dotenv()


class Config:
    """Base configuration: full-scale training values."""
    # Runtime
    SEED = int(os.getenv('SURV_SEED', '0'))
    JOBS = int(os.getenv('SURV_JOBS', '1'))
    FOLDS = 5
    LOG_LEVEL = os.getenv('SURV_LOG_LEVEL', 'INFO')
    LOG_CONFIG = os.getenv('SURV_LOG_CONFIG', '')

    # Trainer
    MAX_EPOCHS = 500
    EARLY_STOP_PATIENCE = 50
    BATCH_SIZE = 32
    WEIGHT_DECAY = 1e-5
    LR_MIN = 1e-8
    LR_MAX = 1e-5
    WARMUP_EPOCHS = 50
    PLATEAU_PATIENCE = 20
    DECAY_STEPS = 12
    ENCODER_LR_FACTOR = 0.1
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-8
    IMPROVEMENT_TOL = 1e-6

    # Encoder
    D_MODEL = 32
    N_HEADS = 4
    N_LAYERS = 2
    FF_DIM = 64
    GROUP_SIZE = 1
    MLP_HIDDEN = 64

    # ODST heads
    UNIMODAL_TREES = 8
    UNIMODAL_DEPTH = 4
    FUSION_TREES = 16
    FUSION_DEPTH = 4
    ODST_OUT_DIM = 1

    # Cohort preprocessing
    STANDARDIZE_ORDINAL = True
    STANDARDIZE_IMAGING = True


class DevelopmentConfig(Config):
    LOG_LEVEL = os.getenv('SURV_LOG_LEVEL', 'DEBUG')
    LOG_CONFIG = os.getenv('SURV_LOG_CONFIG', os.path.join(os.path.dirname(__file__), 'logging.ini'))


class DeskConfig(Config):
    """Sizes that finish a 5-fold run on a laptop CPU in minutes."""
    MAX_EPOCHS = 120
    EARLY_STOP_PATIENCE = 25
    LR_MAX = 3e-3
    LR_MIN = 3e-6
    WARMUP_EPOCHS = 5
    PLATEAU_PATIENCE = 10
    D_MODEL = 16
    N_HEADS = 2
    N_LAYERS = 1
    FF_DIM = 32
    GROUP_SIZE = 16


class TestingConfig(Config):
    LOG_CONFIG = ''
    LOG_LEVEL = 'WARNING'
    FOLDS = 3
    MAX_EPOCHS = 15
    EARLY_STOP_PATIENCE = 8
    BATCH_SIZE = 16
    LR_MAX = 1e-2
    LR_MIN = 1e-5
    WARMUP_EPOCHS = 2
    PLATEAU_PATIENCE = 4
    D_MODEL = 8
    N_HEADS = 2
    N_LAYERS = 1
    FF_DIM = 16
    MLP_HIDDEN = 16
    UNIMODAL_TREES = 4
    UNIMODAL_DEPTH = 2
    FUSION_TREES = 4
    FUSION_DEPTH = 2


# INI sections a config file may use, and the keys each one owns
SECTIONS = {
    'runtime': ('SEED', 'JOBS', 'FOLDS', 'LOG_LEVEL', 'LOG_CONFIG'),
    'trainer': ('MAX_EPOCHS', 'EARLY_STOP_PATIENCE', 'BATCH_SIZE', 'WEIGHT_DECAY',
                'LR_MIN', 'LR_MAX', 'WARMUP_EPOCHS', 'PLATEAU_PATIENCE', 'DECAY_STEPS',
                'ENCODER_LR_FACTOR', 'ADAM_BETA1', 'ADAM_BETA2', 'ADAM_EPS',
                'IMPROVEMENT_TOL'),
    'encoder': ('D_MODEL', 'N_HEADS', 'N_LAYERS', 'FF_DIM', 'GROUP_SIZE', 'MLP_HIDDEN'),
    'odst': ('UNIMODAL_TREES', 'UNIMODAL_DEPTH', 'FUSION_TREES', 'FUSION_DEPTH',
             'ODST_OUT_DIM'),
    'cohort': ('STANDARDIZE_ORDINAL', 'STANDARDIZE_IMAGING'),
}

CONFIG_CLASSES = {
    'development': DevelopmentConfig,
    'desk': DeskConfig,
    'testing': TestingConfig,
}


def coerce_value(raw, default, where=''):
    """Convert an INI string to the type of the default it replaces."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f'{where}: cannot read {text!r} as {type(default).__name__}')
    return text


def format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Settings(dict):
    """Resolved configuration mapping (UPPERCASE keys)."""

    def from_object(self, obj):
        for key in dir(obj):
            if key.isupper():
                self[key] = getattr(obj, key)

    def from_ini(self, path, extra_sections=()):
        """Apply a `key = value` INI file; returns the extra sections untouched."""
        try:
            ini = IniConfig(str(path))
        except FileNotFoundError:
            raise ConfigError(f'config file not found: {path}')
        except IniParseError as exc:
            raise ConfigError(f'{path}: {exc}')

        extras = {}
        for section in ini:
            if section.name in extra_sections:
                extras[section.name] = dict(section.items())
                continue
            if section.name not in SECTIONS:
                raise ConfigError(f'{path}: unknown section [{section.name}]')
            allowed = SECTIONS[section.name]
            for name, raw in section.items():
                key = name.upper()
                if key not in allowed:
                    raise ConfigError(f'{path}: unknown key {name!r} in [{section.name}]')
                self[key] = coerce_value(raw, self.get(key), f'{path} [{section.name}] {name}')
        return extras

    def override(self, values):
        """Apply already-typed overrides, e.g. from command-line flags."""
        for key, value in values.items():
            if value is None:
                continue
            key = key.upper()
            if key not in self:
                raise ConfigError(f'unknown configuration key {key}')
            self[key] = coerce_value(value, self[key], key)

    def to_ini(self, extra_sections=None):
        """Serialize every key, grouped by section and sorted, as INI text."""
        lines = []
        for section, keys in SECTIONS.items():
            lines.append(f'[{section}]')
            for key in sorted(keys):
                if key in self:
                    lines.append(f'{key.lower()} = {format_value(self[key])}')
            lines.append('')
        for section, values in (extra_sections or {}).items():
            lines.append(f'[{section}]')
            for key in sorted(values):
                lines.append(f'{key} = {format_value(values[key])}')
            lines.append('')
        return '\n'.join(lines)
