"""Unimodal, fused and baseline survival models.

Every model exposes the same surface used by the trainer:
`params`, `modalities`, `prepare(train_inputs, first_batch)`,
`forward(graph, leaves, inputs)`, `predict(inputs)` and `lr_factor(name, config)`.
Inputs are dictionaries mapping modality name to a ModalityInput.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from iniconfig import IniConfig, ParseError as IniParseError
from scipy.stats import rankdata

from config import coerce_value, format_value
from engine import diffcore as dc
from engine.encoder import MissingAwareEncoder
from engine.odst import OdstHead, build_head
from errors import ConfigError, ContractError
from models import FusionMode, HeadKind, ModalityInput

logger = logging.getLogger(__name__)

PREDICT_CHUNK = 256


def take_rows(inputs, rows):
    rows = np.asarray(rows)
    return {name: ModalityInput(item.values[rows], item.observed[rows]) for name, item in inputs.items()}


def n_rows(inputs):
    sizes = {len(item.values) for item in inputs.values()}
    if len(sizes) != 1:
        raise ContractError(f'modalities disagree on the number of patients: {sorted(sizes)}')
    return sizes.pop()


# ============== MANIFEST ==============
@dataclass
class ModelSpec:
    """What to build: mode, modalities and the sizes of every component."""
    mode: FusionMode
    modalities: List[str]
    head: HeadKind = HeadKind.ODST
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    ff_dim: int = 64
    group_size: int = 1
    group_sizes: Dict[str, int] = field(default_factory=dict)
    mlp_hidden: int = 64
    head_trees: int = 8
    head_depth: int = 4
    out_dim: int = 1
    fusion_trees: int = 16
    fusion_depth: int = 4
    pretrained: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.mode = FusionMode(self.mode)
        self.head = HeadKind(self.head)
        self.modalities = sorted(dict.fromkeys(self.modalities))
        if not self.modalities:
            raise ConfigError('a model needs at least one modality')
        if self.mode == FusionMode.UNIMODAL and len(self.modalities) != 1:
            raise ConfigError(f'unimodal mode takes one modality, got {self.modalities}')
        if self.mode == FusionMode.LATE and len(self.modalities) < 2:
            raise ConfigError('late fusion needs at least two modalities')
        unknown = set(self.pretrained) - set(self.modalities)
        if unknown:
            raise ConfigError(f'[pretrained] names modalities not in the model: {sorted(unknown)}')

    @property
    def two_stage(self):
        return self.mode in (FusionMode.EARLY, FusionMode.INTERMEDIATE)

    def group_size_for(self, modality):
        return self.group_sizes.get(modality, 1 if modality == 'tabular' else self.group_size)

    def unimodal(self, modality):
        """Spec of the single-modality model a fused model is pretrained from."""
        return ModelSpec(FusionMode.UNIMODAL, [modality], self.head, self.d_model, self.n_heads,
                         self.n_layers, self.ff_dim, self.group_size, dict(self.group_sizes),
                         self.mlp_hidden, self.head_trees, self.head_depth, self.out_dim)

    @classmethod
    def from_settings(cls, settings, mode, modalities, head=HeadKind.ODST):
        return cls(mode=mode, modalities=list(modalities), head=head,
                   d_model=settings['D_MODEL'], n_heads=settings['N_HEADS'],
                   n_layers=settings['N_LAYERS'], ff_dim=settings['FF_DIM'],
                   group_size=settings['GROUP_SIZE'], mlp_hidden=settings['MLP_HIDDEN'],
                   head_trees=settings['UNIMODAL_TREES'], head_depth=settings['UNIMODAL_DEPTH'],
                   out_dim=settings['ODST_OUT_DIM'], fusion_trees=settings['FUSION_TREES'],
                   fusion_depth=settings['FUSION_DEPTH'])

    @classmethod
    def from_manifest(cls, path, settings, data=None):
        """Read a model manifest; unset sizes fall back to `settings`.

        `data` holds the manifest text when it comes from a checkpoint rather
        than a file; `path` is then only used in messages.
        """
        try:
            ini = IniConfig(str(path), data=data)
        except FileNotFoundError:
            raise ConfigError(f'manifest not found: {path}')
        except IniParseError as exc:
            raise ConfigError(f'{path}: {exc}')
        if 'model' not in ini:
            raise ConfigError(f'{path}: missing [model] section')

        model = ini['model']
        mode = model.get('mode')
        modalities = [m.strip() for m in (model.get('modalities') or '').split(',') if m.strip()]
        if not mode or not modalities:
            raise ConfigError(f'{path}: [model] needs mode and modalities')
        try:
            spec = cls.from_settings(settings, mode, modalities, model.get('head', 'odst'))
        except ValueError as exc:
            raise ConfigError(f'{path}: {exc}')

        known = {
            'model': {'mode', 'modalities', 'head'},
            'encoder': {'d_model', 'n_heads', 'n_layers', 'ff_dim', 'group_size', 'mlp_hidden'},
            'head': {'n_trees', 'depth', 'out_dim'},
            'fusion': {'n_trees', 'depth'},
        }
        renames = {'head': {'n_trees': 'head_trees', 'depth': 'head_depth'},
                   'fusion': {'n_trees': 'fusion_trees', 'depth': 'fusion_depth'}}
        for section in ini:
            where = f'{path} [{section.name}]'
            if section.name == 'pretrained':
                spec.pretrained = {key: value for key, value in section.items()}
            elif section.name.startswith('encoder.'):
                modality = section.name.split('.', 1)[1]
                for key, raw in section.items():
                    if key != 'group_size':
                        raise ConfigError(f'{where}: unknown key {key!r}')
                    spec.group_sizes[modality] = coerce_value(raw, 1, f'{where} {key}')
            elif section.name in known:
                if section.name == 'model':
                    continue
                for key, raw in section.items():
                    if key not in known[section.name]:
                        raise ConfigError(f'{where}: unknown key {key!r}')
                    attr = renames.get(section.name, {}).get(key, key)
                    setattr(spec, attr, coerce_value(raw, getattr(spec, attr), f'{where} {key}'))
            else:
                raise ConfigError(f'{where}: unknown section')
        spec.__post_init__()
        return spec

    def to_sections(self):
        sections = {
            'model': {'mode': self.mode.value, 'modalities': ', '.join(self.modalities),
                      'head': self.head.value},
            'encoder': {'d_model': self.d_model, 'n_heads': self.n_heads, 'n_layers': self.n_layers,
                        'ff_dim': self.ff_dim, 'group_size': self.group_size,
                        'mlp_hidden': self.mlp_hidden},
            'head': {'n_trees': self.head_trees, 'depth': self.head_depth, 'out_dim': self.out_dim},
            'fusion': {'n_trees': self.fusion_trees, 'depth': self.fusion_depth},
        }
        for modality, size in sorted(self.group_sizes.items()):
            sections[f'encoder.{modality}'] = {'group_size': size}
        if self.pretrained:
            sections['pretrained'] = dict(self.pretrained)
        return sections

    def to_ini(self):
        lines = []
        for section, values in self.to_sections().items():
            lines.append(f'[{section}]')
            lines.extend(f'{key} = {format_value(value)}' for key, value in values.items())
            lines.append('')
        return '\n'.join(lines)


# ============== MODELS ==============
class _GraphModel:
    """Shared predict/prepare plumbing for models built on one ParameterSet."""
    modalities = ()

    def forward(self, graph, leaves, inputs):
        raise NotImplementedError

    def check_inputs(self, inputs):
        missing = [name for name in self.modalities if name not in inputs]
        if missing:
            raise ContractError(f'modalities {missing} configured in the model but absent from the input')
        return n_rows({name: inputs[name] for name in self.modalities})

    def prepare(self, train_inputs, first_batch):
        pass

    def lr_factor(self, name, config):
        return 1.0

    def predict(self, inputs):
        n = self.check_inputs(inputs)
        scores = []
        for start in range(0, n, PREDICT_CHUNK):
            rows = np.arange(start, min(n, start + PREDICT_CHUNK))
            graph = dc.ValueGraph()
            y = self.forward(graph, self.params.bind(graph), take_rows(inputs, rows))
            scores.append(y.value)
        return np.concatenate(scores)


def _encoder_options(spec, modality):
    return dict(d_model=spec.d_model, n_heads=spec.n_heads,
                n_layers=0 if spec.head == HeadKind.MLP else spec.n_layers,
                ff_dim=spec.ff_dim, group_size=spec.group_size_for(modality))


def _head_options(spec):
    return dict(n_trees=spec.head_trees, depth=spec.head_depth, out_dim=spec.out_dim,
                hidden=spec.mlp_hidden)


class UnimodalModel(_GraphModel):
    """One encoder followed by one risk head."""

    def __init__(self, spec, feature_specs, params=None, rng=None):
        self.spec = spec
        self.modality = spec.modalities[0]
        self.modalities = [self.modality]
        self.params = params if params is not None else dc.ParameterSet()
        rng = rng or np.random.default_rng(0)
        self.encoder = MissingAwareEncoder(self.modality, feature_specs[self.modality], self.params,
                                           rng=rng, **_encoder_options(spec, self.modality))
        self.head = build_head(spec.head, f'head.{self.modality}', self.encoder.output_dim,
                               self.params, rng=rng, **_head_options(spec))

    def prepare(self, train_inputs, first_batch):
        if self.head.thresholds_ready:
            return
        item = take_rows(train_inputs, first_batch)[self.modality]
        self.head.init_thresholds(self.encoder_values(item))

    def encoder_values(self, item):
        graph = dc.ValueGraph()
        return self.encoder.encode(graph, self.params.bind(graph), item.values, item.observed).value

    def forward(self, graph, leaves, inputs):
        self.check_inputs(inputs)
        item = inputs[self.modality]
        h = self.encoder.encode(graph, leaves, item.values, item.observed)
        return self.head.forward(graph, leaves, h)


class FusionModel(_GraphModel):
    """Encoders concatenated in lexical modality order, then one ODST head.

    Early mode freezes every encoder parameter; intermediate mode trains them
    at a reduced learning rate.
    """

    def __init__(self, spec, feature_specs, params=None, rng=None):
        if spec.mode not in (FusionMode.EARLY, FusionMode.INTERMEDIATE):
            raise ConfigError(f'FusionModel does not handle mode {spec.mode.value!r}')
        self.spec = spec
        self.mode = spec.mode
        self.modalities = list(spec.modalities)
        self.params = params if params is not None else dc.ParameterSet()
        rng = rng or np.random.default_rng(0)
        self.encoders = {
            name: MissingAwareEncoder(name, feature_specs[name], self.params, rng=rng,
                                      **_encoder_options(spec, name))
            for name in self.modalities
        }
        width = sum(encoder.output_dim for encoder in self.encoders.values())
        self.head = OdstHead('fusion', width, self.params, n_trees=spec.fusion_trees,
                             depth=spec.fusion_depth, out_dim=spec.out_dim, rng=rng)
        self.apply_freezing()

    def apply_freezing(self):
        if self.mode == FusionMode.EARLY:
            self.params.freeze('encoder.')

    def load_encoder(self, modality, arrays):
        """Copy a pretrained unimodal encoder into this model."""
        prefix = f'encoder.{modality}.'
        selected = {name: array for name, array in arrays.items() if name.startswith(prefix)}
        if not selected:
            raise ContractError(f'no {prefix}* parameters in the pretrained checkpoint')
        loaded = self.params.load(selected, strict=True)
        logger.info('loaded %d pretrained parameters for %s', len(loaded), modality)
        return loaded

    def fused_representation(self, graph, leaves, inputs):
        parts = []
        for name in self.modalities:
            item = inputs[name]
            parts.append(self.encoders[name].encode(graph, leaves, item.values, item.observed))
        return parts[0] if len(parts) == 1 else dc.concat(parts, axis=1)

    def prepare(self, train_inputs, first_batch):
        if self.head.thresholds_ready:
            return
        graph = dc.ValueGraph()
        h = self.fused_representation(graph, self.params.bind(graph), take_rows(train_inputs, first_batch))
        self.head.init_thresholds(h.value)

    def forward(self, graph, leaves, inputs):
        self.check_inputs(inputs)
        h = self.fused_representation(graph, leaves, inputs)
        return self.head.forward(graph, leaves, h)

    def lr_factor(self, name, config):
        if self.mode == FusionMode.INTERMEDIATE and name.startswith('encoder.'):
            return config.encoder_lr_factor
        return 1.0


def forward_fused(inputs, model):
    """y_m for every patient of `inputs` under an early or intermediate model."""
    if not isinstance(model, FusionModel):
        raise ContractError('forward_fused needs an early or intermediate fusion model')
    return model.predict(inputs)


# ============== LATE FUSION ==============
def late_fuse(score_vectors, present=None):
    """Sum of per-modality average ranks (ascending risk).

    `present` optionally maps a modality to a boolean vector; a patient who
    lacks the modality contributes the median rank (n + 1) / 2. The average
    ranks of the n_present remaining patients are multiplied by
    (n + 1) / (n_present + 1), so their mean is also (n + 1) / 2 and absence
    neither raises nor lowers a patient against the present ones on average.
    """
    if isinstance(score_vectors, dict):
        names = sorted(score_vectors)
        vectors = [np.asarray(score_vectors[name], dtype=np.float64) for name in names]
    else:
        names = list(range(len(score_vectors)))
        vectors = [np.asarray(v, dtype=np.float64) for v in score_vectors]
    if len(vectors) < 2:
        raise ContractError('late fusion needs at least two score vectors')
    n = len(vectors[0])
    if any(len(v) != n for v in vectors):
        raise ContractError(f'score vectors differ in length: {[len(v) for v in vectors]}')

    fused = np.zeros(n)
    for name, scores in zip(names, vectors):
        mask = np.ones(n, dtype=bool) if present is None or name not in present \
            else np.asarray(present[name], dtype=bool)
        ranks = np.full(n, (n + 1) / 2.0)
        n_present = int(mask.sum())
        if n_present:
            ranks[mask] = rankdata(scores[mask], method='average') * (n + 1) / (n_present + 1)
        fused += ranks
    return fused


class LateFusionModel:
    """Independent unimodal models combined by rank summation."""

    def __init__(self, spec, feature_specs, members=None, rng=None):
        self.spec = spec
        self.modalities = list(spec.modalities)
        rng = rng or np.random.default_rng(0)
        self.members = members or {
            name: UnimodalModel(spec.unimodal(name), feature_specs, rng=rng) for name in self.modalities
        }

    def member_scores(self, inputs):
        return {name: model.predict(inputs) for name, model in self.members.items()}

    def predict(self, inputs):
        missing = [name for name in self.modalities if name not in inputs]
        if missing:
            raise ContractError(f'modalities {missing} configured in the model but absent from the input')
        present = {name: inputs[name].observed.any(axis=1) for name in self.modalities}
        return late_fuse(self.member_scores(inputs), present)


# ============== LINEAR CPH ==============
def linear_cph_forward(values, observed, weights, bias=0.0):
    """y = w . x + b with unobserved entries contributing 0."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    observed = np.atleast_2d(np.asarray(observed, dtype=bool))
    clean = np.where(observed, values, 0.0)
    return clean @ np.asarray(weights, dtype=np.float64).reshape(-1) + float(np.asarray(bias).reshape(-1)[0])


class LinearCoxModel(_GraphModel):
    """Linear risk over one-hot categoricals and mean-imputed numericals."""

    def __init__(self, spec, feature_specs, params=None, rng=None):
        self.spec = spec
        self.modalities = list(spec.modalities)
        self.params = params if params is not None else dc.ParameterSet()
        self.columns = []
        for name in self.modalities:
            for j, fs in enumerate(feature_specs[name]):
                if fs.is_categorical:
                    self.columns.extend((name, j, level) for level in range(fs.cardinality))
                else:
                    self.columns.append((name, j, None))
        width = len(self.columns)
        self.means_ready = 'cph.impute_mean' in self.params
        if not self.means_ready:
            self.params.add('cph.weight', np.zeros((width, 1)))
            self.params.add('cph.bias', np.zeros(1))
            self.params.add('cph.impute_mean', np.zeros(width), trainable=False)

    def _raw_design(self, inputs):
        n = n_rows({name: inputs[name] for name in self.modalities})
        design = np.zeros((n, len(self.columns)))
        observed = np.zeros((n, len(self.columns)), dtype=bool)
        for c, (name, j, level) in enumerate(self.columns):
            item = inputs[name]
            seen = item.observed[:, j]
            observed[:, c] = seen
            if level is None:
                design[:, c] = np.where(seen, item.values[:, j], 0.0)
            else:
                design[:, c] = (seen & (item.values[:, j] == level)).astype(np.float64)
        return design, observed

    def prepare(self, train_inputs, first_batch):
        """Fit the imputation means on the training rows."""
        if self.means_ready:
            return
        design, observed = self._raw_design(train_inputs)
        counts = observed.sum(axis=0)
        sums = np.where(observed, design, 0.0).sum(axis=0)
        means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
        self.params['cph.impute_mean'][...] = means
        self.means_ready = True

    def design(self, inputs):
        design, observed = self._raw_design(inputs)
        return np.where(observed, design, self.params['cph.impute_mean'][None, :])

    def forward(self, graph, leaves, inputs):
        self.check_inputs(inputs)
        x = graph.constant(self.design(inputs))
        y = dc.add(dc.matmul(x, leaves['cph.weight']), leaves['cph.bias'])
        return dc.reshape(y, (x.shape[0],))

    @property
    def weights(self):
        return self.params['cph.weight'].reshape(-1)


def build_model(spec, feature_specs, rng=None):
    """Construct the model object a ModelSpec describes."""
    missing = [name for name in spec.modalities if name not in feature_specs]
    if missing:
        raise ConfigError(f'cohort has no block for modalities {missing}')
    if spec.mode == FusionMode.UNIMODAL:
        return UnimodalModel(spec, feature_specs, rng=rng)
    if spec.mode == FusionMode.LATE:
        return LateFusionModel(spec, feature_specs, rng=rng)
    if spec.mode == FusionMode.LINEAR_CPH:
        return LinearCoxModel(spec, feature_specs, rng=rng)
    return FusionModel(spec, feature_specs, rng=rng)


def parameter_arrays(model):
    """Every parameter of a model under its qualified name."""
    if isinstance(model, LateFusionModel):
        arrays, frozen = {}, set()
        for member in model.members.values():
            arrays.update(member.params.items())
            frozen |= member.params.frozen
        merged = dc.ParameterSet()
        for name in sorted(arrays):
            merged.add(name, arrays[name], trainable=name not in frozen)
        return merged
    return model.params


def load_parameters(model, arrays):
    """Copy checkpointed arrays into a freshly built model of the same spec."""
    if isinstance(model, LateFusionModel):
        for name, member in model.members.items():
            member.params.load({key: value for key, value in arrays.items()
                                if key.startswith((f'encoder.{name}.', f'head.{name}.'))})
            member.head.thresholds_ready = True
        return model
    model.params.load(arrays)
    if hasattr(model, 'head'):
        model.head.thresholds_ready = True
    if isinstance(model, LinearCoxModel):
        model.means_ready = True
    return model
