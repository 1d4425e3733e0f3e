"""Synthetic multimodal survival cohorts with a known risk oracle.

A latent factor z is drawn per patient. Each signal-bearing modality observes
a linear image of its own slice of z plus noise, and the true log-hazard is a
weighted sum of one unit-variance projection per slice (plus an optional
product of two of them). Pure-noise modalities (weight 0) observe an
independent latent. Event times are exponential with rate
baseline_hazard * exp(risk); censoring is exponential with a rate chosen so
that the realized censoring count equals round(censoring * n).
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
from iniconfig import IniConfig, ParseError as IniParseError

from config import coerce_value
from errors import ConfigError
from models import DEFAULT_WIDTHS, Cohort, FeatureKind, FeatureSpec, ModalityBlock

logger = logging.getLogger(__name__)

# secondary endpoints: (hazard multiplier, risk scale)
ENDPOINTS = {
    'pfs': (2.0, 1.0),
    'dm': (0.7, 0.8),
}


@dataclass
class ModalitySynth:
    name: str
    width: int
    weight: float = 1.0
    missing: float = 0.0
    cell_missing: Union[float, Sequence[float]] = 0.0
    noise: float = 0.5
    categorical: int = 0
    ordinal: int = 0
    cardinality: int = 4

    def validate(self):
        if self.width < 1:
            raise ConfigError(f'modality {self.name!r}: width must be >= 1')
        if not 0.0 <= self.missing <= 1.0:
            raise ConfigError(f'modality {self.name!r}: missing fraction {self.missing} outside [0, 1]')
        rates = np.broadcast_to(np.asarray(self.cell_missing, dtype=np.float64), (self.width,)) \
            if np.ndim(self.cell_missing) == 0 else np.asarray(self.cell_missing, dtype=np.float64)
        if rates.shape != (self.width,) or np.any((rates < 0) | (rates > 1)):
            raise ConfigError(f'modality {self.name!r}: cell_missing must be one rate in [0, 1] '
                              f'or one per column')
        if self.categorical + self.ordinal > self.width:
            raise ConfigError(f'modality {self.name!r}: more categorical/ordinal columns than width')
        if (self.categorical or self.ordinal) and self.cardinality < 2:
            raise ConfigError(f'modality {self.name!r}: cardinality must be >= 2')
        if self.noise < 0:
            raise ConfigError(f'modality {self.name!r}: noise must be >= 0')
        return rates


@dataclass
class SynthSpec:
    n: int = 500
    latent_dim: int = 8
    censoring: float = 0.3
    baseline_hazard: float = 1.0 / 1000.0
    interaction: float = 0.0
    interaction_pair: Optional[List[str]] = None
    linear_hazard: bool = False
    secondary_endpoints: bool = True
    modalities: List[ModalitySynth] = field(default_factory=list)

    def validate(self):
        if self.n < 1:
            raise ConfigError('synthetic cohort needs n >= 1 patients')
        if not 0.0 <= self.censoring < 1.0:
            raise ConfigError(f'censoring rate {self.censoring} outside [0, 1)')
        if self.baseline_hazard <= 0:
            raise ConfigError('baseline_hazard must be > 0')
        if not self.modalities:
            raise ConfigError('synthetic cohort needs at least one modality')
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError(f'duplicate modality names: {names}')
        signal = [m for m in self.modalities if m.weight != 0]
        if not self.linear_hazard and self.latent_dim < max(1, len(signal)):
            raise ConfigError('latent_dim must give every signal-bearing modality its own slice')
        if self.interaction and len(self.pair()) != 2:
            raise ConfigError('an interaction term needs two signal-bearing modalities')
        return {m.name: m.validate() for m in self.modalities}

    def pair(self):
        if self.interaction_pair:
            return list(self.interaction_pair)
        return [m.name for m in self.modalities if m.weight != 0][:2]

    @classmethod
    def from_ini(cls, path):
        """[cohort] keys plus one [modality.<name>] section per modality."""
        try:
            ini = IniConfig(str(path))
        except FileNotFoundError:
            raise ConfigError(f'generator spec not found: {path}')
        except IniParseError as exc:
            raise ConfigError(f'{path}: {exc}')
        spec = cls()
        for section in ini:
            where = f'{path} [{section.name}]'
            if section.name == 'cohort':
                for key, raw in section.items():
                    if key == 'interaction_pair':
                        spec.interaction_pair = [p.strip() for p in raw.split(',') if p.strip()]
                    elif key in cls.__dataclass_fields__ and key != 'modalities':
                        setattr(spec, key, coerce_value(raw, getattr(spec, key), f'{where} {key}'))
                    else:
                        raise ConfigError(f'{where}: unknown key {key!r}')
            elif section.name.startswith('modality.'):
                name = section.name.split('.', 1)[1]
                modality = ModalitySynth(name, DEFAULT_WIDTHS.get(name, 8))
                for key, raw in section.items():
                    if key == 'cell_missing' and ',' in raw:
                        modality.cell_missing = [coerce_value(p, 0.0, f'{where} {key}') for p in raw.split(',')]
                    elif key in ModalitySynth.__dataclass_fields__ and key != 'name':
                        setattr(modality, key, coerce_value(raw, getattr(modality, key), f'{where} {key}'))
                    else:
                        raise ConfigError(f'{where}: unknown key {key!r}')
                spec.modalities.append(modality)
            else:
                raise ConfigError(f'{where}: unknown section')
        return spec

    def to_sections(self):
        cohort = {key: getattr(self, key) for key in ('n', 'latent_dim', 'censoring', 'baseline_hazard',
                                                      'interaction', 'linear_hazard', 'secondary_endpoints')}
        if self.interaction_pair:
            cohort['interaction_pair'] = ', '.join(self.interaction_pair)
        sections = {'cohort': cohort}
        for m in self.modalities:
            cell = m.cell_missing if np.ndim(m.cell_missing) == 0 else \
                ', '.join(repr(float(r)) for r in m.cell_missing)
            sections[f'modality.{m.name}'] = {
                'width': m.width, 'weight': m.weight, 'missing': m.missing, 'cell_missing': cell,
                'noise': m.noise, 'categorical': m.categorical, 'ordinal': m.ordinal,
                'cardinality': m.cardinality,
            }
        return sections


def default_spec(n=500, widths=None):
    """Three modalities with the missingness structure of a head-and-neck cohort.

    CT is absent for a few percent of patients and WSI for about two thirds;
    tabular cells are missing at column-specific rates.
    """
    widths = {**DEFAULT_WIDTHS, **(widths or {})}
    tab = widths['tabular']
    cell_rates = np.round(np.linspace(0.0, 0.3, tab), 3).tolist()
    return SynthSpec(n=n, latent_dim=9, censoring=0.45, modalities=[
        ModalitySynth('tabular', tab, weight=0.8, cell_missing=cell_rates,
                      categorical=min(3, tab // 4), ordinal=min(2, tab // 6)),
        ModalitySynth('ct', widths['ct'], weight=0.6, missing=0.028, noise=1.0),
        ModalitySynth('wsi', widths['wsi'], weight=0.6, missing=0.665, noise=1.0),
    ])


def complementary_spec(n=500, interaction=0.0, noise_width=0):
    """Two modalities each carrying half of the signal; the second is absent for 40%."""
    modalities = [
        ModalitySynth('tabular', 12, weight=1.0, noise=0.3),
        ModalitySynth('wsi', 16, weight=1.0, missing=0.4, noise=0.3),
    ]
    if noise_width:
        modalities.append(ModalitySynth('noise', noise_width, weight=0.0, missing=0.2))
    return SynthSpec(n=n, latent_dim=4, censoring=0.3, interaction=interaction,
                     modalities=modalities)


def _censor(event_times, target, rng):
    """Exponential censoring whose realized count is exactly round(target * n)."""
    n = len(event_times)
    draws = rng.standard_exponential(n)
    n_censored = int(round(target * n))
    if n_censored == 0:
        return event_times.copy(), np.ones(n, dtype=bool)
    ratios = np.sort(draws / event_times)
    # censored iff draws / rate < event time, i.e. draws / event_time < rate
    if n_censored >= n:
        rate = 2.0 * ratios[-1]
    else:
        rate = 0.5 * (ratios[n_censored - 1] + ratios[n_censored])
    censor_times = draws / rate
    events = event_times <= censor_times
    return np.minimum(event_times, censor_times), events


def _to_levels(column, cardinality):
    edges = np.quantile(column, np.linspace(0, 1, cardinality + 1)[1:-1])
    return np.searchsorted(edges, column, side='right').astype(np.float64)


def _specs(m):
    specs = []
    for j in range(m.width):
        name = f'f_{j}'
        if j >= m.width - m.categorical:
            specs.append(FeatureSpec(name, FeatureKind.CATEGORICAL, m.cardinality))
        elif j >= m.width - m.categorical - m.ordinal:
            specs.append(FeatureSpec(name, FeatureKind.ORDINAL))
        else:
            specs.append(FeatureSpec(name))
    return specs


def synth_cohort(spec, seed=0):
    """Draw a cohort; identical (spec, seed) pairs give identical cohorts."""
    cell_rates = spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.n

    features, scores = {}, {}
    true_weights = None
    if spec.linear_hazard:
        first = spec.modalities[0]
        x = rng.standard_normal((n, first.width))
        true_weights = rng.standard_normal(first.width) * first.weight / np.sqrt(first.width)
        features[first.name] = x
        risk = x @ true_weights
        for m in spec.modalities[1:]:
            features[m.name] = rng.standard_normal((n, m.width))
    else:
        z = rng.standard_normal((n, spec.latent_dim))
        signal = [m for m in spec.modalities if m.weight != 0]
        slices = dict(zip([m.name for m in signal], np.array_split(np.arange(spec.latent_dim), len(signal)))) \
            if signal else {}
        risk = np.zeros(n)
        for m in spec.modalities:
            latent = z[:, slices[m.name]] if m.name in slices else rng.standard_normal((n, 2))
            loading = rng.standard_normal((latent.shape[1], m.width)) / np.sqrt(latent.shape[1])
            features[m.name] = latent @ loading + m.noise * rng.standard_normal((n, m.width))
            direction = rng.standard_normal(latent.shape[1])
            scores[m.name] = latent @ (direction / np.linalg.norm(direction))
            if m.weight != 0:
                risk = risk + m.weight * scores[m.name]
        if spec.interaction:
            a, b = spec.pair()
            risk = risk + spec.interaction * scores[a] * scores[b]

    event_times = rng.standard_exponential(n) / (spec.baseline_hazard * np.exp(risk))
    times, events = _censor(event_times, spec.censoring, rng)

    endpoints = {}
    if spec.secondary_endpoints:
        for name, (multiplier, scale) in ENDPOINTS.items():
            t = rng.standard_exponential(n) / (multiplier * spec.baseline_hazard * np.exp(scale * risk))
            endpoints[name] = _censor(t, spec.censoring, rng)

    blocks = {}
    for m in spec.modalities:
        values = features[m.name]
        specs = _specs(m)
        for j, fs in enumerate(specs):
            if fs.kind != FeatureKind.NUMERICAL:
                values[:, j] = _to_levels(values[:, j], m.cardinality)
        present = np.ones(n, dtype=bool)
        n_absent = int(np.ceil(m.missing * n - 1e-9))
        if n_absent:
            present[rng.choice(n, size=n_absent, replace=False)] = False
        observed = rng.random((n, m.width)) >= cell_rates[m.name][None, :]
        observed &= present[:, None]
        blocks[m.name] = ModalityBlock(m.name, specs, values, observed, present)

    digits = max(4, len(str(n)))
    ids = [f'P{i:0{digits}d}' for i in range(n)]
    cohort = Cohort(ids, times, events, blocks, true_risk=risk, true_weights=true_weights,
                    endpoints=endpoints)
    logger.info('synthesized %d patients, %d events, modalities %s', n, cohort.n_events, cohort.modalities)
    return cohort
