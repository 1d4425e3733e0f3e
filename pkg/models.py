# models.py
from dataclasses import dataclass, field
from typing import Dict, List, Optional
import enum

import numpy as np

from errors import ContractError


class FeatureKind(enum.Enum):
    NUMERICAL = "numerical"
    CATEGORICAL = "categorical"
    ORDINAL = "ordinal"


class FusionMode(enum.Enum):
    UNIMODAL = "unimodal"
    EARLY = "early"
    INTERMEDIATE = "intermediate"
    LATE = "late"
    LINEAR_CPH = "linear-cph"


class HeadKind(enum.Enum):
    ODST = "odst"
    LINEAR = "linear"
    MLP = "mlp"


# Default embedding widths of the imaging foundation models
DEFAULT_WIDTHS = {'tabular': 24, 'ct': 2048, 'wsi': 768}


# ============== FEATURE SPEC ==============
@dataclass(frozen=True)
class FeatureSpec:
    """Kind of one block column; categorical columns carry a cardinality"""
    name: str
    kind: FeatureKind = FeatureKind.NUMERICAL
    cardinality: int = 0

    def __post_init__(self):
        if self.kind == FeatureKind.CATEGORICAL and self.cardinality < 1:
            raise ContractError(f'categorical feature {self.name!r} needs a cardinality >= 1')

    @property
    def is_categorical(self):
        return self.kind == FeatureKind.CATEGORICAL

    def describe(self):
        if self.is_categorical:
            return f'categorical:{self.cardinality}'
        return self.kind.value

    def to_dict(self):
        return {'name': self.name, 'kind': self.kind.value, 'cardinality': self.cardinality}


# ============== MODALITY BLOCK ==============
@dataclass
class ModalityBlock:
    """One data stream (tabular, ct, wsi, ...) for every patient of a cohort.

    values: patients x features, categorical columns hold the level index.
    observed: patients x features, False where the cell is missing.
    present: per patient, False when the whole stream is absent.
    """
    name: str
    specs: List[FeatureSpec]
    values: np.ndarray
    observed: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        self.present = np.asarray(self.present, dtype=bool)
        n, d = self.values.shape if self.values.ndim == 2 else (None, None)
        if n is None or self.observed.shape != (n, d) or self.present.shape != (n,):
            raise ContractError(f'block {self.name!r}: inconsistent extents '
                                f'{self.values.shape}, {self.observed.shape}, {self.present.shape}')
        if len(self.specs) != d:
            raise ContractError(f'block {self.name!r}: {len(self.specs)} specs for {d} columns')
        if np.any(self.observed[~self.present]):
            raise ContractError(f'block {self.name!r}: absent patients must be fully masked')
        for j, spec in enumerate(self.specs):
            if not spec.is_categorical:
                continue
            levels = self.values[self.observed[:, j], j]
            if np.any((levels < 0) | (levels >= spec.cardinality) | (levels != np.round(levels))):
                raise ContractError(f'block {self.name!r}: level out of range in {spec.name!r}')

    @property
    def n_patients(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def missing_fraction(self):
        """Fraction of patients for whom the modality is absent"""
        return float(np.mean(~self.present))

    def subset(self, rows):
        rows = np.asarray(rows)
        return ModalityBlock(self.name, list(self.specs), self.values[rows].copy(),
                             self.observed[rows].copy(), self.present[rows].copy())

    def to_dict(self):
        return {
            'name': self.name,
            'width': self.width,
            'n_patients': self.n_patients,
            'missing_fraction': self.missing_fraction,
            'observed_cells': int(self.observed.sum()),
            'specs': [spec.describe() for spec in self.specs],
        }


@dataclass
class ModalityInput:
    """Rows of one block as fed to an encoder"""
    values: np.ndarray
    observed: np.ndarray


# ============== COHORT ==============
@dataclass
class Cohort:
    """Patients with survival outcome and one block per modality"""
    patient_ids: List[str]
    times: np.ndarray
    events: np.ndarray
    blocks: Dict[str, ModalityBlock]
    true_risk: Optional[np.ndarray] = None
    true_weights: Optional[np.ndarray] = None
    endpoints: Dict[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        self.patient_ids = [str(pid) for pid in self.patient_ids]
        self.times = np.asarray(self.times, dtype=np.float64)
        self.events = np.asarray(self.events, dtype=bool)
        n = len(self.patient_ids)
        if n < 1:
            raise ContractError('a cohort needs at least one patient')
        if self.times.shape != (n,) or self.events.shape != (n,):
            raise ContractError('times/events length differs from patient count')
        if np.any(self.times < 0) or not np.all(np.isfinite(self.times)):
            raise ContractError('survival times must be finite and non-negative')
        for name, block in self.blocks.items():
            if block.n_patients != n:
                raise ContractError(f'block {name!r} has {block.n_patients} rows for {n} patients')

    @property
    def n_patients(self):
        return len(self.patient_ids)

    @property
    def n_events(self):
        return int(self.events.sum())

    @property
    def modalities(self):
        return sorted(self.blocks)

    def inputs(self, rows, modalities=None):
        rows = np.asarray(rows)
        names = modalities or self.modalities
        return {name: ModalityInput(self.blocks[name].values[rows],
                                    self.blocks[name].observed[rows]) for name in names}

    def subset(self, rows):
        rows = np.asarray(rows)
        endpoints = {name: (t[rows], e[rows]) for name, (t, e) in self.endpoints.items()}
        return Cohort(
            patient_ids=[self.patient_ids[i] for i in rows],
            times=self.times[rows].copy(),
            events=self.events[rows].copy(),
            blocks={name: block.subset(rows) for name, block in self.blocks.items()},
            true_risk=None if self.true_risk is None else self.true_risk[rows].copy(),
            true_weights=self.true_weights,
            endpoints=endpoints,
        )

    def with_block(self, block):
        blocks = dict(self.blocks)
        blocks[block.name] = block
        return Cohort(self.patient_ids, self.times, self.events, blocks,
                      self.true_risk, self.true_weights, dict(self.endpoints))

    def to_dict(self):
        return {
            'n_patients': self.n_patients,
            'n_events': self.n_events,
            'censoring_rate': 1.0 - self.n_events / self.n_patients,
            'blocks': {name: block.to_dict() for name, block in self.blocks.items()},
        }


# ============== FOLD PLAN ==============
@dataclass(frozen=True)
class FoldRoles:
    """Row indices playing each role in one cross-validation rotation"""
    fold: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


@dataclass
class FoldPlan:
    """Assignment of every patient to one of k folds"""
    k: int
    assignments: np.ndarray

    def members(self, fold):
        return np.flatnonzero(self.assignments == fold)

    def roles(self, iteration):
        """Rotation `iteration`: test fold = iteration, validation fold = the next one."""
        if not 0 <= iteration < self.k:
            raise ContractError(f'iteration {iteration} outside 0..{self.k - 1}')
        test_fold = iteration
        val_fold = (iteration + 1) % self.k
        train = np.flatnonzero((self.assignments != test_fold) & (self.assignments != val_fold))
        return FoldRoles(iteration, train, self.members(val_fold), self.members(test_fold))

    def to_dict(self):
        return {'k': self.k, 'sizes': [int(np.sum(self.assignments == f)) for f in range(self.k)]}


# ============== SURVIVAL OUTPUTS ==============
@dataclass
class BatchOutcome:
    """Scores with the outcome they are judged against"""
    scores: np.ndarray
    times: np.ndarray
    events: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.events = np.asarray(self.events, dtype=bool).reshape(-1)
        if not (len(self.scores) == len(self.times) == len(self.events)):
            raise ContractError('scores, times and events must have equal lengths')
        if len(self.scores) == 0:
            raise ContractError('empty batch')


@dataclass
class SurvivalCurve:
    """Right-continuous step function S(t) with its life table"""
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t):
        """S(t): product over step times <= t"""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side='right') - 1
        values = np.where(idx >= 0, self.survival[np.clip(idx, 0, None)], 1.0)
        return values if values.ndim else float(values)

    def left_limit(self, t):
        """S(t-): product over step times strictly before t"""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side='left') - 1
        values = np.where(idx >= 0, self.survival[np.clip(idx, 0, None)], 1.0)
        return values if values.ndim else float(values)

    def rows(self):
        return [{'time': float(t), 'survival': float(s), 'at_risk': int(r), 'events': int(d)}
                for t, s, r, d in zip(self.times, self.survival, self.at_risk, self.events)]


@dataclass
class MetricsReport:
    """Discrimination on one evaluation set"""
    fold: Optional[int]
    n: int
    n_events: int
    harrell_c: float
    uno_c: float
    td_auc: Dict[float, float] = field(default_factory=dict)

    @property
    def td_auc_mean(self):
        if not self.td_auc:
            return float('nan')
        return float(np.mean(list(self.td_auc.values())))

    def to_dict(self):
        data = {
            'fold': '' if self.fold is None else self.fold,
            'n': self.n,
            'n_events': self.n_events,
            'harrell_c': self.harrell_c,
            'uno_c': self.uno_c,
            'td_auc_mean': self.td_auc_mean,
        }
        for i, (horizon, value) in enumerate(sorted(self.td_auc.items())):
            data[f'horizon_{i + 1}'] = horizon
            data[f'td_auc_{i + 1}'] = value
        return data
