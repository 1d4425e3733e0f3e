"""Fold-local standardization of feature blocks."""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from errors import ContractError
from models import FeatureKind, ModalityBlock

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockTransform:
    """z-score statistics for selected columns, with the patients they came from."""
    block: str
    columns: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    provenance: Tuple[str, ...] = ()

    def apply(self, block):
        if block.name != self.block:
            raise ContractError(f'transform fitted on {self.block!r} applied to {block.name!r}')
        values = block.values.copy()
        cols = self.columns
        if len(cols):
            scaled = (values[:, cols] - self.mean[None, :]) / self.scale[None, :]
            values[:, cols] = np.where(block.observed[:, cols], scaled, values[:, cols])
        return ModalityBlock(block.name, list(block.specs), values, block.observed.copy(),
                             block.present.copy())

    def to_arrays(self):
        return {
            f'transform.{self.block}.columns': self.columns.astype(np.float64),
            f'transform.{self.block}.mean': self.mean,
            f'transform.{self.block}.scale': self.scale,
        }

    @classmethod
    def from_arrays(cls, block, arrays):
        prefix = f'transform.{block}.'
        return cls(block, arrays[prefix + 'columns'].astype(np.intp), arrays[prefix + 'mean'],
                   arrays[prefix + 'scale'])


def _standardized_columns(block, standardize_ordinal):
    kinds = [FeatureKind.NUMERICAL] + ([FeatureKind.ORDINAL] if standardize_ordinal else [])
    return np.array([j for j, spec in enumerate(block.specs) if spec.kind in kinds], dtype=np.intp)


def preprocess_tabular(block, train_rows, standardize_ordinal=True, patient_ids=None):
    """Standardize numerical (and optionally ordinal) columns with train-row statistics.

    Only observed cells of the training rows enter the mean and the population
    standard deviation. Categorical columns keep their level indices.
    """
    train_rows = np.asarray(train_rows)
    if train_rows.size == 0:
        raise ContractError('preprocessing needs at least one training row')
    cols = _standardized_columns(block, standardize_ordinal)
    mean = np.zeros(len(cols))
    scale = np.ones(len(cols))
    for c, j in enumerate(cols):
        seen = block.observed[train_rows, j]
        column = block.values[train_rows, j][seen]
        if column.size == 0:
            logger.warning('%s column %s has no observed training values; left unscaled',
                           block.name, block.specs[j].name)
            continue
        mean[c] = column.mean()
        std = column.std()
        if std > 0:
            scale[c] = std
        else:
            logger.warning('%s column %s has zero variance on the training rows; std clamped to 1',
                           block.name, block.specs[j].name)
    provenance = tuple(patient_ids[i] for i in train_rows) if patient_ids is not None else ()
    transform = BlockTransform(block.name, cols, mean, scale, provenance)
    return transform.apply(block), transform


def preprocess_cohort(cohort, train_rows, standardize_ordinal=True, standardize_imaging=True):
    """Fit one transform per block on `train_rows` and apply it to every patient."""
    transforms = {}
    blocks = {}
    for name, block in cohort.blocks.items():
        if name != 'tabular' and not standardize_imaging:
            blocks[name] = block
            continue
        blocks[name], transforms[name] = preprocess_tabular(block, train_rows, standardize_ordinal,
                                                            cohort.patient_ids)
    transformed = cohort
    for block in blocks.values():
        transformed = transformed.with_block(block)
    return transformed, transforms


def apply_transforms(cohort, transforms):
    transformed = cohort
    for name, transform in transforms.items():
        transformed = transformed.with_block(transform.apply(cohort.blocks[name]))
    return transformed


def check_provenance(transforms, patient_ids):
    """Raise if any of `patient_ids` contributed to a fitted transform."""
    held_out = set(patient_ids)
    for name, transform in transforms.items():
        leaked = held_out.intersection(transform.provenance)
        if leaked:
            raise ContractError(f'{len(leaked)} held-out patients were used to fit the {name} transform')
