import logging

import numpy as np

from errors import ContractError
from models import ModalityBlock

logger = logging.getLogger(__name__)

TOLERANCE = 1e-9


def apply_missingness(cohort, modality, target, seed=0):
    """Mask whole patients of one modality until its missing fraction reaches `target`.

    Masking is monotone: patients already missing stay missing and no
    observed bit is ever set. The input cohort is left untouched.
    """
    if modality not in cohort.blocks:
        raise ContractError(f'cohort has no modality {modality!r}')
    if not 0.0 <= target <= 1.0:
        raise ContractError(f'target fraction {target} outside [0, 1]')
    block = cohort.blocks[modality]
    baseline = block.missing_fraction
    if target < baseline - TOLERANCE:
        raise ContractError(f'{modality}: target {target:.4f} is below the natural missing '
                            f'fraction {baseline:.4f}; masking cannot be undone')

    n = block.n_patients
    needed = int(np.ceil(target * n - TOLERANCE)) - int((~block.present).sum())
    if needed <= 0:
        return cohort
    candidates = np.flatnonzero(block.present)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(candidates, size=needed, replace=False)
    present = block.present.copy()
    present[chosen] = False
    observed = block.observed.copy()
    observed[chosen] = False
    logger.debug('%s: masked %d more patients (%.3f -> %.3f)', modality, needed, baseline, 1 - present.mean())
    masked = ModalityBlock(block.name, list(block.specs), block.values.copy(), observed, present)
    return cohort.with_block(masked)


def check_grid(baseline, fractions):
    """Validate a sweep grid: ascending and never below the natural baseline."""
    fractions = [float(f) for f in fractions]
    if not fractions:
        raise ContractError('empty missingness grid')
    if any(b < a for a, b in zip(fractions, fractions[1:])):
        raise ContractError(f'missingness grid must be ascending: {fractions}')
    if fractions[0] < baseline - TOLERANCE:
        raise ContractError(f'fraction {fractions[0]} is below the natural baseline {baseline:.4f}')
    if fractions[-1] > 1.0:
        raise ContractError(f'fraction {fractions[-1]} exceeds 1')
    return fractions
