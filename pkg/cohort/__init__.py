"""Cohort data: ingestion, synthetic generation, folds, preprocessing and masking."""
