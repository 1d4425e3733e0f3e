"""Survival evaluation metrics and risk stratification."""
