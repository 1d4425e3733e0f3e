"""Differentiable model components and the optimisation engine."""
