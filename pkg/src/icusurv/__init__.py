"""Survival analysis for ICU cohorts: Cox models, neural risk scores over
fused clinical modalities, SAPS-II severity scoring, and a seeded bootstrap
evaluation harness with plotting."""

__version__ = "0.1.0"
