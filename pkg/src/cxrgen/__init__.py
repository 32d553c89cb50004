"""Desk-scale chest X-ray report generation: autodiff core, toy E/P/L model,
three-stage curriculum, synthetic corpus and evaluation battery."""

__version__ = "0.1.0"
