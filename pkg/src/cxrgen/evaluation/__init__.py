"""Evaluation battery for generated reports."""
