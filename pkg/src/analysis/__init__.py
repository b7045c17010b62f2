"""Evaluation metrics, baselines, statistical tests and the experiment pipeline."""
