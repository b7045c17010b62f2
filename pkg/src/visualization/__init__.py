"""Visualization modules for training and evaluation results."""
