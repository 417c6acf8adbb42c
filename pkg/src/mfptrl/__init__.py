"""Tabular RL toolkit with mean-first-passage-time prioritised learners."""

__version__ = "0.1.0"
