"""Sparse-update fine-tuning of a pose-regression CNN with self-supervised
state-consistency, int8 round-tripping and an analytic cost model."""

__version__ = "0.1.0"
