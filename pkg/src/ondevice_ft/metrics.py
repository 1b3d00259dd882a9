"""Regression metrics for 4DOF pose predictions."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .geometry import _difference

__all__ = ["Metrics", "evaluate_predictions", "pose_errors"]

COMPONENTS = ("x", "y", "z", "phi")


def pose_errors(pred, truth) -> np.ndarray:
    """Signed per-component errors; the yaw error is wrapped to (-pi, pi]."""
    return _difference(np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64))


@dataclass
class Metrics:
    """``mae`` averages |error| over samples and the four components;
    ``mae_sum`` is the per-sample pose distance (the sum over components)."""

    mae: float
    mae_sum: float
    mae_per_output: dict
    r2_per_output: dict  # percent
    r2_mean: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_predictions(pred, truth) -> Metrics:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise ValueError(f"expected matching (n, 4) arrays, got {pred.shape} and {truth.shape}")
    if len(truth) == 0:
        raise ValueError("empty test set")
    abs_err = np.abs(pose_errors(pred, truth))
    per = abs_err.mean(axis=0)
    centre = truth.mean(axis=0)
    sse = (pose_errors(pred, truth) ** 2).sum(axis=0)
    sst = (pose_errors(np.broadcast_to(centre, truth.shape), truth) ** 2).sum(axis=0)
    r2 = np.where(sst > 0, 100.0 * (1.0 - sse / np.where(sst > 0, sst, 1.0)), 0.0)
    return Metrics(
        mae=float(per.mean()),
        mae_sum=float(abs_err.sum(axis=1).mean()),
        mae_per_output={c: float(v) for c, v in zip(COMPONENTS, per)},
        r2_per_output={c: float(v) for c, v in zip(COMPONENTS, r2)},
        r2_mean=float(r2.mean()),
        n=len(truth),
    )
