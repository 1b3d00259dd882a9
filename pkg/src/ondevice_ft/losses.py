"""Task and state-consistency losses on 4DOF pose predictions.

Predictions are ``(N, 4)`` arrays of ``(x, y, z, phi)``: the subject's pose in
the drone frame. All losses return their value and the gradient w.r.t. every
prediction row.

The state-consistency term compares, for a pair of timesteps ``i`` and ``j``,
the subject motion implied by the two predictions and the drone odometry,
``inv(pred_i) @ odom_ij @ pred_j``, against the subject's own motion: its pose
at ``j`` in its frame at ``i`` (identity when the subject is assumed still).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import _difference, compose_arrays, delta_arrays, delta_gradient_arrays, invert_arrays

__all__ = [
    "SupervisionRegime",
    "REGIMES",
    "regime_from_name",
    "LossResult",
    "task_loss",
    "sc_loss",
    "combined_loss",
    "NoSupervisionError",
]

# residuals this small come from composing transforms, not from disagreement
TIE_TOLERANCE = 1e-12

DRONE_MODES = ("perfect_absolute", "perfect_odometry", "noisy_odometry")
SUBJECT_MODES = ("perfect_absolute", "perfect_odometry", "unknown_still")


@dataclass(frozen=True)
class SupervisionRegime:
    """Which supervision is available during fine-tuning.

    ``task`` is ``"all"`` (every sample labeled), ``"anchors"`` (``n_anchors``
    random samples with the subject at a known pose) or ``"none"``.
    ``consistency`` enables the state-consistency term at offset ``dt``.
    """

    name: str
    task: str = "all"
    consistency: bool = False
    drone_odom_mode: str = "perfect_absolute"
    subject_mode: str = "perfect_absolute"
    dt: float = 2.0
    lambda_sc: float = 1.0
    n_anchors: int = 32
    anchor_mode: str = "staged"  # staged: re-shot at the anchor pose; labeled: true labels of random frames

    def __post_init__(self):
        if self.task not in ("all", "anchors", "none"):
            raise ValueError(f"unknown task supervision {self.task!r}")
        if self.drone_odom_mode not in DRONE_MODES:
            raise ValueError(f"unknown drone odometry mode {self.drone_odom_mode!r}")
        if self.subject_mode not in SUBJECT_MODES:
            raise ValueError(f"unknown subject mode {self.subject_mode!r}")
        if self.anchor_mode not in ("staged", "labeled"):
            raise ValueError(f"unknown anchor mode {self.anchor_mode!r}")
        if self.lambda_sc < 0:
            raise ValueError("lambda_sc must be non-negative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def dt_steps(self, rate_hz: float) -> int:
        steps = self.dt * rate_hz
        if abs(steps - round(steps)) > 1e-6:
            raise ValueError(f"dt={self.dt}s is not a multiple of the {1 / rate_hz}s sampling period")
        return int(round(steps))

    def with_dt(self, dt: float) -> "SupervisionRegime":
        return SupervisionRegime(**{**self.__dict__, "dt": dt})


REGIMES = {
    "t_a": SupervisionRegime("t_a"),
    "sc_dm_sm": SupervisionRegime(
        "sc_dm_sm", task="none", consistency=True,
        drone_odom_mode="perfect_odometry", subject_mode="perfect_odometry",
    ),
    "sc_do_sm": SupervisionRegime(
        "sc_do_sm", task="none", consistency=True,
        drone_odom_mode="noisy_odometry", subject_mode="perfect_odometry",
    ),
    "sc_do_si": SupervisionRegime(
        "sc_do_si", task="none", consistency=True,
        drone_odom_mode="noisy_odometry", subject_mode="unknown_still",
    ),
    "t_r32_sc": SupervisionRegime(
        "t_r32_sc", task="anchors", consistency=True,
        drone_odom_mode="noisy_odometry", subject_mode="unknown_still",
    ),
}


def regime_from_name(name: str, dt: float | None = None) -> SupervisionRegime:
    try:
        regime = REGIMES[name]
    except KeyError:
        raise ValueError(f"unknown regime {name!r}; choose from {sorted(REGIMES)}") from None
    return regime if dt is None else regime.with_dt(dt)


class NoSupervisionError(ValueError):
    pass


@dataclass
class LossResult:
    value: float
    grad: np.ndarray  # (N, 4), d value / d predictions
    terms: int = 0
    dropped: int = 0


def task_loss(predictions, targets, indices) -> LossResult:
    """Mean pose distance over the labeled samples ``indices``.

    ``targets`` is indexed like ``predictions`` (rows outside ``indices`` are
    ignored).
    """
    pred = np.asarray(predictions, dtype=np.float64)
    grad = np.zeros_like(pred)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        return LossResult(0.0, grad)
    tgt = np.asarray(targets, dtype=np.float64)[idx]
    value = float(delta_arrays(pred[idx], tgt).sum() / idx.size)
    np.add.at(grad, idx, delta_gradient_arrays(pred[idx], tgt) / idx.size)
    return LossResult(value, grad, terms=int(idx.size))


def _consistency_terms(a, b, odom, subject):
    """Per-pair residual and its gradient w.r.t. both predictions."""
    implied = compose_arrays(invert_arrays(a), compose_arrays(odom, b))
    residual = _difference(implied, subject)
    residual[np.abs(residual) <= TIE_TOLERANCE] = 0.0
    g = np.sign(residual)
    phi_a, phi_m = a[:, 3], odom[:, 3]
    gx, gy, gz, gphi = g.T
    # translation of `implied` is R(-phi_a) (t_odom + R(phi_m) t_b - t_a)
    ca, sa = np.cos(phi_a), np.sin(phi_a)
    cr, sr = np.cos(phi_a - phi_m), np.sin(phi_a - phi_m)
    grad_b = np.stack([cr * gx - sr * gy, sr * gx + cr * gy, gz, gphi], axis=1)
    grad_a = np.stack(
        [
            -(ca * gx - sa * gy),
            -(sa * gx + ca * gy),
            -gz,
            gx * implied[:, 1] - gy * implied[:, 0] - gphi,
        ],
        axis=1,
    )
    return residual, grad_a, grad_b


def sc_loss(predictions, pair_i, pair_j, drone_odom, subject_motion) -> LossResult:
    """State-consistency loss over pairs ``(pair_i[k], pair_j[k])``.

    ``drone_odom[k]`` is the drone pose at ``j`` in the drone frame at ``i``;
    ``subject_motion[k]`` is the subject pose at ``j`` in the subject frame at
    ``i``. Pairs whose member index is negative or out of range are skipped
    and counted in ``dropped``.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    n = pred.shape[0]
    grad = np.zeros_like(pred)
    pi = np.asarray(pair_i, dtype=np.intp).reshape(-1)
    pj = np.asarray(pair_j, dtype=np.intp).reshape(-1)
    valid = (pi >= 0) & (pi < n) & (pj >= 0) & (pj < n)
    dropped = int((~valid).sum())
    if not valid.any():
        return LossResult(0.0, grad, 0, dropped)
    pi, pj = pi[valid], pj[valid]
    odom = np.asarray(drone_odom, dtype=np.float64).reshape(-1, 4)[valid]
    subject = np.asarray(subject_motion, dtype=np.float64).reshape(-1, 4)[valid]
    residual, ga, gb = _consistency_terms(pred[pi], pred[pj], odom, subject)
    count = pi.size
    value = float(np.abs(residual).sum() / count)
    np.add.at(grad, pi, ga / count)
    np.add.at(grad, pj, gb / count)
    return LossResult(value, grad, int(count), dropped)


@dataclass
class CombinedLoss:
    task: LossResult
    sc: LossResult
    lambda_sc: float

    @property
    def value(self) -> float:
        return self.task.value + self.lambda_sc * self.sc.value

    @property
    def grad(self) -> np.ndarray:
        return self.task.grad + self.lambda_sc * self.sc.grad


def combined_loss(
    predictions,
    lambda_sc: float = 1.0,
    task_indices=(),
    targets=None,
    pair_i=(),
    pair_j=(),
    drone_odom=None,
    subject_motion=None,
    batch_size: int | None = None,
) -> CombinedLoss:
    """``task + lambda_sc * sc``; raises if neither term has any sample.

    Each term is a mean over its own samples, unless ``batch_size`` is given:
    then both are sums divided by ``batch_size``, so every task sample and
    every pair weighs the same in a mini-batch.
    """
    if len(task_indices) == 0 and len(pair_i) == 0:
        raise NoSupervisionError("no supervision signal: both the task set and the pair set are empty")
    pred = np.asarray(predictions, dtype=np.float64)
    task = task_loss(pred, targets if targets is not None else pred, task_indices)
    if len(pair_i):
        sc = sc_loss(pred, pair_i, pair_j, drone_odom, subject_motion)
    else:
        sc = LossResult(0.0, np.zeros_like(pred))
    if batch_size is not None:
        for term in (task, sc):
            w = term.terms / batch_size
            term.value *= w
            term.grad *= w
    return CombinedLoss(task, sc, float(lambda_sc))
