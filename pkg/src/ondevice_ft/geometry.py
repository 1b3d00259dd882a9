"""Yaw-only rigid transforms for relative poses.

A pose is stored as ``(x, y, z, phi)``: a translation in meters and a
rotation ``phi`` (radians) about the vertical axis. Composition follows the
homogeneous-matrix convention, so ``compose(a_to_b, b_to_c)`` is the pose of
frame C expressed in frame A.

The array functions operate on ``(..., 4)`` arrays and broadcast; the
:class:`Pose4` value type wraps them for single poses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Pose4",
    "IDENTITY",
    "wrap_angle",
    "compose",
    "invert",
    "delta",
    "delta_gradient",
    "compose_arrays",
    "invert_arrays",
    "delta_arrays",
    "delta_gradient_arrays",
    "to_matrix",
    "from_matrix",
]


def wrap_angle(phi):
    """Map angles to the half-open interval (-pi, pi]."""
    phi = np.asarray(phi, dtype=np.float64)
    out = np.pi - np.mod(np.pi - phi, 2.0 * np.pi)
    return out if out.ndim else float(out)


def compose_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c, s = np.cos(a[..., 3]), np.sin(a[..., 3])
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.float64)
    out[..., 0] = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    out[..., 1] = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    out[..., 2] = a[..., 2] + b[..., 2]
    out[..., 3] = wrap_angle(a[..., 3] + b[..., 3])
    return out


def invert_arrays(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    c, s = np.cos(p[..., 3]), np.sin(p[..., 3])
    out = np.empty_like(p)
    out[..., 0] = -c * p[..., 0] - s * p[..., 1]
    out[..., 1] = s * p[..., 0] - c * p[..., 1]
    out[..., 2] = -p[..., 2]
    out[..., 3] = wrap_angle(-p[..., 3])
    return out


def _difference(t1, t2) -> np.ndarray:
    d = np.asarray(t1, dtype=np.float64) - np.asarray(t2, dtype=np.float64)
    d[..., 3] = wrap_angle(d[..., 3])
    return d


def delta_arrays(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """L1 distance between pose vectors, angle difference on the circle."""
    return np.abs(_difference(t1, t2)).sum(axis=-1)


def delta_gradient_arrays(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """Subgradient of :func:`delta_arrays` w.r.t. ``t1`` (zero at ties)."""
    return np.sign(_difference(t1, t2))


def to_matrix(p) -> np.ndarray:
    """4x4 homogeneous matrix of a pose (rotation about z)."""
    x, y, z, phi = (float(v) for v in np.asarray(p, dtype=np.float64))
    c, s = np.cos(phi), np.sin(phi)
    return np.array(
        [[c, -s, 0.0, x], [s, c, 0.0, y], [0.0, 0.0, 1.0, z], [0.0, 0.0, 0.0, 1.0]]
    )


def from_matrix(m: np.ndarray) -> np.ndarray:
    return np.array(
        [m[0, 3], m[1, 3], m[2, 3], wrap_angle(np.arctan2(m[1, 0], m[0, 0]))]
    )


@dataclass(frozen=True)
class Pose4:
    """4DOF pose; ``phi`` is normalized to (-pi, pi] on construction."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        values = (self.x, self.y, self.z, self.phi)
        if not np.all(np.isfinite(values)):
            raise ValueError(f"non-finite pose component in {values}")
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    @classmethod
    def from_array(cls, v) -> "Pose4":
        x, y, z, phi = (float(c) for c in np.asarray(v).reshape(4))
        return cls(x, y, z, phi)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.phi])

    def __matmul__(self, other: "Pose4") -> "Pose4":
        return compose(self, other)

    def inverse(self) -> "Pose4":
        return invert(self)


IDENTITY = Pose4()


def compose(a_to_b: Pose4, b_to_c: Pose4) -> Pose4:
    return Pose4.from_array(compose_arrays(a_to_b.as_array(), b_to_c.as_array()))


def invert(p: Pose4) -> Pose4:
    return Pose4.from_array(invert_arrays(p.as_array()))


def delta(t1: Pose4, t2: Pose4) -> float:
    return float(delta_arrays(t1.as_array(), t2.as_array()))


def delta_gradient(t1: Pose4, t2: Pose4) -> np.ndarray:
    return delta_gradient_arrays(t1.as_array(), t2.as_array())
