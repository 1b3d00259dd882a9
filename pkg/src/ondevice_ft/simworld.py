"""Synthetic drone/subject world: trajectories, rendering, odometry, datasets.

Frames: the world and drone frames are z-up; the drone camera looks along
the drone's +x axis. The subject frame is oriented so that a relative yaw of
zero means the subject faces the camera.

The renderer is a parametric glyph (body and head ellipses with a face
marker) projected through a pinhole camera over a low-frequency background.
A :class:`RenderStyle` sets the appearance; fine-tuning experiments pretrain
on one style and adapt to another.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import compose_arrays, invert_arrays, wrap_angle
from .losses import SupervisionRegime, regime_from_name

__all__ = [
    "HEIGHT",
    "WIDTH",
    "RATE_HZ",
    "TrajectoryConfig",
    "Trajectory",
    "NoiseModel",
    "RenderStyle",
    "SOURCE_STYLE",
    "TARGET_STYLE",
    "Camera",
    "Dataset",
    "generate_trajectory",
    "render",
    "render_batch",
    "accumulate_odometry",
    "odometry_track",
    "build_dataset",
    "write_dataset",
    "read_dataset",
    "ANCHOR_POSE",
    "MIN_DEPTH",
]

HEIGHT, WIDTH = 96, 160
RATE_HZ = 4.0
ANCHOR_POSE = np.array([1.0, 0.0, 0.0, 0.0])
MIN_DEPTH = 0.1  # m; nearer or behind the camera the subject is not drawn


# -- trajectories ------------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryConfig:
    n_states: int = 512
    rate_hz: float = RATE_HZ
    subject_mode: str = "random_walk"  # still | random_walk | scripted
    drone_v_max: float = 1.6  # m/s
    drone_yaw_rate_max: float = 1.6  # rad/s
    subject_v_max: float = 0.4  # m/s
    distance_range: tuple = (0.9, 2.4)
    bearing_spread: float = 0.35  # rad, subject offset from the optical axis
    height_range: tuple = (-0.35, 0.35)
    facing_spread: float = 0.7  # rad, std of the subject's relative yaw
    orbit_rate: float = 0.3  # rad/s, std of the drone's orbit speed around the subject


@dataclass
class Trajectory:
    times: np.ndarray  # (n,)
    drone: np.ndarray  # (n, 4) world poses
    subject: np.ndarray  # (n, 4) world poses
    rate_hz: float

    @property
    def relative(self) -> np.ndarray:
        """Subject pose in the drone frame for every state."""
        return compose_arrays(invert_arrays(self.drone), self.subject)

    def __len__(self) -> int:
        return len(self.times)

    def segment(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.times[start:stop], self.drone[start:stop], self.subject[start:stop], self.rate_hz)


def _ou(rng, n, dt, tau, sigma, x0=0.0):
    """Ornstein-Uhlenbeck samples with stationary std ``sigma``."""
    a = np.exp(-dt / tau)
    out = np.empty(n)
    x = x0
    for k in range(n):
        x = a * x + sigma * np.sqrt(1 - a * a) * rng.standard_normal()
        out[k] = x
    return out


def generate_trajectory(config: TrajectoryConfig, rng: np.random.Generator) -> Trajectory:
    """Drone loosely orbiting and tracking a subject, at ``config.rate_hz``.

    The drone moves towards a randomly drifting viewpoint around the subject
    with bounded speed and yaw rate, so consecutive states differ by at most
    ``drone_v_max / rate_hz`` meters.
    """
    n, dt = config.n_states, 1.0 / config.rate_hz
    times = np.arange(n) * dt

    # subject
    subject = np.zeros((n, 4))
    if config.subject_mode == "still":
        subject[:] = [0.0, 0.0, 1.2, rng.uniform(-np.pi, np.pi)]
    elif config.subject_mode in ("random_walk", "scripted"):
        if config.subject_mode == "random_walk":
            vx = _ou(rng, n, dt, 3.0, config.subject_v_max / 2)
            vy = _ou(rng, n, dt, 3.0, config.subject_v_max / 2)
        else:
            s = np.linspace(0, 2 * np.pi, n)
            vx = -0.6 * config.subject_v_max * np.sin(s)
            vy = 0.6 * config.subject_v_max * np.cos(s)
        speed = np.hypot(vx, vy)
        cap = np.minimum(1.0, config.subject_v_max / np.maximum(speed, 1e-12))
        subject[:, 0] = np.cumsum(vx * cap) * dt
        subject[:, 1] = np.cumsum(vy * cap) * dt
        subject[:, 2] = 1.2 + _ou(rng, n, dt, 6.0, 0.05)
    else:
        raise ValueError(f"unknown subject mode {config.subject_mode!r}")

    # viewpoint processes (relative to the subject)
    d_lo, d_hi = config.distance_range
    h_lo, h_hi = config.height_range
    distance = (d_lo + d_hi) / 2 + np.clip(_ou(rng, n, dt, 4.0, (d_hi - d_lo) / 4), -(d_hi - d_lo) / 2, (d_hi - d_lo) / 2)
    height = np.clip(_ou(rng, n, dt, 4.0, (h_hi - h_lo) / 4), h_lo, h_hi)
    off_axis = np.clip(_ou(rng, n, dt, 2.0, config.bearing_spread / 2), -config.bearing_spread, config.bearing_spread)
    orbit0 = rng.uniform(-np.pi, np.pi)
    if config.subject_mode == "still":
        orbit = orbit0 + np.clip(_ou(rng, n, dt, 6.0, 0.4), -0.8, 0.8)
    else:
        orbit = orbit0 + np.cumsum(_ou(rng, n, dt, 3.0, config.orbit_rate)) * dt
    facing = np.clip(_ou(rng, n, dt, 3.0, config.facing_spread), -1.3, 1.3)

    drone = np.zeros((n, 4))
    pos = None
    yaw = None
    for k in range(n):
        center = subject[k, :2]
        # desired drone position: on a circle around the subject, looking at it
        look = orbit[k]
        desired = center - distance[k] * np.array([np.cos(look), np.sin(look)])
        desired_yaw = look + off_axis[k]
        desired_z = subject[k, 2] - height[k]
        if pos is None:
            pos, yaw = np.array([*desired, desired_z]), desired_yaw
        else:
            step = np.array([*desired, desired_z]) - pos
            length = np.linalg.norm(step)
            limit = config.drone_v_max * dt
            if length > limit:
                step *= limit / length
            pos = pos + step
            dyaw = wrap_angle(desired_yaw - yaw)
            yaw = yaw + np.clip(dyaw, -config.drone_yaw_rate_max * dt, config.drone_yaw_rate_max * dt)
        drone[k] = [pos[0], pos[1], pos[2], wrap_angle(yaw)]
        if config.subject_mode != "still":
            # relative yaw 0 faces the camera; the subject turns towards the drone, off by `facing`
            subject[k, 3] = wrap_angle(look + facing[k])
    if config.subject_mode == "still":
        subject[:, 3] = wrap_angle(orbit0)
    return Trajectory(times, drone, subject, config.rate_hz)


# -- camera and rendering -------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    width: int = WIDTH
    height: int = HEIGHT
    hfov_deg: float = 87.0

    @property
    def focal(self) -> float:
        return (self.width / 2) / np.tan(np.deg2rad(self.hfov_deg) / 2)

    @property
    def center(self) -> tuple:
        return (self.width - 1) / 2, (self.height - 1) / 2

    def project(self, p_drone) -> tuple:
        """Pixel ``(u, v)`` of a point in the drone frame (x forward, y left, z up)."""
        x, y, z = p_drone
        cu, cv = self.center
        return cu - self.focal * y / x, cv - self.focal * z / x


@dataclass(frozen=True)
class RenderStyle:
    """Appearance parameters; gray levels are in [0, 255]."""

    background_mean: float = 150.0
    background_amplitude: float = 30.0
    background_seed: int = 0
    body_level: float = 60.0
    head_level: float = 90.0
    marker_level: float = 20.0
    shading: float = 25.0  # left/right brightness asymmetry scaled by sin(yaw)
    gain: float = 1.0
    offset: float = 0.0
    noise_sigma: float = 3.0
    body_half_width: float = 0.25
    body_half_height: float = 0.45
    head_radius: float = 0.12


SOURCE_STYLE = RenderStyle()
# a slightly larger subject in a hazier room, seen by a noisier, low-contrast camera
TARGET_STYLE = RenderStyle(
    background_mean=150.0,
    background_amplitude=40.0,
    background_seed=7,
    body_level=70.0,
    head_level=95.0,
    marker_level=30.0,
    shading=25.0,
    gain=0.55,
    offset=70.0,
    noise_sigma=5.0,
    body_half_width=0.275,
    body_half_height=0.5,
    head_radius=0.13,
)


def _background(style: RenderStyle, camera: Camera, yaw: float) -> np.ndarray:
    rng = np.random.default_rng(style.background_seed)
    v, u = np.mgrid[0 : camera.height, 0 : camera.width].astype(np.float64)
    azimuth = yaw + np.arctan2(camera.center[0] - u, camera.focal)
    img = np.full(u.shape, style.background_mean)
    for _ in range(4):
        ku = rng.integers(1, 5)
        kv = rng.uniform(0.02, 0.08)
        ph = rng.uniform(0, 2 * np.pi)
        img += style.background_amplitude / 4 * np.sin(ku * azimuth + kv * v + ph)
    return img


def render(
    relative_pose,
    drone_yaw: float = 0.0,
    style: RenderStyle = SOURCE_STYLE,
    camera: Camera = Camera(),
    noise_seed: int | None = None,
) -> np.ndarray:
    """Grayscale u8 image of the subject at ``relative_pose`` (drone frame).

    A subject behind the camera (x <= ``MIN_DEPTH``) yields the background alone.
    """
    x, y, z, phi = (float(c) for c in relative_pose)
    img = _background(style, camera, drone_yaw)
    if x > MIN_DEPTH:
        v, u = np.mgrid[0 : camera.height, 0 : camera.width].astype(np.float64)
        f = camera.focal
        s, c = np.sin(phi), np.cos(phi)
        # body: ellipse below the head, foreshortened when turned away
        bu, bv = camera.project((x, y, z - style.body_half_height - style.head_radius))
        bw = f * style.body_half_width * (0.55 + 0.45 * abs(c)) / x
        bh = f * style.body_half_height / x
        body = ((u - bu) / bw) ** 2 + ((v - bv) / bh) ** 2 <= 1.0
        side = np.clip((u - bu) / bw, -1, 1)
        img = np.where(body, style.body_level + style.shading * s * side, img)
        # head with a face marker offset by the yaw
        hu, hv = camera.project((x, y, z))
        hr = f * style.head_radius / x
        head = (u - hu) ** 2 + (v - hv) ** 2 <= hr**2
        img = np.where(head, style.head_level, img)
        mu = hu - 0.6 * hr * s
        mr = 0.35 * hr
        marker = ((u - mu) ** 2 + (v - hv) ** 2 <= mr**2) & head & (c > 0)
        img = np.where(marker, style.marker_level, img)
    img = style.gain * img + style.offset
    if noise_seed is not None and style.noise_sigma > 0:
        img = img + np.random.default_rng(noise_seed).normal(0, style.noise_sigma, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_batch(relative: np.ndarray, drone_yaw: np.ndarray, style: RenderStyle, seed: int) -> np.ndarray:
    """Render many states; per-state noise comes from ``(seed, index)``."""
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(len(relative))]
    return np.stack([render(r, yw, style, noise_seed=s) for r, yw, s in zip(relative, drone_yaw, seeds)])


# -- odometry -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    odom_sigma_xy: float = 0.05  # m / sqrt(s)
    odom_sigma_z: float = 0.01
    odom_sigma_phi: float = 0.02  # rad / sqrt(s)

    def __post_init__(self):
        if min(self.odom_sigma_xy, self.odom_sigma_z, self.odom_sigma_phi) < 0:
            raise ValueError("noise sigmas must be non-negative")

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([self.odom_sigma_xy, self.odom_sigma_xy, self.odom_sigma_z, self.odom_sigma_phi])


def accumulate_odometry(true_motion, noise: NoiseModel, dt: float, rng: np.random.Generator) -> np.ndarray:
    """One noisy odometry step: the true motion composed with a Gaussian perturbation."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    true_motion = np.asarray(true_motion, dtype=np.float64)
    perturb = rng.standard_normal(true_motion.shape) * noise.sigmas * np.sqrt(dt)
    return compose_arrays(true_motion, perturb)


def odometry_track(drone: np.ndarray, noise: NoiseModel | None, dt: float, rng=None) -> np.ndarray:
    """Drone poses in the trajectory-start frame, integrated from (noisy) steps."""
    truth = compose_arrays(invert_arrays(drone[:1]), drone)
    if noise is None:
        return truth
    steps = compose_arrays(invert_arrays(truth[:-1]), truth[1:])
    out = np.empty_like(truth)
    out[0] = 0.0
    for k, step in enumerate(steps, start=1):
        out[k] = compose_arrays(out[k - 1], accumulate_odometry(step, noise, dt, rng))
    return out


# -- datasets --------------------------------------------------------------------------------------


@dataclass
class Dataset:
    """Samples at a fixed rate. Invalid optional fields hold zeros."""

    timestamps: np.ndarray
    images: np.ndarray  # (n, H, W) uint8
    label: np.ndarray  # (n, 4)
    label_valid: np.ndarray  # (n,) bool
    odom: np.ndarray  # (n, 4) drone pose in the trajectory-start frame
    odom_valid: np.ndarray
    subject: np.ndarray  # (n, 4) subject world pose
    subject_valid: np.ndarray
    true_relative: np.ndarray  # (n, 4)
    rate_hz: float = RATE_HZ
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def task_indices(self) -> np.ndarray:
        return np.flatnonzero(self.label_valid)

    def pairs(self, dt_steps: int):
        """State-consistency pairs ``(i, i + dt_steps)`` inside the segment.

        Returns ``(i, j, drone_odom, subject_motion)``; the subject motion is
        the identity where subject poses are unavailable.
        """
        n = len(self)
        i = np.arange(max(n - dt_steps, 0))
        j = i + dt_steps
        ok = self.odom_valid[i] & self.odom_valid[j]
        i, j = i[ok], j[ok]
        drone_odom = compose_arrays(invert_arrays(self.odom[i]), self.odom[j])
        subject_motion = np.zeros((len(i), 4))
        known = self.subject_valid[i] & self.subject_valid[j]
        subject_motion[known] = compose_arrays(invert_arrays(self.subject[i[known]]), self.subject[j[known]])
        return i, j, drone_odom, subject_motion

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        fields = {k: getattr(self, k)[idx] for k in _ARRAY_FIELDS}
        return Dataset(**fields, rate_hz=self.rate_hz, meta=dict(self.meta))


_ARRAY_FIELDS = (
    "timestamps", "images", "label", "label_valid", "odom", "odom_valid",
    "subject", "subject_valid", "true_relative",
)


def build_dataset(
    trajectory: Trajectory,
    regime: SupervisionRegime | str,
    noise: NoiseModel = NoiseModel(),
    style: RenderStyle = TARGET_STYLE,
    seed: int = 0,
    images: np.ndarray | None = None,
) -> Dataset:
    """Render a trajectory and attach the supervision a regime provides.

    ``images`` may pass pre-rendered frames of ``trajectory`` (same style and
    seed) to avoid rendering again. For anchor regimes, ``n_anchors`` random
    samples are re-rendered with the subject at :data:`ANCHOR_POSE`.
    """
    if isinstance(regime, str):
        regime = regime_from_name(regime)
    rng = np.random.default_rng([seed, 1])
    n = len(trajectory)
    relative = trajectory.relative
    if images is None:
        images = render_batch(relative, trajectory.drone[:, 3], style, seed)
    images = images.copy()
    subject = trajectory.subject.copy()
    true_relative = relative.copy()
    label = np.zeros((n, 4))
    label_valid = np.zeros(n, bool)

    if regime.task == "all":
        label[:] = relative
        label_valid[:] = True
    elif regime.task == "anchors":
        anchors = np.sort(rng.choice(n, size=min(regime.n_anchors, n), replace=False))
        if regime.anchor_mode == "staged":
            anchor_seeds = np.random.SeedSequence([seed, 2]).spawn(len(anchors))
            for a, ss in zip(anchors, anchor_seeds):
                images[a] = render(ANCHOR_POSE, trajectory.drone[a, 3], style, noise_seed=int(ss.generate_state(1)[0]))
                subject[a] = compose_arrays(trajectory.drone[a], ANCHOR_POSE)
                true_relative[a] = ANCHOR_POSE
        label[anchors] = true_relative[anchors]
        label_valid[anchors] = True
    anchor_frames = label_valid & (regime.task == "anchors") & (regime.anchor_mode == "staged")
    label_valid &= true_relative[:, 0] > MIN_DEPTH  # blank frames carry no pose information

    dt = 1.0 / trajectory.rate_hz
    if regime.drone_odom_mode == "noisy_odometry":
        odom = odometry_track(trajectory.drone, noise, dt, np.random.default_rng([seed, 3]))
    else:
        odom = odometry_track(trajectory.drone, None, dt)
    subject_valid = np.full(n, regime.subject_mode != "unknown_still")
    subject = np.where(subject_valid[:, None], subject, 0.0)

    return Dataset(
        timestamps=trajectory.times.copy(),
        images=images,
        label=label,
        label_valid=label_valid,
        odom=odom,
        # anchor frames are staged shots, not part of the continuous flight
        odom_valid=~anchor_frames,
        subject=subject,
        subject_valid=subject_valid,
        true_relative=true_relative,
        rate_hz=trajectory.rate_hz,
        meta={"regime": regime.name},
    )


# -- FTDS file format ------------------------------------------------------------------------------

_MAGIC = b"FTDS"
_VERSION = 1


def _record_dtype(h: int, w: int) -> np.dtype:
    return np.dtype(
        [
            ("timestamp", "<f8"),
            ("image", "u1", (h * w,)),
            ("label_valid", "u1"),
            ("label", "<f4", (4,)),
            ("odom_valid", "u1"),
            ("odom", "<f4", (4,)),
            ("subject_valid", "u1"),
            ("subject", "<f4", (4,)),
            ("true_relative", "<f4", (4,)),
        ]
    )


def write_dataset(path, ds: Dataset) -> None:
    """Write the little-endian FTDS format (header + fixed-size records)."""
    n = len(ds)
    h, w = ds.images.shape[1:]
    rec = np.zeros(n, dtype=_record_dtype(h, w))
    rec["timestamp"] = ds.timestamps
    rec["image"] = ds.images.reshape(n, -1)
    for name in ("label", "odom", "subject"):
        rec[f"{name}_valid"] = getattr(ds, f"{name}_valid")
        rec[name] = getattr(ds, name)
    rec["true_relative"] = ds.true_relative
    header = _MAGIC + struct.pack("<HIHHf", _VERSION, n, h, w, ds.rate_hz)
    Path(path).write_bytes(header + rec.tobytes())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an FTDS dataset")
    version, n, h, w, rate = struct.unpack_from("<HIHHf", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    rec = np.frombuffer(raw, dtype=_record_dtype(h, w), count=n, offset=4 + struct.calcsize("<HIHHf"))
    return Dataset(
        timestamps=rec["timestamp"].copy(),
        images=rec["image"].reshape(n, h, w).copy(),
        label=rec["label"].astype(np.float64),
        label_valid=rec["label_valid"].astype(bool),
        odom=rec["odom"].astype(np.float64),
        odom_valid=rec["odom_valid"].astype(bool),
        subject=rec["subject"].astype(np.float64),
        subject_valid=rec["subject_valid"].astype(bool),
        true_relative=rec["true_relative"].astype(np.float64),
        rate_hz=float(rate),
    )
