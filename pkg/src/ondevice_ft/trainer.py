"""Fine-tuning loop: plain SGD over a fixed number of epochs and batches.

Every batch runs forward, the combined loss, backward and one SGD step.
Shuffling and augmentation draw from generators seeded by ``(seed, epoch)``,
so a run is a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from . import model as M
from .geometry import invert_arrays
from .losses import REGIMES, SupervisionRegime, combined_loss, NoSupervisionError
from .model import Strategy

__all__ = [
    "AugmentConfig",
    "TrainConfig",
    "PairBatch",
    "FineTuneResult",
    "sgd_step",
    "fine_tune",
    "augment_photometric",
    "reflect_poses",
    "hflip",
    "augment_hflip",
    "augment_time_reversal",
    "make_pairs",
]


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation toggles and magnitude ranges (uniform draws)."""

    photometric: bool = True
    hflip: bool = True
    time_reversal: bool = True
    probability: float = 0.5
    exposure: tuple = (0.7, 1.3)
    contrast: tuple = (0.8, 1.2)
    noise_sigma: tuple = (0.0, 8.0)
    blur_sizes: tuple = (1, 3)
    vignette: tuple = (0.0, 0.3)

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(photometric=False, hflip=False, time_reversal=False)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 5
    batch_size: int = 32
    batches_per_epoch: int = 16
    strategy: Strategy = Strategy.ALL
    regime: SupervisionRegime = REGIMES["t_a"]
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs, batch_size and batches_per_epoch must be positive")

    @property
    def samples_per_epoch(self) -> int:
        return self.batch_size * self.batches_per_epoch


def sgd_step(params: M.ParamStore, lr: float, grads: dict | None = None, mask=None) -> None:
    """``W -= lr * dW`` on the masked tensors, then clear the gradient buffers."""
    grads = params.grads if grads is None else grads
    mask = params.mask if mask is None else mask
    lr32 = np.float32(lr)
    for name in sorted(mask):
        params.tensors[name] -= lr32 * grads[name]
    for g in params.grads.values():
        g.fill(0)
    params.version += 1


# -- augmentation ----------------------------------------------------------------------------------


def _vignette_profile(h: int, w: int) -> np.ndarray:
    yy = (np.arange(h) - (h - 1) / 2) / ((h - 1) / 2 or 1)
    xx = (np.arange(w) - (w - 1) / 2) / ((w - 1) / 2 or 1)
    return ((yy[:, None] ** 2 + xx[None, :] ** 2) / 2).astype(np.float32)


def augment_photometric(images, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Exposure, contrast, Gaussian noise, box blur and vignetting.

    Each transform is applied independently with ``config.probability``.
    Accepts one ``(H, W)`` u8 image or a ``(n, H, W)`` batch; returns u8.
    """
    images = np.asarray(images)
    single = images.ndim == 2
    x = images[None] if single else images
    n, h, w = x.shape
    p = config.probability
    x = x.astype(np.float32)
    on = rng.random((n, 5)) < p
    gain = np.where(on[:, 0], rng.uniform(*config.exposure, n), 1.0).astype(np.float32)
    contrast = np.where(on[:, 1], rng.uniform(*config.contrast, n), 1.0).astype(np.float32)
    sigma = np.where(on[:, 2], rng.uniform(*config.noise_sigma, n), 0.0).astype(np.float32)
    blur = np.where(on[:, 3], rng.choice(np.asarray(config.blur_sizes), n), 1)
    vignette = np.where(on[:, 4], rng.uniform(*config.vignette, n), 0.0).astype(np.float32)

    x *= gain[:, None, None]
    mean = x.mean(axis=(1, 2), keepdims=True)
    x = (x - mean) * contrast[:, None, None] + mean
    noise = rng.standard_normal(x.shape, dtype=np.float32)
    x += noise * sigma[:, None, None]
    for k in np.unique(blur):
        if k > 1:
            sel = blur == k
            x[sel] = uniform_filter(x[sel], size=(1, k, k), mode="nearest")
    if np.any(vignette > 0):
        x *= 1 - vignette[:, None, None] * _vignette_profile(h, w)
    out = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    return out[0] if single else out


def reflect_poses(poses) -> np.ndarray:
    """Mirror about the camera's optical axis: ``(x, y, z, phi) -> (x, -y, z, -phi)``."""
    out = np.array(poses, dtype=np.float64, copy=True)
    out[..., 1] = -out[..., 1]
    out[..., 3] = -out[..., 3]
    return out


POSE_KEYS = ("label", "true_relative", "drone_odom", "subject_motion")


def hflip(sample: dict) -> dict:
    """Mirror a sample: image columns reversed, every pose field reflected."""
    out = dict(sample)
    out["image"] = np.ascontiguousarray(np.asarray(sample["image"])[..., ::-1])
    for key in POSE_KEYS:
        if sample.get(key) is not None:
            out[key] = reflect_poses(sample[key])
    return out


def augment_hflip(sample: dict, rng: np.random.Generator, probability: float = 0.5) -> dict:
    return hflip(sample) if rng.random() < probability else dict(sample)


@dataclass
class PairBatch:
    """State-consistency pairs ``(i, j)`` and their relative motions."""

    i: np.ndarray
    j: np.ndarray
    drone_odom: np.ndarray
    subject_motion: np.ndarray

    def __len__(self) -> int:
        return len(self.i)


def augment_time_reversal(pairs: PairBatch, rng: np.random.Generator, probability: float = 0.5) -> PairBatch:
    """Swap each pair's members with ``probability`` and invert both motions."""
    rev = rng.random(len(pairs)) < probability
    i = np.where(rev, pairs.j, pairs.i)
    j = np.where(rev, pairs.i, pairs.j)
    odom = np.where(rev[:, None], invert_arrays(pairs.drone_odom), pairs.drone_odom)
    subject = np.where(rev[:, None], invert_arrays(pairs.subject_motion), pairs.subject_motion)
    return PairBatch(i, j, odom, subject)


def make_pairs(dataset, members, dt_steps: int) -> PairBatch:
    """Pair every index in ``members`` with the sample ``dt_steps`` later.

    Samples too close to the end of the segment pair with the sample
    ``dt_steps`` earlier instead; pairs whose partner falls outside the
    segment or lacks odometry are dropped.
    """
    from .geometry import compose_arrays

    n = len(dataset)
    i = np.asarray(members, dtype=np.intp)
    j = np.where(i + dt_steps < n, i + dt_steps, i - dt_steps)
    ok = (j >= 0) & dataset.odom_valid[i] & dataset.odom_valid[np.clip(j, 0, n - 1)]
    i, j = i[ok], j[ok]
    odom = compose_arrays(invert_arrays(dataset.odom[i]), dataset.odom[j])
    subject = np.zeros((len(i), 4))
    known = dataset.subject_valid[i] & dataset.subject_valid[j]
    subject[known] = compose_arrays(invert_arrays(dataset.subject[i[known]]), dataset.subject[j[known]])
    return PairBatch(i, j, odom, subject)


# -- fine-tuning -----------------------------------------------------------------------------------


@dataclass
class FineTuneResult:
    params: M.ParamStore
    trace: list  # one dict per epoch: epoch, task_loss, sc_loss, total
    dropped_pairs: int = 0


def _check_dataset(dataset, config: TrainConfig) -> None:
    regime = config.regime
    if config.samples_per_epoch > len(dataset):
        raise ValueError(
            f"{config.batches_per_epoch} batches of {config.batch_size} need "
            f"{config.samples_per_epoch} samples; the dataset has {len(dataset)}"
        )
    if regime.task != "none" and not dataset.label_valid.any():
        raise ValueError(f"regime {regime.name} needs labeled samples; the dataset has none")
    if regime.consistency:
        if not dataset.odom_valid.any():
            raise ValueError(f"regime {regime.name} needs drone odometry")
        if regime.subject_mode != "unknown_still" and not dataset.subject_valid.any():
            raise ValueError(f"regime {regime.name} needs subject poses")
    if regime.task == "none" and not regime.consistency:
        raise NoSupervisionError(f"regime {regime.name} provides no supervision")


class _Inputs:
    """Network inputs per sample, as images or (for the fc strategy) precomputed features."""

    def __init__(self, arch, params, dataset, config):
        self.arch = arch
        self.images = dataset.images
        self.augment = config.augment
        self.start = 0
        if config.strategy is Strategy.FC:
            self.start = arch.head_index
            self.features = self._features(params, dataset.images)
            self.flipped = (
                self._features(params, dataset.images[..., ::-1]) if config.augment.hflip else None
            )

    def _features(self, params, images):
        f = M.precompute_features(self.arch, params, M.images_to_input(images))
        codes, q = M.features_to_int8(f)
        from .quantization import dequantize

        return dequantize(codes, q)

    def gather(self, idx, flip, rng):
        if self.start:
            return np.where(flip[:, None], self.flipped[idx], self.features[idx]) if flip.any() else self.features[idx]
        imgs = self.images[idx]
        if flip.any():
            imgs = np.where(flip[:, None, None], imgs[..., ::-1], imgs)
        if self.augment.photometric:
            imgs = augment_photometric(imgs, rng, self.augment)
        return M.images_to_input(imgs)


def fine_tune(params: M.ParamStore, dataset, config: TrainConfig) -> FineTuneResult:
    """Fine-tune a copy of ``params`` on ``dataset``; returns the final-epoch parameters."""
    _check_dataset(dataset, config)
    arch = params.arch
    regime = config.regime
    params = params.copy()
    params.set_strategy(config.strategy)
    params.zero_grad()
    inputs = _Inputs(arch, params, dataset, config)
    dt_steps = regime.dt_steps(dataset.rate_hz) if regime.consistency else 0
    use_task = regime.task != "none"
    aug = config.augment
    trace, dropped = [], 0
    n = len(dataset)

    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)[: config.samples_per_epoch]
        rng = np.random.default_rng([config.seed, epoch, 1])
        sums = np.zeros(3)
        for b in range(config.batches_per_epoch):
            members = order[b * config.batch_size : (b + 1) * config.batch_size]
            if regime.consistency:
                pairs = make_pairs(dataset, members, dt_steps)
                dropped += len(members) - len(pairs)
                # labeled members without a partner (anchors) still feed the task term
                extra = members[~np.isin(members, pairs.i) & dataset.label_valid[members]] if use_task else members[:0]
                anchor_first = np.ones(len(pairs), bool)
                if aug.time_reversal:
                    swapped = augment_time_reversal(pairs, rng, aug.probability)
                    anchor_first = swapped.i == pairs.i
                    pairs = swapped
                p, e = len(pairs), len(extra)
                rows = np.concatenate([pairs.i, pairs.j, extra])
                flip_pair = rng.random(p + e) < aug.probability if aug.hflip else np.zeros(p + e, bool)
                flip = np.concatenate([flip_pair[:p], flip_pair])
                flip_pair = flip_pair[:p]
                odom = np.where(flip_pair[:, None], reflect_poses(pairs.drone_odom), pairs.drone_odom)
                subject = np.where(flip_pair[:, None], reflect_poses(pairs.subject_motion), pairs.subject_motion)
                pair_i, pair_j = np.arange(p), np.arange(p, 2 * p)
                # the task term sees each batch member once
                own_row = np.concatenate([np.where(anchor_first, pair_i, pair_j), np.arange(2 * p, 2 * p + e)])
            else:
                rows = members
                flip = rng.random(len(rows)) < aug.probability if aug.hflip else np.zeros(len(rows), bool)
                own_row = np.arange(len(rows))
                pair_i = pair_j = np.zeros(0, np.intp)
                odom = subject = None
            x = inputs.gather(rows, flip, rng)
            targets = np.where(flip[:, None], reflect_poses(dataset.label[rows]), dataset.label[rows])
            task_idx = own_row[dataset.label_valid[rows[own_row]]] if use_task else np.zeros(0, np.intp)

            pred, cache = M.forward(arch, params, x, config.strategy, start=inputs.start)
            loss = combined_loss(
                pred, regime.lambda_sc, task_idx, targets, pair_i, pair_j, odom, subject, len(members)
            )
            M.backward(arch, params, cache, loss.grad)
            sgd_step(params, config.learning_rate)
            sums += (loss.task.value, loss.sc.value, loss.value)
        means = sums / config.batches_per_epoch
        trace.append(
            {"epoch": epoch, "task_loss": float(means[0]), "sc_loss": float(means[1]), "total": float(means[2])}
        )
    params.set_strategy(None)
    return FineTuneResult(params, trace, dropped)
