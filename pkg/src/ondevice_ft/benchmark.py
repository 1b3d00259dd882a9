"""Synthetic domain-shift benchmark.

A network is pretrained from scratch on frames rendered in
:data:`~ondevice_ft.simworld.SOURCE_STYLE`, quantized to int8 (the deployed
model), then fine-tuned on one flight rendered in
:data:`~ondevice_ft.simworld.TARGET_STYLE` and tested on a later, disjoint
segment of the same flight.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import model as M
from . import simworld as W
from .losses import SupervisionRegime, regime_from_name
from .metrics import Metrics, evaluate_predictions
from .quantization import dequantize_params, quantize_params, requantize_after_finetune
from .trainer import AugmentConfig, TrainConfig, augment_photometric, fine_tune, reflect_poses

PACKAGED = Path(__file__).parent / "data"

__all__ = [
    "BenchmarkConfig",
    "Baseline",
    "predict",
    "adam_pretrain",
    "pretrained_baseline",
    "target_flight",
    "run_cell",
    "CellResult",
]


@dataclass(frozen=True)
class BenchmarkConfig:
    pretrain_flights: int = 8
    pretrain_flight_len: int = 512
    pretrain_epochs: int = 8
    pretrain_lr: float = 1e-3
    pretrain_seed: int = 1234
    finetune_len: int = 512
    gap: int = 100
    test_len: int = 256
    subject_v_max: float = 0.8  # target flights follow a walking subject
    cache_dir: str = ".ondevice_ft_cache"

    def key(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k.startswith("pretrain")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def predict(params: M.ParamStore, images, batch: int = 128) -> np.ndarray:
    arch = params.arch
    out = []
    for s in range(0, len(images), batch):
        y, _ = M.forward(arch, params, M.images_to_input(images[s : s + batch]))
        out.append(y)
    return np.concatenate(out).astype(np.float64)


def adam_pretrain(
    params: M.ParamStore,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float = 1e-3,
    batch: int = 32,
    seed: int = 0,
    log=None,
) -> M.ParamStore:
    """Supervised training of every tensor with Adam, hflip and photometric augmentation."""
    from .losses import task_loss

    arch = params.arch
    params = params.copy()
    params.set_strategy(M.Strategy.ALL)
    params.zero_grad()
    names = sorted(params.mask)
    m1 = {n: np.zeros_like(params.tensors[n]) for n in names}
    m2 = {n: np.zeros_like(params.tensors[n]) for n in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    aug = AugmentConfig()
    t = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(images))
        total = 0.0
        for s in range(0, len(order) - batch + 1, batch):
            idx = order[s : s + batch]
            flip = rng.random(batch) < 0.5
            imgs = np.where(flip[:, None, None], images[idx][..., ::-1], images[idx])
            imgs = augment_photometric(imgs, rng, aug)
            y = np.where(flip[:, None], reflect_poses(labels[idx]), labels[idx])
            pred, cache = M.forward(arch, params, M.images_to_input(imgs), M.Strategy.ALL)
            loss = task_loss(pred, y, np.arange(batch))
            M.backward(arch, params, cache, loss.grad)
            t += 1
            for n in names:
                g = params.grads[n]
                m1[n] = b1 * m1[n] + (1 - b1) * g
                m2[n] = b2 * m2[n] + (1 - b2) * g * g
                step = lr * (m1[n] / (1 - b1**t)) / (np.sqrt(m2[n] / (1 - b2**t)) + eps)
                params.tensors[n] -= step.astype(np.float32)
                g.fill(0)
            params.version += 1
            total += loss.value
        if log is not None:
            log(f"pretrain epoch {epoch}: loss {total / (len(order) // batch):.4f}")
    params.set_strategy(None)
    return params


@dataclass
class Baseline:
    """The deployed int8 model and its float32 dequantized view."""

    arch: M.Architecture
    codes: dict
    qparams: dict
    floats: dict

    @property
    def params(self) -> M.ParamStore:
        return dequantize_params(self.arch, self.codes, self.qparams, self.floats)


def _source_data(config: BenchmarkConfig):
    images, labels = [], []
    for f in range(config.pretrain_flights):
        rng = np.random.default_rng([config.pretrain_seed, f])
        traj = W.generate_trajectory(W.TrajectoryConfig(n_states=config.pretrain_flight_len), rng)
        images.append(W.render_batch(traj.relative, traj.drone[:, 3], W.SOURCE_STYLE, config.pretrain_seed * 1000 + f))
        labels.append(traj.relative)
    return np.concatenate(images), np.concatenate(labels)


def pretrained_baseline(config: BenchmarkConfig = BenchmarkConfig(), log=None) -> Baseline:
    """Pretrain (or load from the cache) the source-domain model and quantize it."""
    name = f"baseline-{config.key()}.ttck"
    path = Path(config.cache_dir) / name
    for candidate in (PACKAGED / name, path):
        if candidate.exists():
            return Baseline(*M.load_int8_checkpoint(candidate))
    arch = M.build_reference_architecture()
    images, labels = _source_data(config)
    params = M.init_params(arch, config.pretrain_seed)
    M.calibrate_batchnorm(arch, params, M.images_to_input(images[:256]))
    params = adam_pretrain(
        params, images, labels, config.pretrain_epochs, config.pretrain_lr, seed=config.pretrain_seed, log=log
    )
    codes, qparams = quantize_params(params)
    floats = {n: params.tensors[n] for n in arch.param_shapes() if n not in codes}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    M.save_int8_checkpoint(tmp, arch, codes, qparams, floats)
    tmp.replace(path)
    return Baseline(arch, codes, qparams, floats)


@dataclass
class Flight:
    trajectory: W.Trajectory
    images: np.ndarray

    def finetune_part(self, config: BenchmarkConfig):
        n = config.finetune_len
        return self.trajectory.segment(0, n), self.images[:n]

    def test_part(self, config: BenchmarkConfig):
        a = config.finetune_len + config.gap
        b = a + config.test_len
        return self.trajectory.segment(a, b), self.images[a:b]


def target_flight(seed: int, config: BenchmarkConfig = BenchmarkConfig()) -> Flight:
    n = config.finetune_len + config.gap + config.test_len
    tc = W.TrajectoryConfig(n_states=n, subject_v_max=config.subject_v_max)
    traj = W.generate_trajectory(tc, np.random.default_rng([seed, 7]))
    images = W.render_batch(traj.relative, traj.drone[:, 3], W.TARGET_STYLE, seed)
    return Flight(traj, images)


@dataclass
class CellResult:
    seed: int
    regime: str
    strategy: str
    dt: float
    before: Metrics
    after: Metrics
    after_int8: Metrics
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def run_cell(
    baseline: Baseline,
    flight: Flight,
    seed: int,
    regime,
    strategy: str,
    dt: float = 2.0,
    config: BenchmarkConfig = BenchmarkConfig(),
    train: TrainConfig | None = None,
    noise: W.NoiseModel = W.NoiseModel(),
) -> CellResult:
    reg = regime if isinstance(regime, SupervisionRegime) else regime_from_name(regime, dt)
    ft_traj, ft_images = flight.finetune_part(config)
    test_traj, test_images = flight.test_part(config)
    ds = W.build_dataset(ft_traj, reg, noise, W.TARGET_STYLE, seed, images=ft_images)
    base = baseline.params
    truth = test_traj.relative
    before = evaluate_predictions(predict(base, test_images), truth)
    train = train or TrainConfig()
    train = TrainConfig(**{**train.__dict__, "strategy": strategy, "regime": reg, "seed": seed})
    result = fine_tune(base, ds, train)
    after = evaluate_predictions(predict(result.params, test_images), truth)
    report = requantize_after_finetune(result.params, baseline.qparams)
    floats = {n: result.params.tensors[n] for n in baseline.floats}
    q = dequantize_params(baseline.arch, report.codes, report.qparams, floats)
    after_int8 = evaluate_predictions(predict(q, test_images), truth)
    return CellResult(seed, reg.name, M.Strategy(strategy).value, reg.dt, before, after, after_int8, result.trace)
