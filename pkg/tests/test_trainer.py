import numpy as np
import pytest

from ondevice_ft import losses as L
from ondevice_ft import model as M
from ondevice_ft import trainer as T
from ondevice_ft.trainer import AugmentConfig, TrainConfig


def quick(strategy="all", regime="t_a", lr=1e-2, epochs=2, augment=None, seed=0, dt=2.0):
    return TrainConfig(
        learning_rate=lr, epochs=epochs, batch_size=4, batches_per_epoch=2, strategy=strategy,
        regime=L.regime_from_name(regime, dt), seed=seed, augment=augment or AugmentConfig(),
    )


# -- SGD ------------------------------------------------------------------------------------


def test_sgd_step_arithmetic_and_lr0():
    arch = M.Architecture((4,), (M.LayerSpec("fc", "fc", 4, 1, bias=True),))
    p = M.init_params(arch, 0)
    p.set_strategy("fc")
    p.tensors["fc.weight"][:] = 1
    before = p.tensors["fc.bias"].copy()
    p.grads["fc.weight"][:] = 0.5
    T.sgd_step(p, 0.01)
    assert np.allclose(p.tensors["fc.weight"], 0.995)
    assert np.array_equal(p.tensors["fc.bias"], before)
    assert not p.grads["fc.weight"].any() and p.version == 1
    p.grads["fc.weight"][:] = 3
    T.sgd_step(p, 0.0)
    assert np.allclose(p.tensors["fc.weight"], 0.995)


def test_sgd_only_updates_masked_tensors(ref_params):
    p = ref_params.copy()
    p.set_strategy("bias")
    for g in p.grads.values():
        g[...] = 1
    T.sgd_step(p, 0.1)
    for n in p.arch.trainable_names():
        changed = not np.array_equal(p[n], ref_params[n])
        assert changed == (n in p.mask), n


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(strategy="everything")


# -- augmentation ------------------------------------------------------------------------------


def test_photometric_zero_magnitudes_is_identity():
    cfg = AugmentConfig(probability=1.0, exposure=(1, 1), contrast=(1, 1), noise_sigma=(0, 0), blur_sizes=(1,), vignette=(0, 0))
    img = np.random.default_rng(0).integers(0, 256, (3, 96, 160), dtype=np.uint8)
    assert np.array_equal(T.augment_photometric(img, np.random.default_rng(1), cfg), img)


def test_exposure_clamps():
    cfg = AugmentConfig(probability=1.0, exposure=(2, 2), contrast=(1, 1), noise_sigma=(0, 0), blur_sizes=(1,), vignette=(0, 0))
    out = T.augment_photometric(np.full((4, 4), 128, np.uint8), np.random.default_rng(0), cfg)
    assert out.dtype == np.uint8 and np.all(out == 255)


def test_photometric_application_rate():
    rng = np.random.default_rng(2)
    cfg = AugmentConfig(exposure=(2, 2), contrast=(1, 1), noise_sigma=(0, 0), blur_sizes=(1,), vignette=(0, 0))
    out = T.augment_photometric(np.full((4000, 2, 2), 100, np.uint8), rng, cfg)
    rate = (out[:, 0, 0] == 200).mean()
    assert abs(rate - 0.5) < 3 * 0.5 / np.sqrt(4000)


def test_hflip_rule_and_double_flip():
    rng = np.random.default_rng(3)
    sample = {
        "image": rng.integers(0, 256, (96, 160), dtype=np.uint8),
        "label": np.array([1.3, 0.4, 0, 0.3]),
        "true_relative": np.array([1.3, 0.4, 0, 0.3]),
        "drone_odom": rng.normal(size=4),
        "subject_motion": rng.normal(size=4),
    }
    once = T.hflip(sample)
    assert np.array_equal(once["label"], [1.3, -0.4, 0, -0.3])
    assert np.array_equal(once["image"], sample["image"][:, ::-1])
    twice = T.hflip(once)
    for k, v in sample.items():
        assert np.array_equal(twice[k], v) and twice[k].tobytes() == np.asarray(v).tobytes()


def test_time_reversal_examples():
    still = T.PairBatch(np.array([0]), np.array([4]), np.zeros((1, 4)), np.zeros((1, 4)))
    out = T.augment_time_reversal(still, np.random.default_rng(0), probability=1.0)
    assert {out.i[0], out.j[0]} == {0, 4}
    assert np.array_equal(out.drone_odom, np.zeros((1, 4)))
    moved = T.PairBatch(np.array([0]), np.array([4]), np.array([[1.0, 0, 0, 0]]), np.zeros((1, 4)))
    out = T.augment_time_reversal(moved, np.random.default_rng(0), probability=1.0)
    assert np.allclose(out.drone_odom, [[-1, 0, 0, 0]]) and (out.i[0], out.j[0]) == (4, 0)


def test_time_reversal_rate():
    n = 10_000
    pb = T.PairBatch(np.arange(n), np.arange(n) + 1, np.zeros((n, 4)), np.zeros((n, 4)))
    out = T.augment_time_reversal(pb, np.random.default_rng(4))
    assert abs((out.i > out.j).mean() - 0.5) < 3 * 0.5 / np.sqrt(n)


def test_make_pairs_tail_pairs_backwards(small_dataset):
    ds = small_dataset("sc_dm_sm")
    pb = T.make_pairs(ds, np.array([0, 10, 60, 63]), 8)
    assert pb.j.tolist() == [8, 18, 52, 55]
    i, j, odom, subj = ds.pairs(8)
    assert len(i) == 56
    k = list(i).index(10)
    assert np.allclose(pb.drone_odom[1], odom[k]) and np.allclose(pb.subject_motion[1], subj[k])


def test_make_pairs_skips_staged_anchors(small_dataset):
    ds = small_dataset("t_r32_sc")
    anchors = np.flatnonzero(ds.label_valid)
    pb = T.make_pairs(ds, np.arange(len(ds)), 8)
    assert not np.isin(anchors, pb.i).any() and not np.isin(anchors, pb.j).any()


# -- fine_tune ---------------------------------------------------------------------------------------


def _same(a, b):
    return all(np.array_equal(a[n], b[n]) for n in a.tensors)


@pytest.mark.parametrize("strategy", ["fc", "all"])
def test_lr0_returns_input_params(small_dataset, ref_params, strategy):
    out = T.fine_tune(ref_params, small_dataset(), quick(strategy, lr=0.0))
    assert _same(out.params, ref_params)


@pytest.mark.parametrize("regime", ["t_a", "sc_do_sm", "t_r32_sc"])
def test_fine_tune_is_deterministic(small_dataset, ref_params, regime):
    ds = small_dataset(regime)
    a = T.fine_tune(ref_params, ds, quick("bn", regime))
    b = T.fine_tune(ref_params, ds, quick("bn", regime))
    assert a.trace == b.trace and _same(a.params, b.params)
    assert len(a.trace) == 2 and not _same(a.params, ref_params)
    c = T.fine_tune(ref_params, ds, quick("bn", regime, seed=1))
    assert c.trace != a.trace


def test_fine_tune_step_equals_manual_batch_mean(small_dataset, ref_params):
    """One epoch of one batch: the update is lr times the batch-averaged gradient."""
    ds = small_dataset()
    cfg = TrainConfig(learning_rate=0.05, epochs=1, batch_size=6, batches_per_epoch=1,
                      strategy="bias", augment=AugmentConfig.off())
    out = T.fine_tune(ref_params, ds, cfg)
    members = np.random.default_rng([0, 0]).permutation(len(ds))[:6]
    p = ref_params.copy()
    p.set_strategy("bias")
    pred, cache = M.forward(p.arch, p, M.images_to_input(ds.images[members]), "bias")
    grads = []
    for k in range(6):  # per-sample gradients, averaged by hand
        q = ref_params.copy()
        q.set_strategy("bias")
        pk, ck = M.forward(q.arch, q, M.images_to_input(ds.images[members[k : k + 1]]), "bias")
        M.backward(q.arch, q, ck, L.task_loss(pk, ds.label[members[k : k + 1]], [0]).grad)
        grads.append(q.grads)
    for n in p.mask:
        mean = sum(g[n] for g in grads) / 6
        assert np.allclose(out.params[n], ref_params[n] - 0.05 * mean, atol=1e-6), n


def test_duplicated_batch_gives_same_gradient(small_dataset, ref_params):
    ds = small_dataset()
    idx = np.array([3, 9, 20])
    grads = []
    for rows in (idx, np.repeat(idx, 2)):
        p = ref_params.copy()
        p.set_strategy("bn")
        pred, cache = M.forward(p.arch, p, M.images_to_input(ds.images[rows]), "bn")
        loss = L.combined_loss(pred, 1.0, np.arange(len(rows)), ds.label[rows], batch_size=len(rows))
        M.backward(p.arch, p, cache, loss.grad)
        grads.append(p.grads)
    for n in grads[0]:
        assert np.allclose(grads[0][n], grads[1][n], rtol=1e-4, atol=1e-6)


def test_fc_strategy_never_runs_the_backbone_backward(small_dataset, ref_params):
    from ondevice_ft import kernels as K

    ds = small_dataset()
    cfg = quick("fc", epochs=1, augment=AugmentConfig.off())
    with K.count_macs() as c:
        T.fine_tune(ref_params, ds, cfg)
    assert not any(kernel == "conv" for (phase, kernel) in c.calls if phase != "fw")
    assert c.bw_ig == 0


@pytest.mark.parametrize("strategy", ["bn", "bias", "fc"])
def test_fine_tune_leaves_other_tensors_bit_identical(small_dataset, ref_params, strategy):
    out = T.fine_tune(ref_params, small_dataset(), quick(strategy, epochs=1))
    mask = M.strategy_mask(ref_params.arch, strategy)
    for n in ref_params.tensors:
        assert np.array_equal(out.params[n], ref_params[n]) != (n in mask), n


def test_fine_tune_rejects_bad_inputs(small_dataset, ref_params):
    with pytest.raises(ValueError, match="samples"):
        T.fine_tune(ref_params, small_dataset(), TrainConfig(batch_size=64, batches_per_epoch=2))
    unlabeled = small_dataset("sc_dm_sm")
    with pytest.raises(ValueError, match="labeled"):
        T.fine_tune(ref_params, unlabeled, quick())


def test_fine_tune_reduces_training_loss(small_dataset, ref_params):
    ds = small_dataset()
    out = T.fine_tune(ref_params, ds, quick("all", epochs=4, augment=AugmentConfig.off()))
    assert out.trace[-1]["task_loss"] < out.trace[0]["task_loss"]
