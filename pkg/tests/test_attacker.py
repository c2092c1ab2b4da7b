import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from antigan.attacker import (
    export_grids,
    image_grid,
    reconstruction_similarity,
    run_blackbox_attack,
    score_attack,
)
from antigan.config import ExperimentConfig
from antigan.data import EmptyClassError, LabeledDataset
from antigan.fedsim import PrivacyViolation

from conftest import make_dataset

FAST = ExperimentConfig(noise_dim=8, attack_width=8, attack_batch_size=16, attack_samples=4)


def _smooth_images(n, seed):
    """Blurry random blobs, closer to natural images than white noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32]
    out = np.zeros((n, 1, 32, 32), np.float32)
    for i in range(n):
        for _ in range(3):
            cy, cx, r = rng.uniform(4, 28), rng.uniform(4, 28), rng.uniform(3, 8)
            out[i, 0] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return np.clip(out * 2 - 1, -1, 1)


def test_self_similarity_is_one():
    privates = make_dataset(6, num_classes=2)
    recon = privates.images[privates.labels == 1][:2]
    assert reconstruction_similarity(recon, privates, 1) == pytest.approx(1.0, abs=1e-12)


def test_constant_reconstruction_scores_near_zero():
    structural_similarity = pytest.importorskip("skimage.metrics").structural_similarity
    privates = LabeledDataset(_smooth_images(20, 0), np.zeros(20, np.int64), 1)
    recon = np.full((4, 1, 32, 32), 0.2, np.float32)
    oracle = max(structural_similarity(recon[0, 0].astype(np.float64), ref[0].astype(np.float64), win_size=7,
                                       data_range=2.0, use_sample_covariance=False) for ref in privates.images)
    score = reconstruction_similarity(recon, privates, 0)
    assert score == pytest.approx(oracle, abs=1e-10)
    assert abs(score) < 0.1


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_similarity_symmetric_under_negation(seed):
    privates = make_dataset(8, num_classes=2, seed=seed)
    recon = np.random.default_rng(seed).uniform(-1, 1, (3, 1, 32, 32))
    negated = LabeledDataset(-privates.images, privates.labels, 2)
    a = reconstruction_similarity(recon, privates, 0)
    b = reconstruction_similarity(-recon, negated, 0)
    assert a == pytest.approx(b, abs=1e-12)
    assert -1 <= a <= 1


def test_similarity_empty_class():
    with pytest.raises(EmptyClassError):
        reconstruction_similarity(np.zeros((1, 1, 32, 32)), make_dataset(4, num_classes=3, labels=[0, 1, 0, 1]), 2)


def test_private_target_refused():
    target = make_dataset(8)
    target.private = True
    with pytest.raises(PrivacyViolation):
        run_blackbox_attack(target, [0], 1, FAST)


def test_missing_class_refused():
    with pytest.raises(EmptyClassError):
        run_blackbox_attack(make_dataset(8, num_classes=3, labels=[0, 1] * 4), [2], 1, FAST)


@pytest.mark.parametrize("mode", ["per_class", "conditional"])
def test_attack_shapes_and_history(mode, tmp_path):
    target = make_dataset(32, num_classes=2)
    cfg = FAST.replace(attack_mode=mode, attack_grid_every=1)
    result = run_blackbox_attack(target, None, 2, cfg)
    assert result.classes == [0, 1]
    for c in result.classes:
        assert result.reconstructions[c].shape == (4, 1, 32, 32)
        assert len(result.history[c]) == 2
        assert all(np.isfinite(h["d_loss"]) and np.isfinite(h["g_loss"]) for h in result.history[c])
    score_attack(result, target)
    assert set(result.similarity) == {0, 1}
    written = export_grids(result, tmp_path, epochs=2)
    names = {p.name for p in written}
    assert {"attack_class0_epoch2.png", "attack_class1_epoch1.png"} <= names


def test_attack_is_deterministic():
    target = make_dataset(32, num_classes=2)
    a = run_blackbox_attack(target, [1], 2, FAST)
    b = run_blackbox_attack(target, [1], 2, FAST)
    assert a.reconstructions[1].tobytes() == b.reconstructions[1].tobytes()


def test_single_image_is_memorized():
    image = _smooth_images(1, 3)
    target = LabeledDataset(np.repeat(image, 32, axis=0), np.zeros(32, np.int64), 1)
    cfg = ExperimentConfig(noise_dim=16, attack_width=16, attack_batch_size=8, attack_samples=8, attack_lr=1e-3,
                           attack_mode="per_class")
    result = score_attack(run_blackbox_attack(target, [0], 200, cfg), LabeledDataset(image, [0], 1))
    assert result.similarity[0] > 0.9


def test_image_grid_layout():
    grid = image_grid(np.zeros((10, 1, 32, 32)) - 1, ncol=4)
    assert grid.size == (4 * 34 + 2, 3 * 34 + 2)
    rgb = image_grid(np.zeros((2, 3, 32, 32)), ncol=2)
    assert rgb.mode == "RGB"
