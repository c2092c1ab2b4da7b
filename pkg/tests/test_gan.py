import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from antigan.config import ExperimentConfig
from antigan.gan import (
    DivergenceError,
    FeatureExtractor,
    _check_finite,
    _lam_scale,
    extract_features,
    generate,
    load_generator,
    save_checkpoint,
    train_defender_gan,
)
from antigan.nets import Discriminator, Generator
from antigan.obfuscation import ObfuscationParams, l_obf_torch

from conftest import make_dataset

TINY = ExperimentConfig(noise_dim=8, gan_width=8, gan_batch_size=16, lam_delay_epochs=0, lam_warmup_epochs=0)


@pytest.fixture(scope="module")
def extractor():
    return FeatureExtractor.random(seed=1)


def test_zero_image_gives_zero_features(extractor):
    assert not extract_features(np.zeros((2, 1, 32, 32)), extractor).any()


@pytest.mark.parametrize("channels", [1, 3])
def test_feature_shape(extractor, channels):
    out = extract_features(np.random.default_rng(0).uniform(-1, 1, (5, channels, 32, 32)), extractor)
    assert out.shape == (5, 64, 16, 16)


def test_features_are_deterministic(extractor):
    x = np.random.default_rng(0).uniform(-1, 1, (4, 1, 32, 32))
    assert extract_features(x, extractor).tobytes() == extract_features(x, extractor).tobytes()
    again = FeatureExtractor.random(seed=1)
    assert torch.equal(again.weight, extractor.weight)


def test_feature_shape_errors(extractor):
    with pytest.raises(ValueError):
        extract_features(np.zeros((1, 2, 32, 32)), extractor)
    with pytest.raises(ValueError):
        extract_features(np.zeros((32, 32)), extractor)
    with pytest.raises(ValueError):
        FeatureExtractor(torch.zeros(64, 3, 5, 5))


def test_random_extractor_damps_pixel_noise(extractor):
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:32, 0:32]
    smooth = np.tile(np.cos(2 * np.pi * (xx + yy) / 12), (4, 1, 1, 1))
    noise = rng.choice([-1.0, 1.0], size=(4, 1, 32, 32))
    white = FeatureExtractor(torch.randn(64, 3, 7, 7, generator=torch.Generator().manual_seed(0)))

    def energy(images, ext):
        return (extract_features(images, ext)[:, :, 2:15, 2:15] ** 2).mean()

    def selectivity(ext):
        return energy(smooth, ext) / energy(noise, ext)

    assert selectivity(extractor) > 3 * selectivity(white)


def test_random_extractor_ignores_flat_offsets(extractor):
    flat = np.full((2, 1, 32, 32), 0.7)
    feats = extract_features(flat, extractor)
    # outputs 2..14 see no zero padding (7x7 window, stride 2, padding 3)
    assert np.abs(feats[:, :, 2:15, 2:15]).max() < 1e-5
    assert np.abs(feats).max() > 0.1


def test_extractor_from_file(tmp_path, extractor):
    path = tmp_path / "conv1.npy"
    np.save(path, extractor.weight.numpy())
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    loaded = FeatureExtractor.from_file(path, digest)
    assert torch.equal(loaded.weight, extractor.weight)
    with pytest.raises(ValueError):
        FeatureExtractor.from_file(path, "0" * 64)
    pt = tmp_path / "resnet.pt"
    torch.save({"conv1.weight": extractor.weight}, pt)
    assert torch.equal(FeatureExtractor.from_file(pt).weight, extractor.weight)


def test_generate_range_and_count():
    gen = Generator(noise_dim=8, num_classes=10, width=8)
    out = generate(gen, np.arange(10), seed=0)
    assert out.shape == (10, 1, 32, 32)
    assert np.isfinite(out).all() and out.min() >= -1 and out.max() <= 1


def test_generate_invalid_label():
    gen = Generator(noise_dim=8, num_classes=10, width=8)
    with pytest.raises(ValueError):
        generate(gen, [3, 10])


def test_generate_uses_label():
    torch.manual_seed(0)
    gen = Generator(noise_dim=8, num_classes=10, width=8).eval()
    z = torch.randn(1, 8)
    with torch.no_grad():
        a = gen(z, torch.tensor([3]))
        b = gen(z, torch.tensor([7]))
    assert torch.dist(a, b) > 0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 100))
def test_generator_output_bounded(seed, scale):
    torch.manual_seed(seed)
    gen = Generator(noise_dim=8, num_classes=4, width=4).eval()
    z = torch.randn(6, 8) * scale
    with torch.no_grad():
        out = gen(z, torch.arange(6) % 4)
    assert out.min() >= -1 and out.max() <= 1


def test_discriminator_probability_in_unit_interval():
    disc = Discriminator(64, 16, 10, width=8).eval()
    p = disc.prob(torch.randn(5, 64, 16, 16), torch.arange(5))
    assert ((p > 0) & (p < 1)).all()


def test_obfuscation_term_moves_generator():
    torch.manual_seed(0)
    gen = Generator(noise_dim=8, num_classes=2, width=8)
    disc = Discriminator(64, 16, 2, width=8)
    disc.requires_grad_(False)
    params = ObfuscationParams(0.4, 5)
    z, y = torch.randn(8, 8), torch.arange(8) % 2
    opt = torch.optim.Adam(gen.parameters(), lr=1e-3)
    before = l_obf_torch(gen(z, y), params).item()
    loss = 1000.0 * l_obf_torch(gen(z, y), params)
    opt.zero_grad()
    loss.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in gen.parameters())
    assert all(p.grad is None for p in disc.parameters())
    opt.step()
    assert l_obf_torch(gen(z, y), params).item() != before


def _train(**kw):
    data = make_dataset(64, num_classes=2, seed=3)
    return train_defender_gan(data, ObfuscationParams(0.4, 5), kw.pop("lam", 10.0), kw.pop("epochs", 2),
                              TINY.replace(**kw))


def test_training_keeps_extractor_frozen():
    ext = FeatureExtractor.random(seed=5)
    before = ext.weight.clone()
    data = make_dataset(64, num_classes=2, seed=3)
    res = train_defender_gan(data, ObfuscationParams(0.4, 5), 10.0, 2, TINY, extractor=ext)
    assert torch.equal(before, res.extractor.weight)
    assert len(res.history) == 2
    for rec in res.history:
        assert all(np.isfinite(v) for v in rec.values())


def test_training_is_deterministic():
    a, b = _train(), _train()
    assert a.history == b.history


def test_training_without_extractor():
    res = train_defender_gan(make_dataset(40, num_classes=2), ObfuscationParams(0.4, 5), 1.0, 1, TINY,
                             use_extractor=False)
    assert res.extractor is None and res.discriminator.size == 32


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        _train(lam=-1.0)


def test_non_finite_loss_raises():
    with pytest.raises(DivergenceError):
        _check_finite(3, d_loss=float("nan"))


def test_checkpoint_round_trip(tmp_path):
    gen = Generator(noise_dim=8, num_classes=3, width=8)
    save_checkpoint(gen, tmp_path / "g.pt")
    loaded = load_generator(tmp_path / "g.pt", 8, 1, 3, width=8)
    for a, b in zip(gen.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(a, b)


def test_lambda_schedule():
    assert [_lam_scale(s, 3, 4) for s in range(9)] == [0, 0, 0, 0.25, 0.5, 0.75, 1, 1, 1]
    assert _lam_scale(0, 0, 0) == 1.0
    assert _lam_scale(2, 3, 0) == 0.0 and _lam_scale(3, 3, 0) == 1.0
