"""The defender's conditional GAN.

The discriminator judges frozen first-layer convolution features C(x)
instead of pixels, and the generator is additionally pulled toward the
expected window variance by ``lam * L_obf``.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ExperimentConfig, stage_seed
from .data import LabeledDataset
from .nets import Discriminator, Generator
from .obfuscation import ObfuscationParams, l_obf_torch

log = logging.getLogger(__name__)

FEATURE_CHANNELS = 64


class DivergenceError(RuntimeError):
    pass


class FeatureExtractor(nn.Module):
    """Frozen 7x7 stride-2 convolution with 64 output maps (ResNet-18 ``conv1`` geometry).

    Weights come from a file holding a (64, 3, 7, 7) array (``.npy`` or a
    torch tensor), or are drawn from a seeded normal distribution.
    """

    def __init__(self, weights: torch.Tensor):
        super().__init__()
        if tuple(weights.shape) != (FEATURE_CHANNELS, 3, 7, 7):
            raise ValueError(f"extractor weights must be (64, 3, 7, 7), got {tuple(weights.shape)}")
        self.register_buffer("weight", weights.detach().clone().float())

    @classmethod
    def random(cls, seed: int = 0, max_frequency: int = 2, zero_mean: bool = True) -> "FeatureExtractor":
        """Seeded stand-in for pretrained first-layer filters.

        Each kernel is a random combination of the 2-D cosine basis up to
        ``max_frequency`` under a Gaussian envelope, so like trained
        first-layer filters the bank responds to smooth structure and edges
        and only weakly to pixel-level noise. With ``zero_mean`` every kernel
        also sums to zero per input channel, making the bank blind to flat
        brightness offsets the way edge and blob detectors are. Kernels are
        scaled to He initialization variance.
        """
        g = torch.Generator().manual_seed(seed)
        i = torch.arange(7, dtype=torch.float64)
        basis = torch.stack([torch.cos(math.pi * (2 * i + 1) * u / 14) for u in range(max_frequency + 1)])
        envelope = torch.exp(-((i - 3) ** 2) / 8.0)
        coef = torch.randn(FEATURE_CHANNELS, 3, max_frequency + 1, max_frequency + 1, generator=g,
                           dtype=torch.float64)
        w = torch.einsum("ocuv,ui,vj->ocij", coef, basis * envelope, basis * envelope)
        if zero_mean:
            w = w - w.mean(dim=(2, 3), keepdim=True)
        w = w / w.flatten(1).std(dim=1).view(-1, 1, 1, 1) * math.sqrt(2.0 / (3 * 7 * 7))
        return cls(w.float())

    @classmethod
    def from_file(cls, path, sha256: str | None = None) -> "FeatureExtractor":
        path = Path(path)
        blob = path.read_bytes()
        digest = hashlib.sha256(blob).hexdigest()
        if sha256 is not None and digest != sha256:
            raise ValueError(f"{path}: sha256 {digest} does not match expected {sha256}")
        if path.suffix == ".npy":
            w = torch.from_numpy(np.load(path))
        else:
            w = torch.load(path, map_location="cpu")
            if isinstance(w, dict):
                w = w.get("conv1.weight", w.get("weight"))
        return cls(torch.as_tensor(w))

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        elif x.shape[1] != 3:
            raise ValueError(f"expected 1 or 3 channels, got {x.shape[1]}")
        return F.conv2d(x, self.weight, stride=2, padding=3)


def build_extractor(config: ExperimentConfig) -> FeatureExtractor:
    if config.extractor_weights:
        return FeatureExtractor.from_file(config.extractor_weights, config.extractor_sha256)
    return FeatureExtractor.random(stage_seed(config.seed, "extractor") % 2**31)


def extract_features(images, extractor: FeatureExtractor) -> np.ndarray:
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim != 4:
        raise ValueError(f"expected an (N, C, H, W) batch, got shape {tuple(x.shape)}")
    with torch.no_grad():
        return extractor(x).numpy()


def generate(gen: Generator, labels, seed: int = 0, batch_size: int = 256) -> np.ndarray:
    """One image per label, each from fresh noise, as an (N, C, 32, 32) float32 array."""
    labels = np.asarray(labels, dtype=np.int64)
    if gen.num_classes is not None and len(labels) and (labels.min() < 0 or labels.max() >= gen.num_classes):
        raise ValueError(f"labels must lie in [0, {gen.num_classes})")
    g = torch.Generator().manual_seed(seed)
    was_training = gen.training
    gen.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            y = torch.from_numpy(labels[start:start + batch_size])
            z = torch.randn(len(y), gen.noise_dim, generator=g)
            out.append(gen(z, y if gen.num_classes is not None else None).numpy())
    gen.train(was_training)
    if not out:
        return np.zeros((0, gen.channels, 32, 32), dtype=np.float32)
    return np.concatenate(out).astype(np.float32)


@dataclass
class DefenderGAN:
    generator: Generator
    discriminator: Discriminator
    extractor: FeatureExtractor | None
    history: list


def _check_finite(epoch, **losses):
    for name, value in losses.items():
        if not math.isfinite(value):
            raise DivergenceError(f"{name} became non-finite at epoch {epoch}")


def train_defender_gan(real: LabeledDataset, params: ObfuscationParams, lam: float, epochs: int,
                       config: ExperimentConfig, use_extractor: bool = True,
                       extractor: FeatureExtractor | None = None) -> DefenderGAN:
    """Alternate one discriminator and one generator Adam step per batch.

    The discriminator maximizes the conditional GAN objective on
    ``(C(x) | y)`` against ``(C(G(z | y)) | y)``; with ``use_extractor=False``
    it sees raw pixels instead. The generator minimizes the non-saturating
    adversarial term plus ``lam * L_obf``. The obfuscation weight is held at
    zero for ``config.lam_delay_epochs`` epochs, so the generator first learns
    class structure, then ramps linearly to ``lam`` over
    ``config.lam_warmup_epochs`` epochs. ``history`` holds one dict per
    epoch, including discriminator accuracy on a held-out real batch.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if len(real) == 0:
        raise ValueError("cannot train on an empty dataset")
    seed = stage_seed(config.seed, "defender_gan")
    torch.manual_seed(seed % 2**31)
    rng = np.random.default_rng(seed)
    noise = torch.Generator().manual_seed(seed % 2**31)

    k = real.num_classes
    gen = Generator(config.noise_dim, real.channels, k, width=config.gan_width)
    if use_extractor:
        extractor = extractor if extractor is not None else build_extractor(config)
        extractor.requires_grad_(False)
        disc = Discriminator(FEATURE_CHANNELS, 16, k, width=config.gan_width)
        view = extractor
    else:
        extractor = None
        disc = Discriminator(real.channels, 32, k, width=config.gan_width)
        view = nn.Identity()
    betas = (config.gan_beta1, 0.999)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.gan_lr, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.gan_lr, betas=betas)

    order = rng.permutation(len(real))
    n_hold = min(256, len(real) // 10)
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    x_all = torch.from_numpy(real.images)
    y_all = torch.from_numpy(real.labels)
    hold_z = torch.randn(n_hold, config.noise_dim, generator=noise)
    bs = config.gan_batch_size
    history = []
    steps_per_epoch = max(1, math.ceil(len(train_idx) / bs))
    delay_steps = config.lam_delay_epochs * steps_per_epoch
    warmup_steps = config.lam_warmup_epochs * steps_per_epoch
    step = 0
    for epoch in range(1, epochs + 1):
        perm = train_idx[rng.permutation(len(train_idx))]
        sums = {"d_loss": 0.0, "g_loss": 0.0, "obf_loss": 0.0}
        n_batches = 0
        for start in range(0, len(perm), bs):
            idx = torch.from_numpy(perm[start:start + bs])
            if len(idx) < 2:
                continue
            x, y = x_all[idx], y_all[idx]
            z = torch.randn(len(idx), config.noise_dim, generator=noise)

            fake = gen(z, y)
            d_real = disc(view(x), y)
            d_fake = disc(view(fake.detach()), y)
            loss_d = (F.binary_cross_entropy_with_logits(d_real, torch.ones_like(d_real))
                      + F.binary_cross_entropy_with_logits(d_fake, torch.zeros_like(d_fake)))
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            d_gen = disc(view(fake), y)
            adv = F.binary_cross_entropy_with_logits(d_gen, torch.ones_like(d_gen))
            obf = l_obf_torch(fake, params)
            loss_g = adv + _lam_scale(step, delay_steps, warmup_steps) * lam * obf
            step += 1
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            sums["d_loss"] += loss_d.item()
            sums["g_loss"] += adv.item()
            sums["obf_loss"] += obf.item()
            n_batches += 1
        record = {k_: v / max(n_batches, 1) for k_, v in sums.items()}
        _check_finite(epoch, **record)
        record["epoch"] = epoch
        record.update(_evaluate(gen, disc, view, x_all[hold_idx], y_all[hold_idx], hold_z, params))
        history.append(record)
        log.info("defender gan epoch %d: %s", epoch, {k_: round(v, 4) for k_, v in record.items()})
    gen.eval()
    return DefenderGAN(gen, disc, extractor, history)


def _lam_scale(step, delay, warmup):
    """0 during the delay, then a linear ramp to 1 over ``warmup`` steps."""
    if step < delay:
        return 0.0
    if warmup <= 0:
        return 1.0
    return min(1.0, (step - delay + 1) / warmup)


def _evaluate(gen, disc, view, x_hold, y_hold, z_hold, params):
    if len(x_hold) == 0:
        return {}
    gen.eval()
    disc.eval()
    with torch.no_grad():
        fake = gen(z_hold, y_hold)
        p_real = torch.sigmoid(disc(view(x_hold), y_hold))
        p_fake = torch.sigmoid(disc(view(fake), y_hold))
        acc = 0.5 * ((p_real > 0.5).float().mean() + (p_fake < 0.5).float().mean())
        s = params.window_size
        mean = F.avg_pool2d(fake, s, s, ceil_mode=True).mean(dim=1)
        var = F.avg_pool2d(fake * fake, s, s, ceil_mode=True).mean(dim=1) - mean ** 2
    gen.train()
    disc.train()
    return {"d_acc_holdout": acc.item(), "gen_window_var": var.mean().item()}


def save_checkpoint(module: nn.Module, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), path)


def load_generator(path, noise_dim, channels, num_classes, width=64) -> Generator:
    gen = Generator(noise_dim, channels, num_classes, width=width)
    gen.load_state_dict(torch.load(path, map_location="cpu"))
    return gen.eval()
