"""Black-box attacker: a DCGAN trained on whatever images the defender releases.

By default one unconditional DCGAN is trained per attacked class; the
conditional mode trains a single label-conditioned pair instead.
Reconstruction quality is scored by the best structural similarity of
each reconstruction against the private images of its class.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import _accel
from .config import ExperimentConfig, stage_seed
from .data import EmptyClassError, LabeledDataset
from .fedsim import PrivacyViolation
from .gan import DivergenceError, generate
from .nets import Discriminator, Generator

log = logging.getLogger(__name__)

SSIM_WINDOW = 7
DATA_RANGE = 2.0  # pixels live in [-1, 1]


@dataclass
class AttackResult:
    reconstructions: dict  # class -> (n, C, H, W) array
    history: dict  # class -> list of per-epoch loss dicts
    similarity: dict = field(default_factory=dict)  # class -> score, filled by score_attack
    snapshots: dict = field(default_factory=dict)  # (class, epoch) -> images

    @property
    def classes(self):
        return sorted(self.reconstructions)

    def mean_similarity(self) -> float:
        return float(np.mean([self.similarity[c] for c in self.classes]))


def _train_dcgan(images, labels, num_classes, epochs, config: ExperimentConfig, seed: int,
                 eval_labels, tag):
    torch.manual_seed(seed % 2**31)
    rng = np.random.default_rng(seed)
    noise = torch.Generator().manual_seed(seed % 2**31)
    channels = images.shape[1]
    gen = Generator(config.noise_dim, channels, num_classes, width=config.attack_width)
    disc = Discriminator(channels, 32, num_classes, width=config.attack_width)
    betas = (config.gan_beta1, 0.999)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.attack_lr, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.attack_lr, betas=betas)
    x_all = torch.from_numpy(images)
    y_all = torch.from_numpy(labels) if num_classes is not None else None
    eval_seed = stage_seed(seed, "eval_noise")
    bs = config.attack_batch_size
    history, snapshots = [], {}
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(images))
        d_sum = g_sum = 0.0
        n = 0
        for start in range(0, len(perm), bs):
            idx = torch.from_numpy(perm[start:start + bs])
            if len(idx) < 2 and len(images) >= 2:
                continue
            x = x_all[idx]
            y = y_all[idx] if y_all is not None else None
            z = torch.randn(len(idx), config.noise_dim, generator=noise)
            fake = gen(z, y)
            d_real = disc(x, y)
            d_fake = disc(fake.detach(), y)
            loss_d = (F.binary_cross_entropy_with_logits(d_real, torch.ones_like(d_real))
                      + F.binary_cross_entropy_with_logits(d_fake, torch.zeros_like(d_fake)))
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            d_gen = disc(fake, y)
            loss_g = F.binary_cross_entropy_with_logits(d_gen, torch.ones_like(d_gen))
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            d_sum += loss_d.item()
            g_sum += loss_g.item()
            n += 1
        rec = {"epoch": epoch, "d_loss": d_sum / max(n, 1), "g_loss": g_sum / max(n, 1)}
        if not (math.isfinite(rec["d_loss"]) and math.isfinite(rec["g_loss"])):
            raise DivergenceError(f"attacker GAN ({tag}) diverged at epoch {epoch}")
        history.append(rec)
        if config.attack_grid_every and epoch % config.attack_grid_every == 0 and epoch != epochs:
            snapshots[epoch] = generate(gen, eval_labels, seed=eval_seed)
    final = generate(gen, eval_labels, seed=eval_seed)
    return final, history, snapshots


def run_blackbox_attack(target: LabeledDataset, classes, epochs: int, config: ExperimentConfig,
                        allow_private: bool = False) -> AttackResult:
    """Train the attacker on ``target`` and emit reconstructions from fixed evaluation noise.

    ``target`` is what the scenario exposes. Records tagged private are
    refused unless ``allow_private`` is set (the undefended baseline).
    """
    if target.private and not allow_private:
        raise PrivacyViolation("attacker was handed private records in a defended scenario")
    classes = sorted(int(c) for c in (classes if classes is not None else target.classes_present()))
    for c in classes:
        if not (target.labels == c).any():
            raise EmptyClassError(f"target has no examples of class {c}")
    n = config.attack_samples
    recon, history, snaps = {}, {}, {}
    if config.attack_mode == "conditional":
        keep = np.isin(target.labels, classes)
        eval_labels = np.repeat(classes, n)
        seed = stage_seed(config.seed, "attack", "conditional")
        images, hist, snapshots = _train_dcgan(target.images[keep], target.labels[keep], target.num_classes,
                                               epochs, config, seed, eval_labels, "conditional")
        for i, c in enumerate(classes):
            recon[c] = images[i * n:(i + 1) * n]
            history[c] = hist
            for ep, imgs in snapshots.items():
                snaps[(c, ep)] = imgs[i * n:(i + 1) * n]
    else:
        for c in classes:
            sub = target.of_class(c)
            seed = stage_seed(config.seed, "attack", c)
            images, hist, snapshots = _train_dcgan(sub.images, np.zeros(len(sub), np.int64), None,
                                                   epochs, config, seed, np.zeros(n, np.int64), f"class {c}")
            recon[c], history[c] = images, hist
            for ep, imgs in snapshots.items():
                snaps[(c, ep)] = imgs
            log.info("attack class %d: final d %.4f g %.4f", c, hist[-1]["d_loss"], hist[-1]["g_loss"])
    return AttackResult(recon, history, snapshots=snaps)


def reconstruction_similarity(recon, privates: LabeledDataset, target_class: int) -> float:
    """Mean over reconstructions of the best SSIM against private images of ``target_class``.

    SSIM uses 7x7 uniform windows over the valid region, population
    statistics, and a data range of 2; the score lies in [-1, 1] and higher
    means more leakage.
    """
    refs = privates.images[privates.labels == target_class]
    if len(refs) == 0:
        raise EmptyClassError(f"no private images of class {target_class}")
    best, _ = _accel.ssim_max(np.asarray(recon), refs, SSIM_WINDOW, DATA_RANGE)
    return float(best.mean())


def score_attack(result: AttackResult, privates: LabeledDataset) -> AttackResult:
    for c in result.classes:
        result.similarity[c] = reconstruction_similarity(result.reconstructions[c], privates, c)
    return result


def image_grid(images, ncol: int = 8) -> Image.Image:
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    nrow = max(1, math.ceil(n / ncol))
    canvas = np.zeros((nrow * (h + 2) + 2, ncol * (w + 2) + 2, c))
    for i in range(n):
        r, q = divmod(i, ncol)
        top, left = 2 + r * (h + 2), 2 + q * (w + 2)
        canvas[top: top + h, left: left + w] = images[i].transpose(1, 2, 0)
    raw = np.clip(np.rint((canvas + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return Image.fromarray(raw[..., 0] if c == 1 else raw)


def export_grids(result: AttackResult, directory, epochs: int | None = None) -> list[Path]:
    """PNG grid per class, plus one per class and snapshot epoch."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for (c, ep), imgs in sorted(result.snapshots.items()):
        p = directory / f"attack_class{c}_epoch{ep}.png"
        image_grid(imgs).save(p)
        written.append(p)
    for c in result.classes:
        suffix = f"_epoch{epochs}" if epochs else ""
        p = directory / f"attack_class{c}{suffix}.png"
        image_grid(result.reconstructions[c]).save(p)
        written.append(p)
    return written
