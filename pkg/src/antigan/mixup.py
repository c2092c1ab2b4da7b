"""Mix-once dataset synthesis.

Every real image ``x`` with label ``c`` is blended exactly once with a
freshly generated image ``x'`` of the same class::

    x_hat = mu * x + (1 - mu) * x'

and keeps the hard label ``c``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .gan import generate


class MissingClassError(ValueError):
    pass


@dataclass
class MixupPlan:
    mu: float
    pairs: list = field(default_factory=list)  # (real index, generated index)
    pair_labels: list = field(default_factory=list)  # (real label, generator label)
    shadow: LabeledDataset | None = None

    @property
    def used_real(self) -> set:
        return {r for r, _ in self.pairs}


def verify_mix_once(plan: MixupPlan) -> bool:
    seen = set()
    for real_idx, _ in plan.pairs:
        if real_idx in seen:
            return False
        seen.add(real_idx)
    return True


def generate_shadow(gen, labels, num_classes: int, seed: int) -> LabeledDataset:
    """The generated set X': one image per requested label."""
    labels = np.asarray(labels, dtype=np.int64)
    if gen.num_classes is not None:
        missing = sorted(set(np.unique(labels).tolist()) - set(range(gen.num_classes)))
        if missing:
            raise MissingClassError(f"generator cannot produce classes {missing}")
    return LabeledDataset(generate(gen, labels, seed=seed), labels, num_classes, provenance="generated")


def mix(real: LabeledDataset, shadow: LabeledDataset, mu: float):
    """Blend aligned real and generated sets; returns ``(mixed, plan)``."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must be in [0, 1], got {mu}")
    if len(real) != len(shadow) or not np.array_equal(real.labels, shadow.labels):
        raise ValueError("real and generated sets must be aligned with identical labels")
    mu32 = np.float32(mu)
    mixed = mu32 * real.images + (np.float32(1.0) - mu32) * shadow.images
    np.clip(mixed, -1.0, 1.0, out=mixed)
    n = len(real)
    plan = MixupPlan(float(mu), [(i, i) for i in range(n)],
                     list(zip(real.labels.tolist(), shadow.labels.tolist())))
    out = LabeledDataset(mixed.astype(np.float32), real.labels.copy(), real.num_classes,
                         provenance="mixed", private=False, name=f"{real.name}+mixed")
    return out, plan


def build_mixed_dataset(real: LabeledDataset, gen, mu: float, seed: int = 0):
    """Returns ``(mixed dataset, plan)``; ``plan.shadow`` keeps the generated set."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must be in [0, 1], got {mu}")
    shadow = generate_shadow(gen, real.labels, real.num_classes, seed)
    mixed, plan = mix(real, shadow, mu)
    plan.shadow = shadow
    return mixed, plan


def export_dataset(ds: LabeledDataset, directory, stem: str = "mixed") -> None:
    """Write ``<stem>_images.npz`` (uint8 pixels) and ``<stem>_labels.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw = np.clip(np.rint((ds.images.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    np.savez_compressed(directory / f"{stem}_images.npz", images=raw)
    with open(directory / f"{stem}_labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label"])
        w.writerows(enumerate(ds.labels.tolist()))
