"""Experiment configuration records and their (de)serialization."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

BRANCHES = ("full", "no_obf", "no_extractor", "no_mixup", "no_defense")
# lambda defaults: 1000 for MNIST, 100 for CIFAR
DEFAULT_LAMBDA = {"mnist": 1000.0, "cifar10": 100.0, "cifar100": 100.0}


class ConfigError(ValueError):
    pass


@dataclass
class FederatedConfig:
    num_clients: int = 4
    rounds: int = 20
    local_epochs: int = 1
    client_fraction: float = 1.0
    upload_fraction: float = 1.0
    classifier: str = "cnn4"
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32

    def validate(self):
        for name in ("client_fraction", "upload_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.num_clients < 1 or self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("num_clients must be >= 1; rounds and local_epochs >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.classifier != "cnn4":
            raise ConfigError(f"unknown classifier {self.classifier!r}")


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_root: str | None = None
    train_limit: int | None = 10000
    test_limit: int | None = 2000
    coarse_labels: bool = False
    branch: str = "full"
    seed: int = 0

    # obfuscation / defender GAN
    expected_variance: float = 0.4
    window_size: int = 5
    lam: float | None = None
    mu: float = 0.5
    noise_dim: int = 64
    gan_width: int = 32
    gan_epochs: int = 15
    gan_batch_size: int = 64
    gan_lr: float = 1e-4
    gan_beta1: float = 0.5
    lam_delay_epochs: int = 6
    lam_warmup_epochs: int = 2
    extractor_weights: str | None = None
    extractor_sha256: str | None = None

    # attacker
    attack_classes: list | None = None
    attack_mode: str = "per_class"
    attack_epochs: int = 60
    attack_batch_size: int = 64
    attack_lr: float = 1e-4
    attack_samples: int = 16
    attack_width: int = 64
    attack_grid_every: int = 0

    federated: FederatedConfig = field(default_factory=FederatedConfig)

    def __post_init__(self):
        if isinstance(self.federated, dict):
            self.federated = FederatedConfig(**self.federated)

    @property
    def lambda_obf(self) -> float:
        if self.lam is not None:
            return float(self.lam)
        return DEFAULT_LAMBDA[self.dataset]

    def validate(self) -> "ExperimentConfig":
        if self.branch not in BRANCHES:
            raise ConfigError(f"branch must be one of {BRANCHES}, got {self.branch!r}")
        if self.dataset not in DEFAULT_LAMBDA:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.expected_variance < 0:
            raise ConfigError("expected_variance must be >= 0")
        if not 0 <= self.mu <= 1:
            raise ConfigError("mu must be in [0, 1]")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.lam_delay_epochs < 0 or self.lam_warmup_epochs < 0:
            raise ConfigError("lam_delay_epochs and lam_warmup_epochs must be >= 0")
        if self.attack_mode not in ("per_class", "conditional"):
            raise ConfigError(f"unknown attack_mode {self.attack_mode!r}")
        self.federated.validate()
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        fed = changes.pop("federated", None)
        new = dataclasses.replace(self, **changes)
        new.federated = dataclasses.replace(self.federated, **(fed or {}))
        return new

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        fed = d.pop("federated", None) or {}
        fed_known = {f.name for f in dataclasses.fields(FederatedConfig)}
        if set(fed) - fed_known:
            raise ConfigError(f"unknown federated fields: {sorted(set(fed) - fed_known)}")
        return cls(**d, federated=FederatedConfig(**fed)).validate()

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return ExperimentConfig.from_dict(data or {})


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def stage_seed(seed: int, *names) -> int:
    """Stable 63-bit seed for a named pipeline stage."""
    key = ":".join([str(seed), *map(str, names)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1
