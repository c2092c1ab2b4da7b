"""Experiment orchestration: branches of the ablation, sweeps, metrics and run artifacts.

A run directory holds ``config.yaml`` (the snapshot that reproduces it),
``metrics.csv``, ``rounds.csv``, ``run.log`` and PNG grids. Trained
baselines and defender generators are cached in memory per
:class:`Session`, keyed by every config field that affects them, so a
sweep trains each distinct model once.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacker, fedsim, gan, mixup
from .config import BRANCHES, ExperimentConfig, save_config, stage_seed
from .data import LabeledDataset, load_dataset, partition_clients
from .obfuscation import ObfuscationParams, mean_window_variance

log = logging.getLogger(__name__)

# the other knob is pinned while one is swept
SWEEP_FIXED = {"expected_variance": {"mu": 0.6}, "mu": {"expected_variance": 0.7}}
SWEEP_ALIASES = {"v_e": "expected_variance", "ve": "expected_variance", "mu": "mu"}


def compute_adr(a_x: float, a_xhat: float) -> float:
    """Accuracy degradation ratio ``(a_x - a_xhat) / a_x``; lower is better, negative if the defense helps."""
    if a_x == 0:
        raise ZeroDivisionError("baseline accuracy a_x is zero")
    return (a_x - a_xhat) / a_x


@dataclass
class MetricsRecord:
    branch: str
    dataset: str
    expected_variance: float
    mu: float
    lam: float
    seed: int
    a_x: float = float("nan")
    a_xhat: float = float("nan")
    adr: float = float("nan")
    similarity: dict = field(default_factory=dict)
    shadow_window_var: float = float("nan")
    recon_window_var: float = float("nan")
    stages: list = field(default_factory=list)
    status: str = "ok"
    error: str = ""

    def finalize(self):
        self.adr = compute_adr(self.a_x, self.a_xhat)
        return self

    @property
    def mean_similarity(self) -> float:
        return float(np.mean(list(self.similarity.values()))) if self.similarity else float("nan")

    def to_row(self) -> dict:
        row = {
            "branch": self.branch, "dataset": self.dataset, "expected_variance": self.expected_variance,
            "mu": self.mu, "lam": self.lam, "seed": self.seed, "a_x": self.a_x, "a_xhat": self.a_xhat,
            "adr": self.adr, "mean_similarity": self.mean_similarity,
            "shadow_window_var": self.shadow_window_var, "recon_window_var": self.recon_window_var,
            "stages": "+".join(self.stages), "status": self.status, "error": self.error,
        }
        for c, v in sorted(self.similarity.items()):
            row[f"similarity_{c}"] = v
        return row


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    rows = [r.to_row() for r in records]
    fields = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class Session:
    """Loads data once and memoizes baselines and defender generators."""

    def __init__(self):
        self._data = {}
        self._baselines = {}
        self._gans = {}
        self.trained = []  # ("baseline" | "gan", key) in training order

    def datasets(self, cfg: ExperimentConfig):
        key = (cfg.dataset, cfg.data_root, cfg.train_limit, cfg.test_limit, cfg.coarse_labels)
        if key not in self._data:
            train = load_dataset(cfg.dataset, "train", cfg.train_limit, cfg.data_root, cfg.coarse_labels)
            train.private = True
            test = load_dataset(cfg.dataset, "test", cfg.test_limit, cfg.data_root, cfg.coarse_labels)
            self._data[key] = (train, test)
        return self._data[key]

    def baseline(self, cfg: ExperimentConfig):
        key = (cfg.dataset, cfg.data_root, cfg.train_limit, cfg.test_limit, cfg.coarse_labels, cfg.seed,
               tuple(dataclasses.asdict(cfg.federated).items()))
        if key not in self._baselines:
            train, test = self.datasets(cfg)
            self._baselines[key] = train_federated(cfg, train, test, forbid_private=False)
            self.trained.append(("baseline", key))
        return self._baselines[key]

    def defender(self, cfg: ExperimentConfig, lam: float, use_extractor: bool):
        gan_fields = ("dataset", "data_root", "train_limit", "coarse_labels", "seed", "expected_variance",
                      "window_size", "noise_dim", "gan_width", "gan_epochs", "gan_batch_size", "gan_lr",
                      "gan_beta1", "lam_delay_epochs", "lam_warmup_epochs", "extractor_weights", "extractor_sha256")
        key = tuple(getattr(cfg, f) for f in gan_fields) + (lam, use_extractor)
        if key not in self._gans:
            train, _ = self.datasets(cfg)
            params = ObfuscationParams(cfg.expected_variance, cfg.window_size)
            self._gans[key] = gan.train_defender_gan(train, params, lam, cfg.gan_epochs, cfg,
                                                     use_extractor=use_extractor)
            self.trained.append(("gan", key))
        return self._gans[key]


def train_federated(cfg: ExperimentConfig, train: LabeledDataset, test: LabeledDataset, forbid_private: bool):
    """Federated training over an IID split of ``train``; returns ``(test accuracy, round log)``."""
    n = cfg.federated.num_clients
    clients = [train] if n == 1 else partition_clients(train, n, stage_seed(cfg.seed, "partition"))
    for c in clients:
        c.private, c.provenance = train.private, train.provenance
    model, rounds = fedsim.run_federated(cfg.federated, clients, test_data=test, seed=cfg.seed,
                                         forbid_private=forbid_private)
    _, acc = fedsim.evaluate(model, test)
    return acc, rounds


def _setup_run_log(run_dir: Path):
    handler = logging.FileHandler(run_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logging.getLogger("antigan").addHandler(handler)
    logging.getLogger("antigan").setLevel(logging.INFO)
    return handler


def run_branch(config: ExperimentConfig, run_dir=None, session: Session | None = None) -> MetricsRecord:
    """Run one pipeline branch end to end and return its metrics.

    full: defender GAN -> mix-once -> federated training -> attack.
    no_obf drops the obfuscation term, no_extractor lets the discriminator see
    pixels, no_mixup trains and attacks on the generated set directly, and
    no_defense trains and attacks on the real data. Accuracy is always
    measured on the real test split.
    """
    config.validate()
    session = session or Session()
    branch = config.branch
    lam = 0.0 if branch == "no_obf" else config.lambda_obf
    rec = MetricsRecord(branch, config.dataset, config.expected_variance, config.mu, lam, config.seed)
    handler = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(config, run_dir / "config.yaml")
        handler = _setup_run_log(run_dir)
    try:
        train, test = session.datasets(config)
        rec.a_x, base_rounds = session.baseline(config)
        rec.stages.append("baseline")
        if branch == "no_defense":
            released, rounds = train, base_rounds
            rec.a_xhat = rec.a_x
        else:
            defender = session.defender(config, lam, use_extractor=branch != "no_extractor")
            rec.stages.append("gan")
            shadow = mixup.generate_shadow(defender.generator, train.labels, train.num_classes,
                                           stage_seed(config.seed, "shadow"))
            rec.shadow_window_var = mean_window_variance(shadow.images, config.window_size)
            if branch == "no_mixup":
                released = shadow
            else:
                released, plan = mixup.mix(train, shadow, config.mu)
                rec.stages.append("mixup")
                if not mixup.verify_mix_once(plan):
                    raise RuntimeError("mixup plan reuses a real image")
            rec.a_xhat, rounds = train_federated(config, released, test, forbid_private=True)
            rec.stages.append("fedsim")
            if run_dir is not None:
                _export_samples(run_dir, train, shadow, released if branch != "no_mixup" else None)
        rec.finalize()

        result = attacker.run_blackbox_attack(released, config.attack_classes, config.attack_epochs, config,
                                              allow_private=branch == "no_defense")
        attacker.score_attack(result, train)
        rec.stages.append("attack")
        rec.similarity = dict(result.similarity)
        rec.recon_window_var = float(np.mean([mean_window_variance(result.reconstructions[c], config.window_size)
                                              for c in result.classes]))
        if run_dir is not None:
            fedsim.write_round_log(rounds, run_dir / "rounds.csv")
            attacker.export_grids(result, run_dir / "grids", config.attack_epochs)
        log.info("branch %s: a_x=%.4f a_xhat=%.4f adr=%.4f similarity=%.4f", branch, rec.a_x, rec.a_xhat,
                 rec.adr, rec.mean_similarity)
    except Exception as exc:
        rec.status = "failed"
        rec.error = f"{type(exc).__name__}: {exc}"
        log.error("branch %s failed:\n%s", branch, traceback.format_exc())
        if run_dir is None:
            raise
    finally:
        if run_dir is not None:
            write_metrics_csv([rec], run_dir / "metrics.csv")
        if handler is not None:
            logging.getLogger("antigan").removeHandler(handler)
            handler.close()
    return rec


def _export_samples(run_dir: Path, real, shadow, mixed, per_class: int = 1):
    idx = [int(np.flatnonzero(real.labels == c)[0]) for c in real.classes_present()]
    rows = [real.images[idx], shadow.images[idx]]
    if mixed is not None:
        rows.append(mixed.images[idx])
    attacker.image_grid(np.concatenate(rows), ncol=len(idx)).save(run_dir / "samples_x_xprime_xhat.png")


def run_ablation(base: ExperimentConfig, run_dir, branches=BRANCHES, session: Session | None = None):
    session = session or Session()
    run_dir = Path(run_dir)
    records = []
    for b in branches:
        records.append(run_branch(base.replace(branch=b), run_dir / b, session))
    write_metrics_csv(records, run_dir / "metrics.csv")
    save_config(base, run_dir / "config.yaml")
    return records


def run_sweep(base: ExperimentConfig, parameter: str, values, run_dir=None, fixed: dict | None = None,
              session: Session | None = None) -> list[MetricsRecord]:
    """One ``run_branch`` per value of ``parameter`` ("v_e" or "mu"), everything else fixed.

    The complementary knob is pinned (mu = 0.6 for a v_e sweep, v_e = 0.7 for
    a mu sweep) unless ``fixed`` overrides it. Failed points are recorded and
    the sweep continues.
    """
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if parameter not in SWEEP_ALIASES:
        raise ValueError(f"can only sweep over {sorted(SWEEP_ALIASES)}, got {parameter!r}")
    name = SWEEP_ALIASES[parameter]
    pinned = dict(SWEEP_FIXED[name]) if fixed is None else dict(fixed)
    session = session or Session()
    records = []
    for v in values:
        cfg = base.replace(**pinned, **{name: float(v)})
        point_dir = None if run_dir is None else Path(run_dir) / f"{name}_{v}"
        try:
            records.append(run_branch(cfg, point_dir, session))
        except Exception as exc:
            log.error("sweep point %s=%s failed: %s", name, v, exc)
            rec = MetricsRecord(cfg.branch, cfg.dataset, cfg.expected_variance, cfg.mu, cfg.lambda_obf, cfg.seed,
                                status="failed", error=f"{type(exc).__name__}: {exc}")
            records.append(rec)
    if run_dir is not None:
        write_metrics_csv(records, Path(run_dir) / "metrics.csv")
        save_config(base, Path(run_dir) / "config.yaml")
    return records


def is_finite(x) -> bool:
    return isinstance(x, float) and math.isfinite(x)
