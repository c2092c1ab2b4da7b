"""In-process FedAvg simulation.

Each round the server samples a fraction of clients, broadcasts the global
weights, every selected client trains locally and uploads its parameter
delta (optionally only the largest-magnitude fraction of entries), and the
server applies the n_k-weighted average of the uploaded deltas.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from .config import FederatedConfig, stage_seed
from .data import LabeledDataset
from .gan import DivergenceError
from .nets import Classifier

log = logging.getLogger(__name__)


class PrivacyViolation(RuntimeError):
    """A dataset tagged private reached a stage that must only see released data."""


@dataclass
class GradientUpdate:
    values: np.ndarray  # flattened parameter delta
    mask: np.ndarray  # True where the entry is uploaded
    client_id: int = 0
    round_index: int = 0
    num_samples: int = 0
    loss: float = float("nan")
    accuracy: float = float("nan")

    @property
    def uploaded(self) -> np.ndarray:
        return np.where(self.mask, self.values, 0.0)


def build_classifier(config: FederatedConfig, channels: int, num_classes: int, seed: int) -> nn.Module:
    torch.manual_seed(stage_seed(seed, "classifier") % 2**31)
    return Classifier(channels, num_classes)


def top_fraction_mask(values: np.ndarray, fraction: float) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise ValueError("upload fraction must be in (0, 1]")
    mask = np.zeros(values.shape, dtype=bool)
    if fraction >= 1:
        mask[:] = True
        return mask
    k = max(1, int(round(fraction * values.size)))
    order = np.argsort(-np.abs(values), kind="stable")
    mask[order[:k]] = True
    return mask


def evaluate(model: nn.Module, data: LabeledDataset, batch_size: int = 512) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy of ``model`` on ``data``."""
    if len(data) == 0:
        return float("nan"), float("nan")
    was_training = model.training
    model.eval()
    total_loss, correct = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            x = torch.from_numpy(data.images[start:start + batch_size])
            y = torch.from_numpy(data.labels[start:start + batch_size])
            out = model(x)
            total_loss += F.cross_entropy(out, y, reduction="sum").item()
            correct += (out.argmax(1) == y).sum().item()
    model.train(was_training)
    return total_loss / len(data), correct / len(data)


def make_optimizer(name: str, params, lr: float):
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def local_train(model: nn.Module, data: LabeledDataset, epochs: int, lr: float, batch_size: int = 32,
                optimizer: str = "adam", seed: int = 0, upload_fraction: float = 1.0,
                client_id: int = 0, round_index: int = 0):
    """Train ``model`` in place on cross-entropy; returns ``(model, GradientUpdate)``.

    The update carries the cumulative parameter delta. A fresh optimizer is
    built for every call, so clients keep no state between rounds.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    start_vec = parameters_to_vector(model.parameters()).detach().clone()
    opt = make_optimizer(optimizer, model.parameters(), lr)
    rng = np.random.default_rng(seed)
    x_all = torch.from_numpy(data.images)
    y_all = torch.from_numpy(data.labels)
    model.train()
    loss_sum, correct, seen = float("nan"), 0, 0
    for epoch in range(epochs):
        perm = rng.permutation(len(data))
        loss_sum, correct, seen = 0.0, 0, 0
        for start in range(0, len(perm), batch_size):
            idx = torch.from_numpy(perm[start:start + batch_size])
            x, y = x_all[idx], y_all[idx]
            out = model(x)
            loss = F.cross_entropy(out, y)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"client {client_id} loss became non-finite in round {round_index}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += (out.argmax(1) == y).sum().item()
            seen += len(idx)
    # in float64 so that start + delta reproduces the trained float32 weights exactly
    delta = (parameters_to_vector(model.parameters()).detach().double() - start_vec.double()).numpy()
    update = GradientUpdate(
        values=delta,
        mask=top_fraction_mask(delta, upload_fraction),
        client_id=client_id,
        round_index=round_index,
        num_samples=len(data),
        loss=loss_sum / seen if seen else float("nan"),
        accuracy=correct / seen if seen else float("nan"),
    )
    return model, update


def aggregate(updates: list[GradientUpdate], weights) -> np.ndarray:
    """n_k-weighted average of the uploaded entries, renormalized per coordinate.

    A coordinate nobody uploaded aggregates to zero.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    dim = updates[0].values.shape
    for u in updates:
        if u.values.shape != dim or u.mask.shape != dim:
            raise ValueError(f"update dimension mismatch: {u.values.shape} vs {dim}")
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(updates) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("need one non-negative weight per update with a positive total")
    w = w / w.sum()
    assert abs(w.sum() - 1.0) < 1e-12
    num = np.zeros(dim, dtype=np.float64)
    den = np.zeros(dim, dtype=np.float64)
    for wk, u in zip(w, updates):
        num += wk * np.where(u.mask, u.values, 0.0)
        den += wk * u.mask
    return np.divide(num, den, out=np.zeros(dim, dtype=np.float64), where=den > 0)


def run_federated(config: FederatedConfig, clients: list[LabeledDataset],
                  observer: Callable[[GradientUpdate], None] | None = None,
                  test_data: LabeledDataset | None = None, seed: int = 0,
                  forbid_private: bool = False, model: nn.Module | None = None):
    """Run the round loop; returns ``(global model, round log)``.

    The round log has one row per (round, selected client) with the client's
    last-epoch training loss and accuracy, plus a ``client="global"`` row
    per round with the test metrics when ``test_data`` is given.
    ``observer`` sees every uploaded update, the vantage point of an
    eavesdropping participant.
    """
    if not clients:
        raise ValueError("need at least one client")
    config.validate()
    if forbid_private:
        for k, c in enumerate(clients):
            if c.private:
                raise PrivacyViolation(f"client {k} was handed private data ({c.provenance}) in a defended run")
    ref = clients[0]
    if model is None:
        model = build_classifier(config, ref.channels, ref.num_classes, seed)
    select_rng = np.random.default_rng(stage_seed(seed, "select"))
    n_select = max(1, int(round(config.client_fraction * len(clients))))
    round_log = []
    for r in range(config.rounds):
        chosen = np.sort(select_rng.choice(len(clients), size=n_select, replace=False))
        global_state = {k: v.clone() for k, v in model.state_dict().items()}
        global_vec = parameters_to_vector(model.parameters()).detach().clone()
        updates = []
        for k in chosen:
            model.load_state_dict(global_state)
            _, update = local_train(model, clients[k], config.local_epochs, config.lr, config.batch_size,
                                    config.optimizer, seed=stage_seed(seed, "local", r, int(k)),
                                    upload_fraction=config.upload_fraction, client_id=int(k), round_index=r)
            updates.append(update)
            if observer is not None:
                observer(update)
            round_log.append({"round": r, "client": int(k), "loss": update.loss, "accuracy": update.accuracy})
        weights = [u.num_samples for u in updates]
        delta = aggregate(updates, weights)
        model.load_state_dict(global_state)
        new_vec = (global_vec.double() + torch.from_numpy(delta)).to(global_vec.dtype)
        vector_to_parameters(new_vec, model.parameters())
        if test_data is not None:
            loss, acc = evaluate(model, test_data)
            round_log.append({"round": r, "client": "global", "loss": loss, "accuracy": acc})
            log.info("round %d: test loss %.4f acc %.4f", r, loss, acc)
    return model, round_log


def write_round_log(rows: list[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["round", "client", "loss", "accuracy"])
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
