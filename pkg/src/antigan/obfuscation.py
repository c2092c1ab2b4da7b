"""Window-variance obfuscation loss and a pixel-space optimizer for it.

An image is cut into non-overlapping ``s x s`` windows (edge windows are
truncated when ``s`` does not divide the image size). Each window's pixel
variance, taken jointly over channels with the population normalization,
is pulled toward an expected variance ``v_e``::

    L_obf(x) = sum_i (Var(w_i(x)) - v_e) ** 2
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import _accel


@dataclass(frozen=True)
class ObfuscationParams:
    expected_variance: float = 0.5
    window_size: int = 5

    def __post_init__(self):
        if self.expected_variance < 0:
            raise ValueError("expected_variance must be non-negative")
        if self.window_size < 1:
            raise ValueError("window_size must be at least 1")


@dataclass(frozen=True)
class WindowGrid:
    height: int
    width: int
    window_size: int
    windows: tuple  # ((row_start, row_stop), (col_start, col_stop)) per window, row-major

    def __len__(self):
        return len(self.windows)

    @property
    def shape(self):
        return math.ceil(self.height / self.window_size), math.ceil(self.width / self.window_size)


def make_grid(height: int, width: int, s: int) -> WindowGrid:
    if s < 1 or s > min(height, width):
        raise ValueError(f"window size {s} must be in [1, {min(height, width)}]")
    rows = [(r, min(r + s, height)) for r in range(0, height, s)]
    cols = [(c, min(c + s, width)) for c in range(0, width, s)]
    return WindowGrid(height, width, s, tuple((r, c) for r in rows for c in cols))


def window_variance(image: np.ndarray, window) -> float:
    (r0, r1), (c0, c1) = window
    if image.ndim == 2:
        image = image[None]
    if r0 < 0 or c0 < 0 or r1 > image.shape[-2] or c1 > image.shape[-1]:
        raise ValueError(f"window {window} lies outside an image of shape {image.shape}")
    return float(np.var(np.asarray(image[:, r0:r1, c0:c1], dtype=np.float64)))


def window_variances(images: np.ndarray, s: int) -> np.ndarray:
    """Per-window variances for a batch: (N, C, H, W) -> (N, ceil(H/s), ceil(W/s))."""
    return _accel.window_variances(images, s)


def mean_window_variance(images: np.ndarray, s: int = 5) -> float:
    return float(window_variances(images, s).mean())


def l_obf(image: np.ndarray, params: ObfuscationParams):
    """Loss and its analytic gradient for a single (C, H, W) image."""
    image = np.asarray(image)
    squeeze = image.ndim == 2
    batch = image[None, None] if squeeze else image[None]
    loss, grad = _accel.obf_loss_grad(batch, params.window_size, params.expected_variance)
    grad = grad[0, 0] if squeeze else grad[0]
    return float(loss[0]), grad


def l_obf_batch(images: np.ndarray, params: ObfuscationParams):
    """Per-image losses and gradients for an (N, C, H, W) batch."""
    return _accel.obf_loss_grad(images, params.window_size, params.expected_variance)


def l_obf_torch(images: torch.Tensor, params: ObfuscationParams) -> torch.Tensor:
    """Differentiable loss for an (N, C, H, W) tensor, summed over windows and averaged over the batch."""
    s = params.window_size
    # with padding 0 and ceil_mode, truncated edge windows are divided by their true size
    mean = F.avg_pool2d(images, s, s, ceil_mode=True).mean(dim=1)
    mean_sq = F.avg_pool2d(images * images, s, s, ceil_mode=True).mean(dim=1)
    var = mean_sq - mean * mean
    return ((var - params.expected_variance) ** 2).sum(dim=(1, 2)).mean()


@dataclass
class ObfuscationResult:
    image: np.ndarray
    loss: float
    steps: int
    converged: bool
    history: list = field(default_factory=list)


def _expand(per_window: np.ndarray, s: int, shape) -> np.ndarray:
    h, w = shape[-2:]
    return np.repeat(np.repeat(per_window, s, -2), s, -1)[..., :h, :w]


def obfuscate_pixels(image: np.ndarray, params: ObfuscationParams, step_size: float = 1.0,
                     max_steps: int = 3000, tol: float = 1e-6, init_noise: float = 1.0,
                     seed: int = 0) -> ObfuscationResult:
    """Gradient descent on the pixels of one image, clamped to [-1, 1].

    The loss is a sum of independent per-window terms, so every window keeps
    its own step size: a step that would raise a window's term is rejected
    for that window and its step halved, an accepted one grows it by 20%.
    The total loss is therefore non-increasing across steps.

    Clamping makes flat or saturated windows stationary (every pixel at the
    mean or pinned at a bound), so windows off target first receive seeded
    uniform noise of half-width ``init_noise``.
    """
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    dtype = np.asarray(image).dtype
    x = np.array(image, dtype=np.float64)
    squeeze = x.ndim == 2
    x = x[None, None] if squeeze else x[None]
    s, v_e = params.window_size, params.expected_variance

    def terms(img):
        return (window_variances(img, s)[0] - v_e) ** 2

    term = terms(x)
    if term.sum() < tol:
        out = x[0, 0] if squeeze else x[0]
        return ObfuscationResult(out.astype(dtype), float(term.sum()), 0, True, [float(term.sum())])

    if init_noise > 0:
        off = _expand(term > tol / term.size, s, x.shape)
        noise = np.random.default_rng(seed).uniform(-init_noise, init_noise, size=x.shape)
        x = np.where(off, np.clip(x + noise, -1.0, 1.0), x)
        term = terms(x)

    lr = np.full(term.shape, float(step_size))
    history = [float(term.sum())]
    steps = 0
    while steps < max_steps and history[-1] >= tol:
        _, grad = _accel.obf_loss_grad(x, s, v_e)
        candidate = np.clip(x - _expand(lr, s, x.shape) * grad, -1.0, 1.0)
        new_term = terms(candidate)
        ok = new_term <= term
        x = np.where(_expand(ok, s, x.shape), candidate, x)
        term = np.where(ok, new_term, term)
        lr = np.where(ok, lr * 1.2, lr * 0.5)
        steps += 1
        history.append(float(term.sum()))
    out = x[0, 0] if squeeze else x[0]
    return ObfuscationResult(out.astype(np.float32), history[-1], steps, history[-1] < tol, history)
