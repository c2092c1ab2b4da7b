"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np

NAME = "numpy"


def _pad_to_grid(images, s):
    n, c, h, w = images.shape
    nh, nw = -(-h // s), -(-w // s)
    padded = np.zeros((n, c, nh * s, nw * s), dtype=np.float64)
    padded[:, :, :h, :w] = images
    mask = np.zeros((nh * s, nw * s), dtype=np.float64)
    mask[:h, :w] = 1.0
    return padded, mask, nh, nw


def _blocks(arr, nh, nw, s):
    # (..., nh*s, nw*s) -> (..., nh, nw, s, s)
    lead = arr.shape[:-2]
    return arr.reshape(*lead, nh, s, nw, s).swapaxes(-3, -2)


def _window_moments(images, s):
    images = np.asarray(images, dtype=np.float64)
    padded, mask, nh, nw = _pad_to_grid(images, s)
    count = _blocks(mask, nh, nw, s).sum(axis=(-2, -1)) * images.shape[1]
    sums = _blocks(padded, nh, nw, s).sum(axis=(1, -2, -1))
    mean = sums / count
    centered = (_blocks(padded, nh, nw, s) - mean[:, None, :, :, None, None]) * _blocks(mask, nh, nw, s)
    var = (centered ** 2).sum(axis=(1, -2, -1)) / count
    return var, mean, count, centered


def window_variances(images, s):
    var, _, _, _ = _window_moments(images, s)
    return var


def obf_loss_grad(images, s, v_e):
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    var, _, count, centered = _window_moments(images, s)
    dev = var - v_e
    loss = (dev ** 2).sum(axis=(1, 2))
    coef = 4.0 * dev / count
    grad_blocks = centered * coef[:, None, :, :, None, None]
    nh, nw = var.shape[1:]
    grad = grad_blocks.swapaxes(-3, -2).reshape(n, c, nh * s, nw * s)[:, :, :h, :w]
    return loss, np.ascontiguousarray(grad)


def _box_mean(x, win):
    # mean over every valid win x win window of the last two axes
    integ = np.zeros(x.shape[:-2] + (x.shape[-2] + 1, x.shape[-1] + 1))
    integ[..., 1:, 1:] = x.cumsum(-2).cumsum(-1)
    total = (integ[..., win:, win:] - integ[..., :-win, win:]
             - integ[..., win:, :-win] + integ[..., :-win, :-win])
    return total / (win * win)


def ssim_max(recon, refs, win, data_range, chunk=64):
    recon = np.asarray(recon, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_r = _box_mean(recon, win)
    var_r = _box_mean(recon ** 2, win) - mu_r ** 2
    mu_f = _box_mean(refs, win)
    var_f = _box_mean(refs ** 2, win) - mu_f ** 2
    best = np.full(len(recon), -np.inf)
    arg = np.zeros(len(recon), dtype=np.int64)
    for start in range(0, len(refs), chunk):
        sl = slice(start, start + chunk)
        # (R, P, C, oh, ow)
        exy = _box_mean(recon[:, None] * refs[None, sl], win)
        mx, my = mu_r[:, None], mu_f[None, sl]
        cov = exy - mx * my
        q = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (var_r[:, None] + var_f[None, sl] + c2))
        scores = q.mean(axis=(2, 3, 4))
        idx = scores.argmax(axis=1)
        top = scores[np.arange(len(recon)), idx]
        better = top > best
        best[better] = top[better]
        arg[better] = idx[better] + start
    return best, arg
