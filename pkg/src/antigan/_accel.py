"""Pick the compiled kernels when built, else the numpy fallback.

Set ``ANTIGAN_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

if os.environ.get("ANTIGAN_PURE_PYTHON", "") not in ("", "0"):
    from . import _fallback as backend
else:
    try:
        from . import _kernels as backend
    except ImportError:
        from . import _fallback as backend

BACKEND = backend.NAME


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def window_variances(images, s):
    return backend.window_variances(_f64(images), int(s))


def obf_loss_grad(images, s, v_e):
    return backend.obf_loss_grad(_f64(images), int(s), float(v_e))


def ssim_max(recon, refs, win=7, data_range=2.0):
    return backend.ssim_max(_f64(recon), _f64(refs), int(win), float(data_range))
