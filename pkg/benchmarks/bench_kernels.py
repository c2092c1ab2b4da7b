"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from antigan import _fallback

try:
    from antigan import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    batch = rng.uniform(-1, 1, (256, 1, 32, 32))
    rgb = rng.uniform(-1, 1, (64, 3, 32, 32))
    recon = rng.uniform(-1, 1, (16, 1, 32, 32))
    refs = rng.uniform(-1, 1, (400, 1, 32, 32))
    return [
        ("window_variances 256x1x32x32", lambda m: m.window_variances(batch, 5)),
        ("obf_loss_grad 256x1x32x32", lambda m: m.obf_loss_grad(batch, 5, 0.4)),
        ("obf_loss_grad 64x3x32x32", lambda m: m.obf_loss_grad(rgb, 5, 0.4)),
        ("ssim_max 16 vs 400", lambda m: m.ssim_max(recon, refs, 7, 2.0)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = [_fallback] + ([_kernels] if _kernels is not None else [])
    if _kernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'kernel':<32}" + "".join(f"{b.NAME:>12}" for b in backends) + ("  speedup" if len(backends) > 1 else ""))
    for name, fn in cases(np.random.default_rng(0)):
        times = []
        for b in backends:
            fn(b)  # warm up
            times.append(min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)))
        line = f"{name:<32}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) > 1:
            line += f"  {times[0] / times[1]:>6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
