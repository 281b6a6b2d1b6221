"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Each case runs under both backends (when the extension is built), checks
that the outputs agree and prints the best-of-N wall time.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from voxelstrip import kernels, unet
from voxelstrip import tensor_autodiff as ad
from voxelstrip.trainer import multiscale_loss, reference_pyramid


def _best(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def _cases(quick):
    rng = np.random.default_rng(0)
    n = 32 if quick else 48
    vol = rng.normal(size=(n, n, n)).astype(np.float32)
    x = rng.normal(size=(2, 8, 32, 32, 32)).astype(np.float32)
    w = rng.normal(size=(8, 8, 3, 3, 3)).astype(np.float32)
    g = rng.normal(size=(2, 8, 32, 32, 32)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    M = np.array([[0.8, 0.1, 0.0, 1.3], [0.0, 0.9, 0.05, -0.7], [0.02, 0.0, 1.1, 0.4]])
    blobs = (rng.random((n, n, n)) < 0.3).astype(np.uint8)
    cfg = unet.DESK_NET
    ws = unet.build(cfg, 0)
    patch = rng.normal(size=(2, 1, 32, 32, 32)).astype(np.float32)
    refs = reference_pyramid((rng.random((2, 32, 32, 32)) < 0.5).astype(np.uint8),
                             cfg.head_scales)

    def train_step():
        params = {k: ad.Tensor(v, requires_grad=True) for k, v in ws.items()}
        loss = multiscale_loss(unet.forward(params, cfg, ad.Tensor(patch)), refs)
        ad.backward(loss)
        return np.array([float(loss.data)])

    return {
        "conv3d_forward 2x8x32^3": lambda: kernels.conv3d_forward(xp, w, 1, (32, 32, 32))[0],
        "conv3d_backward 2x8x32^3": lambda: kernels.conv3d_backward(g, xp, w, 1)[1],
        f"trilinear_affine {n}^3": lambda: kernels.trilinear_affine(vol, M, vol.shape),
        f"nearest_affine {n}^3": lambda: kernels.nearest_affine(vol, M, vol.shape),
        f"label26 {n}^3": lambda: kernels.label26(blobs)[0],
        "unet predict 1x48^3": lambda: unet.predict(ws, cfg, np.pad(patch[:1], ((0, 0),) * 2
                                                                   + ((8, 8),) * 3)),
        "unet train step 2x32^3": train_step,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller volumes")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    original = kernels._impl
    rows = []
    try:
        for name, fn in _cases(args.quick).items():
            timings, outputs = {}, {}
            for b in backends:
                kernels._impl = kernels.get_backend(b)
                timings[b], outputs[b] = _best(fn, args.repeat)
            ref = np.asarray(outputs["python"], dtype=np.float64)
            diff = max(float(np.max(np.abs(np.asarray(o, np.float64) - ref)))
                       for o in outputs.values())
            rows.append((name, timings, diff))
    finally:
        kernels._impl = original

    header = f"{'kernel':28s}" + "".join(f"{b + ' ms':>12s}" for b in backends)
    if "cython" in backends:
        header += f"{'speedup':>9s}"
    print(header + f"{'max |diff|':>12s}")
    for name, t, diff in rows:
        line = f"{name:28s}" + "".join(f"{t[b] * 1e3:12.2f}" for b in backends)
        if "cython" in backends:
            line += f"{t['python'] / t['cython']:8.1f}x"
        print(line + f"{diff:12.2e}")


if __name__ == "__main__":
    main()
