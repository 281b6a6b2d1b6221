"""Central finite-difference checks of every differentiable operator, in float64."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_autodiff as ad
from . import unet
from .trainer import multiscale_loss, one_hot, reference_pyramid, soft_dice_loss

EPS = 1e-6


def rel_error(analytic, numeric, atol=1e-8):
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)))


def _coords(shape, limit, rng):
    size = int(np.prod(shape))
    flat = np.arange(size) if size <= limit else rng.choice(size, limit, replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def check(fn, arrays, limit=64, seed=0, eps=EPS):
    """Compare autodiff gradients of scalar ``fn(*tensors)`` with central differences.

    Up to ``limit`` entries per input are perturbed. Returns the max relative error.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(fn(*tensors))
    worst = 0.0
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        coords = _coords(t.shape, limit, rng)
        numeric = np.empty(len(coords))
        for n, idx in enumerate(coords):
            orig = t.data[idx]
            t.data[idx] = orig + eps
            up = float(fn(*tensors).data)
            t.data[idx] = orig - eps
            down = float(fn(*tensors).data)
            t.data[idx] = orig
            numeric[n] = (up - down) / (2 * eps)
        analytic = np.array([grad[idx] for idx in coords])
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _weighted_sum(y, r):
    return ad.sum(ad.mul(y, ad.Tensor(r)))


@dataclass(frozen=True)
class GradResult:
    op: str
    max_rel_err: float


def suite(seed: int = 0):
    """Run all checks; returns a list of GradResult."""
    rng = np.random.default_rng(seed)
    res = []

    def add(name, fn, arrays, limit=64):
        res.append(GradResult(name, check(fn, arrays, limit, seed)))

    x = rng.normal(size=(2, 3, 5, 6, 4))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    b = rng.normal(size=4)
    r = rng.normal(size=(2, 4, 5, 6, 4))
    add("conv3d", lambda x, w, b: _weighted_sum(ad.conv3d(x, w, b, padding=1), r), [x, w, b])
    r2 = rng.normal(size=(2, 4, 3, 3, 2))
    add("conv3d_stride2", lambda x, w, b: _weighted_sum(ad.conv3d(x, w, b, 2, 1), r2), [x, w, b])
    xl = rng.normal(size=(1, 2, 3, 24, 24))
    wl = rng.normal(size=(2, 2, 3, 3, 3))
    rl = rng.normal(size=(1, 2, 3, 24, 24))
    add("conv3d_large_plane", lambda x, w: _weighted_sum(ad.conv3d(x, w, padding=1), rl), [xl, wl])
    w1 = rng.normal(size=(3, 3, 1, 1, 1))
    r1 = rng.normal(size=(2, 3, 5, 6, 4))
    add("conv3d_1x1", lambda x, w: _weighted_sum(ad.conv3d(x, w), r1), [x, w1])

    g = rng.uniform(0.5, 1.5, size=3)
    be = rng.normal(size=3)
    rn = rng.normal(size=x.shape)
    add("instance_norm", lambda x, g, be: _weighted_sum(ad.instance_norm(x, g, be), rn), [x, g, be])

    xr = rng.uniform(0.05, 1.0, size=(2, 3, 4, 4, 4)) * rng.choice([-1, 1], size=(2, 3, 4, 4, 4))
    rr = rng.normal(size=xr.shape)
    add("leaky_relu", lambda x: _weighted_sum(ad.leaky_relu(x, 0.01), rr), [xr])

    xu = rng.normal(size=(1, 2, 3, 4, 2))
    ru = rng.normal(size=(1, 2, 6, 8, 4))
    add("upsample_trilinear", lambda x: _weighted_sum(ad.upsample_trilinear(x), ru), [xu])

    xs = rng.normal(size=(2, 2, 3, 3, 3))
    rs = rng.normal(size=xs.shape)
    add("softmax", lambda x: _weighted_sum(ad.softmax_channels(x), rs), [xs])

    logits = rng.normal(size=(2, 2, 2, 2, 2))
    ref = one_hot(rng.integers(0, 2, size=(2, 2, 2, 2)), np.float64)
    add("soft_dice_loss", lambda z: soft_dice_loss(ad.softmax_channels(z), ref), [logits])

    res.append(GradResult("network_depth2", check_network(seed)))
    return res


def check_network(seed: int = 0, per_tensor: int = 6) -> float:
    """Multiscale loss of a depth-2, width-4 net on an 8^3 input versus every parameter tensor."""
    cfg = unet.NetConfig(depth=2, base_width=4)
    rng = np.random.default_rng(seed)
    ws = unet.build(cfg, seed).astype(np.float64)
    # perturb the norm affine parameters away from their 1/0 initial values
    for k in ws:
        if not k.endswith(".w"):
            ws[k] = ws[k] + rng.normal(scale=0.1, size=ws[k].shape)
    x = ad.Tensor(rng.normal(size=(1, 1, 8, 8, 8)))
    refs = reference_pyramid(rng.integers(0, 2, size=(1, 8, 8, 8)), cfg.head_scales, np.float64)
    names = list(ws)

    def fn(*params):
        heads = unet.forward(dict(zip(names, params)), cfg, x)
        return multiscale_loss(heads, refs)
    return check(fn, list(ws.values()), per_tensor, seed)
