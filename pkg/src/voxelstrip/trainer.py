"""Losses, optimizer, schedule, patch sampling and the training loop."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor_autodiff as ad
from . import unet
from .augment import AugmentConfig, augment_pipeline, sample_seed
from .errors import ConfigError, ShapeMismatch, TooFewCases
from .resample_norm import GridSpec, NETWORK_SPACING, resample, resample_mask, zscore
from .volume_io import BrainMask, Volume, reorient_ras

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    alpha0: float = 1e-4
    decay: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 2
    epochs: int = 200
    batches_per_epoch: int = 200
    patch: tuple = (128, 128, 128)
    loss_weights: tuple = (0.25, 0.5, 1.0)  # (1/4, 1/2, full resolution)
    seed: int = 0
    folds: int = 5

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError(f"decay must be in (0, 1], got {self.decay}")
        if self.batch_size < 1 or self.epochs < 0 or self.batches_per_epoch < 1:
            raise ConfigError("batch_size and batches_per_epoch must be >= 1, epochs >= 0")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ConfigError(f"patch must be three positive ints, got {self.patch}")
        if self.alpha0 <= 0:
            raise ConfigError("alpha0 must be positive")

    def check_net(self, net: unet.NetConfig) -> None:
        if any(p % net.divisor for p in self.patch):
            raise ConfigError(f"patch {self.patch} not divisible by {net.divisor}")


# Desk-scale profile. alpha0 is raised from the default 1e-4 because 1000
# steps at 1e-4 do not converge on the phantom set.
DESK_TRAIN = TrainConfig(epochs=20, batches_per_epoch=50, patch=(32, 32, 32), alpha0=1e-3)


# --------------------------------------------------------------------------- losses

def one_hot(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(N, D, H, W) label array -> (N, 2, D, H, W); value 1 is brain, anything else background."""
    brain = (np.asarray(mask) == 1).astype(dtype)
    return np.stack([1 - brain, brain], axis=1)


def downsample_reference(ref: np.ndarray, factor: int) -> np.ndarray:
    """Strided nearest-neighbour downsampling of a (N, K, D, H, W) reference."""
    if factor == 1:
        return ref
    return np.ascontiguousarray(ref[:, :, ::factor, ::factor, ::factor])


def soft_dice_loss(u: ad.Tensor, v) -> ad.Tensor:
    """Negative soft dice, summed over classes with factor 2/K and averaged over the batch.

    A class with an empty denominator (possible only for hard 0/1 inputs)
    contributes 0.
    """
    vd = v.data if isinstance(v, ad.Tensor) else np.asarray(v)
    if u.shape != vd.shape:
        raise ShapeMismatch(f"soft_dice_loss: {u.shape} vs {vd.shape}")
    N, K = u.shape[:2]
    axes = tuple(range(2, u.data.ndim))
    ud = u.data.astype(np.float64)
    vd64 = vd.astype(np.float64)
    inter = (ud * vd64).sum(axis=axes)
    denom = ud.sum(axis=axes) + vd64.sum(axis=axes)
    safe = np.where(denom > 0, denom, 1.0)
    ratio = np.where(denom > 0, inter / safe, 0.0)
    loss = -(2.0 / K) * ratio.sum() / N

    def bw(g):
        c = float(g) * -(2.0 / K) / N
        bshape = (N, K) + (1,) * len(axes)
        num = vd64 * safe.reshape(bshape) - inter.reshape(bshape)
        gu = c * num / (safe ** 2).reshape(bshape)
        gu = np.where((denom > 0).reshape(bshape), gu, 0.0)
        return (gu.astype(u.dtype),)
    return ad._result(np.asarray(loss, dtype=u.dtype), (u,), bw, "soft_dice")


def multiscale_loss(heads, refs, weights=(0.25, 0.5, 1.0)) -> ad.Tensor:
    """Weighted deep-supervision loss.

    ``heads`` and ``refs`` run full resolution first; ``weights`` run coarsest
    first, matching the usual (1/4, 1/2, 1) notation. With fewer heads than
    weights the finest weights are used.
    """
    if len(heads) != len(refs):
        raise ShapeMismatch(f"{len(heads)} heads but {len(refs)} references")
    if len(heads) > len(weights):
        raise ShapeMismatch(f"{len(heads)} heads but only {len(weights)} weights")
    w_fine_first = list(weights)[::-1]
    total = None
    for head, ref, w in zip(heads, refs, w_fine_first):
        term = ad.scale(soft_dice_loss(head, ref), w)
        total = term if total is None else ad.add(total, term)
    return total


def reference_pyramid(mask_batch: np.ndarray, scales, dtype=np.float32):
    ref = one_hot(mask_batch, dtype)
    return [downsample_reference(ref, s) for s in scales]


# --------------------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, weights):
        return cls({k: np.zeros(a.shape) for k, a in weights.items()},
                   {k: np.zeros(a.shape) for k, a in weights.items()}, 0)


def adam_step(weights, grads, state: AdamState, lr: float, cfg: TrainConfig = TrainConfig()):
    """One bias-corrected Adam update. Pure: returns ``(new_weights, new_state)``.

    Moments are kept in float64; weights keep their dtype. A missing gradient
    counts as zero.
    """
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_w, new_m, new_v = type(weights)(), {}, {}
    for name, w in weights.items():
        g = grads.get(name)
        m = state.m.get(name, np.zeros(w.shape))
        v = state.v.get(name, np.zeros(w.shape))
        if g is None:
            g = np.zeros(w.shape)
        if g.shape != w.shape or m.shape != w.shape:
            raise ShapeMismatch(f"adam_step: {name} grad {g.shape} vs weight {w.shape}")
        g = g.astype(np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new_w[name] = (w.astype(np.float64) - step).astype(w.dtype)
        new_m[name], new_v[name] = m, v
    return new_w, AdamState(new_m, new_v, t)


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.alpha0 * cfg.decay ** epoch


# --------------------------------------------------------------------------- data

def prepare_case(vol: Volume, mask: BrainMask):
    """Bring a native (volume, mask) pair onto the z-scored 1.5 mm RAS network grid."""
    v, _ = reorient_ras(vol)
    m, _ = reorient_ras(mask)
    v = zscore(resample(v, GridSpec(NETWORK_SPACING, "trilinear")))
    m = resample_mask(m, NETWORK_SPACING)
    return v, m


def _pad_to(arr, patch):
    pads = []
    for d, p in zip(arr.shape, patch):
        extra = max(p - d, 0)
        pads.append((extra // 2, extra - extra // 2))
    return np.pad(arr, pads) if any(sum(p) for p in pads) else arr


def sample_patch(image: np.ndarray, mask: np.ndarray, patch, seed):
    """Random patch-sized crop; inputs smaller than the patch are zero-padded symmetrically."""
    image = _pad_to(np.asarray(image), patch)
    mask = _pad_to(np.asarray(mask), patch)
    rng = np.random.default_rng(seed)
    corner = [int(rng.integers(0, d - p + 1)) for d, p in zip(image.shape, patch)]
    sl = tuple(slice(c, c + p) for c, p in zip(corner, patch))
    return np.ascontiguousarray(image[sl]), np.ascontiguousarray(mask[sl])


def kfold_split(case_ids, k: int = 5, seed: int = 0):
    """Shuffle and split into ``k`` disjoint folds whose sizes differ by at most one."""
    ids = list(case_ids)
    if k < 1 or len(ids) < k:
        raise TooFewCases(f"{len(ids)} cases cannot form {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [[ids[i] for i in part] for part in np.array_split(perm, k)]


# --------------------------------------------------------------------------- loop

def _make_sample(dataset, cfg: TrainConfig, aug: AugmentConfig, epoch, index):
    rng = np.random.default_rng(sample_seed(cfg.seed, epoch, index))
    case = int(rng.integers(len(dataset)))
    crop_seed, aug_seed = (int(s) for s in rng.integers(0, 2 ** 63, size=2))
    vol, mask = dataset[case]
    img, msk = sample_patch(vol.data, mask.data, cfg.patch, crop_seed)
    return augment_pipeline(img, msk, aug, aug_seed)


def train(dataset, net_cfg: unet.NetConfig, train_cfg: TrainConfig,
          aug_cfg: AugmentConfig = AugmentConfig(), workers: int = 1, init=None,
          on_epoch=None):
    """Train from scratch (or from ``init``) and return ``(weights, history)``.

    ``dataset`` holds (Volume, BrainMask) pairs already on the network grid.
    ``history`` is a list of ``(epoch, mean_loss, lr)``. Results do not depend
    on ``workers``, which only parallelizes augmentation.
    """
    if not dataset:
        raise TooFewCases("empty training set")
    train_cfg.check_net(net_cfg)
    weights = init.copy() if init is not None else unet.build(net_cfg, train_cfg.seed)
    unet.check_weights(weights, net_cfg)
    state = AdamState.zeros_like(weights)
    params = {k: ad.Tensor(v, requires_grad=True) for k, v in weights.items()}
    bs = train_cfg.batch_size
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    history = []
    try:
        for epoch in range(train_cfg.epochs):
            lr = lr_at(epoch, train_cfg)
            losses = []
            t0 = time.perf_counter()
            for b in range(train_cfg.batches_per_epoch):
                idx = range(b * bs, (b + 1) * bs)
                make = lambda i: _make_sample(dataset, train_cfg, aug_cfg, epoch, i)  # noqa: E731
                samples = list(pool.map(make, idx)) if pool else [make(i) for i in idx]
                x = np.stack([s[0] for s in samples])[:, None]
                y = np.stack([s[1] for s in samples])
                heads = unet.forward(params, net_cfg, ad.Tensor(x))
                refs = reference_pyramid(y, net_cfg.head_scales)
                loss = multiscale_loss(heads, refs, train_cfg.loss_weights)
                for p in params.values():
                    p.grad = None
                ad.backward(loss)
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                weights, state = adam_step(weights, grads, state, lr, train_cfg)
                for k, p in params.items():
                    p.data = weights[k]
                losses.append(float(loss.data))
            mean_loss = float(np.mean(losses))
            history.append((epoch, mean_loss, lr))
            log.info("epoch %d loss %.4f lr %.3g (%.1fs)", epoch, mean_loss, lr,
                     time.perf_counter() - t0)
            if on_epoch is not None:
                on_epoch(epoch, mean_loss, lr)
    finally:
        if pool is not None:
            pool.shutdown()
    return unet.WeightStore(weights), history


def write_history(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr"])
        for epoch, loss, lr in history:
            w.writerow([epoch, repr(float(loss)), repr(float(lr))])


def read_history(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["epoch"]), float(r["mean_loss"]), float(r["lr"]))
                for r in csv.DictReader(fh)]
