"""Residual 3D U-Net with deep supervision, plus HDBW weight persistence.

Encoder: per level a 3x3x3 conv (stem at level 0, stride-2 downsampling
above) followed by one pre-activation residual block. Decoder: trilinear x2
upsampling and a channel-halving 3x3x3 conv, concatenation with the skip,
a 3x3x3 recombination conv and a channel-halving 1x1x1 conv. Softmax heads
sit at full resolution and at the configured auxiliary scales.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_autodiff as ad
from . import config as cfgio
from .errors import BadMagic, ConfigError, ShapeHeaderMismatch, ShapeMismatch, VersionUnsupported

HDBW_MAGIC = b"HDBW"
HDBW_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    depth: int = 5
    base_width: int = 16
    num_classes: int = 2
    leaky_slope: float = 0.01
    in_eps: float = 1e-5
    aux_scales: tuple = (2, 4)  # auxiliary heads at 1/2 and 1/4 resolution
    max_width: int = 320

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 4:
            raise ConfigError(f"base_width must be >= 4, got {self.base_width}")
        if self.num_classes != 2:
            raise ConfigError("num_classes is fixed to 2 (background, brain)")
        for s in self.aux_scales:
            if s < 2 or s & (s - 1):
                raise ConfigError(f"auxiliary scale 1/{s} is not a power of two")

    def width(self, level: int) -> int:
        return min(self.base_width * 2 ** level, self.max_width)

    @property
    def divisor(self) -> int:
        """Spatial dims must be multiples of this."""
        return 2 ** (self.depth - 1)

    @property
    def head_scales(self) -> tuple:
        """Denominators of the output scales, full resolution first."""
        aux = sorted(s for s in set(self.aux_scales) if s <= self.divisor)
        return (1,) + tuple(aux)


DESK_NET = NetConfig(depth=3, base_width=8)


class WeightStore(dict):
    """Ordered mapping of parameter name to float32 array."""

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.values()))

    def copy(self) -> "WeightStore":
        return WeightStore((k, v.copy()) for k, v in self.items())

    def astype(self, dtype) -> "WeightStore":
        return WeightStore((k, v.astype(dtype)) for k, v in self.items())

    def equals(self, other) -> bool:
        return (list(self) == list(other)
                and all(self[k].shape == other[k].shape
                        and self[k].tobytes() == np.asarray(other[k], self[k].dtype).tobytes()
                        for k in self))


# --------------------------------------------------------------------------- layout

def parameter_shapes(cfg: NetConfig) -> dict:
    """Name -> shape for every parameter, in initialization order."""
    shapes = {}

    def conv(name, cout, cin, k):
        shapes[f"{name}.w"] = (cout, cin, k, k, k)
        shapes[f"{name}.b"] = (cout,)

    def norm(name, c):
        shapes[f"{name}.gamma"] = (c,)
        shapes[f"{name}.beta"] = (c,)

    for lvl in range(cfg.depth):
        w = cfg.width(lvl)
        if lvl == 0:
            conv("enc0.stem", w, 1, 3)
        else:
            conv(f"enc{lvl}.down", w, cfg.width(lvl - 1), 3)
        norm(f"enc{lvl}.res.norm1", w)
        conv(f"enc{lvl}.res.conv1", w, w, 3)
        norm(f"enc{lvl}.res.norm2", w)
        conv(f"enc{lvl}.res.conv2", w, w, 3)
    for lvl in range(cfg.depth - 2, -1, -1):
        w = cfg.width(lvl)
        conv(f"dec{lvl}.up", w, cfg.width(lvl + 1), 3)
        norm(f"dec{lvl}.up_norm", w)
        conv(f"dec{lvl}.fuse", 2 * w, 2 * w, 3)
        norm(f"dec{lvl}.fuse_norm", 2 * w)
        conv(f"dec{lvl}.reduce", w, 2 * w, 1)
        norm(f"dec{lvl}.reduce_norm", w)
    conv("head", cfg.num_classes, cfg.width(0), 1)
    for s in cfg.head_scales[1:]:
        conv(f"aux{s}", cfg.num_classes, cfg.width(s.bit_length() - 1), 1)
    return shapes


def build(cfg: NetConfig, seed: int = 0) -> WeightStore:
    """Fresh weights: He-uniform kernels, zero biases, unit/zero norm affine."""
    rng = np.random.default_rng(seed)
    ws = WeightStore()
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            ws[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif name.endswith(".gamma"):
            ws[name] = np.ones(shape, dtype=np.float32)
        else:
            ws[name] = np.zeros(shape, dtype=np.float32)
    return ws


def check_weights(ws, cfg: NetConfig) -> None:
    expected = parameter_shapes(cfg)
    if list(ws) != list(expected):
        raise ConfigError("weight names do not match the network configuration")
    for name, shape in expected.items():
        if tuple(ws[name].shape) != shape:
            raise ConfigError(f"{name}: shape {ws[name].shape} != expected {shape}")


# --------------------------------------------------------------------------- forward

def _tensors(weights):
    first = next(iter(weights.values()))
    if isinstance(first, ad.Tensor):
        return weights
    return {k: ad.Tensor(v) for k, v in weights.items()}


def residual_block(p, prefix, x, cfg: NetConfig):
    h = ad.instance_norm(x, p[f"{prefix}.norm1.gamma"], p[f"{prefix}.norm1.beta"], cfg.in_eps)
    h = ad.conv3d(ad.leaky_relu(h, cfg.leaky_slope), p[f"{prefix}.conv1.w"],
                  p[f"{prefix}.conv1.b"], padding=1)
    h = ad.instance_norm(h, p[f"{prefix}.norm2.gamma"], p[f"{prefix}.norm2.beta"], cfg.in_eps)
    h = ad.conv3d(ad.leaky_relu(h, cfg.leaky_slope), p[f"{prefix}.conv2.w"],
                  p[f"{prefix}.conv2.b"], padding=1)
    return ad.add(x, h)


def _conv_norm_act(p, name, x, cfg, padding):
    h = ad.conv3d(x, p[f"{name}.w"], p[f"{name}.b"], padding=padding)
    h = ad.instance_norm(h, p[f"{name}_norm.gamma"], p[f"{name}_norm.beta"], cfg.in_eps)
    return ad.leaky_relu(h, cfg.leaky_slope)


def forward(weights, cfg: NetConfig, x: ad.Tensor) -> list:
    """Run the network on an N x 1 x D x H x W tensor.

    ``weights`` is a WeightStore (inference) or a dict of Tensors (training).
    Returns softmax tensors at ``cfg.head_scales``: full resolution first,
    then 1/2, 1/4, ...
    """
    if x.data.ndim != 5 or x.shape[1] != 1:
        raise ShapeMismatch(f"expected N x 1 x D x H x W input, got {x.shape}")
    if any(d % cfg.divisor for d in x.shape[2:]):
        raise ShapeMismatch(f"spatial dims {x.shape[2:]} not divisible by {cfg.divisor}")
    p = _tensors(weights)

    skips = []
    h = ad.conv3d(x, p["enc0.stem.w"], p["enc0.stem.b"], padding=1)
    h = residual_block(p, "enc0.res", h, cfg)
    skips.append(h)
    for lvl in range(1, cfg.depth):
        h = ad.conv3d(h, p[f"enc{lvl}.down.w"], p[f"enc{lvl}.down.b"], stride=2, padding=1)
        h = residual_block(p, f"enc{lvl}.res", h, cfg)
        skips.append(h)

    features = {cfg.depth - 1: h}
    for lvl in range(cfg.depth - 2, -1, -1):
        u = _conv_norm_act(p, f"dec{lvl}.up", ad.upsample_trilinear(h), cfg, 1)
        h = ad.concat_channels(skips[lvl], u)
        h = _conv_norm_act(p, f"dec{lvl}.fuse", h, cfg, 1)
        h = _conv_norm_act(p, f"dec{lvl}.reduce", h, cfg, 0)
        features[lvl] = h

    outputs = [ad.softmax_channels(ad.conv3d(features[0], p["head.w"], p["head.b"]))]
    for s in cfg.head_scales[1:]:
        lvl = s.bit_length() - 1
        outputs.append(ad.softmax_channels(ad.conv3d(features[lvl], p[f"aux{s}.w"],
                                                     p[f"aux{s}.b"])))
    return outputs


def predict(weights, cfg: NetConfig, x: np.ndarray) -> np.ndarray:
    """Full-resolution softmax for an array batch (no graph is kept)."""
    return forward(weights, cfg, ad.Tensor(x))[0].data


# --------------------------------------------------------------------------- persistence

def save_weights(ws: WeightStore, path) -> None:
    lines = []
    for name, arr in ws.items():
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"invalid parameter name {name!r}")
        lines.append(f"{name} f32 {','.join(str(d) for d in arr.shape)}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(HDBW_MAGIC)
        fh.write(struct.pack("<IQ", HDBW_VERSION, len(header)))
        fh.write(header)
        for arr in ws.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path) -> WeightStore:
    raw = Path(path).read_bytes()
    if raw[:4] != HDBW_MAGIC:
        raise BadMagic(f"{path}: not an HDBW file")
    if len(raw) < 16:
        raise ShapeHeaderMismatch(f"{path}: truncated preamble")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != HDBW_VERSION:
        raise VersionUnsupported(f"{path}: HDBW version {version}")
    if 16 + header_len > len(raw):
        raise ShapeHeaderMismatch(f"{path}: header length exceeds file size")
    header = raw[16:16 + header_len].decode("utf-8")
    entries = []
    for line in header.splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[1] != "f32":
            raise ShapeHeaderMismatch(f"{path}: bad header line {line!r}")
        shape = tuple(int(d) for d in parts[2].split(",") if d)
        entries.append((parts[0], shape))
    expected = sum(int(np.prod(s)) * 4 for _, s in entries)
    payload = raw[16 + header_len:]
    if len(payload) != expected:
        raise ShapeHeaderMismatch(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    ws = WeightStore()
    offset = 0
    for name, shape in entries:
        n = int(np.prod(shape))
        ws[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset) \
            .reshape(shape).astype(np.float32)
        offset += 4 * n
    return ws


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".cfg")


def save_model(ws: WeightStore, cfg: NetConfig, path) -> None:
    """Write HDBW weights plus the NetConfig sidecar next to them."""
    save_weights(ws, path)
    cfgio.save(cfg, sidecar_path(path))


def load_model(path):
    """Load ``(WeightStore, NetConfig)`` from an HDBW file and its sidecar."""
    cfg_path = sidecar_path(path)
    cfg = cfgio.load(NetConfig, cfg_path) if cfg_path.exists() else NetConfig()
    ws = load_weights(path)
    check_weights(ws, cfg)
    return ws, cfg
