"""The three-headed fully-convolutional network.

Backbone: 3x3 convolutions (widths 32,32,64,64,128,128), relu after
each, strides replaced by dilations (1,1,2,2,4,4) so the output stays
full resolution; then a tail of three 2x2 convolutions at dilations
(4,8,16).  The tail layers carry no relu: their composition is exactly
a low-rank factorization of the single dilated 8x8 convolution they
replace (tap offsets {0,4}+{0,8}+{0,16} tile the 8x8 dilation-4 grid),
at 0.1875x the weight count.

Heads: descriptors X = l2-normalized tail output; repeatability S and
reliability R each apply an element-wise square, a 1x1 convolution to
2 channels, a softmax over those channels, and keep channel 0.  The
heads do not share weights.

The width multiplier scales every internal width by sqrt(multiplier)
(the final width is pinned to the 128-dim descriptor), so parameter
count scales roughly linearly with the multiplier: 1.0 -> ~0.48M,
2.0 -> ~0.93M.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .fileio import atomic_write, read_tensor_block, write_tensor_block

DESCRIPTOR_DIM = 128
MIN_INPUT_SIZE = 16
MODEL_MAGIC = b"R2D2"
MODEL_VERSION = 1


@dataclass
class NetworkConfig:
    backbone_widths: tuple = (32, 32, 64, 64, 128, 128)
    backbone_dilations: tuple = (1, 1, 2, 2, 4, 4)
    tail_widths: tuple = (128, 128, 128)
    tail_dilations: tuple = (4, 8, 16)
    width_multiplier: float = 1.0
    head_channels: int = 2
    seed: int = 0

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        self.backbone_dilations = tuple(int(d) for d in self.backbone_dilations)
        self.tail_widths = tuple(int(w) for w in self.tail_widths)
        self.tail_dilations = tuple(int(d) for d in self.tail_dilations)
        if len(self.backbone_widths) != len(self.backbone_dilations):
            raise ValueError("backbone widths and dilations must align")
        if len(self.tail_widths) != len(self.tail_dilations):
            raise ValueError("tail widths and dilations must align")
        if not self.tail_widths or self.tail_widths[-1] != DESCRIPTOR_DIM:
            raise ValueError(f"final width must be {DESCRIPTOR_DIM} (descriptor dimension)")
        if any(d < 1 for d in self.backbone_dilations + self.tail_dilations):
            raise ValueError("dilations must be >= 1")
        if self.width_multiplier <= 0:
            raise ValueError("width multiplier must be positive")
        if self.head_channels < 2:
            raise ValueError("softmax heads need >= 2 channels")

    def scaled_widths(self):
        """(backbone, tail) widths after the sqrt(multiplier) scaling;
        the final tail width stays the descriptor dimension."""
        f = float(self.width_multiplier) ** 0.5
        bb = tuple(max(1, round(w * f)) for w in self.backbone_widths)
        tail = tuple(max(1, round(w * f)) for w in self.tail_widths[:-1]) + (DESCRIPTOR_DIM,)
        return bb, tail

    def to_dict(self) -> dict:
        return {
            "backbone_widths": list(self.backbone_widths),
            "backbone_dilations": list(self.backbone_dilations),
            "tail_widths": list(self.tail_widths),
            "tail_dilations": list(self.tail_dilations),
            "width_multiplier": self.width_multiplier,
            "head_channels": self.head_channels,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f_.name for f_ in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config key: {sorted(unknown)[0]}")
        return cls(**d)


@dataclass
class NetworkOutputs:
    """X: H×W×128 unit-norm descriptors; S, R: H×W maps in [0,1]."""
    X: Tensor
    S: Tensor
    R: Tensor


@dataclass
class _ConvLayer:
    kernel: Tensor
    bias: Tensor
    dilation: int
    relu: bool


class Network:
    def __init__(self, config: NetworkConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        bb_widths, tail_widths = config.scaled_widths()

        self.layers: list[_ConvLayer] = []
        cin = 3
        for w, d in zip(bb_widths, config.backbone_dilations):
            self.layers.append(self._conv(rng, cin, w, 3, d, relu=True))
            cin = w
        for w, d in zip(tail_widths, config.tail_dilations):
            self.layers.append(self._conv(rng, cin, w, 2, d, relu=False))
            cin = w

        self.s_head = self._conv(rng, cin, config.head_channels, 1, 1, relu=False)
        self.r_head = self._conv(rng, cin, config.head_channels, 1, 1, relu=False)
        # reliability starts at ~0.9, not 0.5: the AP loss gates descriptor
        # gradients by R, and a half-closed gate at birth loses the race
        # against the "declare everything unreliable" local optimum
        self.r_head.bias.data[0] = np.float32(np.log(9.0))

    @staticmethod
    def _conv(rng, cin: int, cout: int, k: int, dilation: int, relu: bool) -> _ConvLayer:
        # fan-in scaled uniform; gain 6 under relu, 3 for linear layers
        fan_in = k * k * cin
        bound = ((6.0 if relu else 3.0) / fan_in) ** 0.5
        kernel = rng.uniform(-bound, bound, size=(cout, k, k, cin)).astype(np.float32)
        bias = np.zeros(cout, dtype=np.float32)
        return _ConvLayer(Tensor(kernel, requires_grad=True),
                          Tensor(bias, requires_grad=True), dilation, relu)

    def parameters(self) -> list:
        params = []
        for layer in self.layers + [self.s_head, self.r_head]:
            params.append(layer.kernel)
            params.append(layer.bias)
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, image) -> NetworkOutputs:
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.data.ndim != 3 or x.shape[2] != 3:
            raise ValueError(f"expected H×W×3 image, got shape {x.shape}")
        if not np.isfinite(x.data).all():
            raise ValueError("image contains non-finite pixels")
        if x.data.min() < -1e-6 or x.data.max() > 1 + 1e-6:
            raise ValueError("pixel values must lie in [0, 1]")
        if min(x.shape[0], x.shape[1]) < MIN_INPUT_SIZE:
            raise ValueError(f"image must be at least {MIN_INPUT_SIZE}px on each side")

        feat = x
        for layer in self.layers:
            feat = ag.conv2d(feat, layer.kernel, layer.bias, dilation=layer.dilation)
            if layer.relu:
                feat = ag.relu(feat)

        X = ag.l2norm_channels(feat)
        S = self._head(feat, self.s_head)
        R = self._head(feat, self.r_head)
        return NetworkOutputs(X=X, S=S, R=R)

    @staticmethod
    def _head(feat: Tensor, head: _ConvLayer) -> Tensor:
        logits = ag.conv2d(ag.square(feat), head.kernel, head.bias, dilation=1)
        return ag.softmax_channels(logits)[:, :, 0]


def build_network(config: NetworkConfig) -> Network:
    return Network(config)


# ---------------------------------------------------------------------
# model file format: magic "R2D2", u32 version, u32 json length, config
# JSON, then each parameter as a tensor block, all little-endian
# ---------------------------------------------------------------------

def write_model(f, net: Network) -> None:
    f.write(MODEL_MAGIC)
    f.write(struct.pack("<I", MODEL_VERSION))
    blob = json.dumps(net.config.to_dict(), sort_keys=True).encode()
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)
    for p in net.parameters():
        write_tensor_block(f, p.data)


def read_model(f) -> Network:
    magic = f.read(4)
    if magic != MODEL_MAGIC:
        raise ValueError(f"not a model file: magic {magic!r} != {MODEL_MAGIC!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    (n,) = struct.unpack("<I", f.read(4))
    config = NetworkConfig.from_dict(json.loads(f.read(n).decode()))
    net = Network(config)
    for p in net.parameters():
        arr = read_tensor_block(f)
        if arr.shape != p.data.shape:
            raise ValueError(f"parameter shape mismatch: file {arr.shape} vs model {p.data.shape}")
        p.data = arr
    return net


def save_model(path, net: Network) -> None:
    with atomic_write(path) as f:
        write_model(f, net)


def load_model(path) -> Network:
    """Read a model file; trailing bytes (optimizer state in a
    checkpoint) are ignored, so checkpoints load as models too."""
    with open(path, "rb") as f:
        return read_model(f)
