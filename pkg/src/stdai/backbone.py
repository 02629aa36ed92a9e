"""Encoder-decoder imputation network built on the autodiff tape.

Inputs are histology (3 channels), sparse expression (G channels, zero where
unobserved) and the observation mask (1 channel). Histology features are
passed through a 1x1 convolution and concatenated to the bottleneck output.
Each conv block is ``convs_per_block`` 3x3 convolutions with leaky ReLU;
downsampling is 2x max-pool and upsampling is nearest-neighbour followed by
the next block's convolution. The terminal layer is a 1x1 convolution to G
channels.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autograd import Tape
from .errors import BundleError, ShapeError

CHECKPOINT_MAGIC = b"STDAICKP"


@dataclass
class BackboneConfig:
    n_genes: int = 4
    base_width: int = 16
    depth: int = 3
    feature_channels: int = 8
    convs_per_block: int = 1

    def __post_init__(self):
        if self.base_width <= 0 or self.depth < 1 or self.n_genes < 1 or self.convs_per_block < 1:
            raise ValueError(f"invalid backbone config {self}")

    @property
    def in_channels(self):
        return 3 + self.n_genes + 1

    @property
    def widths(self):
        return [self.base_width * 2 ** i for i in range(self.depth)]

    @property
    def downsample(self):
        return 2 ** (self.depth - 1)

    def check_input(self, H, W):
        f = self.downsample
        if H % f or W % f:
            raise ShapeError("model_forward", f"H, W = {(H, W)} must be divisible by {f}")

    def block_sites(self):
        """Names of conv blocks in forward order; each is a PDL insertion site."""
        enc = [f"enc{i}" for i in range(self.depth - 1)]
        dec = [f"dec{i}" for i in reversed(range(self.depth - 1))]
        return enc + ["bott"] + dec

    def site_channels(self):
        w = self.widths
        out = {f"enc{i}": w[i] for i in range(self.depth - 1)}
        out["bott"] = w[-1]
        out.update({f"dec{i}": w[i] for i in range(self.depth - 1)})
        return out


@dataclass
class ModelParams:
    """Named parameter tensors in declaration order plus freeze flags."""

    config: BackboneConfig
    tensors: dict
    trainable: dict
    pdl_sites: list = field(default_factory=list)

    HEAD = ("head.w", "head.b")

    def kind(self, name):
        if name.startswith("pdl."):
            return "pdl"
        if name in self.HEAD:
            return "head"
        return "backbone"

    def names(self, kind=None):
        return [n for n in self.tensors if kind is None or self.kind(n) == kind]

    def count(self, kind=None, trainable_only=False):
        return sum(self.tensors[n].size for n in self.names(kind)
                   if not trainable_only or self.trainable[n])

    def copy(self, share=()):
        """Deep copy except for the tensor kinds listed in ``share``."""
        tensors = {n: (t if self.kind(n) in share else t.copy()) for n, t in self.tensors.items()}
        return ModelParams(self.config, tensors, dict(self.trainable), list(self.pdl_sites))

    def trainable_arrays(self):
        return {n: t for n, t in self.tensors.items() if self.trainable[n]}


def init_params(config, seed=0):
    """He-normal conv weights, zero biases, from a seeded generator."""
    rng = np.random.default_rng(seed)
    tensors = {}

    def conv(name, cin, cout, k):
        std = np.sqrt(2.0 / (cin * k * k))
        tensors[f"{name}.w"] = (rng.normal(size=(cout, cin, k, k)) * std).astype(np.float32)
        tensors[f"{name}.b"] = np.zeros(cout, np.float32)

    w = config.widths
    cin = config.in_channels
    for i in range(config.depth - 1):
        for j in range(config.convs_per_block):
            conv(f"enc{i}.conv{j}", cin if j == 0 else w[i], w[i], 3)
        cin = w[i]
    for j in range(config.convs_per_block):
        conv(f"bott.conv{j}", cin if j == 0 else w[-1], w[-1], 3)
    conv("inject", config.feature_channels, config.feature_channels, 1)
    below = w[-1] + config.feature_channels
    for i in reversed(range(config.depth - 1)):
        for j in range(config.convs_per_block):
            conv(f"dec{i}.conv{j}", below + w[i] if j == 0 else w[i], w[i], 3)
        below = w[i]
    conv("head", w[0], config.n_genes, 1)
    tensors["head.w"] *= np.float32(np.sqrt(0.5))
    return ModelParams(config, tensors, {n: True for n in tensors})


# -- forward -----------------------------------------------------------------

def _block(tape, P, name, x, n_convs):
    for j in range(n_convs):
        x = tape.leaky_relu(tape.conv2d(x, P[f"{name}.conv{j}.w"], P[f"{name}.conv{j}.b"], pad=1))
    if f"pdl.{name}.a" in P:
        x = tape.channel_affine(x, P[f"pdl.{name}.a"], P[f"pdl.{name}.b"])
    return x


def register_params(tape, params):
    return {n: tape.parameter(n, t, params.trainable[n]) for n, t in params.tensors.items()}


def stack_inputs(histology, sparse, mask):
    """Network input [3 + G + 1, H, W] as float32."""
    mask = np.asarray(mask, np.float32)
    if mask.ndim == 2:
        mask = mask[None]
    return np.concatenate([np.asarray(histology, np.float32), np.asarray(sparse, np.float32), mask])


def backbone_forward(tape, P, params, x_in, features):
    """Everything up to the terminal layer. ``P`` maps names to tape tensors."""
    cfg = params.config
    C, H, W = x_in.shape
    if C != cfg.in_channels:
        raise ShapeError("model_forward", f"input has {C} channels, expected {cfg.in_channels}")
    cfg.check_input(H, W)
    f = cfg.downsample
    if features.shape != (cfg.feature_channels, H // f, W // f):
        raise ShapeError("model_forward", f"features {features.shape} != "
                         f"{(cfg.feature_channels, H // f, W // f)}")
    n = cfg.convs_per_block
    skips = []
    x = x_in
    for i in range(cfg.depth - 1):
        x = _block(tape, P, f"enc{i}", x, n)
        skips.append(x)
        x = tape.maxpool2(x)
    x = _block(tape, P, "bott", x, n)
    phi = tape.conv2d(features, P["inject.w"], P["inject.b"], pad=0)
    x = tape.concat([x, phi])
    for i in reversed(range(cfg.depth - 1)):
        x = tape.concat([tape.upsample2(x), skips[i]])
        x = _block(tape, P, f"dec{i}", x, n)
    return x


def head_forward(tape, P, h, prefix="head"):
    return tape.conv2d(h, P[f"{prefix}.w"], P[f"{prefix}.b"], pad=0)


def model_forward(params, histology, sparse_expr, mask, features, tape=None):
    """Dense prediction [G, H, W]. Returns a tape tensor when ``tape`` is given."""
    own = tape is None
    tape = tape or Tape()
    P = register_params(tape, params)
    x_in = tape.constant(stack_inputs(histology, sparse_expr, mask))
    feats = tape.constant(features.data if isinstance(features, HistologyFeatures) else features)
    out = head_forward(tape, P, backbone_forward(tape, P, params, x_in, feats))
    return out.data if own else out


# -- histology features ------------------------------------------------------

@dataclass
class HistologyFeatures:
    data: np.ndarray  # float32 [C_e, H/f, W/f]
    provenance: str


def handcrafted_features(histology, pool):
    """Eight channels: luminance at sigma 1, 2, 4; gradient magnitude at each
    of those scales; red-green and yellow-blue opponents. Average-pooled by
    ``pool``."""
    h = np.asarray(histology)
    if h.dtype == np.uint8:
        h = h.astype(np.float64).transpose(2, 0, 1) / 255.0
    h = h.astype(np.float64)
    lum = 0.299 * h[0] + 0.587 * h[1] + 0.114 * h[2]
    chans = []
    smooth = [ndimage.gaussian_filter(lum, s, mode="nearest") for s in (1.0, 2.0, 4.0)]
    chans.extend(smooth)
    for s in smooth:
        gy, gx = np.gradient(s)
        chans.append(np.hypot(gx, gy))
    rgb = np.stack([ndimage.gaussian_filter(c, 1.0, mode="nearest") for c in h])
    chans.append(rgb[0] - rgb[1])
    chans.append(0.5 * (rgb[0] + rgb[1]) - rgb[2])
    f = np.stack(chans)
    C, H, W = f.shape
    if H % pool or W % pool:
        raise ShapeError("handcrafted_features", f"{(H, W)} not divisible by pool {pool}")
    f = f.reshape(C, H // pool, pool, W // pool, pool).mean(axis=(2, 4))
    return f.astype(np.float32)


def extract_histology_features(histology, config, extractor="handcrafted"):
    """Features for the bottleneck injection.

    ``extractor`` is ``"handcrafted"`` or a path to a ``.npy`` array of shape
    ``[C_e, H/f, W/f]`` computed elsewhere.
    """
    h = np.asarray(histology)
    H, W = (h.shape[:2] if h.dtype == np.uint8 else h.shape[1:])
    f = config.downsample
    if extractor == "handcrafted":
        if config.feature_channels != 8:
            raise ValueError("the handcrafted extractor emits 8 channels")
        return HistologyFeatures(handcrafted_features(h, f), "handcrafted")
    path = Path(extractor)
    data = np.load(path).astype(np.float32)
    expected = (config.feature_channels, H // f, W // f)
    if data.shape != expected:
        raise ShapeError("extract_histology_features", f"{path}: shape {data.shape}, expected {expected}")
    return HistologyFeatures(data, f"file:{path.name}")


# -- checkpoints ---------------------------------------------------------------

def write_checkpoint(path, params, extra=None):
    """Magic, uint32 header length, JSON header, then little-endian float32 tensors."""
    header = {
        "config": dataclasses.asdict(params.config),
        "pdl_sites": params.pdl_sites,
        "tensors": [{"name": n, "shape": list(t.shape), "trainable": bool(params.trainable[n]),
                     "kind": params.kind(n)} for n, t in params.tensors.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise BundleError(path, "bad checkpoint magic")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    pos = 12 + n
    tensors, trainable = {}, {}
    for spec in header["tensors"]:
        size = int(np.prod(spec["shape"])) * 4
        if pos + size > len(raw):
            raise BundleError(path, f"truncated at tensor {spec['name']}")
        tensors[spec["name"]] = np.frombuffer(raw[pos:pos + size], "<f4").reshape(spec["shape"]).astype(np.float32)
        trainable[spec["name"]] = spec["trainable"]
        pos += size
    if pos != len(raw):
        raise BundleError(path, f"{len(raw) - pos} trailing bytes")
    params = ModelParams(BackboneConfig(**header["config"]), tensors, trainable, header["pdl_sites"])
    return params, header.get("extra", {})
