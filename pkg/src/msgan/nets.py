"""Declarative generator/discriminator architectures and their evaluation.

An :class:`ArchSpec` is a flat list of :class:`Layer` descriptors. The same
description drives parameter allocation (:class:`Network`), receptive-field
analysis and the analytic memory model, and is what gets written into
checkpoint headers.

Three families are provided:

* ``lr_generator_spec``: U-Net for whole low-resolution images
  (edge + noise channels in, tanh image out).
* ``hr_generator_spec``: stride-1 residual network for fixed-size patches
  (edge + upscaled previous scale + noise in).
* ``discriminator_spec``: fully-convolutional stride-2 cascade with a sigmoid
  realness map.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from msgan.grid import Volume, as_array
from msgan.textkv import KeyValueError, format_kv, parse_kv, split_header

LEAKY_SLOPE = 0.2
INIT_STD = 0.02
PROB_EPS = 1e-7

LAYER_KINDS = ("conv", "convt", "inorm", "lrelu", "tanh", "sigmoid", "resblock", "push", "concat",
               "up2", "pool2")


@dataclass(frozen=True)
class Layer:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    pad_mode: str = "zeros"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.pad_mode not in ("zeros", "reflect"):
            raise ValueError(f"unknown padding mode {self.pad_mode!r}")

    def encode(self) -> str:
        if self.kind in ("conv", "convt"):
            return (f"{self.kind} in={self.in_ch} out={self.out_ch} k={self.kernel} "
                    f"s={self.stride} p={self.padding} pad={self.pad_mode}")
        if self.kind == "resblock":
            return f"resblock ch={self.in_ch} k={self.kernel} pad={self.pad_mode}"
        return self.kind

    @classmethod
    def decode(cls, text: str) -> "Layer":
        kind, *rest = text.split()
        opts = dict(tok.split("=", 1) for tok in rest)
        if kind in ("conv", "convt"):
            return cls(kind, int(opts["in"]), int(opts["out"]), int(opts["k"]),
                       int(opts["s"]), int(opts["p"]), opts.get("pad", "zeros"))
        if kind == "resblock":
            ch = int(opts["ch"])
            k = int(opts.get("k", 3))
            return resblock(ch, k, opts.get("pad", "reflect"))
        if opts:
            raise ValueError(f"layer {kind!r} takes no options")
        return cls(kind)


def conv(cin, cout, k, s=1, p=0, pad="zeros") -> Layer:
    return Layer("conv", cin, cout, k, s, p, pad)


def convt(cin, cout, k, s=2, p=1) -> Layer:
    return Layer("convt", cin, cout, k, s, p)


def resblock(ch, k=3, pad="reflect") -> Layer:
    """Two stride-1 convolutions with a leaky-rectifier between them and an additive skip."""
    return Layer("resblock", ch, ch, k, 1, k // 2, pad)


INORM, LRELU, TANH, SIGMOID, PUSH, CONCAT, UP2, POOL2 = (
    Layer(k) for k in ("inorm", "lrelu", "tanh", "sigmoid", "push", "concat", "up2", "pool2"))


@dataclass(frozen=True)
class ArchSpec:
    name: str
    ndim: int
    in_channels: int
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.ndim not in (2, 3):
            raise ValueError(f"ndim must be 2 or 3, got {self.ndim}")
        self.channel_trace()

    def channel_trace(self) -> list:
        """Channel count after every layer; raises on inconsistent chaining or unpaired skips."""
        ch = self.in_channels
        stack, trace = [], []
        for i, layer in enumerate(self.layers):
            if layer.kind in ("conv", "convt", "resblock"):
                if layer.in_ch != ch:
                    raise ValueError(f"{self.name} layer {i}: expects {layer.in_ch} channels, gets {ch}")
                ch = layer.out_ch
            elif layer.kind == "push":
                stack.append(ch)
            elif layer.kind == "concat":
                if not stack:
                    raise ValueError(f"{self.name} layer {i}: concat without a matching push")
                ch += stack.pop()
            trace.append(ch)
        if stack:
            raise ValueError(f"{self.name}: {len(stack)} skip source(s) never consumed")
        return trace

    @property
    def out_channels(self) -> int:
        trace = self.channel_trace()
        return trace[-1] if trace else self.in_channels

    def param_shapes(self) -> list:
        k = self.ndim
        shapes = []
        for layer in self.layers:
            win = (layer.kernel,) * k
            if layer.kind == "conv":
                shapes += [(layer.out_ch, layer.in_ch) + win, (layer.out_ch,)]
            elif layer.kind == "convt":
                shapes += [(layer.in_ch, layer.out_ch) + win, (layer.out_ch,)]
            elif layer.kind == "resblock":
                shapes += [(layer.in_ch, layer.in_ch) + win, (layer.in_ch,)] * 2
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes())

    def feature_index(self) -> int:
        """Number of leading layers that produce the penultimate feature map (before the head conv)."""
        convs = [i for i, l in enumerate(self.layers) if l.kind in ("conv", "convt")]
        if not convs:
            raise ValueError(f"{self.name} has no convolution")
        return convs[-1]

    def kv_items(self, prefix: str = "arch.") -> list:
        items = [(prefix + "name", self.name), (prefix + "ndim", self.ndim),
                 (prefix + "in_channels", self.in_channels),
                 (prefix + "n_layers", len(self.layers))]
        items += [(f"{prefix}layer.{i}", l.encode()) for i, l in enumerate(self.layers)]
        return items

    @classmethod
    def from_kv(cls, kv: dict, prefix: str = "arch.") -> "ArchSpec":
        n = int(kv[prefix + "n_layers"])
        layers = [Layer.decode(kv[f"{prefix}layer.{i}"]) for i in range(n)]
        return cls(kv[prefix + "name"], int(kv[prefix + "ndim"]), int(kv[prefix + "in_channels"]), layers)


# --------------------------------------------------------------------------
# default families

def lr_generator_spec(ndim: int = 2, levels: int = 4, base_ch: int = 32, in_channels: int = 2) -> ArchSpec:
    """U-Net with ``levels`` resolution levels (``levels - 1`` stride-2 steps); input side must be divisible by 2**(levels-1)."""
    chs = [base_ch * 2 ** i for i in range(levels)]
    L = [conv(in_channels, chs[0], 3, 1, 1, "reflect"), INORM, LRELU]
    for lo, hi in zip(chs[:-1], chs[1:]):
        L += [PUSH, conv(lo, hi, 4, 2, 1), INORM, LRELU]
    for hi, lo in zip(chs[:0:-1], chs[-2::-1]):
        L += [convt(hi, lo, 4, 2, 1), INORM, LRELU, CONCAT,
              conv(2 * lo, lo, 3, 1, 1, "reflect"), INORM, LRELU]
    L += [conv(chs[0], 1, 3, 1, 1, "reflect"), TANH]
    return ArchSpec("lr_unet", ndim, in_channels, L)


def hr_generator_spec(ndim: int = 2, in_channels: int = 3, ch: int = 32, blocks: int = 2) -> ArchSpec:
    """Stride-1 residual patch generator. Default receptive field is 17 voxels (trim margin 8)."""
    L = [conv(in_channels, ch, 7, 1, 3, "reflect"), LRELU]
    L += [resblock(ch) for _ in range(blocks)]
    L += [conv(ch, 1, 3, 1, 1, "reflect"), TANH]
    return ArchSpec("hr_resnet", ndim, in_channels, L)


def discriminator_spec(ndim: int = 2, in_channels: int = 2, levels: int = 4, base_ch: int = 32) -> ArchSpec:
    L = []
    cin = in_channels
    for i in range(levels):
        cout = base_ch * 2 ** i
        L.append(conv(cin, cout, 4, 2, 1))
        if i > 0:
            L.append(INORM)
        L.append(LRELU)
        cin = cout
    L += [conv(cin, 1, 3, 1, 1), SIGMOID]
    return ArchSpec("patch_disc", ndim, in_channels, L)


# --------------------------------------------------------------------------
# evaluation

def _conv_nd(ndim):
    return F.conv2d if ndim == 2 else F.conv3d


def _convt_nd(ndim):
    return F.conv_transpose2d if ndim == 2 else F.conv_transpose3d


def apply_layers(spec: ArchSpec, params: Sequence[torch.Tensor], x: torch.Tensor,
                 upto: Optional[int] = None, hooks=None) -> torch.Tensor:
    """Run ``spec`` on a batch ``x`` of shape (N, C, *spatial).

    ``upto`` stops before that layer index. ``hooks`` receives every
    intermediate tensor (used by the training footprint tracker).
    """
    convf, convtf = _conv_nd(spec.ndim), _convt_nd(spec.ndim)
    it = iter(params)
    stack = []

    def padded_conv(h, w, b, layer):
        if layer.padding and layer.pad_mode == "reflect":
            h = F.pad(h, (layer.padding,) * (2 * spec.ndim), mode="reflect")
            return convf(h, w, b, stride=layer.stride)
        return convf(h, w, b, stride=layer.stride, padding=layer.padding)

    layers = spec.layers if upto is None else spec.layers[:upto]
    for layer in layers:
        k = layer.kind
        if k == "conv":
            x = padded_conv(x, next(it), next(it), layer)
        elif k == "convt":
            x = convtf(x, next(it), next(it), stride=layer.stride, padding=layer.padding)
        elif k == "inorm":
            x = F.instance_norm(x, eps=1e-5)
        elif k == "lrelu":
            x = F.leaky_relu(x, LEAKY_SLOPE)
        elif k == "tanh":
            x = torch.tanh(x)
        elif k == "sigmoid":
            x = torch.sigmoid(x)
        elif k == "resblock":
            w1, b1, w2, b2 = next(it), next(it), next(it), next(it)
            h = F.leaky_relu(padded_conv(x, w1, b1, layer), LEAKY_SLOPE)
            if hooks is not None:
                hooks(h)
            x = x + padded_conv(h, w2, b2, layer)
        elif k == "up2":
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        elif k == "pool2":
            x = (F.avg_pool2d if spec.ndim == 2 else F.avg_pool3d)(x, 2)
        elif k == "push":
            stack.append(x)
            continue
        elif k == "concat":
            x = torch.cat([x, stack.pop()], dim=1)
        if hooks is not None:
            hooks(x)
    return x


class Network(nn.Module):
    """Parameters of one :class:`ArchSpec`, initialised N(0, 0.02) with zero biases from ``seed``."""

    def __init__(self, spec: ArchSpec, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.spec = spec
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        tensors = []
        for shape in spec.param_shapes():
            if len(shape) == 1:
                arr = np.zeros(shape, np.float32)
            else:
                arr = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
            tensors.append(nn.Parameter(torch.from_numpy(arr).to(dtype)))
        self.params = nn.ParameterList(tensors)

    def forward(self, x, upto=None, hooks=None):
        return apply_layers(self.spec, list(self.params), x, upto=upto, hooks=hooks)

    def flat_arrays(self) -> list:
        return [p.detach().cpu().numpy().astype(np.float32) for p in self.params]

    def load_arrays(self, arrays) -> None:
        shapes = self.spec.param_shapes()
        if len(arrays) != len(shapes):
            raise ValueError(f"expected {len(shapes)} tensors, got {len(arrays)}")
        with torch.no_grad():
            for p, a, shape in zip(self.params, arrays, shapes):
                a = np.asarray(a)
                if tuple(a.shape) != tuple(shape):
                    raise ValueError(f"parameter shape {a.shape} does not match {shape}")
                p.copy_(torch.from_numpy(np.ascontiguousarray(a)).to(p.dtype))

    def zero_(self) -> "Network":
        with torch.no_grad():
            for p in self.params:
                p.zero_()
        return self


def _stack(channels, shape=None) -> torch.Tensor:
    arrays = [as_array(c) for c in channels]
    shape = shape or arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise ValueError(f"channel shapes differ: {a.shape} vs {shape}")
    return torch.from_numpy(np.stack(arrays).astype(np.float32))[None]


def _run(net: Network, channels) -> np.ndarray:
    if len(channels) != net.spec.in_channels:
        raise ValueError(f"{net.spec.name} expects {net.spec.in_channels} input channels, got {len(channels)}")
    x = _stack(channels)
    if x.ndim - 2 != net.spec.ndim:
        raise ValueError(f"{net.spec.name} is {net.spec.ndim}D, input is {x.ndim - 2}D")
    with torch.no_grad():
        y = net(x.to(next(net.parameters()).dtype))
    return y[0, 0].double().numpy()


def lr_generator_forward(net: Network, edge_image, noise) -> Volume:
    out = _run(net, [edge_image, noise])
    if out.shape != as_array(edge_image).shape:
        raise ValueError("LR generator changed the image shape; check the side against the U-Net depth")
    return Volume(out)


def hr_generator_forward(net: Network, edge_patch, lowres_up_patch, noise) -> Volume:
    """Patch generator. ``lowres_up_patch`` is ``None`` for the unconditioned two-channel variant."""
    channels = [edge_patch, noise] if lowres_up_patch is None else [edge_patch, lowres_up_patch, noise]
    return Volume(_run(net, channels))


def discriminator_forward(net: Network, channels) -> Volume:
    out = _run(net, list(channels))
    return Volume(out if out.ndim >= 2 else out.reshape(1, -1))


def discriminator_output_side(side: int, spec: ArchSpec) -> int:
    for layer in spec.layers:
        if layer.kind == "conv":
            side = (side + 2 * layer.padding - layer.kernel) // layer.stride + 1
        elif layer.kind == "convt":
            side = (side - 1) * layer.stride - 2 * layer.padding + layer.kernel
    return side


# --------------------------------------------------------------------------
# adversarial objectives

def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    d_real = d_real.clamp(PROB_EPS, 1 - PROB_EPS)
    d_fake = d_fake.clamp(PROB_EPS, 1 - PROB_EPS)
    return -torch.log(d_real).mean() - torch.log1p(-d_fake).mean()


def generator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss, -mean(log D(fake))."""
    return -torch.log(d_fake.clamp(PROB_EPS, 1 - PROB_EPS)).mean()


def gan_losses(d_real, d_fake) -> tuple:
    """Return ``(loss_d, loss_g)`` as floats for two realness maps."""
    a, b = as_array(d_real), as_array(d_fake)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    a = torch.from_numpy(np.asarray(a, np.float64))
    b = torch.from_numpy(np.asarray(b, np.float64))
    return float(discriminator_loss(a, b)), float(generator_loss(b))


# --------------------------------------------------------------------------
# noise

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def noise_seed(global_seed: int, scale: int, origin=()) -> int:
    """64-bit seed mixed from (global seed, scale, origin); independent of evaluation order."""
    h = _splitmix64(int(global_seed) & _MASK64)
    for v in (scale, len(origin), *origin):
        h = _splitmix64(h ^ (int(v) & _MASK64))
    return h


def make_noise(shape, global_seed: int, scale: int, origin=()) -> np.ndarray:
    rng = np.random.default_rng(noise_seed(global_seed, scale, origin))
    return rng.standard_normal(tuple(shape)).astype(np.float32)


# --------------------------------------------------------------------------
# checkpoint container

MAGIC = b"MSGAN001\n"


class CheckpointError(ValueError):
    pass


def write_container(path, meta: dict, tensors: dict) -> None:
    """Write ``MAGIC``, a ``key = value`` header, ``data:`` and float32 tensors in insertion order.

    ``meta`` values are written verbatim; every tensor gets a ``tensor.<name>``
    line carrying its shape so the payload can be sliced on load.
    """
    items = list(meta.items())
    items.append(("tensors", " ".join(tensors)))
    for name, arr in tensors.items():
        items.append((f"tensor.{name}", " ".join(str(n) for n in np.shape(arr)) or "scalar"))
    payload = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in tensors.values())
    with open(path, "wb") as fh:
        fh.write(MAGIC + format_kv(items).encode("utf-8") + b"data:\n" + payload)


def read_container(path) -> tuple:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{os.fspath(path)}: bad magic, not an MSGAN001 checkpoint")
    try:
        text, payload = split_header(blob[len(MAGIC):])
        kv = parse_kv(text)
    except (KeyValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{os.fspath(path)}: malformed header: {exc}") from exc
    names = kv.pop("tensors", "").split()
    tensors, offset = {}, 0
    for name in names:
        dims = kv.pop(f"tensor.{name}")
        shape = () if dims == "scalar" else tuple(int(t) for t in dims.split())
        n = int(np.prod(shape)) if shape else 1
        chunk = payload[offset: offset + 4 * n]
        if len(chunk) != 4 * n:
            raise CheckpointError(f"{os.fspath(path)}: payload truncated at tensor {name!r}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        offset += 4 * n
    if offset != len(payload):
        raise CheckpointError(f"{os.fspath(path)}: {len(payload) - offset} trailing payload bytes")
    return kv, tensors


def save_network(net: Network, path, meta: Optional[dict] = None) -> None:
    header = dict(meta or {})
    header.update(net.spec.kv_items())
    header["seed"] = net.seed
    write_container(path, header, {f"p{i}": a for i, a in enumerate(net.flat_arrays())})


def load_network(path) -> tuple:
    """Return ``(network, remaining header dict)``."""
    kv, tensors = read_container(path)
    spec = ArchSpec.from_kv(kv)
    net = Network(spec, seed=int(kv.get("seed", 0)))
    net.load_arrays([tensors[f"p{i}"] for i in range(len(spec.param_shapes()))])
    return net, kv
