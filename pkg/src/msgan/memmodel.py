"""Analytic lower-bound memory model for GAN training at batch size one.

Counts one forward and one backward pass through a generator and a
discriminator: every layer output once forward and once more for its
gradient, parameters and parameter gradients once each, plus the input
image and the real target image. Optimizer state is not included. All
tensors are 32-bit floats.

The baseline templates (``dcgan3d``, ``pix2pix3d``, ``pggan3d``) are
representative 3D translations of the published 2D (or shape-only)
architectures; their exact 3D layer lists were never published, so the
absolute byte counts are template-dependent.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from msgan.nets import (CONCAT, INORM, LRELU, POOL2, PUSH, SIGMOID, TANH, UP2, ArchSpec,
                        conv, convt, discriminator_spec, hr_generator_spec, lr_generator_spec)

BYTES_PER_FLOAT = 4
TEMPLATES = ("dcgan3d", "pix2pix3d", "pggan3d", "lr", "hr")
MONOLITHIC = ("dcgan3d", "pix2pix3d", "pggan3d")
LR_SIDE = 64
HR_SIDE = 32


@dataclass(frozen=True)
class LayerRecord:
    name: str
    activation_bytes: int
    gradient_bytes: int
    param_bytes: int
    param_grad_bytes: int

    @property
    def total(self) -> int:
        return self.activation_bytes + self.gradient_bytes + self.param_bytes + self.param_grad_bytes


@dataclass(frozen=True)
class MemoryEstimate:
    records: tuple
    generator_bytes: int
    discriminator_bytes: int
    image_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.generator_bytes + self.discriminator_bytes + self.image_bytes

    @property
    def activation_bytes(self) -> int:
        return sum(r.activation_bytes for r in self.records)

    @property
    def param_bytes(self) -> int:
        return sum(r.param_bytes for r in self.records)


def _conv_out(side, layer, name):
    k, s, p = layer.kernel, layer.stride, layer.padding
    if layer.kind == "convt":
        return (side - 1) * s - 2 * p + k
    span = side + 2 * p - k
    if span < 0 or span % s:
        raise ValueError(f"{name}: side {side} is incompatible with kernel {k}, stride {s}, padding {p}")
    return span // s + 1


def layer_records(arch: ArchSpec, side: int, prefix: str = "") -> tuple:
    """Per-layer records for one pass of ``arch`` on a ``side``-wide cube; returns (records, output side)."""
    nd = arch.ndim
    ch = arch.in_channels
    stack, out = [], []
    shapes = iter(arch.param_shapes())
    for i, layer in enumerate(arch.layers):
        name = f"{prefix}{i}.{layer.kind}"
        n_par = 0
        elems = 0
        if layer.kind in ("conv", "convt"):
            side = _conv_out(side, layer, name)
            if side < 1:
                raise ValueError(f"{name}: spatial extent vanished")
            ch = layer.out_ch
            n_par = sum(int(np.prod(next(shapes))) for _ in range(2))
            elems = ch * side ** nd
        elif layer.kind == "resblock":
            n_par = sum(int(np.prod(next(shapes))) for _ in range(4))
            elems = 4 * ch * side ** nd         # conv, activation, conv, sum
        elif layer.kind == "push":
            stack.append((ch, side))
            continue
        elif layer.kind == "concat":
            sch, sside = stack.pop()
            if sside != side:
                raise ValueError(f"{name}: skip of side {sside} meets side {side}")
            ch += sch
            elems = ch * side ** nd
        elif layer.kind == "up2":
            side *= 2
            elems = ch * side ** nd
        elif layer.kind == "pool2":
            if side % 2:
                raise ValueError(f"{name}: cannot pool odd side {side}")
            side //= 2
            elems = ch * side ** nd
        else:                                   # inorm, lrelu, tanh, sigmoid
            elems = ch * side ** nd
        b = BYTES_PER_FLOAT
        out.append(LayerRecord(name, elems * b, elems * b, n_par * b, n_par * b))
    return tuple(out), side


def estimate_memory(arch, input_side: int, ndim: Optional[int] = None,
                    latent_side: Optional[int] = None) -> MemoryEstimate:
    """Memory for one training step of ``arch = (G, D)`` producing ``input_side``-wide images.

    ``latent_side`` is the generator's input side when it differs from the
    image side (noise-vector generators use 1). ``D`` may be None.
    """
    G, D = arch if isinstance(arch, tuple) else (arch, None)
    if ndim is not None and G.ndim != ndim:
        raise ValueError(f"{G.name} is {G.ndim}D, asked for {ndim}D")
    if input_side < 1:
        raise ValueError(f"side must be positive, got {input_side}")
    g_side = input_side if latent_side is None else latent_side
    g_rec, g_out = layer_records(G, g_side, "G.")
    if g_out != input_side:
        raise ValueError(f"{G.name} maps side {g_side} to {g_out}, expected {input_side}")
    d_rec = ()
    if D is not None:
        d_rec, _ = layer_records(D, input_side, "D.")
    vox = input_side ** G.ndim
    images = (G.in_channels * g_side ** G.ndim + G.out_channels * vox) * BYTES_PER_FLOAT
    return MemoryEstimate(g_rec + d_rec, sum(r.total for r in g_rec), sum(r.total for r in d_rec), images)


# --------------------------------------------------------------------------
# templates

def _log2_exact(side, base, name):
    if side < base or side % base or (side // base) & (side // base - 1):
        raise ValueError(f"{name}: side {side} must be {base} times a power of two")
    return (side // base).bit_length() - 1


def dcgan3d(side: int, z_dim: int = 200, top_ch: int = 512, min_ch: int = 64):
    """3D-GAN (voxel DCGAN): 1-cube latent -> 4-cube with ``top_ch`` channels, then halving per doubling."""
    n_up = _log2_exact(side, 4, "dcgan3d")
    chs = [max(top_ch // 2 ** i, min_ch) for i in range(n_up + 1)]
    G = [convt(z_dim, chs[0], 4, 1, 0), INORM, LRELU]
    for i in range(n_up - 1):
        G += [convt(chs[i], chs[i + 1], 4, 2, 1), INORM, LRELU]
    G += [convt(chs[n_up - 1], 1, 4, 2, 1), SIGMOID] if n_up else [conv(chs[0], 1, 1)]
    dch = chs[::-1]
    D, c_in = [], 1
    for i in range(n_up):
        D += [conv(c_in, dch[i + 1], 4, 2, 1)] + ([INORM] if i else []) + [LRELU]
        c_in = dch[i + 1]
    D += [conv(c_in, 1, 4, 1, 0), SIGMOID]
    return ArchSpec("dcgan3d_g", 3, z_dim, G), ArchSpec("dcgan3d_d", 3, 1, D), 1


def pix2pix3d(side: int, ngf: int = 64, ndf: int = 64, cap: int = 512):
    """U-Net down to a 1-cube (k4 s2 convolutions, skip at every level) plus a 3-layer PatchGAN."""
    depth = _log2_exact(side, 1, "pix2pix3d")
    if depth < 3:
        raise ValueError(f"pix2pix3d: side {side} is too small for the PatchGAN discriminator")
    chs = [min(ngf * 2 ** i, cap) for i in range(depth)]
    G, c = [], 1
    for i, co in enumerate(chs):
        G += [PUSH] if i else []
        G += [conv(c, co, 4, 2, 1)] + ([INORM] if 0 < i < depth - 1 else []) + [LRELU]
        c = co
    for i in range(depth - 1, 0, -1):
        G += [convt(c, chs[i - 1], 4, 2, 1), INORM, LRELU, CONCAT]
        c = 2 * chs[i - 1]
    G += [convt(c, 1, 4, 2, 1), TANH]
    D = [conv(2, ndf, 4, 2, 1), LRELU,
         conv(ndf, 2 * ndf, 4, 2, 1), INORM, LRELU,
         conv(2 * ndf, 4 * ndf, 4, 2, 1), INORM, LRELU,
         conv(4 * ndf, 8 * ndf, 4, 1, 1), INORM, LRELU,
         conv(8 * ndf, 1, 4, 1, 1), SIGMOID]
    return ArchSpec("pix2pix3d_g", 3, 1, G), ArchSpec("pix2pix3d_d", 3, 2, D), None


def _pggan_ch(res: int) -> int:
    return min(512, 512 * 32 // res) if res > 32 else 512


def pggan3d(side: int, z_dim: int = 512):
    """Fully grown progressive GAN (no fading branch): 4-cube stem, one up/conv/conv block per doubling."""
    n_up = _log2_exact(side, 4, "pggan3d")
    c = _pggan_ch(4)
    G = [convt(z_dim, c, 4, 1, 0), LRELU, conv(c, c, 3, 1, 1), LRELU]
    res = 4
    for _ in range(n_up):
        res *= 2
        co = _pggan_ch(res)
        G += [UP2, conv(c, co, 3, 1, 1), LRELU, conv(co, co, 3, 1, 1), LRELU]
        c = co
    G += [conv(c, 1, 1)]
    c = _pggan_ch(side)
    D = [conv(1, c, 1), LRELU]
    res = side
    for _ in range(n_up):
        co = _pggan_ch(res // 2)
        D += [conv(c, c, 3, 1, 1), LRELU, conv(c, co, 3, 1, 1), LRELU, POOL2]
        c, res = co, res // 2
    D += [conv(c, c, 3, 1, 1), LRELU, conv(c, c, 4, 1, 0), LRELU, conv(c, 1, 1)]
    return ArchSpec("pggan3d_g", 3, z_dim, G), ArchSpec("pggan3d_d", 3, 1, D), 1


def lr_template(side: int):
    """The scale-0 networks: always trained on LR_SIDE cubes whatever the target size."""
    _log2_exact(side, LR_SIDE, "lr")
    return lr_generator_spec(3), discriminator_spec(3, 2), None


def hr_template(side: int):
    """Patch networks: always trained on HR_SIDE cubes whatever the target size."""
    _log2_exact(side, LR_SIDE, "hr")
    return hr_generator_spec(3), discriminator_spec(3, 3), None


_BUILDERS = {"dcgan3d": dcgan3d, "pix2pix3d": pix2pix3d, "pggan3d": pggan3d,
             "lr": lr_template, "hr": hr_template}
_TRAIN_SIDE = {"lr": LR_SIDE, "hr": HR_SIDE}


def template_estimate(name: str, side: int) -> MemoryEstimate:
    if name not in _BUILDERS:
        raise ValueError(f"unknown template {name!r}; expected one of {TEMPLATES}")
    if side < 1:
        raise ValueError(f"side must be positive, got {side}")
    G, D, latent = _BUILDERS[name](side)
    return estimate_memory((G, D), _TRAIN_SIDE.get(name, side), 3, latent)


def sweep_sizes(name: str, sides: Sequence[int]) -> list:
    """``[(side, total_bytes)]`` sorted by side."""
    return [(s, template_estimate(name, s).total_bytes) for s in sorted(set(int(s) for s in sides))]


# --------------------------------------------------------------------------
# cubic regression

@dataclass(frozen=True)
class CubicFit:
    coefficients: tuple                  # (a3, a2, a1, a0)
    residual: float

    def __call__(self, s):
        return extrapolate(self, s)


def cubic_fit(points) -> CubicFit:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (s, bytes) pairs")
    if len(np.unique(pts[:, 0])) < 4:
        raise ValueError("a cubic fit needs at least 4 distinct sides")
    s, y = pts[:, 0], pts[:, 1]
    scale = np.abs(s).max()
    A = np.vander(s / scale, 4)          # columns u^3, u^2, u, 1 with u = s / scale
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    coef = coef / scale ** np.arange(3, -1, -1)
    resid = float(np.linalg.norm(np.polyval(coef, s) - y))
    return CubicFit(tuple(float(c) for c in coef), resid)


def extrapolate(fit: CubicFit, s):
    return np.polyval(np.asarray(fit.coefficients), np.asarray(s, dtype=np.float64))


def sweep_csv(rows_by_template: dict) -> str:
    """CSV text with columns side, template, bytes."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["side", "template", "bytes"])
    for name, rows in rows_by_template.items():
        for side, b in rows:
            w.writerow([side, name, int(b)])
    return buf.getvalue()
