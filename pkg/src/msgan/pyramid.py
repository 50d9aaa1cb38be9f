"""Resolution pyramids, patch tilings and conditioning triples."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from msgan.grid import EdgeConfig, Volume, as_array, downsample2, extract_edges, upsample2
from msgan.nets import ArchSpec


@dataclass(frozen=True, eq=False)
class Pyramid:
    """Images and edge maps per scale; scale 0 has side ``base_size``, each next scale doubles it."""

    base_size: int
    images: tuple
    edges: tuple
    _upscaled: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_scales(self) -> int:
        return len(self.edges) - 1

    @property
    def ndim(self) -> int:
        return self.edges[0].ndim

    def upscaled(self, scale: int) -> Volume:
        """``upsample2(images[scale - 1])``, cached."""
        if not 1 <= scale <= self.n_scales:
            raise IndexError(f"scale {scale} outside 1..{self.n_scales}")
        if scale not in self._upscaled:
            self._upscaled[scale] = upsample2(self.images[scale - 1])
        return self._upscaled[scale]


def scale_count(side: int, base_size: int) -> int:
    """k such that side == base_size * 2**k; ValueError otherwise."""
    if base_size < 1 or side < base_size or side % base_size:
        raise ValueError(f"side {side} is not a power-of-two multiple of base size {base_size}")
    ratio = side // base_size
    if ratio & (ratio - 1):
        raise ValueError(f"side {side} is not a power-of-two multiple of base size {base_size}")
    return ratio.bit_length() - 1


def _isotropic_side(shape) -> int:
    if len(set(shape)) != 1:
        raise ValueError(f"pyramids need isotropic volumes, got shape {tuple(shape)}")
    return shape[0]


def build_pyramid(v, base_size: int = 64, edge_cfg: EdgeConfig = EdgeConfig()) -> Pyramid:
    if not isinstance(v, Volume):
        v = Volume(v)
    k = scale_count(_isotropic_side(v.shape), base_size)
    images = [v]
    for _ in range(k):
        images.append(downsample2(images[-1]))
    images.reverse()
    edges = tuple(extract_edges(im, edge_cfg) for im in images)
    return Pyramid(base_size, tuple(images), edges)


def build_edge_pyramid(v, base_size: int = 64, edge_cfg: EdgeConfig = EdgeConfig()) -> Pyramid:
    """Pyramid whose images are dropped after edge extraction (all that inference needs)."""
    p = build_pyramid(v, base_size, edge_cfg)
    return Pyramid(base_size, (), p.edges)


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Map arbitrary integer coordinates into [0, n) by mirror reflection (edge not repeated)."""
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    j = np.mod(idx, period)
    return np.where(j >= n, period - j, j)


@dataclass(frozen=True)
class PatchGrid:
    """Trimmed-core tiling of one scale.

    Each origin is the first voxel of a core region of side ``stride``
    (clipped at the far border). The network reads a ``patch_size`` window
    starting ``margin`` voxels before the origin, reflection-padded outside
    the domain, and only the core of its output is kept.
    """

    scale_shape: tuple
    patch_size: int
    margin: int
    origins: tuple

    @property
    def stride(self) -> int:
        return self.patch_size - 2 * self.margin

    @property
    def ndim(self) -> int:
        return len(self.scale_shape)

    def core_slices(self, origin) -> tuple:
        return tuple(slice(o, min(o + self.stride, n)) for o, n in zip(origin, self.scale_shape))

    def core_in_patch(self, origin) -> tuple:
        """Slices selecting the (possibly clipped) core inside a patch_size window."""
        return tuple(slice(self.margin, self.margin + min(self.stride, n - o))
                     for o, n in zip(origin, self.scale_shape))

    def window(self, x, origin) -> np.ndarray:
        x = as_array(x)
        if x.shape != tuple(self.scale_shape):
            raise ValueError(f"array shape {x.shape} does not match grid shape {self.scale_shape}")
        index = [reflect_index(np.arange(o - self.margin, o - self.margin + self.patch_size), n)
                 for o, n in zip(origin, self.scale_shape)]
        return x[np.ix_(*index)]

    def seam_positions(self, axis: int) -> list:
        """Indices i such that voxels i-1 and i sit in different core regions along ``axis``."""
        return list(range(self.stride, self.scale_shape[axis], self.stride))


def make_patch_grid(scale_shape, patch_size: int = 32, margin: int = 0) -> PatchGrid:
    scale_shape = tuple(int(n) for n in scale_shape)
    stride = patch_size - 2 * margin
    if margin < 0 or stride <= 0:
        raise ValueError(f"patch {patch_size} with margin {margin} leaves a non-positive stride")
    if any(n < 1 for n in scale_shape):
        raise ValueError(f"extents must be positive, got {scale_shape}")
    axes = [range(0, n, stride) for n in scale_shape]
    return PatchGrid(scale_shape, patch_size, margin, tuple(itertools.product(*axes)))


def extract_training_triple(p: Pyramid, scale: int, origin, patch_size: int = 32, margin: int = 8):
    """Return ``(edge_patch, lowres_up_patch, target_patch)`` arrays for one grid origin."""
    if not 1 <= scale <= p.n_scales:
        raise IndexError(f"scale {scale} outside 1..{p.n_scales}")
    grid = make_patch_grid(p.edges[scale].shape, patch_size, margin)
    origin = tuple(int(o) for o in origin)
    if origin not in set(grid.origins):
        raise IndexError(f"origin {origin} is not on the scale-{scale} grid")
    return (grid.window(p.edges[scale], origin),
            grid.window(p.upscaled(scale), origin),
            grid.window(p.images[scale], origin))


def compute_receptive_field(arch: ArchSpec) -> int:
    """Trim margin (RF - 1) / 2 for a stride-1 network; RF = 1 + sum of (kernel - 1)."""
    rf = 1
    for i, layer in enumerate(arch.layers):
        if layer.kind == "conv":
            if layer.stride != 1:
                raise ValueError(f"{arch.name} layer {i}: stride {layer.stride} changes resolution")
            rf += layer.kernel - 1
        elif layer.kind == "resblock":
            rf += 2 * (layer.kernel - 1)
        elif layer.kind in ("convt", "push", "concat", "up2", "pool2"):
            raise ValueError(f"{arch.name} layer {i}: {layer.kind} is not allowed in a stride-1 patch network")
        elif layer.kind == "inorm":
            raise ValueError(f"{arch.name} layer {i}: instance norm couples the whole patch")
    return (rf - 1) // 2
