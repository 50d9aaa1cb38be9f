"""Full-image inference: whole-image LR generation, then per-scale patch refinement.

Two modes:

``multiscale``
    y0 = LR generator on the scale-0 edges. For every higher scale the previous
    output is upsampled, cut into reflection-padded windows on a trimmed-core
    grid, refined patch by patch, and the cores are stitched back without
    overlap.
``independent_overlap``
    Baseline: one unconditioned patch generator at the finest scale sees only
    edges + noise; patches overlap by 5 voxels and are averaged.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from msgan.grid import Volume, as_array, upsample2
from msgan.nets import Network, make_noise
from msgan.pyramid import PatchGrid, Pyramid, compute_receptive_field, make_patch_grid, reflect_index
from msgan.train import load_checkpoint

MODES = ("multiscale", "independent_overlap")
DEFAULT_OVERLAP = 5


class MissingModelError(LookupError):
    pass


# --------------------------------------------------------------------------
# generator backends

class LRModel:
    def __init__(self, net: Network, input_side: Optional[int] = None):
        self.net = net
        self.input_side = input_side

    def __call__(self, edges: np.ndarray, noise: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.stack([edges, noise]).astype(np.float32))[None]
        with torch.no_grad():
            return self.net(x)[0, 0].numpy()


class HRModel:
    """Patch generator; ``conditioned`` is False for the edges-only baseline network."""

    def __init__(self, net: Network, input_side: Optional[int] = None):
        self.net = net
        self.input_side = input_side
        self.conditioned = net.spec.in_channels == 3
        self.margin = compute_receptive_field(net.spec)

    def __call__(self, edge_patch, lowres_patch, noise) -> np.ndarray:
        chans = [edge_patch, lowres_patch, noise] if self.conditioned else [edge_patch, noise]
        x = torch.from_numpy(np.stack(chans).astype(np.float32))[None]
        with torch.no_grad():
            return self.net(x)[0, 0].numpy()


class PassthroughHR:
    """Test backend that returns its upscaled previous-scale channel unchanged."""

    conditioned = True

    def __init__(self, margin: int = 8):
        self.margin = margin

    def __call__(self, edge_patch, lowres_patch, noise) -> np.ndarray:
        return np.array(lowres_patch, copy=True)


@dataclass
class ModelSet:
    lr: Optional[object] = None
    hr: dict = field(default_factory=dict)
    independent: Optional[object] = None


def load_models(models_dir) -> ModelSet:
    """Load whatever generator checkpoints exist in ``models_dir``."""
    models_dir = Path(models_dir)
    ms = ModelSet()
    for path in sorted(models_dir.glob("*.ckpt")):
        ckpt = load_checkpoint(path)
        if ckpt.variant == "independent":
            ms.independent = HRModel(ckpt.generator, ckpt.input_side)
        elif ckpt.scale == 0:
            ms.lr = LRModel(ckpt.generator, ckpt.input_side)
        else:
            ms.hr[ckpt.scale] = HRModel(ckpt.generator, ckpt.input_side)
    return ms


# --------------------------------------------------------------------------
# stitching

def stitch(patches, grid: PatchGrid) -> Volume:
    """Place one trimmed core per origin; every voxel is written exactly once.

    Patches are core-sized arrays (side ``grid.stride``), clipped by the
    caller at the far border or full-sized and clipped here.
    """
    patches = list(patches)
    if len(patches) != len(grid.origins):
        raise ValueError(f"got {len(patches)} patches for {len(grid.origins)} grid origins")
    out = np.empty(grid.scale_shape, np.float32)
    for patch, origin in zip(patches, grid.origins):
        patch = as_array(patch)
        core = grid.core_slices(origin)
        want = tuple(s.stop - s.start for s in core)
        if patch.shape != (grid.stride,) * grid.ndim and patch.shape != want:
            raise ValueError(f"patch at {origin} has shape {patch.shape}, expected {(grid.stride,) * grid.ndim}")
        out[core] = patch[tuple(slice(0, w) for w in want)]
    return Volume(out)


@dataclass(frozen=True)
class OverlapGrid:
    """Untrimmed patches placed at stride ``patch_size - overlap``; the last one per axis is pulled back inside."""

    scale_shape: tuple
    patch_size: int
    overlap: int
    origins: tuple

    @property
    def ndim(self) -> int:
        return len(self.scale_shape)

    def slices(self, origin) -> tuple:
        return tuple(slice(o, min(o + self.patch_size, n)) for o, n in zip(origin, self.scale_shape))

    def window(self, x, origin) -> np.ndarray:
        x = as_array(x)
        index = [reflect_index(np.arange(o, o + self.patch_size), n) for o, n in zip(origin, self.scale_shape)]
        return x[np.ix_(*index)]

    def seam_positions(self, axis: int) -> list:
        n = self.scale_shape[axis]
        starts = {o[axis] for o in self.origins}
        cuts = {s for s in starts if 0 < s < n} | {s + self.patch_size for s in starts if s + self.patch_size < n}
        return sorted(cuts)


def make_overlap_grid(scale_shape, patch_size: int = 32, overlap: int = DEFAULT_OVERLAP) -> OverlapGrid:
    if not 0 <= overlap < patch_size:
        raise ValueError(f"overlap {overlap} must be in [0, patch_size={patch_size})")
    step = patch_size - overlap
    axes = []
    for n in scale_shape:
        last = max(n - patch_size, 0)
        pos = list(range(0, last + 1, step))
        if pos[-1] != last:
            pos.append(last)
        axes.append(pos)
    return OverlapGrid(tuple(scale_shape), patch_size, overlap, tuple(itertools.product(*axes)))


def stitch_overlap_average(patches, grid: OverlapGrid) -> Volume:
    """Each voxel is the arithmetic mean of every patch covering it."""
    patches = list(patches)
    if len(patches) != len(grid.origins):
        raise ValueError(f"got {len(patches)} patches for {len(grid.origins)} grid origins")
    acc = np.zeros(grid.scale_shape, np.float64)
    cnt = np.zeros(grid.scale_shape, np.int64)
    for patch, origin in zip(patches, grid.origins):
        sl = grid.slices(origin)
        patch = as_array(patch)
        if patch.shape != (grid.patch_size,) * grid.ndim:
            raise ValueError(f"patch at {origin} has shape {patch.shape}")
        acc[sl] += patch[tuple(slice(0, s.stop - s.start) for s in sl)]
        cnt[sl] += 1
    return Volume(acc / cnt)


def seam_score(v, grid) -> float:
    """Mean |difference| across patch-boundary neighbour pairs over the same for interior pairs.

    About 1.0 for seamless images; a constant image is defined as 1.0.
    """
    x = as_array(v).astype(np.float64)
    seam_sum = seam_n = inner_sum = inner_n = 0.0
    for axis in range(x.ndim):
        d = np.abs(np.diff(x, axis=axis))
        is_seam = np.zeros(x.shape[axis] - 1, bool)
        cuts = [c for c in grid.seam_positions(axis) if 0 < c < x.shape[axis]]
        is_seam[np.asarray(cuts, int) - 1] = True
        d = np.moveaxis(d, axis, 0)
        seam_sum += d[is_seam].sum()
        seam_n += d[is_seam].size
        inner_sum += d[~is_seam].sum()
        inner_n += d[~is_seam].size
    if seam_n == 0:
        return 1.0
    seam_mean = seam_sum / seam_n
    inner_mean = inner_sum / inner_n if inner_n else 0.0
    if inner_mean == 0.0:
        return 1.0 if seam_mean == 0.0 else float("inf")
    return float(seam_mean / inner_mean)


# --------------------------------------------------------------------------
# generation

def _with_spacing(v: Volume, like) -> Volume:
    return Volume(v.data, like.spacing) if isinstance(like, Volume) else v


def refine_scale(model, edges, lowres_up, seed: int, scale: int, patch_size: int,
                 reverse: bool = False) -> Volume:
    """One multiscale step: tile, run the patch model, keep trimmed cores, stitch."""
    grid = make_patch_grid(as_array(edges).shape, patch_size, model.margin)
    order = list(range(len(grid.origins)))
    if reverse:
        order.reverse()
    cores = [None] * len(order)
    for k in order:
        origin = grid.origins[k]
        noise = make_noise((patch_size,) * grid.ndim, seed, scale, origin)
        out = model(grid.window(edges, origin), grid.window(lowres_up, origin), noise)
        cores[k] = out[grid.core_in_patch(origin)]
    return _with_spacing(stitch(cores, grid), edges)


def generate(models: ModelSet, edge_pyramid: Pyramid, seed: int = 0, mode: str = "multiscale",
             patch_size: int = 32, overlap: int = DEFAULT_OVERLAP, reverse: bool = False,
             intermediates: Optional[list] = None) -> Volume:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    edges = edge_pyramid.edges
    n = len(edges) - 1
    if mode == "independent_overlap":
        if models.independent is None:
            raise MissingModelError("independent_overlap mode needs the independent patch checkpoint")
        return _generate_independent(models.independent, edges[n], seed, n, patch_size, overlap, reverse)

    if models.lr is None:
        raise MissingModelError("missing checkpoint for scale 0")
    for i in range(1, n + 1):
        if i not in models.hr:
            raise MissingModelError(f"missing checkpoint for scale {i}")
    e0 = as_array(edges[0])
    y = _with_spacing(Volume(models.lr(e0, make_noise(e0.shape, seed, 0))), edges[0])
    if intermediates is not None:
        intermediates.append(y)
    for i in range(1, n + 1):
        y = refine_scale(models.hr[i], edges[i], upsample2(y), seed, i, patch_size, reverse)
        if intermediates is not None:
            intermediates.append(y)
    return y


def _generate_independent(model, edges, seed, scale, patch_size, overlap, reverse) -> Volume:
    grid = make_overlap_grid(as_array(edges).shape, patch_size, overlap)
    order = list(range(len(grid.origins)))
    if reverse:
        order.reverse()
    patches = [None] * len(order)
    for k in order:
        origin = grid.origins[k]
        noise = make_noise((patch_size,) * grid.ndim, seed, scale, origin)
        patches[k] = model(grid.window(edges, origin), None, noise)
    return _with_spacing(stitch_overlap_average(patches, grid), edges)
