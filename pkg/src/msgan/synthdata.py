"""Procedural two-domain phantoms with shared geometry.

Domain A is noisy and sharpened (think sharp reconstruction kernel), domain B
is the same geometry smoothed (soft kernel). B serves as ground truth when
translating edges extracted from A.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from msgan.grid import Volume, load_volume, save_volume
from msgan.pyramid import scale_count

BACKGROUND = -0.8


@dataclass(frozen=True)
class PhantomStyle:
    noise_std: float = 0.02          # domain A additive noise
    sharpen: float = 0.3             # domain A unsharp-mask amount
    sharpen_sigma: float = 1.0
    smooth_sigma: float = 0.7        # domain B Gaussian smoothing, voxels
    shading_std: float = 0.02        # smooth low-frequency field shared by both domains
    shading_sigma: float = 0.06      # its correlation length, fraction of the side
    n_waves: int = 3
    # accepted range of boundary-voxel fraction at the reference resolution;
    # keeps the strongest 10% of gradients on shared geometry in both domains
    density_range: tuple = (0.10, 0.16)


def _random_rotation(rng, ndim):
    if ndim == 2:
        a = rng.uniform(0, np.pi)
        return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _draw_shapes(rng, ndim, n_waves):
    ells = [dict(center=rng.uniform(0.28, 0.72, ndim),
                 radii=rng.uniform(0.1, 0.26, ndim),
                 rot=_random_rotation(rng, ndim),
                 level=rng.uniform(0.1, 0.5))
            for _ in range(int(rng.integers(2, 5)))]
    waves = [(rng.standard_normal(ndim) * rng.uniform(6, 12), rng.uniform(0, 2 * np.pi))
             for _ in range(n_waves)]
    return ells, waves


def _render(ells, waves, side, ndim):
    pts = ((np.indices((side,) * ndim, dtype=np.float64) + 0.5) / side).reshape(ndim, -1)
    # interior texture: background-valued blobs punched into each ellipse
    solid = sum(np.cos(2 * np.pi * (k @ pts) + ph) for k, ph in waves) > 0
    img = np.full(pts.shape[1], BACKGROUND)
    for e in ells:
        local = e["rot"].T @ (pts - e["center"][:, None])
        inside = np.sum((local / e["radii"][:, None]) ** 2, axis=0) <= 1.0
        img[inside & solid] = e["level"]
    return img.reshape((side,) * ndim)


def boundary_density(img: np.ndarray) -> float:
    """Fraction of voxels that differ from at least one face neighbour."""
    mask = np.zeros(img.shape, bool)
    for axis in range(img.ndim):
        d = np.diff(img, axis=axis) != 0
        lo = [slice(None)] * img.ndim
        hi = [slice(None)] * img.ndim
        lo[axis], hi[axis] = slice(None, -1), slice(1, None)
        mask[tuple(lo)] |= d
        mask[tuple(hi)] |= d
    return float(mask.mean())


def phantom_geometry(seed: int, side: int, ndim: int, style: PhantomStyle = PhantomStyle()):
    """Piecewise-constant geometry for ``seed`` rendered at ``side``.

    Shapes are drawn in normalized coordinates and redrawn (deterministically)
    until their boundary density at the reference resolution falls in
    ``style.density_range``. Returns ``(image, ellipse_centers)``.
    """
    rng = np.random.default_rng([int(seed), 0x5EED])
    ref_side = 128 if ndim == 2 else 48
    lo, hi = style.density_range
    for _ in range(200):
        ells, waves = _draw_shapes(rng, ndim, style.n_waves)
        if lo <= boundary_density(_render(ells, waves, ref_side, ndim)) <= hi:
            break
    img = _render(ells, waves, side, ndim)
    shade_rng = np.random.default_rng([int(seed), 0x5AD])
    field = ndimage.gaussian_filter(shade_rng.standard_normal((32,) * ndim), 32 * style.shading_sigma, mode="wrap")
    field = ndimage.zoom(field / field.std(), side / 32, order=1, mode="grid-wrap", grid_mode=True)
    img = img + style.shading_std * field
    return img, np.array([e["center"] for e in ells])


def gen_phantom(seed: int, side: int, ndim: int = 2, base_size: int = 32,
                style: PhantomStyle = PhantomStyle()):
    """Return ``(domain_a, domain_b)`` Volumes sharing one geometry."""
    scale_count(side, base_size)
    if ndim not in (2, 3):
        raise ValueError(f"ndim must be 2 or 3, got {ndim}")
    geom, _ = phantom_geometry(seed, side, ndim, style)
    noise_rng = np.random.default_rng([int(seed), 0xA])
    sharp = geom + style.sharpen * (geom - ndimage.gaussian_filter(geom, style.sharpen_sigma))
    a = sharp + style.noise_std * noise_rng.standard_normal(geom.shape)
    b = ndimage.gaussian_filter(geom, style.smooth_sigma)
    return Volume(np.clip(a, -1, 1)), Volume(np.clip(b, -1, 1))


def gen_dataset(seed: int, count: int, side: int, ndim: int, out_dir, base_size: int = 32) -> list:
    """Write ``count`` phantom pairs plus ``manifest.csv``; returns the manifest rows."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    root = np.random.SeedSequence(int(seed))
    rows = []
    for index, child in enumerate(root.spawn(count)):
        item_seed = int(child.generate_state(1, np.uint32)[0])
        a, b = gen_phantom(item_seed, side, ndim, base_size)
        pa, pb = f"pair{index:04d}_A.ndimg", f"pair{index:04d}_B.ndimg"
        save_volume(a, out / pa)
        save_volume(b, out / pb)
        rows.append({"index": index, "seed": item_seed, "path_A": pa, "path_B": pb})
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["index", "seed", "path_A", "path_B"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def read_manifest(path) -> list:
    """Rows of a manifest with ``path_A``/``path_B`` resolved against the manifest's directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"index", "seed", "path_A", "path_B"}:
        raise ValueError(f"{path}: unexpected manifest columns {sorted(rows[0])}")
    for r in rows:
        r["index"], r["seed"] = int(r["index"]), int(r["seed"])
        r["path_A"] = str(path.parent / r["path_A"])
        r["path_B"] = str(path.parent / r["path_B"])
    return rows


def load_pair(row) -> tuple:
    return load_volume(row["path_A"]), load_volume(row["path_B"])
