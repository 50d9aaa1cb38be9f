"""Image-quality metrics, Fréchet feature distance, paired t-test and the NLM baseline."""

from __future__ import annotations

import itertools

import numpy as np
from scipy import ndimage, special
import torch

from msgan.grid import Volume, as_array, downsample2, extract_edges, upsample2


def _pair(a, b):
    a = np.asarray(as_array(a), dtype=np.float64)
    b = np.asarray(as_array(b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def ssim(a, b, window: int = 7, L: float = 2.0) -> float:
    """Mean SSIM over all positions of a uniform ``window``-wide box (reflected at borders).

    ``L`` is the dynamic range; 2 for the canonical [-1, 1] intensities.
    """
    a, b = _pair(a, b)
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be odd and positive, got {window}")
    if window > min(a.shape):
        raise ValueError(f"window {window} exceeds the smallest extent {min(a.shape)}")
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    box = lambda x: ndimage.uniform_filter(x, size=window, mode="reflect")
    mu_a, mu_b = box(a), box(b)
    var_a = box(a * a) - mu_a ** 2
    var_b = box(b * b) - mu_b ** 2
    cov = box(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# Fréchet distance

def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(feats_a, feats_b) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (rows are samples).

    ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` with the trace of the
    cross term taken from the eigenvalues of ``S_a^(1/2) S_b S_a^(1/2)``.
    """
    A = np.asarray(feats_a, dtype=np.float64)
    B = np.asarray(feats_b, dtype=np.float64)
    A = A[:, None] if A.ndim == 1 else A
    B = B[:, None] if B.ndim == 1 else B
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    if len(A) < 2 or len(B) < 2:
        raise ValueError("need at least two feature vectors per set")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("non-finite features give a non-finite covariance")
    mu_a, mu_b = A.mean(0), B.mean(0)
    cov_a = np.atleast_2d(np.cov(A, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(B, rowvar=False, ddof=1))
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise ValueError("non-finite covariance")
    root_a = _psd_sqrt(cov_a)
    ev = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    if ev.min() < -1e-8:
        raise ValueError(f"cross-covariance product has eigenvalue {ev.min():.3g} < -1e-8")
    cross = np.sqrt(np.clip(ev, 0, None)).sum()
    diff = mu_a - mu_b
    d = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * cross
    return float(max(d, 0.0))


def _discriminator_channels(x: np.ndarray, n_channels: int) -> list:
    edges = extract_edges(x).data
    if n_channels == 2:
        return [edges, x]
    if n_channels == 3:
        return [edges, upsample2(downsample2(x)).data, x]
    raise ValueError(f"unsupported discriminator input with {n_channels} channels")


def extract_features(v, ckpt) -> np.ndarray:
    """Penultimate-layer discriminator activations, spatially averaged, one row per tile.

    Tiles are non-overlapping, sized by the checkpoint's training input side.
    These are NOT Inception features; distances built on them are
    "FD (pluggable features)", not FID.
    """
    x = np.asarray(as_array(v), dtype=np.float32)
    net, side = ckpt.discriminator, ckpt.input_side
    if x.ndim != net.spec.ndim:
        raise ValueError(f"{x.ndim}D image for a {net.spec.ndim}D discriminator")
    if any(n % side for n in x.shape):
        raise ValueError(f"image shape {x.shape} is not tileable by {side}")
    chans = np.stack(_discriminator_channels(x, net.spec.in_channels)).astype(np.float32)
    upto = net.spec.feature_index()
    rows = []
    for origin in itertools.product(*(range(0, n, side) for n in x.shape)):
        sl = (slice(None),) + tuple(slice(o, o + side) for o in origin)
        t = torch.from_numpy(np.ascontiguousarray(chans[sl]))[None]
        with torch.no_grad():
            f = net(t, upto=upto)[0]
        rows.append(f.reshape(f.shape[0], -1).mean(1).double().numpy())
    return np.array(rows)


# --------------------------------------------------------------------------
# statistics

def paired_ttest(a_scores, b_scores) -> tuple:
    """Two-sided paired Student t-test; returns ``(t, p)``."""
    a = np.asarray(a_scores, dtype=np.float64)
    b = np.asarray(b_scores, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        raise ValueError("differences have zero variance")
    t = d.mean() / (sd / np.sqrt(n))
    df = n - 1
    p = special.betainc(df / 2.0, 0.5, df / (df + t * t))
    return float(t), float(p)


# --------------------------------------------------------------------------
# non-local means

def nlm_filter(v, h: float = 0.1, patch: int = 3, search: int = 7) -> Volume:
    """Brute-force non-local means with reflected borders.

    Weights are ``exp(-||P(x) - P(y)||^2 / h^2)`` with the squared distance
    summed over the ``patch``-wide neighbourhoods, ``y`` ranging over the
    ``search``-wide window around ``x``.
    """
    if patch % 2 == 0 or search % 2 == 0 or patch < 1 or search < 1:
        raise ValueError("patch and search windows must be odd")
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.asarray(as_array(v), dtype=np.float64)
    rp, rs = patch // 2, search // 2
    pad = rp + rs
    P = np.pad(x, pad, mode="reflect")
    ext = tuple(slice(rs, rs + n + 2 * rp) for n in x.shape)       # centres plus patch halo
    core = tuple(slice(rp, rp + n) for n in x.shape)
    centre = P[ext]
    acc = np.zeros(x.shape)
    wsum = np.zeros(x.shape)
    for off in itertools.product(range(-rs, rs + 1), repeat=x.ndim):
        moved = P[tuple(slice(s.start + o, s.stop + o) for s, o in zip(ext, off))]
        dist = ndimage.uniform_filter((centre - moved) ** 2, size=patch, mode="constant") * patch ** x.ndim
        w = np.exp(-dist[core] / (h * h))
        acc += w * moved[core]
        wsum += w
    out = np.clip(acc / wsum, x.min(), x.max())
    return Volume(out, v.spacing if isinstance(v, Volume) else None)
