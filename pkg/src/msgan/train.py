"""Per-scale adversarial training with conditioning corruption and checkpoints.

Every scale is trained on its own. Scale 0 sees whole base-size images; higher
scales see fixed-size patches conditioned on the ground-truth previous scale,
which is randomly corrupted to mimic cascade errors at inference time. The
tensors a training step touches are therefore sized by ``base_size`` or
``patch_size`` only, never by the full image.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from msgan import nets
from msgan.grid import downsample2, upsample2
from msgan.nets import ArchSpec, Network, read_container, write_container
from msgan.pyramid import Pyramid, compute_receptive_field, make_patch_grid
from msgan.textkv import parse_kv

log = logging.getLogger(__name__)

VARIANTS = ("multiscale", "independent")
CORRUPTIONS = ("noise", "blur", "resample")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    corrupt_p: float = 0.3
    noise_std_range: tuple = (0.01, 0.1)
    blur_std_range: tuple = (0.5, 1.5)
    edge_flip_q: float = 0.05
    corruptions: tuple = CORRUPTIONS
    pixel_weight: float = 0.0
    seed: int = 0
    patch_size: int = 32
    variant: str = "multiscale"
    gen_channels: int = 32
    disc_channels: int = 32
    lr_levels: int = 4
    hr_blocks: int = 2

    def __post_init__(self):
        if not 0 <= self.corrupt_p <= 1:
            raise ValueError(f"corrupt_p must lie in [0, 1], got {self.corrupt_p}")
        if not 0 <= self.edge_flip_q <= 1:
            raise ValueError(f"edge_flip_q must lie in [0, 1], got {self.edge_flip_q}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        bad = set(self.corruptions) - set(CORRUPTIONS)
        if bad or not self.corruptions:
            raise ValueError(f"corruptions must be a non-empty subset of {CORRUPTIONS}")
        for name in ("noise_std_range", "blur_std_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(str(t) for t in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse the ``key = value`` dialect; unknown keys are errors, missing keys keep defaults."""
        kv = parse_kv(text)
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(kv) - set(fields))
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        values = {}
        for key, raw in kv.items():
            default = fields[key].default
            try:
                if isinstance(default, tuple):
                    parts = raw.replace(",", " ").split()
                    values[key] = tuple(type(default[0])(p) for p in parts)
                elif isinstance(default, bool):
                    values[key] = raw.lower() in ("1", "true", "yes")
                else:
                    values[key] = type(default)(raw)
            except ValueError:
                raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


# --------------------------------------------------------------------------
# corruption

def corrupt_condition(lowres_up_patch, edge_patch, cfg: TrainConfig, rng: np.random.Generator):
    """Randomly degrade the conditioning inputs of an HR training sample.

    With probability ``cfg.corrupt_p`` the low-resolution patch gets a random
    non-empty combination of Gaussian blur, 2x down/up resampling and additive
    Gaussian noise (each std drawn from its configured range), and a fraction
    ``cfg.edge_flip_q`` of edge voxels is flipped. Otherwise both inputs are
    returned unchanged.
    """
    low = np.array(lowres_up_patch, dtype=np.float32, copy=True)
    edges = np.array(edge_patch, dtype=np.float32, copy=True)
    if rng.random() >= cfg.corrupt_p:
        return low, edges

    enabled = [k for k in CORRUPTIONS if k in cfg.corruptions]
    chosen = [k for k in enabled if rng.random() < 0.5]
    if not chosen:
        chosen = [enabled[rng.integers(len(enabled))]]
    x = low.astype(np.float64)
    if "blur" in chosen:
        x = ndimage.gaussian_filter(x, rng.uniform(*cfg.blur_std_range), mode="reflect")
    if "resample" in chosen and not any(n % 2 for n in x.shape):
        x = upsample2(downsample2(x)).data.astype(np.float64)
    if "noise" in chosen:
        x = x + rng.uniform(*cfg.noise_std_range) * rng.standard_normal(x.shape)
    low = np.clip(x, -1.0, 1.0).astype(np.float32)

    flip = rng.random(edges.shape) < cfg.edge_flip_q
    edges = np.where(flip, 1.0 - edges, edges).astype(np.float32)
    return low, edges


# --------------------------------------------------------------------------
# architectures per scale

def specs_for(scale: int, ndim: int, cfg: TrainConfig) -> tuple:
    """(generator, discriminator) ArchSpecs used at ``scale`` for ``cfg.variant``."""
    if scale == 0 and cfg.variant == "multiscale":
        g = nets.lr_generator_spec(ndim, cfg.lr_levels, cfg.gen_channels)
        d = nets.discriminator_spec(ndim, 2, 4, cfg.disc_channels)
    elif cfg.variant == "multiscale":
        g = nets.hr_generator_spec(ndim, 3, cfg.gen_channels, cfg.hr_blocks)
        d = nets.discriminator_spec(ndim, 3, 4, cfg.disc_channels)
    else:
        g = nets.hr_generator_spec(ndim, 2, cfg.gen_channels, cfg.hr_blocks)
        d = nets.discriminator_spec(ndim, 2, 4, cfg.disc_channels)
    return g, d


# --------------------------------------------------------------------------
# checkpoints

def checkpoint_name(scale) -> str:
    return "independent.ckpt" if scale == "independent" else f"scale{int(scale)}.ckpt"


@dataclass
class Checkpoint:
    scale: int
    variant: str
    generator: Network
    discriminator: Network
    opt_g: dict
    opt_d: dict
    epoch: int
    config_hash: str
    input_side: int
    log: list = field(default_factory=list)


def _opt_tensors(prefix: str, state: dict, n: int) -> tuple:
    meta, tensors = {}, {}
    steps = []
    for i in range(n):
        st = state["state"].get(i)
        if st is None:
            steps.append("0")
            continue
        steps.append(repr(float(st["step"])))
        tensors[f"{prefix}.m{i}"] = st["exp_avg"].detach().numpy()
        tensors[f"{prefix}.v{i}"] = st["exp_avg_sq"].detach().numpy()
    meta[f"{prefix}.steps"] = " ".join(steps)
    return meta, tensors


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "kind": "training",
        "scale": ckpt.scale,
        "variant": ckpt.variant,
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "input_side": ckpt.input_side,
        "g.seed": ckpt.generator.seed,
        "d.seed": ckpt.discriminator.seed,
    }
    meta.update(ckpt.generator.spec.kv_items("arch."))
    meta.update(ckpt.discriminator.spec.kv_items("d.arch."))
    tensors = {f"g.p{i}": a for i, a in enumerate(ckpt.generator.flat_arrays())}
    tensors.update({f"d.p{i}": a for i, a in enumerate(ckpt.discriminator.flat_arrays())})
    for prefix, state, net in (("og", ckpt.opt_g, ckpt.generator), ("od", ckpt.opt_d, ckpt.discriminator)):
        m, t = _opt_tensors(prefix, state, len(net.params))
        meta.update(m)
        tensors.update(t)
    write_container(path, meta, tensors)


def _restore_opt(prefix: str, kv: dict, tensors: dict, n: int) -> dict:
    steps = kv[f"{prefix}.steps"].split()
    state = {}
    for i in range(n):
        if f"{prefix}.m{i}" not in tensors:
            continue
        state[i] = {
            "step": torch.tensor(float(steps[i])),
            "exp_avg": torch.from_numpy(tensors[f"{prefix}.m{i}"].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"{prefix}.v{i}"].copy()),
        }
    return {"state": state}


def load_checkpoint(path) -> Checkpoint:
    kv, tensors = read_container(path)
    if kv.get("kind") != "training":
        raise nets.CheckpointError(f"{path}: not a training checkpoint")
    g = Network(ArchSpec.from_kv(kv, "arch."), int(kv["g.seed"]))
    d = Network(ArchSpec.from_kv(kv, "d.arch."), int(kv["d.seed"]))
    g.load_arrays([tensors[f"g.p{i}"] for i in range(len(g.params))])
    d.load_arrays([tensors[f"d.p{i}"] for i in range(len(d.params))])
    return Checkpoint(
        scale=int(kv["scale"]), variant=kv["variant"], generator=g, discriminator=d,
        opt_g=_restore_opt("og", kv, tensors, len(g.params)),
        opt_d=_restore_opt("od", kv, tensors, len(d.params)),
        epoch=int(kv["epoch"]), config_hash=kv["config_hash"], input_side=int(kv["input_side"]),
    )


# --------------------------------------------------------------------------
# training

class FootprintTracker:
    """High-water mark of bytes held by one training step's input batch and activations."""

    def __init__(self):
        self.peak = 0
        self._current = 0

    def begin(self, *batch):
        self._current = sum(t.numel() * t.element_size() for t in batch)

    def __call__(self, t: torch.Tensor):
        self._current += t.numel() * t.element_size()

    def end(self):
        self.peak = max(self.peak, self._current)


def _mix_seed(*parts) -> int:
    return nets.noise_seed(parts[0], parts[1], tuple(parts[2:]))


class Trainer:
    """Owns the networks and optimizers of one scale."""

    def __init__(self, pyramids: Sequence[Pyramid], scale: int, cfg: TrainConfig,
                 tracker: Optional[FootprintTracker] = None):
        if not pyramids:
            raise ValueError("training dataset is empty")
        n_min = min(p.n_scales for p in pyramids)
        if not 0 <= scale <= n_min:
            raise IndexError(f"scale {scale} out of range 0..{n_min}")
        if cfg.variant == "independent" and scale == 0:
            raise ValueError("the independent patch baseline is trained at a scale >= 1")
        self.pyramids = list(pyramids)
        self.scale = scale
        self.cfg = cfg
        self.tracker = tracker
        self.ndim = pyramids[0].ndim
        gspec, dspec = specs_for(scale, self.ndim, cfg)
        variant_code = VARIANTS.index(cfg.variant)
        self.G = Network(gspec, _mix_seed(cfg.seed, scale, variant_code, 1) % 2**63)
        self.D = Network(dspec, _mix_seed(cfg.seed, scale, variant_code, 2) % 2**63)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.learning_rate, betas=betas)
        self.epoch = 0
        self.log: list = []
        self.step_losses: list = []
        if scale == 0:
            self.input_side = pyramids[0].base_size
        else:
            self.input_side = cfg.patch_size
            self.margin = compute_receptive_field(gspec)

    # -- state ------------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.scale, self.cfg.variant, self.G, self.D,
                          self.opt_g.state_dict(), self.opt_d.state_dict(),
                          self.epoch, self.cfg.digest(), self.input_side, list(self.log))

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.scale != self.scale or ckpt.variant != self.cfg.variant:
            raise ValueError("checkpoint belongs to a different scale or variant")
        self.G.load_arrays(ckpt.generator.flat_arrays())
        self.D.load_arrays(ckpt.discriminator.flat_arrays())
        for opt, saved in ((self.opt_g, ckpt.opt_g), (self.opt_d, ckpt.opt_d)):
            sd = opt.state_dict()
            sd["state"] = {i: {k: v.clone() for k, v in st.items()} for i, st in saved["state"].items()}
            opt.load_state_dict(sd)
        self.epoch = ckpt.epoch

    # -- data -------------------------------------------------------------
    def sample_batch(self, indices, rng: np.random.Generator) -> tuple:
        """Return (generator inputs, discriminator condition channels, targets) as tensors."""
        g_in, d_cond, target = [], [], []
        for idx in indices:
            p = self.pyramids[idx]
            if self.scale == 0:
                e, y = p.edges[0].data, p.images[0].data
                noise = rng.standard_normal(e.shape).astype(np.float32)
                g_in.append([e, noise])
                d_cond.append([e])
                target.append(y)
                continue
            shape = p.edges[self.scale].shape
            grid = make_patch_grid(shape, self.cfg.patch_size, self.margin)
            origin = grid.origins[rng.integers(len(grid.origins))]
            e = grid.window(p.edges[self.scale], origin)
            y = grid.window(p.images[self.scale], origin)
            noise = rng.standard_normal(e.shape).astype(np.float32)
            if self.cfg.variant == "multiscale":
                low = grid.window(p.upscaled(self.scale), origin)
                low, e = corrupt_condition(low, e, self.cfg, rng)
                g_in.append([e, low, noise])
                d_cond.append([e, low])
            else:
                g_in.append([e, noise])
                d_cond.append([e])
            target.append(y)
        as_t = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32))
        return as_t(g_in), as_t(d_cond), as_t(target)[:, None]

    # -- optimisation -----------------------------------------------------
    def step(self, g_in, d_cond, target) -> tuple:
        hooks = self.tracker
        if hooks is not None:
            hooks.begin(g_in, d_cond, target)
        fake = self.G(g_in, hooks=hooks)

        self.opt_d.zero_grad(set_to_none=True)
        d_real = self.D(torch.cat([d_cond, target], 1), hooks=hooks)
        d_fake = self.D(torch.cat([d_cond, fake.detach()], 1), hooks=hooks)
        loss_d = nets.discriminator_loss(d_real, d_fake)
        loss_d.backward()
        self.opt_d.step()

        self.opt_g.zero_grad(set_to_none=True)
        d_fake = self.D(torch.cat([d_cond, fake], 1), hooks=hooks)
        loss_g = nets.generator_loss(d_fake)
        if self.cfg.pixel_weight:
            loss_g = loss_g + self.cfg.pixel_weight * (fake - target).abs().mean()
        loss_g.backward()
        self.opt_g.step()
        if hooks is not None:
            hooks.end()
        return loss_d.item(), loss_g.item()

    def run_epoch(self) -> dict:
        self.epoch += 1
        t0 = time.perf_counter()
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, self.scale, VARIANTS.index(cfg.variant), self.epoch])
        order = rng.permutation(len(self.pyramids))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = self.sample_batch(order[start:start + cfg.batch_size], rng)
            losses.append(self.step(*batch))
        self.step_losses.append(losses)
        ld, lg = np.mean(losses, axis=0)
        row = {"epoch": self.epoch, "loss_d": float(ld), "loss_g": float(lg),
               "seconds": time.perf_counter() - t0}
        self.log.append(row)
        log.info("scale %d epoch %d: loss_d=%.4f loss_g=%.4f (%.1fs)", self.scale, self.epoch, ld, lg, row["seconds"])
        return row

    def fit(self) -> Checkpoint:
        while self.epoch < self.cfg.epochs:
            self.run_epoch()
        return self.checkpoint()


def train_scale(pyramids: Sequence[Pyramid], scale: int, cfg: TrainConfig,
                tracker: Optional[FootprintTracker] = None,
                resume: Optional[Checkpoint] = None) -> Checkpoint:
    trainer = Trainer(pyramids, scale, cfg, tracker)
    if resume is not None:
        trainer.restore(resume)
    return trainer.fit()


def write_log(rows, path) -> None:
    """Per-epoch mean losses. Wall-clock time is logged, not written, so the file is reproducible."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss_d", "loss_g"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"epoch": r["epoch"], "loss_d": repr(r["loss_d"]), "loss_g": repr(r["loss_g"])})


def train_all(pyramids: Sequence[Pyramid], cfg: TrainConfig, out_dir=None) -> list:
    """Train scales 0..n (multiscale) or the finest-scale baseline (independent).

    With ``out_dir``, existing checkpoints whose config hash matches are
    reused, so deleting one scale's file retrains only that scale.
    """
    if not pyramids:
        raise ValueError("training dataset is empty")
    n = min(p.n_scales for p in pyramids)
    scales = list(range(n + 1)) if cfg.variant == "multiscale" else ["independent"]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpts = []
    for s in scales:
        scale = n if s == "independent" else s
        path = out / checkpoint_name(s) if out is not None else None
        if path is not None and path.exists():
            ck = load_checkpoint(path)
            if ck.config_hash == cfg.digest() and ck.epoch >= cfg.epochs:
                log.info("reusing %s", path)
                ckpts.append(ck)
                continue
        ck = train_scale(pyramids, scale, cfg)
        if path is not None:
            save_checkpoint(ck, path)
            write_log(ck.log, path.with_suffix(".log.csv"))
        ckpts.append(ck)
    return ckpts
