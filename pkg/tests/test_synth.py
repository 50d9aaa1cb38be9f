import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msgan.grid import Volume, upsample2
from msgan.nets import Network, hr_generator_spec, lr_generator_spec
from msgan.pyramid import build_edge_pyramid, make_patch_grid
from msgan.synth import (HRModel, LRModel, MissingModelError, ModelSet, PassthroughHR, generate,
                         load_models, make_overlap_grid, seam_score, stitch, stitch_overlap_average)
from msgan.synthdata import gen_phantom
from msgan.train import Checkpoint, TrainConfig, save_checkpoint, specs_for


class FixedLR:
    """Scale-0 backend returning a fixed deterministic image."""

    def __init__(self, seed=0):
        self.seed = seed

    def __call__(self, edges, noise):
        rng = np.random.default_rng(self.seed)
        return rng.uniform(-1, 1, edges.shape).astype(np.float32)


class Recorder(PassthroughHR):
    def __init__(self, margin=8):
        super().__init__(margin)
        self.shapes = set()

    def __call__(self, e, low, z):
        self.shapes.add((e.shape, low.shape, z.shape))
        return super().__call__(e, low, z)


@pytest.fixture(scope="module")
def edge_pyr():
    return build_edge_pyramid(gen_phantom(1, 128, 2)[0], 32)


def test_identity_cascade(edge_pyr):
    ms = ModelSet(FixedLR(), {1: PassthroughHR(), 2: PassthroughHR()})
    steps = []
    y = generate(ms, edge_pyr, seed=3, intermediates=steps)
    assert y.shape == (128, 128)
    assert y == upsample2(upsample2(steps[0]))
    assert steps[1] == upsample2(steps[0])


def test_identity_cascade_3d():
    pyr = build_edge_pyramid(np.random.default_rng(0).uniform(-1, 1, (32, 32, 32)).astype(np.float32), 8)
    ms = ModelSet(FixedLR(), {1: PassthroughHR(3), 2: PassthroughHR(3)})
    steps = []
    y = generate(ms, pyr, seed=0, patch_size=16, intermediates=steps)
    assert y == upsample2(upsample2(steps[0]))


def test_patch_inputs_are_patch_sized(edge_pyr):
    rec = Recorder()
    generate(ModelSet(FixedLR(), {1: rec, 2: rec}), edge_pyr)
    big = build_edge_pyramid(gen_phantom(1, 256, 2)[0], 32)
    rec_big = Recorder()
    generate(ModelSet(FixedLR(), {1: rec_big, 2: rec_big, 3: rec_big}), big)
    assert rec.shapes == rec_big.shapes == {((32, 32),) * 3}


def _random_models(seed=0):
    ms = ModelSet(LRModel(Network(lr_generator_spec(2, 3, 8), seed)))
    for s in (1, 2):
        ms.hr[s] = HRModel(Network(hr_generator_spec(2, 3, 8), seed + s))
    ms.independent = HRModel(Network(hr_generator_spec(2, 2, 8), seed + 9))
    return ms


@pytest.mark.parametrize("mode", ["multiscale", "independent_overlap"])
def test_reverse_order_is_bit_identical(edge_pyr, mode):
    ms = _random_models()
    a = generate(ms, edge_pyr, seed=5, mode=mode)
    b = generate(ms, edge_pyr, seed=5, mode=mode, reverse=True)
    assert a.shape == (128, 128)
    assert a.data.tobytes() == b.data.tobytes()
    assert generate(ms, edge_pyr, seed=6, mode=mode) != a


def test_missing_models(edge_pyr):
    ms = _random_models()
    del ms.hr[1]
    with pytest.raises(MissingModelError, match="scale 1"):
        generate(ms, edge_pyr)
    with pytest.raises(MissingModelError, match="scale 0"):
        generate(ModelSet(), edge_pyr)
    with pytest.raises(MissingModelError):
        generate(ModelSet(), edge_pyr, mode="independent_overlap")
    with pytest.raises(ValueError):
        generate(ms, edge_pyr, mode="fancy")


def test_load_models(tmp_path, edge_pyr):
    cfg = TrainConfig()
    for scale in (0, 1, 2):
        g, d = specs_for(scale, 2, cfg)
        ck = Checkpoint(scale, "multiscale", Network(g, scale), Network(d, 7), {"state": {}}, {"state": {}},
                        0, cfg.digest(), 32 if scale else 32)
        save_checkpoint(ck, tmp_path / f"scale{scale}.ckpt")
    ms = load_models(tmp_path)
    assert ms.lr is not None and sorted(ms.hr) == [1, 2] and ms.independent is None
    assert ms.hr[1].margin == 8 and ms.hr[1].conditioned and ms.hr[1].input_side == 32
    assert generate(ms, edge_pyr, seed=1).shape == (128, 128)


# --- stitching -----------------------------------------------------------------

def test_stitch_constant_and_index_map():
    g = make_patch_grid((50, 37), 20, 4)
    assert stitch([np.full((12, 12), 0.5)] * len(g.origins), g) == Volume(np.full((50, 37), 0.5))
    patches = [np.full((12, 12), k, np.float32) for k in range(len(g.origins))]
    out = stitch(patches, g).data
    n_cols = len(range(0, 37, 12))
    for i, j in itertools.product(range(50), range(37)):
        assert out[i, j] == (i // 12) * n_cols + j // 12
    with pytest.raises(ValueError):
        stitch(patches[:-1], g)
    with pytest.raises(ValueError):
        stitch([np.zeros((5, 5))] * len(g.origins), g)


@given(st.lists(st.integers(1, 30), min_size=2, max_size=3), st.integers(2, 16), st.integers(0, 6))
def test_tile_then_stitch_is_identity(shape, patch, margin):
    if patch - 2 * margin <= 0:
        return
    x = np.random.default_rng(sum(shape)).uniform(-1, 1, shape).astype(np.float32)
    g = make_patch_grid(shape, patch, margin)
    cores = [g.window(x, o)[g.core_in_patch(o)] for o in g.origins]
    assert stitch(cores, g).data.tobytes() == x.tobytes()


def test_overlap_two_patches():
    g = make_overlap_grid((1, 27), 16, 5)
    assert g.origins == ((0, 0), (0, 11))
    out = stitch_overlap_average([np.full((16, 16), 1.0), np.full((16, 16), 3.0)], g).data[0]
    np.testing.assert_array_equal(out[:11], 1.0)
    np.testing.assert_array_equal(out[11:16], 2.0)
    np.testing.assert_array_equal(out[16:], 3.0)
    with pytest.raises(ValueError):
        make_overlap_grid((40, 40), 16, 16)


@settings(max_examples=25)
@given(st.lists(st.integers(1, 24), min_size=2, max_size=3), st.integers(2, 12), st.integers(0, 11))
def test_overlap_average_matches_coverage_oracle(shape, patch, overlap):
    if overlap >= patch:
        return
    g = make_overlap_grid(shape, patch, overlap)
    rng = np.random.default_rng(len(g.origins))
    patches = [rng.uniform(-1, 1, (patch,) * len(shape)) for _ in g.origins]
    acc = np.zeros(shape)
    cnt = np.zeros(shape)
    for p, o in zip(patches, g.origins):
        for idx in itertools.product(*[range(n) for n in shape]):
            rel = tuple(i - oi for i, oi in zip(idx, o))
            if all(0 <= r < patch for r in rel):
                acc[idx] += p[rel]
                cnt[idx] += 1
    assert cnt.min() >= 1
    np.testing.assert_allclose(stitch_overlap_average(patches, g).data, acc / cnt, atol=1e-6)


# --- seam score --------------------------------------------------------------

def test_seam_constant():
    assert seam_score(np.full((64, 64), 0.3), make_patch_grid((64, 64), 32, 8)) == 1.0


def test_seam_smooth_ramp():
    i, j = np.mgrid[:64, :64]
    ramp = (i + 1.1 * j) / 200.0
    s = seam_score(ramp, make_patch_grid((64, 64), 32, 8))
    assert abs(s - 1.0) <= 0.05


def test_seam_constructed_jump():
    i, j = np.mgrid[:64, :64]
    slope = 0.01
    x = slope * j.astype(float)
    tile = (i // 16 + j // 16) % 2
    x = x + 0.5 * tile
    # oracle by enumeration of neighbour pairs
    seam, inner = [], []
    for axis in (0, 1):
        d = np.abs(np.diff(x, axis=axis))
        for idx in np.ndindex(d.shape):
            k = idx[axis] + 1
            (seam if k % 16 == 0 else inner).append(d[idx])
    expected = np.mean(seam) / np.mean(inner)
    got = seam_score(x, make_patch_grid((64, 64), 32, 8))
    assert got == pytest.approx(expected, rel=1e-12)
    assert got > 20
    # closed form: seams carry 0.5 jumps (plus +-slope across columns), interior carries slope or 0
    n_col_seams, n_row_seams = 3 * 64, 3 * 64
    seam_sum = 64 * (3 / 2 * abs(0.5 + slope) + 3 / 2 * abs(0.5 - slope)) + n_row_seams * 0.5
    inner_sum = (63 - 3) * 64 * slope
    closed = (seam_sum / (n_col_seams + n_row_seams)) / (inner_sum / (2 * 63 * 64 - n_col_seams - n_row_seams))
    assert got == pytest.approx(closed, rel=1e-9)


def test_seam_overlap_grid_positions():
    g = make_overlap_grid((64, 64), 32, 5)
    assert sorted({o[0] for o in g.origins}) == [0, 27, 32]
    assert g.seam_positions(0) == [27, 32, 59]
