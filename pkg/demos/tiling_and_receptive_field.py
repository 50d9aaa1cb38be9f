"""
Trimmed-core tiling and the receptive field
============================================

A patch generator made only of stride-1 convolutions sees a bounded
neighbourhood of every output voxel. Cropping that many voxels off each
side of a generated patch leaves a core that does not depend on the
padding, and cores laid side by side cover the image exactly once.
"""

import numpy as np
import torch

from msgan.nets import Network, hr_generator_spec
from msgan.pyramid import compute_receptive_field, make_patch_grid
from msgan.synth import make_overlap_grid, seam_score, stitch

torch.set_num_threads(1)

# the default patch generator: 7-kernel entry, two residual blocks, 3-kernel exit
spec = hr_generator_spec(2)
margin = compute_receptive_field(spec)
print("layers:", [l.kind for l in spec.layers])
print("trim margin:", margin, "-> receptive field", 2 * margin + 1)

# bump one input voxel and see how far the change travels
net = Network(spec, seed=0, dtype=torch.float64)
x = np.random.default_rng(0).uniform(-1, 1, (3, 40, 40))
y = x.copy()
y[:, 20, 20] += 1
with torch.no_grad():
    a = net(torch.from_numpy(x)[None])[0, 0].numpy()
    b = net(torch.from_numpy(y)[None])[0, 0].numpy()
rows, cols = np.nonzero(a != b)
print("changed rows", rows.min(), "..", rows.max(), " cols", cols.min(), "..", cols.max())

# a 100 x 70 image tiled with 32-patches and margin 8: cores of 16
g = make_patch_grid((100, 70), 32, margin)
count = np.zeros(g.scale_shape, int)
for o in g.origins:
    count[g.core_slices(o)] += 1
print(len(g.origins), "patches, write counts min/max:", count.min(), count.max())

# cutting windows out and stitching their cores back is the identity
img = np.random.default_rng(1).uniform(-1, 1, g.scale_shape).astype(np.float32)
cores = [g.window(img, o)[g.core_in_patch(o)] for o in g.origins]
print("tile -> stitch identity:", np.array_equal(stitch(cores, g).data, img))

# the seam score of a smooth image is about 1 on either grid
yy, xx = np.mgrid[:128, :128] / 128.0
smooth = np.sin(3 * xx) * np.cos(2 * yy)
print("seam score, trimmed grid:", round(seam_score(smooth, make_patch_grid((128, 128), 32, 8)), 3))
print("seam score, overlap grid:", round(seam_score(smooth, make_overlap_grid((128, 128), 32)), 3))
