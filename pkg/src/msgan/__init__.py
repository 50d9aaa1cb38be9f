"""Memory-constant multi-scale patch GANs for large 2D/3D images."""

from msgan.grid import (
    EdgeConfig,
    Volume,
    downsample2,
    extract_edges,
    load_volume,
    save_volume,
    upsample2,
)
from msgan.pyramid import (
    PatchGrid,
    Pyramid,
    build_pyramid,
    compute_receptive_field,
    extract_training_triple,
    make_patch_grid,
)

__version__ = "0.1.0"

__all__ = [
    "EdgeConfig",
    "PatchGrid",
    "Pyramid",
    "Volume",
    "build_pyramid",
    "compute_receptive_field",
    "downsample2",
    "extract_edges",
    "extract_training_triple",
    "load_volume",
    "make_patch_grid",
    "save_volume",
    "upsample2",
]
