"""Point-cloud object-detection kernels and benchmark CLI.

Grid-based downsampling, dynamic local voxelization, point-wise 3D
convolution, location-aware RoI pooling, a differentiable oriented-box 3D
IoU, the multi-task losses built on it, and independent verification
oracles. Hot kernels run through a compiled extension when available, with
a bit-identical pure-numpy fallback (see voxdet.backends).
"""

from voxdet.geometry import (
    CapacityError,
    CellIndex,
    LocalVoxelTensor,
    OrientedBox,
    Point3,
    PointCloud,
    box_corners_bev,
    cell_of,
    cells_of,
)
from voxdet.iou import IouGradResult, IouResult, iou3d, iou3d_batch, iou3d_grad
from voxdet.sampling import (
    SampleResult,
    SamplingConfig,
    Strategy,
    downsample,
    downsample_grid_buffer,
    downsample_sort_unique,
    gather,
)
from voxdet.voxelization import (
    AccelGrid,
    VoxelizationConfig,
    build_accel_grid,
    radius_neighbors,
    voxelize,
    voxelize_batch,
)

__version__ = "0.1.0"

__all__ = [
    "AccelGrid",
    "CapacityError",
    "CellIndex",
    "IouGradResult",
    "IouResult",
    "LocalVoxelTensor",
    "OrientedBox",
    "Point3",
    "PointCloud",
    "SampleResult",
    "SamplingConfig",
    "Strategy",
    "VoxelizationConfig",
    "box_corners_bev",
    "build_accel_grid",
    "cell_of",
    "cells_of",
    "downsample",
    "downsample_grid_buffer",
    "downsample_sort_unique",
    "gather",
    "iou3d",
    "iou3d_batch",
    "iou3d_grad",
    "radius_neighbors",
    "voxelize",
    "voxelize_batch",
]
