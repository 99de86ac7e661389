"""Point-wise 3D convolution over local voxel tensors and the hierarchical
four-block backbone.

A point-wise convolution fully contracts one key-point's k*k*k*c_in voxel
tensor with a dense kernel, producing a c_out feature vector positioned
exactly at the key-point. A block downsamples its input cloud once and runs
two convolution layers at the same key-points; block outputs are finally
concatenated at the last block's key-points.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from voxdet import backends
from voxdet.geometry import LocalVoxelTensor, PointCloud
from voxdet.sampling import SamplingConfig, downsample, gather
from voxdet.voxelization import CHUNK, AccelGrid, VoxelizationConfig, build_accel_grid

KERNEL_MAGIC = b"PWCK0001"
MODEL_MAGIC = b"PWCM0001"


@dataclass(frozen=True)
class ConvKernel:
    """Dense k*k*k*c_in*c_out weights plus a c_out bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        b = np.ascontiguousarray(self.bias, dtype=np.float64)
        if w.ndim != 5 or not (w.shape[0] == w.shape[1] == w.shape[2]):
            raise ValueError(f"weights must have shape (k, k, k, c_in, c_out), got {w.shape}")
        if b.shape != (w.shape[4],):
            raise ValueError(f"bias must have shape ({w.shape[4]},), got {b.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[3]

    @property
    def c_out(self) -> int:
        return self.weights.shape[4]

    def as_matrix(self) -> np.ndarray:
        """(k^3 * c_in, c_out) view for the batched contraction."""
        return self.weights.reshape(-1, self.c_out)


def init_kernel(k: int, c_in: int, c_out: int, rng: np.random.Generator) -> ConvKernel:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) initialization."""
    fan_in = k * k * k * c_in
    bound = np.sqrt(6.0 / (fan_in + c_out))
    w = rng.uniform(-bound, bound, size=(k, k, k, c_in, c_out))
    return ConvKernel(w, np.zeros(c_out))


def _activate(x: np.ndarray, activation: Optional[str]) -> np.ndarray:
    if activation is None or activation == "none":
        return x
    if activation == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation {activation!r}")


def pointwise_conv(
    v: LocalVoxelTensor, kernel: ConvKernel, activation: Optional[str] = "relu"
) -> np.ndarray:
    """Full contraction of one voxel tensor with the kernel, plus bias and
    the layer nonlinearity. Shapes must match exactly."""
    if v.resolution != kernel.k or v.channels != kernel.c_in:
        raise ValueError(
            f"tensor ({v.resolution}, c={v.channels}) does not match "
            f"kernel ({kernel.k}, c_in={kernel.c_in})"
        )
    out = v.data.reshape(-1) @ kernel.as_matrix() + kernel.bias
    return _activate(out, activation)


def conv_layer(
    cloud: PointCloud,
    key_points,
    cfg: VoxelizationConfig,
    kernel: ConvKernel,
    activation: Optional[str] = "relu",
    grid: Optional[AccelGrid] = None,
    profile: str = "low_memory",
    threads: int = 1,
) -> PointCloud:
    """One point-wise convolution layer.

    Voxelizes the cloud around each key-point and contracts with the kernel;
    the output cloud sits at the key-points and carries c_out channels.
    Voxelization and contraction run fused over fixed-size chunks so peak
    memory stays bounded and results are thread-count independent.
    """
    if cfg.k != kernel.k:
        raise ValueError(f"voxel resolution {cfg.k} does not match kernel {kernel.k}")
    ctrs = key_points.points if isinstance(key_points, PointCloud) else key_points
    ctrs = np.asarray(ctrs, dtype=np.float64).reshape(-1, 3)
    c_eff = cloud.channels + (3 if cfg.append_offsets else 0)
    if c_eff != kernel.c_in:
        raise ValueError(f"cloud provides {c_eff} channels, kernel expects {kernel.c_in}")
    if grid is None:
        grid = build_accel_grid(cloud, cfg.edge, profile=profile)
    q = len(ctrs)
    out = np.zeros((q, kernel.c_out), dtype=np.float64)
    kern = backends.active
    tup = grid.backend_tuple()
    wmat = kernel.as_matrix()
    cap = -1 if cfg.max_points_per_voxel is None else int(cfg.max_points_per_voxel)
    feats = np.hstack([cloud.features, cloud.points]) if cfg.append_offsets else cloud.features
    feats = np.ascontiguousarray(feats)

    def run(lo: int) -> None:
        hi = min(lo + CHUNK, q)
        chunk = np.ascontiguousarray(ctrs[lo:hi])
        t, counts = kern.voxelize_batch(cloud.points, feats, chunk, cfg.radius, cfg.k, tup, cap)
        if cfg.append_offsets:
            occ = (counts > 0).reshape(t.shape[:4])
            t[..., -3:][occ] -= np.broadcast_to(chunk[:, None, None, None, :], t[..., -3:].shape)[occ]
        out[lo:hi] = t.reshape(hi - lo, -1) @ wmat + kernel.bias

    starts = range(0, q, CHUNK)
    if threads > 1 and q > CHUNK:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for lo in starts:
            run(lo)
    return PointCloud(ctrs, _activate(out, activation))


@dataclass(frozen=True)
class BlockSpec:
    """One backbone block: downsample resolution, query radius, kernel
    resolution, channel width, and layer count."""

    resolution: float
    radius: float
    k: int = 3
    channels: int = 16
    layers: int = 2

    def __post_init__(self):
        if self.resolution <= 0 or self.radius <= 0:
            raise ValueError("resolution and radius must be positive")
        if self.layers < 1:
            raise ValueError("a block needs at least one layer")


def default_blocks(
    resolutions=(0.1, 0.2, 0.4, 0.8),
    channels=(16, 32, 64, 128),
    k: int = 3,
    radius_scale: float = 1.5,
) -> list[BlockSpec]:
    """The standard four-block configuration; query radius is 1.5x the
    block's downsampling resolution unless scaled otherwise."""
    return [
        BlockSpec(r, radius_scale * r, k, c) for r, c in zip(resolutions, channels, strict=True)
    ]


@dataclass(frozen=True)
class BackboneOutput:
    """Per-block key-point clouds plus the multi-scale concatenation at the
    final block's key-points."""

    block_clouds: list[PointCloud]
    concat: PointCloud

    @property
    def key_point_counts(self) -> list[int]:
        return [len(c) for c in self.block_clouds]


def init_backbone(blocks: Sequence[BlockSpec], c_in: int, seed: int = 0) -> list[list[ConvKernel]]:
    """Fresh per-block kernel pairs (or longer, per BlockSpec.layers)."""
    rng = np.random.default_rng(seed)
    out = []
    for b in blocks:
        kernels = []
        c = c_in
        for _ in range(b.layers):
            kernels.append(init_kernel(b.k, c, b.channels, rng))
            c = b.channels
        out.append(kernels)
        c_in = b.channels
    return out


def _nearest_in_block(block_cloud: PointCloud, targets: np.ndarray, radius: float) -> np.ndarray:
    """Feature rows of the nearest block key-point within radius per target,
    zeros when none is found (ties broken toward the lowest index)."""
    out = np.zeros((len(targets), block_cloud.channels))
    if len(block_cloud) == 0 or len(targets) == 0:
        return out
    grid = build_accel_grid(block_cloud, radius)
    counts, idx = backends.active.radius_query(
        block_cloud.points, np.ascontiguousarray(targets), radius, grid.backend_tuple()
    )
    offs = np.concatenate([[0], np.cumsum(counts)])
    for i in range(len(targets)):
        cand = idx[offs[i] : offs[i + 1]]
        if len(cand) == 0:
            continue
        d = np.linalg.norm(block_cloud.points[cand] - targets[i], axis=1)
        out[i] = block_cloud.features[cand[np.argmin(d)]]
    return out


def run_backbone(
    cloud: PointCloud,
    blocks: Sequence[BlockSpec],
    weights: Sequence[Sequence[ConvKernel]],
    sampling: SamplingConfig,
    activation: Optional[str] = "relu",
    profile: str = "low_memory",
    threads: int = 1,
) -> BackboneOutput:
    """Run the hierarchical backbone: per block, downsample once and apply
    the block's convolution layers at the shared key-points.

    Block resolutions must increase, so key-point counts are non-increasing.
    Each block's key-points are a subset of the previous block's, which makes
    the final multi-scale concatenation an exact positional lookup.
    """
    res = [b.resolution for b in blocks]
    if any(nxt <= prev for prev, nxt in zip(res, res[1:])):
        raise ValueError("block resolutions must be strictly increasing")
    if len(weights) != len(blocks):
        raise ValueError("need one kernel list per block")
    current = cloud
    block_clouds: list[PointCloud] = []
    for spec, kernels in zip(blocks, weights):
        cfg_b = dataclasses.replace(sampling, resolution=spec.resolution)
        key_points = gather(current, downsample(current, cfg_b))
        vcfg = VoxelizationConfig(radius=spec.radius, k=spec.k)
        layer_cloud = current
        for kern in kernels:
            layer_cloud = conv_layer(
                layer_cloud,
                key_points.points,
                vcfg,
                kern,
                activation=activation,
                profile=profile,
                threads=threads,
            )
        block_clouds.append(layer_cloud)
        current = layer_cloud
    final_pts = block_clouds[-1].points
    parts = []
    for spec, bc in zip(blocks, block_clouds):
        parts.append(_nearest_in_block(bc, final_pts, spec.resolution))
    concat = PointCloud(final_pts, np.hstack(parts) if parts else None)
    return BackboneOutput(block_clouds, concat)


# -- weight blob serialization ------------------------------------------------
# One kernel record: magic, then k, c_in, c_out, weight count, bias count as
# little-endian u64, then the weights and bias as little-endian IEEE-754
# 32-bit floats. A model blob is a header plus a record sequence.


def write_kernel(f, kernel: ConvKernel) -> None:
    f.write(KERNEL_MAGIC)
    f.write(
        struct.pack(
            "<5Q",
            kernel.k,
            kernel.c_in,
            kernel.c_out,
            kernel.weights.size,
            kernel.bias.size,
        )
    )
    f.write(kernel.weights.astype("<f4").tobytes())
    f.write(kernel.bias.astype("<f4").tobytes())


def read_kernel(f) -> ConvKernel:
    magic = f.read(8)
    if magic != KERNEL_MAGIC:
        raise ValueError(f"bad kernel record magic {magic!r}")
    k, c_in, c_out, wlen, blen = struct.unpack("<5Q", f.read(40))
    if wlen != k * k * k * c_in * c_out or blen != c_out:
        raise ValueError("kernel record lengths are inconsistent with its shape")
    w = np.frombuffer(f.read(4 * wlen), dtype="<f4").astype(np.float64)
    b = np.frombuffer(f.read(4 * blen), dtype="<f4").astype(np.float64)
    return ConvKernel(w.reshape(k, k, k, c_in, c_out), b)


def save_kernels(path, kernels: Sequence[ConvKernel]) -> None:
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<Q", len(kernels)))
        for kern in kernels:
            write_kernel(f, kern)


def load_kernels(path) -> list[ConvKernel]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MODEL_MAGIC:
            raise ValueError(f"bad model blob magic {magic!r}")
        (count,) = struct.unpack("<Q", f.read(8))
        return [read_kernel(f) for _ in range(count)]


def kernels_to_bytes(kernels: Sequence[ConvKernel]) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<Q", len(kernels)))
    for kern in kernels:
        write_kernel(buf, kern)
    return buf.getvalue()
