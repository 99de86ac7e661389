"""File ingestion, configuration, synthetic scenes, the two-stage forward
pass, and the scaling benchmark."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from voxdet import backends
from voxdet.geometry import OrientedBox, PointCloud
from voxdet.pointconv import (
    BlockSpec,
    ConvKernel,
    _activate,
    _nearest_in_block,
    conv_layer,
    init_kernel,
    load_kernels,
    save_kernels,
)
from voxdet.roipool import RefineHeadWeights, RoiPoolConfig, la_pool, refine_head_batch
from voxdet.sampling import (
    GridBufferWorkspace,
    SamplingConfig,
    Strategy,
    downsample,
    gather,
)
from voxdet.voxelization import VoxelizationConfig, build_accel_grid, radius_neighbors


@dataclass(frozen=True)
class PipelineConfig:
    """Forward-pipeline parameters; the defaults reproduce the standard
    four-block setup (r = 0.1/0.2/0.4/0.8 m, k = 3, channels 16/32/64/128,
    5^3 RoI pooling grid)."""

    resolutions: tuple[float, ...] = (0.1, 0.2, 0.4, 0.8)
    channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel_resolution: int = 3
    radius_scale: float = 1.5
    pool_grid: int = 5
    pool_n_max: int = 5
    crop_origin: tuple[float, float, float] = (0.0, -40.0, -3.0)
    crop_extents: tuple[float, float, float] = (70.0, 80.0, 4.0)
    strategy: str = "grid_buffer"
    voxel_profile: str = "low_memory"
    activation: str = "relu"
    anchor: tuple[float, float, float] = (1.6, 3.9, 1.56)
    stage1_hidden: tuple[int, ...] = (128, 64)
    refine_conv_channels: tuple[int, int] = (32, 32)
    refine_hidden: tuple[int, ...] = (32,)
    seed: int = 0
    threads: int = 1
    deterministic: bool = True

    def blocks(self) -> list[BlockSpec]:
        return [
            BlockSpec(r, self.radius_scale * r, self.kernel_resolution, c)
            for r, c in zip(self.resolutions, self.channels, strict=True)
        ]

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(
            resolution=self.resolutions[0],
            strategy=Strategy(self.strategy),
            extents=self.crop_extents,
            origin=self.crop_origin,
            seed=self.seed,
            deterministic=self.deterministic,
        )

    def roi(self) -> RoiPoolConfig:
        return RoiPoolConfig(self.pool_grid, self.pool_n_max)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
        for key, value in d.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        return PipelineConfig(**kwargs)

    @staticmethod
    def load(path) -> "PipelineConfig":
        with open(path) as f:
            return PipelineConfig.from_dict(json.load(f))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")


@dataclass
class TimingReport:
    """Per-stage wall times and throughput for one pipeline run."""

    stages: list[tuple[str, float]] = field(default_factory=list)
    points_in: dict = field(default_factory=dict)
    points_out: dict = field(default_factory=dict)
    peak_buffer_bytes: int = 0
    total_seconds: float = 0.0

    @property
    def throughput(self) -> float:
        n = self.points_in.get("crop", 0)
        return n / self.total_seconds if self.total_seconds > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "stages": {name: secs for name, secs in self.stages},
            "points_in": self.points_in,
            "points_out": self.points_out,
            "peak_buffer_bytes": self.peak_buffer_bytes,
            "total_seconds": self.total_seconds,
            "points_per_second": self.throughput,
        }


def read_kitti_bin(path) -> PointCloud:
    """Parse a KITTI-style binary scan: consecutive little-endian float32
    records (x, y, z, reflectance). Reflectance becomes the single feature
    channel."""
    import os

    try:
        nbytes = os.path.getsize(path)
    except OSError as e:
        raise ValueError(f"cannot read point file {path!r}: {e}") from e
    if nbytes % 16 != 0:
        tail = nbytes % 16
        raise ValueError(
            f"bad KITTI file length {nbytes}: not divisible by the 16-byte "
            f"record size ({tail} trailing bytes at offset {nbytes - tail})"
        )
    try:
        raw = np.fromfile(path, dtype="<f4")
    except OSError as e:
        raise ValueError(f"cannot read point file {path!r}: {e}") from e
    rec = raw.reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3:4])


def synth_scene(
    n_points: int, n_boxes: int, seed: int = 0, area: tuple[float, float] = (60.0, 60.0)
) -> tuple[PointCloud, list[OrientedBox]]:
    """Deterministic synthetic scene: a noisy ground plane plus car-sized
    boxes with points sampled on their (slightly inset) surfaces.

    For n_points >= 100 * n_boxes every box is guaranteed sampled points.
    The intensity channel is uniform in [0, 1).
    """
    rng = np.random.default_rng(seed)
    ground_z = -1.6
    boxes = []
    for _ in range(n_boxes):
        w = rng.uniform(1.5, 2.0)
        l = rng.uniform(3.5, 4.6)
        h = rng.uniform(1.4, 1.8)
        x = rng.uniform(8.0, 8.0 + area[0] - 16.0)
        y = rng.uniform(-area[1] / 2 + 6.0, area[1] / 2 - 6.0)
        boxes.append(OrientedBox(x, y, ground_z + h / 2, w, l, h, rng.uniform(-np.pi, np.pi)))
    n_obj = n_points // 2 if n_boxes else 0
    n_ground = n_points - n_obj
    gx = rng.uniform(2.0, 2.0 + area[0], n_ground)
    gy = rng.uniform(-area[1] / 2, area[1] / 2, n_ground)
    gz = ground_z + rng.normal(0.0, 0.02, n_ground)
    pts = [np.stack([gx, gy, gz], axis=1)]
    if n_boxes:
        per = np.full(n_boxes, n_obj // n_boxes)
        per[: n_obj - per.sum()] += 1
        for b, m in zip(boxes, per):
            u = rng.uniform(-0.49, 0.49, (m, 3))
            face_axis = rng.integers(0, 3, m)
            face_side = rng.choice([-0.49, 0.49], m)
            u[np.arange(m), face_axis] = face_side
            local = u * np.array([b.w, b.l, b.h]) * 0.98
            c, s = np.cos(b.r), np.sin(b.r)
            wx = c * local[:, 0] - s * local[:, 1] + b.x
            wy = s * local[:, 0] + c * local[:, 1] + b.y
            wz = local[:, 2] + b.z
            pts.append(np.stack([wx, wy, wz], axis=1))
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    intensity = rng.random((len(points), 1))
    return PointCloud(points, intensity), boxes


@dataclass(frozen=True)
class PipelineWeights:
    """All learnable parameters of the two-stage pipeline."""

    backbone: list[list[ConvKernel]]
    stage1_mlp: list[ConvKernel]
    refine: RefineHeadWeights

    def flatten(self) -> list[ConvKernel]:
        out = [k for block in self.backbone for k in block]
        out.extend(self.stage1_mlp)
        out.extend([self.refine.conv1, self.refine.conv2, *self.refine.mlp])
        return out

    @staticmethod
    def structure(cfg: PipelineConfig, kernels: list[ConvKernel]) -> "PipelineWeights":
        it = iter(kernels)
        backbone = [[next(it), next(it)] for _ in cfg.resolutions]
        n_mlp = len(cfg.stage1_hidden) + 1
        stage1 = [next(it) for _ in range(n_mlp)]
        conv1, conv2 = next(it), next(it)
        refine_mlp = [next(it) for _ in range(len(cfg.refine_hidden) + 1)]
        rest = list(it)
        if rest:
            raise ValueError(f"{len(rest)} unexpected trailing kernel records")
        return PipelineWeights(backbone, stage1, RefineHeadWeights(conv1, conv2, refine_mlp))


def init_pipeline_weights(cfg: PipelineConfig, c_in: int = 1, seed: int = 0) -> PipelineWeights:
    rng = np.random.default_rng(seed)
    backbone = []
    c = c_in
    for spec in cfg.blocks():
        pair = [init_kernel(spec.k, c, spec.channels, rng)]
        pair.append(init_kernel(spec.k, spec.channels, spec.channels, rng))
        backbone.append(pair)
        c = spec.channels
    concat_c = sum(cfg.channels)
    widths = [concat_c, *cfg.stage1_hidden, 9]
    stage1 = [init_kernel(1, a, b, rng) for a, b in zip(widths, widths[1:])]
    conv1 = init_kernel(3, concat_c, cfg.refine_conv_channels[0], rng)
    conv2 = init_kernel(3, cfg.refine_conv_channels[0], cfg.refine_conv_channels[1], rng)
    rw = [cfg.refine_conv_channels[1], *cfg.refine_hidden, 9]
    refine_mlp = [init_kernel(1, a, b, rng) for a, b in zip(rw, rw[1:])]
    return PipelineWeights(backbone, stage1, RefineHeadWeights(conv1, conv2, refine_mlp))


def save_pipeline_weights(path, weights: PipelineWeights) -> None:
    save_kernels(path, weights.flatten())


def load_pipeline_weights(path, cfg: PipelineConfig) -> PipelineWeights:
    return PipelineWeights.structure(cfg, load_kernels(path))


def decode_boxes(anchors_xyz: np.ndarray, residuals: np.ndarray, anchor_dims) -> np.ndarray:
    """Residuals (Q, 7) -> boxes (Q, 7): additive centers, exponential dims
    around the anchor (always positive), additive yaw."""
    out = np.empty((len(anchors_xyz), 7))
    out[:, 0:3] = anchors_xyz + residuals[:, 0:3]
    out[:, 3:6] = np.asarray(anchor_dims) * np.exp(np.clip(residuals[:, 3:6], -6.0, 6.0))
    out[:, 6] = residuals[:, 6]
    return out


@dataclass
class ForwardResult:
    """Stage-1 proposals and stage-2 refinements, row-aligned."""

    proposals: np.ndarray  # (Q, 7)
    confidences: np.ndarray  # (Q,) foreground logits
    flip_logits: np.ndarray  # (Q,)
    refined: np.ndarray  # (Q, 7)
    refined_confidences: np.ndarray  # (Q,)
    refined_flips: np.ndarray  # (Q,)
    key_point_counts: list[int]
    report: TimingReport


def _mlp_apply(x: np.ndarray, layers: Sequence[ConvKernel], activation: str) -> np.ndarray:
    for layer in layers[:-1]:
        x = _activate(x @ layer.as_matrix() + layer.bias, activation)
    last = layers[-1]
    return x @ last.as_matrix() + last.bias


def run_forward(
    cloud: PointCloud, cfg: PipelineConfig, weights: Optional[PipelineWeights] = None
) -> ForwardResult:
    """Full forward pass: crop -> downsample+backbone -> per-key-point
    proposal head -> location-aware RoI pooling -> refinement head.

    Deterministic for a fixed config, weights, and input, independent of
    cfg.threads.
    """
    if weights is None:
        weights = init_pipeline_weights(cfg, c_in=max(cloud.channels, 1), seed=cfg.seed)
    report = TimingReport()
    t_total = time.perf_counter()

    t0 = time.perf_counter()
    origin = np.asarray(cfg.crop_origin)
    extents = np.asarray(cfg.crop_extents)
    mask = np.all((cloud.points >= origin) & (cloud.points < origin + extents), axis=1)
    feats = cloud.features if cloud.channels else np.ones((len(cloud), 1))
    cropped = PointCloud(cloud.points[mask], feats[mask])
    report.points_in["crop"] = int(len(cloud))
    report.points_out["crop"] = int(len(cropped))
    report.stages.append(("crop", time.perf_counter() - t0))

    sampling = cfg.sampling()
    blocks = cfg.blocks()
    workspace = GridBufferWorkspace()
    current = cropped
    block_clouds: list[PointCloud] = []
    peak_buffer = 0
    for bi, (spec, kernels) in enumerate(zip(blocks, weights.backbone)):
        t0 = time.perf_counter()
        cfg_b = dataclasses.replace(sampling, resolution=spec.resolution)
        sample = downsample(current, cfg_b, workspace)
        peak_buffer = max(peak_buffer, sample.buffer_bytes)
        key_points = gather(current, sample)
        vcfg = VoxelizationConfig(radius=spec.radius, k=spec.k)
        layer_cloud = current
        for kern in kernels:
            layer_cloud = conv_layer(
                layer_cloud,
                key_points.points,
                vcfg,
                kern,
                activation=cfg.activation,
                profile=cfg.voxel_profile,
                threads=cfg.threads,
            )
        report.points_in[f"block{bi + 1}"] = int(len(current))
        report.points_out[f"block{bi + 1}"] = int(len(layer_cloud))
        block_clouds.append(layer_cloud)
        current = layer_cloud
        report.stages.append((f"block{bi + 1}", time.perf_counter() - t0))

    t0 = time.perf_counter()
    final_pts = block_clouds[-1].points
    parts = [
        _nearest_in_block(bc, final_pts, spec.resolution)
        for spec, bc in zip(blocks, block_clouds)
    ]
    concat = PointCloud(final_pts, np.hstack(parts) if parts else None)
    head_out = (
        _mlp_apply(concat.features, weights.stage1_mlp, cfg.activation)
        if len(concat)
        else np.zeros((0, 9))
    )
    proposals = decode_boxes(final_pts, head_out[:, 0:7], cfg.anchor)
    confidences = head_out[:, 7].copy() if len(concat) else np.zeros(0)
    flips = head_out[:, 8].copy() if len(concat) else np.zeros(0)
    report.stages.append(("stage1_head", time.perf_counter() - t0))

    roi_cfg = cfg.roi()
    q = len(proposals)
    refined = np.zeros_like(proposals)
    refined_conf = np.zeros(q)
    refined_flip = np.zeros(q)
    pool_time = 0.0
    refine_time = 0.0
    t0 = time.perf_counter()
    pool_grid = build_accel_grid(concat, max(cfg.resolutions[-1], 0.4)) if len(concat) else None
    circum = 0.5 * np.sqrt((proposals[:, 3:6] ** 2).sum(axis=1)) if q else np.zeros(0)
    pool_time += time.perf_counter() - t0
    chunk = 512
    kp = cfg.pool_grid
    grid_buf = np.zeros((min(chunk, max(q, 1)), kp, kp, kp, concat.channels))
    for lo in range(0, q, chunk):
        hi = min(lo + chunk, q)
        t0 = time.perf_counter()
        grids = grid_buf[: hi - lo]
        for i in range(lo, hi):
            box = OrientedBox(*proposals[i])
            cand = (
                radius_neighbors(pool_grid, concat, proposals[i, 0:3], float(circum[i]))
                if pool_grid is not None
                else None
            )
            grids[i - lo] = la_pool(concat, box, roi_cfg, candidates=cand).grid
        pool_time += time.perf_counter() - t0
        t0 = time.perf_counter()
        rows = refine_head_batch(grids, weights.refine, cfg.activation)
        refined[lo:hi] = decode_boxes(proposals[lo:hi, 0:3], rows[:, 1:8], (1.0, 1.0, 1.0))
        refined[lo:hi, 3:6] *= proposals[lo:hi, 3:6]
        refined[lo:hi, 6] = proposals[lo:hi, 6] + rows[:, 7]
        refined_conf[lo:hi] = rows[:, 0]
        refined_flip[lo:hi] = rows[:, 8]
        refine_time += time.perf_counter() - t0
    report.stages.append(("roi_pool", pool_time))
    report.stages.append(("refine", refine_time))

    report.peak_buffer_bytes = int(peak_buffer)
    report.total_seconds = time.perf_counter() - t_total
    return ForwardResult(
        proposals,
        confidences,
        flips,
        refined,
        refined_conf,
        refined_flip,
        [len(c) for c in block_clouds],
        report,
    )


def bench(
    cfg: PipelineConfig,
    sizes: Sequence[int],
    repeats: int = 3,
    seed: int = 0,
    backend_names: Optional[Sequence[str]] = None,
) -> dict:
    """Median per-stage timings over synthetic scenes of increasing size,
    with a log-log slope fit per stage.

    Stages: grid-buffer downsampling, sort-unique downsampling, and one
    voxelize+convolve layer at a coarse resolution. With several backends
    the whole sweep runs once per backend for comparison.
    """
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    if backend_names is None:
        backend_names = [backends.active_backend_name()]
    out: dict = {"sizes": list(sizes), "repeats": repeats, "backends": {}}
    for name in backend_names:
        with backends.override(name):
            out["backends"][name] = _bench_one(cfg, sizes, repeats, seed)
    return out


def _bench_one(cfg: PipelineConfig, sizes, repeats, seed) -> dict:
    r = cfg.resolutions[0]
    base = cfg.sampling()
    cfg_buf = dataclasses.replace(
        base, strategy=Strategy.GRID_BUFFER, resolution=r, seed=seed
    )
    cfg_sort = dataclasses.replace(
        base, strategy=Strategy.SORT_UNIQUE, resolution=r, seed=seed
    )
    coarse_r = cfg.resolutions[-1] * 0.5
    vox_kernel = init_kernel(cfg.kernel_resolution, 1, 8, np.random.default_rng(seed))
    vcfg = VoxelizationConfig(radius=1.5 * coarse_r, k=cfg.kernel_resolution)
    workspace = GridBufferWorkspace()
    stage_names = ["downsample_buffer", "downsample_sort", "voxelize_conv"]
    results = {name: [] for name in stage_names}
    slots = 1
    for dim, res in zip(cfg.crop_extents, (r, r, r)):
        slots *= int(np.floor(dim / res + 1e-9))
    for n in sizes:
        cloud, _ = synth_scene(n, max(1, n // 50_000), seed=seed)
        clipped = _crop(cloud, cfg)
        times: dict[str, list[float]] = {name: [] for name in stage_names}
        downsample(clipped, cfg_buf, workspace)  # warm the reusable buffer
        for _ in range(repeats):
            t0 = time.perf_counter()
            downsample(clipped, cfg_buf, workspace)
            times["downsample_buffer"].append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            downsample(clipped, cfg_sort)
            times["downsample_sort"].append(time.perf_counter() - t0)
            coarse = dataclasses.replace(cfg_sort, resolution=coarse_r)
            keys = gather(clipped, downsample(clipped, coarse))
            t0 = time.perf_counter()
            conv_layer(clipped, keys.points, vcfg, vox_kernel, threads=cfg.threads)
            times["voxelize_conv"].append(time.perf_counter() - t0)
        for name in stage_names:
            results[name].append(float(np.median(times[name])))
    slopes = {}
    logn = np.log10(np.asarray(sizes, dtype=np.float64))
    for name in stage_names:
        y = np.log10(np.maximum(results[name], 1e-9))
        slopes[name] = float(np.polyfit(logn, y, 1)[0]) if len(sizes) > 1 else float("nan")
    return {
        "median_seconds": results,
        "loglog_slopes": slopes,
        "peak_buffer_bytes": slots * 4,
    }


def _crop(cloud: PointCloud, cfg: PipelineConfig) -> PointCloud:
    origin = np.asarray(cfg.crop_origin)
    extents = np.asarray(cfg.crop_extents)
    mask = np.all((cloud.points >= origin) & (cloud.points < origin + extents), axis=1)
    feats = cloud.features if cloud.channels else np.ones((len(cloud), 1))
    return PointCloud(cloud.points[mask], feats[mask])
