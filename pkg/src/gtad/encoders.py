"""Spatial and temporal encoders over voxel and BEV feature grids.

The spatial encoder lifts multi-camera image features into a voxel grid
via per-voxel deformable attention at projected reference points.  The
local temporal encoder reads ego-motion-aligned history volumes on the
BEV plane of each query.  The global interaction module compresses voxel
volumes to BEV maps and runs gain-weighted pairwise fusion sweeps over
the temporal queue (newest-to-oldest, then oldest-to-newest) so every
entry picks up non-local context.

All encoders pack their reads into single ``deform_attn_multi`` calls
(query projections hoisted, one map stack, per-row map index); results
are bitwise identical to looping the scalar op, just far fewer numpy
dispatches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .deform_attn import DeformAttnHead, deform_attn_multi
from .geometry import CameraModel, EgoPose, VoxelGridSpec, project_points, project_points_diff, voxel_centers
from .numerics import ParamStore, Rng, ShapeError, Tensor


class EncoderError(ValueError):
    pass


@dataclass
class VoxelFeatureGrid:
    """Voxel feature volume [H, W, Z, D] with its grid layout and pose."""

    features: Tensor
    spec: VoxelGridSpec
    pose: EgoPose

    def __post_init__(self):
        if self.features.shape[:3] != self.spec.dims:
            raise EncoderError(
                f"features {self.features.shape} inconsistent with spec dims {self.spec.dims}"
            )

    @property
    def embed_dim(self) -> int:
        return self.features.shape[3]

    def with_features(self, features: Tensor) -> "VoxelFeatureGrid":
        return VoxelFeatureGrid(features, self.spec, self.pose)


@dataclass
class BevFeatureMap:
    """BEV feature map [H, W, C] tagged with frame index and pose."""

    features: Tensor
    timestamp: int
    pose: EgoPose

    def with_features(self, features: Tensor) -> "BevFeatureMap":
        return BevFeatureMap(features, self.timestamp, self.pose)


class TemporalQueue:
    """Ordered BEV maps, oldest first; timestamps strictly increasing."""

    def __init__(self, entries):
        entries = list(entries)
        for a, b in zip(entries, entries[1:]):
            if b.timestamp <= a.timestamp:
                raise EncoderError("queue timestamps must be strictly increasing")
        shapes = {e.features.shape for e in entries}
        if len(shapes) > 1:
            raise EncoderError(f"queue entries disagree on shape: {shapes}")
        self.entries = entries

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


class DecayWeight:
    """Learnable time-decay omega(dt) = exp(-softplus(raw) * dt), in (0, 1]."""

    def __init__(self, store: ParamStore, prefix: str, init_omega: float = 0.74):
        if not (0.0 < init_omega < 1.0):
            raise EncoderError("init_omega must lie in (0, 1)")
        # invert omega = exp(-softplus(raw)) at dt=1 for the initial value
        s = -np.log(init_omega)
        raw = np.log(np.expm1(s))
        self.raw = store.param(f"{prefix}.raw", (), init=np.float64(raw))

    def __call__(self, dt: float = 1.0) -> Tensor:
        return nm.exp(nm.neg(nm.softplus(self.raw)) * float(dt))


def _plane_coords(h: int, w: int) -> np.ndarray:
    """Per-cell (x, y) sample coordinates for an [H, W] map, C-order."""
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([jj.ravel(), ii.ravel()], axis=1).astype(np.float64)


def _volume_as_maps(features: Tensor):
    """[H, W, Z, D] -> per-slice map stack [Z, H, W, D] plus flat cells."""
    h, w, z, d = features.shape
    maps = nm.permute(features, (2, 0, 1, 3))
    cells = nm.reshape(maps, (z * h * w, d))
    return maps, cells


def _slice_coords(h: int, w: int, z: int) -> tuple[np.ndarray, np.ndarray]:
    """(refs [Z*H*W, 2], map_idx [Z*H*W]) matching _volume_as_maps order."""
    plane = _plane_coords(h, w)
    refs = np.tile(plane, (z, 1))
    midx = np.repeat(np.arange(z, dtype=np.int64), h * w)
    return refs, midx


class SpatialCrossAttention:
    """Per-voxel deformable reads of multi-camera image features.

    Each voxel spawns ``num_ref_points`` metric reference points (cell
    center plus learnable per-point offsets in meters).  A view counts as
    valid for a voxel when the cell center projects onto that image; the
    result is added residually, scaled by 1/|valid views|.  Voxels seen
    by no camera pass through unchanged.  Reference points behind a
    camera are dropped from that view's sum.
    """

    def __init__(self, store: ParamStore, prefix: str, embed_dim: int,
                 img_dim: int, num_ref_points: int, da_points: int, rng: Rng,
                 ref_offset_scale: float = 0.25):
        if num_ref_points < 1:
            raise EncoderError(f"num_ref_points must be >= 1, got {num_ref_points}")
        self.num_ref_points = int(num_ref_points)
        self.ref_offsets = store.param(f"{prefix}.ref_offsets", (num_ref_points, 3),
                                       rng.child("refs"), scale=ref_offset_scale)
        self.head = DeformAttnHead(store, f"{prefix}.da", d_q=embed_dim, d_v=img_dim,
                                   d_out=embed_dim, num_points=da_points, rng=rng.child("da"))

    def __call__(self, grid: VoxelFeatureGrid, image_feats: list[Tensor],
                 cams: list[CameraModel]) -> VoxelFeatureGrid:
        if not cams:
            raise EncoderError("spatial cross-attention needs at least one camera")
        if len(image_feats) != len(cams):
            raise EncoderError(f"{len(image_feats)} feature maps for {len(cams)} cameras")

        spec = grid.spec
        n_vox = spec.num_cells
        centers = voxel_centers(spec)
        queries = nm.reshape(grid.features, (n_vox, grid.embed_dim))

        # view membership is decided by the cell center projection
        center_valid = [project_points(cam, centers)[1] for cam in cams]
        view_count = np.sum(center_valid, axis=0).astype(np.float64)
        if view_count.max() == 0:
            return grid

        # reference points are shared across views; pixels differ per view
        points_3d = [nm.constant(centers) + nm.reshape(self.ref_offsets[m], (1, 3))
                     for m in range(self.num_ref_points)]

        ref_blocks, mask_blocks, map_blocks = [], [], []
        for cam_idx, (cam, member) in enumerate(zip(cams, center_valid)):
            for pts in points_3d:
                uv, depth_ok = project_points_diff(cam, pts)
                ref_blocks.append(uv)
                mask_blocks.append(member & depth_ok)
                map_blocks.append(np.full(n_vox, cam_idx, dtype=np.int64))

        n_blocks = len(ref_blocks)
        maps = nm.concat([nm.reshape(img, (1,) + img.shape) for img in image_feats], axis=0)
        refs = nm.concat(ref_blocks, axis=0)
        map_idx = np.concatenate(map_blocks)
        query_rows = np.tile(np.arange(n_vox, dtype=np.int64), n_blocks)

        reads = deform_attn_multi(self.head, queries, refs, maps, map_idx, query_rows)
        mask = np.concatenate(mask_blocks).astype(np.float64)[:, None]
        reads = reads * nm.constant(mask)
        accum = nm.tsum(nm.reshape(reads, (n_blocks, n_vox, grid.embed_dim)), axis=0)

        scale = np.where(view_count > 0, 1.0 / np.maximum(view_count, 1.0), 0.0)[:, None]
        fused = queries + accum * nm.constant(scale)
        return grid.with_features(nm.reshape(fused, grid.features.shape))


class TemporalSelfAttention:
    """Reads the aligned history volume on each query's BEV plane.

    Reference points share the query's depth slice and carry learnable
    in-plane offsets (one (x, y) pair per reference point); the history
    slice at that depth is the 2-D value map.  Added residually.
    """

    def __init__(self, store: ParamStore, prefix: str, embed_dim: int,
                 num_ref_points: int, da_points: int, rng: Rng,
                 ref_offset_scale: float = 0.5):
        if num_ref_points < 1:
            raise EncoderError(f"num_ref_points must be >= 1, got {num_ref_points}")
        self.num_ref_points = int(num_ref_points)
        self.ref_offsets = store.param(f"{prefix}.ref_offsets", (num_ref_points, 2),
                                       rng.child("refs"), scale=ref_offset_scale)
        self.head = DeformAttnHead(store, f"{prefix}.da", d_q=embed_dim, d_v=embed_dim,
                                   d_out=embed_dim, num_points=da_points, rng=rng.child("da"))

    def __call__(self, q_now: VoxelFeatureGrid, q_hist: VoxelFeatureGrid) -> VoxelFeatureGrid:
        if q_now.features.shape != q_hist.features.shape:
            raise ShapeError(
                f"current {q_now.features.shape} and history {q_hist.features.shape} disagree"
            )
        h, w, z, d = q_now.features.shape
        maps, _ = _volume_as_maps(q_hist.features)
        _, cells = _volume_as_maps(q_now.features)
        base_refs, base_midx = _slice_coords(h, w, z)
        n_cells = z * h * w

        ref_blocks = [nm.constant(base_refs) + nm.reshape(self.ref_offsets[npt], (1, 2))
                      for npt in range(self.num_ref_points)]
        refs = nm.concat(ref_blocks, axis=0)
        map_idx = np.tile(base_midx, self.num_ref_points)
        query_rows = np.tile(np.arange(n_cells, dtype=np.int64), self.num_ref_points)

        reads = deform_attn_multi(self.head, cells, refs, maps, map_idx, query_rows)
        acc = nm.tsum(nm.reshape(reads, (self.num_ref_points, n_cells, d)), axis=0)
        out = nm.reshape(cells + acc, (z, h, w, d))
        return q_now.with_features(nm.permute(out, (1, 2, 0, 3)))


class BevCompressor:
    """Voxel volume -> BEV map: per-slice in-plane deformable mixing, then
    average pooling over the vertical axis (C_bev equals the voxel dim)."""

    def __init__(self, store: ParamStore, prefix: str, embed_dim: int,
                 da_points: int, rng: Rng):
        self.head = DeformAttnHead(store, f"{prefix}.da", d_q=embed_dim, d_v=embed_dim,
                                   d_out=embed_dim, num_points=da_points, rng=rng)

    def __call__(self, grid: VoxelFeatureGrid) -> BevFeatureMap:
        h, w, z, d = grid.features.shape
        maps, cells = _volume_as_maps(grid.features)
        refs, midx = _slice_coords(h, w, z)
        mixed = cells + deform_attn_multi(self.head, cells, refs, maps, midx)
        bev = nm.tmean(nm.reshape(mixed, (z, h * w, d)), axis=0)
        return BevFeatureMap(nm.reshape(bev, (h, w, d)), grid.pose.timestamp, grid.pose)


class GlobalInteraction:
    """Pairwise gain fusion over the temporal queue.

    ``giam(b_i, b_j, omega)`` updates b_j with omega times the gain, the
    mean of two deformable reads (one into each map) driven by the
    channel-concatenated per-cell query.  One head is shared across both
    branches and both sweep directions.
    """

    def __init__(self, store: ParamStore, prefix: str, bev_dim: int,
                 da_points: int, rng: Rng, init_omega: float = 0.74):
        self.head = DeformAttnHead(store, f"{prefix}.da", d_q=2 * bev_dim, d_v=bev_dim,
                                   d_out=bev_dim, num_points=da_points, rng=rng.child("da"))
        self.decay = DecayWeight(store, f"{prefix}.decay", init_omega=init_omega)

    def giam(self, b_i: BevFeatureMap, b_j: BevFeatureMap, omega) -> BevFeatureMap:
        """b_j + omega * gain; omega may be a DecayWeight-evaluated Tensor
        or a plain float (0.0 returns b_j bitwise unchanged)."""
        if b_i.features.shape != b_j.features.shape:
            raise ShapeError(
                f"bev maps disagree: {b_i.features.shape} vs {b_j.features.shape}"
            )
        if isinstance(omega, (int, float)) and float(omega) == 0.0:
            return b_j
        h, w, c = b_j.features.shape
        query = nm.reshape(nm.concat([b_i.features, b_j.features], axis=-1), (h * w, 2 * c))
        maps = nm.concat([nm.reshape(b_i.features, (1, h, w, c)),
                          nm.reshape(b_j.features, (1, h, w, c))], axis=0)
        plane = _plane_coords(h, w)
        refs = np.tile(plane, (2, 1))
        map_idx = np.repeat(np.arange(2, dtype=np.int64), h * w)
        query_rows = np.tile(np.arange(h * w, dtype=np.int64), 2)
        reads = deform_attn_multi(self.head, query, refs, maps, map_idx, query_rows)
        gain = nm.tsum(nm.reshape(reads, (2, h * w, c)), axis=0) * 0.5
        gain = nm.reshape(gain, (h, w, c))
        omega_t = omega if isinstance(omega, Tensor) else nm.constant(float(omega))
        return b_j.with_features(b_j.features + omega_t * gain)

    def __call__(self, queue: TemporalQueue, omega=None) -> TemporalQueue:
        """Backward sweep (newest into past) then forward sweep (past into
        newest); returns an updated queue.  Queues shorter than 2 entries
        are returned unchanged.  ``omega`` defaults to the learned decay
        weight at dt=1."""
        if len(queue) < 2:
            return queue
        if omega is None:
            omega = self.decay(1.0)
        entries = list(queue.entries)
        last = len(entries) - 1
        for i in range(last, 0, -1):
            entries[i - 1] = self.giam(entries[i], entries[i - 1], omega)
        for i in range(0, last):
            entries[i + 1] = self.giam(entries[i], entries[i + 1], omega)
        return TemporalQueue(entries)


def global_queue_interaction(module: GlobalInteraction, queue: TemporalQueue,
                             omega=None) -> TemporalQueue:
    return module(queue, omega)
