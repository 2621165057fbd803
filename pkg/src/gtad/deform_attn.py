"""Deformable attention: sample a 2-D value map at learned offsets.

A head projects each query to P sampling offsets and P softmax weights,
bilinearly samples the value map at reference + offset, and projects the
weighted sum to the output dimension.  Offsets are measured in cells
(unclamped); out-of-bounds samples read zero through the sampling rule.

Every dense op in the forward pass keeps an N-independent per-element
summation order (``matmul_fixed_order``, last-axis reductions, per-point
gathers), so batched rows are bitwise identical to single-query calls.
``deform_attn_multi`` generalizes the same arithmetic to a stack of value
maps with a per-row map index and an optional row-gather of precomputed
query projections; the encoders use it to pack many small reads into one
call.  The single-map ops are thin views of the multi-map path.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import ParamStore, Rng, ShapeError, Tensor


class DeformAttnHead:
    """Single-head deformable attention parameters.

    d_q: query dim, d_v: value-map channel dim, d_out: output dim,
    num_points: P sampling points per query.
    """

    def __init__(self, store: ParamStore, prefix: str, d_q: int, d_v: int,
                 d_out: int, num_points: int, rng: Rng,
                 offset_scale: float = 0.5):
        if num_points < 1:
            raise ShapeError(f"num_points must be >= 1, got {num_points}")
        self.num_points = int(num_points)
        self.d_q, self.d_v, self.d_out = int(d_q), int(d_v), int(d_out)
        self.offset_proj = store.param(f"{prefix}.offset_proj", (d_q, 2 * num_points),
                                       rng.child("offset"), scale=offset_scale / np.sqrt(d_q))
        self.weight_proj = store.param(f"{prefix}.weight_proj", (d_q, num_points),
                                       rng.child("weight"))
        self.value_proj = store.param(f"{prefix}.value_proj", (d_v, d_out),
                                      rng.child("value"))

    def project_queries(self, queries: Tensor) -> tuple[Tensor, Tensor]:
        """Per-query sampling offsets [N, P, 2] and weights [N, P]."""
        n = queries.shape[0]
        offsets = nm.matmul_fixed_order(queries, self.offset_proj)
        weights = nm.softmax(nm.matmul_fixed_order(queries, self.weight_proj), axis=-1)
        return nm.reshape(offsets, (n, self.num_points, 2)), weights


def deform_attn_multi(head: DeformAttnHead, queries: Tensor, refs, maps: Tensor,
                      map_idx: np.ndarray, query_rows: np.ndarray | None = None) -> Tensor:
    """Deformable reads over a stack of value maps.

    queries: [M, d_q]; refs: [N, 2]; maps: [V, H, W, d_v]; map_idx: [N]
    selects the map per output row.  ``query_rows`` (default identity)
    gathers query projections per output row, so a query projected once
    can drive many reads.  Returns [N, d_out]; each row is bitwise what a
    lone deform_attn call on that (query, ref, map) would produce.
    """
    refs_t = refs if isinstance(refs, Tensor) else nm.constant(np.asarray(refs, dtype=np.float64))
    if queries.ndim != 2 or queries.shape[1] != head.d_q:
        raise ShapeError(f"queries shape {queries.shape} incompatible with d_q={head.d_q}")
    if maps.ndim != 4 or maps.shape[3] != head.d_v:
        raise ShapeError(f"maps shape {maps.shape} incompatible with d_v={head.d_v}")
    n = refs_t.shape[0]
    if refs_t.shape != (n, 2):
        raise ShapeError(f"refs must be [N, 2], got {refs_t.shape}")
    midx = np.asarray(map_idx, dtype=np.int64)
    if midx.shape != (n,):
        raise ShapeError(f"map_idx shape {midx.shape} != ({n},)")

    p = head.num_points
    offsets, weights = head.project_queries(queries)
    if query_rows is not None:
        rows = np.asarray(query_rows, dtype=np.int64)
        if rows.shape != (n,):
            raise ShapeError(f"query_rows shape {rows.shape} != ({n},)")
        offsets = nm.reshape(nm.take_rows(nm.reshape(offsets, (queries.shape[0], 2 * p)), rows),
                             (n, p, 2))
        weights = nm.take_rows(weights, rows)
    elif queries.shape[0] != n:
        raise ShapeError(f"{queries.shape[0]} queries for {n} refs (pass query_rows)")

    pts = offsets + nm.reshape(refs_t, (n, 1, 2))
    samples = nm.bilinear_sample_multi(maps, np.repeat(midx, p), nm.reshape(pts, (n * p, 2)))
    samples = nm.reshape(samples, (n, p, head.d_v))
    weighted = nm.tsum(samples * nm.reshape(weights, (n, p, 1)), axis=1)
    return nm.matmul_fixed_order(weighted, head.value_proj)


def deform_attn_batch(head: DeformAttnHead, queries: Tensor, refs,
                      value_map: Tensor) -> Tensor:
    """Row i of the result equals deform_attn on (queries[i], refs[i]).

    queries: [N, d_q]; refs: [N, 2] continuous (x, y) map coordinates
    (x along width, y along height); value_map: [H, W, d_v].  Returns
    [N, d_out].  refs may be a Tensor (gradients then flow into it).
    """
    if value_map.ndim != 3:
        raise ShapeError(f"value_map must be [H, W, d_v], got {value_map.shape}")
    refs_t = refs if isinstance(refs, Tensor) else nm.constant(np.asarray(refs, dtype=np.float64))
    if refs_t.ndim != 2 or refs_t.shape != (queries.shape[0], 2):
        raise ShapeError(f"refs shape {refs_t.shape} != ({queries.shape[0]}, 2)")
    maps = nm.reshape(value_map, (1,) + value_map.shape)
    return deform_attn_multi(head, queries, refs_t, maps,
                             np.zeros(queries.shape[0], dtype=np.int64))


def deform_attn(head: DeformAttnHead, query: Tensor, ref, value_map: Tensor) -> Tensor:
    """Single-query deformable attention; returns [d_out]."""
    if query.ndim != 1:
        raise ShapeError(f"query must be 1-D, got shape {query.shape}")
    ref_arr = ref if isinstance(ref, Tensor) else nm.constant(np.asarray(ref, dtype=np.float64))
    out = deform_attn_batch(head, nm.reshape(query, (1, query.shape[0])),
                            nm.reshape(ref_arr, (1, 2)), value_map)
    return nm.reshape(out, (head.d_out,))
