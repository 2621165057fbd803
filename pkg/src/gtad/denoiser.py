"""In-model latent denoising over the coarse BEV map.

The current coarse BEV map is corrupted with scheduled Gaussian noise and
cleaned in a single forward pass through a stack of denoising blocks,
each cross-attending from the noisy tokens to a condition sequence built
from the local voxel volume and the globally interacted BEV queue.

Bookkeeping constraint: each block computes its net update first and
applies it as one addition (x_next = x_i + upd, recorded decrement
eps_j = -upd).  Sequentially subtracting the recorded decrements from the
input then reproduces the output with exact floating-point equality,
which run_denoiser asserts after every pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .encoders import BevFeatureMap, TemporalQueue, VoxelFeatureGrid
from .numerics import ParamStore, Rng, ShapeError, Tensor


class DenoiserError(ValueError):
    pass


class NoiseSchedule:
    """Linear-beta forward corruption schedule.

    betas are linearly spaced in [1e-4, 2e-2] over t_max steps; alpha_bars
    holds the cumulative products with alpha_bar[0] = 1 by convention, so
    index t in [0, t_max] is a valid corruption scale and the sequence is
    strictly decreasing inside (0, 1].
    """

    def __init__(self, t_max: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2):
        if t_max < 1:
            raise DenoiserError(f"t_max must be >= 1, got {t_max}")
        if not (0.0 < beta_min <= beta_max < 1.0):
            raise DenoiserError("betas must satisfy 0 < beta_min <= beta_max < 1")
        self.t_max = int(t_max)
        self.betas = np.linspace(beta_min, beta_max, t_max)
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def alpha_bar(self, t: int) -> float:
        if not (0 <= t <= self.t_max):
            raise DenoiserError(f"corruption scale {t} outside [0, {self.t_max}]")
        return float(self.alpha_bars[t])


def corrupt(b_coarse, t: int, rng: Rng, sched: NoiseSchedule) -> Tensor:
    """sqrt(abar_t) * b + sqrt(1 - abar_t) * eps with eps ~ N(0, I).

    Accepts a BevFeatureMap or a raw Tensor.  t = 0 returns the input
    tensor unchanged (and draws no noise).
    """
    feats = b_coarse.features if isinstance(b_coarse, BevFeatureMap) else b_coarse
    abar = sched.alpha_bar(t)
    if t == 0:
        return feats
    eps = rng.normal(feats.shape)
    return feats * float(np.sqrt(abar)) + nm.constant(eps * float(np.sqrt(1.0 - abar)))


@dataclass
class DenoiserConfig:
    """Block count, attention key dim, and the default corruption scale."""

    num_blocks: int = 6
    key_dim: int = 16
    corruption_t: int = 800
    ffn_hidden: int = 32
    noise_hidden: int = 32

    def __post_init__(self):
        if self.num_blocks < 1:
            raise DenoiserError(f"num_blocks must be >= 1, got {self.num_blocks}")


@dataclass
class DenoiserState:
    """Final embedding plus the recorded per-block decrements."""

    x: Tensor
    cond: Tensor
    eps_history: list[Tensor] = field(default_factory=list)


class ConditionBuilder:
    """Token sequence from the local volume and the BEV queue.

    The local volume is mean-pooled over the vertical axis into H*W tokens
    and projected with a dedicated matrix; each queue entry contributes
    H*W tokens through a separate shared projection.  Tokens concatenate
    local-first, then queue entries oldest to newest.

    Zero-initialized positional embeddings (per BEV cell, plus one per
    temporal age where age = newest timestamp - entry timestamp + 1 and
    the local block is age 0) are added so the denoising attention can
    learn spatial and temporal routing.  At init they vanish, so tokens
    start as pure projections of the features.
    """

    def __init__(self, store: ParamStore, prefix: str, voxel_dim: int,
                 bev_dim: int, n_cells: int, max_age: int, rng: Rng):
        self.local_proj = store.param(f"{prefix}.local_proj", (voxel_dim, bev_dim),
                                      rng.child("local"))
        self.global_proj = store.param(f"{prefix}.global_proj", (bev_dim, bev_dim),
                                       rng.child("global"))
        self.plane_pos = store.param(f"{prefix}.plane_pos", (n_cells, bev_dim))
        self.age_pos = store.param(f"{prefix}.age_pos", (max_age + 1, bev_dim))
        self.bev_dim = int(bev_dim)
        self.max_age = int(max_age)

    def __call__(self, local: VoxelFeatureGrid, queue: TemporalQueue) -> Tensor:
        h, w, _, d = local.features.shape
        if self.plane_pos.shape[0] != h * w:
            raise ShapeError(f"condition built for {self.plane_pos.shape[0]} cells, got {h * w}")
        pooled = nm.reshape(nm.tmean(local.features, axis=2), (h * w, d))
        tokens = [nm.matmul(pooled, self.local_proj) + self.plane_pos
                  + nm.reshape(self.age_pos[0], (1, self.bev_dim))]
        newest_ts = queue[-1].timestamp if len(queue) else 0
        for entry in queue:
            eh, ew, ec = entry.features.shape
            if (eh, ew) != (h, w) or ec != self.bev_dim:
                raise ShapeError(
                    f"queue entry {entry.features.shape} inconsistent with local {(h, w)} / C={self.bev_dim}"
                )
            age = min(newest_ts - entry.timestamp + 1, self.max_age)
            flat = nm.reshape(entry.features, (eh * ew, ec))
            tokens.append(nm.matmul(flat, self.global_proj) + self.plane_pos
                          + nm.reshape(self.age_pos[age], (1, self.bev_dim)))
        return tokens[0] if len(tokens) == 1 else nm.concat(tokens, axis=0)


class DenoisingBlock:
    """Cross-attention + FFN + two-layer noise prediction, one decrement.

    Dataflow: attention from the noisy tokens to the condition tokens with
    residual add, FFN with residual add, then a Linear-ReLU-Linear noise
    predictor whose output is subtracted.  The three contributions are
    folded into a single net update so the recorded decrement exactly
    accounts for the block's effect.
    """

    def __init__(self, store: ParamStore, prefix: str, dim: int, cfg: DenoiserConfig, rng: Rng):
        d = cfg.key_dim
        self.key_scale = 1.0 / float(np.sqrt(d))
        mk = store.param
        self.wq = mk(f"{prefix}.wq", (dim, d), rng.child("wq"))
        self.bq = mk(f"{prefix}.bq", (d,))
        self.wk = mk(f"{prefix}.wk", (dim, d), rng.child("wk"))
        self.bk = mk(f"{prefix}.bk", (d,))
        self.wv = mk(f"{prefix}.wv", (dim, dim), rng.child("wv"))
        self.bv = mk(f"{prefix}.bv", (dim,))
        self.ffn_w1 = mk(f"{prefix}.ffn_w1", (dim, cfg.ffn_hidden), rng.child("f1"))
        self.ffn_b1 = mk(f"{prefix}.ffn_b1", (cfg.ffn_hidden,))
        self.ffn_w2 = mk(f"{prefix}.ffn_w2", (cfg.ffn_hidden, dim), rng.child("f2"))
        self.ffn_b2 = mk(f"{prefix}.ffn_b2", (dim,))
        self.np_w1 = mk(f"{prefix}.np_w1", (dim, cfg.noise_hidden), rng.child("n1"))
        self.np_b1 = mk(f"{prefix}.np_b1", (cfg.noise_hidden,))
        self.np_w2 = mk(f"{prefix}.np_w2", (cfg.noise_hidden, dim), rng.child("n2"))
        self.np_b2 = mk(f"{prefix}.np_b2", (dim,))

    def __call__(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 2 or cond.ndim != 2 or x.shape[1] != cond.shape[1]:
            raise ShapeError(f"block expects [N,C] and [S,C], got {x.shape} and {cond.shape}")
        q = nm.linear(x, self.wq, self.bq)
        k = nm.linear(cond, self.wk, self.bk)
        v = nm.linear(cond, self.wv, self.bv)
        logits = nm.matmul(q, nm.transpose(k)) * self.key_scale
        attn = nm.matmul(nm.softmax(logits, axis=-1), v)

        x_res = x + attn
        ffn = nm.linear(nm.relu(nm.linear(x_res, self.ffn_w1, self.ffn_b1)),
                        self.ffn_w2, self.ffn_b2)
        x_mid = x_res + ffn
        noise = nm.linear(nm.relu(nm.linear(x_mid, self.np_w1, self.np_b1)),
                          self.np_w2, self.np_b2)

        # single-addition update keeps the telescoping identity exact
        upd = (attn + ffn) - noise
        eps_j = nm.neg(upd)
        return x + upd, eps_j


def run_denoiser(x_noisy: Tensor, cond: Tensor, blocks: list[DenoisingBlock]) -> DenoiserState:
    """Chain the denoising blocks in one pass and verify the bookkeeping.

    Returns the final embedding and the per-block decrements; asserts that
    sequentially subtracting the decrements from the input reproduces the
    output exactly (bit for bit).
    """
    if not blocks:
        raise DenoiserError("run_denoiser needs at least one block")
    state = DenoiserState(x=x_noisy, cond=cond)
    x = x_noisy
    for block in blocks:
        x, eps_j = block(x, cond)
        state.eps_history.append(eps_j)
    state.x = x

    check = x_noisy.data
    for eps_j in state.eps_history:
        check = check - eps_j.data
    if not np.array_equal(check, x.data):
        raise DenoiserError("telescoping identity violated: x_in - sum(eps) != x_out")
    return state


def merge_bev_into_voxels(x0, grid: VoxelFeatureGrid, proj: Tensor) -> VoxelFeatureGrid:
    """Broadcast the denoised BEV over Z, concat on channels, project to D.

    ``proj`` has shape [D + C, D]; channel order is voxel features first,
    BEV channels second.
    """
    feats = x0.features if isinstance(x0, BevFeatureMap) else x0
    h, w, z, d = grid.features.shape
    if feats.ndim == 2:
        if feats.shape[0] != h * w:
            raise ShapeError(f"BEV tokens {feats.shape} do not cover {h}x{w} cells")
        feats = nm.reshape(feats, (h, w, feats.shape[1]))
    if feats.shape[:2] != (h, w):
        raise ShapeError(f"BEV {feats.shape} does not match voxel plane {(h, w)}")
    c = feats.shape[2]
    if proj.shape != (d + c, d):
        raise ShapeError(f"merge projection must be [{d + c}, {d}], got {proj.shape}")
    bev_col = nm.reshape(feats, (h, w, 1, c))
    bev_full = nm.repeat_axis(bev_col, z, axis=2)
    stacked = nm.concat([grid.features, bev_full], axis=-1)
    merged = nm.linear(nm.reshape(stacked, (h * w * z, d + c)), proj)
    return grid.with_features(nm.reshape(merged, (h, w, z, d)))
