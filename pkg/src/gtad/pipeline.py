"""End-to-end assembly: model construction, training loop, evaluation,
ablation runner, reports, and BEV image export.

A forward pass runs: per-frame spatial encoding -> ego-motion alignment of
history volumes -> local temporal attention into the newest volume ->
per-frame BEV compression -> global queue fusion (per the fusion switch)
-> corruption of the current coarse BEV -> condition construction ->
in-model denoising -> BEV/voxel merge -> upsampling decoder -> per-voxel
heads.  With the denoiser off the coarse BEV merges directly and the
global fusion stage is skipped (its only consumer is the condition).

Fusion switches: 'none' drops history from the condition, 'cat' collapses
the queue by channel concat + projection, 'tsa' aggregates it with a
recurrent deformable pass, 'giam' runs the pairwise gain sweeps and feeds
every interacted entry to the condition.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import numerics as nm
from .deform_attn import DeformAttnHead, deform_attn_batch
from .denoiser import (ConditionBuilder, DenoiserConfig, DenoisingBlock, NoiseSchedule,
                       corrupt, merge_bev_into_voxels, run_denoiser)
from .encoders import (BevCompressor, BevFeatureMap, GlobalInteraction,
                       SpatialCrossAttention, TemporalQueue, TemporalSelfAttention,
                       VoxelFeatureGrid, _plane_coords)
from .geometry import VoxelGridSpec, align_voxel_features
from .heads_losses import (LossWeights, MlpHead, OccupancyVolume, UpsampleDecoder,
                           focal_loss, iou_csv, lovasz_loss, miou, miou_union_average,
                           thing_mask_loss, total_seg_loss)
from .numerics import NonFiniteError, ParamStore, Rng, Tensor, autograd_off
from .scenegen import Frame, SceneBundle, SceneConfig, bundle_scene, generate_scene

UPSAMPLE_FACTORS = (4, 4, 2)
FUSION_MODES = ("none", "cat", "tsa", "giam")


class PipelineError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the pipeline; defaults reproduce the full path
    (local temporal on, giam fusion, denoiser with 6 blocks at t=800,
    4-frame history)."""

    # base voxel grid (ego-centric, meters)
    grid_h: int = 10
    grid_w: int = 10
    grid_z: int = 4
    range_xy: float = 5.0
    z_min: float = -1.0
    z_max: float = 3.0
    # model dimensions
    embed_dim: int = 16
    m1_points: int = 2          # metric reference points per voxel (spatial encoder)
    n2_points: int = 2          # BEV-plane reference points (local temporal encoder)
    da_points: int = 2          # sampling points inside each deformable head
    key_dim: int = 16
    ffn_hidden: int = 32
    noise_hidden: int = 32
    denoise_blocks: int = 6
    corruption_t: int = 800
    t_max: int = 1000
    decode_hidden: int = 16
    decode_dim: int = 16
    head_hidden: int = 32
    # temporal window
    history: int = 4
    # ablation switches
    use_local_temporal: bool = True
    global_fusion: str = "giam"
    denoiser_on: bool = True
    # scene generation
    num_cameras: int = 2
    num_frames: int = 8
    num_objects: int = 3
    ego_speed: float = 0.5
    object_speed_min: float = 0.05
    object_speed_max: float = 0.35
    num_classes: int = 6
    image_w: int = 32
    image_h: int = 32
    # losses
    lambda_focal: float = 1.0
    lambda_lovasz: float = 1.0
    lambda_thing: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # optimization
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 6
    train_scenes: int = 4
    eval_scenes: int = 2

    def __post_init__(self):
        if self.global_fusion not in FUSION_MODES:
            raise PipelineError(
                f"global_fusion must be one of {FUSION_MODES}, got {self.global_fusion!r}"
            )
        if self.history < 1:
            raise PipelineError("history must be >= 1")
        if self.num_frames < self.history + 1:
            raise PipelineError(
                f"num_frames={self.num_frames} cannot cover history={self.history}"
            )
        if not (0 <= self.corruption_t <= self.t_max):
            raise PipelineError(
                f"corruption_t={self.corruption_t} outside [0, {self.t_max}]"
            )

    # -- derived pieces --------------------------------------------------
    @property
    def base_spec(self) -> VoxelGridSpec:
        return VoxelGridSpec(
            (self.grid_h, self.grid_w, self.grid_z),
            (-self.range_xy, -self.range_xy, self.z_min),
            (self.range_xy, self.range_xy, self.z_max),
        )

    @property
    def fine_spec(self) -> VoxelGridSpec:
        return self.base_spec.scaled(UPSAMPLE_FACTORS)

    @property
    def img_channels(self) -> int:
        return self.num_classes + 5

    @property
    def bev_dim(self) -> int:
        return self.embed_dim

    @property
    def queue_len(self) -> int:
        return self.history + 1

    def scene_config(self, seed: int) -> SceneConfig:
        return SceneConfig(
            grid=self.base_spec,
            num_cameras=self.num_cameras,
            num_frames=self.num_frames,
            num_objects=self.num_objects,
            object_speed=(self.object_speed_min, self.object_speed_max),
            ego_speed=self.ego_speed,
            num_classes=self.num_classes,
            seed=seed,
            image_size=(self.image_w, self.image_h),
            history_frames=self.history,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_focal, self.lambda_lovasz, self.lambda_thing)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(self.denoise_blocks, self.key_dim, self.corruption_t,
                              self.ffn_hidden, self.noise_hidden)

    def echo(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}


def config_from_mapping(overrides: dict) -> PipelineConfig:
    """Build a config from string/typed key-value pairs (CLI and files)."""
    kwargs = {}
    by_name = {f.name: f for f in fields(PipelineConfig)}
    for key, value in overrides.items():
        if key not in by_name:
            raise PipelineError(f"unknown config key {key!r}")
        default = getattr(PipelineConfig, key)
        if isinstance(value, str):
            if isinstance(default, bool):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0"):
                    raise PipelineError(f"bad boolean for {key!r}: {value!r}")
                value = low in ("true", "1")
            elif isinstance(default, int):
                value = int(value)
            elif isinstance(default, float):
                value = float(value)
            else:
                value = value.strip().strip("'\"")
        kwargs[key] = value
    return PipelineConfig(**kwargs)


class GtadModel:
    """All learnable components for one PipelineConfig."""

    def __init__(self, cfg: PipelineConfig, rng: Rng):
        self.cfg = cfg
        self.store = ParamStore()
        store, d = self.store, cfg.embed_dim
        spec = cfg.base_spec

        self.query_base = store.param("queries.base", spec.dims + (d,),
                                      rng.child("qbase"), scale=0.25)
        self.query_pos = store.param("queries.pos", spec.dims + (d,),
                                     rng.child("qpos"), scale=0.25)
        self.sca = SpatialCrossAttention(store, "sca", d, cfg.img_channels,
                                         cfg.m1_points, cfg.da_points, rng.child("sca"))
        if cfg.use_local_temporal:
            self.tsa = TemporalSelfAttention(store, "tsa", d, cfg.n2_points,
                                             cfg.da_points, rng.child("tsa"))
        self.v2b = BevCompressor(store, "v2b", d, cfg.da_points, rng.child("v2b"))

        self.needs_fusion = cfg.denoiser_on and cfg.global_fusion != "none"
        if self.needs_fusion:
            if cfg.global_fusion == "giam":
                self.giam = GlobalInteraction(store, "giam", cfg.bev_dim,
                                              cfg.da_points, rng.child("giam"))
            elif cfg.global_fusion == "cat":
                self.cat_proj = store.param(
                    "fuse_cat.proj", (cfg.queue_len * cfg.bev_dim, cfg.bev_dim),
                    rng.child("cat"))
            elif cfg.global_fusion == "tsa":
                self.fuse_tsa = DeformAttnHead(store, "fuse_tsa.da", cfg.bev_dim,
                                               cfg.bev_dim, cfg.bev_dim,
                                               cfg.da_points, rng.child("ftsa"))

        if cfg.denoiser_on:
            dcfg = cfg.denoiser_config()
            n_cells = cfg.grid_h * cfg.grid_w
            self.schedule = NoiseSchedule(cfg.t_max)
            self.cond = ConditionBuilder(store, "cond", d, cfg.bev_dim, n_cells,
                                         cfg.queue_len, rng.child("cond"))
            self.noisy_pos = store.param("denoiser.noisy_pos", (n_cells, cfg.bev_dim))
            self.blocks = [DenoisingBlock(store, f"denoiser.block{j}", cfg.bev_dim,
                                          dcfg, rng.child("block", j))
                           for j in range(dcfg.num_blocks)]

        # near-passthrough init: the voxel half starts as identity so the
        # denoised-BEV channels fade in through training
        merge_init = np.concatenate([np.eye(d), np.zeros((cfg.bev_dim, d))], axis=0)
        merge_init += rng.child("merge").normal(merge_init.shape, scale=0.02)
        self.merge_proj = store.param("merge.proj", (d + cfg.bev_dim, d), init=merge_init)
        self.decoder = UpsampleDecoder(store, "decode", d, cfg.decode_hidden,
                                       cfg.decode_dim, rng.child("decode"))
        self.seg_head = MlpHead(store, "seghead", cfg.decode_dim, cfg.head_hidden,
                                cfg.num_classes + 1, rng.child("seg"))
        self.fg_head = MlpHead(store, "fghead", cfg.decode_dim, cfg.head_hidden,
                               2, rng.child("fg"))

    # -- forward ---------------------------------------------------------
    def initial_grid(self, pose) -> VoxelFeatureGrid:
        # positional encoding joins the queries exactly once per pass
        return VoxelFeatureGrid(self.query_base + self.query_pos, self.cfg.base_spec, pose)

    def forward(self, window: list[Frame], cams, corrupt_rng: Rng) -> OccupancyVolume:
        cfg = self.cfg
        if len(window) != cfg.queue_len:
            raise PipelineError(f"window must hold {cfg.queue_len} frames, got {len(window)}")
        spec = cfg.base_spec
        now = window[-1]

        grids = []
        for frame in window:
            images = [nm.constant(img) for img in frame.images]
            grids.append(self.sca(self.initial_grid(frame.ego_pose), images, cams))

        aligned = []
        for frame, grid in zip(window[:-1], grids[:-1]):
            feats = align_voxel_features(grid.features, spec, now.ego_pose, frame.ego_pose)
            aligned.append((frame.index, VoxelFeatureGrid(feats, spec, now.ego_pose)))

        q_now = grids[-1]
        if cfg.use_local_temporal and aligned:
            # local aggregation reads the adjacent frame only; older frames
            # reach the output through the global queue
            q_now = self.tsa(q_now, aligned[-1][1])

        entries = []
        for ts, grid in aligned:
            bev = self.v2b(grid)
            entries.append(BevFeatureMap(bev.features, ts, now.ego_pose))
        coarse = self.v2b(q_now)
        coarse = BevFeatureMap(coarse.features, now.index, now.ego_pose)
        entries.append(coarse)
        queue = TemporalQueue(entries)

        if cfg.denoiser_on:
            cond_queue = self._fuse_queue(queue)
            x_noisy = corrupt(coarse, cfg.corruption_t, corrupt_rng, self.schedule)
            h, w, c = coarse.features.shape
            tokens = nm.reshape(x_noisy, (h * w, c)) + self.noisy_pos
            cond = self.cond(q_now, cond_queue)
            x0 = run_denoiser(tokens, cond, self.blocks).x
        else:
            h, w, c = coarse.features.shape
            x0 = nm.reshape(coarse.features, (h * w, c))

        merged = merge_bev_into_voxels(x0, q_now, self.merge_proj)
        decoded = self.decoder(merged.features)
        return OccupancyVolume(self.seg_head(decoded), self.fg_head(decoded))

    def _fuse_queue(self, queue: TemporalQueue) -> TemporalQueue:
        cfg = self.cfg
        if cfg.global_fusion == "none":
            return TemporalQueue([])
        if cfg.global_fusion == "giam":
            return self.giam(queue)
        newest = queue[-1]
        h, w, c = newest.features.shape
        if cfg.global_fusion == "cat":
            stacked = nm.concat([e.features for e in queue], axis=-1)
            fused = nm.linear(nm.reshape(stacked, (h * w, len(queue) * c)), self.cat_proj)
            return TemporalQueue([newest.with_features(nm.reshape(fused, (h, w, c)))])
        # 'tsa': recurrent deformable aggregation, oldest map feeding forward
        refs = nm.constant(_plane_coords(h, w))
        agg = queue[0].features
        for entry in queue.entries[1:]:
            cells = nm.reshape(entry.features, (h * w, c))
            read = deform_attn_batch(self.fuse_tsa, cells, refs, agg)
            agg = nm.reshape(cells + read, (h, w, c))
        return TemporalQueue([newest.with_features(agg)])

    # -- persistence -------------------------------------------------------
    def save(self, path):
        self.store.save(path)

    def load(self, path):
        self.store.load(path)


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = self.m[name] / (1 - self.b1 ** t)
            v_hat = self.v[name] / (1 - self.b2 ** t)
            p.data = p.data - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                         + self.wd * p.data)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def build_bundles(cfg: PipelineConfig, seed: int, count: int,
                  label: str = "scene") -> list[SceneBundle]:
    """Generate ``count`` scenes with per-scene derived seeds."""
    bundles = []
    root = Rng(seed)
    for i in range(count):
        scene_seed = int(root.child(label, i).integers(0, 2**63 - 1))
        scene = generate_scene(cfg.scene_config(scene_seed))
        bundles.append(bundle_scene(scene, cfg.fine_spec))
    return bundles


def _windows(cfg: PipelineConfig, bundle: SceneBundle):
    k = cfg.history
    return [(end, bundle.frames[end - k : end + 1]) for end in range(k, bundle.num_frames)]


def window_loss(model: GtadModel, frames: list[Frame], cams, gt_frame: Frame,
                corrupt_rng: Rng) -> tuple[Tensor, OccupancyVolume]:
    cfg = model.cfg
    vol = model.forward(frames, cams, corrupt_rng)
    labels = gt_frame.gt_occupancy
    parts = {
        "focal": focal_loss(vol.logits, labels, cfg.focal_gamma, cfg.focal_alpha),
        "lovasz": lovasz_loss(vol.logits, labels, labels > 0),
        "thing": thing_mask_loss(vol.fg_logits, gt_frame.fg_mask.astype(np.int64),
                                 cfg.focal_gamma, cfg.focal_alpha),
    }
    return total_seg_loss(parts, cfg.loss_weights()), vol


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    """Training outcome; every metric field is reproducible bitwise from
    (config, seed).  wallclock_s is informational and excluded from
    determinism comparisons."""

    epoch_losses: list[float] = field(default_factory=list)
    miou: float = float("nan")
    miou_union: float = float("nan")
    per_class_iou: list[float] = field(default_factory=list)
    probe_iou: float = float("nan")
    wallclock_s: float = 0.0
    config_echo: dict[str, str] = field(default_factory=dict)
    seed: int = 0

    def metric_rows(self) -> list[tuple[str, str]]:
        rows = [("seed", str(self.seed))]
        rows += [(f"epoch_loss.{i}", repr(v)) for i, v in enumerate(self.epoch_losses)]
        rows.append(("miou", repr(self.miou)))
        rows.append(("miou_union", repr(self.miou_union)))
        rows += [(f"iou_class.{i}", repr(v)) for i, v in enumerate(self.per_class_iou)]
        rows.append(("probe_iou", repr(self.probe_iou)))
        rows += [(f"config.{k}", v) for k, v in sorted(self.config_echo.items())]
        return rows

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("key,value\n")
            for key, val in self.metric_rows():
                fh.write(f"{key},{val}\n")
            fh.write(f"wallclock_s,{repr(self.wallclock_s)}\n")

    @staticmethod
    def load(path) -> "RunReport":
        rep = RunReport()
        losses: dict[int, float] = {}
        ious: dict[int, float] = {}
        with open(path, encoding="utf-8") as fh:
            assert fh.readline().strip() == "key,value"
            for ln in fh:
                key, val = ln.rstrip("\n").split(",", 1)
                if key == "seed":
                    rep.seed = int(val)
                elif key.startswith("epoch_loss."):
                    losses[int(key.split(".", 1)[1])] = float(val)
                elif key == "miou":
                    rep.miou = float(val)
                elif key == "miou_union":
                    rep.miou_union = float(val)
                elif key.startswith("iou_class."):
                    ious[int(key.split(".", 1)[1])] = float(val)
                elif key == "probe_iou":
                    rep.probe_iou = float(val)
                elif key == "wallclock_s":
                    rep.wallclock_s = float(val)
                elif key.startswith("config."):
                    rep.config_echo[key.split(".", 1)[1]] = val
        rep.epoch_losses = [losses[i] for i in sorted(losses)]
        rep.per_class_iou = [ious[i] for i in sorted(ious)]
        return rep


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

def evaluate(model: GtadModel, bundles: list[SceneBundle], seed: int):
    """Metrics on each bundle's final window (the probe window).

    Returns (miou, miou_union, mean per-class vector, probe_iou).
    """
    cfg = model.cfg
    root = Rng(seed)
    mious, unions, probes, per_class_all = [], [], [], []
    with autograd_off():
        for b_idx, bundle in enumerate(bundles):
            end = bundle.num_frames - 1
            frames = bundle.frames[end - cfg.history : end + 1]
            vol = model.forward(frames, bundle.cameras, root.child("eval-corrupt", b_idx))
            pred = vol.labels
            gt = bundle.frames[end].gt_occupancy
            m, per_class = miou(pred, gt, cfg.num_classes + 1, ignore_empty=True)
            mious.append(m)
            unions.append(miou_union_average(pred, gt, cfg.num_classes + 1))
            per_class_all.append(per_class)
            if bundle.probe_class > 0 and bundle.probe_frame == end:
                probes.append(per_class[bundle.probe_class]
                              if not np.isnan(per_class[bundle.probe_class]) else 0.0)
    if per_class_all:
        stacked = np.stack(per_class_all)
        defined = ~np.all(np.isnan(stacked), axis=0)
        per_class_mean = np.full(stacked.shape[1], np.nan)
        per_class_mean[defined] = np.nanmean(stacked[:, defined], axis=0)
    else:
        per_class_mean = np.array([])
    probe = float(np.mean(probes)) if probes else float("nan")
    return (float(np.mean(mious)) if mious else float("nan"),
            float(np.mean(unions)) if unions else float("nan"),
            per_class_mean, probe)


def train(cfg: PipelineConfig, seed: int, train_bundles: list[SceneBundle],
          eval_bundles: list[SceneBundle] | None = None) -> tuple[GtadModel, RunReport]:
    """Deterministic training given (config, seed); returns model + report.

    Raises TrainingDiverged when the loss stops being finite.
    """
    t_start = time.perf_counter()
    rng = Rng(seed)
    model = GtadModel(cfg, rng.child("init"))
    opt = AdamW(model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    jobs = []
    for s_idx, bundle in enumerate(train_bundles):
        for end, frames in _windows(cfg, bundle):
            jobs.append((s_idx, end, frames, bundle))

    epoch_losses = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.child("shuffle", epoch).permutation(len(jobs))
        total = 0.0
        for j in order:
            s_idx, end, frames, bundle = jobs[int(j)]
            model.store.zero_grad()
            try:
                loss, _ = window_loss(model, frames, bundle.cameras, frames[-1],
                                      rng.child("corrupt", step))
                nm.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(scene {s_idx}, window end {end}): {exc}"
                ) from exc
            if cfg.lr != 0.0:
                opt.step()
            total += loss.item()
            step += 1
        epoch_losses.append(total / max(len(jobs), 1))

    eval_on = eval_bundles if eval_bundles is not None else train_bundles
    miou_v, miou_u, per_class, probe = evaluate(model, eval_on, seed)
    report = RunReport(
        epoch_losses=epoch_losses,
        miou=miou_v,
        miou_union=miou_u,
        per_class_iou=[float(v) for v in per_class],
        probe_iou=probe,
        wallclock_s=time.perf_counter() - t_start,
        config_echo=cfg.echo(),
        seed=seed,
    )
    return model, report


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_AXES = ("local", "fusion", "steps", "corruption")

_BASELINE = dict(use_local_temporal=False, global_fusion="none", denoiser_on=False)
_LOCAL_ONLY = dict(use_local_temporal=True, global_fusion="none", denoiser_on=False)


def ablation_rows(base: PipelineConfig, axis: str) -> list[tuple[str, str, PipelineConfig]]:
    """(swept-field, value-label, config) rows for one ablation axis."""
    if axis == "local":
        return [("use_local_temporal", "off", replace(base, use_local_temporal=False)),
                ("use_local_temporal", "on", replace(base, use_local_temporal=True))]
    if axis == "fusion":
        return [("global_fusion", mode, replace(base, global_fusion=mode))
                for mode in ("cat", "tsa", "giam")]
    if axis == "steps":
        return [("denoise_blocks", str(l), replace(base, denoise_blocks=l))
                for l in range(1, 10)]
    if axis == "corruption":
        return [("corruption_t", str(t), replace(base, corruption_t=t))
                for t in (200, 400, 600, 800, 1000)]
    raise PipelineError(f"unknown ablation axis {axis!r}; pick from {ABLATION_AXES}")


def run_ablation(base: PipelineConfig, axis: str, seed: int,
                 train_bundles: list[SceneBundle],
                 eval_bundles: list[SceneBundle] | None = None):
    """Train every row config on identical scenes/seed.

    Returns (rows, reports, extras); the corruption axis also evaluates the
    uncorrupted (t = 0) configuration into ``extras['corruption_t0_miou']``.
    """
    rows = ablation_rows(base, axis)
    reports = []
    for _, _, cfg_row in rows:
        _, rep = train(cfg_row, seed, train_bundles, eval_bundles)
        reports.append(rep)
    extras: dict[str, float] = {}
    if axis == "corruption":
        _, rep0 = train(replace(base, corruption_t=0), seed, train_bundles, eval_bundles)
        extras["corruption_t0_miou"] = rep0.miou
    return rows, reports, extras


def ablation_csv(rows, reports) -> str:
    lines = ["swept_field,value,miou,miou_union,probe_iou,final_loss"]
    for (fname, label, _), rep in zip(rows, reports):
        final_loss = rep.epoch_losses[-1] if rep.epoch_losses else float("nan")
        lines.append(f"{fname},{label},{repr(rep.miou)},{repr(rep.miou_union)},"
                     f"{repr(rep.probe_iou)},{repr(final_loss)}")
    return "\n".join(lines) + "\n"


def directional_configs(base: PipelineConfig) -> dict[str, PipelineConfig]:
    """The three pipeline variants compared on the occlusion probe."""
    return {
        "no_temporal": replace(base, **_BASELINE),
        "local_only": replace(base, **_LOCAL_ONLY),
        "full": replace(base, use_local_temporal=True, global_fusion="giam",
                        denoiser_on=True),
    }


# ---------------------------------------------------------------------------
# BEV image export
# ---------------------------------------------------------------------------

_PALETTE = np.array([
    (40, 40, 46),     # 0 empty
    (120, 96, 72),    # 1 ground
    (255, 120, 50),   # 2 barrier
    (0, 150, 245),    # 3
    (255, 0, 0),      # 4
    (160, 32, 240),   # 5
    (255, 255, 0),    # 6
    (0, 255, 255),    # 7
    (255, 192, 203),  # 8
    (150, 240, 80),   # 9
    (135, 60, 0),     # 10
    (255, 0, 255),    # 11
    (75, 0, 75),      # 12
    (213, 213, 213),  # 13
    (0, 175, 0),      # 14
    (255, 240, 150),  # 15
], dtype=np.uint8)


def palette_for(num_labels: int) -> np.ndarray:
    reps = int(np.ceil(num_labels / len(_PALETTE)))
    return np.tile(_PALETTE, (reps, 1))[:num_labels]


def bev_label_image(labels: np.ndarray, z_mode: str = "top_down_argmax") -> np.ndarray:
    """Collapse [H, W, Z] labels to a [H, W] class image.

    ``top_down_argmax`` picks each column's most frequent non-empty class
    (ties break toward the smaller id); ``slice:<k>`` takes one z slice.
    """
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise PipelineError(f"labels must be [H, W, Z], got shape {labels.shape}")
    if z_mode == "top_down_argmax":
        num = int(labels.max()) + 1
        h, w, _ = labels.shape
        counts = np.zeros((h, w, num), dtype=np.int64)
        for cls in range(num):
            counts[:, :, cls] = (labels == cls).sum(axis=2)
        counts[:, :, 0] = 0  # empty never wins over an occupied cell
        best = counts.argmax(axis=2)
        best[counts.max(axis=2) == 0] = 0
        return best
    if z_mode.startswith("slice:"):
        k = int(z_mode.split(":", 1)[1])
        if not (0 <= k < labels.shape[2]):
            raise PipelineError(f"slice {k} outside [0, {labels.shape[2]})")
        return labels[:, :, k]
    raise PipelineError(f"z_mode must be 'top_down_argmax' or 'slice:<k>', got {z_mode!r}")


def export_bev_image(labels: np.ndarray, path, z_mode: str = "top_down_argmax") -> None:
    """Write the collapsed label image as a binary PPM with a fixed palette."""
    img = bev_label_image(labels, z_mode)
    pal = palette_for(int(img.max()) + 1)
    rgb = pal[img]
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())
