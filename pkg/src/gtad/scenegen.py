"""Procedural desk-scale world: boxes on a ground plane, ego trajectory,
per-frame occupancy labels, and rendered multi-view feature images.

Rendered "images" are semantic feature maps, not RGB: per pixel a class
one-hot, inverse hit distance, and the world-frame hit normal.  This
stands in for backbone features so the encoders can be exercised without
a learned image stack.

Class layout (num_classes = C semantic classes; label 0 is empty):
1 = ground, 2 = barrier (static walls), 3..C-1 = generic things, and the
last class C is reserved for the occlusion probe so probe recall can be
scored as a plain per-class IoU.  Thing (foreground) classes are 3..C.

The occlusion probe is a static box that at least one camera sees early
in the sequence but no camera sees at the probe frame (the last frame); a
fast lateral occluder box slides into the line of sight.  Placement is
verified by ray casting and retried with fresh jitter; an infeasible
configuration raises after bounded retries.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraModel, EgoPose, VoxelGridSpec, project_points, voxel_centers
from .numerics import Rng

_RAY_EPS = 1e-9
_SCENE_MAGIC = b"GTADSCN v1\n"

GROUND_CLASS = 1
BARRIER_CLASS = 2
FIRST_THING_CLASS = 3


class SceneGenError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    grid: VoxelGridSpec
    num_cameras: int = 2
    num_frames: int = 8
    num_objects: int = 3
    object_speed: tuple[float, float] = (0.05, 0.35)
    ego_speed: float = 0.5
    num_classes: int = 6
    seed: int = 0
    image_size: tuple[int, int] = (32, 32)  # (width, height)
    history_frames: int = 4
    require_probe: bool = True

    def __post_init__(self):
        if min(self.num_cameras, self.num_frames, self.num_classes) <= 0:
            raise SceneGenError("camera/frame/class counts must be positive")
        if self.num_objects < 0:
            raise SceneGenError("num_objects must be >= 0")
        if self.num_classes < 4:
            raise SceneGenError("need >= 4 classes: ground, barrier, thing, probe")
        if self.num_frames < self.history_frames + 1:
            raise SceneGenError(
                f"num_frames={self.num_frames} shorter than history window "
                f"{self.history_frames}+1"
            )
        if self.object_speed[0] < 0 or self.object_speed[1] < self.object_speed[0]:
            raise SceneGenError("object_speed range must be 0 <= lo <= hi")

    @property
    def probe_class(self) -> int:
        return self.num_classes

    @property
    def img_channels(self) -> int:
        # class one-hot + inverse distance + world normal
        return self.num_classes + 1 + 1 + 3


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box with a linear trajectory."""

    center0: np.ndarray
    size: np.ndarray
    velocity: np.ndarray
    class_id: int

    def center(self, frame: int) -> np.ndarray:
        return self.center0 + self.velocity * frame

    def bounds(self, frame: int):
        c = self.center(frame)
        half = self.size / 2.0
        return c - half, c + half


@dataclass
class Scene:
    """Static layout, object list (rasterization priority = list order,
    later wins), ego trajectory, and camera rig."""

    cfg: SceneConfig
    ground: Box
    walls: list[Box]
    objects: list[Box]
    ego_poses: list[EgoPose]
    cameras: list[CameraModel]
    probe_index: int = -1  # index into objects; -1 when no probe
    probe_frame: int = -1

    def all_boxes(self) -> list[Box]:
        return [self.ground] + self.walls + self.objects

    @property
    def probe_box(self) -> Box | None:
        return self.objects[self.probe_index] if self.probe_index >= 0 else None


@dataclass
class Frame:
    """Per-frame ground truth and rendered camera features."""

    index: int
    ego_pose: EgoPose
    gt_occupancy: np.ndarray  # uint8 labels on the supervision grid
    fg_mask: np.ndarray       # bool, thing classes
    images: list[np.ndarray]  # per camera [h, w, d_img] float64


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

def ray_box_hits(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab intersection of N rays against B boxes.

    Returns (t_hit [N, B], valid [N, B], axis [N, B], sign [N, B]) where
    axis/sign describe the entered face.  Rays starting inside a box hit
    its exit face.
    """
    o = origin.reshape(1, 1, 3)
    d = dirs.reshape(-1, 1, 3)
    lo = lo.reshape(1, -1, 3)
    hi = hi.reshape(1, -1, 3)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_lo = (lo - o) * inv
        t_hi = (hi - o) * inv
    parallel = d == 0.0
    inside_axis = (o >= lo) & (o <= hi)
    neg_inf = np.broadcast_to(-np.inf, t_lo.shape)
    pos_inf = np.broadcast_to(np.inf, t_lo.shape)
    t_near = np.where(parallel, np.where(inside_axis, neg_inf, pos_inf), np.minimum(t_lo, t_hi))
    t_far = np.where(parallel, np.where(inside_axis, pos_inf, neg_inf), np.maximum(t_lo, t_hi))

    tmin = t_near.max(axis=2)
    tmax = t_far.min(axis=2)
    valid = (tmax >= tmin) & (tmax > _RAY_EPS)
    t_hit = np.where(tmin > _RAY_EPS, tmin, tmax)

    enter_axis = t_near.argmax(axis=2)
    sign = -np.sign(np.take_along_axis(d + np.zeros_like(t_lo), enter_axis[..., None], axis=2))[..., 0]
    return t_hit, valid, enter_axis, sign


def first_hit(origin: np.ndarray, dirs: np.ndarray, boxes: list[Box], frame: int):
    """Nearest box per ray: (t [N], box_idx [N] with -1 for miss, normal [N,3])."""
    n = dirs.shape[0]
    if not boxes:
        return np.full(n, np.inf), np.full(n, -1, dtype=np.int64), np.zeros((n, 3))
    lo = np.stack([b.bounds(frame)[0] for b in boxes])
    hi = np.stack([b.bounds(frame)[1] for b in boxes])
    t_hit, valid, axis, sign = ray_box_hits(origin, dirs, lo, hi)
    t_masked = np.where(valid, t_hit, np.inf)
    best = t_masked.argmin(axis=1)
    rows = np.arange(n)
    t_best = t_masked[rows, best]
    idx = np.where(np.isfinite(t_best), best, -1)
    normal = np.zeros((n, 3))
    hit_rows = idx >= 0
    normal[hit_rows, axis[rows, best][hit_rows]] = sign[rows, best][hit_rows]
    return t_best, idx, normal


def camera_rays(cam: CameraModel, ego_pose: EgoPose):
    """World-space origin and unit ray directions through every pixel center."""
    w, h = cam.image_size
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack(
        [(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu, dtype=np.float64)],
        axis=-1,
    ).reshape(-1, 3)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
    world_from_cam = ego_pose.compose(cam.extrinsics)
    origin = world_from_cam.apply(np.zeros(3))
    dirs = dirs_cam @ world_from_cam.rotation.T
    return origin, dirs


# ---------------------------------------------------------------------------
# rendering and rasterization
# ---------------------------------------------------------------------------

def render_views(scene: Scene, frame_idx: int, cams: list[CameraModel] | None = None):
    """Per-camera [h, w, d_img] feature maps (class one-hot, inverse
    distance, world hit normal; misses emit the class-0 background code)."""
    cams = scene.cameras if cams is None else cams
    boxes = scene.all_boxes()
    classes = np.array([0] + [b.class_id for b in boxes])
    out = []
    for cam in cams:
        w, h = cam.image_size
        origin, dirs = camera_rays(cam, scene.ego_poses[frame_idx])
        t, idx, normal = first_hit(origin, dirs, boxes, frame_idx)
        hit = idx >= 0
        cls = classes[np.where(hit, idx + 1, 0)]
        feat = np.zeros((h * w, scene.cfg.img_channels))
        feat[np.arange(h * w), cls] = 1.0
        inv = np.zeros(h * w)
        inv[hit] = 1.0 / t[hit]
        feat[:, scene.cfg.num_classes + 1] = inv
        feat[:, scene.cfg.num_classes + 2:] = normal
        out.append(feat.reshape(h, w, scene.cfg.img_channels))
    return out


def rasterize_occupancy(scene: Scene, frame_idx: int, spec: VoxelGridSpec):
    """Labels + foreground mask on ``spec``, in the frame's ego grid.

    A cell takes the class of the highest-priority box containing its
    center; ground < walls < objects in list order, empty cells stay 0.
    """
    if not (0 <= frame_idx < scene.cfg.num_frames):
        raise SceneGenError(f"frame {frame_idx} outside [0, {scene.cfg.num_frames})")
    centers = scene.ego_poses[frame_idx].apply(voxel_centers(spec))
    labels = np.zeros(len(centers), dtype=np.uint8)
    for box in scene.all_boxes():
        lo, hi = box.bounds(frame_idx)
        inside = np.all((centers >= lo) & (centers <= hi), axis=1)
        labels[inside] = box.class_id
    labels = labels.reshape(spec.dims)
    fg_mask = labels >= FIRST_THING_CLASS
    return labels, fg_mask


def object_visible(scene: Scene, frame_idx: int, obj_index: int,
                   cams: list[CameraModel] | None = None) -> bool:
    """Sampling-based visibility: is any probe sample point the first
    surface some camera's ray meets, with the point inside that image?"""
    cams = scene.cameras if cams is None else cams
    box = scene.objects[obj_index]
    boxes = scene.all_boxes()
    box_global_idx = boxes.index(box)
    samples = _box_sample_points(box, frame_idx)
    pose = scene.ego_poses[frame_idx]
    ego_from_world = pose.inverse()
    for cam in cams:
        pts_ego = ego_from_world.apply(samples)
        _, valid = project_points(cam, pts_ego)
        if not valid.any():
            continue
        world_from_cam = pose.compose(cam.extrinsics)
        origin = world_from_cam.apply(np.zeros(3))
        vecs = samples[valid] - origin
        dirs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        _, idx, _ = first_hit(origin, dirs, boxes, frame_idx)
        if (idx == box_global_idx).any():
            return True
    return False


def _box_sample_points(box: Box, frame: int) -> np.ndarray:
    """Center, shrunken corners, and face centers of the box."""
    c = box.center(frame)
    half = box.size / 2.0
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    faces = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
    pts = np.concatenate([np.zeros((1, 3)), corners * 0.8, faces * 0.8])
    return c + pts * half


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def default_camera_rig(cfg: SceneConfig) -> list[CameraModel]:
    """Cameras fanned uniformly in yaw at ego height 1.0 m."""
    w, h = cfg.image_size
    cams = []
    for n in range(cfg.num_cameras):
        yaw = 2.0 * np.pi * n / cfg.num_cameras
        cp, sp = np.cos(yaw), np.sin(yaw)
        rot = np.array([[sp, 0.0, cp], [-cp, 0.0, sp], [0.0, -1.0, 0.0]])
        extr = EgoPose(rot, np.array([0.0, 0.0, 1.0]))
        cams.append(CameraModel.build(fx=w / 2.0, fy=w / 2.0,
                                      cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                                      extrinsics=extr, image_size=(w, h)))
    return cams


def _static_layout(cfg: SceneConfig, rng: Rng):
    zmin = float(cfg.grid.range_min[2])
    cell_z = float(cfg.grid.cell_size[2])
    travel = cfg.ego_speed * (cfg.num_frames - 1)
    span_x = (-8.0, travel + 14.0)
    ground = Box(
        center0=np.array([np.mean(span_x), 0.0, zmin + cell_z * 0.475 - 1.0]),
        size=np.array([span_x[1] - span_x[0], 18.0, cell_z * 0.95 + 2.0]),
        velocity=np.zeros(3),
        class_id=GROUND_CLASS,
    )
    walls = []
    wall_y = float(cfg.grid.range_max[1]) - 0.8
    for side in (-1.0, 1.0):
        length = span_x[1] - span_x[0] - 4.0
        cx = np.mean(span_x) + rng.uniform(-1.0, 1.0)
        walls.append(Box(
            center0=np.array([cx, side * (wall_y + rng.uniform(-0.3, 0.3)),
                              zmin + cell_z * 0.95 + 0.9]),
            size=np.array([length, 0.6, 1.8]),
            velocity=np.zeros(3),
            class_id=BARRIER_CLASS,
        ))
    ground_top = zmin + cell_z * 0.95
    return ground, walls, ground_top, travel


def generate_scene(cfg: SceneConfig, max_attempts: int = 40) -> Scene:
    """Deterministic scene from cfg.seed; raises SceneGenError when the
    occlusion-probe constraint cannot be met within max_attempts."""
    cams = default_camera_rig(cfg)
    base_rng = Rng(cfg.seed).child("scenegen")
    poses = [EgoPose(np.eye(3), np.array([cfg.ego_speed * t, 0.0, 0.0]), t)
             for t in range(cfg.num_frames)]

    ground, walls, ground_top, travel = _static_layout(cfg, base_rng.child("static"))

    if cfg.num_objects == 0 or not cfg.require_probe:
        objects = _generic_objects(cfg, base_rng.child("objects", 0), ground_top,
                                   travel, cfg.num_objects)
        return Scene(cfg, ground, walls, objects, poses, cams)

    last = cfg.num_frames - 1
    window_lo = max(0, last - cfg.history_frames)
    for attempt in range(max_attempts):
        rng = base_rng.child("objects", attempt)
        probe = _make_probe(cfg, rng.child("probe"), ground_top, travel)
        occluder = _make_occluder(cfg, rng.child("occluder"), probe, poses[last], cams[0])
        extra = max(0, cfg.num_objects - 2)
        generic = _generic_objects(cfg, rng.child("generic"), ground_top, travel, extra)
        objects = generic + ([occluder] if occluder is not None else []) + [probe]
        scene = Scene(cfg, ground, walls, objects, poses, cams,
                      probe_index=len(objects) - 1, probe_frame=last)
        hidden_now = not object_visible(scene, last, scene.probe_index)
        seen_before = sum(
            object_visible(scene, f, scene.probe_index) for f in range(window_lo, last)
        )
        if hidden_now and seen_before >= min(3, last - window_lo):
            return scene
    raise SceneGenError(
        f"could not realize the occlusion probe in {max_attempts} attempts "
        f"(seed={cfg.seed}); relax the config (more frames/objects or ego motion)"
    )


def _make_probe(cfg: SceneConfig, rng: Rng, ground_top: float, travel: float) -> Box:
    size = rng.uniform(1.2, 2.0, 3)
    x = travel + rng.uniform(1.6, 4.2)
    y = rng.uniform(-3.0, 3.0)
    return Box(np.array([x, y, ground_top + size[2] / 2.0]), size, np.zeros(3),
               class_id=cfg.probe_class)


def _make_occluder(cfg: SceneConfig, rng: Rng, probe: Box, last_pose: EgoPose,
                   cam: CameraModel) -> Box | None:
    """Fast lateral box that sits on the probe's sight line at the last
    frame only.  Returns None when there is no room for a second object."""
    if cfg.num_objects < 2:
        return None
    size = np.array([0.5, 1.7, 1.9])
    cam_origin = last_pose.compose(cam.extrinsics).apply(np.zeros(3))
    frac = rng.uniform(0.38, 0.68)
    block = cam_origin + frac * (probe.center0 - cam_origin)
    block[2] = probe.center0[2] + rng.uniform(-0.1, 0.1)
    speed = rng.uniform(1.0, 1.4) * (1.0 if rng.uniform(0, 1) < 0.5 else -1.0)
    velocity = np.array([0.0, speed, 0.0])
    last = cfg.num_frames - 1
    return Box(block - velocity * last, size, velocity, class_id=FIRST_THING_CLASS)


def _make_decoy(cfg: SceneConfig, rng: Rng, ground_top: float, travel: float) -> Box:
    """Occluder lookalike with nothing hidden behind it.

    Decoys keep the blocker configuration from predicting the probe's
    placement: a current-frame-only model that guesses "something sits
    behind every blocker" pays for it in IoU.
    """
    size = np.array([0.5, 1.7, 1.9]) + rng.uniform(-0.1, 0.1, 3)
    bearing = rng.uniform(-0.6, 0.6)
    dist = rng.uniform(1.2, 2.6)
    pos = np.array([travel + dist * np.cos(bearing), dist * np.sin(bearing),
                    ground_top + size[2] / 2.0])
    speed = rng.uniform(1.0, 1.4) * (1.0 if rng.uniform(0, 1) < 0.5 else -1.0)
    velocity = np.array([0.0, speed, 0.0])
    last = cfg.num_frames - 1
    return Box(pos - velocity * last, size, velocity, class_id=FIRST_THING_CLASS)


def _generic_objects(cfg: SceneConfig, rng: Rng, ground_top: float, travel: float,
                     count: int) -> list[Box]:
    out = []
    num_generic_classes = max(1, cfg.num_classes - FIRST_THING_CLASS)
    num_decoys = min(count, 2)
    for i in range(num_decoys):
        out.append(_make_decoy(cfg, rng.child("decoy", i), ground_top, travel))
    for i in range(count - num_decoys):
        size = rng.uniform(0.6, 1.5, 3)
        x = rng.uniform(0.5, travel + 4.0)
        y = rng.uniform(-3.5, 3.5)
        speed = rng.uniform(cfg.object_speed[0], cfg.object_speed[1])
        theta = rng.uniform(0.0, 2.0 * np.pi)
        vel = np.array([np.cos(theta), np.sin(theta), 0.0]) * speed
        cls = FIRST_THING_CLASS + int(rng.integers(0, num_generic_classes))
        out.append(Box(np.array([x, y, ground_top + size[2] / 2.0]), size, vel, cls))
    return out


def make_frames(scene: Scene, spec: VoxelGridSpec) -> list[Frame]:
    """Render and rasterize every frame on the supervision grid ``spec``."""
    frames = []
    for t in range(scene.cfg.num_frames):
        labels, fg = rasterize_occupancy(scene, t, spec)
        images = render_views(scene, t)
        frames.append(Frame(t, scene.ego_poses[t], labels, fg, images))
    return frames


# ---------------------------------------------------------------------------
# scene file format (GTADSCN v1)
# ---------------------------------------------------------------------------

@dataclass
class SceneBundle:
    """What a scene file stores: config echo, rig, frames, probe metadata."""

    cfg: SceneConfig
    cameras: list[CameraModel]
    frames: list[Frame]
    fine_dims: tuple[int, int, int]
    probe_class: int = -1
    probe_frame: int = -1

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def bundle_scene(scene: Scene, spec_fine: VoxelGridSpec) -> SceneBundle:
    return SceneBundle(
        cfg=scene.cfg,
        cameras=scene.cameras,
        frames=make_frames(scene, spec_fine),
        fine_dims=spec_fine.dims,
        probe_class=scene.cfg.probe_class if scene.probe_index >= 0 else -1,
        probe_frame=scene.probe_frame,
    )


def _fmt_floats(vals) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(vals).ravel())


def save_scene(bundle: SceneBundle, path) -> None:
    cfg = bundle.cfg
    buf = io.BytesIO()
    buf.write(_SCENE_MAGIC)

    def line(s: str):
        buf.write((s + "\n").encode("utf-8"))

    line(f"cfg num_cameras {cfg.num_cameras}")
    line(f"cfg num_frames {cfg.num_frames}")
    line(f"cfg num_objects {cfg.num_objects}")
    line(f"cfg object_speed {_fmt_floats(cfg.object_speed)}")
    line(f"cfg ego_speed {repr(float(cfg.ego_speed))}")
    line(f"cfg num_classes {cfg.num_classes}")
    line(f"cfg seed {cfg.seed}")
    line(f"cfg history_frames {cfg.history_frames}")
    line(f"cfg require_probe {int(cfg.require_probe)}")
    g = cfg.grid
    line(f"grid {g.dims[0]} {g.dims[1]} {g.dims[2]} "
         f"{_fmt_floats(g.range_min)} {_fmt_floats(g.range_max)}")
    line(f"fine {bundle.fine_dims[0]} {bundle.fine_dims[1]} {bundle.fine_dims[2]}")
    line(f"image {cfg.image_size[0]} {cfg.image_size[1]} {cfg.img_channels}")
    line(f"cameras {len(bundle.cameras)}")
    for i, cam in enumerate(bundle.cameras):
        line(f"cam {i} {_fmt_floats([cam.fx, cam.fy, cam.cx, cam.cy])} "
             f"{cam.image_size[0]} {cam.image_size[1]} "
             f"{_fmt_floats(cam.extrinsics.rotation)} {_fmt_floats(cam.extrinsics.translation)}")
    line(f"frames {bundle.num_frames}")
    for fr in bundle.frames:
        line(f"pose {fr.index} {_fmt_floats(fr.ego_pose.rotation)} "
             f"{_fmt_floats(fr.ego_pose.translation)}")
    line(f"probe {bundle.probe_class} {bundle.probe_frame}")
    line("binary")
    for fr in bundle.frames:
        buf.write(np.ascontiguousarray(fr.gt_occupancy, dtype=np.uint8).tobytes())
        buf.write(np.ascontiguousarray(fr.fg_mask, dtype=np.uint8).tobytes())
        for img in fr.images:
            buf.write(np.ascontiguousarray(img, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_scene(path) -> SceneBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_SCENE_MAGIC):
        raise SceneGenError(f"bad scene magic in {path}")
    cut = raw.index(b"binary\n") + len(b"binary\n")
    header = raw[len(_SCENE_MAGIC):cut].decode("utf-8").splitlines()
    blob = raw[cut:]

    cfg_kv: dict[str, str] = {}
    grid = fine = image = probe = None
    cams: list[CameraModel] = []
    poses: dict[int, EgoPose] = {}
    num_frames = 0
    for ln in header:
        parts = ln.split()
        if not parts or parts[0] == "binary":
            continue
        if parts[0] == "cfg":
            cfg_kv[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "grid":
            dims = tuple(int(x) for x in parts[1:4])
            rmin = [float(x) for x in parts[4:7]]
            rmax = [float(x) for x in parts[7:10]]
            grid = VoxelGridSpec(dims, rmin, rmax)
        elif parts[0] == "fine":
            fine = tuple(int(x) for x in parts[1:4])
        elif parts[0] == "image":
            image = tuple(int(x) for x in parts[1:4])
        elif parts[0] == "cam":
            fx, fy, cx, cy = (float(x) for x in parts[2:6])
            w, h = int(parts[6]), int(parts[7])
            rot = np.array([float(x) for x in parts[8:17]]).reshape(3, 3)
            tra = np.array([float(x) for x in parts[17:20]])
            cams.append(CameraModel.build(fx, fy, cx, cy, EgoPose(rot, tra), (w, h)))
        elif parts[0] == "frames":
            num_frames = int(parts[1])
        elif parts[0] == "pose":
            t = int(parts[1])
            rot = np.array([float(x) for x in parts[2:11]]).reshape(3, 3)
            tra = np.array([float(x) for x in parts[11:14]])
            poses[t] = EgoPose(rot, tra, t)
        elif parts[0] == "probe":
            probe = (int(parts[1]), int(parts[2]))
    if grid is None or fine is None or image is None or probe is None:
        raise SceneGenError(f"scene header incomplete in {path}")

    cfg = SceneConfig(
        grid=grid,
        num_cameras=int(cfg_kv["num_cameras"]),
        num_frames=int(cfg_kv["num_frames"]),
        num_objects=int(cfg_kv["num_objects"]),
        object_speed=tuple(float(x) for x in cfg_kv["object_speed"].split()),
        ego_speed=float(cfg_kv["ego_speed"]),
        num_classes=int(cfg_kv["num_classes"]),
        seed=int(cfg_kv["seed"]),
        image_size=(image[0], image[1]),
        history_frames=int(cfg_kv["history_frames"]),
        require_probe=bool(int(cfg_kv["require_probe"])),
    )
    if image[2] != cfg.img_channels:
        raise SceneGenError("stored image channel count disagrees with config")

    fine_cells = fine[0] * fine[1] * fine[2]
    w, h = cfg.image_size
    img_elems = h * w * cfg.img_channels
    offset = 0
    frames = []
    for t in range(num_frames):
        labels = np.frombuffer(blob, dtype=np.uint8, count=fine_cells, offset=offset)
        offset += fine_cells
        fg = np.frombuffer(blob, dtype=np.uint8, count=fine_cells, offset=offset)
        offset += fine_cells
        images = []
        for _ in range(len(cams)):
            img = np.frombuffer(blob, dtype="<f8", count=img_elems, offset=offset)
            offset += img_elems * 8
            images.append(img.reshape(h, w, cfg.img_channels).copy())
        frames.append(Frame(t, poses[t], labels.reshape(fine).copy(),
                            fg.reshape(fine).astype(bool), images))
    if offset != len(blob):
        raise SceneGenError(f"scene payload size mismatch in {path}")
    return SceneBundle(cfg, cams, frames, fine, probe[0], probe[1])
