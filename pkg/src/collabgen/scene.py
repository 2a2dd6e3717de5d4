"""Synthetic BEV driving scenes: vehicles, occluding buildings and agent poses.

A scene lives in a world-aligned rectangle centred on the origin.  Every agent
rasterises the same rectangle at its own resolution; what differs per agent is
what it can see (field of view, sensing range, line of sight) and how noisy
its occupancy grid is.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .geometry import OrientedBox, points_in_box, rotated_iou

CAMERA_FOV_M = 102.4


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float = 0.0


@dataclass(frozen=True)
class NoiseProfile:
    amplitude: float = 0.0
    blur_sigma: float = 0.0


DEFAULT_NOISE_PROFILES = {
    "clean": NoiseProfile(0.0, 0.0),
    "lidar64": NoiseProfile(0.05, 0.0),
    "lidar32": NoiseProfile(0.10, 0.0),
    "camera_eff": NoiseProfile(0.10, 1.0),
    "camera_res": NoiseProfile(0.15, 0.7),
}

# (xmin, xmax, ymin, ymax) per agent slot; slot 0 is the default ego
DEFAULT_SLOT_ZONES = (
    (-35.0, -25.0, -8.0, 8.0),
    (22.0, 32.0, -8.0, 8.0),
    (-8.0, 8.0, 24.0, 36.0),
    (-48.0, -40.0, -36.0, -28.0),
)


@dataclass
class SceneConfig:
    extent: tuple[float, float] = (204.8, 102.4)
    n_objects: tuple[int, int] = (8, 14)
    class_ids: tuple[int, ...] = (0,)
    occlusion: bool = True
    n_occluders: tuple[int, int] = (6, 10)
    occluder_size: tuple[float, float] = (8.0, 20.0)
    object_length: tuple[float, float] = (9.0, 11.0)
    object_width: tuple[float, float] = (4.5, 5.5)
    speed: tuple[float, float] = (0.0, 8.0)
    frame_dt: float = 0.5
    n_frames: int = 1
    min_separation: float = 14.0
    slot_zones: tuple[tuple[float, float, float, float], ...] = DEFAULT_SLOT_ZONES
    slot_clearance: float = 10.0

    def validate(self):
        if self.n_objects[1] <= 0 and self.occlusion:
            raise ConfigError("occlusion=true requires at least one object")
        if self.n_objects[0] > self.n_objects[1] or self.n_objects[0] < 0:
            raise ConfigError(f"bad object count range {self.n_objects}")
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ConfigError(f"extent must be positive, got {self.extent}")
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if not self.class_ids:
            raise ConfigError("class set must not be empty")


@dataclass
class Scene:
    scene_id: int
    extent: tuple[float, float]
    objects: list[OrientedBox]
    agent_poses: list[Pose]
    seed: int
    velocities: list[tuple[float, float]] = field(default_factory=list)
    occluders: list[tuple[float, float, float, float]] = field(default_factory=list)
    n_frames: int = 1
    frame_dt: float = 0.5

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        w, h = self.extent
        return -w / 2, w / 2, -h / 2, h / 2

    def objects_at(self, frame: int = 0) -> list[OrientedBox]:
        if frame == 0 or not self.velocities:
            return list(self.objects)
        t = frame * self.frame_dt
        return [
            OrientedBox(b.cx + vx * t, b.cy + vy * t, b.w, b.l, b.yaw, b.class_id)
            for b, (vx, vy) in zip(self.objects, self.velocities)
        ]

    def to_record(self) -> dict:
        return {
            "format": "collabgen-scene",
            "version": 1,
            "scene_id": self.scene_id,
            "seed": self.seed,
            "extent": list(self.extent),
            "n_frames": self.n_frames,
            "frame_dt": self.frame_dt,
            "agent_poses": [asdict(p) for p in self.agent_poses],
            "occluders": [list(o) for o in self.occluders],
            "objects": [
                {**asdict(b), "vx": v[0], "vy": v[1]}
                for b, v in zip(self.objects, self.velocities or [(0.0, 0.0)] * len(self.objects))
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Scene":
        if rec.get("format") != "collabgen-scene":
            raise ValueError("not a scene record")
        objs = [
            OrientedBox(o["cx"], o["cy"], o["w"], o["l"], o["yaw"], o.get("class_id", 0))
            for o in rec["objects"]
        ]
        return cls(
            scene_id=rec["scene_id"],
            extent=tuple(rec["extent"]),
            objects=objs,
            agent_poses=[Pose(**p) for p in rec["agent_poses"]],
            seed=rec["seed"],
            velocities=[(o.get("vx", 0.0), o.get("vy", 0.0)) for o in rec["objects"]],
            occluders=[tuple(o) for o in rec["occluders"]],
            n_frames=rec["n_frames"],
            frame_dt=rec["frame_dt"],
        )


@dataclass
class Observation:
    agent_id: int
    occupancy: np.ndarray
    noise_profile_id: str
    fov_mask: np.ndarray
    frame: int = 0


# --------------------------------------------------------------------------
# generation


def _box_hits_aabb(box: OrientedBox, aabb) -> bool:
    x0, y0, x1, y1 = aabb
    occ = OrientedBox((x0 + x1) / 2, (y0 + y1) / 2, y1 - y0, x1 - x0, 0.0)
    return rotated_iou(box, occ) > 0.0


def _inside(box: OrientedBox, bounds) -> bool:
    xmin, xmax, ymin, ymax = bounds
    r = 0.5 * box.l
    return xmin + r <= box.cx <= xmax - r and ymin + r <= box.cy <= ymax - r


def generate_scene(config: SceneConfig, seed: int, scene_id: int = 0) -> Scene:
    """Sample one scene; identical ``(config, seed)`` gives an identical scene."""
    config.validate()
    rng = np.random.default_rng(seed)
    w, h = config.extent
    bounds = (-w / 2, w / 2, -h / 2, h / 2)
    for _ in range(50):
        scene = _sample_scene(config, rng, seed, scene_id, bounds)
        if not config.occlusion or _has_occlusion(scene):
            return scene
    raise ConfigError("could not produce an occluded object; increase occluders or objects")


def _sample_scene(config, rng, seed, scene_id, bounds) -> Scene:
    xmin, xmax, ymin, ymax = bounds
    poses = []
    for zx0, zx1, zy0, zy1 in config.slot_zones:
        poses.append(Pose(float(rng.uniform(zx0, zx1)), float(rng.uniform(zy0, zy1)),
                          float(rng.uniform(-math.pi, math.pi))))

    occluders = []
    n_occ = int(rng.integers(config.n_occluders[0], config.n_occluders[1] + 1)) if config.occlusion else 0
    for _ in range(n_occ):
        for _attempt in range(100):
            sx, sy = rng.uniform(*config.occluder_size, size=2)
            cx = rng.uniform(xmin + sx / 2, xmax - sx / 2)
            cy = rng.uniform(ymin + sy / 2, ymax - sy / 2)
            aabb = (float(cx - sx / 2), float(cy - sy / 2), float(cx + sx / 2), float(cy + sy / 2))
            if all(_point_aabb_dist(p.x, p.y, aabb) > config.slot_clearance for p in poses):
                occluders.append(aabb)
                break

    n_obj = int(rng.integers(config.n_objects[0], config.n_objects[1] + 1))
    objects: list[OrientedBox] = []
    velocities: list[tuple[float, float]] = []
    frames = range(config.n_frames)
    for _ in range(n_obj):
        for _attempt in range(200):
            l = float(rng.uniform(*config.object_length))
            bw = float(rng.uniform(*config.object_width))
            yaw = float(rng.uniform(-math.pi, math.pi))
            cx = float(rng.uniform(xmin + l / 2, xmax - l / 2))
            cy = float(rng.uniform(ymin + l / 2, ymax - l / 2))
            speed = float(rng.uniform(*config.speed))
            cls = int(config.class_ids[int(rng.integers(len(config.class_ids)))])
            vel = (speed * math.cos(yaw), speed * math.sin(yaw))
            track = [
                OrientedBox(cx + vel[0] * f * config.frame_dt, cy + vel[1] * f * config.frame_dt, bw, l, yaw, cls)
                for f in frames
            ]
            if not all(_inside(b, bounds) for b in track):
                continue
            if any(_box_hits_aabb(b, o) for b in track for o in occluders):
                continue
            if any(math.hypot(b.cx - p.x, b.cy - p.y) < 6.0 for b in track for p in poses):
                continue
            ok = True
            for other, ov in zip(objects, velocities):
                for f in frames:
                    t = f * config.frame_dt
                    dx = (cx + vel[0] * t) - (other.cx + ov[0] * t)
                    dy = (cy + vel[1] * t) - (other.cy + ov[1] * t)
                    if math.hypot(dx, dy) < config.min_separation:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                objects.append(track[0])
                velocities.append(vel)
                break
    return Scene(
        scene_id=scene_id,
        extent=tuple(config.extent),
        objects=objects,
        agent_poses=poses,
        seed=seed,
        velocities=velocities,
        occluders=occluders,
        n_frames=config.n_frames,
        frame_dt=config.frame_dt,
    )


def _point_aabb_dist(x, y, aabb) -> float:
    x0, y0, x1, y1 = aabb
    dx = max(x0 - x, 0.0, x - x1)
    dy = max(y0 - y, 0.0, y - y1)
    return math.hypot(dx, dy)


def _has_occlusion(scene: Scene) -> bool:
    if not scene.objects or not scene.occluders:
        return False
    cx = np.array([b.cx for b in scene.objects])
    cy = np.array([b.cy for b in scene.objects])
    for p in scene.agent_poses:
        if (~line_of_sight(p.x, p.y, cx, cy, scene.occluders)).any():
            return True
    return False


# --------------------------------------------------------------------------
# rasterisation and visibility


def cell_centers(extent, hw) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centre coordinates (xs over columns, ys over rows) of an ``hw`` grid."""
    w, h = extent
    rows, cols = hw
    xs = -w / 2 + (np.arange(cols) + 0.5) * (w / cols)
    ys = -h / 2 + (np.arange(rows) + 0.5) * (h / rows)
    return xs, ys


def rasterize(boxes, extent, hw) -> np.ndarray:
    """1.0 where a cell centre falls inside any box, else 0.0."""
    rows, cols = hw
    grid = np.zeros((rows, cols), dtype=np.float32)
    xs, ys = cell_centers(extent, hw)
    cw, ch = extent[0] / cols, extent[1] / rows
    for b in boxes:
        r = 0.5 * math.hypot(b.w, b.l)
        j0 = max(int((b.cx - r + extent[0] / 2) / cw) - 1, 0)
        j1 = min(int((b.cx + r + extent[0] / 2) / cw) + 2, cols)
        i0 = max(int((b.cy - r + extent[1] / 2) / ch) - 1, 0)
        i1 = min(int((b.cy + r + extent[1] / 2) / ch) + 2, rows)
        if j0 >= j1 or i0 >= i1:
            continue
        px, py = np.meshgrid(xs[j0:j1], ys[i0:i1])
        grid[i0:i1, j0:j1][points_in_box(px, py, b)] = 1.0
    return grid


def line_of_sight(px, py, qx, qy, occluders) -> np.ndarray:
    """True where the segment from (px, py) to each (qx, qy) misses every occluder.

    Slab test of the segment against each axis-aligned occluder.
    """
    qx = np.asarray(qx, dtype=np.float64)
    qy = np.asarray(qy, dtype=np.float64)
    visible = np.ones(np.broadcast(qx, qy).shape, dtype=bool)
    dx, dy = qx - px, qy - py
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_x = np.where(dx != 0, 1.0 / dx, np.inf)
        inv_y = np.where(dy != 0, 1.0 / dy, np.inf)
        for x0, y0, x1, y1 in occluders:
            tx0, tx1 = (x0 - px) * inv_x, (x1 - px) * inv_x
            ty0, ty1 = (y0 - py) * inv_y, (y1 - py) * inv_y
            # zero-length direction: inside the slab iff the origin is
            tx_lo = np.where(dx != 0, np.minimum(tx0, tx1), np.where((x0 <= px) & (px <= x1), -np.inf, np.inf))
            tx_hi = np.where(dx != 0, np.maximum(tx0, tx1), np.where((x0 <= px) & (px <= x1), np.inf, -np.inf))
            ty_lo = np.where(dy != 0, np.minimum(ty0, ty1), np.where((y0 <= py) & (py <= y1), -np.inf, np.inf))
            ty_hi = np.where(dy != 0, np.maximum(ty0, ty1), np.where((y0 <= py) & (py <= y1), np.inf, -np.inf))
            t_enter = np.maximum(np.maximum(tx_lo, ty_lo), 0.0)
            t_exit = np.minimum(np.minimum(tx_hi, ty_hi), 1.0)
            visible &= ~(t_enter <= t_exit)
    return visible


def fov_region(extent, hw, pose: Pose, fov_kind: str, max_range: float | None = None) -> np.ndarray:
    """Sensor footprint ignoring occlusion: wide = whole rectangle, square = camera square."""
    xs, ys = cell_centers(extent, hw)
    gx, gy = np.meshgrid(xs, ys)
    if fov_kind == "wide":
        mask = np.ones(gx.shape, dtype=bool)
    elif fov_kind == "square":
        half = CAMERA_FOV_M / 2
        mask = (np.abs(gx - pose.x) <= half) & (np.abs(gy - pose.y) <= half)
    else:
        raise ValueError(f"unknown fov_kind {fov_kind!r}")
    if max_range is not None:
        mask &= np.hypot(gx - pose.x, gy - pose.y) <= max_range
    return mask


def visibility(scene: Scene, pose: Pose, hw, fov_kind: str, max_range: float | None = None) -> np.ndarray:
    mask = fov_region(scene.extent, hw, pose, fov_kind, max_range)
    if scene.occluders and mask.any():
        xs, ys = cell_centers(scene.extent, hw)
        gx, gy = np.meshgrid(xs, ys)
        mask[mask] = line_of_sight(pose.x, pose.y, gx[mask], gy[mask], scene.occluders)
    return mask


def _check_pose(scene: Scene, pose: Pose):
    xmin, xmax, ymin, ymax = scene.bounds
    if not (xmin <= pose.x <= xmax and ymin <= pose.y <= ymax):
        raise ValueError(f"pose ({pose.x:.2f}, {pose.y:.2f}) lies outside the scene extent")


def observe(scene: Scene, spec, seed: int, slot: int = 0, frame: int = 0,
            noise_profiles: dict | None = None, pose: Pose | None = None) -> Observation:
    """Occupancy grid seen by agent ``spec`` standing at ``scene.agent_poses[slot]``."""
    pose = pose if pose is not None else scene.agent_poses[slot]
    _check_pose(scene, pose)
    profiles = DEFAULT_NOISE_PROFILES if noise_profiles is None else noise_profiles
    try:
        profile = profiles[spec.noise_profile_id]
    except KeyError:
        raise ValueError(f"unknown noise profile {spec.noise_profile_id!r}") from None

    hw = tuple(spec.obs_hw)
    vis = visibility(scene, pose, hw, spec.fov_kind, spec.max_range_m)
    occ = rasterize(scene.objects_at(frame), scene.extent, hw)
    if profile.blur_sigma > 0:
        occ = gaussian_filter(occ, profile.blur_sigma, mode="constant").astype(np.float32)
    if profile.amplitude > 0:
        rng = np.random.default_rng([seed, scene.scene_id, spec.agent_id, slot, frame])
        occ = occ + profile.amplitude * rng.standard_normal(hw).astype(np.float32)
    occ = np.clip(occ, 0.0, 1.0).astype(np.float32)
    occ[~vis] = 0.0
    return Observation(spec.agent_id, occ, spec.noise_profile_id, vis, frame)


def visible_objects(scene: Scene, spec, slot: int, frame: int = 0) -> np.ndarray:
    """Per-object flag: at least one rasterised cell of the object is in view."""
    hw = tuple(spec.obs_hw)
    vis = visibility(scene, scene.agent_poses[slot], hw, spec.fov_kind, spec.max_range_m)
    xs, ys = cell_centers(scene.extent, hw)
    gx, gy = np.meshgrid(xs, ys)
    flags = []
    for b in scene.objects_at(frame):
        inside = points_in_box(gx, gy, b)
        flags.append(bool((inside & vis).any()))
    return np.array(flags, dtype=bool)


# --------------------------------------------------------------------------
# persistence


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_record(), indent=1, sort_keys=True))


def load_scene(path) -> Scene:
    return Scene.from_record(json.loads(Path(path).read_text()))


def generate_dataset(config: SceneConfig, seed: int, split_sizes: dict[str, int],
                     split_frames: dict[str, int] | None = None) -> dict[str, list[Scene]]:
    """Scenes per split. Scene ids are globally unique; each scene has its own seed."""
    split_frames = split_frames or {}
    out: dict[str, list[Scene]] = {}
    next_id = 0
    for split_index, (split, n) in enumerate(sorted(split_sizes.items())):
        frames = split_frames.get(split, config.n_frames)
        cfg = SceneConfig(**{**asdict(config), "n_frames": frames})
        scenes = []
        for k in range(n):
            scene_seed = int(np.random.SeedSequence([seed, split_index, k]).generate_state(1)[0])
            scenes.append(generate_scene(cfg, scene_seed, scene_id=next_id))
            next_id += 1
        out[split] = scenes
    return out


def write_dataset(dataset: dict[str, list[Scene]], root) -> Path:
    """One JSON file per scene plus ``manifest.json`` listing the splits."""
    root = Path(root)
    manifest = {"format": "collabgen-dataset", "version": 1, "splits": {}}
    for split, scenes in dataset.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        names = []
        for s in scenes:
            name = f"{split}/scene_{s.scene_id:05d}.json"
            save_scene(s, root / name)
            names.append(name)
        manifest["splits"][split] = names
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_dataset(root, splits=None) -> dict[str, list[Scene]]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    wanted = manifest["splits"] if splits is None else {k: manifest["splits"][k] for k in splits}
    return {k: [load_scene(root / n) for n in names] for k, names in wanted.items()}
