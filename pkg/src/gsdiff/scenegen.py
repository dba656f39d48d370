"""Procedural toy urban scenes and ground-truth posed RGB-D rendering.

World frame: x = lateral (width), y = forward, z = up, ground plane at z=0.
Cameras follow the usual pinhole convention (x right, y down, z along the
optical axis); depth is the camera-space z of the hit point.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

SKY_COLOR = np.array([0.65, 0.78, 0.92])
SUN_DIR = np.array([0.3, 0.25, 0.92]) / np.linalg.norm([0.3, 0.25, 0.92])

WEATHERS = ("sunny", "overcast")
ROAD_TYPES = ("straight", "curved")

ROAD_HALF_WIDTH = 2.0
ROAD_COLOR = np.array([0.25, 0.25, 0.27])
CURVE_AMP = 1.5
CURVE_FREQ = 0.35
RIG_HEIGHT = 1.5


@dataclass
class SceneSpec:
    seed: int
    n_buildings: int
    weather: str
    road_type: str
    building_boxes: list  # (center(3,), size(3,), albedo(3,)) tuples
    ground_albedo: np.ndarray

    def text(self):
        """Template description over the closed attribute vocabulary."""
        return f"a {self.weather} scene with {self.n_buildings} buildings along a {self.road_type} road"

    def to_json(self):
        return {
            "seed": self.seed,
            "n_buildings": self.n_buildings,
            "weather": self.weather,
            "road_type": self.road_type,
            "building_boxes": [
                {"center": list(map(float, c)), "size": list(map(float, s)), "albedo": list(map(float, a))}
                for c, s, a in self.building_boxes
            ],
            "ground_albedo": [float(v) for v in self.ground_albedo],
        }

    @classmethod
    def from_json(cls, d):
        boxes = [
            (np.asarray(b["center"], float), np.asarray(b["size"], float), np.asarray(b["albedo"], float))
            for b in d["building_boxes"]
        ]
        return cls(d["seed"], d["n_buildings"], d["weather"], d["road_type"], boxes,
                   np.asarray(d["ground_albedo"], float))


@dataclass
class CameraPose:
    rotation: np.ndarray    # 3x3, world -> camera
    translation: np.ndarray  # 3, x_cam = R x_world + t
    intrinsics: tuple        # (fx, fy, cx, cy)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, float)
        self.translation = np.asarray(self.translation, float)
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant 1")
        fx, fy = self.intrinsics[0], self.intrinsics[1]
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, pts):
        return pts @ self.rotation.T + self.translation

    def cam_to_world(self, pts):
        return (pts - self.translation) @ self.rotation

    def matrix4(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix4(cls, m, intrinsics):
        m = np.asarray(m, float)
        return cls(m[:3, :3], m[:3, 3], tuple(intrinsics))


@dataclass
class PosedFrame:
    image: np.ndarray       # h x w x 3 in [0,1]
    depth: np.ndarray       # h x w, meters, 0 where invalid
    pose: CameraPose
    valid_mask: np.ndarray  # h x w bool


@dataclass
class SemanticVolume:
    labels: np.ndarray  # H x W x D uint8

EMPTY, ROAD, BUILDING = 0, 1, 2
N_CLASSES = 3


@dataclass
class GenConfig:
    n_buildings_range: tuple = (2, 4)
    building_width: tuple = (1.2, 3.0)
    building_depth: tuple = (1.2, 3.0)
    building_height: tuple = (1.5, 4.0)
    lateral_range: tuple = (2.6, 5.5)   # |x| of building centers, outside the road
    forward_range: tuple = (0.0, 14.0)
    max_tries: int = 200


def road_center_x(y, road_type):
    if road_type == "curved":
        return CURVE_AMP * np.sin(CURVE_FREQ * np.asarray(y, float))
    return np.zeros_like(np.asarray(y, float))


def _footprints_overlap(c0, s0, c1, s1):
    return (abs(c0[0] - c1[0]) < (s0[0] + s1[0]) / 2) and (abs(c0[1] - c1[1]) < (s0[1] + s1[1]) / 2)


def generate_scene(seed, config=None):
    """Deterministically sample a SceneSpec from the given ranges."""
    config = config or GenConfig()
    rng = np.random.default_rng(seed)
    lo, hi = config.n_buildings_range
    if lo > hi:
        raise ValueError("empty n_buildings range")
    n = int(rng.integers(lo, hi + 1))
    weather = WEATHERS[int(rng.integers(0, len(WEATHERS)))]
    road_type = ROAD_TYPES[int(rng.integers(0, len(ROAD_TYPES)))]
    ground = np.array([0.35, 0.42, 0.3]) + rng.uniform(-0.05, 0.05, 3)

    boxes = []
    tries = 0
    while len(boxes) < n:
        if tries >= config.max_tries:
            raise RuntimeError("cannot place buildings")
        tries += 1
        sx = rng.uniform(*config.building_width)
        sy = rng.uniform(*config.building_depth)
        sz = rng.uniform(*config.building_height)
        side = 1.0 if rng.random() < 0.5 else -1.0
        cx = side * rng.uniform(*config.lateral_range)
        cy = rng.uniform(*config.forward_range)
        center = np.array([cx, cy, sz / 2.0])
        size = np.array([sx, sy, sz])
        if any(_footprints_overlap(center, size, c, s) for c, s, _ in boxes):
            continue
        albedo = rng.uniform(0.2, 0.9, 3)
        boxes.append((center, size, albedo))
    return SceneSpec(seed, n, weather, road_type, boxes, np.clip(ground, 0, 1))


def make_intrinsics(h, w):
    f = 0.7 * w
    return (f, f, w / 2.0, h / 2.0)


def forward_pose(y, h, w, x=0.0, yaw=0.0, height=RIG_HEIGHT, pitch=0.0):
    """Camera at (x, y, height) looking along +y, with optional yaw/pitch (radians)."""
    # base: x_cam=+x, y_cam=-z, z_cam=+y
    base = np.array([[1.0, 0.0, 0.0],
                     [0.0, 0.0, -1.0],
                     [0.0, 1.0, 0.0]])
    cy_, sy_ = np.cos(yaw), np.sin(yaw)
    rz = np.array([[cy_, -sy_, 0.0], [sy_, cy_, 0.0], [0.0, 0.0, 1.0]])
    cp, sp = np.cos(pitch), np.sin(pitch)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])  # pitch about camera x
    rot = rx @ base @ rz.T
    center = np.array([x, y, height])
    return CameraPose(rot, -rot @ center, make_intrinsics(h, w))


def trajectory_poses(scene, n_frames, h, w, y_start=0.0, y_end=10.0):
    """Forward-moving rig with small seeded yaw/lateral jitter."""
    rng = np.random.default_rng(scene.seed + 7919)
    ys = np.linspace(y_start, y_end, n_frames)
    poses = []
    for y in ys:
        yaw = rng.uniform(-0.06, 0.06)
        x = float(road_center_x(y, scene.road_type)) + rng.uniform(-0.3, 0.3)
        poses.append(forward_pose(float(y), h, w, x=x, yaw=yaw, pitch=0.08))
    return poses


def _ray_box(origin, dirs, center, size):
    """Slab intersection; dirs (...,3) unnormalized, returns t_enter, hit mask."""
    lo = center - size / 2.0
    hi = center + size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(tmin > 0, tmin, tmax)
    return t, hit & (t > 0)


def _box_normal(p, center, size):
    rel = (p - center) / (size / 2.0)
    ax = np.argmax(np.abs(rel), axis=-1)
    n = np.zeros_like(p)
    idx = np.arange(p.shape[0])
    n[idx, ax] = np.sign(rel[idx, ax])
    return n


def _shade(albedo, normal, weather):
    if weather == "sunny":
        diff = np.clip(normal @ SUN_DIR, 0.0, None)
        return np.clip(albedo * (0.35 + 0.75 * diff[..., None]), 0, 1)
    return np.clip(albedo * 0.8, 0, 1)


def raycast_frame(scene, pose, h, w):
    """Render an exact RGB-D frame by per-pixel ray casting."""
    if h < 8 or w < 8:
        raise ValueError("image must be at least 8x8")
    origin = pose.center
    if origin[2] <= 0:
        raise ValueError("camera below ground")
    fx, fy, cx, cy = pose.intrinsics
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs_cam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1)
    dirs = dirs_cam.reshape(-1, 3) @ pose.rotation  # world rays, z_cam param = t
    npix = dirs.shape[0]

    t_hit = np.full(npix, np.inf)
    color = np.tile(SKY_COLOR, (npix, 1))
    normal = np.zeros((npix, 3))
    albedo = np.zeros((npix, 3))
    hit_any = np.zeros(npix, bool)

    # ground plane z = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_g = -origin[2] / dirs[:, 2]
    g_hit = (dirs[:, 2] < 0) & (t_g > 0)
    with np.errstate(invalid="ignore"):
        pts = origin + t_g[:, None] * dirs
    on_road = np.abs(pts[:, 0] - road_center_x(pts[:, 1], scene.road_type)) <= ROAD_HALF_WIDTH
    t_hit[g_hit] = t_g[g_hit]
    albedo[g_hit] = np.where(on_road[g_hit, None], ROAD_COLOR, scene.ground_albedo)
    normal[g_hit] = [0.0, 0.0, 1.0]
    hit_any |= g_hit

    for center, size, alb in scene.building_boxes:
        t_b, b_hit = _ray_box(origin, dirs, center, size)
        closer = b_hit & (t_b < t_hit)
        t_hit[closer] = t_b[closer]
        p = origin + t_b[closer, None] * dirs[closer]
        normal[closer] = _box_normal(p, center, size)
        albedo[closer] = alb
        hit_any |= closer

    color[hit_any] = _shade(albedo[hit_any], normal[hit_any], scene.weather)
    depth = np.where(hit_any, t_hit, 0.0).reshape(h, w)
    return PosedFrame(color.reshape(h, w, 3), depth, pose, hit_any.reshape(h, w))


def corrupt_depth(frame, sigma, outlier_rate, seed, depth_range=(0.5, 25.0)):
    """Multiplicative Gaussian depth noise plus uniform-depth outliers."""
    if sigma < 0 or not (0 <= outlier_rate <= 1):
        raise ValueError("bad noise parameters")
    rng = np.random.default_rng(seed)
    depth = frame.depth.copy()
    valid = frame.valid_mask
    if sigma > 0:
        eta = rng.standard_normal(depth.shape)
        depth = np.where(valid, depth * (1.0 + sigma * eta), depth)
    if outlier_rate > 0:
        hit = rng.random(depth.shape) < outlier_rate
        hit &= valid
        depth = np.where(hit, rng.uniform(*depth_range, depth.shape), depth)
    depth = np.where(valid, np.maximum(depth, 1e-3), depth)
    return PosedFrame(frame.image, depth, frame.pose, valid)


def semantic_volume(scene, spec):
    """Label voxel centers: building boxes, then the ground road slab, else empty."""
    centers = spec.voxel_centers()  # H x W x D x 3
    labels = np.full(spec.dims, EMPTY, np.uint8)
    slab = (centers[..., 2] >= 0.0) & (centers[..., 2] < spec.voxel_edge)
    labels[slab] = ROAD
    for center, size, _ in scene.building_boxes:
        inside = np.all(np.abs(centers - center) <= size / 2.0, axis=-1)
        labels[inside] = BUILDING
    return SemanticVolume(labels)


# ---------------- dataset directory I/O ----------------

def save_png(path, image):
    Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8)).save(path)


def load_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def write_scene_dir(out_dir, scene_id, scene, frames):
    d = os.path.join(out_dir, f"scene_{scene_id}")
    os.makedirs(os.path.join(d, "frames"), exist_ok=True)
    os.makedirs(os.path.join(d, "depth"), exist_ok=True)
    poses = []
    for k, fr in enumerate(frames):
        save_png(os.path.join(d, "frames", f"{k}.png"), fr.image)
        fr.depth.astype("<f4").tofile(os.path.join(d, "depth", f"{k}.f32"))
        poses.append({"matrix": fr.pose.matrix4().reshape(-1).tolist(),
                      "intrinsics": list(fr.pose.intrinsics),
                      "h": fr.image.shape[0], "w": fr.image.shape[1]})
    with open(os.path.join(d, "poses.json"), "w") as f:
        json.dump(poses, f)
    with open(os.path.join(d, "meta.json"), "w") as f:
        json.dump({"spec": scene.to_json(), "text": scene.text()}, f, indent=1)
    return d


def load_scene_dir(d):
    with open(os.path.join(d, "poses.json")) as f:
        poses = json.load(f)
    with open(os.path.join(d, "meta.json")) as f:
        meta = json.load(f)
    scene = SceneSpec.from_json(meta["spec"])
    frames = []
    for k, p in enumerate(poses):
        h, w = p["h"], p["w"]
        img = load_png(os.path.join(d, "frames", f"{k}.png"))[..., :3]
        depth = np.fromfile(os.path.join(d, "depth", f"{k}.f32"), dtype="<f4").reshape(h, w).astype(np.float64)
        pose = CameraPose.from_matrix4(np.asarray(p["matrix"]).reshape(4, 4), p["intrinsics"])
        frames.append(PosedFrame(img, depth, pose, depth > 0))
    return scene, frames, meta["text"]


def generate_dataset(out_dir, n_scenes, frames_per_scene, h, w, seed,
                     noise_sigma=0.0, outlier_rate=0.0, config=None):
    """Write n_scenes scene directories; returns list of paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(n_scenes):
        scene = generate_scene(seed + i, config)
        poses = trajectory_poses(scene, frames_per_scene, h, w)
        frames = [raycast_frame(scene, p, h, w) for p in poses]
        if noise_sigma > 0 or outlier_rate > 0:
            frames = [corrupt_depth(fr, noise_sigma, outlier_rate, seed + i * 1000 + k)
                      for k, fr in enumerate(frames)]
        paths.append(write_scene_dir(out_dir, i, scene, frames))
    return paths
