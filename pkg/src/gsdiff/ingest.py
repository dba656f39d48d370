"""Fuse posed RGB-D frames into a colored voxel grid.

Pipeline: per-view unprojection -> cross-view depth consistency filter ->
kNN statistical outlier removal -> voxelization (mean color per cell) ->
per-view foreground mask rendering.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

GRID_MAGIC = b"VXGR"
GRID_VERSION = 1


@dataclass
class GridSpec:
    dims: tuple      # (H, W, D) voxel counts: height(z), width(x), forward(y)
    extents: tuple   # ((zmin,zmax), (xmin,xmax), (ymin,ymax)) meters

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.extents = tuple((float(a), float(b)) for a, b in self.extents)
        if any(n < 4 or n % 4 != 0 for n in self.dims):
            raise ValueError("voxel counts must be >= 4 and divisible by 4")
        edges = [(hi - lo) / n for n, (lo, hi) in zip(self.dims, self.extents)]
        if max(edges) - min(edges) > 1e-9:
            raise ValueError("voxels must be cubic")

    @property
    def voxel_edge(self):
        (lo, hi) = self.extents[0]
        return (hi - lo) / self.dims[0]

    @property
    def mins(self):
        return np.array([lo for lo, _ in self.extents])

    def world_to_index(self, pts):
        """Half-open [min, max) binning; world (x,y,z) -> grid (iz, ix, iy)."""
        pts = np.asarray(pts, float)
        zxy = pts[..., [2, 0, 1]]
        return np.floor((zxy - self.mins) / self.voxel_edge).astype(np.int64)

    def in_bounds(self, idx):
        return np.all((idx >= 0) & (idx < np.array(self.dims)), axis=-1)

    def index_to_center(self, idx):
        zxy = (np.asarray(idx, float) + 0.5) * self.voxel_edge + self.mins
        return zxy[..., [1, 2, 0]]  # back to world (x, y, z)

    def voxel_centers(self):
        h, w, d = self.dims
        ii, jj, kk = np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij")
        return self.index_to_center(np.stack([ii, jj, kk], axis=-1))

    def to_json(self):
        return {"dims": list(self.dims), "extents": [list(e) for e in self.extents]}

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["dims"]), tuple(tuple(e) for e in d["extents"]))


# desk-scale default: same 0.4 m voxel edge as the full-scale grid, smaller volume
DESK_GRID = GridSpec((16, 32, 48), ((-1.6, 4.8), (-6.4, 6.4), (-4.0, 15.2)))
PAPER_GRID = GridSpec((32, 128, 192), ((-3.0, 9.8), (-25.6, 25.6), (-20.0, 56.8)))


@dataclass
class ColoredPointCloud:
    positions: np.ndarray    # N x 3
    colors: np.ndarray       # N x 3
    source_view: np.ndarray  # N int

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class VoxelGrid:
    spec: GridSpec
    occupancy: np.ndarray  # H x W x D bool
    color: np.ndarray      # H x W x D x 3


def unproject(frame, view_index=0):
    """Lift valid pixels of a posed RGB-D frame into world-space colored points."""
    pose = frame.pose
    if abs(np.linalg.det(pose.rotation)) < 1e-9:
        raise ValueError("non-invertible pose")
    h, w = frame.depth.shape
    fx, fy, cx, cy = pose.intrinsics
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    valid = frame.valid_mask & (frame.depth > 0)
    d = frame.depth[valid]
    pts_cam = np.stack([(u[valid] - cx) / fx * d, (v[valid] - cy) / fy * d, d], axis=-1)
    pts = pose.cam_to_world(pts_cam)
    colors = frame.image[valid][:, :3]
    return ColoredPointCloud(pts, colors, np.full(len(d), view_index, np.int64))


def _concat(clouds):
    return ColoredPointCloud(
        np.concatenate([c.positions for c in clouds]),
        np.concatenate([c.colors for c in clouds]),
        np.concatenate([c.source_view for c in clouds]),
    )


def consistency_filter(clouds, frames, tau=0.05, k_min=1):
    """Keep points whose depth agrees with >= k_min other views within relative tau."""
    if len(frames) < 2:
        raise ValueError("need at least 2 views")
    if tau <= 0:
        raise ValueError("tau must be positive")
    kept = []
    for i, cloud in enumerate(clouds):
        if len(cloud) == 0:
            continue
        votes = np.zeros(len(cloud), np.int64)
        for j, fr in enumerate(frames):
            if j == i:
                continue
            cam = fr.pose.world_to_cam(cloud.positions)
            z = cam[:, 2]
            front = z > 1e-6
            fx, fy, cx, cy = fr.pose.intrinsics
            h, w = fr.depth.shape
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.where(front, cam[:, 0] / z * fx + cx, -1)
                v = np.where(front, cam[:, 1] / z * fy + cy, -1)
            ui = np.round(u).astype(np.int64)
            vi = np.round(v).astype(np.int64)
            inside = front & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
            du = np.zeros(len(cloud))
            du[inside] = fr.depth[vi[inside], ui[inside]]
            sampled_ok = inside & (du > 0) & fr.valid_mask[np.clip(vi, 0, h - 1), np.clip(ui, 0, w - 1)]
            rel = np.full(len(cloud), np.inf)
            rel[sampled_ok] = np.abs(z[sampled_ok] - du[sampled_ok]) / du[sampled_ok]
            votes += (rel <= tau).astype(np.int64)
        keep = votes >= k_min
        kept.append(ColoredPointCloud(cloud.positions[keep], cloud.colors[keep], cloud.source_view[keep]))
    return _concat(kept)


def knn_outlier_filter(cloud, k=8, n_sigma=2.0):
    """Drop points whose mean k-NN distance exceeds mean + n_sigma * std."""
    n = len(cloud)
    if n <= k:
        return cloud
    tree = cKDTree(cloud.positions)
    dists, _ = tree.query(cloud.positions, k=k + 1)  # first neighbor is the point itself
    mean_d = dists[:, 1:].mean(axis=1)
    keep = mean_d <= mean_d.mean() + n_sigma * mean_d.std()
    return ColoredPointCloud(cloud.positions[keep], cloud.colors[keep], cloud.source_view[keep])


def voxelize(cloud, spec, min_points=1):
    """Bin points into voxels; a voxel is occupied at >= min_points, color = mean."""
    h, w, d = spec.dims
    n_vox = h * w * d
    occupancy = np.zeros(spec.dims, bool)
    color = np.zeros(spec.dims + (3,))
    if len(cloud) == 0:
        return VoxelGrid(spec, occupancy, color)
    idx = spec.world_to_index(cloud.positions)
    inb = spec.in_bounds(idx)
    idx = idx[inb]
    cols = cloud.colors[inb]
    flat = (idx[:, 0] * w + idx[:, 1]) * d + idx[:, 2]
    counts = np.bincount(flat, minlength=n_vox)
    csum = np.stack([np.bincount(flat, weights=cols[:, c], minlength=n_vox) for c in range(3)], axis=-1)
    occ = counts >= min_points
    mean = np.where(occ[:, None], csum / np.maximum(counts, 1)[:, None], 0.0)
    occupancy = occ.reshape(spec.dims)
    color = mean.reshape(spec.dims + (3,))
    return VoxelGrid(spec, occupancy, color)


def render_foreground_masks(cloud, frames, splat_radius=1):
    """Per-view mask of pixels within splat_radius of any projected merged point."""
    masks = []
    r = int(splat_radius)
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    disc = dy * dy + dx * dx <= r * r
    offs = np.stack([dy[disc], dx[disc]], axis=-1)  # (m, 2) as (dv, du)
    for fr in frames:
        h, w = fr.depth.shape
        mask = np.zeros((h, w), bool)
        if len(cloud) > 0:
            cam = fr.pose.world_to_cam(cloud.positions)
            z = cam[:, 2]
            front = z > 1e-6
            fx, fy, cx, cy = fr.pose.intrinsics
            u = np.round(cam[front, 0] / z[front] * fx + cx).astype(np.int64)
            v = np.round(cam[front, 1] / z[front] * fy + cy).astype(np.int64)
            vv = (v[:, None] + offs[None, :, 0]).ravel()
            uu = (u[:, None] + offs[None, :, 1]).ravel()
            ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            mask[vv[ok], uu[ok]] = True
        masks.append(mask)
    return masks


def fuse_frames(frames, spec, tau=0.05, k_min=1, min_points=1, splat_radius=1,
                outlier_k=8, outlier_sigma=2.0):
    """Full ingestion: unproject all views, filter, voxelize, render masks."""
    clouds = [unproject(fr, i) for i, fr in enumerate(frames)]
    if len(frames) >= 2:
        merged = consistency_filter(clouds, frames, tau=tau, k_min=k_min)
    else:
        merged = _concat(clouds)
    merged = knn_outlier_filter(merged, k=outlier_k, n_sigma=outlier_sigma)
    grid = voxelize(merged, spec, min_points=min_points)
    # masks reflect the in-grid foreground only
    idx = spec.world_to_index(merged.positions)
    inb = spec.in_bounds(idx)
    in_grid = ColoredPointCloud(merged.positions[inb], merged.colors[inb], merged.source_view[inb])
    masks = render_foreground_masks(in_grid, frames, splat_radius=splat_radius)
    return grid, masks, merged


# ---------------- binary voxel-grid file format ----------------

def save_voxel_grid(path, grid):
    """magic, version, dims, extents, packed occupancy bits, f32 colors of occupied cells."""
    occ = grid.occupancy.reshape(-1)
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<I", GRID_VERSION))
        f.write(struct.pack("<3I", *grid.spec.dims))
        for lo, hi in grid.spec.extents:
            f.write(struct.pack("<2d", lo, hi))
        f.write(np.packbits(occ).tobytes())
        f.write(grid.color.reshape(-1, 3)[occ].astype("<f4").tobytes())


def load_voxel_grid(path):
    with open(path, "rb") as f:
        if f.read(4) != GRID_MAGIC:
            raise ValueError("not a voxel grid file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != GRID_VERSION:
            raise ValueError(f"unsupported version {version}")
        dims = struct.unpack("<3I", f.read(12))
        extents = tuple(struct.unpack("<2d", f.read(16)) for _ in range(3))
        spec = GridSpec(dims, extents)
        n = dims[0] * dims[1] * dims[2]
        occ = np.unpackbits(np.frombuffer(f.read((n + 7) // 8), np.uint8))[:n].astype(bool)
        cols = np.frombuffer(f.read(int(occ.sum()) * 12), "<f4").reshape(-1, 3)
    color = np.zeros((n, 3))
    color[occ] = cols
    return VoxelGrid(spec, occ.reshape(dims), color.reshape(dims + (3,)))


def save_grid_spec(path, spec):
    with open(path, "w") as f:
        json.dump(spec.to_json(), f)


def load_grid_spec(path):
    with open(path) as f:
        return GridSpec.from_json(json.load(f))
