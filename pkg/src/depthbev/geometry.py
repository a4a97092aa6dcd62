"""Geometric kernels bridging point clouds, camera views, and the BEV grid.

Conventions used throughout:
  - ego frame: x/y in the ground plane, z up, meters.
  - image coords: continuous (u, v) with u in [0, cols], v in [0, rows];
    pixel (r, c) stores the value located at its center (c + 0.5, r + 0.5).
  - BEV continuous cell coords: world (x, y) maps to (x / cell_size + ego_x,
    y / cell_size + ego_y), so cell ix covers [ix, ix + 1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .depth import GridSpec
from .errors import BoundsError, ConfigError, DimensionError, ValidationError
from .tensor import Tensor

# ---------------------------------------------------------------------------
# domain types


class PointCloud:
    """N x 4 float array of (x, y, z, intensity)."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point cloud contains non-finite coordinates")
        if pts.shape[0] and (pts[:, 3].min() < 0 or pts[:, 3].max() > 1):
            raise ValidationError("intensity must lie in [0, 1]")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    def save(self, path) -> None:
        """Binary N x 4 little-endian f32 dump (common LiDAR layout)."""
        with open(path, "wb") as fh:
            fh.write(self.points.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "PointCloud":
        with open(path, "rb") as fh:
            raw = np.frombuffer(fh.read(), dtype="<f4")
        if raw.size % 4:
            raise ValidationError(f"point cloud file {path} is not N x 4")
        return cls(raw.reshape(-1, 4).astype(np.float64))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: 3x3 intrinsics, rigid 4x4 ego-to-camera transform."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_size: tuple[int, int]  # (rows, cols)

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        t = np.asarray(self.extrinsics, dtype=np.float64)
        if k.shape != (3, 3) or t.shape != (4, 4):
            raise ValidationError("intrinsics must be 3x3 and extrinsics 4x4")
        if abs(np.linalg.det(k)) < 1e-12:
            raise ValidationError("intrinsics must be invertible")
        r = t[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValidationError("extrinsic rotation must be orthonormal with det +1")
        if np.max(np.abs(t[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-12:
            raise ValidationError("extrinsics last row must be [0, 0, 0, 1]")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsics", t)

    def ego_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.extrinsics[:3, :3].T + self.extrinsics[:3, 3]

    def camera_to_ego(self, pts: np.ndarray) -> np.ndarray:
        r, tr = self.extrinsics[:3, :3], self.extrinsics[:3, 3]
        return (pts - tr) @ r

    def to_json_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "extrinsics": self.extrinsics.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraModel":
        return cls(
            intrinsics=np.asarray(d["intrinsics"], dtype=np.float64),
            extrinsics=np.asarray(d["extrinsics"], dtype=np.float64),
            image_size=(int(d["image_size"][0]), int(d["image_size"][1])),
        )


def save_cameras(path, cams: Sequence[CameraModel]) -> None:
    with open(path, "w") as fh:
        json.dump([c.to_json_dict() for c in cams], fh, indent=2)


def load_cameras(path) -> list[CameraModel]:
    with open(path) as fh:
        return [CameraModel.from_json_dict(d) for d in json.load(fh)]


def _normalize_yaw(yaw: float) -> float:
    y = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if y <= 0:
        y += 2.0 * math.pi
    return y - math.pi


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center (x, y, z), size (l, w, h), yaw about z."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValidationError(f"box size must be strictly positive, got {self.size}")
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"box score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "yaw", _normalize_yaw(float(self.yaw)))

    def to_json_dict(self) -> dict:
        return {
            "center": list(self.center),
            "size": list(self.size),
            "yaw": self.yaw,
            "score": self.score,
            "class_id": self.class_id,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Box3D":
        return cls(
            center=tuple(d["center"]),
            size=tuple(d["size"]),
            yaw=float(d["yaw"]),
            score=float(d.get("score", 1.0)),
            class_id=int(d.get("class_id", 0)),
        )


def save_boxes(path, boxes: Sequence[Box3D]) -> None:
    with open(path, "w") as fh:
        json.dump([b.to_json_dict() for b in boxes], fh, indent=2)


def load_boxes(path) -> list[Box3D]:
    with open(path) as fh:
        return [Box3D.from_json_dict(d) for d in json.load(fh)]


def box_footprint_corners(box: Box3D) -> np.ndarray:
    """4 x 2 world corners of the box footprint, counterclockwise."""
    l, w = box.size[0], box.size[1]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]], dtype=np.float64) * 0.5
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array(box.center[:2])


def box_corners_3d(box: Box3D) -> np.ndarray:
    """8 x 3 world corners: footprint corners at bottom z then top z."""
    foot = box_footprint_corners(box)
    zc, h = box.center[2], box.size[2]
    bottom = np.column_stack([foot, np.full(4, zc - 0.5 * h)])
    top = np.column_stack([foot, np.full(4, zc + 0.5 * h)])
    return np.vstack([bottom, top])


@dataclass(frozen=True)
class VoxelGridConfig:
    voxel_size: tuple[float, float, float]
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]

    def __post_init__(self):
        if min(self.voxel_size) <= 0:
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise ConfigError("voxel range must be non-empty")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(
            int(round((hi - lo) / s))
            for (lo, hi), s in zip((self.x_range, self.y_range, self.z_range), self.voxel_size)
        )

    def voxel_center(self, idx: np.ndarray) -> np.ndarray:
        lo = np.array([self.x_range[0], self.y_range[0], self.z_range[0]])
        return lo + (np.asarray(idx, dtype=np.float64) + 0.5) * np.array(self.voxel_size)


def voxel_config_for_grid(grid: GridSpec, voxel_xy: float, voxel_z: float,
                          z_range: tuple[float, float]) -> VoxelGridConfig:
    """Voxel range matching the BEV footprint exactly."""
    (xmin, xmax), (ymin, ymax) = grid.world_bounds()
    return VoxelGridConfig(
        voxel_size=(voxel_xy, voxel_xy, voxel_z),
        x_range=(xmin, xmax),
        y_range=(ymin, ymax),
        z_range=z_range,
    )


class VoxelGrid:
    """Sparse occupied voxels: integer indices plus a feature row per voxel."""

    def __init__(self, config: VoxelGridConfig, indices: np.ndarray, features: Tensor,
                 dropped_points: int = 0):
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        if features.data.ndim != 2 or features.data.shape[0] != indices.shape[0]:
            raise DimensionError("voxel features must be (n_occupied, C_v)")
        ext = config.extents
        if indices.size and (np.any(indices < 0) or np.any(indices >= np.array(ext))):
            raise ValidationError("occupied voxel index outside configured range")
        self.config = config
        self.indices = indices
        self.features = features
        self.dropped_points = int(dropped_points)

    @property
    def n_occupied(self) -> int:
        return self.indices.shape[0]

    def occupancy_map(self) -> dict[tuple[int, int, int], int]:
        """Sparse map voxel-index -> feature row."""
        return {tuple(ijk): row for row, ijk in enumerate(self.indices.tolist())}


@dataclass
class BevFeatureMap:
    """W x H x C feature grid over a GridSpec; features may carry gradients."""

    grid: GridSpec
    features: Tensor

    def __post_init__(self):
        w, h = self.grid.width, self.grid.height
        if self.features.data.ndim != 3 or self.features.data.shape[:2] != (w, h):
            raise DimensionError(
                f"BEV features shape {self.features.shape} does not match grid {w}x{h}")

    @property
    def channels(self) -> int:
        return self.features.data.shape[2]


# ---------------------------------------------------------------------------
# voxelization and height compression

VOXEL_BASE_FEATURES = 5  # mean xyz offset from voxel center, mean intensity, log1p(count)


def voxelize(pc: PointCloud, config: VoxelGridConfig, stub) -> VoxelGrid:
    """Bin points into voxels and lift per-voxel summary features via ``stub``.

    Out-of-range points are dropped, with the count kept on the result.
    """
    pts = pc.points
    lo = np.array([config.x_range[0], config.y_range[0], config.z_range[0]])
    size = np.array(config.voxel_size)
    ext = np.array(config.extents)

    idx = np.floor((pts[:, :3] - lo) / size).astype(np.int64)
    keep = np.all((idx >= 0) & (idx < ext), axis=1)
    dropped = int((~keep).sum())
    idx = idx[keep]
    pts = pts[keep]

    if idx.shape[0] == 0:
        feats = T.linear(Tensor(np.zeros((0, VOXEL_BASE_FEATURES))), stub.weight, stub.bias)
        return VoxelGrid(config, idx, feats, dropped)

    flat = (idx[:, 0] * ext[1] + idx[:, 1]) * ext[2] + idx[:, 2]
    uniq, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    n = uniq.shape[0]

    occ = np.empty((n, 3), dtype=np.int64)
    occ[:, 0] = uniq // (ext[1] * ext[2])
    occ[:, 1] = (uniq // ext[2]) % ext[1]
    occ[:, 2] = uniq % ext[2]

    centers = config.voxel_center(occ)
    offsets = pts[:, :3] - centers[inverse]
    base = np.zeros((n, VOXEL_BASE_FEATURES), dtype=np.float64)
    np.add.at(base[:, :3], inverse, offsets)
    np.add.at(base[:, 3], inverse, pts[:, 3])
    base[:, :4] /= counts[:, None]
    base[:, 4] = np.log1p(counts)

    feats = T.linear(Tensor(base), stub.weight, stub.bias)
    return VoxelGrid(config, occ, feats, dropped)


def height_compress(vox: VoxelGrid, out_grid: GridSpec, stub) -> BevFeatureMap:
    """Sum voxel features over each z column, then project to C channels.

    Requires voxel x/y extents to divide evenly into BEV cells. Empty
    columns stay exactly zero (the stub carries no bias).
    """
    cs = out_grid.cell_size
    vx, vy = vox.config.voxel_size[0], vox.config.voxel_size[1]
    for v in (vx, vy):
        ratio = cs / v
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError(f"voxel size {v} does not divide BEV cell {cs} evenly")
    if stub.bias is not None:
        raise ConfigError("height_compress stub must be bias-free so empty cells stay zero")

    w, h = out_grid.width, out_grid.height
    c_v = vox.features.data.shape[1]
    centers = vox.config.voxel_center(vox.indices) if vox.n_occupied else np.zeros((0, 3))
    ex, ey = out_grid.ego_index
    cell_x = np.floor(centers[:, 0] / cs).astype(np.int64) + ex
    cell_y = np.floor(centers[:, 1] / cs).astype(np.int64) + ey
    ok = (cell_x >= 0) & (cell_x < w) & (cell_y >= 0) & (cell_y < h)
    rows = np.nonzero(ok)[0]
    flat_cell = cell_x[ok] * h + cell_y[ok]

    feats = vox.features

    def forward(fdata: np.ndarray) -> np.ndarray:
        dense = np.zeros((w * h, c_v), dtype=np.float64)
        np.add.at(dense, flat_cell, fdata[rows])
        return dense

    def backward(g: np.ndarray):
        gf = np.zeros_like(feats.data)
        gf[rows] = g[flat_cell]
        return (gf,)

    dense = T.custom_op("height_compress", forward(feats.data), (feats,), backward)
    bev = T.linear(T.reshape(dense, (w, h, c_v)), stub.weight)
    return BevFeatureMap(grid=out_grid, features=bev)


# ---------------------------------------------------------------------------
# image -> BEV lift-splat


def depth_bin_centers(n_bins: int, near: float = 1.0, far: float = 60.0) -> np.ndarray:
    """Midpoints of uniform depth bins spanning [near, far] meters."""
    if n_bins < 1 or not far > near:
        raise ConfigError("need n_bins >= 1 and far > near")
    edges = np.linspace(near, far, n_bins + 1)
    return 0.5 * (edges[:-1] + edges[1:])


class LiftSplatMapping(NamedTuple):
    """Static (pixel, bin) -> BEV cell routing for one camera."""

    pixel_rows: np.ndarray  # flat pixel index per in-grid contribution
    bin_idx: np.ndarray
    cell_flat: np.ndarray


def build_lift_splat_mapping(cams: Sequence[CameraModel], image_size: tuple[int, int],
                             bin_centers: np.ndarray, grid: GridSpec) -> list[LiftSplatMapping]:
    """Precompute in-grid unprojection routing; depends only on geometry."""
    rows, cols = image_size
    ex, ey = grid.ego_index
    cs = grid.cell_size
    u = (np.arange(cols, dtype=np.float64) + 0.5)
    v = (np.arange(rows, dtype=np.float64) + 0.5)
    uu, vv = np.meshgrid(u, v)  # (rows, cols)
    ones = np.ones_like(uu)
    pix_h = np.stack([uu.ravel(), vv.ravel(), ones.ravel()], axis=1)  # (P, 3)

    out = []
    for cam in cams:
        rays = pix_h @ np.linalg.inv(cam.intrinsics).T  # camera-frame dirs with z=1
        p = rays.shape[0]
        b = bin_centers.shape[0]
        cam_pts = rays[:, None, :] * bin_centers[None, :, None]  # (P, B, 3)
        ego_pts = cam.camera_to_ego(cam_pts.reshape(-1, 3))
        cx = np.floor(ego_pts[:, 0] / cs).astype(np.int64) + ex
        cy = np.floor(ego_pts[:, 1] / cs).astype(np.int64) + ey
        ok = (cx >= 0) & (cx < grid.width) & (cy >= 0) & (cy < grid.height)
        pix_idx = np.repeat(np.arange(p, dtype=np.int64), b)[ok]
        bin_idx = np.tile(np.arange(b, dtype=np.int64), p)[ok]
        out.append(LiftSplatMapping(pix_idx, bin_idx, (cx * grid.height + cy)[ok]))
    return out


def lift_splat(img_feats: Sequence[Tensor], depth_dists: Sequence[np.ndarray],
               cams: Sequence[CameraModel], grid: GridSpec, bin_centers: np.ndarray,
               mapping: list[LiftSplatMapping] | None = None) -> BevFeatureMap:
    """Splat per-pixel features into BEV cells along predicted depth bins.

    Each (pixel, bin) contributes feature * probability to the cell its
    unprojection lands in; out-of-grid contributions are dropped. Linear
    and differentiable in ``img_feats``; depth distributions are treated
    as constants.
    """
    if not (len(img_feats) == len(depth_dists) == len(cams)):
        raise DimensionError("lift_splat: per-view input lists must align")
    rows, cols = cams[0].image_size
    c = img_feats[0].data.shape[-1]
    n_bins = bin_centers.shape[0]
    for f, d, cam in zip(img_feats, depth_dists, cams):
        if cam.image_size != (rows, cols):
            raise DimensionError("lift_splat: all views must share one image size")
        if f.data.shape != (rows, cols, c):
            raise DimensionError(f"image features must be ({rows}, {cols}, {c})")
        if d.shape != (rows, cols, n_bins):
            raise DimensionError(f"depth distribution must be ({rows}, {cols}, {n_bins})")
        if np.max(np.abs(d.sum(axis=-1) - 1.0)) > 1e-6:
            raise ValidationError("depth distributions must sum to 1 per pixel")

    if mapping is None:
        mapping = build_lift_splat_mapping(cams, (rows, cols), bin_centers, grid)

    weights = [d.reshape(-1, n_bins)[m.pixel_rows, m.bin_idx]
               for d, m in zip(depth_dists, mapping)]

    out = np.zeros((grid.n_cells, c), dtype=np.float64)
    for f, m, wgt in zip(img_feats, mapping, weights):
        contrib = wgt[:, None] * f.data.reshape(-1, c)[m.pixel_rows]
        for ch in range(c):
            out[:, ch] += np.bincount(m.cell_flat, weights=contrib[:, ch],
                                      minlength=grid.n_cells)

    def backward(g: np.ndarray):
        grads = []
        for m, wgt in zip(mapping, weights):
            pulled = wgt[:, None] * g[m.cell_flat]
            gf = np.zeros((rows * cols, c), dtype=np.float64)
            for ch in range(c):
                gf[:, ch] = np.bincount(m.pixel_rows, weights=pulled[:, ch],
                                        minlength=rows * cols)
            grads.append(gf.reshape(rows, cols, c))
        return tuple(grads)

    flat = T.custom_op("lift_splat", out, tuple(img_feats), backward)
    return BevFeatureMap(grid=grid, features=T.reshape(flat, (grid.width, grid.height, c)))


# ---------------------------------------------------------------------------
# box projection and RoI align


class Rect(NamedTuple):
    """Axis-aligned rect in continuous (row, col) coordinates."""

    r0: float
    c0: float
    r1: float
    c1: float

    @property
    def area(self) -> float:
        return max(self.r1 - self.r0, 0.0) * max(self.c1 - self.c0, 0.0)


def project_box_to_image(box: Box3D, cam: CameraModel) -> Rect | None:
    """Project all 8 corners; bound the in-front ones, clipped to the image.

    Returns None when no corner lies in front of the camera or the
    projection misses the image entirely.
    """
    corners = box_corners_3d(box)
    cam_pts = cam.ego_to_camera(corners)
    front = cam_pts[:, 2] > 1e-9
    if not front.any():
        return None
    p = cam_pts[front]
    uv = (p @ cam.intrinsics.T)
    uv = uv[:, :2] / uv[:, 2:3]
    rows, cols = cam.image_size
    u0, u1 = uv[:, 0].min(), uv[:, 0].max()
    v0, v1 = uv[:, 1].min(), uv[:, 1].max()
    rect = Rect(max(v0, 0.0), max(u0, 0.0), min(v1, float(rows)), min(u1, float(cols)))
    if rect.r1 <= rect.r0 or rect.c1 <= rect.c0:
        return None
    return rect


def _bilinear_terms(rows: int, cols: int, ys: np.ndarray, xs: np.ndarray):
    """Index/weight quadruples for samples at continuous (y, x) positions."""
    fy = np.clip(ys - 0.5, 0.0, rows - 1.0)
    fx = np.clip(xs - 0.5, 0.0, cols - 1.0)
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    y1 = np.minimum(y0 + 1, rows - 1)
    x1 = np.minimum(x0 + 1, cols - 1)
    wy = fy - y0
    wx = fx - x0
    idx = np.stack([y0 * cols + x0, y0 * cols + x1, y1 * cols + x0, y1 * cols + x1])
    wts = np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx])
    return idx, wts


def roi_align(feat: Tensor, rect: Rect, out_bins: tuple[int, int] = (3, 3),
              samples: int = 2) -> Tensor:
    """Average ``samples`` x ``samples`` bilinear taps per output bin.

    Differentiable w.r.t. ``feat``; sample positions clamp at the borders.
    """
    if feat.data.ndim != 3:
        raise DimensionError(f"roi_align expects rows x cols x C features, got {feat.shape}")
    if rect.area <= 0:
        raise ValidationError(f"roi_align rect has non-positive area: {rect}")
    if samples < 1:
        raise ValidationError("samples per bin axis must be >= 1")
    rows, cols, c = feat.data.shape
    br, bc = out_bins
    bin_h = (rect.r1 - rect.r0) / br
    bin_w = (rect.c1 - rect.c0) / bc

    off = (np.arange(samples) + 0.5) / samples
    ys = rect.r0 + (np.arange(br)[:, None] + off[None, :]) * bin_h  # (br, s)
    xs = rect.c0 + (np.arange(bc)[:, None] + off[None, :]) * bin_w  # (bc, s)
    yy = np.broadcast_to(ys[:, None, :, None], (br, bc, samples, samples)).ravel()
    xx = np.broadcast_to(xs[None, :, None, :], (br, bc, samples, samples)).ravel()

    idx, wts = _bilinear_terms(rows, cols, yy, xx)
    flat = feat.data.reshape(-1, c)
    vals = np.einsum("kn,knc->nc", wts, flat[idx])
    out = vals.reshape(br, bc, samples * samples, c).mean(axis=2)

    def backward(g: np.ndarray):
        gs = np.repeat(g.reshape(br * bc, c), samples * samples, axis=0) / (samples * samples)
        gf = np.zeros_like(flat)
        for k in range(4):
            np.add.at(gf, idx[k], wts[k][:, None] * gs)
        return (gf.reshape(rows, cols, c),)

    return T.custom_op("roi_align", out, (feat,), backward)


# ---------------------------------------------------------------------------
# per-box pooling over voxels and BEV cells


def voxels_in_box(vox: VoxelGrid, box: Box3D) -> np.ndarray:
    """Row indices of occupied voxels whose centers fall inside the oriented box."""
    if vox.n_occupied == 0:
        return np.zeros(0, dtype=np.int64)
    centers = vox.config.voxel_center(vox.indices)
    rel = centers - np.array(box.center)
    c, s = math.cos(-box.yaw), math.sin(-box.yaw)
    local_x = rel[:, 0] * c - rel[:, 1] * s
    local_y = rel[:, 0] * s + rel[:, 1] * c
    l, w, h = box.size
    inside = ((np.abs(local_x) <= 0.5 * l) & (np.abs(local_y) <= 0.5 * w)
              & (np.abs(rel[:, 2]) <= 0.5 * h))
    return np.nonzero(inside)[0]


def voxel_pool_box(vox: VoxelGrid, box: Box3D, stub) -> Tensor:
    """Max-pool voxel features inside the box, then mix and project to c.

    A box containing no occupied voxels yields the stub's learned empty
    embedding instead of raising.
    """
    rows = voxels_in_box(vox, box)
    if rows.size == 0:
        return stub.empty
    pooled = T.max_axis0(T.gather_rows(vox.features, rows))
    mixed = T.linear(T.reshape(pooled, (1, -1)), stub.mix_weight, stub.mix_bias)
    out = T.linear(mixed, stub.out_weight, stub.out_bias)
    return T.reshape(out, (-1,))


def box_bev_rect(box: Box3D, grid: GridSpec) -> Rect:
    """Axis-aligned bound of the rotated footprint, in continuous cell coords."""
    corners = box_footprint_corners(box)
    ex, ey = grid.ego_index
    cx = corners[:, 0] / grid.cell_size + ex
    cy = corners[:, 1] / grid.cell_size + ey
    return Rect(float(cx.min()), float(cy.min()), float(cx.max()), float(cy.max()))


def crop_bev_box(bev: BevFeatureMap, box: Box3D, stub) -> Tensor:
    """RoI-align the box footprint to a 3x3 bin grid, flatten, project to c."""
    rect = box_bev_rect(box, bev.grid)
    if rect.r1 <= 0 or rect.c1 <= 0 or rect.r0 >= bev.grid.width or rect.c0 >= bev.grid.height:
        raise BoundsError(f"box footprint {rect} fully outside the BEV grid")
    crop = roi_align(bev.features, rect, out_bins=stub.bins, samples=stub.samples)
    flat = T.reshape(crop, (1, -1))
    return T.reshape(T.linear(flat, stub.weight, stub.bias), (-1,))
