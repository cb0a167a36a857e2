"""Orthographic depth/normal rendering of voxel grids and depth-normal compositing."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .voxcore import VoxelObject

FRAME_MARGIN = 0.05
NORMAL_LO, NORMAL_HI = 2.0 / 6.0, 4.0 / 6.0


@dataclass(frozen=True)
class ViewPose:
    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self):
        object.__setattr__(self, "azimuth_deg", float(self.azimuth_deg) % 360.0)
        if not -90.0 <= self.elevation_deg <= 90.0:
            raise ValueError("elevation must lie in [-90, 90]")


DEFAULT_VIEWS = (
    ViewPose(180, 45),
    ViewPose(180, -25),
    ViewPose(90, 45),
    ViewPose(225, 0),
    ViewPose(135, -45),
)


@dataclass(frozen=True)
class RenderOutput:
    depth: np.ndarray
    normal: np.ndarray
    composite: np.ndarray
    occupied_fraction: float


def camera_frame(view: ViewPose):
    """Unit vectors (to_camera, right, up) for a view."""
    az = np.deg2rad(view.azimuth_deg)
    el = np.deg2rad(view.elevation_deg)
    to_cam = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    right = np.array([-np.sin(az), np.cos(az), 0.0])
    up = np.cross(right, -to_cam)
    return to_cam, right, up


def composite(depth: np.ndarray, normal: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    if normal.shape[:2] != depth.shape or normal.ndim != 3:
        raise ValueError(f"shape mismatch: depth {depth.shape} vs normal {normal.shape}")
    return (1.0 - depth)[..., None] * normal


def _surface_gradient(occ: np.ndarray) -> np.ndarray:
    """Sobel gradient of the signed distance field (positive outside)."""
    sdf = ndimage.distance_transform_edt(~occ) - ndimage.distance_transform_edt(occ)
    return np.stack([ndimage.sobel(sdf, axis=a, mode="nearest") for a in range(3)], axis=-1)


@lru_cache(maxsize=64)
def _ray_setup(shape: tuple, view: ViewPose, resolution: int):
    """Ray origins on the near face of the view-aligned box framing the grid."""
    to_cam, right, up = camera_frame(view)
    res = np.array(shape, dtype=np.float64)
    corners = np.array(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij")).reshape(3, -1).T * res - res / 2
    half_img = (1.0 + FRAME_MARGIN) * max(np.abs(corners @ right).max(), np.abs(corners @ up).max())
    half_depth = np.abs(corners @ to_cam).max()
    centers = (np.arange(resolution) + 0.5) / resolution * 2.0 * half_img - half_img
    img_x = np.broadcast_to(centers[None, :], (resolution, resolution))
    img_y = np.broadcast_to(-centers[:, None], (resolution, resolution))
    origin = (res / 2.0 + to_cam * half_depth)[None, :] + img_x.reshape(-1, 1) * right + img_y.reshape(-1, 1) * up
    return origin, -to_cam, 2.0 * half_depth


def cast_rays(occ: np.ndarray, origin: np.ndarray, direction: np.ndarray):
    """First-hit voxel traversal for parallel rays.

    Returns (t_hit, hit_index (M, 3), entry_axis) with t_hit = inf on a miss.
    """
    shape = np.array(occ.shape)
    m = origin.shape[0]
    d = np.where(np.abs(direction) < 1e-12, 1e-12, direction)
    inv = 1.0 / d
    t0 = (0.0 - origin) * inv
    t1 = (shape - origin) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    t_enter = np.maximum(tmin.max(axis=1), 0.0)
    t_exit = tmax.min(axis=1)
    entry_axis = np.argmax(tmin, axis=1)

    t_hit = np.full(m, np.inf)
    hit_idx = np.zeros((m, 3), dtype=np.int64)
    hit_axis = np.zeros(m, dtype=np.int64)

    active = np.flatnonzero(t_enter < t_exit)
    if active.size == 0:
        return t_hit, hit_idx, hit_axis

    step = np.where(d > 0, 1, -1)
    p = origin[active] + (t_enter[active] + 1e-9)[:, None] * d
    idx = np.clip(np.floor(p).astype(np.int64), 0, shape - 1)
    t_cur = t_enter[active]
    axis = entry_axis[active]
    boundary = idx + (step > 0)
    t_next = (boundary - origin[active]) * inv
    t_delta = np.abs(inv)

    flat = occ.ravel()
    strides = np.array([shape[1] * shape[2], shape[2], 1])
    for _ in range(int(shape.sum()) + 3):
        if active.size == 0:
            break
        hit = flat[idx @ strides]
        if hit.any():
            rows = active[hit]
            t_hit[rows] = t_cur[hit]
            hit_idx[rows] = idx[hit]
            hit_axis[rows] = axis[hit]
            keep = ~hit
            active, idx, t_cur, axis, t_next = active[keep], idx[keep], t_cur[keep], axis[keep], t_next[keep]
        axis = np.argmin(t_next, axis=1)
        r = np.arange(active.size)
        t_cur = t_next[r, axis]
        idx[r, axis] += step[axis]
        t_next[r, axis] += t_delta[axis]
        inside = np.all((idx >= 0) & (idx < shape), axis=1)
        if not inside.all():
            active, idx, t_cur, axis, t_next = (active[inside], idx[inside], t_cur[inside],
                                                axis[inside], t_next[inside])
    return t_hit, hit_idx, hit_axis


def render_view(obj: VoxelObject, view: ViewPose, resolution: int = 128) -> RenderOutput:
    """Render depth, encoded camera-space normals and their composite.

    The frame is the view-aligned box around the whole grid (plus margin), so
    the object's absolute scale never changes the image.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    occ = obj.occupancy
    origin, direction, depth_range = _ray_setup(occ.shape, view, int(resolution))
    t_hit, hit_idx, hit_axis = cast_rays(occ, origin, direction)

    hit = np.isfinite(t_hit)
    depth = np.ones(t_hit.shape)
    depth[hit] = np.clip(t_hit[hit] / depth_range, 0.0, 1.0)

    normal = np.zeros((t_hit.size, 3))
    if hit.any():
        grad = _surface_gradient(occ)[tuple(hit_idx[hit].T)]
        norm = np.linalg.norm(grad, axis=1)
        face = np.zeros_like(grad)
        axes = hit_axis[hit]
        face[np.arange(axes.size), axes] = -np.sign(direction[axes])
        flat = norm < 1e-9
        grad = np.where(flat[:, None], face, grad / np.where(flat, 1.0, norm)[:, None])
        to_cam, right, up = camera_frame(view)
        cam = np.stack([grad @ right, grad @ up, grad @ to_cam], axis=1)
        normal[hit] = 0.5 + cam / 6.0

    depth = depth.reshape(resolution, resolution)
    normal = normal.reshape(resolution, resolution, 3)
    return RenderOutput(depth=depth, normal=normal, composite=composite(depth, normal),
                        occupied_fraction=float(hit.mean()))


def write_ppm(image: np.ndarray, path) -> None:
    """Binary PPM (P6); grayscale input is replicated over three channels."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    pixels = np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
