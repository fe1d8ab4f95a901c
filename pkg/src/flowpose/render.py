"""Software z-buffer rasterizer producing depth, mask, and a flat-shaded
intensity channel, plus crop/resize intrinsics adjustment and a rough
translation initializer from a 2D bounding box."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import Camera, Pose
from .mesh import Mesh

_NEAR = 1e-6

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel-space box, [x_min, x_max) x [y_min, y_max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("degenerate bbox")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    @property
    def size(self) -> tuple[float, float]:
        return (self.x_max - self.x_min, self.y_max - self.y_min)


@dataclass
class RenderOutput:
    """Depth map (meters, 0 = background), binary mask, flat-shaded intensity
    in [0, 1], and the camera/pose that produced them."""

    depth: np.ndarray
    mask: np.ndarray
    intensity: np.ndarray
    camera: Camera
    pose: Pose


@njit(cache=True)
def _raster_kernel(tri_px, tri_z, tri_shade, H, W, depth, shade):  # pragma: no cover - jit
    for t in range(tri_px.shape[0]):
        ax, ay = tri_px[t, 0, 0], tri_px[t, 0, 1]
        bx, by = tri_px[t, 1, 0], tri_px[t, 1, 1]
        cx, cy = tri_px[t, 2, 0], tri_px[t, 2, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        inv_area = 1.0 / area
        iza = 1.0 / tri_z[t, 0]
        izb = 1.0 / tri_z[t, 1]
        izc = 1.0 / tri_z[t, 2]
        u0 = max(0, int(math.ceil(min(ax, bx, cx))))
        u1 = min(W - 1, int(math.floor(max(ax, bx, cx))))
        v0 = max(0, int(math.ceil(min(ay, by, cy))))
        v1 = min(H - 1, int(math.floor(max(ay, by, cy))))
        for v in range(v0, v1 + 1):
            py = float(v)
            for u in range(u0, u1 + 1):
                px = float(u)
                w0 = ((cx - bx) * (py - by) - (cy - by) * (px - bx)) * inv_area
                w1 = ((ax - cx) * (py - cy) - (ay - cy) * (px - cx)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                inv_z = w0 * iza + w1 * izb + w2 * izc
                if inv_z <= 0.0:
                    continue
                d = 1.0 / inv_z
                if d < depth[v, u]:
                    depth[v, u] = d
                    shade[v, u] = tri_shade[t]


def _raster_numpy(tri_px, tri_z, tri_shade, H, W, depth, shade):
    """Pure-numpy fallback with semantics identical to the jit kernel
    (sequential triangles, strict-less depth test)."""
    for t in range(tri_px.shape[0]):
        a, b, c = tri_px[t]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) < 1e-12:
            continue
        u0 = max(0, int(np.ceil(min(a[0], b[0], c[0]))))
        u1 = min(W - 1, int(np.floor(max(a[0], b[0], c[0]))))
        v0 = max(0, int(np.ceil(min(a[1], b[1], c[1]))))
        v1 = min(H - 1, int(np.floor(max(a[1], b[1], c[1]))))
        if u1 < u0 or v1 < v0:
            continue
        us, vs = np.meshgrid(
            np.arange(u0, u1 + 1, dtype=float),
            np.arange(v0, v1 + 1, dtype=float),
        )
        w0 = ((c[0] - b[0]) * (vs - b[1]) - (c[1] - b[1]) * (us - b[0])) / area
        w1 = ((a[0] - c[0]) * (vs - c[1]) - (a[1] - c[1]) * (us - c[0])) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        inv_z = w0 / tri_z[t, 0] + w1 / tri_z[t, 1] + w2 / tri_z[t, 2]
        inside &= inv_z > 0.0
        if not inside.any():
            continue
        d = np.where(inside, 1.0 / np.where(inv_z > 0, inv_z, 1.0), np.inf)
        patch = depth[v0 : v1 + 1, u0 : u1 + 1]
        upd = d < patch
        patch[upd] = d[upd]
        shade[v0 : v1 + 1, u0 : u1 + 1][upd] = tri_shade[t]


def _clip_near(tri_cam: np.ndarray) -> list[np.ndarray]:
    """Clip one camera-space triangle (3,3) against the z = _NEAR plane.

    Returns 0, 1, or 2 triangles.
    """
    inside = tri_cam[:, 2] > _NEAR
    n_in = int(inside.sum())
    if n_in == 0:
        return []
    if n_in == 3:
        return [tri_cam]
    poly = []
    for i in range(3):
        j = (i + 1) % 3
        p, q = tri_cam[i], tri_cam[j]
        if inside[i]:
            poly.append(p)
        if inside[i] != inside[j]:
            s = (_NEAR - p[2]) / (q[2] - p[2])
            poly.append(p + s * (q - p))
    tris = []
    for k in range(1, len(poly) - 1):
        tris.append(np.stack([poly[0], poly[k], poly[k + 1]]))
    return tris


def rasterize(mesh: Mesh, pose: Pose, camera: Camera) -> RenderOutput:
    """Render depth/mask/intensity of the mesh under the pose.

    Depth is the nearest surface intersection along each pixel ray (1/z is
    interpolated linearly in screen space, exact for planar triangles).
    Ties are broken in favor of the lower triangle index, so output does not
    depend on any parallel scheduling. Back faces are kept; occlusion is
    resolved purely by the z-buffer.
    """
    H, W = camera.height, camera.width
    depth = np.full((H, W), np.inf)
    shade = np.zeros((H, W))

    cam_pts = mesh.vertices @ pose.rotation.T + pose.translation
    tri_cam_all = cam_pts[mesh.triangles]  # (T, 3, 3)
    z = tri_cam_all[:, :, 2]
    fully_front = np.all(z > _NEAR, axis=1)
    crossing = ~fully_front & np.any(z > _NEAR, axis=1)

    tri_list = [tri_cam_all[fully_front]]
    for t in np.nonzero(crossing)[0]:
        clipped = _clip_near(tri_cam_all[t])
        if clipped:
            tri_list.append(np.stack(clipped))
    tri_cam = np.vstack([t for t in tri_list if len(t)]) if any(len(t) for t in tri_list) else np.zeros((0, 3, 3))

    if len(tri_cam):
        tz = tri_cam[:, :, 2]
        px = np.empty_like(tri_cam[:, :, :2])
        px[:, :, 0] = camera.fx * tri_cam[:, :, 0] / tz + camera.cx
        px[:, :, 1] = camera.fy * tri_cam[:, :, 1] / tz + camera.cy

        # Flat Lambertian shading with the light at the camera;  |n . l| keeps
        # inconsistently wound meshes renderable.
        e1 = tri_cam[:, 1] - tri_cam[:, 0]
        e2 = tri_cam[:, 2] - tri_cam[:, 0]
        normal = np.cross(e1, e2)
        nn = np.linalg.norm(normal, axis=1)
        nn[nn == 0] = 1.0
        centroid = tri_cam.mean(axis=1)
        view = -centroid
        vn = np.linalg.norm(view, axis=1)
        vn[vn == 0] = 1.0
        shade_val = np.abs(np.einsum("ij,ij->i", normal / nn[:, None], view / vn[:, None]))
        shade_val = 0.2 + 0.8 * shade_val

        kernel = _raster_kernel if _HAVE_NUMBA else _raster_numpy
        kernel(
            np.ascontiguousarray(px),
            np.ascontiguousarray(tz),
            np.ascontiguousarray(shade_val),
            H,
            W,
            depth,
            shade,
        )

    mask = np.isfinite(depth)
    depth = np.where(mask, depth, 0.0)
    return RenderOutput(depth=depth, mask=mask, intensity=shade, camera=camera, pose=pose)


def adjust_intrinsics(camera: Camera, bbox: BBox, out_size: int) -> Camera:
    """Intrinsics for the bbox crop resampled to out_size x out_size.

    fx' = fx * s_x, cx' = (cx - x_min) * s_x with s_x = out_size / bbox width
    (and analogously in y), so the bbox corner maps to crop pixel (0, 0).
    """
    if out_size <= 0:
        raise ValueError("out_size must be positive")
    w, h = bbox.size
    sx = out_size / w
    sy = out_size / h
    return Camera(
        fx=camera.fx * sx,
        fy=camera.fy * sy,
        cx=(camera.cx - bbox.x_min) * sx,
        cy=(camera.cy - bbox.y_min) * sy,
        width=out_size,
        height=out_size,
    )


def crop_resample(image: np.ndarray, bbox: BBox, out_size: int) -> np.ndarray:
    """Nearest-neighbor crop+resample of an image to the out_size crop grid
    defined by adjust_intrinsics (out-of-bounds source pixels give 0)."""
    H, W = image.shape[:2]
    w, h = bbox.size
    us = bbox.x_min + (np.arange(out_size) + 0.0) * (w / out_size)
    vs = bbox.y_min + (np.arange(out_size) + 0.0) * (h / out_size)
    ui = np.round(us).astype(int)
    vi = np.round(vs).astype(int)
    valid_u = (ui >= 0) & (ui < W)
    valid_v = (vi >= 0) & (vi < H)
    out = np.zeros((out_size, out_size) + image.shape[2:], dtype=image.dtype)
    uu, vv = np.meshgrid(np.clip(ui, 0, W - 1), np.clip(vi, 0, H - 1))
    sampled = image[vv, uu]
    valid = valid_v[:, None] & valid_u[None, :]
    out[valid] = sampled[valid]
    return out


def mask_bbox(mask: np.ndarray, pad: float = 0.0) -> BBox:
    """Tight bbox around the true pixels of a binary mask, optionally padded."""
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        raise ValueError("empty mask")
    return BBox(
        x_min=float(us.min()) - pad,
        y_min=float(vs.min()) - pad,
        x_max=float(us.max()) + 1.0 + pad,
        y_max=float(vs.max()) + 1.0 + pad,
    )


def translation_from_bbox(mesh: Mesh, bbox: BBox, camera: Camera, rotation) -> np.ndarray:
    """Rough translation placing the rotated model inside the bbox.

    Depth is chosen so the model's maximal projected radius matches the mean
    bbox half-extent; x/y so the projected (rotated) model centroid lands at
    the bbox center.
    """
    R = np.asarray(rotation, dtype=float)
    pts = mesh.vertices @ R.T
    centroid = pts.mean(axis=0)
    radius = float(np.linalg.norm(pts - centroid, axis=1).max())
    w, h = bbox.size
    half_extent = (w + h) / 4.0
    f = (camera.fx + camera.fy) / 2.0
    z = f * radius / half_extent
    ucx, vcy = bbox.center
    tx = (ucx - camera.cx) / camera.fx * z - centroid[0]
    ty = (vcy - camera.cy) / camera.fy * z - centroid[1]
    tz = z - centroid[2]
    return np.array([tx, ty, tz])
