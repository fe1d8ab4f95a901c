"""Dense 2D flow machinery.

Flow fields are displacements from the rendered image to the observed image,
stored as (H, W, 2) arrays of (du, dv) in pixels with a validity mask over
the rendered foreground. Includes pose-induced flow, an oracle provider and a
corruption harness, RAFT-style convex upsampling, depth-warp certainty ground
truth, correlation volumes with shape-constraint lookup, hand-crafted
correlation features, and a small binary serialization format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geom import Camera, Pose, lift
from .render import RenderOutput

_FLOW_MAGIC = b"FPFL"
_OUTLIER_RANGE = 32.0  # px, uniform range for gross outlier displacements


@dataclass
class FlowField:
    """Dense displacement map (render -> observed) with validity mask."""

    flow: np.ndarray  # (H, W, 2) float, (du, dv) pixels
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.flow.shape[:2] != self.valid.shape or self.flow.shape[-1] != 2:
            raise ValueError("flow must be (H, W, 2) with matching (H, W) validity")
        if not np.all(np.isfinite(self.flow[self.valid])):
            raise ValueError("flow must be finite on valid pixels")

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


@dataclass
class ConfidenceMaps:
    """Per-pixel certainty c, pose sensitivity s, and combined weight W = c*s."""

    certainty: np.ndarray
    sensitivity: np.ndarray
    combined: np.ndarray

    @classmethod
    def from_factors(cls, certainty, sensitivity) -> "ConfidenceMaps":
        c = np.asarray(certainty, dtype=float)
        s = np.asarray(sensitivity, dtype=float)
        if c.shape != s.shape:
            raise ValueError("certainty and sensitivity shapes differ")
        for name, m in (("certainty", c), ("sensitivity", s)):
            if m.min() < 0.0 or m.max() > 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        return cls(certainty=c, sensitivity=s, combined=c * s)


@dataclass
class CorrelationVolume:
    """All-pairs dot-product similarities between two feature maps:
    values[i, j, k, l] = <feat_a[i, j], feat_b[k, l]>."""

    values: np.ndarray  # (H1, W1, H2, W2)

    @property
    def source_shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


@dataclass
class UpsampleMask:
    """Convex-combination weights for flow upsampling: for each coarse pixel,
    factor^2 fine offsets x 9 neighbor weights, each row summing to 1."""

    weights: np.ndarray  # (h, w, factor*factor, 9)
    factor: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        h, w, f2, nine = self.weights.shape
        if nine != 9 or f2 != self.factor * self.factor:
            raise ValueError("mask must be (h, w, factor^2, 9)")
        if self.weights.min() < 0.0:
            raise ValueError("mask weights must be nonnegative")
        sums = self.weights.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("mask rows must sum to 1")


def pose_induced_flow(render: RenderOutput, new_pose: Pose, camera: Camera) -> FlowField:
    """Flow obtained by lifting each rendered foreground pixel to its
    object-space point and reprojecting it under `new_pose`. Pixels whose
    lifted point falls behind the camera under the new pose become invalid."""
    H, W = render.depth.shape
    flow = np.zeros((H, W, 2))
    valid = np.zeros((H, W), dtype=bool)
    vs, us = np.nonzero(render.mask)
    if len(us) == 0:
        return FlowField(flow, valid)
    px = np.stack([us, vs], axis=1).astype(float)
    X = lift(camera, render.pose, px, render.depth[vs, us])
    Y = new_pose.transform(X)
    front = Y[:, 2] > 1e-9
    z = np.where(front, Y[:, 2], 1.0)
    u_new = camera.fx * Y[:, 0] / z + camera.cx
    v_new = camera.fy * Y[:, 1] / z + camera.cy
    flow[vs[front], us[front], 0] = (u_new - px[:, 0])[front]
    flow[vs[front], us[front], 1] = (v_new - px[:, 1])[front]
    valid[vs[front], us[front]] = True
    return FlowField(flow, valid)


def oracle_flow(render: RenderOutput, gt_pose: Pose, camera: Camera) -> FlowField:
    """Ground-truth flow: pose-induced flow toward the ground-truth pose.
    Shares the implementation; the distinct name marks supervision targets in
    the harness."""
    return pose_induced_flow(render, gt_pose, camera)


def corrupt_flow(
    flow: FlowField,
    noise_px: float,
    outlier_frac: float,
    occlusion_mask=None,
    seed: int = 0,
) -> FlowField:
    """Degrade a flow field: i.i.d. Gaussian noise per component, a fraction
    of valid pixels replaced with uniform displacements in [-32, 32] px, and
    forced outliers under an occlusion mask. Deterministic per seed."""
    if noise_px < 0:
        raise ValueError("noise_px must be nonnegative")
    if not 0.0 <= outlier_frac <= 1.0:
        raise ValueError("outlier_frac must be in [0, 1]")
    rng = np.random.default_rng(seed)
    out = flow.flow.copy()
    valid = flow.valid.copy()
    vs, us = np.nonzero(valid)
    n = len(us)
    if n == 0:
        return FlowField(out, valid)
    if noise_px > 0:
        out[vs, us] += rng.normal(0.0, noise_px, (n, 2))
    is_outlier = rng.random(n) < outlier_frac
    if occlusion_mask is not None:
        is_outlier |= np.asarray(occlusion_mask, dtype=bool)[vs, us]
    k = int(is_outlier.sum())
    if k:
        out[vs[is_outlier], us[is_outlier]] = rng.uniform(
            -_OUTLIER_RANGE, _OUTLIER_RANGE, (k, 2)
        )
    return FlowField(out, valid)


# ---------------------------------------------------------------------------
# Upsampling
# ---------------------------------------------------------------------------


def center_upsample_mask(h: int, w: int, factor: int) -> UpsampleMask:
    """One-hot masks selecting the center neighbor (nearest-neighbor upsampling)."""
    weights = np.zeros((h, w, factor * factor, 9))
    weights[..., 4] = 1.0
    return UpsampleMask(weights, factor)


_MASK_CACHE: dict[tuple[int, int, int], "UpsampleMask"] = {}


def bilinear_upsample_mask(h: int, w: int, factor: int) -> UpsampleMask:
    """Convex weights reproducing bilinear interpolation on the aligned grid
    (fine center (i + 0.5)/factor - 0.5 in coarse coordinates). Cached;
    treat the returned weights as read-only."""
    key = (h, w, factor)
    if key in _MASK_CACHE:
        return _MASK_CACHE[key]
    weights = np.zeros((h, w, factor * factor, 9))
    for a in range(factor):
        for b in range(factor):
            # Offset of this fine sample from its parent coarse center.
            dy = (a + 0.5) / factor - 0.5
            dx = (b + 0.5) / factor - 0.5
            y0, x0 = int(np.floor(dy)), int(np.floor(dx))
            fy, fx = dy - y0, dx - x0
            for (oy, ox, wgt) in [
                (y0, x0, (1 - fy) * (1 - fx)),
                (y0, x0 + 1, (1 - fy) * fx),
                (y0 + 1, x0, fy * (1 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ]:
                weights[:, :, a * factor + b, (oy + 1) * 3 + (ox + 1)] += wgt
    mask = UpsampleMask(weights, factor)
    _MASK_CACHE[key] = mask
    return mask


def _gather_neighbors(arr: np.ndarray) -> np.ndarray:
    """Stack the 3x3 neighborhood (replicate-padded) of a (h, w, C) array
    into (h, w, 9, C)."""
    h, w = arr.shape[:2]
    padded = np.pad(arr, ((1, 1), (1, 1)) + ((0, 0),) * (arr.ndim - 2), mode="edge")
    out = np.empty((h, w, 9) + arr.shape[2:], dtype=arr.dtype)
    k = 0
    for oy in range(3):
        for ox in range(3):
            out[:, :, k] = padded[oy : oy + h, ox : ox + w]
            k += 1
    return out


def convex_upsample(flow_coarse: FlowField, mask: UpsampleMask, factor: int) -> FlowField:
    """Upsample flow by taking, for each fine pixel, a convex combination of
    the 3x3 coarse neighbors, scaled by `factor` so displacements follow the
    resolution change. Fine validity replicates the coarse validity."""
    if factor != mask.factor:
        raise ValueError("factor does not match mask")
    h, w = flow_coarse.shape
    if mask.weights.shape[:2] != (h, w):
        raise ValueError("mask resolution does not match flow")
    neighbors = _gather_neighbors(flow_coarse.flow)  # (h, w, 9, 2)
    f2 = factor * factor
    fine = (mask.weights.reshape(h * w, f2, 9) @ neighbors.reshape(h * w, 9, 2)) * factor
    fine = fine.reshape(h, w, factor, factor, 2).transpose(0, 2, 1, 3, 4)
    fine = fine.reshape(h * factor, w * factor, 2)
    valid = np.repeat(np.repeat(flow_coarse.valid, factor, axis=0), factor, axis=1)
    return FlowField(fine, valid)


_BILINEAR_CACHE: dict[tuple[int, int, int], tuple] = {}


def bilinear_upsample(values: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling of a scalar map on the aligned grid (matches
    bilinear_upsample_mask)."""
    h, w = values.shape
    key = (h, w, factor)
    cached = _BILINEAR_CACHE.get(key)
    if cached is None:
        ys = (np.arange(h * factor) + 0.5) / factor - 0.5
        xs = (np.arange(w * factor) + 0.5) / factor - 0.5
        y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
        x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
        y1 = np.clip(y0 + 1, 0, h - 1)
        x1 = np.clip(x0 + 1, 0, w - 1)
        fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
        fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
        cached = (y0, x0, y1, x1, fy, fx)
        _BILINEAR_CACHE[key] = cached
    y0, x0, y1, x1, fy, fx = cached
    v00 = values[np.ix_(y0, x0)]
    v01 = values[np.ix_(y0, x1)]
    v10 = values[np.ix_(y1, x0)]
    v11 = values[np.ix_(y1, x1)]
    return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)


# ---------------------------------------------------------------------------
# Certainty ground truth via depth-warp consistency
# ---------------------------------------------------------------------------


def _bilinear_sample_depth(depth: np.ndarray, u, v):
    """Bilinear depth sample renormalized over valid (non-background)
    neighbors. Returns (values, valid)."""
    H, W = depth.shape
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    inb = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.clip(u, 0, W - 1)
    vc = np.clip(v, 0, H - 1)
    x0 = np.clip(np.floor(uc).astype(int), 0, W - 1)
    y0 = np.clip(np.floor(vc).astype(int), 0, H - 1)
    x1 = np.clip(x0 + 1, 0, W - 1)
    y1 = np.clip(y0 + 1, 0, H - 1)
    fx = uc - x0
    fy = vc - y0
    vals = np.stack([depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]])
    wgts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    ok = vals > 0
    wsum = (wgts * ok).sum(axis=0)
    valid = inb & (wsum > 1e-12)
    num = (wgts * ok * vals).sum(axis=0)
    out = np.where(valid, num / np.maximum(wsum, 1e-12), 0.0)
    return out, valid


def certainty_ground_truth(
    render: RenderOutput,
    gt_pose: Pose,
    target_depth: np.ndarray,
    camera: Camera,
    d_th: float,
) -> np.ndarray:
    """Binary co-visibility map: warp each rendered foreground pixel into the
    target view via gt_pose and mark it 1 where the warped depth agrees with
    the target depth within d_th (and the warp lands in bounds)."""
    if d_th <= 0:
        raise ValueError("d_th must be positive")
    H, W = render.depth.shape
    out = np.zeros((H, W), dtype=bool)
    vs, us = np.nonzero(render.mask)
    if len(us) == 0:
        return out
    px = np.stack([us, vs], axis=1).astype(float)
    X = lift(camera, render.pose, px, render.depth[vs, us])
    Y = gt_pose.transform(X)
    front = Y[:, 2] > 1e-9
    z = np.where(front, Y[:, 2], 1.0)
    u_t = camera.fx * Y[:, 0] / z + camera.cx
    v_t = camera.fy * Y[:, 1] / z + camera.cy
    d_t, d_valid = _bilinear_sample_depth(np.asarray(target_depth, float), u_t, v_t)
    consistent = front & d_valid & (np.abs(Y[:, 2] - d_t) < d_th)
    out[vs[consistent], us[consistent]] = True
    return out


def oracle_sensitivity(render: RenderOutput, camera: Camera, eps: float = 1e-3) -> np.ndarray:
    """Pose-sensitivity stand-in: per-pixel magnitude of the flow response to
    small pose perturbations (numerically estimated over the 6 tangent axes),
    normalized to [0, 1]. Highlights extremities and depth-varying regions."""
    from .geom import apply_left_increment

    H, W = render.depth.shape
    total = np.zeros((H, W))
    count = np.zeros((H, W))
    for k in range(6):
        d = np.zeros(6)
        d[k] = eps if k < 3 else eps * 0.1  # meters vs radians scales
        pert = apply_left_increment(render.pose, d[:3], d[3:])
        ff = pose_induced_flow(render, pert, camera)
        mag = np.linalg.norm(ff.flow, axis=-1)
        total += np.where(ff.valid, mag, 0.0)
        count += ff.valid
    sens = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    peak = sens.max()
    return sens / peak if peak > 0 else sens


# ---------------------------------------------------------------------------
# Correlation volumes
# ---------------------------------------------------------------------------


def build_correlation_volume(
    feat_a: np.ndarray, feat_b: np.ndarray, tile_rows: int | None = None
) -> CorrelationVolume:
    """All-pairs dot products C[p, q] = <feat_a(p), feat_b(q)>.

    `tile_rows` evaluates the volume in disjoint source-row blocks (the tiled
    contract for parallel workers); the result is independent of tiling.
    """
    A = np.asarray(feat_a, float)
    B = np.asarray(feat_b, float)
    if A.shape != B.shape or A.ndim != 3:
        raise ValueError("feature maps must share the same (H, W, D) shape")
    H, W, D = A.shape
    if tile_rows is None:
        values = np.einsum("ijd,kld->ijkl", A, B)
    else:
        values = np.empty((H, W, H, W))
        for r0 in range(0, H, tile_rows):
            r1 = min(r0 + tile_rows, H)
            values[r0:r1] = np.einsum("ijd,kld->ijkl", A[r0:r1], B)
    return CorrelationVolume(values)


def shape_constraint_lookup(
    volume: CorrelationVolume, induced_flow: FlowField, radius: int
) -> np.ndarray:
    """Sample each source pixel's correlation map on the (2r+1)^2 grid
    centered at the pose-induced target position. Out-of-bounds (and invalid
    flow) samples read 0. Returns (H, W, (2r+1)^2)."""
    H1, W1, H2, W2 = volume.values.shape
    if induced_flow.shape != (H1, W1):
        raise ValueError("flow resolution must match the volume source grid")
    k = 2 * radius + 1
    out = np.zeros((H1, W1, k * k))
    vs, us = np.nonzero(induced_flow.valid)
    if len(us) == 0:
        return out
    centers_u = us + induced_flow.flow[vs, us, 0]
    centers_v = vs + induced_flow.flow[vs, us, 1]
    offs = np.arange(-radius, radius + 1, dtype=float)
    # (n, k, k) sample positions
    su = centers_u[:, None, None] + offs[None, None, :]
    sv = centers_v[:, None, None] + offs[None, :, None]
    maps = volume.values[vs, us]  # (n, H2, W2)
    x0 = np.floor(su).astype(int)
    y0 = np.floor(sv).astype(int)
    fx = su - x0
    fy = sv - y0
    acc = np.zeros_like(su)
    for dy, dx, wgt in [
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ]:
        yy = y0 + dy
        xx = x0 + dx
        inb = (yy >= 0) & (yy < H2) & (xx >= 0) & (xx < W2)
        yyc = np.clip(yy, 0, H2 - 1)
        xxc = np.clip(xx, 0, W2 - 1)
        vals = np.take_along_axis(
            maps.reshape(len(us), -1), (yyc * W2 + xxc).reshape(len(us), -1), axis=1
        ).reshape(su.shape)
        acc += wgt * vals * inb
    out[vs, us] = acc.reshape(len(us), k * k)
    return out


def hand_features(intensity: np.ndarray, level: int) -> np.ndarray:
    """Deterministic 9-channel correlation features at 1/4 (level 1) or 1/8
    (level 2) resolution: block-averaged intensity, first and second
    derivatives, and 3x3 window statistics."""
    if level not in (1, 2):
        raise ValueError("level must be 1 or 2")
    factor = 4 if level == 1 else 8
    img = np.asarray(intensity, float)
    H, W = img.shape
    if H % factor or W % factor:
        raise ValueError("image size must be divisible by the level factor")
    h, w = H // factor, W // factor
    base = img.reshape(h, factor, w, factor).mean(axis=(1, 3))

    pad = np.pad(base, 1, mode="edge")
    gx = (pad[1:-1, 2:] - pad[1:-1, :-2]) / 2.0
    gy = (pad[2:, 1:-1] - pad[:-2, 1:-1]) / 2.0
    gxx = pad[1:-1, 2:] - 2 * base + pad[1:-1, :-2]
    gyy = pad[2:, 1:-1] - 2 * base + pad[:-2, 1:-1]
    gmag = np.hypot(gx, gy)

    nb = _gather_neighbors(base[..., None])[..., 0]  # (h, w, 9)
    mean3 = nb.mean(axis=-1)
    std3 = nb.std(axis=-1)
    rng3 = nb.max(axis=-1) - nb.min(axis=-1)

    return np.stack([base, gx, gy, gmag, gxx, gyy, mean3, std3, rng3], axis=-1)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def write_flow(flow: FlowField, path) -> None:
    h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(_FLOW_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(flow.flow.astype("<f4").tobytes())
        fh.write(np.packbits(flow.valid.reshape(-1)).tobytes())


def read_flow(path) -> FlowField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FLOW_MAGIC:
            raise ValueError("not a flow file")
        h, w = struct.unpack("<II", fh.read(8))
        flow = np.frombuffer(fh.read(h * w * 2 * 4), dtype="<f4").reshape(h, w, 2)
        packed = np.frombuffer(fh.read(), dtype=np.uint8)
        valid = np.unpackbits(packed, count=h * w).reshape(h, w).astype(bool)
    return FlowField(flow.astype(float), valid)
