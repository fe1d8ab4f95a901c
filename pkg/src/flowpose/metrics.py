"""BOP-style pose-error functions (VSD, MSSD, MSPD) and Average Recall
aggregation, plus the estimate-record CSV formats used by the benchmark."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Camera, Pose, rotation_geodesic_distance
from .mesh import Mesh
from .render import rasterize

ESTIMATES_SCHEMA = "flowpose-estimates-v1"

# Default threshold grids (BOP convention): VSD tolerance taus at 5%..50% of
# the object diameter, correctness thresholds 0.05..0.5; MSSD thresholds at
# 5%..50% of the diameter; MSPD thresholds 5..50 px scaled by width/640.
VSD_TAU_FRACTIONS = tuple(np.arange(0.05, 0.51, 0.05))
VSD_THRESHOLDS = tuple(np.arange(0.05, 0.51, 0.05))
MSSD_FRACTIONS = tuple(np.arange(0.05, 0.51, 0.05))
MSPD_BASE_PX = tuple(np.arange(5.0, 50.1, 5.0))


@dataclass
class SymmetrySet:
    """Global symmetry rotations of an object; always contains the identity."""

    rotations: list = field(default_factory=list)

    def __post_init__(self):
        rots = [np.asarray(R, float) for R in self.rotations]
        if not any(np.allclose(R, np.eye(3), atol=1e-12) for R in rots):
            rots.insert(0, np.eye(3))
        for R in rots:
            if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
                raise ValueError("symmetry transforms must be orthonormal")
        self.rotations = rots

    def __iter__(self):
        return iter(self.rotations)

    def __len__(self):
        return len(self.rotations)


@dataclass
class PoseEstimateRecord:
    scene_id: int
    obj_id: int
    pose: Pose
    score: float = 1.0
    runtime: float = 0.0


def _distance_image(depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Depth map to distance-from-camera-center map (zeros preserved)."""
    H, W = depth.shape
    us, vs = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    ray = np.sqrt(
        ((us - camera.cx) / camera.fx) ** 2 + ((vs - camera.cy) / camera.fy) ** 2 + 1.0
    )
    return depth * ray


def _visibility(dist_render: np.ndarray, dist_obs: np.ndarray, delta: float) -> np.ndarray:
    """A rendered pixel is visible when the observed distance agrees within
    delta or the observation is missing there."""
    rendered = dist_render > 0
    missing = dist_obs <= 0
    return rendered & (missing | (np.abs(dist_render - dist_obs) < delta))


def vsd(
    est: Pose,
    gt: Pose,
    mesh: Mesh,
    camera: Camera,
    observed_depth: np.ndarray,
    taus,
    delta: float,
    render_fn=rasterize,
) -> list[float]:
    """Visible surface discrepancy: renders distance maps at the estimated
    and ground-truth poses, restricts to visibility (w.r.t. the observed
    depth, tolerance delta), and for each tau reports the fraction of the
    visibility union where the maps differ by >= tau or only one is visible."""
    d_est = render_fn(mesh, est, camera).depth
    d_gt = render_fn(mesh, gt, camera).depth
    dist_est = _distance_image(d_est, camera)
    dist_gt = _distance_image(d_gt, camera)
    dist_obs = _distance_image(np.asarray(observed_depth, float), camera)

    vis_est = _visibility(dist_est, dist_obs, delta)
    vis_gt = _visibility(dist_gt, dist_obs, delta)
    union = vis_est | vis_gt
    inter = vis_est & vis_gt
    n_union = int(union.sum())
    if n_union == 0:
        return [1.0 for _ in taus]
    n_only_one = n_union - int(inter.sum())
    diffs = np.abs(dist_est[inter] - dist_gt[inter])
    errors = []
    for tau in taus:
        n_bad = int((diffs >= tau).sum()) + n_only_one
        errors.append(n_bad / n_union)
    return errors


def mssd(est: Pose, gt: Pose, points, sym: SymmetrySet) -> float:
    """Maximum symmetry-aware surface distance (meters)."""
    pts = np.asarray(points, float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("points must be non-empty")
    est_pts = est.transform(pts)
    best = math.inf
    for S in sym:
        gt_s = Pose(gt.rotation @ S, gt.translation)
        d = np.linalg.norm(est_pts - gt_s.transform(pts), axis=1).max()
        best = min(best, float(d))
    return best


def mspd(est: Pose, gt: Pose, camera: Camera, points, sym: SymmetrySet) -> float:
    """Maximum symmetry-aware projection distance (pixels). Points behind the
    camera are excluded; raises if all are."""
    pts = np.asarray(points, float).reshape(-1, 3)
    est_cam = est.transform(pts)
    front_est = est_cam[:, 2] > 0
    best = math.inf
    any_valid = False
    for S in sym:
        gt_s = Pose(gt.rotation @ S, gt.translation)
        gt_cam = gt_s.transform(pts)
        ok = front_est & (gt_cam[:, 2] > 0)
        if not ok.any():
            continue
        any_valid = True
        pe = _project_nocheck(camera, est_cam[ok])
        pg = _project_nocheck(camera, gt_cam[ok])
        d = np.linalg.norm(pe - pg, axis=1).max()
        best = min(best, float(d))
    if not any_valid:
        raise ValueError("behind camera: no projectable points")
    return best


def _project_nocheck(camera: Camera, pts: np.ndarray) -> np.ndarray:
    z = pts[:, 2]
    return np.stack(
        [camera.fx * pts[:, 0] / z + camera.cx, camera.fy * pts[:, 1] / z + camera.cy],
        axis=1,
    )


@dataclass
class ArReport:
    ar_vsd: float
    ar_mssd: float
    ar_mspd: float

    @property
    def ar(self) -> float:
        return (self.ar_vsd + self.ar_mssd + self.ar_mspd) / 3.0


def recall_grid(errors: np.ndarray, thresholds) -> float:
    """Mean over thresholds of the fraction of errors strictly below each."""
    errs = np.asarray(errors, float)
    ths = np.asarray(thresholds, float)
    if len(ths) == 0:
        raise ValueError("threshold grid must be non-empty")
    if errs.size == 0:
        return 0.0
    return float(np.mean([(errs < t).mean() for t in ths]))


def average_recall(
    vsd_errors,
    mssd_errors,
    mspd_errors,
    diameter: float,
    image_width: int,
    vsd_thresholds=VSD_THRESHOLDS,
    mssd_fractions=MSSD_FRACTIONS,
    mspd_base_px=MSPD_BASE_PX,
) -> ArReport:
    """Average recall per the three error functions.

    vsd_errors: (n_est, n_tau) array, a recall per (tau, threshold) pair;
    mssd_errors / mspd_errors: (n_est,) arrays against diameter-relative and
    width-scaled pixel thresholds respectively.
    """
    vsd_arr = np.asarray(vsd_errors, float)
    if vsd_arr.ndim != 2:
        raise ValueError("vsd errors must be (n_estimates, n_tau)")
    per_tau = [recall_grid(vsd_arr[:, j], vsd_thresholds) for j in range(vsd_arr.shape[1])]
    ar_vsd = float(np.mean(per_tau))
    ar_mssd = recall_grid(mssd_errors, [f * diameter for f in mssd_fractions])
    ar_mspd = recall_grid(mspd_errors, [p * image_width / 640.0 for p in mspd_base_px])
    return ArReport(ar_vsd=ar_vsd, ar_mssd=ar_mssd, ar_mspd=ar_mspd)


def rotation_translation_errors(est: Pose, gt: Pose) -> tuple[float, float]:
    """Geodesic rotation error (rad) and Euclidean translation error (m)."""
    return (
        rotation_geodesic_distance(est.rotation, gt.rotation),
        float(np.linalg.norm(est.translation - gt.translation)),
    )


# ---------------------------------------------------------------------------
# Estimate record CSV (R row-major, t in millimeters)
# ---------------------------------------------------------------------------


def write_estimates_csv(records: list[PoseEstimateRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {ESTIMATES_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["scene_id", "obj_id", "score"]
            + [f"r{i}{j}" for i in range(3) for j in range(3)]
            + ["tx_mm", "ty_mm", "tz_mm", "time"]
        )
        for rec in sorted(records, key=lambda r: (r.scene_id, r.obj_id)):
            R = rec.pose.rotation.reshape(-1)
            t = rec.pose.translation * 1000.0
            writer.writerow(
                [rec.scene_id, rec.obj_id, f"{rec.score:.9g}"]
                + [f"{x:.12g}" for x in R]
                + [f"{x:.9g}" for x in t]
                + [f"{rec.runtime:.9g}"]
            )


def read_estimates_csv(path) -> list[PoseEstimateRecord]:
    with open(path, "r", newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# schema:"):
            raise ValueError("missing schema header")
        schema = first.split(":", 1)[1].strip()
        if schema != ESTIMATES_SCHEMA:
            raise ValueError(f"unknown schema version: {schema}")
        reader = csv.DictReader(fh)
        records = []
        for row in reader:
            R = np.array([float(row[f"r{i}{j}"]) for i in range(3) for j in range(3)])
            t = np.array([float(row["tx_mm"]), float(row["ty_mm"]), float(row["tz_mm"])])
            records.append(
                PoseEstimateRecord(
                    scene_id=int(row["scene_id"]),
                    obj_id=int(row["obj_id"]),
                    pose=Pose(R.reshape(3, 3), t / 1000.0),
                    score=float(row["score"]),
                    runtime=float(row["time"]),
                )
            )
    return records
