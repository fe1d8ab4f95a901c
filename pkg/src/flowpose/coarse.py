"""Coarse pose hypothesis generation.

Scores a deterministic SO(3) grid with a pluggable scorer, fits a
Gaussian-mixture density over the Euler angles of the top-scoring rotations,
resamples the same number of rotations from that density, and returns the
best-scoring hypotheses of the combined pool. The whole procedure performs
exactly 2M renders for a grid of size M.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geom import (
    Camera,
    Pose,
    euler_from_rotation,
    quaternion_multiply,
    quaternion_to_rotation,
    rotation_from_euler,
    rotation_geodesic_distance,
    wrap_angle,
)
from .mesh import Mesh
from .render import BBox, RenderOutput, adjust_intrinsics, rasterize, translation_from_bbox

# score(observation, render) -> float, higher is better; must be
# deterministic for fixed inputs.
Scorer = Callable[[object, RenderOutput], float]

DEFAULT_SIGMA = math.radians(15.0)
DEFAULT_CROP = 224


@dataclass
class Hypothesis:
    pose: Pose
    score: float
    provenance: str  # grid | gmm | refined

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("hypothesis score must be finite")
        if self.provenance not in ("grid", "gmm", "refined"):
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass
class RotationGMM:
    """Equal-weight Gaussian mixture over intrinsic Z-Y-X Euler angles with a
    shared isotropic covariance sigma^2 I, wrapped onto [-pi, pi)^3."""

    means: np.ndarray  # (k, 3) Euler angles
    sigma: float

    def __post_init__(self):
        self.means = np.asarray(self.means, float).reshape(-1, 3)
        if len(self.means) < 1:
            raise ValueError("mixture needs at least one component")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def k(self) -> int:
        return len(self.means)

    def density(self, euler) -> float:
        """Wrapped-normal mixture density at a point of [-pi, pi)^3."""
        x = np.asarray(euler, float)
        total = 0.0
        wraps = np.arange(-3, 4) * 2.0 * math.pi
        for mu in self.means:
            per_dim = np.zeros(3)
            for d in range(3):
                z = (x[d] - mu[d] + wraps) / self.sigma
                per_dim[d] = np.exp(-0.5 * z**2).sum() / (
                    self.sigma * math.sqrt(2 * math.pi)
                )
            total += per_dim.prod()
        return total / self.k


def super_fibonacci_rotations(count: int) -> np.ndarray:
    """Deterministic low-discrepancy SO(3) sample (super-Fibonacci spiral),
    left-translated so the first element is exactly the identity. Returns
    (count, 3, 3)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    phi = math.sqrt(2.0)
    psi = 1.533751168755204288118041  # positive root of x^4 = x + 4
    quats = np.empty((count, 4))
    for i in range(count):
        s = i + 0.5
        t = s / count
        d = 2.0 * math.pi * s
        r = math.sqrt(t)
        big_r = math.sqrt(1.0 - t)
        alpha = d / phi
        beta = d / psi
        quats[i] = [
            r * math.sin(alpha),
            r * math.cos(alpha),
            big_r * math.sin(beta),
            big_r * math.cos(beta),
        ]
    # Left-translate by the inverse of the first quaternion; coverage is
    # invariant and the grid then always contains the identity.
    q0 = quats[0]
    q0_inv = np.array([q0[0], -q0[1], -q0[2], -q0[3]])
    return np.stack(
        [quaternion_to_rotation(quaternion_multiply(q0_inv, q)) for q in quats]
    )


def rotation_grid(count: int) -> list[np.ndarray]:
    """Deterministic list of `count` rotations covering SO(3); element 0 is
    the identity."""
    return list(super_fibonacci_rotations(count))


def fit_gmm(top_rotations, sigma: float = DEFAULT_SIGMA) -> RotationGMM:
    """One equal-weight component per rotation, centered at its Euler angles,
    shared isotropic covariance sigma^2 I."""
    if len(top_rotations) == 0:
        raise ValueError("need at least one rotation")
    means = np.stack([euler_from_rotation(R) for R in top_rotations])
    return RotationGMM(means, sigma)


def sample_gmm(gmm: RotationGMM, count: int, seed: int = 0) -> list[np.ndarray]:
    """Draw rotations by picking a component uniformly and sampling its
    Gaussian in the universal cover, wrapping angles to [-pi, pi)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, gmm.k, size=count)
    eulers = gmm.means[comp] + rng.normal(0.0, gmm.sigma, (count, 3))
    eulers = wrap_angle(eulers)
    return [rotation_from_euler(e) for e in eulers]


def silhouette_iou_scorer(observation_mask, render: RenderOutput) -> float:
    """Intersection-over-union of the observed and rendered masks."""
    obs = np.asarray(observation_mask, dtype=bool)
    if obs.shape != render.mask.shape:
        raise ValueError("mask resolution mismatch")
    inter = np.logical_and(obs, render.mask).sum()
    union = np.logical_or(obs, render.mask).sum()
    return float(inter) / float(union) if union else 0.0


def oracle_geodesic_scorer(gt_pose: Pose, render: RenderOutput) -> float:
    """Negative geodesic distance to the ground-truth rotation (oracle)."""
    return -rotation_geodesic_distance(render.pose.rotation, gt_pose.rotation)


def make_oracle_add_scorer(points: np.ndarray) -> Scorer:
    """Scorer returning the negative mean 3D point distance to the observed
    ground-truth pose."""
    pts = np.asarray(points, float)

    def score(gt_pose: Pose, render: RenderOutput) -> float:
        d = np.linalg.norm(render.pose.transform(pts) - gt_pose.transform(pts), axis=1)
        return -float(d.mean())

    return score


def _score_rotations(
    rotations,
    provenance: str,
    observation,
    mesh: Mesh,
    bbox: BBox,
    camera: Camera,
    crop_camera: Camera,
    scorer: Scorer,
    render_fn,
) -> list[Hypothesis]:
    hyps = []
    for R in rotations:
        t = translation_from_bbox(mesh, bbox, camera, R)
        pose = Pose(R, t)
        render = render_fn(mesh, pose, crop_camera)
        hyps.append(Hypothesis(pose, float(scorer(observation, render)), provenance))
    return hyps


def grid_estimate(
    observation,
    mesh: Mesh,
    bbox: BBox,
    camera: Camera,
    scorer: Scorer,
    count: int,
    n: int,
    crop_size: int = DEFAULT_CROP,
    render_fn=rasterize,
) -> list[Hypothesis]:
    """Baseline strategy: score `count` grid rotations, return the top n."""
    crop_camera = adjust_intrinsics(camera, bbox, crop_size)
    hyps = _score_rotations(
        rotation_grid(count), "grid", observation, mesh, bbox, camera, crop_camera,
        scorer, render_fn,
    )
    return _top_n(hyps, n)


def coarse_estimate(
    observation,
    mesh: Mesh,
    bbox: BBox,
    camera: Camera,
    scorer: Scorer,
    M: int,
    k: int,
    n: int,
    sigma: float = DEFAULT_SIGMA,
    seed: int = 0,
    crop_size: int = DEFAULT_CROP,
    render_fn=rasterize,
) -> list[Hypothesis]:
    """Grid-then-resample hypothesis search (exactly 2M renders).

    Scores M grid rotations, fits the mixture to the Euler angles of the top
    k, samples M more rotations from it, scores those, and returns the best n
    of all 2M, sorted by score (ties break to the lower index).
    """
    if not (M >= k >= 1):
        raise ValueError("require M >= k >= 1")
    if n > 2 * M:
        raise ValueError("n must be at most 2M")
    crop_camera = adjust_intrinsics(camera, bbox, crop_size)
    grid_hyps = _score_rotations(
        rotation_grid(M), "grid", observation, mesh, bbox, camera, crop_camera,
        scorer, render_fn,
    )
    top_k = _top_n(grid_hyps, k)
    gmm = fit_gmm([h.pose.rotation for h in top_k], sigma)
    sampled = sample_gmm(gmm, M, seed)
    gmm_hyps = _score_rotations(
        sampled, "gmm", observation, mesh, bbox, camera, crop_camera,
        scorer, render_fn,
    )
    return _top_n(grid_hyps + gmm_hyps, n)


def _top_n(hyps: list[Hypothesis], n: int) -> list[Hypothesis]:
    order = sorted(range(len(hyps)), key=lambda i: (-hyps[i].score, i))
    return [hyps[i] for i in order[:n]]
