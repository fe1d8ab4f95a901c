"""Training losses as verified pure functions.

No optimizer or network lives here: these are the supervision terms (L1
endpoint flow error, disentangled point-matching pose loss, depth-consistency
certainty BCE, and the exponentially weighted per-iteration total) together
with analytic gradients so the end-to-end differentiability of the
pose-update layer can be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import Camera, Pose, rotation_from_euler
from .flowfield import FlowField
from .solver import (
    Correspondences2D3D,
    gn_step_input_jacobians,
    output_pose_jacobians,
)

_BCE_EPS = 1e-7


@dataclass
class LossWeights:
    gamma: float = 0.8
    alpha: float = 1.0
    beta: float = 0.1
    iterations: int = 8

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")


def flow_epe_loss(pred: FlowField, gt: FlowField) -> float:
    """Mean L1 endpoint error |du| + |dv| over the valid-pixel intersection."""
    if pred.shape != gt.shape:
        raise ValueError("flow resolution mismatch")
    both = pred.valid & gt.valid
    if not both.any():
        raise ValueError("empty valid intersection")
    diff = np.abs(pred.flow[both] - gt.flow[both])
    return float(diff.sum(axis=-1).mean())


def point_matching_distance(p1: Pose, p2: Pose, points, norm: str = "l1") -> float:
    """Mean distance between the two transforms of the model points.

    The per-point distance is the L1 norm of the 3-vector difference by
    default; an L2 toggle is provided since conventions differ.
    """
    pts = np.asarray(points, float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("points must be non-empty")
    d = p1.transform(pts) - p2.transform(pts)
    if norm == "l1":
        per = np.abs(d).sum(axis=1)
    elif norm == "l2":
        per = np.linalg.norm(d, axis=1)
    else:
        raise ValueError("norm must be 'l1' or 'l2'")
    return float(per.mean())


def _hybrid(rotation_from: Pose, txy_from: Pose, tz_from: Pose) -> Pose:
    t = np.array(
        [txy_from.translation[0], txy_from.translation[1], tz_from.translation[2]]
    )
    return Pose(rotation_from.rotation, t)


def disentangled_pose_loss(pred: Pose, gt: Pose, points, norm: str = "l1") -> float:
    """Sum of three hybrid point-matching terms penalizing the rotation, the
    image-plane translation, and the depth separately: each term replaces all
    but one factor of the prediction by the ground truth."""
    terms = disentangled_pose_loss_terms(pred, gt, points, norm)
    return float(sum(terms))


def disentangled_pose_loss_terms(pred: Pose, gt: Pose, points, norm: str = "l1"):
    """The three components (rotation, xy-translation, z-translation)."""
    rot_term = point_matching_distance(_hybrid(pred, gt, gt), gt, points, norm)
    xy_term = point_matching_distance(_hybrid(gt, pred, gt), gt, points, norm)
    z_term = point_matching_distance(_hybrid(gt, gt, pred), gt, points, norm)
    return rot_term, xy_term, z_term


def certainty_bce(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean binary cross entropy between a predicted certainty map (clamped
    to [eps, 1-eps]) and a binary target."""
    p = np.asarray(pred, float)
    g = np.asarray(gt, float)
    if p.shape != g.shape:
        raise ValueError("shape mismatch")
    p = np.clip(p, _BCE_EPS, 1.0 - _BCE_EPS)
    return float(np.mean(-(g * np.log(p) + (1.0 - g) * np.log(1.0 - p))))


def certainty_bce_grad(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Analytic gradient of certainty_bce w.r.t. the (clamped) prediction."""
    p = np.clip(np.asarray(pred, float), _BCE_EPS, 1.0 - _BCE_EPS)
    g = np.asarray(gt, float)
    return (-(g / p) + (1.0 - g) / (1.0 - p)) / p.size


def total_loss(per_iter, weights: LossWeights) -> float:
    """Exponentially weighted sum over the inner iterations:
    sum_j gamma^(j - N) (L_flow_j + alpha L_cert_j + beta L_pose_j), so the
    final iteration carries weight one."""
    n = weights.iterations
    if len(per_iter) != n:
        raise ValueError(f"expected {n} per-iteration loss triples")
    total = 0.0
    for j, (l_flow, l_cert, l_pose) in enumerate(per_iter, start=1):
        total += weights.gamma ** (j - n) * (
            l_flow + weights.alpha * l_cert + weights.beta * l_pose
        )
    return float(total)


def perturb_pose(gt: Pose, trans_std, rot_std_deg: float, seed: int = 0) -> Pose:
    """Compose the pose with Gaussian noise: per-axis Euler rotation noise
    (applied in the object frame) and additive translation noise."""
    std = np.asarray(trans_std, float).reshape(3)
    if np.any(std < 0) or rot_std_deg < 0:
        raise ValueError("stds must be nonnegative")
    rng = np.random.default_rng(seed)
    eul = rng.normal(0.0, math.radians(rot_std_deg), 3)
    dt = rng.normal(0.0, 1.0, 3) * std
    return Pose(gt.rotation @ rotation_from_euler(eul), gt.translation + dt)


# ---------------------------------------------------------------------------
# End-to-end gradient chain through the Gauss-Newton pose update
# ---------------------------------------------------------------------------


def pose_loss_chain_gradients(
    corrs: Correspondences2D3D,
    camera: Camera,
    pose_in: Pose,
    gt: Pose,
    points,
    certainty: np.ndarray | None = None,
    sensitivity: np.ndarray | None = None,
):
    """Analytic gradient of disentangled_pose_loss(gn_step(...), gt) w.r.t.
    the flow entries and the confidence factors.

    The correspondence weights are treated as W = certainty * sensitivity;
    per the stop-gradient contract the certainty factor is a constant in the
    pose-loss path, so d_loss/d_certainty is identically zero while
    d_loss/d_sensitivity = certainty * d_loss/d_W.

    Returns (loss, d_flow (N, 2), d_sensitivity (N,), d_certainty (N,)).
    """
    pts = np.asarray(points, float).reshape(-1, 3)
    delta, d_delta_dF, d_delta_dw = gn_step_input_jacobians(corrs, camera, pose_in)
    dRx_domega, dt_domega, R_out, _ = output_pose_jacobians(pose_in, delta)
    from .geom import apply_left_increment

    pose_out = apply_left_increment(pose_in, delta[:3], delta[3:])
    loss = disentangled_pose_loss(pose_out, gt, pts)

    # dL/d(omega, v) of the three hybrid terms (L1 signs; valid a.e.).
    grad_delta = np.zeros(6)
    # Rotation term: mean_x |R_out x - R_gt x|_1 (translation fixed to gt).
    diff_rot = pts @ R_out.T - pts @ gt.rotation.T
    signs = np.sign(diff_rot)
    for x, s in zip(pts, signs):
        grad_delta[:3] += s @ dRx_domega(x) / len(pts)
    # Translation terms: |t_x - t*_x| + |t_y - t*_y| and |t_z - t*_z|.
    t_out = pose_out.translation
    dt_sign = np.sign(t_out - gt.translation)
    grad_t = dt_sign  # each axis contributes independently, mean over points is 1
    grad_delta[:3] += grad_t @ dt_domega
    grad_delta[3:] += grad_t

    d_flow = np.einsum("k,kni->ni", grad_delta, d_delta_dF)
    d_weights = np.einsum("k,kn->n", grad_delta, d_delta_dw)

    if certainty is None:
        certainty = np.ones(len(corrs.weights))
    d_sens = d_weights * np.asarray(certainty, float)
    d_cert = np.zeros_like(d_weights)  # stop-gradient on certainty
    return loss, d_flow, d_sens, d_cert


def add_error(p1: Pose, p2: Pose, points) -> float:
    """Average (L2) distance of model points between two poses; the internal
    convergence metric of the refinement traces."""
    pts = np.asarray(points, float).reshape(-1, 3)
    return float(np.linalg.norm(p1.transform(pts) - p2.transform(pts), axis=1).mean())
