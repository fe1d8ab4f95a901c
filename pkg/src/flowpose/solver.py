"""Differentiable pose solvers.

Weighted reprojection PnP minimizing

    (1/2) sum_i || w_i * (pi(R x_i + t) - (p_i + F_i)) ||^2

via damped Levenberg-Marquardt steps followed by one undamped Gauss-Newton
step, plus weighted Kabsch and RANSAC-Kabsch for 3D-3D alignment.

The pose is parameterized locally by a left-applied increment
(R, t) <- (exp(w^) R, exp(w^) t + v); analytic Jacobians of the Gauss-Newton
update with respect to the flow and the weights are provided in closed
(implicit-function) form so the update can serve as a verified gradient
carrier without framework autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import (
    Camera,
    Pose,
    apply_left_increment,
    skew,
    so3_exp,
    so3_left_jacobian,
)

_MIN_DEPTH = 1e-9
_LM_LAMBDA0 = 1e-3
_LM_LAMBDA_MAX = 1e12


@dataclass
class Correspondences2D3D:
    """Object-space points, their source pixels, flow displacements to the
    target image, and per-correspondence confidence weights."""

    object_points: np.ndarray  # (N, 3) meters
    pixels: np.ndarray  # (N, 2)
    flow: np.ndarray  # (N, 2) pixels
    weights: np.ndarray  # (N,) in [0, 1]

    def __post_init__(self):
        self.object_points = np.asarray(self.object_points, float).reshape(-1, 3)
        self.pixels = np.asarray(self.pixels, float).reshape(-1, 2)
        self.flow = np.asarray(self.flow, float).reshape(-1, 2)
        self.weights = np.asarray(self.weights, float).reshape(-1)
        n = len(self.object_points)
        if not (len(self.pixels) == len(self.flow) == len(self.weights) == n):
            raise ValueError("correspondence arrays must have equal length")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and nonnegative")

    @property
    def targets(self) -> np.ndarray:
        return self.pixels + self.flow


@dataclass
class Correspondences3D3D:
    """3D-3D pairs: source points in the render's camera space, target points
    back-projected from observed depth, with per-pair certainty."""

    source: np.ndarray
    target: np.ndarray
    certainty: np.ndarray

    def __post_init__(self):
        self.source = np.asarray(self.source, float).reshape(-1, 3)
        self.target = np.asarray(self.target, float).reshape(-1, 3)
        self.certainty = np.asarray(self.certainty, float).reshape(-1)
        if not (len(self.source) == len(self.target) == len(self.certainty)):
            raise ValueError("correspondence arrays must have equal length")


@dataclass
class SolveReport:
    costs: list = field(default_factory=list)  # accepted cost after each step, px^2
    lambdas: list = field(default_factory=list)  # damping value per accepted step
    converged: bool = False
    singular: bool = False
    dropped_behind: int = 0  # points excluded for non-positive depth


def _residual_jacobian(corrs: Correspondences2D3D, camera: Camera, pose: Pose, center=None):
    """Unweighted residuals e (N,2), Jacobians J (N,2,6) wrt the increment
    (omega, v), and the front-of-camera mask.

    With `center` c the increment rotates about c instead of the camera
    origin: Y' = exp(w^)(Y - c) + c + v, so dY/domega = -[Y - c]x. The
    centered parameterization is used by the detached LM iterations for
    conditioning; the default (c = 0) is the plain left increment.
    """
    Y = corrs.object_points @ pose.rotation.T + pose.translation
    front = Y[:, 2] > _MIN_DEPTH
    z = np.where(front, Y[:, 2], 1.0)
    u = camera.fx * Y[:, 0] / z + camera.cx
    v = camera.fy * Y[:, 1] / z + camera.cy
    e = np.stack([u, v], axis=1) - corrs.targets

    # d pi / d Y
    J_pi = np.zeros((len(Y), 2, 3))
    J_pi[:, 0, 0] = camera.fx / z
    J_pi[:, 0, 2] = -camera.fx * Y[:, 0] / z**2
    J_pi[:, 1, 1] = camera.fy / z
    J_pi[:, 1, 2] = -camera.fy * Y[:, 1] / z**2

    Yc = Y if center is None else Y - center
    # J = J_pi @ [-[Yc]x | I], written out to avoid the (N, 3, 6) intermediate.
    a = J_pi[:, 0, 0]
    b = J_pi[:, 0, 2]
    c = J_pi[:, 1, 1]
    d = J_pi[:, 1, 2]
    x, y, zc = Yc[:, 0], Yc[:, 1], Yc[:, 2]
    J = np.empty((len(Y), 2, 6))
    J[:, 0, 0] = b * y
    J[:, 0, 1] = a * zc - b * x
    J[:, 0, 2] = -a * y
    J[:, 0, 3] = a
    J[:, 0, 4] = 0.0
    J[:, 0, 5] = b
    J[:, 1, 0] = -c * zc + d * y
    J[:, 1, 1] = -d * x
    J[:, 1, 2] = c * x
    J[:, 1, 3] = 0.0
    J[:, 1, 4] = c
    J[:, 1, 5] = d
    return e, J, front


def _residuals(corrs: Correspondences2D3D, camera: Camera, pose: Pose):
    Y = corrs.object_points @ pose.rotation.T + pose.translation
    front = Y[:, 2] > _MIN_DEPTH
    z = np.where(front, Y[:, 2], 1.0)
    u = camera.fx * Y[:, 0] / z + camera.cx
    v = camera.fy * Y[:, 1] / z + camera.cy
    e = np.stack([u, v], axis=1) - corrs.targets
    return e, front


def reprojection_cost(corrs: Correspondences2D3D, camera: Camera, pose: Pose) -> float:
    """Half the sum of squared weighted reprojection errors (px^2); points
    that land behind the camera are excluded."""
    e, front = _residuals(corrs, camera, pose)
    w2 = corrs.weights**2
    return 0.5 * float(np.sum(w2[front] * np.sum(e[front] ** 2, axis=1)))


def _normal_equations(corrs, camera, pose, center=None):
    e, J, front = _residual_jacobian(corrs, camera, pose, center)
    w2 = (corrs.weights**2) * front
    Jw = J * w2[:, None, None]
    Jf = J.reshape(-1, 6)
    H = Jw.reshape(-1, 6).T @ Jf
    g = Jw.reshape(-1, 6).T @ e.reshape(-1)
    return H, g, e, J, front


def _check_nondegenerate(corrs: Correspondences2D3D):
    if int(np.count_nonzero(corrs.weights > 0.0)) < 4:
        raise ValueError("degenerate: fewer than 4 positively weighted correspondences")


def lm_pnp(
    corrs: Correspondences2D3D,
    camera: Camera,
    init: Pose,
    lm_iters: int = 3,
    full_output: bool = False,
):
    """Damped LM minimization of the weighted reprojection cost.

    Each iteration re-linearizes once and retries the damped solve with
    lambda scaled x10 on reject, /10 on accept, so the accepted cost sequence
    is monotone non-increasing. The rotation increment is taken about the
    weighted centroid of the transformed points: this decouples rotation from
    translation and is what makes three steps enough to cross a ~40 degree
    basin. No gradient flows through this pose, so the internal
    parameterization is free. Returns the detached pose (and a SolveReport
    when full_output is set).
    """
    _check_nondegenerate(corrs)
    report = SolveReport()
    pose = init
    cost = reprojection_cost(corrs, camera, pose)
    lam = _LM_LAMBDA0
    w2 = corrs.weights**2
    for _ in range(lm_iters):
        Y = corrs.object_points @ pose.rotation.T + pose.translation
        center = (w2[:, None] * Y).sum(axis=0) / w2.sum()
        H, g, e, J, front = _normal_equations(corrs, camera, pose, center)
        report.dropped_behind = int(np.count_nonzero((corrs.weights > 0) & ~front))
        accepted = False
        while lam <= _LM_LAMBDA_MAX:
            A = H + lam * np.diag(np.diag(H))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            # Convert the centered increment to a plain left increment:
            # t' = E (t - c) + c + v  =  E t + (v + (I - E) c).
            E = so3_exp(delta[:3])
            v_plain = delta[3:] + center - E @ center
            candidate = apply_left_increment(pose, delta[:3], v_plain)
            new_cost = reprojection_cost(corrs, camera, candidate)
            if new_cost < cost:
                pose, cost = candidate, new_cost
                report.costs.append(cost)
                report.lambdas.append(lam)
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            if not np.all(np.isfinite(np.diag(H))) or np.linalg.matrix_rank(H) < 6:
                report.singular = True
                if full_output:
                    return pose, report
                raise ValueError(
                    f"singular normal equations (damping trace: {report.lambdas})"
                )
            # At a stationary point no damped step improves; stop early.
            break
    report.converged = True
    if full_output:
        return pose, report
    return pose


def gn_step(
    corrs: Correspondences2D3D,
    camera: Camera,
    pose: Pose,
    full_output: bool = False,
):
    """One undamped Gauss-Newton update from `pose` (the step that carries
    gradients). A singular system degrades gracefully to the input pose."""
    _check_nondegenerate(corrs)
    report = SolveReport()
    H, g, e, J, front = _normal_equations(corrs, camera, pose)
    report.dropped_behind = int(np.count_nonzero((corrs.weights > 0) & ~front))
    try:
        delta = np.linalg.solve(H, -g)
    except np.linalg.LinAlgError:
        delta = None
    if delta is None or not np.all(np.isfinite(delta)):
        report.singular = True
        out = pose
    else:
        out = apply_left_increment(pose, delta[:3], delta[3:])
        report.converged = True
    report.costs.append(reprojection_cost(corrs, camera, out))
    if full_output:
        return out, report
    return out


def solve_pnp(
    corrs: Correspondences2D3D,
    camera: Camera,
    init: Pose,
    lm_iters: int = 3,
    full_output: bool = False,
):
    """The full pose-update pipeline: lm_iters damped LM steps producing the
    detached pose, then one Gauss-Newton step."""
    if full_output:
        detached, rep = lm_pnp(corrs, camera, init, lm_iters, full_output=True)
        out, rep2 = gn_step(corrs, camera, detached, full_output=True)
        rep.costs += rep2.costs
        rep.singular = rep.singular or rep2.singular
        return out, rep
    detached = lm_pnp(corrs, camera, init, lm_iters)
    return gn_step(corrs, camera, detached)


def gn_step_input_jacobians(corrs: Correspondences2D3D, camera: Camera, pose: Pose):
    """Closed-form Jacobians of the GN update delta = -H^-1 g with respect to
    the flow entries and the weights.

    Returns (delta, d_delta/d_flow (6, N, 2), d_delta/d_weights (6, N)).
    The update coordinates delta are the (omega, v) increment applied at
    `pose`, i.e. exactly left_increment_coords(pose, gn_step(...)).
    """
    H, g, e, J, front = _normal_equations(corrs, camera, pose)
    Hinv = np.linalg.inv(H)
    delta = -Hinv @ g
    w = corrs.weights
    w2f = (w**2) * front

    # Flow enters the residual as e = pi - (p + F): d g / d F_i = -w_i^2 J_i^T,
    # and H does not depend on F.
    dg_dF = -np.einsum("n,nik->kni", w2f, J)  # (6, N, 2)
    d_delta_dF = -np.einsum("kl,lni->kni", Hinv, dg_dF)

    # d delta / d w_i = -2 w_i H^-1 J_i^T (e_i + J_i delta)
    r_lin = e + np.einsum("nik,k->ni", J, delta)
    JT_r = np.einsum("nik,ni->nk", J, r_lin)  # (N, 6)
    d_delta_dw = -2.0 * np.einsum("kl,n,nl->kn", Hinv, w * front, JT_r)
    return delta, d_delta_dF, d_delta_dw


def output_pose_jacobians(pose_in: Pose, delta: np.ndarray):
    """Derivatives of the updated pose components wrt the increment.

    Returns (d(R_out x)/d_omega as a function factory, dt_out/d_omega (3,3),
    dt_out/d_v = I). With R_out = exp(w^) R_in and t_out = exp(w^) t_in + v:

        d(R_out x)/d_omega = -[R_out x]^ J_l(omega)
        d(t_out)/d_omega   = -[exp(w^) t_in]^ J_l(omega)
    """
    omega = delta[:3]
    Jl = so3_left_jacobian(omega)
    E = so3_exp(omega)
    R_out = E @ pose_in.rotation
    dt_domega = -skew(E @ pose_in.translation) @ Jl

    def dRx_domega(x):
        return -skew(R_out @ np.asarray(x, float)) @ Jl

    return dRx_domega, dt_domega, R_out, E @ pose_in.translation


# ---------------------------------------------------------------------------
# 3D-3D alignment
# ---------------------------------------------------------------------------


def kabsch(src, dst, weights=None) -> Pose:
    """Weighted least-squares rigid transform T with T(src) ~= dst.

    SVD of the weighted cross-covariance with determinant correction, so the
    result is always a proper rotation.
    """
    src = np.asarray(src, float).reshape(-1, 3)
    dst = np.asarray(dst, float).reshape(-1, 3)
    if weights is None:
        weights = np.ones(len(src))
    w = np.asarray(weights, float).reshape(-1)
    if len(src) != len(dst) or len(src) != len(w):
        raise ValueError("point arrays must have equal length")
    pos = w > 0
    if int(pos.sum()) < 3:
        raise ValueError("degenerate: fewer than 3 weighted points")
    wsum = w.sum()
    mu_s = (w[:, None] * src).sum(axis=0) / wsum
    mu_d = (w[:, None] * dst).sum(axis=0) / wsum
    S = (w[:, None] * (src - mu_s)).T @ (dst - mu_d)
    U, sv, Vt = np.linalg.svd(S)
    # Collinear configurations leave the rotation about the line unconstrained.
    if sv[1] < 1e-12 * max(sv[0], 1e-300):
        raise ValueError("degenerate: collinear points")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = mu_d - R @ mu_s
    return Pose(R, t)


def ransac_kabsch(
    corrs: Correspondences3D3D,
    inlier_thresh: float,
    max_iters: int = 200,
    seed: int = 0,
):
    """RANSAC over minimal 3-point Kabsch fits, then a final refit on the
    consensus set. Returns (Pose, inlier mask); deterministic per seed."""
    src, dst = corrs.source, corrs.target
    n = len(src)
    if n < 3:
        raise ValueError("no consensus: fewer than 3 correspondences")
    rng = np.random.default_rng(seed)
    best_count = 0
    best_inliers = None
    for _ in range(max_iters):
        idx = rng.choice(n, size=3, replace=False)
        try:
            model = kabsch(src[idx], dst[idx])
        except ValueError:
            continue
        resid = np.linalg.norm(model.transform(src) - dst, axis=1)
        inliers = resid <= inlier_thresh
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None or best_count < 3:
        raise ValueError("no consensus")
    refit = kabsch(src[best_inliers], dst[best_inliers])
    resid = np.linalg.norm(refit.transform(src) - dst, axis=1)
    final_inliers = resid <= inlier_thresh
    if int(final_inliers.sum()) >= 3:
        refit = kabsch(src[final_inliers], dst[final_inliers])
    else:
        final_inliers = best_inliers
    return refit, final_inliers
