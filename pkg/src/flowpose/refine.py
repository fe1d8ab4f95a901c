"""Render-and-refine loops.

Each outer iteration renders the object once at the current pose, then runs a
cascade of inner updates over multi-scale levels (coarse to fine). An inner
update asks a pluggable provider for flow and confidence at the level
resolution (the stand-in for the recurrent network heads), convex-upsamples
the flow to the render resolution, lifts the foreground pixels to 2D-3D
correspondences, solves three damped LM steps plus one Gauss-Newton step, and
finally computes the pose-induced flow of the new pose for the next lookup.

RGB-D inputs get a RANSAC-Kabsch depth refinement after the inner loop of
every outer iteration, built from the last flow/certainty estimates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .geom import Camera, Pose, compose, lift, rotation_geodesic_distance
from .mesh import Mesh
from .render import RenderOutput, rasterize
from .flowfield import (
    FlowField,
    UpsampleMask,
    bilinear_upsample,
    bilinear_upsample_mask,
    convex_upsample,
    corrupt_flow,
    oracle_flow,
    pose_induced_flow,
    _bilinear_sample_depth,
)
from .solver import (
    Correspondences2D3D,
    Correspondences3D3D,
    gn_step,
    lm_pnp,
    ransac_kabsch,
)
from .losses import add_error


@dataclass
class RefinerConfig:
    """Knobs of the refinement loop. inner_iters must divide evenly across
    the cascade levels (N/2 per module for the default two levels)."""

    outer_iters: int = 5
    inner_iters: int = 8
    cascade_levels: int = 2
    flow_provider: str = "oracle"  # oracle | corrupted | self
    lookup_radius: int = 3
    n_hypotheses: int = 1
    depth_refine: bool = False
    certainty_threshold: float = 0.5
    render_size: int = 256
    max_correspondences: int = 3000
    early_stop: bool = False
    use_confidence: bool = True
    provider_noise_px: float = 0.0
    provider_outlier_frac: float = 0.0
    kabsch_inlier_thresh: float = 0.005
    kabsch_iters: int = 200
    lm_iters: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.inner_iters % self.cascade_levels != 0:
            raise ValueError("inner_iters must be divisible by cascade_levels")
        if self.render_size % 8 != 0:
            raise ValueError("render_size must be divisible by 8")

    @property
    def level_factors(self) -> tuple[int, ...]:
        """Downsampling factor per cascade level, coarse to fine. A single
        module runs at 1/8 resolution; two modules run 1/8 then 1/4."""
        if self.cascade_levels == 1:
            return (8,)
        return tuple(2 ** (self.cascade_levels + 1 - i) for i in range(self.cascade_levels))

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, source) -> "RefinerConfig":
        if isinstance(source, (str, bytes)) and "{" in str(source):
            data = json.loads(source)
        else:
            with open(source) as fh:
                data = json.load(fh)
        return cls(**data)


@dataclass
class Observation:
    """What the refiner may compare against: a silhouette mask, optional
    depth (enables RGB-D refinement), optional intensity image, and the
    occlusion mask of synthetic scenes (consumed by corrupted providers)."""

    mask: np.ndarray | None = None
    depth: np.ndarray | None = None
    intensity: np.ndarray | None = None
    occlusion: np.ndarray | None = None


@dataclass
class ProviderOutput:
    flow: FlowField  # level resolution, displacements in level pixels
    certainty: np.ndarray
    sensitivity: np.ndarray
    upsample_mask: UpsampleMask | None = None


@dataclass
class GenFlowState:
    """Mutable per-outer-iteration state visible to flow providers."""

    render: RenderOutput
    camera: Camera
    pose: Pose
    pixels: np.ndarray
    object_points: np.ndarray
    level_factor: int
    level_render: RenderOutput
    level_camera: Camera
    induced_flow: FlowField
    outer_index: int = 0
    inner_index: int = 0
    hyp_index: int = 0


def decimate_render(render: RenderOutput, factor: int) -> tuple[RenderOutput, Camera]:
    """Level view of a render: subsample depth/mask/intensity at the full-res
    pixels nearest to the level pixel centers, with the matching rescaled
    camera. No rasterization happens here."""
    H, W = render.depth.shape
    h, w = H // factor, W // factor
    rows = np.minimum((np.floor((np.arange(h) + 0.5) * factor)).astype(int), H - 1)
    cols = np.minimum((np.floor((np.arange(w) + 0.5) * factor)).astype(int), W - 1)
    cam = render.camera.rescaled(1.0 / factor)
    sub = np.ix_(rows, cols)
    level = RenderOutput(
        depth=render.depth[sub],
        mask=render.mask[sub],
        intensity=render.intensity[sub],
        camera=cam,
        pose=render.pose,
    )
    return level, cam


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(entropy=list(parts)).generate_state(1)[0])


def _dilate3(mask: np.ndarray) -> np.ndarray:
    """Binary 3x3 dilation."""
    m = np.asarray(mask, bool)
    out = m.copy()
    out[1:, :] |= m[:-1, :]
    out[:-1, :] |= m[1:, :]
    grown = out.copy()
    grown[:, 1:] |= out[:, :-1]
    grown[:, :-1] |= out[:, 1:]
    return grown


class OracleProvider:
    """Exact flow toward the ground-truth pose with full confidence."""

    def __init__(self, gt_pose: Pose):
        self.gt_pose = gt_pose

    def __call__(self, state: GenFlowState) -> ProviderOutput:
        flow = oracle_flow(state.level_render, self.gt_pose, state.level_camera)
        ones = flow.valid.astype(float)
        return ProviderOutput(flow=flow, certainty=ones, sensitivity=ones)


class CorruptedProvider:
    """Oracle flow degraded by Gaussian noise and gross outliers; pixels
    under the occlusion mask always receive outlier flow. Certainty is zero
    on occluded pixels unless `trust_occluded` forces it to one (the
    confidence-ablation variant)."""

    def __init__(
        self,
        gt_pose: Pose,
        noise_px: float = 0.0,
        outlier_frac: float = 0.0,
        occlusion_mask: np.ndarray | None = None,
        trust_occluded: bool = False,
        seed: int = 0,
    ):
        self.gt_pose = gt_pose
        self.noise_px = noise_px
        self.outlier_frac = outlier_frac
        self.occlusion_mask = occlusion_mask
        self.trust_occluded = trust_occluded
        self.seed = seed

    def _level_occlusion(self, state: GenFlowState) -> np.ndarray | None:
        if self.occlusion_mask is None:
            return None
        f = state.level_factor
        H, W = self.occlusion_mask.shape
        h, w = H // f, W // f
        rows = np.minimum((np.floor((np.arange(h) + 0.5) * f)).astype(int), H - 1)
        cols = np.minimum((np.floor((np.arange(w) + 0.5) * f)).astype(int), W - 1)
        return self.occlusion_mask[np.ix_(rows, cols)]

    def __call__(self, state: GenFlowState) -> ProviderOutput:
        clean = oracle_flow(state.level_render, self.gt_pose, state.level_camera)
        occ = self._level_occlusion(state)
        step_seed = _derive_seed(
            self.seed, state.hyp_index, state.outer_index, state.inner_index,
            state.level_factor,
        )
        flow = corrupt_flow(clean, self.noise_px, self.outlier_frac, occ, step_seed)
        sens = flow.valid.astype(float)
        cert = sens
        if occ is not None and not self.trust_occluded:
            # Zero certainty on the occluded cells dilated by one, matching
            # the 3x3 support of the convex upsampling so outlier flow cannot
            # leak into positively weighted pixels across the boundary.
            cert = np.where(_dilate3(occ), 0.0, sens)
        return ProviderOutput(flow=flow, certainty=cert, sensitivity=sens)


class SelfInducedProvider:
    """Returns the pose-induced flow of the current pose itself: zero
    innovation, so the refined pose is a fixed point."""

    def __call__(self, state: GenFlowState) -> ProviderOutput:
        flow = pose_induced_flow(state.level_render, state.pose, state.level_camera)
        ones = flow.valid.astype(float)
        return ProviderOutput(flow=flow, certainty=ones, sensitivity=ones)


def make_provider(config: RefinerConfig, gt_pose: Pose | None, observation: Observation | None = None, hyp_seed: int = 0):
    if config.flow_provider == "oracle":
        if gt_pose is None:
            raise ValueError("oracle provider needs the ground-truth pose")
        return OracleProvider(gt_pose)
    if config.flow_provider == "corrupted":
        if gt_pose is None:
            raise ValueError("corrupted provider needs the ground-truth pose")
        occ = observation.occlusion if observation is not None else None
        return CorruptedProvider(
            gt_pose,
            noise_px=config.provider_noise_px,
            outlier_frac=config.provider_outlier_frac,
            occlusion_mask=occ,
            trust_occluded=not config.use_confidence,
            seed=_derive_seed(config.seed, hyp_seed),
        )
    if config.flow_provider == "self":
        return SelfInducedProvider()
    raise ValueError(f"unknown flow provider {config.flow_provider!r}")


@dataclass
class RefineTrace:
    """Per-iteration record of one refinement run."""

    initial: Pose
    inner_poses: list = field(default_factory=list)  # [outer][inner] Pose
    outer_poses: list = field(default_factory=list)  # final pose per outer step
    inner_add: list = field(default_factory=list)  # ADD vs gt, when known
    outer_add: list = field(default_factory=list)
    flags: list = field(default_factory=list)  # (outer, inner, reason)
    render_count: int = 0

    @property
    def final_pose(self) -> Pose:
        return self.outer_poses[-1] if self.outer_poses else self.initial

    def to_records(self, scene_id: int) -> list[dict]:
        recs = []
        for k, poses in enumerate(self.inner_poses):
            for j, pose in enumerate(poses):
                rec = {
                    "scene_id": scene_id,
                    "outer": k,
                    "inner": j,
                    "rotation": pose.rotation.reshape(-1).tolist(),
                    "translation": pose.translation.tolist(),
                }
                if self.inner_add:
                    rec["add_m"] = self.inner_add[k][j]
                recs.append(rec)
        return recs


def _build_outer_state(
    render: RenderOutput,
    camera: Camera,
    pose: Pose,
    config: RefinerConfig,
    outer_index: int,
    hyp_index: int,
) -> GenFlowState | None:
    vs, us = np.nonzero(render.mask)
    if len(us) < 4:
        return None
    if len(us) > config.max_correspondences:
        sel = np.linspace(0, len(us) - 1, config.max_correspondences).astype(int)
        vs, us = vs[sel], us[sel]
    px = np.stack([us, vs], axis=1).astype(float)
    X = lift(camera, render.pose, px, render.depth[vs, us])
    factor = config.level_factors[0]
    level_render, level_camera = decimate_render(render, factor)
    return GenFlowState(
        render=render,
        camera=camera,
        pose=pose,
        pixels=px,
        object_points=X,
        level_factor=factor,
        level_render=level_render,
        level_camera=level_camera,
        induced_flow=pose_induced_flow(level_render, pose, level_camera),
        outer_index=outer_index,
        hyp_index=hyp_index,
    )


def _plausible_update(new_pose: Pose, render_pose: Pose) -> bool:
    """Inner updates refine within the neighborhood of the rendered pose; a
    solution that teleports the object (as a heavily corrupted fit can) is
    rejected so the refinement degrades gracefully instead of diverging."""
    if new_pose.translation[2] <= 1e-6:
        return False
    drift = float(np.linalg.norm(new_pose.translation - render_pose.translation))
    return drift <= 0.5 * max(render_pose.translation[2], 1e-6)


def genflow_inner_update(state: GenFlowState, provider, config: RefinerConfig):
    """One inner update. Returns (state, ProviderOutput, full-res flow,
    full-res certainty, flag-or-None); on a degenerate solve the pose is kept
    and the update flagged."""
    out = provider(state)
    factor = state.level_factor
    h, w = out.flow.shape
    mask = out.upsample_mask or bilinear_upsample_mask(h, w, factor)
    flow_full = convex_upsample(out.flow, mask, factor)
    cert_full = bilinear_upsample(np.asarray(out.certainty, float), factor)
    if out.sensitivity is out.certainty:
        sens_full = cert_full
    else:
        sens_full = bilinear_upsample(np.asarray(out.sensitivity, float), factor)
    weights_full = cert_full * sens_full if config.use_confidence else np.ones_like(cert_full)

    us = state.pixels[:, 0].astype(int)
    vs = state.pixels[:, 1].astype(int)
    usable = flow_full.valid[vs, us]
    flag = None
    w_sel = weights_full[vs, us] * usable
    if int(np.count_nonzero(w_sel > 0)) < 4:
        flag = "degenerate: not enough weighted correspondences"
    else:
        corrs = Correspondences2D3D(
            state.object_points, state.pixels, flow_full.flow[vs, us], w_sel
        )
        try:
            detached = lm_pnp(corrs, state.camera, state.pose, config.lm_iters)
            new_pose = gn_step(corrs, state.camera, detached)
            if _plausible_update(new_pose, state.render.pose):
                state.pose = new_pose
            else:
                flag = "diverged: update rejected"
        except ValueError as err:
            flag = str(err)
    state.induced_flow = pose_induced_flow(state.level_render, state.pose, state.level_camera)
    state.inner_index += 1
    return state, out, flow_full, cert_full, flag


def cascade_refine(
    initial: Pose,
    render: RenderOutput,
    config: RefinerConfig,
    provider,
    outer_index: int = 0,
    hyp_index: int = 0,
):
    """Run the inner updates split evenly across the cascade levels, coarse
    to fine; the pose (and thereby the pose-induced flow) of each level's
    last update initializes the next level.

    Returns (list of inner poses, last full-res flow, last full-res
    certainty, flags).
    """
    state = _build_outer_state(render, render.camera, initial, config, outer_index, hyp_index)
    flags: list[tuple[int, int, str]] = []
    if state is None:
        n = config.inner_iters
        return [initial] * n, None, None, [(outer_index, j, "object out of frame") for j in range(n)]
    per_level = config.inner_iters // config.cascade_levels
    poses = []
    last_flow = None
    last_cert = None
    for factor in config.level_factors:
        state.level_factor = factor
        state.level_render, state.level_camera = decimate_render(render, factor)
        state.induced_flow = pose_induced_flow(state.level_render, state.pose, state.level_camera)
        for _ in range(per_level):
            state, out, flow_full, cert_full, flag = genflow_inner_update(state, provider, config)
            poses.append(state.pose)
            if flow_full is not None:
                last_flow, last_cert = flow_full, cert_full
            if flag is not None:
                flags.append((outer_index, state.inner_index - 1, flag))
    return poses, last_flow, last_cert, flags


def refine(
    initial: Pose,
    mesh: Mesh,
    camera: Camera,
    observation: Observation | None,
    config: RefinerConfig,
    provider=None,
    gt_pose: Pose | None = None,
    render_fn=rasterize,
    hyp_index: int = 0,
) -> RefineTrace:
    """Full refinement: outer_iters render-and-refine steps, each with one
    rasterization and a cascade of inner updates (exactly outer_iters renders
    unless early_stop trips)."""
    if provider is None:
        provider = make_provider(config, gt_pose, observation, hyp_index)
    points = mesh.surface_points if mesh.surface_points is not None else mesh.vertices
    trace = RefineTrace(initial=initial)
    pose = initial
    for k in range(config.outer_iters):
        render = render_fn(mesh, pose, camera)
        trace.render_count += 1
        inner_poses, last_flow, last_cert, flags = cascade_refine(
            pose, render, config, provider, outer_index=k, hyp_index=hyp_index
        )
        trace.flags.extend(flags)
        new_pose = inner_poses[-1]
        if config.depth_refine and observation is not None and observation.depth is not None:
            if last_flow is not None:
                refined, ok = depth_refine(
                    render.pose, render, observation.depth, last_flow, last_cert, config
                )
                if ok:
                    new_pose = refined
                else:
                    trace.flags.append((k, config.inner_iters - 1, "depth refine: no consensus"))
        trace.inner_poses.append(inner_poses)
        trace.outer_poses.append(new_pose)
        if gt_pose is not None:
            trace.inner_add.append([add_error(p, gt_pose, points) for p in inner_poses])
            trace.outer_add.append(add_error(new_pose, gt_pose, points))
        moved_rot = rotation_geodesic_distance(new_pose.rotation, pose.rotation)
        moved_t = float(np.linalg.norm(new_pose.translation - pose.translation))
        pose = new_pose
        if config.early_stop and moved_rot < 1e-5 and moved_t < 1e-5 and k + 1 < config.outer_iters:
            break
    return trace


def multi_hypothesis_refine(
    hypotheses,
    mesh: Mesh,
    camera: Camera,
    observation: Observation | None,
    config: RefinerConfig,
    scorer,
    scorer_observation,
    provider_factory: Callable[[int], object] | None = None,
    gt_pose: Pose | None = None,
    render_fn=rasterize,
):
    """Refine every hypothesis independently, re-score the refined poses with
    the coarse scorer (one extra render each), and return
    (best pose, best index, traces, scores). Ties break to the lower index."""
    if len(hypotheses) < 1:
        raise ValueError("need at least one hypothesis")
    traces = []
    scores = []
    for i, hyp in enumerate(hypotheses):
        pose0 = hyp.pose if hasattr(hyp, "pose") else hyp
        provider = provider_factory(i) if provider_factory is not None else None
        trace = refine(
            pose0, mesh, camera, observation, config,
            provider=provider, gt_pose=gt_pose, render_fn=render_fn, hyp_index=i,
        )
        traces.append(trace)
        render = render_fn(mesh, trace.final_pose, camera)
        trace.render_count += 1
        scores.append(float(scorer(scorer_observation, render)))
    best = min(range(len(scores)), key=lambda i: (-scores[i], i))
    return traces[best].final_pose, best, traces, scores


def depth_refine(
    pose: Pose,
    render: RenderOutput,
    observed_depth: np.ndarray,
    flow: FlowField,
    certainty: np.ndarray | None,
    config: RefinerConfig,
) -> tuple[Pose, bool]:
    """RANSAC-Kabsch correction from 3D-3D correspondences.

    Source points are the rendered pixels lifted into camera space (of the
    render's pose, which is also the pose the flow refers to); targets
    back-project the observed depth at the flow target. Pairs with certainty
    below the threshold or invalid depth are dropped. Returns the corrected
    pose and whether a consensus was found.
    """
    camera = render.camera
    vs, us = np.nonzero(render.mask & flow.valid)
    if len(us) == 0:
        return pose, False
    cert = (
        np.ones(len(us))
        if certainty is None
        else np.asarray(certainty, float)[vs, us]
    )
    keep = cert >= config.certainty_threshold
    if int(keep.sum()) < 3:
        return pose, False
    us, vs, cert = us[keep], vs[keep], cert[keep]
    d_r = render.depth[vs, us]
    src = np.stack(
        [
            (us - camera.cx) / camera.fx * d_r,
            (vs - camera.cy) / camera.fy * d_r,
            d_r,
        ],
        axis=1,
    )
    qu = us + flow.flow[vs, us, 0]
    qv = vs + flow.flow[vs, us, 1]
    d_obs, ok = _bilinear_sample_depth(np.asarray(observed_depth, float), qu, qv)
    if int(ok.sum()) < 3:
        return pose, False
    qu, qv, d_obs, cert, src = qu[ok], qv[ok], d_obs[ok], cert[ok], src[ok]
    dst = np.stack(
        [
            (qu - camera.cx) / camera.fx * d_obs,
            (qv - camera.cy) / camera.fy * d_obs,
            d_obs,
        ],
        axis=1,
    )
    if len(src) > 2000:
        sel = np.linspace(0, len(src) - 1, 2000).astype(int)
        src, dst, cert = src[sel], dst[sel], cert[sel]
    corrs = Correspondences3D3D(src, dst, cert)
    try:
        correction, _ = ransac_kabsch(
            corrs,
            inlier_thresh=config.kabsch_inlier_thresh,
            max_iters=config.kabsch_iters,
            seed=_derive_seed(config.seed, 91, len(src)),
        )
    except ValueError:
        return pose, False
    return compose(correction, pose), True
