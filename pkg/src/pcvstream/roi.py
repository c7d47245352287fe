"""Two-stage region-of-interest selection.

Stage one (coarse): extrapolate the viewer pose, cull to the predicted
frustum, grid the result, score blocks by mean motion magnitude, and keep
the top fraction. Stage two (fine): re-grid the survivors, score blocks by
viewpoint proximity/angle times geometric-texture distinctiveness, and
downsample each block proportionally to its normalized static saliency.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._util import ceil_count
from .cloud import (
    BlockGrid, Camera, Intrinsics, PointCloud, Pose, frustum_cull, partition,
    quat_conjugate, quat_multiply, quat_normalize,
)

log = logging.getLogger(__name__)

CHI2_EPS = 1e-8
TEXTURE_BINS = 8  # trailing entries of every block feature vector


@dataclass(frozen=True)
class PoseHistory:
    """Recent viewer poses, oldest first; timestamps strictly increasing."""

    samples: tuple[Pose, ...]

    def __init__(self, samples):
        object.__setattr__(self, "samples", tuple(samples))
        if len(self.samples) < 2:
            raise ValueError("pose history needs at least 2 samples")
        times = [p.timestamp for p in self.samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("pose timestamps must be strictly increasing")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class FlowField:
    """Per-point motion vectors annotating one frame, meters/frame."""

    vectors: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(vec).all():
            raise ValueError("flow vectors must be finite")
        vec.flags.writeable = False
        object.__setattr__(self, "vectors", vec)

    def magnitudes(self):
        return np.linalg.norm(self.vectors, axis=1)


@dataclass
class RoiConfig:
    coarse_keep_fraction: float = 0.60
    beta: float = 0.5
    lambda_: float = 0.35
    R: int = 6
    coarse_cell_size: float = 0.5
    fine_cell_size: float = 0.25
    r_min: float = 0.1
    r_max: float = 1.0
    k: int = 8
    # keep the top coarse fraction by block count or by point count
    coarse_keep_by: str = "blocks"
    sub_bins: int = 2

    def __post_init__(self):
        if not 0.0 < self.coarse_keep_fraction <= 1.0:
            raise ValueError("coarse_keep_fraction must lie in (0, 1]")
        if not 0.0 <= self.r_min <= self.r_max <= 1.0:
            raise ValueError("require 0 <= r_min <= r_max <= 1")
        if self.coarse_keep_by not in ("blocks", "points"):
            raise ValueError("coarse_keep_by must be 'blocks' or 'points'")


@dataclass(frozen=True)
class SaliencyMap:
    """Per-block saliency scores in block-id order, exportable as JSON."""

    block_ids: np.ndarray
    centers: np.ndarray
    dynamic: np.ndarray      # mean flow magnitude per block
    viewpoint: np.ndarray    # distance/angle descriptor
    texture: np.ndarray      # geometric-texture distinctiveness, in [0, 1)
    static_: np.ndarray      # viewpoint * texture
    beta: float
    lambda_: float
    R: int

    def __post_init__(self):
        if np.any(self.texture < 0.0) or np.any(self.texture >= 1.0):
            raise ValueError("texture scores must lie in [0, 1)")
        if not np.allclose(self.static_, self.viewpoint * self.texture):
            raise ValueError("static saliency must equal viewpoint * texture")

    def to_dict(self):
        return {
            "beta": self.beta,
            "lambda": self.lambda_,
            "R": self.R,
            "blocks": [
                {
                    "id": int(b),
                    "center": [float(c) for c in self.centers[i]],
                    "dynamic": float(self.dynamic[i]),
                    "viewpoint": float(self.viewpoint[i]),
                    "texture": float(self.texture[i]),
                    "static": float(self.static_[i]),
                }
                for i, b in enumerate(self.block_ids)
            ],
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


# ---------------------------------------------------------------------------
# stage one

def predict_pose(history: PoseHistory, horizon: int) -> list[Pose]:
    """Extrapolate the next `horizon` poses.

    Position advances at the last observed velocity; orientation repeats the
    last relative rotation (renormalized each step).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    prev, last = history.samples[-2], history.samples[-1]
    dt = last.timestamp - prev.timestamp
    velocity = (last.position - prev.position) / dt
    delta = quat_normalize(quat_multiply(last.orientation,
                                         quat_conjugate(prev.orientation)))
    poses = []
    quat = last.orientation
    for i in range(1, horizon + 1):
        quat = quat_normalize(quat_multiply(delta, quat))
        poses.append(Pose(last.position + velocity * dt * i, quat,
                          last.timestamp + dt * i))
    return poses


def estimate_flow(prev: PointCloud, curr: PointCloud) -> FlowField:
    """Nearest-neighbor flow: each current point minus its closest previous
    point (the pluggable stand-in for a learned scene-flow model)."""
    if len(prev) == 0 or len(curr) == 0:
        raise ValueError("flow estimation requires non-empty clouds")
    _, idx = cKDTree(prev.points).query(curr.points)
    vectors = curr.points.astype(np.float64) - prev.points[idx].astype(np.float64)
    return FlowField(vectors)


def dynamic_saliency(grid: BlockGrid, flow: FlowField) -> dict[int, float]:
    """Mean flow magnitude per block of the gridded frame."""
    total = sum(len(v) for v in grid.blocks.values())
    if len(flow.vectors) != total:
        raise ValueError("flow field does not annotate this grid")
    mags = flow.magnitudes()
    return {bid: float(mags[idx].mean()) for bid, idx in grid.blocks.items()}


def _rank_blocks(scores: dict[int, float]) -> list[int]:
    # descending score, ties broken by ascending block id
    return sorted(scores, key=lambda b: (-scores[b], b))


def _coarse_kept_ids(grid: BlockGrid, scores: dict[int, float],
                     cfg: RoiConfig) -> list[int]:
    ranked = _rank_blocks(scores)
    if cfg.coarse_keep_by == "blocks":
        return ranked[:ceil_count(cfg.coarse_keep_fraction, len(ranked))]
    total = sum(len(grid.blocks[b]) for b in ranked)
    need = ceil_count(cfg.coarse_keep_fraction, total)
    kept, acc = [], 0
    for bid in ranked:
        if acc >= need:
            break
        kept.append(bid)
        acc += len(grid.blocks[bid])
    return kept


def coarse_select(frame: PointCloud, prev_frame: PointCloud,
                  history: PoseHistory, cfg: RoiConfig,
                  camera_intrinsics: Intrinsics) -> PointCloud:
    """Stage-one ROI: predicted-frustum cull plus motion-ranked block keep."""
    cloud, _, _, _ = coarse_select_details(frame, prev_frame, history, cfg,
                                           camera_intrinsics)
    return cloud


def coarse_select_details(frame, prev_frame, history, cfg, camera_intrinsics):
    """coarse_select returning (cloud, grid, block scores, camera)."""
    pose = predict_pose(history, 1)[0]
    camera = Camera.at(pose, camera_intrinsics)
    culled = frustum_cull(frame, camera)
    if len(culled) == 0:
        log.warning("frame %d: predicted frustum is empty", frame.frame_index)
        return culled, None, {}, camera
    grid = partition(culled, cfg.coarse_cell_size)
    flow = estimate_flow(prev_frame, culled)
    scores = dynamic_saliency(grid, flow)
    kept = _coarse_kept_ids(grid, scores, cfg)
    indices = np.sort(np.concatenate([grid.blocks[b] for b in kept]))
    return culled.select(indices), grid, scores, camera


# ---------------------------------------------------------------------------
# stage two

def viewpoint_descriptor(block_center, viewpoint, view_direction,
                         beta: float) -> float:
    """Distance/angle significance of one block center.

    Distance enters as beta/ln(phi) with phi clamped to at least e, angle as
    (1-beta) times the cosine between the center direction and the view
    direction. A block at the eye counts as straight ahead.
    """
    o = np.asarray(block_center, dtype=np.float64)
    v = np.asarray(viewpoint, dtype=np.float64)
    w = np.asarray(view_direction, dtype=np.float64)
    w_norm = np.linalg.norm(w)
    if w_norm == 0.0:
        raise ValueError("view direction must be non-zero")
    d = o - v
    phi = float(np.linalg.norm(d))
    cos_theta = 1.0 if phi == 0.0 else float(d @ w / (phi * w_norm))
    return beta / math.log(max(phi, math.e)) + (1.0 - beta) * cos_theta


def _chi2(a, b):
    return float(((a - b) ** 2 / (a + b + CHI2_EPS)).sum())


def texture_descriptor(features, neighbor_features, lambda_: float) -> float:
    """Distinctiveness of a block relative to its R neighbors, in [0, 1).

    Feature vectors carry the geometry histogram followed by TEXTURE_BINS
    luminance bins; both parts are compared with the chi-square histogram
    distance, the texture part weighted by lambda_.
    """
    t_i = np.asarray(features, dtype=np.float64)
    neighbors = [np.asarray(t, dtype=np.float64) for t in neighbor_features]
    if not neighbors:
        raise ValueError("texture descriptor needs at least one neighbor")
    if any(t.shape != t_i.shape for t in neighbors):
        raise ValueError("feature vectors must have matching lengths")
    split = t_i.size - TEXTURE_BINS
    acc = 0.0
    for t_j in neighbors:
        psi2 = (_chi2(t_i[:split], t_j[:split])
                + lambda_ * _chi2(t_i[split:], t_j[split:]))
        acc += psi2 / (1.0 + float(np.linalg.norm(t_i - t_j)))
    return 1.0 - math.exp(-acc / len(neighbors))


def block_features(points, sub_bins: int, bounds=None,
                   colors=None) -> np.ndarray:
    """Feature vector of one block: occupancy histogram over sub_bins^3
    sub-cells plus an 8-bin luminance histogram (zeros without color)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("block_features requires a non-empty block")
    if bounds is None:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
    else:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
    span = np.where(hi > lo, hi - lo, 1.0)
    idx = np.floor((pts - lo) / span * sub_bins).astype(np.int64)
    idx = np.clip(idx, 0, sub_bins - 1)
    flat = idx[:, 0] + sub_bins * (idx[:, 1] + sub_bins * idx[:, 2])
    geo = np.bincount(flat, minlength=sub_bins ** 3).astype(np.float64)
    geo /= geo.sum()

    tex = np.zeros(TEXTURE_BINS)
    if colors is not None and len(colors):
        rgb = np.asarray(colors, dtype=np.float64)
        luma = 0.299 * rgb[:, 0] + 0.587 * rgb[:, 1] + 0.114 * rgb[:, 2]
        tex = np.bincount(np.clip((luma / 256.0 * TEXTURE_BINS).astype(np.int64),
                                  0, TEXTURE_BINS - 1),
                          minlength=TEXTURE_BINS).astype(np.float64)
        tex /= tex.sum()
    return np.concatenate([geo, tex])


def _static_scores(grid: BlockGrid, cloud: PointCloud, viewpoint,
                   view_direction, cfg: RoiConfig):
    """Per-block (viewpoint, texture, static) scores on a fine grid."""
    ids = grid.block_ids()
    centers = np.array([grid.cell_center(b) for b in ids])
    feats = []
    for b in ids:
        idx = grid.blocks[b]
        colors = cloud.colors[idx] if cloud.colors is not None else None
        feats.append(block_features(cloud.points[idx], cfg.sub_bins,
                                    bounds=grid.cell_bounds(b), colors=colors))
    view_scores = np.array([
        viewpoint_descriptor(c, viewpoint, view_direction, cfg.beta)
        for c in centers])

    tex_scores = np.zeros(len(ids))
    if len(ids) > 1:
        tree = cKDTree(centers)
        k = min(cfg.R, len(ids) - 1)
        _, nbrs = tree.query(centers, k=k + 1)
        nbrs = np.atleast_2d(nbrs)
        for i in range(len(ids)):
            others = [j for j in nbrs[i] if j != i][:k]
            tex_scores[i] = texture_descriptor(
                feats[i], [feats[j] for j in others], cfg.lambda_)
    return ids, centers, view_scores, tex_scores, view_scores * tex_scores


def fine_select(coarse: PointCloud, viewpoint, view_direction,
                cfg: RoiConfig, seed: int) -> PointCloud:
    """Stage-two ROI: saliency-proportional per-block downsampling."""
    cloud, _ = fine_select_details(coarse, viewpoint, view_direction, cfg, seed)
    return cloud


def fine_select_details(coarse, viewpoint, view_direction, cfg, seed,
                        dynamic_by_point=None):
    if len(coarse) == 0:
        raise ValueError("fine_select requires a non-empty coarse ROI")
    grid = partition(coarse, cfg.fine_cell_size)
    ids, centers, view_s, tex_s, static = _static_scores(
        grid, coarse, viewpoint, view_direction, cfg)

    lo, hi = static.min(), static.max()
    if hi > lo:
        norm = (static - lo) / (hi - lo)
    else:
        norm = np.ones_like(static)  # constant saliency: keep fully

    rng = np.random.default_rng(seed)
    kept = []
    for i, bid in enumerate(ids):
        idx = grid.blocks[bid]
        ratio = cfg.r_min + (cfg.r_max - cfg.r_min) * norm[i]
        take = ceil_count(ratio, len(idx))
        kept.append(rng.choice(idx, size=take, replace=False))
    indices = np.sort(np.concatenate(kept))

    dyn = np.zeros(len(ids))
    if dynamic_by_point is not None:
        mags = np.asarray(dynamic_by_point, dtype=np.float64)
        dyn = np.array([mags[grid.blocks[b]].mean() for b in ids])
    saliency = SaliencyMap(np.asarray(ids), centers, dyn, view_s, tex_s,
                           static, cfg.beta, cfg.lambda_, cfg.R)
    return coarse.select(indices), saliency


# ---------------------------------------------------------------------------
# full pipeline

@dataclass(frozen=True)
class RoiResult:
    cloud: PointCloud
    saliency: SaliencyMap | None
    camera: Camera
    frustum_points: int


def select_roi(frame: PointCloud, prev_frame: PointCloud,
               history: PoseHistory, cfg: RoiConfig,
               camera_intrinsics: Intrinsics, seed: int) -> RoiResult:
    """Run both ROI stages on one frame; empty frustum yields an empty ROI."""
    coarse, grid, _, camera = coarse_select_details(
        frame, prev_frame, history, cfg, camera_intrinsics)
    if len(coarse) == 0:
        return RoiResult(coarse, None, camera, 0)
    flow = estimate_flow(prev_frame, coarse)
    cloud, saliency = fine_select_details(
        coarse, camera.pose.position, camera.pose.forward(), cfg, seed,
        dynamic_by_point=flow.magnitudes())
    frustum_points = int(sum(len(v) for v in grid.blocks.values()))
    return RoiResult(cloud, saliency, camera, frustum_points)
