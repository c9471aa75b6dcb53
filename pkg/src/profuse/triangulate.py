"""Seed points from confident correspondences and the initial Gaussian scene."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .scene_model import Camera, GaussianScene, ViewSet, WarpField

logger = logging.getLogger(__name__)

PARALLEL_SINE = 1e-4
INITIAL_OPACITY = 0.8
DEFAULT_COLOR = 0.5


class EmptySceneError(RuntimeError):
    """No correspondence survived the confidence gate."""


@dataclass(frozen=True)
class SeedConfig:
    tau_alpha: float = 0.6
    stride: int = 4
    dedup_radius: float = 0.02


@dataclass
class SeedPoints:
    """Accepted seeds as parallel arrays (one row per seed)."""

    positions: np.ndarray  # (S, 3)
    confidence: np.ndarray  # (S,)
    colors: np.ndarray  # (S, 3)
    support: np.ndarray  # (S, 6): view_a, x_a, y_a, view_b, u_b, v_b
    rejected_parallel: int = 0
    rejected_behind: int = 0

    def __len__(self) -> int:
        return self.positions.shape[0]


def closest_approach(c1, d1, c2, d2):
    """Closest points on two rays (broadcast over leading axes).

    Returns (s, t, sine) with ``c1 + s d1`` and ``c2 + t d2`` the closest
    points; directions must be unit vectors.
    """
    w = c1 - c2
    b = np.sum(d1 * d2, axis=-1)
    d = np.sum(d1 * w, axis=-1)
    e = np.sum(d2 * w, axis=-1)
    denom = 1.0 - b * b
    sine = np.linalg.norm(np.cross(d1, d2), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (b * e - d) / denom
        t = (e - b * d) / denom
    return s, t, sine


def _canonical(c1, d1, c2, d2):
    # order the two rays lexicographically so swapping the inputs is bit-identical
    key1 = np.concatenate([c1, d1], axis=-1)
    key2 = np.concatenate([c2, d2], axis=-1)
    diff = key1 - key2
    first = np.argmax(diff != 0, axis=-1)
    swap = np.take_along_axis(diff, first[..., None], axis=-1)[..., 0] > 0
    sw = swap[..., None]
    return np.where(sw, c2, c1), np.where(sw, d2, d1), np.where(sw, c1, c2), np.where(sw, d1, d2)


def triangulate_rays(c1, d1, c2, d2, cam1: Camera | None = None, cam2: Camera | None = None):
    """Vectorised midpoint triangulation.

    Returns (points, status) where status is 0 = accepted, 1 = near-parallel,
    2 = behind a camera.
    """
    c1, d1, c2, d2 = (np.asarray(a, dtype=np.float64) for a in (c1, d1, c2, d2))
    c1, d1, c2, d2 = np.broadcast_arrays(c1, d1, c2, d2)
    a1, e1, a2, e2 = _canonical(c1, d1, c2, d2)
    s, t, sine = closest_approach(a1, e1, a2, e2)
    mid = 0.5 * ((a1 + s[..., None] * e1) + (a2 + t[..., None] * e2))
    status = np.zeros(sine.shape, dtype=np.int8)
    parallel = ~(sine >= PARALLEL_SINE)
    status[parallel] = 1
    behind = np.zeros_like(parallel)
    for c, d, cam in ((c1, d1, cam1), (c2, d2, cam2)):
        if cam is not None:
            depth = cam.to_camera(np.where(parallel[..., None], 0.0, mid))[..., 2]
        else:
            depth = np.sum((mid - c) * d, axis=-1)
        behind |= ~(depth > 0)
    status[~parallel & behind] = 2
    return mid, status


def triangulate_pair(cam_i: Camera, pix_i, cam_j: Camera, pix_j) -> Optional[np.ndarray]:
    """Midpoint of closest approach between the two pixel rays, or None on rejection."""
    pix_i = np.asarray(pix_i, dtype=np.float64)
    pix_j = np.asarray(pix_j, dtype=np.float64)
    if not (cam_i.in_image(pix_i) and cam_j.in_image(pix_j)):
        raise ValueError("pixels must lie inside their images")
    ci, di = cam_i.rays(pix_i)
    cj, dj = cam_j.rays(pix_j)
    mid, status = triangulate_rays(ci, di, cj, dj, cam_i, cam_j)
    return None if status != 0 else mid


def _nearest_lookup(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Nearest-pixel lookup of an (H, W, ...) array at continuous coords."""
    x = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, img.shape[1] - 1)
    y = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, img.shape[0] - 1)
    return img[y, x]


def seeds_from_warp(views: ViewSet, warp: WarpField, config: SeedConfig,
                    reverse: WarpField | None = None) -> SeedPoints:
    """Triangulate the stride-sampled confident correspondences of one ordered pair."""
    j, i = warp.src_view, warp.dst_view
    cam_j, cam_i = views.cameras[j], views.cameras[i]
    H, W = warp.shape
    ys, xs = np.mgrid[0:H:config.stride, 0:W:config.stride]
    ys, xs = ys.ravel(), xs.ravel()
    conf = warp.confidence[ys, xs].astype(np.float64)
    uv_i = warp.warp[:, ys, xs].T.astype(np.float64)
    ok = cam_i.in_image(uv_i)
    if reverse is not None:
        back = np.zeros_like(conf)
        back[ok] = _nearest_lookup(reverse.confidence, uv_i[ok])
        conf = np.minimum(conf, back)
    ok &= conf >= config.tau_alpha
    ys, xs, conf, uv_i = ys[ok], xs[ok], conf[ok], uv_i[ok]
    uv_j = np.stack([xs + 0.5, ys + 0.5], axis=1)
    c_j, d_j = cam_j.rays(uv_j)
    c_i, d_i = cam_i.rays(uv_i)
    pts, status = triangulate_rays(c_j, d_j, c_i, d_i, cam_j, cam_i)
    keep = status == 0
    if j in views.colors:
        colors = views.colors[j][ys, xs].astype(np.float64)
    else:
        colors = np.full((len(ys), 3), DEFAULT_COLOR)
    support = np.column_stack([np.full(len(ys), j), xs + 0.5, ys + 0.5, np.full(len(ys), i), uv_i])
    return SeedPoints(pts[keep], conf[keep], colors[keep], support[keep],
                      int((status == 1).sum()), int((status == 2).sum()))


def dedup_voxels(seeds: SeedPoints, radius: float) -> SeedPoints:
    """Keep the highest-confidence seed per voxel of edge ``radius``.

    Ties keep the earliest seed; output is sorted by voxel key.
    """
    if len(seeds) == 0:
        return seeds
    if np.isfinite(radius):
        cells = np.floor(seeds.positions / radius).astype(np.int64)
    else:
        cells = np.zeros(seeds.positions.shape, dtype=np.int64)
    order = np.lexsort((np.arange(len(seeds)), -seeds.confidence, cells[:, 2], cells[:, 1], cells[:, 0]))
    sorted_cells = cells[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(sorted_cells[1:] != sorted_cells[:-1], axis=1)
    keep = order[first]
    return SeedPoints(seeds.positions[keep], seeds.confidence[keep], seeds.colors[keep], seeds.support[keep],
                      seeds.rejected_parallel, seeds.rejected_behind)


def extract_seeds(views: ViewSet, warps: Iterable[WarpField], config: SeedConfig = SeedConfig()) -> SeedPoints:
    """Seeds from every ordered warp, deduplicated on a voxel grid.

    Raises:
        EmptySceneError: when no correspondence passes the confidence gate.
    """
    warps = sorted(warps, key=lambda w: (w.src_view, w.dst_view))
    by_pair = {(w.src_view, w.dst_view): w for w in warps}
    parts = [seeds_from_warp(views, w, config, by_pair.get((w.dst_view, w.src_view))) for w in warps]
    if not parts or sum(len(p) for p in parts) == 0:
        raise EmptySceneError(f"no correspondence passed tau_alpha={config.tau_alpha}")
    merged = SeedPoints(
        np.concatenate([p.positions for p in parts]),
        np.concatenate([p.confidence for p in parts]),
        np.concatenate([p.colors for p in parts]),
        np.concatenate([p.support for p in parts]),
        sum(p.rejected_parallel for p in parts),
        sum(p.rejected_behind for p in parts),
    )
    out = dedup_voxels(merged, config.dedup_radius)
    logger.info("seeds: %d triangulated, %d after dedup (%d parallel, %d behind rejected)",
                len(merged), len(out), merged.rejected_parallel, merged.rejected_behind)
    return out


def init_gaussians(seeds: SeedPoints, scale_factor: float = 0.3, fallback_distance: float = 0.05,
                   opacity: float = INITIAL_OPACITY) -> GaussianScene:
    """One isotropic Gaussian per seed, sized by the distance to its 3rd-nearest neighbour."""
    n = len(seeds)
    if n == 0:
        raise EmptySceneError("cannot initialise a scene from zero seeds")
    pos = np.asarray(seeds.positions, dtype=np.float64)
    if n >= 4:
        dist, _ = cKDTree(pos).query(pos, k=4)
        d3 = dist[:, 3]
        # coincident seeds would give a zero scale
        d3 = np.where(d3 > 0, d3, fallback_distance)
    else:
        d3 = np.full(n, fallback_distance)
    scale = scale_factor * d3
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    colors = np.clip(seeds.colors, 0.0, 1.0)
    return GaussianScene(pos, np.repeat(scale[:, None], 3, axis=1), rot, np.full(n, opacity), colors)
