"""Forward Gaussian splatting restricted to what registration needs.

For every pixel the renderer returns up to K contributing Gaussians with
blending weights ``w_t = T_t * a_t`` where ``T_t`` is the transmittance of
the Gaussians in front. No colour image is produced.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .container_io import read_records, write_records
from .scene_model import Camera, Gaussian, GaussianScene, RenderConfig, covariances

NEAR_PLANE = 0.01
ALPHA_CLAMP = 0.999


@dataclass
class Projection:
    means: np.ndarray  # (N, 2) continuous pixel coords
    covs: np.ndarray  # (N, 2, 2)
    depths: np.ndarray  # (N,)
    visible: np.ndarray  # (N,) bool, False when culled


@dataclass
class FullHits:
    """Every (pixel, gaussian) contribution before truncation, sorted by pixel then depth."""

    pixel: np.ndarray
    gaussian: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    weight: np.ndarray


@dataclass
class PixelHits:
    """Top-K hits per pixel, depth ordered; empty slots hold index -1 and weight 0."""

    indices: np.ndarray  # (H, W, K) int64
    weights: np.ndarray  # (H, W, K) float64
    total_weight: np.ndarray  # (H, W) sum over the untruncated list
    transmittance: np.ndarray  # (H, W) product of (1 - alpha) over the untruncated list
    full: Optional[FullHits] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.total_weight.shape

    @property
    def top_k(self) -> int:
        return self.indices.shape[2]


def project_gaussians(scene: GaussianScene, cam: Camera, sigma_cutoff: float = 3.0) -> Projection:
    """EWA projection of every Gaussian: mean, 2-D covariance J W S W^T J^T and depth."""
    pos = scene.positions.astype(np.float64)
    pc = cam.to_camera(pos)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    front = z > NEAR_PLANE
    zs = np.where(front, z, 1.0)
    fx, fy = cam.fx, cam.fy
    K = cam.intrinsics
    means = np.stack([fx * x / zs + K[0, 1] * y / zs + K[0, 2], fy * y / zs + K[1, 2]], axis=1)
    J = np.zeros((len(pos), 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 1] = K[0, 1] / zs
    J[:, 0, 2] = -(fx * x + K[0, 1] * y) / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * y / zs**2
    M = J @ cam.rotation
    covs = M @ covariances(scene.scales, scene.rotations) @ np.transpose(M, (0, 2, 1))
    radius = sigma_cutoff * np.sqrt(np.maximum(_max_eig(covs), 0.0))
    onscreen = ((means[:, 0] + radius >= 0) & (means[:, 0] - radius <= cam.width)
                & (means[:, 1] + radius >= 0) & (means[:, 1] - radius <= cam.height))
    det = covs[:, 0, 0] * covs[:, 1, 1] - covs[:, 0, 1] ** 2
    return Projection(means, covs, z, front & onscreen & (det > 0))


def project_gaussian(g: Gaussian, cam: Camera, sigma_cutoff: float = 3.0):
    """Project one Gaussian; returns (mean2d, cov2d, depth) or None when culled."""
    scene = GaussianScene(g.position[None], g.scale[None], g.rotation[None], [g.opacity], g.color[None])
    p = project_gaussians(scene, cam, sigma_cutoff)
    if not p.visible[0]:
        return None
    return p.means[0], p.covs[0], float(p.depths[0])


def _max_eig(covs: np.ndarray) -> np.ndarray:
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    mid = 0.5 * (a + c)
    return mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))


def _inverse2(covs: np.ndarray) -> np.ndarray:
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * c - b * b
    inv = np.empty_like(covs)
    inv[:, 0, 0] = c / det
    inv[:, 1, 1] = a / det
    inv[:, 0, 1] = inv[:, 1, 0] = -b / det
    return inv


def _candidate_pairs(proj: Projection, cam: Camera, sigma_cutoff: float):
    """(gaussian, x, y) for every pixel inside each Gaussian's cutoff bounding box."""
    g = np.flatnonzero(proj.visible)
    r = sigma_cutoff * np.sqrt(_max_eig(proj.covs[g])) * (1 + 1e-9) + 1e-9
    m = proj.means[g]
    x0 = np.clip(np.ceil(m[:, 0] - r - 0.5), 0, cam.width).astype(np.int64)
    x1 = np.clip(np.floor(m[:, 0] + r - 0.5), -1, cam.width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(m[:, 1] - r - 0.5), 0, cam.height).astype(np.int64)
    y1 = np.clip(np.floor(m[:, 1] + r - 0.5), -1, cam.height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(g)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    xs = x0[owner] + local % nx[owner]
    ys = y0[owner] + local // nx[owner]
    return g[owner], xs, ys


def _composite(pixel, gaussian, depth, alpha, n_pixels):
    """Sort by (pixel, depth, index) and composite front to back."""
    order = np.lexsort((gaussian, depth, pixel))
    pixel, gaussian, alpha = pixel[order], gaussian[order], alpha[order]
    counts = np.bincount(pixel, minlength=n_pixels)
    starts = np.cumsum(counts) - counts
    rank = np.arange(len(pixel)) - starts[pixel]
    T = np.ones(len(pixel))
    for r in range(1, int(counts.max(initial=0))):
        idx = starts[counts > r] + r
        T[idx] = T[idx - 1] * (1.0 - alpha[idx - 1])
    return FullHits(pixel, gaussian, alpha, T, T * alpha), rank, counts, starts


def _truncate(full: FullHits, rank, counts, starts, n_pixels, k, mode):
    if mode == "weight":
        order = np.lexsort((rank, -full.weight, full.pixel))
        keep_rank = np.arange(len(order)) - starts[full.pixel[order]]
        sel = order[keep_rank < k]
        sel = sel[np.lexsort((rank[sel], full.pixel[sel]))]
    else:
        sel = np.flatnonzero(rank < k)
    slot = np.arange(len(sel)) - (np.cumsum(np.minimum(counts, k)) - np.minimum(counts, k))[full.pixel[sel]]
    indices = np.full((n_pixels, k), -1, dtype=np.int64)
    weights = np.zeros((n_pixels, k))
    indices[full.pixel[sel], slot] = full.gaussian[sel]
    weights[full.pixel[sel], slot] = full.weight[sel]
    return indices, weights


def render_hits(scene: GaussianScene, cam: Camera, config: RenderConfig = RenderConfig(),
                keep_full: bool = False) -> PixelHits:
    """Per-pixel top-K contributors with blending weights.

    Candidate pixels come from each Gaussian's cutoff bounding box rather than
    from testing every Gaussian at every pixel; :func:`render_hits_reference`
    is the exhaustive counterpart.
    """
    H, W = cam.height, cam.width
    proj = project_gaussians(scene, cam, config.sigma_cutoff)
    g, xs, ys = _candidate_pairs(proj, cam, config.sigma_cutoff)
    inv = _inverse2(proj.covs[g])
    dx = xs + 0.5 - proj.means[g, 0]
    dy = ys + 0.5 - proj.means[g, 1]
    d2 = inv[:, 0, 0] * dx * dx + 2 * inv[:, 0, 1] * dx * dy + inv[:, 1, 1] * dy * dy
    alpha = np.minimum(scene.opacities[g].astype(np.float64) * np.exp(-0.5 * d2), ALPHA_CLAMP)
    ok = (d2 <= config.sigma_cutoff**2) & (alpha >= config.alpha_cutoff)
    pixel = (ys * W + xs)[ok]
    full, rank, counts, starts = _composite(pixel, g[ok], proj.depths[g[ok]], alpha[ok], H * W)
    indices, weights = _truncate(full, rank, counts, starts, H * W, config.top_k, config.topk_mode)
    total = np.bincount(full.pixel, weights=full.weight, minlength=H * W)
    trans = np.ones(H * W)
    last = starts[counts > 0] + counts[counts > 0] - 1
    trans[full.pixel[last]] = full.transmittance[last] * (1.0 - full.alpha[last])
    return PixelHits(indices.reshape(H, W, -1), weights.reshape(H, W, -1), total.reshape(H, W),
                     trans.reshape(H, W), full if keep_full else None)


def render_hits_reference(scene: GaussianScene, cam: Camera, config: RenderConfig = RenderConfig()) -> PixelHits:
    """Naive compositor: every Gaussian tested at every pixel, one pixel at a time."""
    H, W = cam.height, cam.width
    proj = project_gaussians(scene, cam, config.sigma_cutoff)
    vis = np.flatnonzero(proj.visible)
    K = config.top_k
    indices = np.full((H, W, K), -1, dtype=np.int64)
    weights = np.zeros((H, W, K))
    total = np.zeros((H, W))
    trans = np.ones((H, W))
    covs = proj.covs[vis]
    inv = np.linalg.inv(covs) if len(vis) else covs
    opac = scene.opacities[vis].astype(np.float64)
    depth = proj.depths[vis]
    for y in range(H):
        for x in range(W):
            delta = np.array([x + 0.5, y + 0.5]) - proj.means[vis]
            d2 = np.einsum("ni,nij,nj->n", delta, inv, delta)
            a = np.minimum(opac * np.exp(-0.5 * d2), ALPHA_CLAMP)
            hit = (d2 <= config.sigma_cutoff**2) & (a >= config.alpha_cutoff)
            ids, a, dz = vis[hit], a[hit], depth[hit]
            order = np.lexsort((ids, dz))
            T = 1.0
            ws = []
            for t in order:
                ws.append(T * a[t])
                T *= 1.0 - a[t]
            ws = np.array(ws)
            total[y, x] = ws.sum()
            trans[y, x] = T
            if config.topk_mode == "weight":
                pick = sorted(np.lexsort((np.arange(len(ws)), -ws))[:K])
            else:
                pick = list(range(min(K, len(ws))))
            for slot, t in enumerate(pick):
                indices[y, x, slot] = ids[order[t]]
                weights[y, x, slot] = ws[t]
    return PixelHits(indices, weights, total, trans)


def visibility_mask(hits: PixelHits, threshold: float = 0.5) -> np.ndarray:
    return hits.weights.sum(axis=-1) >= threshold


U16_LIMIT = 65535


def save_hits(path, hits: dict[int, PixelHits], n_gaussians: int) -> None:
    """Store per-view hits; ids are written as ``index + 1`` in u16 planes (0 = empty slot).

    Scenes with more than 65535 Gaussians split the ids into hi/lo planes.
    """
    split = n_gaussians > U16_LIMIT
    records = {}
    for v in sorted(hits):
        h = hits[v]
        ids = (h.indices + 1).astype(np.int64)
        if split:
            records[f"ids_hi_{v}"] = (ids >> 16).astype(np.uint16)
            records[f"ids_lo_{v}"] = (ids & 0xFFFF).astype(np.uint16)
        else:
            records[f"ids_{v}"] = ids.astype(np.uint16)
        records[f"weights_{v}"] = h.weights.astype(np.float32)
        records[f"total_{v}"] = h.total_weight.astype(np.float32)
        records[f"trans_{v}"] = h.transmittance.astype(np.float32)
    write_records(path, "hits", records, {"views": sorted(hits), "split": split, "gaussians": n_gaussians})


def load_hits(path) -> dict[int, PixelHits]:
    attrs, r = read_records(path, "hits")
    out = {}
    for v in attrs["views"]:
        if attrs["split"]:
            ids = (r[f"ids_hi_{v}"].astype(np.int64) << 16) | r[f"ids_lo_{v}"].astype(np.int64)
        else:
            ids = r[f"ids_{v}"].astype(np.int64)
        out[v] = PixelHits(ids - 1, r[f"weights_{v}"].astype(np.float64),
                           r[f"total_{v}"].astype(np.float64), r[f"trans_{v}"].astype(np.float64))
    return out
