"""Gradient-free registration of proposal descriptors onto Gaussians.

Each mask gets a mass (the renderer weight integrated over its pixels),
each proposal a mass-weighted unit descriptor, and each Gaussian the
normalised weight-averaged descriptor of the proposals whose pixels it
contributes to.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import sparse

from .matchgraph import Proposal, ProposalSet
from .scene_model import GaussianScene, ViewSet
from .splat_renderer import PixelHits

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class ProposalDescriptor:
    pid: int
    descriptor: np.ndarray  # (D,) unit, zeros when degenerate
    total_mass: float
    degenerate: bool = False


@dataclass
class Registration:
    scene: GaussianScene
    accumulator: np.ndarray  # A, (N, D) float64
    weight_sum: np.ndarray  # S, (N,) float64
    proposal_weights: sparse.csr_matrix  # (N, P + 1) accumulated weight per (gaussian, proposal id)
    descriptors: dict[int, ProposalDescriptor]


def mask_mass(hits: PixelHits, mask: np.ndarray) -> float:
    """Sum of the retained blending weights over the mask pixels."""
    return float(hits.weights[np.asarray(mask, dtype=bool)].sum())


def mask_masses(hits: PixelHits, label_map: np.ndarray, mask_count: int) -> np.ndarray:
    """Masses of every mask in a label map; entry 0 is the null label."""
    per_pixel = hits.weights.sum(axis=-1).ravel()
    return np.bincount(label_map.ravel().astype(np.int64), weights=per_pixel, minlength=mask_count + 1)


def proposal_descriptor(proposal: Proposal, masses: Mapping[tuple[int, int], float],
                        embeddings: Mapping[int, np.ndarray]) -> ProposalDescriptor:
    """Mass-weighted pool of member embeddings, L2-normalised.

    A proposal whose members all have zero mass is flagged degenerate and
    carries a zero descriptor.
    """
    if not proposal.members:
        raise ValueError("proposal has no members")
    dim = next(iter(embeddings.values())).shape[1]
    pooled = np.zeros(dim)
    total = 0.0
    for v, k in proposal.members:
        mu = float(masses[(v, k)])
        pooled += mu * embeddings[v][k - 1].astype(np.float64)
        total += mu
    norm = np.linalg.norm(pooled)
    if total <= 0 or norm == 0:
        return ProposalDescriptor(proposal.pid, np.zeros(dim), total, True)
    return ProposalDescriptor(proposal.pid, pooled / norm, total)


def proposal_descriptors(proposals: ProposalSet, views: ViewSet,
                         hits: Mapping[int, PixelHits]) -> dict[int, ProposalDescriptor]:
    masses = {}
    for v in views.view_ids:
        ms = views.masks[v]
        m = mask_masses(hits[v], ms.label_map, ms.mask_count)
        masses.update({(v, k): m[k] for k in range(1, ms.mask_count + 1)})
    emb = {v: views.masks[v].embeddings for v in views.view_ids}
    return {p.pid: proposal_descriptor(p, masses, emb) for p in proposals.proposals}


def build_proposal_maps(views: ViewSet, proposals: ProposalSet,
                        valid: Optional[set[int]] = None) -> dict[int, np.ndarray]:
    """Per-view pixel -> proposal id maps (0 = null).

    Pixels outside every mask, inside masks that belong to no proposal, or
    inside a proposal not in ``valid`` map to 0.
    """
    maps = {}
    for v in views.view_ids:
        table = proposals.lookup[v].copy()
        if valid is not None:
            table[~np.isin(table, list(valid))] = 0
        maps[v] = table[views.masks[v].label_map.astype(np.int64)]
    return maps


def _view_shard(hits: PixelHits, pmap: np.ndarray, n_gauss: int, n_props: int) -> sparse.csr_matrix:
    """(N, P + 1) weight of each Gaussian towards each proposal from one view."""
    K = hits.top_k
    pid = np.repeat(pmap.ravel().astype(np.int64), K)
    g = hits.indices.reshape(-1)
    w = hits.weights.reshape(-1)
    ok = (pid > 0) & (g >= 0) & (w > 0)
    key = g[ok] * (n_props + 1) + pid[ok]
    uniq, inv = np.unique(key, return_inverse=True)
    vals = np.bincount(inv, weights=w[ok])
    return sparse.csr_matrix((vals, (uniq // (n_props + 1), uniq % (n_props + 1))), shape=(n_gauss, n_props + 1))


def register_features(scene: GaussianScene, views: ViewSet, proposals: ProposalSet,
                      hits: Mapping[int, PixelHits], eps: float = DEFAULT_EPS, workers: int = 1,
                      view_order: Optional[Sequence[int]] = None) -> Registration:
    """Scatter proposal descriptors onto Gaussians weighted by their blending weights.

    Per-view shards are summed in ``view_order`` (default ascending view id),
    so the result does not depend on ``workers``.
    """
    descs = proposal_descriptors(proposals, views, hits)
    valid = {pid for pid, d in descs.items() if not d.degenerate}
    if len(valid) < len(descs):
        logger.warning("%d degenerate proposals excluded from registration", len(descs) - len(valid))
    pmaps = build_proposal_maps(views, proposals, valid)
    n, P = len(scene), len(proposals)
    order = list(view_order) if view_order is not None else views.view_ids

    def shard(v):
        return _view_shard(hits[v], pmaps[v], n, P)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            shards = list(pool.map(shard, order))
    else:
        shards = [shard(v) for v in order]
    total = sparse.csr_matrix((n, P + 1))
    for s in shards:
        total = total + s
    D = views.descriptor_dim
    F = np.zeros((P + 1, D))
    for pid, d in descs.items():
        F[pid] = d.descriptor
    A = np.asarray(total @ F)
    S = np.asarray(total.sum(axis=1)).ravel()
    f = A / np.maximum(S, eps)[:, None]
    norm = np.linalg.norm(f, axis=1)
    labeled = (S > 0) & (norm > 0)
    out = np.zeros_like(f)
    out[labeled] = f[labeled] / norm[labeled, None]
    logger.info("registered %d / %d gaussians", int(labeled.sum()), n)
    return Registration(scene.with_descriptors(out, labeled), A, S, total, descs)
