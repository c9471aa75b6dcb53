"""Cross-view mask graph and 3D context proposals.

Two masks from different views are linked when each one's warped support
overlaps the other under a confidence/visibility gate, in both directions,
and their bounding boxes agree. Connected components of the resulting graph
that are large enough become proposals.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import container_io as cio
from .scene_model import ClusterConfig, ViewSet, WarpField
from .synth import neighbor_pairs

logger = logging.getLogger(__name__)

MaskNode = tuple[int, int]  # (view, mask id)
Edge = tuple[MaskNode, MaskNode]


class GraphConfigError(ValueError):
    """A selected view pair lacks the warp in one direction."""


# -- per-pixel primitives ----------------------------------------------------

def splat_targets(warp: np.ndarray, dst_shape: tuple[int, int]):
    """Bilinear forward-splat footprint of every source pixel.

    Returns (src_index, dst_index, weight) for the up to four destination
    pixels around each warped pixel centre; out-of-image targets are dropped.
    """
    H2, W2 = dst_shape
    gx = warp[0].astype(np.float64).ravel() - 0.5
    gy = warp[1].astype(np.float64).ravel() - 0.5
    x0, y0 = np.floor(gx), np.floor(gy)
    fx, fy = gx - x0, gy - y0
    src = np.arange(gx.size)
    srcs, dsts, ws = [], [], []
    for ox, oy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                      (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        x, y = x0 + ox, y0 + oy
        ok = (x >= 0) & (x < W2) & (y >= 0) & (y < H2) & (w > 0)
        srcs.append(src[ok])
        dsts.append((y[ok] * W2 + x[ok]).astype(np.int64))
        ws.append(w[ok])
    return np.concatenate(srcs), np.concatenate(dsts), np.concatenate(ws)


def warp_mask(mask: np.ndarray, warp: WarpField, dst_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Forward-splat a binary mask through the warp; returns a soft mask in the destination frame."""
    dst_shape = dst_shape or mask.shape
    src, dst, w = splat_targets(warp.warp, dst_shape)
    vals = np.asarray(mask, dtype=np.float64).ravel()[src] * w
    return np.bincount(dst, weights=vals, minlength=dst_shape[0] * dst_shape[1]).reshape(dst_shape)


def gate(warp: WarpField, tau_alpha: float, vis_mask: np.ndarray) -> np.ndarray:
    """Destination-frame gate: pixels reached by confident matches, AND visible.

    The confidence map lives on the source grid, so the indicator
    ``confidence >= tau_alpha`` is splatted through the warp and binarised at
    0.5 before the conjunction with the destination visibility mask.
    """
    confident = warp.confidence >= tau_alpha
    reached = warp_mask(confident, warp, vis_mask.shape) >= 0.5
    return reached & np.asarray(vis_mask, dtype=bool)


def gated_iou(mask_a: np.ndarray, warped_b: np.ndarray, gate_mask: np.ndarray) -> float:
    a = np.asarray(mask_a, bool) & gate_mask
    b = np.asarray(warped_b, bool) & gate_mask
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def mask_box(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    return xs.min(), ys.min(), xs.max() + 1, ys.max() + 1


def box_iou(a, b) -> float:
    if a is None or b is None:
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0) * max(ih, 0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union else 0.0


def bbox_iou(mask_a: np.ndarray, warped_b: np.ndarray) -> float:
    """IoU of the tight axis-aligned boxes of two binary masks (0 if either is empty)."""
    return box_iou(mask_box(mask_a), mask_box(warped_b))


# -- vectorised pair scoring -------------------------------------------------

def _label_boxes(onehot: np.ndarray, width: int) -> np.ndarray:
    """(K, 4) boxes [x0, y0, x1, y1) of each column of an (HW, K) boolean matrix; NaN if empty."""
    pix = np.arange(onehot.shape[0])
    xs, ys = pix % width, pix // width
    out = np.full((onehot.shape[1], 4), np.nan)
    for k in range(onehot.shape[1]):
        sel = onehot[:, k]
        if sel.any():
            out[k] = xs[sel].min(), ys[sel].min(), xs[sel].max() + 1, ys[sel].max() + 1
    return out


def _box_iou_matrix(ba: np.ndarray, bb: np.ndarray) -> np.ndarray:
    iw = np.minimum(ba[:, None, 2], bb[None, :, 2]) - np.maximum(ba[:, None, 0], bb[None, :, 0])
    ih = np.minimum(ba[:, None, 3], bb[None, :, 3]) - np.maximum(ba[:, None, 1], bb[None, :, 1])
    inter = np.maximum(iw, 0) * np.maximum(ih, 0)
    area_a = (ba[:, 2] - ba[:, 0]) * (ba[:, 3] - ba[:, 1])
    area_b = (bb[:, 2] - bb[:, 0]) * (bb[:, 3] - bb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = inter / union
    return np.nan_to_num(iou, nan=0.0)


def directional_scores(label_dst: np.ndarray, k_dst: int, label_src: np.ndarray, k_src: int,
                       warp: WarpField, tau_alpha: float, vis_dst: np.ndarray):
    """Gated IoU and box IoU of every destination mask against every warped source mask.

    Returns two (k_dst, k_src) matrices.
    """
    shape = label_dst.shape
    n = shape[0] * shape[1]
    src, dst, w = splat_targets(warp.warp, shape)
    lab = label_src.ravel().astype(np.int64)[src]
    conf = (warp.confidence.ravel() >= tau_alpha)[src]
    acc = np.bincount(dst * (k_src + 1) + lab, weights=w * conf, minlength=n * (k_src + 1)).reshape(n, k_src + 1)
    warped = acc[:, 1:] >= 0.5
    reached = np.bincount(dst, weights=w * conf, minlength=n) >= 0.5
    g = reached & np.asarray(vis_dst, bool).ravel()
    ldst = label_dst.ravel().astype(np.int64)
    onehot = np.zeros((n, k_dst + 1), dtype=bool)
    onehot[np.arange(n), ldst] = True
    onehot = onehot[:, 1:]
    a = (onehot & g[:, None]).astype(np.int64)
    b = (warped & g[:, None]).astype(np.int64)
    inter = a.T @ b
    union = a.sum(0)[:, None] + b.sum(0)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    boxes = _box_iou_matrix(_label_boxes(a.astype(bool), shape[1]), _label_boxes(b.astype(bool), shape[1]))
    return iou, boxes


def _pair_edges(views: ViewSet, warps: Mapping, vis_masks: Mapping, config: ClusterConfig, i: int, j: int):
    mi, mj = views.masks[i], views.masks[j]
    o_ij, b_ij = directional_scores(mi.label_map, mi.mask_count, mj.label_map, mj.mask_count,
                                    warps[(j, i)], config.tau_alpha, vis_masks[i])
    o_ji, b_ji = directional_scores(mj.label_map, mj.mask_count, mi.label_map, mi.mask_count,
                                    warps[(i, j)], config.tau_alpha, vis_masks[j])
    ok = ((o_ij >= config.tau_iou) & (o_ji.T >= config.tau_iou)
          & (b_ij >= config.tau_box) & (b_ji.T >= config.tau_box))
    return [((i, int(a) + 1), (j, int(b) + 1)) for a, b in zip(*np.nonzero(ok))]


def _warp_map(warps) -> dict:
    if isinstance(warps, Mapping):
        return dict(warps)
    return {(w.src_view, w.dst_view): w for w in warps}


def build_graph(views: ViewSet, warps, vis_masks: Mapping[int, np.ndarray], config: ClusterConfig = ClusterConfig(),
                pairs: Sequence[tuple[int, int]] | None = None, workers: int = 1,
                neighbor_lambda: float = 0.5) -> list[Edge]:
    """Mutual-agreement edges over the selected view pairs.

    ``pairs`` defaults to the unordered reference x neighbour pairs from
    :func:`neighbor_pairs`. Returns edges sorted with the smaller node first.

    Raises:
        GraphConfigError: a selected pair lacks a warp in either direction.
    """
    warps = _warp_map(warps)
    if pairs is None:
        pairs = neighbor_pairs(views, config.neighbors_k, neighbor_lambda)
    pairs = sorted({(min(a, b), max(a, b)) for a, b in pairs})
    for i, j in pairs:
        for key in ((i, j), (j, i)):
            if key not in warps:
                raise GraphConfigError(f"missing warp {key[0]}->{key[1]} for selected pair ({i}, {j})")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda p: _pair_edges(views, warps, vis_masks, config, *p), pairs))
    else:
        parts = [_pair_edges(views, warps, vis_masks, config, i, j) for i, j in pairs]
    edges = {tuple(sorted(e)) for part in parts for e in part}
    return sorted(edges)


# -- components --------------------------------------------------------------

class UnionFind:
    """Disjoint sets over hashable items with path halving and union by size."""

    def __init__(self, items: Iterable = ()):
        self.parent = {}
        self.size = {}
        for it in items:
            self.add(it)

    def add(self, item) -> None:
        if item not in self.parent:
            self.parent[item] = item
            self.size[item] = 1

    def find(self, item):
        parent = self.parent
        while parent[item] != item:
            parent[item] = parent[parent[item]]
            item = parent[item]
        return item

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb] or (self.size[ra] == self.size[rb] and rb < ra):
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True

    def components(self) -> list[list]:
        groups: dict = {}
        for item in self.parent:
            groups.setdefault(self.find(item), []).append(item)
        return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


@dataclass(frozen=True)
class Proposal:
    pid: int  # 1-based; 0 is the null proposal
    members: tuple[MaskNode, ...]

    @property
    def views(self) -> tuple[int, ...]:
        return tuple(sorted({v for v, _ in self.members}))


@dataclass
class ProposalSet:
    proposals: list[Proposal]
    lookup: dict[int, np.ndarray] = field(default_factory=dict)  # view -> (K_i + 1,) mask id -> pid

    def __len__(self) -> int:
        return len(self.proposals)

    def __iter__(self):
        return iter(self.proposals)

    def __getitem__(self, pid: int) -> Proposal:
        if not 1 <= pid <= len(self.proposals):
            raise KeyError(f"no proposal {pid}")
        return self.proposals[pid - 1]

    def proposal_of(self, node: MaskNode) -> int:
        v, k = node
        return int(self.lookup[v][k])


def extract_proposals(edges: Iterable[Edge], views: ViewSet, config: ClusterConfig = ClusterConfig()) -> ProposalSet:
    """Connected components of the mask graph filtered by member and view counts."""
    nodes = [(v, k) for v in views.view_ids for k in range(1, views.masks[v].mask_count + 1)]
    uf = UnionFind(nodes)
    for a, b in edges:
        uf.union(a, b)
    kept = [c for c in uf.components()
            if len(c) >= config.s_min and len({v for v, _ in c}) >= config.v_min]
    proposals = [Proposal(pid, tuple(c)) for pid, c in enumerate(kept, start=1)]
    lookup = {v: np.zeros(views.masks[v].mask_count + 1, dtype=np.uint16) for v in views.view_ids}
    for p in proposals:
        for v, k in p.members:
            lookup[v][k] = p.pid
    logger.info("proposals: %d kept of %d components", len(proposals), len(uf.components()))
    return ProposalSet(proposals, lookup)


def save_proposals(path, proposals: ProposalSet) -> None:
    rows = [(p.pid, v, k) for p in proposals.proposals for v, k in p.members]
    records = {"members": np.array(rows, dtype=np.uint16).reshape(-1, 3)}
    for v in sorted(proposals.lookup):
        records[f"lookup_{v}"] = proposals.lookup[v]
    cio.write_records(path, "proposals", records, {"views": sorted(proposals.lookup), "count": len(proposals)})


def load_proposals(path) -> ProposalSet:
    attrs, r = cio.read_records(path, "proposals")
    members: dict[int, list] = {}
    for pid, v, k in r["members"].astype(np.int64):
        members.setdefault(int(pid), []).append((int(v), int(k)))
    proposals = [Proposal(pid, tuple(members[pid])) for pid in range(1, attrs["count"] + 1)]
    return ProposalSet(proposals, {v: r[f"lookup_{v}"] for v in attrs["views"]})
