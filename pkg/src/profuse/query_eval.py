"""Text-query selection, activation masks, selection metrics and point label transfer."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import pq_index
from .scene_model import GaussianScene, QueryConfig
from .splat_renderer import PixelHits

logger = logging.getLogger(__name__)

ACC_THRESHOLD = 0.25


@dataclass(frozen=True)
class TransferConfig:
    knn_k: int = 64
    mahal_sigma: float = 3.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if not self.mahal_sigma > 0:
            raise ValueError("mahal_sigma must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class Selection:
    indices: np.ndarray  # active gaussian ids, ascending
    scores: np.ndarray  # cosine score of each active gaussian
    examined: int = 0  # shortlist length that was re-scored


@dataclass
class PointLabels:
    probs: np.ndarray  # (V, C), zero rows for unlabeled vertices
    labels: np.ndarray  # (V,), -1 for unlabeled
    candidates: np.ndarray  # (V,) surviving candidate count


def normalize_query(query: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).ravel()
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("query embedding has zero norm")
    return q / n


def select_gaussians(scene: GaussianScene, index: pq_index.PQIndex, query: np.ndarray,
                     config: QueryConfig = QueryConfig()) -> Selection:
    """Gaussians whose decoded descriptor scores at least ``tau_act`` against the query.

    The ADC shortlist starts at ``shortlist_size`` and doubles until its
    last ADC score proves no Gaussian outside it can reach the threshold.
    Unlabeled Gaussians are never selected.
    """
    q = normalize_query(query)
    if len(index) != len(scene):
        raise ValueError(f"index covers {len(index)} gaussians, scene has {len(scene)}")
    cb = index.codebook
    adc = pq_index.adc_scores(cb, index.codes, q)
    order = pq_index.rank(adc)
    raw_norm = np.linalg.norm(pq_index.decode_raw(cb, index.codes), axis=1)
    labeled = scene.labeled if scene.labeled is not None else np.ones(len(scene), bool)
    floor = raw_norm[labeled & (raw_norm > 0)].min(initial=np.inf)
    size = min(max(config.shortlist_size, 1), len(order))
    # the re-scored cosine of anything outside the shortlist is at most adc_last / floor
    while size < len(order) and adc[order[size - 1]] >= config.tau_act * floor:
        size = min(2 * size, len(order))
    short = order[:size]
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where(raw_norm[short] > 0, adc[short] / raw_norm[short], 0.0)
    keep = (score >= config.tau_act) & labeled[short]
    idx = short[keep]
    srt = np.argsort(idx, kind="stable")
    return Selection(idx[srt], score[keep][srt], size)


def select_exact(scene: GaussianScene, query: np.ndarray, tau_act: float,
                 descriptors: Optional[np.ndarray] = None) -> Selection:
    """Brute-force cosine thresholding over full (or supplied) descriptors."""
    q = normalize_query(query)
    d = np.asarray(scene.descriptors if descriptors is None else descriptors, dtype=np.float64)
    s = d @ q
    labeled = scene.labeled if scene.labeled is not None else np.ones(len(scene), bool)
    idx = np.flatnonzero((s >= tau_act) & labeled)
    return Selection(idx, s[idx], len(s))


def activation_map(hits: PixelHits, active: np.ndarray, n_gaussians: Optional[int] = None) -> np.ndarray:
    """Per-pixel blending weight carried by active Gaussians."""
    active = np.asarray(active)
    if active.dtype != bool:
        size = n_gaussians if n_gaussians is not None else int(max(active.max(initial=-1), hits.indices.max()) + 1)
        flag = np.zeros(size, bool)
        flag[active.astype(np.int64)] = True
        active = flag
    idx = hits.indices
    on = np.zeros(idx.shape, bool)
    valid = idx >= 0
    on[valid] = active[idx[valid]]
    return (hits.weights * on).sum(axis=-1)


def activation_mask(hits: PixelHits, active: np.ndarray, gamma: float = 0.5,
                    n_gaussians: Optional[int] = None) -> np.ndarray:
    """Binary mask of pixels whose active weight reaches ``gamma``.

    ``active`` is either a boolean flag per Gaussian or an array of ids.
    """
    return activation_map(hits, active, n_gaussians) >= gamma


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """IoU of two binary masks; two empty masks count as a perfect match."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    return 1.0 if union == 0 else float(np.logical_and(pred, gt).sum() / union)


def miou_macc(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
              acc_threshold: float = ACC_THRESHOLD) -> tuple[float, float]:
    """Mean IoU over query-frame pairs and the fraction with IoU >= ``acc_threshold``."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth masks")
    if not preds:
        raise ValueError("no query-frame pairs")
    ious = np.array([mask_iou(p, g) for p, g in zip(preds, gts)])
    return float(ious.mean()), float((ious >= acc_threshold).mean())


def tau_grid(start: float = 0.5, stop: float = 0.95, step: float = 0.025) -> np.ndarray:
    n = int(round((stop - start) / step))
    return np.round(start + step * np.arange(n + 1), 10)


def grid_search_tau(evaluate: Callable[[float], float], grid: Optional[Sequence[float]] = None):
    """Threshold with the highest ``evaluate(tau)``; ties go to the smaller tau.

    Returns (best_tau, {tau: score}).
    """
    grid = sorted(tau_grid() if grid is None else grid)
    if not grid:
        raise ValueError("empty tau grid")
    scores = {float(t): float(evaluate(float(t))) for t in grid}
    best = grid[0]
    for t in grid[1:]:
        if scores[float(t)] > scores[float(best)]:
            best = t
    return float(best), scores


@dataclass
class SelectionQuery:
    embedding: np.ndarray
    view: int
    gt_mask: np.ndarray


def evaluate_selection(scene: GaussianScene, index: pq_index.PQIndex, hits: dict[int, PixelHits],
                       queries: Sequence[SelectionQuery], config: QueryConfig = QueryConfig()):
    """Predicted activation masks for each query-frame pair at ``config.tau_act``."""
    preds = []
    for q in queries:
        sel = select_gaussians(scene, index, q.embedding, config)
        preds.append(activation_mask(hits[q.view], sel.indices, config.gamma, len(scene)))
    return preds


def _softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _inverse_covariances(scene: GaussianScene) -> np.ndarray:
    return np.linalg.inv(scene.covariances().astype(np.float64))


def transfer_to_points(scene: GaussianScene, points: np.ndarray, classes: np.ndarray,
                       config: TransferConfig = TransferConfig()) -> PointLabels:
    """Vertex class probabilities pooled from nearby labeled Gaussians.

    Candidates are the ``knn_k`` nearest labeled Gaussian centres that pass
    the Mahalanobis gate; each contributes its softmaxed class cosines with
    weight ``exp(-d^2 / 2) * opacity``. Vertices without candidates get
    label -1 and a zero row.
    """
    classes = np.asarray(classes, dtype=np.float64)
    if classes.ndim != 2 or classes.shape[0] == 0:
        raise ValueError("class embeddings must be a non-empty (C, D) matrix")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    V, C = len(pts), classes.shape[0]
    probs = np.zeros((V, C))
    labels = np.full(V, -1, dtype=np.int64)
    counts = np.zeros(V, dtype=np.int64)
    labeled = scene.labeled if scene.labeled is not None else np.ones(len(scene), bool)
    pool = np.flatnonzero(labeled)
    if len(pool) == 0 or V == 0:
        return PointLabels(probs, labels, counts)
    pos = scene.positions[pool].astype(np.float64)
    k = min(config.knn_k, len(pool))
    _, nn = cKDTree(pos).query(pts, k=k)
    nn = nn.reshape(V, k)
    g = pool[nn]
    inv = _inverse_covariances(scene)
    delta = pts[:, None, :] - scene.positions[g].astype(np.float64)
    d2 = np.einsum("vki,vkij,vkj->vk", delta, inv[g], delta)
    ok = d2 <= config.mahal_sigma**2
    w = np.where(ok, np.exp(-0.5 * d2) * scene.opacities[g], 0.0)
    cand_probs = _softmax(scene.descriptors.astype(np.float64) @ classes.T, config.temperature)
    acc = np.einsum("vk,vkc->vc", w, cand_probs[g])
    total = acc.sum(axis=1)
    counts = ok.sum(axis=1)
    has = (counts > 0) & (total > 0)
    probs[has] = acc[has] / total[has, None]
    labels[has] = np.argmax(probs[has], axis=1)
    logger.info("transferred labels to %d / %d vertices", int(has.sum()), V)
    return PointLabels(probs, labels, counts)


def point_metrics(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> dict[str, float]:
    """Per-class mIoU, mean class accuracy and overall accuracy; label -1 counts as wrong."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    ious, accs = [], []
    for c in range(n_classes):
        t, p = truth == c, pred == c
        if not t.any():
            continue
        ious.append((t & p).sum() / (t | p).sum())
        accs.append((t & p).sum() / t.sum())
    return {"miou": float(np.mean(ious)) if ious else 0.0,
            "macc": float(np.mean(accs)) if accs else 0.0,
            "accuracy": float((pred == truth).mean()) if len(pred) else 0.0}
