"""Product quantization of unit descriptors with asymmetric (ADC) search."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .container_io import read_records, write_records

logger = logging.getLogger(__name__)

MAX_CENTROIDS = 256
DEFAULT_ITERS = 25


@dataclass(frozen=True)
class PQCodebook:
    centroids: np.ndarray  # (m, k, D/m) float32

    @property
    def m(self) -> int:
        return self.centroids.shape[0]

    @property
    def k(self) -> int:
        return self.centroids.shape[1]

    @property
    def dim(self) -> int:
        return self.centroids.shape[0] * self.centroids.shape[2]

    def split(self, x: np.ndarray) -> np.ndarray:
        """(N, D) -> (m, N, D/m) subvectors."""
        x = np.asarray(x)
        if x.shape[-1] != self.dim:
            raise ValueError(f"descriptor dim {x.shape[-1]} does not match codebook dim {self.dim}")
        return x.reshape(x.shape[0], self.m, -1).transpose(1, 0, 2)


@dataclass(frozen=True)
class PQIndex:
    codebook: PQCodebook
    codes: np.ndarray  # (N, m) uint8

    def __len__(self) -> int:
        return self.codes.shape[0]


def default_m(dim: int) -> int:
    """Subvector count: D/8 when divisible, else D/4."""
    if dim % 8 == 0:
        return dim // 8
    if dim % 4 == 0:
        return dim // 4
    raise ValueError(f"no default subvector count for D={dim}; pass m explicitly")


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.maximum((x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :], 0.0)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [int(rng.integers(len(x)))]
    d2 = _sq_dists(x, x[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        nxt = int(rng.choice(len(x), p=d2 / total)) if total > 0 else int(rng.integers(len(x)))
        centers.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt:nxt + 1])[:, 0])
    return x[centers].copy()


def kmeans(x: np.ndarray, k: int, iters: int = DEFAULT_ITERS, seed=0) -> np.ndarray:
    """Lloyd iterations from a k-means++ start.

    An empty cluster takes over the member of the largest cluster farthest
    from that cluster's centre.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    c = _plusplus(x, k, rng)
    for _ in range(iters):
        d2 = _sq_dists(x, c)
        assign = np.argmin(d2, axis=1)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        new = c.copy()
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        for e in np.flatnonzero(~nonempty):
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            spread = ((x[members] - new[big]) ** 2).sum(1)
            if spread.max() == 0:
                continue
            far = members[int(np.argmax(spread))]
            new[e] = x[far]
            assign[far] = e
            counts[big] -= 1
            counts[e] = 1
        if np.array_equal(new, c):
            break
        c = new
    return c


def train(descriptors: np.ndarray, m: Optional[int] = None, iters: int = DEFAULT_ITERS, seed: int = 0,
          workers: int = 1) -> PQCodebook:
    """Per-subspace k-means codebooks with up to 256 centroids each.

    With fewer than 256 training rows the centroid count drops to the row count.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    n, dim = x.shape
    if n == 0:
        raise ValueError("cannot train a codebook on zero descriptors")
    m = default_m(dim) if m is None else m
    if m < 1 or dim % m:
        raise ValueError(f"D={dim} is not divisible by m={m}")
    k = min(MAX_CENTROIDS, n)
    subs = x.reshape(n, m, -1)
    seeds = np.random.SeedSequence(seed).spawn(m)

    def fit(j):
        return kmeans(subs[:, j], k, iters, np.random.default_rng(seeds[j]))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            cents = list(pool.map(fit, range(m)))
    else:
        cents = [fit(j) for j in range(m)]
    logger.info("trained PQ codebook: m=%d k=%d on %d rows", m, k, n)
    return PQCodebook(np.stack(cents).astype(np.float32))


def encode(codebook: PQCodebook, descriptors: np.ndarray) -> np.ndarray:
    subs = codebook.split(np.asarray(descriptors, dtype=np.float64))
    codes = np.empty((subs.shape[1], codebook.m), dtype=np.uint8)
    for j in range(codebook.m):
        codes[:, j] = np.argmin(_sq_dists(subs[j], codebook.centroids[j].astype(np.float64)), axis=1)
    return codes


def decode_raw(codebook: PQCodebook, codes: np.ndarray) -> np.ndarray:
    """Concatenated centroids, not renormalised."""
    codes = np.asarray(codes, dtype=np.int64)
    parts = [codebook.centroids[j].astype(np.float64)[codes[:, j]] for j in range(codebook.m)]
    return np.concatenate(parts, axis=1) if parts else np.zeros((len(codes), 0))


def decode(codebook: PQCodebook, codes: np.ndarray) -> np.ndarray:
    """Decoded rows scaled to unit length (zero rows stay zero)."""
    raw = decode_raw(codebook, codes)
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    return np.divide(raw, norm, out=np.zeros_like(raw), where=norm > 0)


def build_index(descriptors: np.ndarray, m: Optional[int] = None, iters: int = DEFAULT_ITERS, seed: int = 0,
                train_mask: Optional[np.ndarray] = None, workers: int = 1) -> PQIndex:
    """Train on the rows selected by ``train_mask`` (default all) and encode every row."""
    x = np.asarray(descriptors, dtype=np.float64)
    rows = x if train_mask is None else x[np.asarray(train_mask, bool)]
    if len(rows) == 0:
        rows = x
    cb = train(rows, m, iters, seed, workers)
    return PQIndex(cb, encode(cb, x))


def adc_table(codebook: PQCodebook, query: np.ndarray) -> np.ndarray:
    """(m, k) dot products of each query subvector with each centroid."""
    q = np.asarray(query, dtype=np.float64).reshape(codebook.m, -1)
    return np.einsum("jkd,jd->jk", codebook.centroids.astype(np.float64), q)


def adc_scores(codebook: PQCodebook, codes: np.ndarray, query: np.ndarray) -> np.ndarray:
    table = adc_table(codebook, query)
    codes = np.asarray(codes, dtype=np.int64)
    return table[np.arange(codebook.m)[None, :], codes].sum(axis=1)


def rank(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by ascending index."""
    return np.lexsort((np.arange(len(scores)), -np.asarray(scores)))


def search(codebook: PQCodebook, codes: np.ndarray, query: np.ndarray, shortlist_size: int) -> np.ndarray:
    """Top ``shortlist_size`` indices by ADC score."""
    return rank(adc_scores(codebook, codes, query))[:max(int(shortlist_size), 0)]


def save_index(path, index: PQIndex) -> None:
    write_records(Path(path), "pq_index", {"centroids": index.codebook.centroids.astype(np.float32),
                                            "codes": index.codes.astype(np.uint8)},
                  attrs={"m": index.codebook.m, "k": index.codebook.k, "count": len(index)})


def load_index(path) -> PQIndex:
    _, rec = read_records(Path(path), expect_kind="pq_index")
    return PQIndex(PQCodebook(rec["centroids"]), rec["codes"])
