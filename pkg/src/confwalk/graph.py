"""k-nearest-neighbor cosine graph over feature-map pixels.

The graph is directed: each pixel keeps its own k nearest neighbors in
embedding space (itself always included, pinned first at distance zero),
weighted by an exponential kernel and row-normalized into a sparse
row-stochastic transition matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DegenerateRow, RangeViolation, ZeroVector
from .tensors import FeatureMap

ROW_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class GraphConfig:
    """Neighbor count and kernel scale for the similarity graph."""

    k: int = 20
    beta: float = 50.0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")


@dataclass(frozen=True)
class NeighborList:
    """Per-pixel nearest neighbors, sorted by (distance, index), self first.

    indices and distances have shape (M, min(k, M)). Ties in distance are
    broken by ascending neighbor index, except that each pixel's own entry
    is always pinned first at distance 0.
    """

    k: int
    indices: np.ndarray
    distances: np.ndarray

    @property
    def num_pixels(self) -> int:
        return self.indices.shape[0]

    @property
    def entries_per_pixel(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class RawAdjacency:
    """Kernel-weighted neighbor entries, not yet normalized."""

    k: int
    indices: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class TransitionMatrix:
    """Sparse row-stochastic matrix over pixels (CSR, sorted column indices)."""

    matrix: sp.csr_matrix
    k: int

    @property
    def num_pixels(self) -> int:
        return self.matrix.shape[0]

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def validate(self) -> None:
        """Check row-stochasticity, nonnegativity, and per-row entry bounds."""
        sums = self.row_sums()
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOLERANCE):
            worst = float(np.abs(sums - 1.0).max())
            raise RangeViolation(f"row sums deviate from 1 by up to {worst}")
        if self.matrix.nnz and self.matrix.data.min() < 0.0:
            raise RangeViolation("negative transition weight")
        per_row = np.diff(self.matrix.indptr)
        if per_row.max(initial=0) > self.k:
            raise RangeViolation(
                f"a row has {int(per_row.max())} entries, more than k={self.k}"
            )


def knn_search(features: FeatureMap, k: int) -> NeighborList:
    """Exact cosine-distance kNN over all feature-map pixels.

    Brute force with blocked evaluation; deterministic under ties
    (ascending pixel index wins). The query pixel itself is always the
    first entry at distance exactly 0.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    vecs = features.vectors.reshape(-1, features.dim)
    num = vecs.shape[0]
    norms = np.linalg.norm(vecs, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.argmax(norms == 0.0))
        raise ZeroVector(f"feature vector {bad} has zero norm")
    unit = vecs / norms[:, None]

    k_sel = min(k, num)
    indices = np.empty((num, k_sel), dtype=np.int64)
    distances = np.empty((num, k_sel), dtype=np.float64)

    block = max(1, (1 << 22) // num)
    for start in range(0, num, block):
        stop = min(start + block, num)
        dist = 1.0 - unit[start:stop] @ unit.T
        np.clip(dist, 0.0, 2.0, out=dist)
        # Pin self strictly below any real distance so it always ranks first.
        dist[np.arange(stop - start), np.arange(start, stop)] = -1.0
        if num <= 2048 or k_sel == num:
            # Stable sort over ascending column indices == tie-break by index.
            order = np.argsort(dist, axis=1, kind="stable")[:, :k_sel]
        else:
            part = np.argpartition(dist, k_sel - 1, axis=1)[:, :k_sel]
            part_dist = np.take_along_axis(dist, part, axis=1)
            order = np.take_along_axis(
                part, np.lexsort((part, part_dist), axis=1), axis=1
            )
            # argpartition breaks boundary ties arbitrarily; redo any row
            # where candidates tie at the cut so the index rule wins there.
            cuts = part_dist.max(axis=1)
            for r in np.nonzero((dist <= cuts[:, None]).sum(axis=1) > k_sel)[0]:
                row = dist[r]
                cand = np.nonzero(row <= cuts[r])[0]
                order[r] = cand[np.lexsort((cand, row[cand]))[:k_sel]]
        indices[start:stop] = order
        distances[start:stop] = np.take_along_axis(dist, order, axis=1)

    distances[:, 0] = 0.0  # self entry, sentinel replaced
    return NeighborList(k=k, indices=indices, distances=distances)


def transition_weights(neighbors: NeighborList, beta: float) -> RawAdjacency:
    """Exponential kernel weights exp(-beta * distance) per neighbor entry."""
    if not beta > 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    weights = np.exp(-beta * neighbors.distances)
    return RawAdjacency(k=neighbors.k, indices=neighbors.indices, weights=weights)


def row_normalize(raw: RawAdjacency) -> TransitionMatrix:
    """Divide each row by its weight sum, producing a row-stochastic CSR."""
    sums = raw.weights.sum(axis=1)
    if np.any(sums <= 0.0):
        bad = int(np.argmax(sums <= 0.0))
        raise DegenerateRow(f"row {bad} sums to {sums[bad]}, cannot normalize")
    num, per_row = raw.indices.shape
    rows = np.repeat(np.arange(num), per_row)
    vals = (raw.weights / sums[:, None]).ravel()
    mat = sp.csr_matrix(
        (vals, (rows, raw.indices.ravel())), shape=(num, num), dtype=np.float64
    )
    mat.sort_indices()
    tm = TransitionMatrix(matrix=mat, k=raw.k)
    tm.validate()
    return tm


def build_transition_matrix(features: FeatureMap, cfg: GraphConfig) -> TransitionMatrix:
    """kNN search, kernel weighting, and row normalization in one call."""
    return row_normalize(transition_weights(knn_search(features, cfg.k), cfg.beta))


def dump_transition_csv(tm: TransitionMatrix, path: str | Path) -> None:
    """Debug dump of the sparse matrix as (row, col, weight) rows."""
    coo = tm.matrix.tocoo()
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["row", "col", "weight"])
        for r, c, w in zip(coo.row, coo.col, coo.data):
            writer.writerow([int(r), int(c), repr(float(w))])
