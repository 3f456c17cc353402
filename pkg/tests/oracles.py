"""Independent brute-force reference implementations used by the tests.

Everything here favors obviousness over speed: explicit loops, scalar
arithmetic, no shared code with the package internals beyond numpy basics.
"""

from __future__ import annotations

import math

import numpy as np


def brute_knn(vectors: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive cosine kNN: self first at distance 0, then (distance, index)."""
    m = vectors.shape[0]
    k_sel = min(k, m)
    norms = [math.sqrt(float(np.dot(v, v))) for v in vectors]
    indices = np.zeros((m, k_sel), dtype=np.int64)
    distances = np.zeros((m, k_sel), dtype=np.float64)
    for i in range(m):
        cands = []
        for j in range(m):
            if j == i:
                continue
            d = 1.0 - float(np.dot(vectors[i], vectors[j])) / (norms[i] * norms[j])
            d = min(max(d, 0.0), 2.0)
            cands.append((d, j))
        cands.sort()
        chosen = [(0.0, i)] + cands[: k_sel - 1]
        indices[i] = [c[1] for c in chosen]
        distances[i] = [c[0] for c in chosen]
    return indices, distances


def dense_power_diffuse(p_dense: np.ndarray, s0: np.ndarray, n_step: int) -> np.ndarray:
    """n_step explicit dense matrix-vector products."""
    vec = s0.astype(np.float64).ravel().copy()
    for _ in range(n_step):
        vec = p_dense @ vec
    return vec.reshape(s0.shape)


def brute_contour(mask: np.ndarray) -> list[tuple[int, int]]:
    """Foreground pixels with a background 4-neighbor or on the border."""
    h, w = mask.shape
    points = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            on_border = y == 0 or x == 0 or y == h - 1 or x == w - 1
            bg_neighbor = False
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and not mask[ny, nx]:
                    bg_neighbor = True
            if on_border or bg_neighbor:
                points.append((y, x))
    return points


def _directed(src: list[tuple[int, int]], dst: list[tuple[int, int]]) -> list[float]:
    out = []
    for (y1, x1) in src:
        best = math.inf
        for (y2, x2) in dst:
            d = math.hypot(y1 - y2, x1 - x2)
            if d < best:
                best = d
        out.append(best)
    return out


def brute_surface_distances(a: np.ndarray, b: np.ndarray) -> list[float]:
    ca = brute_contour(a)
    cb = brute_contour(b)
    return _directed(ca, cb) + _directed(cb, ca)


def brute_assd(a: np.ndarray, b: np.ndarray) -> float:
    pooled = brute_surface_distances(a, b)
    return sum(pooled) / len(pooled)


def linear_percentile(values: list[float], q: float) -> float:
    """Percentile with linear interpolation between closest order statistics."""
    data = sorted(values)
    if len(data) == 1:
        return data[0]
    rank = (q / 100.0) * (len(data) - 1)
    lo = int(math.floor(rank))
    frac = rank - lo
    if lo + 1 >= len(data):
        return data[-1]
    return data[lo] + (data[lo + 1] - data[lo]) * frac


def brute_hd95(a: np.ndarray, b: np.ndarray) -> float:
    return linear_percentile(brute_surface_distances(a, b), 95.0)


def brute_hd100(a: np.ndarray, b: np.ndarray) -> float:
    return max(brute_surface_distances(a, b))


def dense_grid_calibrate(
    fg_score_sets: list[np.ndarray], alpha_star: float, step: float = 1e-5
) -> float:
    """Smallest grid lambda whose mean FNR meets the target.

    fg_score_sets holds, per image, the scores of the true-foreground
    pixels. Images with no foreground contribute zero loss.
    """
    grid = np.linspace(0.0, 1.0, round(1.0 / step) + 1)
    total = np.zeros(grid.size)
    n = len(fg_score_sets)
    for fg in fg_score_sets:
        if fg.size == 0:
            continue
        s = np.sort(fg)
        covered = s.size - np.searchsorted(s, 1.0 - grid, side="left")
        total += 1.0 - covered / s.size
    risks = total / n
    feasible = np.nonzero(risks <= alpha_star)[0]
    assert feasible.size > 0, "lambda = 1 always has zero FNR"
    return float(grid[feasible[0]])
