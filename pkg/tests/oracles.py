"""Brute-force reference implementations used only by the tests.

These deliberately stay dumb (python loops, full sorts) and independent of
the library code paths they check.
"""
from __future__ import annotations

import numpy as np


def sqdist(a, b) -> float:
    return float(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def fps_oracle(points: np.ndarray, n: int, start: int) -> list[int]:
    """Greedy max-min selection from a given start index; lowest-index ties."""
    w = len(points)
    selected = [start]
    while len(selected) < n:
        best_idx, best_d = None, -1.0
        for i in range(w):
            if i in selected:
                continue
            d = min(sqdist(points[i], points[j]) for j in selected)
            if d > best_d:  # strict: first (lowest) index wins ties
                best_d, best_idx = d, i
        selected.append(best_idx)
    return selected


def knn_oracle(points: np.ndarray, query, k: int) -> list[int]:
    """Full sort by (squared distance, index)."""
    order = sorted(range(len(points)), key=lambda i: (sqdist(points[i], query), i))
    return order[:k]


def chamfer_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Double-loop Chamfer distance, squared form."""
    forward = sum(min(sqdist(p, q) for q in b) for p in a) / len(a)
    backward = sum(min(sqdist(q, p) for p in a) for q in b) / len(b)
    return forward + backward


def replay_cluster_mask(points: np.ndarray, centers: tuple[int, ...],
                        sizes: tuple[int, ...]) -> list[int]:
    """Re-derive the masked set from recorded cluster centers and sizes:
    each cluster drops the nearest surviving points to its center."""
    surviving = list(range(len(points)))
    dropped: list[int] = []
    for center, size in zip(centers, sizes):
        order = sorted(surviving, key=lambda i: (sqdist(points[i], points[center]), i))
        take = order[:size]
        dropped += take
        surviving = [i for i in surviving if i not in take]
    return sorted(dropped)
