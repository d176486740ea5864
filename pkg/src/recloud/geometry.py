"""Pure geometric kernels: affine maps, farthest-point sampling, k-NN,
patchification, and patch (de)normalization.

All functions are pure; randomness enters only through explicitly passed
``numpy.random.Generator`` instances. Distances are squared Euclidean
throughout (no square roots). Ties in FPS and k-NN are broken by lowest
point index so results are reproducible and oracle-checkable.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


def as_cloud(points) -> np.ndarray:
    """Validate and canonicalize a point cloud to a (w, 3) float64 array.

    Raises ValueError for wrong shape, empty input, or non-finite values.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (w, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point cloud must contain at least one point")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class AffineTransform:
    """A 3x4 affine map: linear 3x3 block plus translation column.

    The implied homogeneous bottom row [0, 0, 0, 1] is never stored.
    ``provenance`` records which sub-families contributed to the matrix.
    """

    matrix: np.ndarray
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError(f"affine matrix must be 3x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix contains non-finite entries")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]))

    @property
    def linear(self) -> np.ndarray:
        """The 3x3 linear block."""
        return self.matrix[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 3]

    def homogeneous(self) -> np.ndarray:
        """Full 4x4 matrix with the implied bottom row."""
        h = np.eye(4)
        h[:3, :] = self.matrix
        return h

    def determinant(self) -> float:
        """Determinant of the linear block (orientation/volume factor)."""
        return float(np.linalg.det(self.linear))


def compose(second: AffineTransform, first: AffineTransform) -> AffineTransform:
    """Transform equivalent to applying ``first`` then ``second``."""
    h = second.homogeneous() @ first.homogeneous()
    return AffineTransform(h[:3, :], provenance=first.provenance + second.provenance)


def affine_apply(points: np.ndarray, transform: AffineTransform) -> np.ndarray:
    """Apply an affine transform point-wise: x' = A x + t.

    Rejects non-finite results (overflow from pathological matrices).
    """
    pts = as_cloud(points)
    with np.errstate(over="ignore", invalid="ignore"):
        out = pts @ transform.linear.T + transform.translation
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=1))[0])
        raise ValueError(
            f"affine application produced non-finite coordinates (first bad point "
            f"index {bad}; matrix max |entry| {np.abs(transform.matrix).max():g})"
        )
    return out


def farthest_point_sample(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Select ``n`` point indices by farthest-point sampling.

    The start index is drawn uniformly from ``rng``; each subsequent pick
    maximizes the minimum squared distance to all previously selected
    points, ties broken by lowest index. Already-selected points are
    never re-selected.
    """
    pts = as_cloud(points)
    w = pts.shape[0]
    if n <= 0:
        raise ValueError(f"sample count must be positive, got {n}")
    if n > w:
        raise ValueError(f"sample count {n} exceeds cloud size {w}")

    selected = np.empty(n, dtype=np.int64)
    selected[0] = int(rng.integers(w))
    # min squared distance from each point to the selected set; selected
    # entries are forced to -1 so argmax never revisits them (matters for
    # clouds with duplicate points).
    min_sq = np.sum((pts - pts[selected[0]]) ** 2, axis=1)
    min_sq[selected[0]] = -1.0
    for i in range(1, n):
        nxt = int(np.argmax(min_sq))  # argmax takes the first max: lowest index
        selected[i] = nxt
        sq = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_sq, sq, out=min_sq)
        min_sq[nxt] = -1.0
    return selected


@dataclass(frozen=True)
class Neighborhood:
    """Result of a k-NN query: indices sorted by ascending squared distance."""

    query_index: int
    indices: np.ndarray
    sq_distances: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        d = np.asarray(self.sq_distances, dtype=np.float64)
        if idx.ndim != 1 or d.shape != idx.shape:
            raise ValueError("indices and distances must be matching 1-D arrays")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("neighbor indices must be distinct")
        if np.any(np.diff(d) < 0):
            raise ValueError("neighbor distances must be non-decreasing")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "sq_distances", d)


def knn(points: np.ndarray, query: np.ndarray, k: int, query_index: int = -1) -> Neighborhood:
    """The ``k`` nearest points to ``query`` by squared Euclidean distance.

    Ties are broken by lowest index. ``query_index`` is bookkeeping for
    callers whose query is itself a cloud point.
    """
    pts = as_cloud(points)
    w = pts.shape[0]
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > w:
        raise ValueError(f"k={k} exceeds cloud size {w}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    sq = np.sum((pts - q) ** 2, axis=1)
    # stable sort keeps index order within equal distances: lowest-index ties
    order = np.argsort(sq, kind="stable")[:k]
    return Neighborhood(query_index=query_index, indices=order, sq_distances=sq[order])


@dataclass(frozen=True)
class PatchSet:
    """Patch centers plus per-center k-NN patches.

    ``patches[i]`` holds the k nearest points (center included) to
    ``centers[i]``; ``indices[i]`` are their source-cloud indices. When
    ``normalized`` is true, patch coordinates are relative to their center.
    """

    centers: np.ndarray
    patches: np.ndarray
    indices: np.ndarray | None
    normalized: bool

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        p = np.asarray(self.patches, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValueError(f"centers must be (n, 3), got {c.shape}")
        if p.ndim != 3 or p.shape[0] != c.shape[0] or p.shape[2] != 3:
            raise ValueError(f"patches must be (n, k, 3) matching centers, got {p.shape}")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "patches", p)

    @property
    def num_patches(self) -> int:
        return self.centers.shape[0]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]


def patchify(points: np.ndarray, num_patches: int, patch_size: int,
             rng: np.random.Generator) -> PatchSet:
    """FPS-selected centers, each grouped with its ``patch_size`` nearest points."""
    pts = as_cloud(points)
    center_idx = farthest_point_sample(pts, num_patches, rng)
    centers = pts[center_idx]
    idx = np.empty((num_patches, patch_size), dtype=np.int64)
    for i in range(num_patches):
        idx[i] = knn(pts, centers[i], patch_size, query_index=int(center_idx[i])).indices
    return PatchSet(centers=centers, patches=pts[idx], indices=idx, normalized=False)


def normalize_patches(ps: PatchSet) -> PatchSet:
    """Shift each patch into its center's frame (subtract the center)."""
    if ps.normalized:
        raise ValueError("patch set is already normalized")
    return replace(ps, patches=ps.patches - ps.centers[:, None, :], normalized=True)


def denormalize_patches(ps: PatchSet) -> PatchSet:
    """Restore absolute coordinates (add the center back)."""
    if not ps.normalized:
        raise ValueError("patch set is not normalized")
    return replace(ps, patches=ps.patches + ps.centers[:, None, :], normalized=False)
