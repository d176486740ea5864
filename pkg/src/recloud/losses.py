"""Chamfer distance and the training objectives built on it.

The Chamfer distance is the symmetric sum of mean squared nearest-neighbor
distances between two point sets. Distances stay squared (no roots). All
losses are differentiable Tensors; at exact nearest-neighbor ties the
gradient routes to the first (lowest) index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def _as_points(x, name: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim != 2 or t.data.shape[1] != 3:
        raise ValueError(f"{name} must have shape (count, 3), got {t.data.shape}")
    if t.data.shape[0] < 1:
        raise ValueError(f"{name} is empty")
    return t


def chamfer(a, b) -> Tensor:
    """Symmetric squared-distance Chamfer loss between two clouds."""
    ta = _as_points(a, "first cloud")
    tb = _as_points(b, "second cloud")
    d = ag.pairwise_sqdist(ta, tb)
    a_to_b = ag.mean_all(ag.min_over_axis(d, axis=1))
    b_to_a = ag.mean_all(ag.min_over_axis(d, axis=0))
    return ag.add(a_to_b, b_to_a)


def loss_nontransformer(recon, clean) -> Tensor:
    """Whole-cloud reconstruction divergence (the non-patch objective)."""
    return chamfer(recon, clean)


def loss_local(pred_patches: Tensor, gt_patches) -> Tensor:
    """Mean per-patch Chamfer loss over the masked patches."""
    gt = gt_patches.data if isinstance(gt_patches, Tensor) else np.asarray(gt_patches)
    if pred_patches.data.shape != gt.shape:
        raise ValueError(
            f"patch shape mismatch: predicted {pred_patches.data.shape} vs target {gt.shape}")
    m = pred_patches.data.shape[0]
    total = None
    for i in range(m):
        cd = chamfer(_patch_row(pred_patches, i), gt[i])
        total = cd if total is None else ag.add(total, cd)
    return ag.scale(total, 1.0 / m)


def _patch_row(patches: Tensor, i: int) -> Tensor:
    """Row i of an (m, k, 3) tensor as a (k, 3) tensor."""
    m, k, _ = patches.data.shape
    flat = ag.reshape(patches, (m, k * 3))
    row = ag.gather_rows(flat, [i])
    return ag.reshape(row, (k, 3))


def loss_global(pred_centers: Tensor, gt_centers) -> Tensor:
    """Chamfer loss between predicted and target patch-center sets."""
    gt = gt_centers.data if isinstance(gt_centers, Tensor) else np.asarray(gt_centers)
    if pred_centers.data.shape != gt.shape:
        raise ValueError(
            f"center shape mismatch: predicted {pred_centers.data.shape} vs target {gt.shape}")
    return chamfer(pred_centers, gt)


def loss_whole(pred_cloud, clean) -> Tensor:
    """Direct whole-cloud Chamfer loss (the non-decomposed objective variant)."""
    return chamfer(pred_cloud, clean)


@dataclass(frozen=True)
class LossReport:
    """Per-step loss summary: total = local + weight * global when the
    decomposed objective is active."""

    total: float
    local: float
    global_: float
    weight: float


def loss_all(local: Tensor, global_: Tensor, weight: float) -> tuple[Tensor, LossReport]:
    """Combine the local and global terms: total = local + weight * global.

    Returns the differentiable total plus a float report whose fields
    satisfy the decomposition identity in the same evaluation order.
    """
    if weight < 0:
        raise ValueError(f"global weight must be non-negative, got {weight}")
    total = ag.add(local, ag.scale(global_, weight))
    report = LossReport(total=float(total.data), local=float(local.data),
                        global_=float(global_.data), weight=float(weight))
    return total, report
