"""Box geometry, set-matching costs and the BoxNet training loss.

Scalar functions operate on plain floats (float64) and are the reference
implementation; the ``*_torch`` variants are the differentiable batch versions
used during training and are tested against the scalar ones.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .box import Box

log = logging.getLogger(__name__)

LAMBDA_CLASS = 100.0
LAMBDA_IOU = 2.0
LAMBDA_L1 = 5.0


@dataclass(frozen=True)
class Lambdas:
    cls: float = LAMBDA_CLASS
    iou: float = LAMBDA_IOU
    l1: float = LAMBDA_L1

    def __post_init__(self):
        if self.cls < 0:
            raise ValueError("class penalty must be nonnegative")


def box_cxcywh_to_xyxy(box) -> tuple[float, float, float, float]:
    cx, cy, w, h = box.as_tuple() if isinstance(box, Box) else box
    clamp = lambda v: min(1.0, max(0.0, v))  # noqa: E731
    return (clamp(cx - w / 2), clamp(cy - h / 2), clamp(cx + w / 2), clamp(cy + h / 2))


def giou(a, b) -> float:
    """Generalized IoU of two (x0, y0, x1, y1) boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    if ax1 < ax0 or ay1 < ay0 or bx1 < bx0 or by1 < by0:
        raise ValueError("malformed box: expected x0 <= x1 and y0 <= y1")
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = area_a + area_b - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    iou = inter / union if union > 0 else 0.0
    if hull <= 0:
        return iou
    return iou - (hull - union) / hull


def box_loss(pred, gt, lambdas: Lambdas = Lambdas()) -> float:
    p = pred.as_tuple() if isinstance(pred, Box) else tuple(pred)
    g = gt.as_tuple() if isinstance(gt, Box) else tuple(gt)
    l1 = sum(abs(x - y) for x, y in zip(p, g))
    if l1 == 0.0:
        return 0.0
    return lambdas.iou * (1.0 - giou(box_cxcywh_to_xyxy(p), box_cxcywh_to_xyxy(g))) + lambdas.l1 * l1


def match_cost(pred: tuple, gt: tuple, lambdas: Lambdas = Lambdas()) -> float:
    (pbox, pcat), (gbox, gcat) = pred, gt
    return lambdas.cls * float(pcat != gcat) + box_loss(pbox, gbox, lambdas)


@dataclass
class MatchProblem:
    predictions: Sequence[tuple]
    ground_truth: Sequence[tuple]
    lambdas: Lambdas = field(default_factory=Lambdas)

    def cost_matrix(self) -> np.ndarray:
        return np.array([[match_cost(p, g, self.lambdas) for g in self.ground_truth]
                         for p in self.predictions], dtype=np.float64).reshape(len(self.predictions), -1)


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float


def _hungarian_rows_le_cols(cost: np.ndarray) -> list[int]:
    """Shortest augmenting path with potentials; requires rows <= cols.

    Returns, for each row, its assigned column.
    """
    n, m = cost.shape
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row (1-based) matched to column j
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0, delta, j1 = p[j0], INF, 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j], way[j] = cur, j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = [-1] * n
    for j in range(1, m + 1):
        if p[j]:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col


def linear_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of size min(rows, cols); pairs sorted by row."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    r, c = cost.shape
    if r == 0 or c == 0:
        return []
    if r <= c:
        return [(i, j) for i, j in enumerate(_hungarian_rows_le_cols(cost))]
    cols = _hungarian_rows_le_cols(cost.T)
    return sorted((i, j) for j, i in enumerate(cols))


def _optimal_value(cost: np.ndarray) -> float:
    return float(sum(cost[i, j] for i, j in linear_assignment(cost)))


def lexicographic_assignment(cost: np.ndarray, rtol: float = 1e-9) -> list[tuple[int, int]]:
    """Among all optimal assignments, the one whose sorted pair list is lexicographically smallest.

    Rows are fixed greedily in order: a row is matched to the smallest column
    that keeps the optimum reachable, and skipped only when it must be.
    """
    cost = np.asarray(cost, dtype=np.float64)
    pairs = linear_assignment(cost)
    r, c = cost.shape
    k = min(r, c)
    if k == 0:
        return []
    best = sum(cost[i, j] for i, j in pairs)
    tol = rtol * max(1.0, abs(best), float(np.abs(cost).max()))
    chosen: list[tuple[int, int]] = []
    spent = 0.0
    free_cols = list(range(c))
    for i in range(r):
        need = k - len(chosen)
        if need == 0:
            break
        rest = list(range(i + 1, r))
        picked = None
        if len(rest) >= need - 1:
            for j in free_cols:
                cols = [x for x in free_cols if x != j]
                sub = _optimal_value(cost[np.ix_(rest, cols)]) if need > 1 else 0.0
                if spent + cost[i, j] + sub <= best + tol:
                    picked = j
                    break
        if picked is not None:
            chosen.append((i, picked))
            spent += cost[i, picked]
            free_cols.remove(picked)
        elif len(rest) < need:
            raise RuntimeError("tie-break search lost feasibility")
    return chosen


def hungarian_match(problem: MatchProblem) -> Assignment:
    keep = []
    for g_idx, (gbox, _) in enumerate(problem.ground_truth):
        x0, y0, x1, y1 = box_cxcywh_to_xyxy(gbox)
        if (x1 - x0) * (y1 - y0) <= 0:
            log.warning("dropping zero-area ground-truth box %d", g_idx)
            continue
        keep.append(g_idx)
    gts = [problem.ground_truth[g] for g in keep]
    sub = MatchProblem(problem.predictions, gts, problem.lambdas)
    cost = sub.cost_matrix()
    if cost.size == 0:
        return Assignment((), 0.0)
    pairs = lexicographic_assignment(cost)
    total = float(sum(cost[i, j] for i, j in pairs))
    return Assignment(tuple((i, keep[j]) for i, j in pairs), total)


def boxnet_loss(preds: Sequence[tuple], gts: Sequence[tuple], lambdas: Lambdas = Lambdas()) -> float:
    """Sum of box losses over the class-aware optimal matching (no class term in the loss)."""
    assignment = hungarian_match(MatchProblem(preds, gts, lambdas))
    return float(sum(box_loss(preds[i][0], gts[j][0], lambdas) for i, j in assignment.pairs))


# --- differentiable batch versions -------------------------------------------------

def cxcywh_to_xyxy_torch(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    out = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)
    return out.clamp(0.0, 1.0)


def giou_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU of broadcastable (..., 4) xyxy tensors."""
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))
    hlt = torch.minimum(a[..., :2], b[..., :2])
    hrb = torch.maximum(a[..., 2:], b[..., 2:])
    hull = (hrb - hlt).clamp(min=0).prod(-1)
    return torch.where(hull > 0, iou - (hull - union) / hull.clamp(min=1e-12), iou)


def box_loss_torch(pred: torch.Tensor, gt: torch.Tensor, lambdas: Lambdas = Lambdas()) -> torch.Tensor:
    """Elementwise box loss of broadcastable (..., 4) cxcywh tensors."""
    g = giou_torch(cxcywh_to_xyxy_torch(pred), cxcywh_to_xyxy_torch(gt))
    return lambdas.iou * (1 - g) + lambdas.l1 * (pred - gt).abs().sum(-1)


def match_cost_matrix_torch(pred: torch.Tensor, pred_cats: Sequence[int], gt: torch.Tensor,
                            gt_cats: Sequence[int], lambdas: Lambdas = Lambdas()) -> torch.Tensor:
    """(n_pred, n_gt) class-penalized matching costs."""
    box = box_loss_torch(pred[:, None, :], gt[None, :, :], lambdas)
    mismatch = torch.tensor([[float(p != g) for g in gt_cats] for p in pred_cats],
                            dtype=box.dtype, device=box.device).reshape(box.shape)
    return lambdas.cls * mismatch + box
