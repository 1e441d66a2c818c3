"""Grid-CNN cell merging.

Per-cell RoI features arranged as an M x N map, 3x3 grid convolutions,
a relation MLP scoring 4-adjacent cell pairs from appearance + spatial
compatibility features, pair labeling against ground-truth cells, the
OHEM merge loss, and merge application into the final table structure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Box, QuadBox, spatial_compat_feature
from .grid_assembler import CellGrid
from .neural_ops import FeatureMap, init_head_weights, roi_align
from .structure import CellSpan, TableStructure

logger = logging.getLogger(__name__)

FEATURE_DIM = 512
PAIR_FEATURE_DIM = FEATURE_DIM * 2 + 18  # [F_i; l_ij; F_j]

Pair = tuple[tuple[int, int], tuple[int, int]]


class MergeHead(nn.Module):
    """Cell descriptor MLP, grid convolutions, and the relation classifier."""

    def __init__(self, in_channels: int = 64, roi_size: int = 7):
        super().__init__()
        self.roi_size = roi_size
        # batch norm across the grid's cells keeps the descriptors from
        # collapsing to a common vector when trained from random features;
        # batch stats at inference too (single-grid batches)
        self.cell_fc = nn.Sequential(
            nn.Linear(in_channels * roi_size * roi_size, FEATURE_DIM),
            nn.BatchNorm1d(FEATURE_DIM, track_running_stats=False),
            nn.ReLU(),
            nn.Linear(FEATURE_DIM, FEATURE_DIM),
            nn.BatchNorm1d(FEATURE_DIM, track_running_stats=False),
            nn.ReLU(),
        )
        self.grid_convs = nn.Sequential(
            nn.Conv2d(FEATURE_DIM, FEATURE_DIM, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(FEATURE_DIM, FEATURE_DIM, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(FEATURE_DIM, FEATURE_DIM, 3, padding=1),
        )
        self.relation = nn.Sequential(
            nn.Linear(PAIR_FEATURE_DIM, FEATURE_DIM),
            nn.ReLU(),
            nn.Linear(FEATURE_DIM, FEATURE_DIM),
            nn.ReLU(),
            nn.Linear(FEATURE_DIM, 1),
        )
        # fan-in default init for the hidden layers (no normalization in
        # this head, so tiny gaussian weights would collapse activations);
        # the output layer keeps the small gaussian init
        init_head_weights(self.relation[-1])


def cell_hull(grid: CellGrid, r: int, c: int) -> Box:
    return grid.cells[r][c].hull()


def grid_features(p2: FeatureMap, grid: CellGrid, head: MergeHead) -> torch.Tensor:
    """(M, N, 512) cell descriptors from RoI-aligned backbone features.

    Degenerate cells (hull smaller than one pixel) get a zero vector.
    """
    m, n = grid.rows, grid.cols
    img_w = p2.width * p2.stride
    img_h = p2.height * p2.stride
    boxes, slots = [], []
    for r in range(m):
        for c in range(n):
            hull = cell_hull(grid, r, c)
            x1 = min(max(hull.x, 0.0), img_w - 1.0)
            y1 = min(max(hull.y, 0.0), img_h - 1.0)
            x2 = min(max(hull.x2, x1), float(img_w))
            y2 = min(max(hull.y2, y1), float(img_h))
            if (x2 - x1) * (y2 - y1) < 1.0:
                logger.warning("degenerate grid cell (%d, %d); zero feature", r, c)
                continue
            boxes.append(Box.from_xyxy(x1, y1, x2, y2))
            slots.append((r, c))
    out = p2.values.new_zeros((m, n, FEATURE_DIM))
    if boxes:
        rois = roi_align(p2.values, boxes, p2.stride, out_size=head.roi_size)
        feats = head.cell_fc(rois.flatten(1))
        for (r, c), f in zip(slots, feats):
            out[r, c] = f
    return out


def grid_cnn(features: torch.Tensor, head: MergeHead) -> torch.Tensor:
    """Three 3x3 convolutions over the M x N arrangement; shape preserved."""
    x = features.permute(2, 0, 1)[None]
    return head.grid_convs(x)[0].permute(1, 2, 0)


def adjacent_pairs(rows: int, cols: int) -> list[Pair]:
    pairs: list[Pair] = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                pairs.append(((r, c), (r, c + 1)))
            if r + 1 < rows:
                pairs.append(((r, c), (r + 1, c)))
    return pairs


def score_pairs(
    fgrid: torch.Tensor, grid: CellGrid, head: MergeHead
) -> tuple[list[Pair], torch.Tensor]:
    """Relation scores for all unordered 4-adjacent pairs.

    Each pair is evaluated in both orders and the maximum of the two
    sigmoid outputs is the final merging score.
    """
    pairs = adjacent_pairs(grid.rows, grid.cols)
    if not pairs:
        return pairs, fgrid.new_zeros((0,))
    hulls = {}

    def hull(rc):
        if rc not in hulls:
            hulls[rc] = cell_hull(grid, *rc)
        return hulls[rc]

    feats_fwd, feats_bwd = [], []
    for a, b in pairs:
        l_ij = torch.as_tensor(
            spatial_compat_feature(hull(a), hull(b)), dtype=fgrid.dtype
        )
        l_ji = torch.as_tensor(
            spatial_compat_feature(hull(b), hull(a)), dtype=fgrid.dtype
        )
        fa, fb = fgrid[a[0], a[1]], fgrid[b[0], b[1]]
        feats_fwd.append(torch.cat([fa, l_ij, fb]))
        feats_bwd.append(torch.cat([fb, l_ji, fa]))
    batch = torch.stack(feats_fwd + feats_bwd)
    logits = head.relation(batch).squeeze(-1)
    scores = torch.sigmoid(logits)
    p = len(pairs)
    return pairs, torch.maximum(scores[:p], scores[p:])


def assign_cells_to_gt(det_hulls: list[Box], gt_hulls: list[Box]) -> np.ndarray:
    """Index of the ground-truth cell owning each detected cell, or -1.

    A detected cell is assigned to the ground-truth cell maximizing
    area(det & gt) / area(det), only when that ratio exceeds 0.5.
    """
    assign = np.full(len(det_hulls), -1, dtype=np.int64)
    if not gt_hulls:
        return assign
    for i, det in enumerate(det_hulls):
        ratios = [det.intersection_area(gt) / det.area for gt in gt_hulls]
        best = int(np.argmax(ratios))
        if ratios[best] > 0.5:
            assign[i] = best
    return assign


def label_pairs(
    grid: CellGrid, gt_cells: list[Box], pairs: list[Pair] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Merge labels per adjacent pair: 1 same ground-truth cell, 0 both
    assigned but different, -1 when either cell is unassigned."""
    if pairs is None:
        pairs = adjacent_pairs(grid.rows, grid.cols)
    det_hulls = [cell_hull(grid, r, c) for r in range(grid.rows) for c in range(grid.cols)]
    assign = assign_cells_to_gt(det_hulls, gt_cells)
    lookup = assign.reshape(grid.rows, grid.cols)
    labels = np.empty(len(pairs), dtype=np.int64)
    for k, (a, b) in enumerate(pairs):
        ga, gb = lookup[a], lookup[b]
        if ga < 0 or gb < 0:
            labels[k] = -1
        else:
            labels[k] = 1 if ga == gb else 0
    return labels, assign


def merge_loss(
    scores: torch.Tensor,
    labels: np.ndarray,
    n_positive: int = 64,
    n_negative: int = 64,
) -> torch.Tensor:
    """Mean BCE over the hardest positive/negative pairs (all when fewer)."""
    eps = 1e-6
    labels_t = torch.as_tensor(labels)
    p = scores.clamp(eps, 1 - eps)
    losses = torch.where(labels_t == 1, -torch.log(p), -torch.log(1 - p))
    selected = []
    for value, count in ((1, n_positive), (0, n_negative)):
        idx = (labels_t == value).nonzero(as_tuple=True)[0]
        if len(idx) == 0:
            continue
        hardness = losses[idx].detach()
        take = idx[torch.argsort(hardness, descending=True)[:count]]
        selected.append(take)
    if not selected:
        return scores.sum() * 0.0
    chosen = torch.cat(selected)
    return losses[chosen].mean()


def apply_merges(
    grid: CellGrid, pairs: list[Pair], scores: np.ndarray, threshold: float = 0.8
) -> TableStructure:
    """Connected components of the merge graph, expanded to grid-aligned
    rectangles (re-merged transitively on overlap), as the final cells."""
    m, n = grid.rows, grid.cols
    parent = list(range(m * n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    for (a, b), s in zip(pairs, scores):
        if s >= threshold:
            union(a[0] * n + a[1], b[0] * n + b[1])

    rects: dict[int, list[int]] = {}
    for r in range(m):
        for c in range(n):
            root = find(r * n + c)
            if root not in rects:
                rects[root] = [r, r, c, c]
            else:
                box = rects[root]
                box[0] = min(box[0], r)
                box[1] = max(box[1], r)
                box[2] = min(box[2], c)
                box[3] = max(box[3], c)

    spans = list(rects.values())
    merged = True
    while merged:
        merged = False
        for i in range(len(spans)):
            for j in range(i + 1, len(spans)):
                a, b = spans[i], spans[j]
                if a[0] <= b[1] and b[0] <= a[1] and a[2] <= b[3] and b[2] <= a[3]:
                    spans[i] = [
                        min(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), max(a[3], b[3])
                    ]
                    del spans[j]
                    merged = True
                    break
            if merged:
                break

    cells = []
    for r0, r1, c0, c1 in sorted(spans, key=lambda s: (s[0], s[2])):
        quad = QuadBox(
            (
                tuple(grid.cells[r0][c0].points[0]),
                tuple(grid.cells[r0][c1].points[1]),
                tuple(grid.cells[r1][c1].points[2]),
                tuple(grid.cells[r1][c0].points[3]),
            )
        )
        cells.append(CellSpan(r0, r1, c0, c1, quad))
    structure = TableStructure(rows=m, cols=n, cells=cells)
    structure.validate()
    return structure
