"""Separation-line prediction and its ground truth.

Two spatial-CNN segmentation branches over the shared stride-4 feature
map predict a row separator mask of shape (H, W/8) and a column mask of
shape (H/8, W). Ground-truth separation regions grow from the annotated
lines until they touch a non-spanning cell's text box, with an 8 px
minimum thickness, and are rasterized at the branch output resolutions.

The TSRModel here bundles the shared backbone with the split and merge
heads; both stages train jointly through the same feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datagen import TableAnnotation
from .geometry import Box
from .merger import MergeHead
from .neural_ops import (
    DownsampleBlock,
    FeatureMap,
    SlicePropagation,
    TSRBackbone,
    conv_bn_relu,
    init_head_weights,
)

MIN_THICKNESS = 8.0
MASK_REDUCTION = 8


class AnnotationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ground truth


@dataclass
class SeparatorRegion:
    """Center polyline plus perpendicular extents toward smaller/larger
    coordinates (up/down for row regions, left/right for columns)."""

    orientation: str  # "row" | "col"
    polyline: np.ndarray  # (K, 2) crop coords
    before: float
    after: float

    @property
    def thickness(self) -> float:
        return self.before + self.after


@dataclass
class SeparatorGT:
    crop_size: tuple[int, int]
    row_regions: list[SeparatorRegion]
    col_regions: list[SeparatorRegion]
    row_mask: np.ndarray  # (H, ceil(W/8)) uint8
    col_mask: np.ndarray  # (ceil(H/8), W) uint8


def _line_values(polyline: np.ndarray, positions: np.ndarray, axis: int) -> np.ndarray:
    """Evaluate a polyline as value(position); axis 0 means y(x)."""
    pts = polyline[np.argsort(polyline[:, axis])]
    return np.interp(positions, pts[:, axis], pts[:, 1 - axis])


def _region_offsets(
    polyline: np.ndarray,
    texts: list[Box],
    axis: int,
    bounds: tuple[float, float],
) -> tuple[float, float]:
    """Clearances from the line to the nearest text on each side.

    axis 0: row line y(x); texts above/below. axis 1: column line x(y);
    texts left/right. Falls back to the table boundary when a side has
    no text. Raises when the line crosses a text box.
    """
    before = after = None
    for t in texts:
        if axis == 0:
            t_lo, t_hi = t.y, t.y2
            span = np.arange(math.floor(t.x), math.ceil(t.x2) + 1, dtype=np.float64)
        else:
            t_lo, t_hi = t.x, t.x2
            span = np.arange(math.floor(t.y), math.ceil(t.y2) + 1, dtype=np.float64)
        vals = _line_values(polyline, span, axis)
        if t_hi <= vals.min() + 1e-6:  # text on the smaller-coordinate side
            clearance = float(vals.min() - t_hi)
            before = clearance if before is None else min(before, clearance)
        elif t_lo >= vals.max() - 1e-6:
            clearance = float(t_lo - vals.max())
            after = clearance if after is None else min(after, clearance)
        else:
            raise AnnotationError(
                f"separation line intersects a non-spanning text box at {t}"
            )
    sample = polyline[:, 1 - axis]
    if before is None:
        before = float(sample.min() - bounds[0])
    if after is None:
        after = float(bounds[1] - sample.max())
    before, after = max(before, 0.0), max(after, 0.0)
    if before + after < MIN_THICKNESS:
        before = after = MIN_THICKNESS / 2
    return before, after


def make_separator_gt(
    table: TableAnnotation,
    content_boxes: Mapping[int, Box],
    crop_size: tuple[int, int],
) -> SeparatorGT:
    """Expanded separation regions plus rasterized masks for one table crop.

    All geometry must already be in crop coordinates. Text boxes of cells
    spanning along a separator's axis are ignored for that orientation
    (a row region may cross a row-spanning cell's contents).
    """
    h, w = crop_size
    hull_x = (float(table.quad[:, 0].min()), float(table.quad[:, 0].max()))
    hull_y = (float(table.quad[:, 1].min()), float(table.quad[:, 1].max()))

    def texts_for(orientation: str) -> list[Box]:
        out = []
        for cell in table.cells:
            spanning = cell.rowspan > 1 if orientation == "row" else cell.colspan > 1
            if spanning:
                continue
            out.extend(content_boxes[c] for c in cell.content_ids)
        return out

    row_regions = [
        SeparatorRegion("row", np.asarray(p, dtype=np.float64),
                        *_region_offsets(np.asarray(p), texts_for("row"), 0, hull_y))
        for p in table.row_separators
    ]
    col_regions = [
        SeparatorRegion("col", np.asarray(p, dtype=np.float64),
                        *_region_offsets(np.asarray(p), texts_for("col"), 1, hull_x))
        for p in table.col_separators
    ]
    row_mask = rasterize_regions(row_regions, crop_size, "row")
    col_mask = rasterize_regions(col_regions, crop_size, "col")
    return SeparatorGT(crop_size, row_regions, col_regions, row_mask, col_mask)


def rasterize_regions(
    regions: list[SeparatorRegion], crop_size: tuple[int, int], orientation: str
) -> np.ndarray:
    """Binary mask at the branch output resolution.

    Row regions -> (H, ceil(W/8)): full vertical resolution, any overlap
    along the 8x-reduced axis marks the pixel. Column regions mirror this.
    """
    h, w = crop_size
    if orientation == "row":
        full, reduced = h, math.ceil(w / MASK_REDUCTION)
    else:
        full, reduced = w, math.ceil(h / MASK_REDUCTION)
    mask = np.zeros((full, reduced), dtype=np.uint8)
    for region in regions:
        axis = 0 if region.orientation == "row" else 1
        positions = np.arange(0, (reduced * MASK_REDUCTION), dtype=np.float64)
        vals = _line_values(region.polyline, positions, axis)
        grouped = vals.reshape(reduced, MASK_REDUCTION)
        lo = grouped.min(axis=1) - region.before
        hi = grouped.max(axis=1) + region.after
        for c in range(reduced):
            r0 = max(0, math.ceil(lo[c]))
            r1 = min(full, math.ceil(hi[c]))
            if r1 > r0:
                mask[r0:r1, c] = 1
    if orientation == "row":
        return mask
    return mask.T


# ---------------------------------------------------------------------------
# pixel sampling and loss


@dataclass
class SplitPixelSamples:
    row_pos: np.ndarray
    row_neg: np.ndarray
    col_pos: np.ndarray
    col_neg: np.ndarray


def _sample_class(flat_mask: np.ndarray, want_value: int, count: int, rng) -> np.ndarray:
    idx = np.nonzero(flat_mask == want_value)[0]
    if len(idx) <= count:
        return idx
    return np.sort(rng.choice(idx, size=count, replace=False))


def sample_split_pixels(
    gt: SeparatorGT, per_class: int = 1024, rng: np.random.Generator | None = None
) -> SplitPixelSamples:
    """Uniform per-class pixel sample per branch (all pixels when fewer)."""
    rng = rng or np.random.default_rng(0)
    row = gt.row_mask.reshape(-1)
    col = gt.col_mask.reshape(-1)
    return SplitPixelSamples(
        row_pos=_sample_class(row, 1, per_class, rng),
        row_neg=_sample_class(row, 0, per_class, rng),
        col_pos=_sample_class(col, 1, per_class, rng),
        col_neg=_sample_class(col, 0, per_class, rng),
    )


@dataclass
class SeparatorMasks:
    """Predicted probability maps: row (H, W/8), col (H/8, W)."""

    row: torch.Tensor
    col: torch.Tensor


def split_loss(masks: SeparatorMasks, gt: SeparatorGT, samples: SplitPixelSamples) -> torch.Tensor:
    """Mean binary cross-entropy over the sampled pixels of each branch."""
    eps = 1e-6
    total = masks.row.sum() * 0.0
    for pred, target, pos_idx, neg_idx in (
        (masks.row, gt.row_mask, samples.row_pos, samples.row_neg),
        (masks.col, gt.col_mask, samples.col_pos, samples.col_neg),
    ):
        idx = np.concatenate([pos_idx, neg_idx])
        if len(idx) == 0:
            continue
        p = pred.reshape(-1)[torch.as_tensor(idx, dtype=torch.long)].clamp(eps, 1 - eps)
        t = torch.as_tensor(target.reshape(-1)[idx], dtype=p.dtype)
        total = total + (-(t * torch.log(p) + (1 - t) * torch.log(1 - p))).mean()
    return total


# ---------------------------------------------------------------------------
# model


class SplitBranch(nn.Module):
    """One segmentation branch: 3x3 conv, three axis down-sampling blocks,
    forward + backward slice propagation, x4 bilinear upsampling, and a
    1x1 sigmoid classifier."""

    def __init__(self, channels: int = 64, axis: str = "row", kernel_width: int = 9):
        super().__init__()
        if axis not in ("row", "col"):
            raise ValueError(f"axis must be 'row' or 'col', got {axis!r}")
        self.axis = axis
        pooled = "width" if axis == "row" else "height"
        directions = ("right", "left") if axis == "row" else ("down", "up")
        # batch stats at inference too; see TSRBackbone
        self.entry = conv_bn_relu(channels, channels, track_stats=False)
        self.down = nn.Sequential(
            *[DownsampleBlock(channels, pooled, track_stats=False) for _ in range(3)]
        )
        self.scnn_fwd = SlicePropagation(channels, directions[0], kernel_width)
        self.scnn_bwd = SlicePropagation(channels, directions[1], kernel_width)
        self.classify = nn.Conv2d(channels, 1, 1)

    def forward(self, p2: torch.Tensor) -> torch.Tensor:
        x = self.entry(p2)
        x = self.down(x)
        x = self.scnn_bwd(self.scnn_fwd(x))
        x = F.interpolate(x, scale_factor=4, mode="bilinear", align_corners=False)
        return torch.sigmoid(self.classify(x))


class SplitHead(nn.Module):
    def __init__(self, channels: int = 64, kernel_width: int = 9):
        super().__init__()
        self.row_branch = SplitBranch(channels, "row", kernel_width)
        self.col_branch = SplitBranch(channels, "col", kernel_width)
        init_head_weights(self)

    def forward(self, p2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.row_branch(p2), self.col_branch(p2)


class TSRModel(nn.Module):
    """Split and merge heads over one shared backbone."""

    def __init__(self, backbone: str = "resnet18", kernel_width: int = 9):
        super().__init__()
        self.backbone_variant = backbone
        self.kernel_width = kernel_width
        self.backbone = TSRBackbone(backbone)
        self.split = SplitHead(TSRBackbone.OUT_CHANNELS, kernel_width)
        self.merge = MergeHead(TSRBackbone.OUT_CHANNELS)

    @staticmethod
    def _pad_to_32(images: torch.Tensor) -> torch.Tensor:
        # at least 64 px per side so the stride-32 trunk level keeps more
        # than one value per channel (batch-statistics normalization)
        h, w = images.shape[2:]
        ph = max(64, (h + 31) // 32 * 32) - h
        pw = max(64, (w + 31) // 32 * 32) - w
        if ph or pw:
            images = F.pad(images, (0, pw, 0, ph), mode="replicate")
        return images

    def forward(self, images: torch.Tensor) -> tuple[SeparatorMasks, FeatureMap]:
        """Padded (to /32) forward pass; masks trimmed back to the input size."""
        h, w = images.shape[2:]
        padded = self._pad_to_32(images)
        p2 = self.backbone(padded)
        row, col = self.split(p2.values)
        masks = SeparatorMasks(
            row=row[0, 0, :h, : math.ceil(w / MASK_REDUCTION)],
            col=col[0, 0, : math.ceil(h / MASK_REDUCTION), :w],
        )
        return masks, p2

    def split_forward(self, images: torch.Tensor) -> SeparatorMasks:
        return self.forward(images)[0]

    def checkpoint_header(self) -> dict:
        return {
            "model": "tsr",
            "backbone": self.backbone_variant,
            "kernel_width": self.kernel_width,
            "channels": TSRBackbone.OUT_CHANNELS,
        }
