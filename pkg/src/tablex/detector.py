"""Corner-proposal table detector.

Corner heatmap/offset heads over a stride-16 backbone, peak decoding,
exhaustive proposal enumeration, an RoI-align refinement head predicting
a table score and quadrilateral corner offsets, target assignment, and
the detector loss stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Box, QuadBox, iou_matrix, nms_xyxy
from .neural_ops import (
    DetectorBackbone,
    FeatureMap,
    conv_bn_relu,
    directional_max,
    init_head_weights,
    roi_align,
)

CORNER_KINDS = ("top_left", "bottom_right")
LAMBDA_CORNER = 0.2


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class CornerPoint:
    kind: str
    x: float
    y: float
    score: float


@dataclass
class CornerTargets:
    """Per-kind training targets for one heatmap.

    penalty is 1.0 exactly at positive pixels and Gaussian-reduced nearby;
    offsets hold the sub-stride corner remainder at positive pixels.
    """

    penalty: np.ndarray  # (H, W) in [0, 1]
    offsets: np.ndarray  # (H, W, 2), meaningful where pos_mask
    pos_mask: np.ndarray  # (H, W) bool


@dataclass(frozen=True)
class TableProposal:
    box: Box
    score: float


@dataclass(frozen=True)
class Detection:
    quad: QuadBox
    score: float


@dataclass
class DetectorInferenceConfig:
    short_side: int = 512
    max_side: int = 1024
    top_k: int = 100
    corner_threshold: float = 0.3
    proposal_nms_iou: float = 0.7
    final_nms_iou: float = 0.3
    score_threshold: float = 0.5


# ---------------------------------------------------------------------------
# model


class CornerPoolBlock(nn.Module):
    """Directional pooling with residual fusion.

    Each scan direction gets its own 3x3 conv before pooling; the summed
    pooled maps pass a 3x3 conv + norm, are added to a 1x1-convolved skip
    of the input, then ReLU and a final 3x3 conv refine the result.
    """

    def __init__(self, channels: int, kind: str):
        super().__init__()
        self.scans = ("top", "left") if kind == "top_left" else ("bottom", "right")
        self.pre1 = conv_bn_relu(channels, channels)
        self.pre2 = conv_bn_relu(channels, channels)
        self.post = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1, bias=False),
                                  nn.BatchNorm2d(channels))
        self.skip = nn.Sequential(nn.Conv2d(channels, channels, 1, bias=False),
                                  nn.BatchNorm2d(channels))
        self.out = conv_bn_relu(channels, channels)

    def forward(self, x):
        pooled = directional_max(self.pre1(x), self.scans[0]) + directional_max(
            self.pre2(x), self.scans[1]
        )
        fused = F.relu(self.post(pooled) + self.skip(x))
        return self.out(fused)


class CornerDetectionModule(nn.Module):
    """Two parallel branches: sigmoid corner heatmap and 2-d offset map."""

    def __init__(self, channels: int):
        super().__init__()
        self.heat = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(), nn.Conv2d(channels, 1, 1)
        )
        self.offset = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(), nn.Conv2d(channels, 2, 1)
        )

    def forward(self, x):
        return torch.sigmoid(self.heat(x)), self.offset(x)


class CornerHead(nn.Module):
    def __init__(self, channels: int = 64):
        super().__init__()
        self.shared = conv_bn_relu(channels, channels)
        self.pool_blocks = nn.ModuleDict({k: CornerPoolBlock(channels, k) for k in CORNER_KINDS})
        self.detect = nn.ModuleDict({k: CornerDetectionModule(channels) for k in CORNER_KINDS})
        init_head_weights(self)

    def forward(self, feat: torch.Tensor) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        shared = self.shared(feat)
        out = {}
        for kind in CORNER_KINDS:
            out[kind] = self.detect[kind](self.pool_blocks[kind](shared))
        return out


class FRCNHead(nn.Module):
    """Proposal refinement: 7x7x64 descriptor -> two 1024-d fc layers ->
    sigmoid table score and 8-d normalized quad corner offsets."""

    def __init__(self, channels: int = 64, roi_size: int = 7):
        super().__init__()
        self.roi_size = roi_size
        self.fc1 = nn.Linear(channels * roi_size * roi_size, 1024)
        self.fc2 = nn.Linear(1024, 1024)
        self.score = nn.Linear(1024, 1)
        self.quad = nn.Linear(1024, 8)
        init_head_weights(self)

    def forward(self, roi_feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = roi_feats.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return torch.sigmoid(self.score(x)).squeeze(-1), self.quad(x)


class TableDetector(nn.Module):
    def __init__(self, backbone: str = "resnet18"):
        super().__init__()
        self.backbone_variant = backbone
        self.backbone = DetectorBackbone(backbone)
        self.corner_head = CornerHead(DetectorBackbone.OUT_CHANNELS)
        self.frcn = FRCNHead(DetectorBackbone.OUT_CHANNELS)

    def features(self, images: torch.Tensor) -> FeatureMap:
        return self.backbone(images)

    def corner_maps(self, feat: FeatureMap):
        return self.corner_head(feat.values)

    def frcn_forward(self, feat: FeatureMap, proposals: list[TableProposal]):
        """Score and refine proposals -> (scores (N,), quad deltas (N, 8))."""
        if not proposals:
            raise ValueError("frcn_forward needs at least one proposal")
        rois = roi_align(feat.values, [p.box for p in proposals], feat.stride,
                         out_size=self.frcn.roi_size)
        return self.frcn(rois)

    def checkpoint_header(self) -> dict:
        return {
            "model": "detector",
            "backbone": self.backbone_variant,
            "channels": DetectorBackbone.OUT_CHANNELS,
        }


# ---------------------------------------------------------------------------
# targets


def _worst_case_iou(r: float, w: float, h: float) -> float:
    """Lowest IoU against (w, h) when both corners move by r per axis."""
    if w <= 2 * r or h <= 2 * r:
        shrink = 0.0
    else:
        shrink = (w - 2 * r) * (h - 2 * r) / (w * h)
    grow = (w * h) / ((w + 2 * r) * (h + 2 * r))
    iw, ih = max(w - r, 0.0), max(h - r, 0.0)
    inter = iw * ih
    shift = inter / (2 * w * h - inter)
    return min(shrink, grow, shift)


def gaussian_radius(w: float, h: float, min_iou: float = 0.3) -> float:
    """Largest r such that corners displaced by r still give IoU >= min_iou."""
    lo, hi = 0.0, min(w, h) / 2
    if _worst_case_iou(hi, w, h) >= min_iou:
        return hi
    for _ in range(60):
        mid = (lo + hi) / 2
        if _worst_case_iou(mid, w, h) >= min_iou:
            lo = mid
        else:
            hi = mid
    return lo


def make_corner_targets(
    gt_boxes: list[Box], map_hw: tuple[int, int], stride: float
) -> dict[str, CornerTargets]:
    """Corner classification/offset targets for one image.

    Positive pixels come from the floor mapping q -> floor(q/s); offsets
    are the fractional remainders. The penalty map reduces the negative
    weight inside an IoU-derived radius with an unnormalized Gaussian
    (sigma = r/3), combined across corners by elementwise max.
    """
    hm_h, hm_w = map_hw
    out = {}
    corners_per_kind = {
        "top_left": [(b.x, b.y) for b in gt_boxes],
        "bottom_right": [(b.x2, b.y2) for b in gt_boxes],
    }
    for kind, corners in corners_per_kind.items():
        penalty = np.zeros((hm_h, hm_w), dtype=np.float64)
        offsets = np.zeros((hm_h, hm_w, 2), dtype=np.float64)
        pos = np.zeros((hm_h, hm_w), dtype=bool)
        for (qx, qy), box in zip(corners, gt_boxes):
            px = int(math.floor(qx / stride))
            py = int(math.floor(qy / stride))
            px = min(max(px, 0), hm_w - 1)
            py = min(max(py, 0), hm_h - 1)
            ox = min(max(qx / stride - px, 0.0), np.nextafter(1.0, 0.0))
            oy = min(max(qy / stride - py, 0.0), np.nextafter(1.0, 0.0))
            r = gaussian_radius(box.w / stride, box.h / stride)
            if r > 1e-6:
                sigma = r / 3.0
                span = int(math.ceil(r))
                ys = np.arange(max(0, py - span), min(hm_h, py + span + 1))
                xs = np.arange(max(0, px - span), min(hm_w, px + span + 1))
                gy = np.exp(-((ys - py) ** 2) / (2 * sigma**2))
                gx = np.exp(-((xs - px) ** 2) / (2 * sigma**2))
                patch = gy[:, None] * gx[None, :]
                region = penalty[ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1]
                np.maximum(region, patch, out=region)
            penalty[py, px] = 1.0
            offsets[py, px] = (ox, oy)
            pos[py, px] = True
        out[kind] = CornerTargets(penalty=penalty, offsets=offsets, pos_mask=pos)
    return out


# ---------------------------------------------------------------------------
# decoding and proposals


def decode_corners(
    heatmap: torch.Tensor,
    offsets: torch.Tensor,
    stride: float,
    kind: str,
    top_k: int = 100,
    score_threshold: float = 0.3,
) -> list[CornerPoint]:
    """Peak extraction: 3x3 neighborhood-max equality, top-k by score,
    score thresholding, then offset-corrected image coordinates.

    Ties (plateaus) are kept by the equality rule and ordered row-major.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    heat = heatmap.detach()
    if heat.dim() == 4:
        heat = heat[0, 0]
    off = offsets.detach()
    if off.dim() == 4:
        off = off[0]
    h, w = heat.shape
    local_max = F.max_pool2d(heat[None, None], 3, stride=1, padding=1)[0, 0]
    keep = heat >= local_max
    scores = heat.reshape(-1).numpy()
    keep_flat = keep.reshape(-1).numpy()
    idx = np.nonzero(keep_flat)[0]
    if len(idx) == 0:
        return []
    order = idx[np.lexsort((idx, -scores[idx]))][:top_k]
    points = []
    off_np = off.numpy()
    for flat in order:
        s = float(scores[flat])
        if s < score_threshold:
            continue
        py, px = divmod(int(flat), w)
        dx, dy = float(off_np[0, py, px]), float(off_np[1, py, px])
        points.append(CornerPoint(kind, (px + dx) * stride, (py + dy) * stride, s))
    return points


def enumerate_proposals(
    tl: list[CornerPoint],
    br: list[CornerPoint],
    nms_iou: float = 0.7,
) -> list[TableProposal]:
    """All strictly-ordered top-left/bottom-right pairs become proposals
    scored by the mean of the two corner scores, then greedy NMS."""
    cands: list[TableProposal] = []
    for a in tl:
        for b in br:
            if a.x < b.x and a.y < b.y:
                cands.append(
                    TableProposal(Box.from_xyxy(a.x, a.y, b.x, b.y), (a.score + b.score) / 2)
                )
    if not cands:
        return []
    boxes = np.array([p.box.as_xyxy() for p in cands])
    scores = np.array([p.score for p in cands])
    kept = nms_xyxy(boxes, scores, nms_iou)
    return [cands[i] for i in kept]


def assign_proposal_labels(
    proposals: list[TableProposal],
    gt_boxes: list[Box],
    positive_iou: float = 0.7,
    negative_iou: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Labels per proposal: 1 positive, 0 negative, -1 ignore; plus the
    index of the best-overlapping ground truth (-1 when none)."""
    n = len(proposals)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels, matched
    if not gt_boxes:
        return labels, matched
    mat = iou_matrix(
        np.array([p.box.as_xyxy() for p in proposals]),
        np.array([b.as_xyxy() for b in gt_boxes]),
    )
    best = mat.argmax(axis=1)
    best_iou = mat[np.arange(n), best]
    labels[best_iou > positive_iou] = 1
    labels[(best_iou >= negative_iou) & (best_iou <= positive_iou)] = -1
    matched[labels == 1] = best[labels == 1]
    return labels, matched


def quad_regression_target(proposal: Box, gt_quad: QuadBox) -> np.ndarray:
    """8-d offsets moving the proposal's corners onto the quad corners,
    normalized by proposal width/height."""
    p = proposal.corners()
    g = gt_quad.as_array()
    d = (g - p) / np.array([proposal.w, proposal.h])
    return d.reshape(-1)


def decode_quad(proposal: Box, deltas: np.ndarray) -> QuadBox:
    p = proposal.corners()
    d = np.asarray(deltas, dtype=np.float64).reshape(4, 2) * np.array(
        [proposal.w, proposal.h]
    )
    return QuadBox.from_array(p + d)


def jitter_box(box: Box, rng: np.random.Generator, frac: float = 0.1) -> Box:
    """Uniform corner jitter of +-frac of width/height; keeps validity."""
    dx1, dx2 = rng.uniform(-frac, frac, 2) * box.w
    dy1, dy2 = rng.uniform(-frac, frac, 2) * box.h
    x1, y1 = box.x + dx1, box.y + dy1
    x2, y2 = box.x2 + dx2, box.y2 + dy2
    if x2 - x1 < 2.0 or y2 - y1 < 2.0:
        return box
    return Box.from_xyxy(x1, y1, x2, y2)


# ---------------------------------------------------------------------------
# losses


def corner_loss(
    preds: dict[str, tuple[torch.Tensor, torch.Tensor]],
    targets: dict[str, CornerTargets],
    n_tables: int,
    alpha: float = 2.0,
    beta: float = 4.0,
) -> torch.Tensor:
    """Penalty-reduced focal heatmap loss normalized by table count plus
    Smooth-L1 offset loss normalized by corner count."""
    eps = 1e-6
    det_terms = []
    off_terms = []
    n_corners = 0
    for kind in CORNER_KINDS:
        heat, off = preds[kind]
        t = targets[kind]
        p = heat.reshape(heat.shape[-2], heat.shape[-1]).clamp(eps, 1 - eps)
        penalty = torch.as_tensor(t.penalty, dtype=p.dtype)
        pos = torch.as_tensor(t.pos_mask)
        pos_loss = -(((1 - p) ** alpha) * torch.log(p))[pos].sum()
        neg_loss = -(((1 - penalty) ** beta) * (p**alpha) * torch.log(1 - p))[~pos].sum()
        det_terms.append(pos_loss + neg_loss)
        if t.pos_mask.any():
            off_pred = off.reshape(2, off.shape[-2], off.shape[-1]).permute(1, 2, 0)[pos]
            off_t = torch.as_tensor(t.offsets, dtype=p.dtype)[pos]
            off_terms.append(F.smooth_l1_loss(off_pred, off_t, reduction="sum"))
            n_corners += int(t.pos_mask.sum())
    zero = preds[CORNER_KINDS[0]][0].sum() * 0.0
    det = sum(det_terms) / n_tables if n_tables > 0 else zero
    off = sum(off_terms) / n_corners if n_corners > 0 else zero
    return det + off


def frcn_loss(
    scores: torch.Tensor,
    labels: torch.Tensor,
    quad_deltas: torch.Tensor,
    quad_targets: torch.Tensor,
) -> torch.Tensor:
    """Binary cross-entropy over the sampled batch plus L1 over the
    positives' 8-d offsets (normalized by the positive count)."""
    eps = 1e-6
    p = scores.clamp(eps, 1 - eps)
    y = labels.to(p.dtype)
    cls = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()
    pos = labels == 1
    if pos.any():
        reg = (quad_deltas[pos] - quad_targets[pos]).abs().sum() / int(pos.sum())
    else:
        reg = scores.sum() * 0.0
    return cls + reg


def per_sample_frcn_losses(
    scores: torch.Tensor,
    labels: torch.Tensor,
    quad_deltas: torch.Tensor,
    quad_targets: torch.Tensor,
) -> torch.Tensor:
    """Per-proposal loss used for hard example mining (no normalization)."""
    eps = 1e-6
    p = scores.clamp(eps, 1 - eps)
    y = labels.to(p.dtype)
    cls = -(y * torch.log(p) + (1 - y) * torch.log(1 - p))
    reg = (quad_deltas - quad_targets).abs().sum(dim=-1) * y
    return cls + reg


def detector_loss(corner: torch.Tensor, frcn: torch.Tensor,
                  lambda_corner: float = LAMBDA_CORNER) -> torch.Tensor:
    """Weighted sum of the two stages' losses."""
    return lambda_corner * corner + frcn


# ---------------------------------------------------------------------------
# inference


@dataclass
class DetectorDebug:
    corners: dict[str, list[CornerPoint]] = field(default_factory=dict)
    proposals: list[TableProposal] = field(default_factory=list)


def _resize_for_inference(image: np.ndarray, cfg: DetectorInferenceConfig):
    h, w = image.shape[:2]
    scale = cfg.short_side / min(h, w)
    if scale * max(h, w) > cfg.max_side:
        scale = cfg.max_side / max(h, w)
    new_h, new_w = max(32, round(h * scale)), max(32, round(w * scale))
    t = torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False)
    return t, (new_h / h, new_w / w)


def detect_tables(
    model: TableDetector,
    image: np.ndarray,
    cfg: DetectorInferenceConfig | None = None,
    debug: DetectorDebug | None = None,
) -> list[Detection]:
    """Full detection pass on one (H, W, 3) uint8 image.

    The shorter side is resized to cfg.short_side (longer capped at
    cfg.max_side), corners are decoded and paired into proposals, the
    refinement head scores them, and final NMS runs at cfg.final_nms_iou.
    Boxes are mapped back to original image coordinates.
    """
    cfg = cfg or DetectorInferenceConfig()
    model.eval()
    tensor, (sy, sx) = _resize_for_inference(image, cfg)
    with torch.no_grad():
        feat = model.features(tensor)
        maps = model.corner_maps(feat)
        corners = {
            kind: decode_corners(
                maps[kind][0], maps[kind][1], feat.stride, kind,
                top_k=cfg.top_k, score_threshold=cfg.corner_threshold,
            )
            for kind in CORNER_KINDS
        }
        proposals = enumerate_proposals(
            corners["top_left"], corners["bottom_right"], cfg.proposal_nms_iou
        )
        if debug is not None:
            debug.corners = corners
            debug.proposals = proposals
        if not proposals:
            return []
        # clip to the resized image so RoI align stays in range
        ih, iw = tensor.shape[2:]
        clipped = []
        for p in proposals:
            x1 = min(max(p.box.x, 0.0), iw - 2.0)
            y1 = min(max(p.box.y, 0.0), ih - 2.0)
            x2 = max(min(p.box.x2, float(iw)), x1 + 1.0)
            y2 = max(min(p.box.y2, float(ih)), y1 + 1.0)
            clipped.append(TableProposal(Box.from_xyxy(x1, y1, x2, y2), p.score))
        scores, deltas = model.frcn_forward(feat, clipped)
    scores = scores.numpy()
    deltas = deltas.numpy()
    keep = scores >= cfg.score_threshold
    if not keep.any():
        return []
    quads = []
    for i in np.nonzero(keep)[0]:
        try:
            quads.append(decode_quad(clipped[i].box, deltas[i]))
        except ValueError:
            # degenerate regression output; fall back to the proposal box
            quads.append(QuadBox.from_box(clipped[i].box))
    kept_scores = scores[keep]
    hulls = np.array([q.hull().as_xyxy() for q in quads])
    final = nms_xyxy(hulls, kept_scores, cfg.final_nms_iou)
    detections = []
    for i in final:
        pts = quads[i].as_array() / np.array([sx, sy])
        detections.append(Detection(QuadBox.from_array(pts), float(kept_scores[i])))
    return detections
