"""Optimization loops for the detector and the structure recognizer.

SGD with momentum 0.9, weight decay 5e-4, base learning rate 0.032 scaled
linearly with the per-step image count relative to 32-image steps, and
two /10 decay points. Detector steps use multi-scale resizing, optional
rotation augmentation, jittered ground-truth proposals, and 32+32 OHEM;
recognizer steps sample 1024+1024 separator pixels per branch and train
the merging head with 64+64 hard pairs on the split model's current grid.
"""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .datagen import DocAnnotation, crop_table_annotation
from .detector import (
    TableDetector,
    TableProposal,
    assign_proposal_labels,
    corner_loss,
    decode_corners,
    detector_loss,
    enumerate_proposals,
    frcn_loss,
    jitter_box,
    make_corner_targets,
    per_sample_frcn_losses,
    quad_regression_target,
)
from .geometry import Box, QuadBox
from .grid_assembler import AssemblyError, assemble_grid
from .merger import grid_cnn, grid_features, label_pairs, merge_loss, score_pairs
from .splitter import TSRModel, make_separator_gt, sample_split_pixels, split_loss

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.032
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iterations: int = 2000
    decay_iterations: tuple[int, ...] = (1400, 1800)
    images_per_step: int = 1
    reference_batch: int = 32  # linear lr scaling anchor
    scales: tuple[int, ...] = (320, 416, 512, 608, 704, 800)
    max_side: int = 1024
    rotation_angles: tuple[int, ...] = (0,)
    rotation_jitter: float = 0.0
    ohem_positive: int = 32
    ohem_negative: int = 32
    jitter_per_gt: int = 4
    jitter_frac: float = 0.1
    pixels_per_class: int = 1024
    pair_positive: int = 64
    pair_negative: int = 64
    grad_clip: float = 10.0
    seed: int = 0
    backbone: str = "resnet18"
    kernel_width: int = 9
    corner_top_k: int = 100
    corner_threshold: float = 0.3
    proposal_nms_iou: float = 0.7
    max_frcn_candidates: int = 256
    binarize_threshold: float = 0.8

    def validate(self) -> None:
        if any(d >= self.iterations for d in self.decay_iterations):
            raise ValueError("decay points must precede the total iteration count")
        if self.iterations < 1 or self.images_per_step < 1:
            raise ValueError("counts must be >= 1")
        if not self.scales:
            raise ValueError("scale set must not be empty")
        for name in ("ohem_positive", "ohem_negative", "pixels_per_class",
                     "pair_positive", "pair_negative"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def effective_lr(self) -> float:
        return self.base_lr * self.images_per_step / self.reference_batch


@dataclass
class TrainResult:
    model: torch.nn.Module
    trace: list[dict] = field(default_factory=list)


def seed_all(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def write_trace_csv(path, trace: list[dict]) -> None:
    if not trace:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(trace[0].keys()))
        writer.writeheader()
        writer.writerows(trace)


def _lr_at(config: TrainConfig, iteration: int) -> float:
    lr = config.effective_lr()
    for d in config.decay_iterations:
        if iteration >= d:
            lr *= 0.1
    return lr


def _check_finite(value: float, iteration: int) -> None:
    if not math.isfinite(value):
        raise RuntimeError(f"training diverged (non-finite loss) at iteration {iteration}")


# ---------------------------------------------------------------------------
# image-space augmentation


def resize_page(image: np.ndarray, short_side: int, max_side: int):
    h, w = image.shape[:2]
    scale = short_side / min(h, w)
    if scale * max(h, w) > max_side:
        scale = max_side / max(h, w)
    out_h, out_w = max(32, round(h * scale)), max(32, round(w * scale))
    t = torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)[None]
    t = torch.nn.functional.interpolate(t, size=(out_h, out_w), mode="bilinear",
                                        align_corners=False)
    return t, (out_w / w, out_h / h)


def rotate_page(image: np.ndarray, points: list[np.ndarray], angle_deg: float):
    """Rotate image and point sets about the image center, expanding the
    canvas; the same matrix drives both so they stay aligned."""
    if angle_deg % 360 == 0:
        return image, [p.copy() for p in points]
    theta = math.radians(angle_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    h, w = image.shape[:2]
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    center = np.array([(w - 1) / 2, (h - 1) / 2])
    rotated = (corners - center) @ rot.T
    out_w = int(math.ceil(rotated[:, 0].max() - rotated[:, 0].min() - 1e-7)) + 1
    out_h = int(math.ceil(rotated[:, 1].max() - rotated[:, 1].min() - 1e-7)) + 1
    center2 = np.array([(out_w - 1) / 2, (out_h - 1) / 2])

    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    q = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1) - center2
    src = q @ rot + center
    coords = np.stack([src[:, 1].reshape(out_h, out_w), src[:, 0].reshape(out_h, out_w)])
    channels = [
        ndimage.map_coordinates(image[..., c].astype(np.float64), coords, order=1,
                                mode="constant", cval=255.0)
        for c in range(image.shape[2])
    ]
    out = np.clip(np.rint(np.stack(channels, axis=2)), 0, 255).astype(np.uint8)
    moved = [((np.asarray(p, dtype=np.float64) - center) @ rot.T + center2) for p in points]
    return out, moved


def _canonical_quad(points: np.ndarray) -> QuadBox:
    """Rotate the cyclic corner order so index 0 is nearest the hull's
    top-left; needed after page rotation."""
    pts = np.asarray(points, dtype=np.float64)
    start = int(np.argmin(pts.sum(axis=1)))
    return QuadBox.from_array(np.roll(pts, -start, axis=0))


# ---------------------------------------------------------------------------
# detector training


def _detector_step_inputs(image, annotation, scale, angle, rng):
    quads = [t.quad for t in annotation.tables]
    rotated, quads = rotate_page(image, quads, angle) if angle else (image, quads)
    tensor, (sx, sy) = resize_page(rotated, scale, max_side=10**9)
    gt_quads = []
    for q in quads:
        arr = np.asarray(q, dtype=np.float64) * np.array([sx, sy])
        gt_quads.append(_canonical_quad(arr))
    gt_hulls = [q.hull() for q in gt_quads]
    return tensor, gt_quads, gt_hulls


def _ohem_select(losses: torch.Tensor, labels: np.ndarray, n_pos: int, n_neg: int):
    detached = losses.detach().numpy()
    picked = []
    for value, count in ((1, n_pos), (0, n_neg)):
        idx = np.nonzero(labels == value)[0]
        if len(idx) == 0:
            continue
        order = idx[np.argsort(-detached[idx], kind="stable")][:count]
        picked.extend(order.tolist())
    return sorted(picked)


def train_detector(
    corpus: list[tuple[np.ndarray, DocAnnotation]],
    config: TrainConfig,
    model: TableDetector | None = None,
) -> TrainResult:
    config.validate()
    seed_all(config.seed)
    rng = np.random.default_rng(config.seed)
    model = model or TableDetector(config.backbone)
    model.train()
    opt = torch.optim.SGD(
        model.parameters(),
        lr=config.effective_lr(),
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    trace = []
    cache: dict = {}
    use_cache = config.rotation_jitter == 0
    target_cache: dict = {}

    for it in range(1, config.iterations + 1):
        lr = _lr_at(config, it)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        corner_total = 0.0
        frcn_total = 0.0
        for _ in range(config.images_per_step):
            idx = int(rng.integers(0, len(corpus)))
            scale = int(rng.choice(config.scales))
            angle = float(rng.choice(config.rotation_angles))
            if config.rotation_jitter:
                angle += float(rng.uniform(-config.rotation_jitter, config.rotation_jitter))
            key = (idx, scale, angle)
            if use_cache and key in cache:
                tensor, gt_quads, gt_hulls = cache[key]
            else:
                image, annotation = corpus[idx]
                tensor, gt_quads, gt_hulls = _detector_step_inputs(
                    image, annotation, scale, angle, rng
                )
                if use_cache:
                    cache[key] = (tensor, gt_quads, gt_hulls)

            feat = model.features(tensor)
            maps = model.corner_maps(feat)
            tkey = (key, feat.height, feat.width)
            if tkey not in target_cache:
                target_cache[tkey] = make_corner_targets(
                    gt_hulls, (feat.height, feat.width), feat.stride
                )
            targets = target_cache[tkey]
            c_loss = corner_loss(maps, targets, n_tables=len(gt_hulls))

            corners = {
                kind: decode_corners(
                    maps[kind][0], maps[kind][1], feat.stride, kind,
                    top_k=config.corner_top_k, score_threshold=config.corner_threshold,
                )
                for kind in maps
            }
            proposals = enumerate_proposals(
                corners["top_left"], corners["bottom_right"], config.proposal_nms_iou
            )
            proposals = proposals[: config.max_frcn_candidates]
            for hull in gt_hulls:
                for _ in range(config.jitter_per_gt):
                    proposals.append(
                        TableProposal(jitter_box(hull, rng, config.jitter_frac), 1.0)
                    )
            ih, iw = tensor.shape[2:]
            clipped = []
            for p in proposals:
                x1 = min(max(p.box.x, 0.0), iw - 2.0)
                y1 = min(max(p.box.y, 0.0), ih - 2.0)
                x2 = max(min(p.box.x2, float(iw)), x1 + 1.0)
                y2 = max(min(p.box.y2, float(ih)), y1 + 1.0)
                clipped.append(TableProposal(Box.from_xyxy(x1, y1, x2, y2), p.score))
            f_loss = torch.tensor(0.0)
            if clipped:
                labels, matched = assign_proposal_labels(clipped, gt_hulls)
                keep = labels >= 0
                if keep.any():
                    kept = [p for p, k in zip(clipped, keep) if k]
                    kept_labels = labels[keep]
                    kept_matched = matched[keep]
                    quad_targets = np.zeros((len(kept), 8))
                    for i, (p, gi) in enumerate(zip(kept, kept_matched)):
                        if gi >= 0:
                            quad_targets[i] = quad_regression_target(p.box, gt_quads[gi])
                    # readonly mining pass, then a gradient pass over the
                    # selected hard examples only
                    with torch.no_grad():
                        scores_ro, deltas_ro = model.frcn_forward(feat, kept)
                        qt_all = torch.as_tensor(quad_targets, dtype=deltas_ro.dtype)
                        lt_all = torch.as_tensor(kept_labels)
                        sample_losses = per_sample_frcn_losses(
                            scores_ro, lt_all, deltas_ro, qt_all
                        )
                    chosen = _ohem_select(
                        sample_losses, kept_labels, config.ohem_positive, config.ohem_negative
                    )
                    if chosen:
                        scores, deltas = model.frcn_forward(feat, [kept[i] for i in chosen])
                        f_loss = frcn_loss(
                            scores,
                            lt_all[chosen],
                            deltas,
                            qt_all[chosen],
                        )
            total = detector_loss(c_loss, f_loss) / config.images_per_step
            total.backward()
            corner_total += float(c_loss.detach()) / config.images_per_step
            frcn_total += float(f_loss.detach()) / config.images_per_step
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        row = {
            "iteration": it,
            "corner_loss": corner_total,
            "frcn_loss": frcn_total,
            "total_loss": 0.2 * corner_total + frcn_total,
            "lr": lr,
        }
        _check_finite(row["total_loss"], it)
        trace.append(row)
    model.eval()
    return TrainResult(model=model, trace=trace)


# ---------------------------------------------------------------------------
# structure recognizer training


def _tsr_crops(corpus):
    crops = []
    for image, annotation in corpus:
        for t_idx in range(len(annotation.tables)):
            tc = crop_table_annotation(annotation, t_idx)
            ox, oy = tc.origin
            h, w = tc.size
            crops.append((image[oy : oy + h, ox : ox + w], tc))
    return crops


@dataclass
class TsrSample:
    """One resized table crop with its scaled annotation and targets."""

    tensor: torch.Tensor
    gt: object  # SeparatorGT
    gt_hulls: list[Box]
    table: object  # scaled TableAnnotation
    contents: dict[int, Box]


def _prepare_tsr_sample(crop_image, table_crop, scale, max_side) -> TsrSample:
    h, w = crop_image.shape[:2]
    s = scale / min(h, w)
    if s * max(h, w) > max_side:
        s = max_side / max(h, w)
    out_h, out_w = max(64, round(h * s)), max(64, round(w * s))
    t = torch.from_numpy(crop_image.astype(np.float32) / 255.0).permute(2, 0, 1)[None]
    t = torch.nn.functional.interpolate(t, size=(out_h, out_w), mode="bilinear",
                                        align_corners=False)
    sx, sy = out_w / w, out_h / h
    s_eff = (sx + sy) / 2
    table = table_crop.table.transformed((0.0, 0.0), s_eff)
    contents = {
        cid: Box(b.x * s_eff, b.y * s_eff, max(b.w * s_eff, 1.0), max(b.h * s_eff, 1.0))
        for cid, b in table_crop.contents.items()
    }
    gt = make_separator_gt(table, contents, (out_h, out_w))
    gt_hulls = [
        Box.from_xyxy(
            c.quad[:, 0].min(), c.quad[:, 1].min(), c.quad[:, 0].max(), c.quad[:, 1].max()
        )
        for c in table.cells
    ]
    return TsrSample(tensor=t, gt=gt, gt_hulls=gt_hulls, table=table, contents=contents)


def train_tsr(
    corpus: list[tuple[np.ndarray, DocAnnotation]],
    config: TrainConfig,
    model: TSRModel | None = None,
) -> TrainResult:
    config.validate()
    seed_all(config.seed)
    rng = np.random.default_rng(config.seed)
    model = model or TSRModel(config.backbone, config.kernel_width)
    model.train()
    opt = torch.optim.SGD(
        model.parameters(),
        lr=config.effective_lr(),
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    crops = _tsr_crops(corpus)
    if not crops:
        raise ValueError("corpus contains no tables")
    cache: dict = {}
    trace = []
    for it in range(1, config.iterations + 1):
        lr = _lr_at(config, it)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        split_total = 0.0
        merge_total = 0.0
        for _ in range(config.images_per_step):
            idx = int(rng.integers(0, len(crops)))
            scale = int(rng.choice(config.scales))
            key = (idx, scale)
            if key not in cache:
                cache[key] = _prepare_tsr_sample(crops[idx][0], crops[idx][1], scale,
                                                 config.max_side)
            sample = cache[key]
            tensor, gt, gt_hulls = sample.tensor, sample.gt, sample.gt_hulls
            masks, p2 = model(tensor)
            samples = sample_split_pixels(gt, config.pixels_per_class, rng)
            s_loss = split_loss(masks, gt, samples)

            m_loss = torch.tensor(0.0)
            try:
                grid = assemble_grid(
                    masks.row.detach().numpy(),
                    masks.col.detach().numpy(),
                    gt.crop_size,
                    binarize_threshold=config.binarize_threshold,
                )
            except (AssemblyError, ValueError):
                grid = None
            # merge head only trains once the split model yields a real grid
            if grid is not None and grid.rows >= 2 and grid.cols >= 2:
                labels, _ = label_pairs(grid, gt_hulls)
                if (labels >= 0).any():
                    feats = grid_features(p2, grid, model.merge)
                    enhanced = grid_cnn(feats, model.merge)
                    _, scores = score_pairs(enhanced, grid, model.merge)
                    m_loss = merge_loss(scores, labels, config.pair_positive,
                                        config.pair_negative)
            total = (s_loss + m_loss) / config.images_per_step
            total.backward()
            split_total += float(s_loss.detach()) / config.images_per_step
            merge_total += float(m_loss.detach()) / config.images_per_step
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        row = {
            "iteration": it,
            "split_loss": split_total,
            "merge_loss": merge_total,
            "total_loss": split_total + merge_total,
            "lr": lr,
        }
        _check_finite(row["total_loss"], it)
        trace.append(row)
    model.eval()
    return TrainResult(model=model, trace=trace)
