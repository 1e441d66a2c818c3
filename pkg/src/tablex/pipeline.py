"""End-to-end page processing.

detect -> crop/resize -> separator masks -> grid assembly -> cell merging
-> map back to page coordinates -> content assignment -> JSON / HTML.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .detector import Detection, DetectorInferenceConfig, TableDetector, detect_tables
from .geometry import Box, QuadBox
from .grid_assembler import AssemblyError, assemble_grid
from .merger import apply_merges, grid_cnn, grid_features, score_pairs
from .splitter import TSRModel
from .structure import CellSpan, TableStructure

logger = logging.getLogger(__name__)

CONTENT_OVERLAP_THRESHOLD = 0.8


@dataclass
class CropTransform:
    """Affine page -> crop map: p' = (p - origin) * scale (per axis)."""

    origin: tuple[float, float]
    scale: tuple[float, float]  # (sx, sy)

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - np.array(self.origin)) * np.array(self.scale)

    def invert(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p / np.array(self.scale) + np.array(self.origin)


@dataclass
class TSRInferenceConfig:
    long_side: int = 1024
    binarize_threshold: float = 0.8  # separator mask score threshold
    merge_threshold: float = 0.8
    min_component: int = 4


@dataclass
class PageResult:
    image_id: str
    detections: list[Detection] = field(default_factory=list)
    structures: list[TableStructure] = field(default_factory=list)
    contents: list[list[list[int]]] = field(default_factory=list)  # per table/cell


def crop_and_resize(
    image: np.ndarray, region: QuadBox | Box, long_side: int = 1024
) -> tuple[np.ndarray, CropTransform]:
    """Crop the axis-aligned hull and scale its longer side to long_side."""
    hull = region.hull() if isinstance(region, QuadBox) else region
    h, w = image.shape[:2]
    x0 = int(np.floor(min(max(hull.x, 0), w - 2)))
    y0 = int(np.floor(min(max(hull.y, 0), h - 2)))
    x1 = int(np.ceil(max(min(hull.x2, w), x0 + 2)))
    y1 = int(np.ceil(max(min(hull.y2, h), y0 + 2)))
    crop = image[y0:y1, x0:x1]
    ch, cw = crop.shape[:2]
    scale = long_side / max(ch, cw)
    out_h, out_w = max(32, round(ch * scale)), max(32, round(cw * scale))
    t = torch.from_numpy(np.ascontiguousarray(crop)).permute(2, 0, 1)[None].float()
    t = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    resized = t[0].permute(1, 2, 0).numpy()
    return resized, CropTransform(origin=(x0, y0), scale=(out_w / cw, out_h / ch))


def _single_cell_structure(h: int, w: int) -> TableStructure:
    quad = QuadBox(((0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)))
    return TableStructure(rows=1, cols=1, cells=[CellSpan(0, 0, 0, 0, quad)])


def recognize_structure(
    model: TSRModel, crop: np.ndarray, cfg: TSRInferenceConfig | None = None
) -> TableStructure:
    """Structure of one table crop, in crop coordinates.

    Degenerate mask output (not enough separators for a grid) produces a
    single-cell table with a diagnostic instead of failing.
    """
    cfg = cfg or TSRInferenceConfig()
    model.eval()
    h, w = crop.shape[:2]
    tensor = torch.as_tensor(crop, dtype=torch.float32)
    if tensor.max() > 1.5:
        tensor = tensor / 255.0
    tensor = tensor.permute(2, 0, 1)[None]
    with torch.no_grad():
        masks, p2 = model(tensor)
        row_mask = masks.row.numpy()
        col_mask = masks.col.numpy()
        try:
            grid = assemble_grid(
                row_mask,
                col_mask,
                (h, w),
                binarize_threshold=cfg.binarize_threshold,
                min_component=cfg.min_component,
            )
        except (AssemblyError, ValueError) as exc:
            logger.warning("grid assembly failed (%s); emitting single cell", exc)
            return _single_cell_structure(h, w)
        if grid.rows * grid.cols < 2:
            # nothing to merge; the grid cell is the structure
            return apply_merges(grid, [], np.zeros(0), threshold=cfg.merge_threshold)
        feats = grid_features(p2, grid, model.merge)
        enhanced = grid_cnn(feats, model.merge)
        pairs, scores = score_pairs(enhanced, grid, model.merge)
    try:
        return apply_merges(grid, pairs, scores.numpy(), threshold=cfg.merge_threshold)
    except ValueError as exc:
        logger.warning("merge application failed (%s); emitting single cell", exc)
        return _single_cell_structure(h, w)


def _transform_structure(structure: TableStructure, transform: CropTransform) -> TableStructure:
    cells = []
    for c in structure.cells:
        pts = transform.invert(c.quad.as_array())
        cells.append(CellSpan(c.start_row, c.end_row, c.start_col, c.end_col,
                              QuadBox.from_array(pts)))
    return TableStructure(rows=structure.rows, cols=structure.cols, cells=cells)


def assign_content(
    text_boxes: list[Box], structure: TableStructure
) -> tuple[list[list[int]], list[int]]:
    """Text box -> cell when >= 80% of the box area lies inside the cell."""
    assignments: list[list[int]] = [[] for _ in structure.cells]
    unassigned: list[int] = []
    hulls = [c.hull() for c in structure.cells]
    for tid, box in enumerate(text_boxes):
        placed = False
        for ci, hull in enumerate(hulls):
            if box.intersection_area(hull) / box.area >= CONTENT_OVERLAP_THRESHOLD:
                assignments[ci].append(tid)
                placed = True
                break
        if not placed:
            unassigned.append(tid)
    return assignments, unassigned


def extract_page(
    detector: TableDetector,
    tsr: TSRModel,
    image: np.ndarray,
    image_id: str = "",
    detector_cfg: DetectorInferenceConfig | None = None,
    tsr_cfg: TSRInferenceConfig | None = None,
    text_boxes: list[Box] | None = None,
) -> PageResult:
    """Run both models over one page image (H, W, 3) uint8."""
    tsr_cfg = tsr_cfg or TSRInferenceConfig()
    detections = detect_tables(detector, image, detector_cfg)
    result = PageResult(image_id=image_id, detections=detections)
    for det in detections:
        crop, transform = crop_and_resize(image, det.quad, tsr_cfg.long_side)
        structure = recognize_structure(tsr, crop, tsr_cfg)
        structure = _transform_structure(structure, transform)
        result.structures.append(structure)
        if text_boxes is not None:
            result.contents.append(assign_content(text_boxes, structure)[0])
        else:
            result.contents.append([[] for _ in structure.cells])
    return result


# ---------------------------------------------------------------------------
# serialization


def page_result_to_dict(result: PageResult) -> dict:
    tables = []
    for det, structure, contents in zip(result.detections, result.structures, result.contents):
        tables.append(
            {
                "quad": [float(v) for v in det.quad.as_array().reshape(-1)],
                "score": float(det.score),
                "grid": {"rows": structure.rows, "cols": structure.cols},
                "cells": [
                    {
                        "start_row": c.start_row,
                        "end_row": c.end_row,
                        "start_col": c.start_col,
                        "end_col": c.end_col,
                        "quad": [float(v) for v in c.quad.as_array().reshape(-1)],
                        "content_ids": list(map(int, ids)),
                    }
                    for c, ids in zip(structure.cells, contents)
                ],
            }
        )
    return {"image": result.image_id, "tables": tables}


def page_result_to_json(result: PageResult) -> str:
    return json.dumps(page_result_to_dict(result), sort_keys=True)


def page_result_from_dict(d: dict) -> PageResult:
    result = PageResult(image_id=d["image"])
    for t in d["tables"]:
        quad = QuadBox.from_array(np.array(t["quad"]).reshape(4, 2))
        result.detections.append(Detection(quad=quad, score=t["score"]))
        cells = []
        contents = []
        for c in t["cells"]:
            cells.append(
                CellSpan(
                    c["start_row"],
                    c["end_row"],
                    c["start_col"],
                    c["end_col"],
                    QuadBox.from_array(np.array(c["quad"]).reshape(4, 2)),
                )
            )
            contents.append(list(c["content_ids"]))
        result.structures.append(
            TableStructure(rows=t["grid"]["rows"], cols=t["grid"]["cols"], cells=cells)
        )
        result.contents.append(contents)
    return result


def page_result_from_json(text: str) -> PageResult:
    return page_result_from_dict(json.loads(text))


def to_html(structure: TableStructure) -> str:
    """<table> markup with rowspan/colspan derived from the grid spans."""
    by_row: dict[int, list[CellSpan]] = {r: [] for r in range(structure.rows)}
    for cell in structure.cells:
        by_row[cell.start_row].append(cell)
    parts = ["<table>"]
    for r in range(structure.rows):
        parts.append("<tr>")
        for cell in sorted(by_row[r], key=lambda c: c.start_col):
            attrs = ""
            if cell.rowspan > 1:
                attrs += f' rowspan="{cell.rowspan}"'
            if cell.colspan > 1:
                attrs += f' colspan="{cell.colspan}"'
            parts.append(f"<td{attrs}></td>")
        parts.append("</tr>")
    parts.append("</table>")
    return "".join(parts)
