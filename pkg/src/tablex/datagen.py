"""Deterministic synthetic page generator with full table annotations.

Pages carry 1-3 tables (bordered or borderless, spanning and empty cells,
occasional very wide blank columns), glyph-like filler text, distractor
paragraphs, and an optional smooth sinusoidal warp. The written
annotation records table quads, internal separator polylines, cell grid
spans with quads and content ids, and the page-level content boxes.

The same annotation schema doubles as the on-disk training format:
images/NNNN.png + annotations/NNNN.json + manifest.json.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import Box

TEXT_CLEARANCE = 5.0  # min gap between text and any separator line
MIN_REGION_THICKNESS = 8.0


class GenerationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# annotation types


@dataclass
class CellAnnotation:
    start_row: int
    end_row: int
    start_col: int
    end_col: int
    quad: np.ndarray  # (4, 2) page coords, clockwise from top-left
    content_ids: list[int] = field(default_factory=list)

    @property
    def rowspan(self) -> int:
        return self.end_row - self.start_row + 1

    @property
    def colspan(self) -> int:
        return self.end_col - self.start_col + 1


@dataclass
class TableAnnotation:
    quad: np.ndarray  # (4, 2)
    row_separators: list[np.ndarray]  # internal lines only, (K, 2) polylines
    col_separators: list[np.ndarray]
    cells: list[CellAnnotation]
    grid_rows: int
    grid_cols: int

    def transformed(self, origin: tuple[float, float], scale: float) -> "TableAnnotation":
        """Map all geometry into a crop frame: p' = (p - origin) * scale."""
        ox, oy = origin
        shift = np.array([ox, oy])

        def tx(a):
            return (np.asarray(a, dtype=np.float64) - shift) * scale

        return TableAnnotation(
            quad=tx(self.quad),
            row_separators=[tx(p) for p in self.row_separators],
            col_separators=[tx(p) for p in self.col_separators],
            cells=[replace(c, quad=tx(c.quad)) for c in self.cells],
            grid_rows=self.grid_rows,
            grid_cols=self.grid_cols,
        )


@dataclass
class DocAnnotation:
    width: int
    height: int
    tables: list[TableAnnotation]
    content_boxes: list[Box]  # page coords, ids = list indices
    distractors: list[Box] = field(default_factory=list)
    warp: dict | None = None

    def validate(self) -> None:
        for t_idx, table in enumerate(self.tables):
            if len(table.row_separators) != table.grid_rows - 1:
                raise GenerationError(f"table {t_idx}: row separator count mismatch")
            if len(table.col_separators) != table.grid_cols - 1:
                raise GenerationError(f"table {t_idx}: col separator count mismatch")
            owner = np.full((table.grid_rows, table.grid_cols), -1)
            for i, cell in enumerate(table.cells):
                sl = owner[cell.start_row : cell.end_row + 1, cell.start_col : cell.end_col + 1]
                if (sl != -1).any():
                    raise GenerationError(f"table {t_idx}: overlapping cell spans")
                sl[:] = i
                hull = _quad_hull(cell.quad)
                for cid in cell.content_ids:
                    b = self.content_boxes[cid]
                    if not (
                        b.x >= hull[0] - 0.51
                        and b.y >= hull[1] - 0.51
                        and b.x2 <= hull[2] + 0.51
                        and b.y2 <= hull[3] + 0.51
                    ):
                        raise GenerationError(
                            f"table {t_idx}: content box {cid} escapes its cell"
                        )
            if (owner == -1).any():
                raise GenerationError(f"table {t_idx}: cell spans do not tile the grid")


def _quad_hull(quad: np.ndarray) -> tuple[float, float, float, float]:
    q = np.asarray(quad)
    return float(q[:, 0].min()), float(q[:, 1].min()), float(q[:, 0].max()), float(q[:, 1].max())


# ---------------------------------------------------------------------------
# config


@dataclass
class PageConfig:
    width: int = 640
    height: int = 896
    table_count: tuple[int, int] = (1, 2)
    rows: tuple[int, int] = (2, 5)
    cols: tuple[int, int] = (2, 5)
    ruling_line_prob: float = 0.6
    span_prob: float = 0.12
    empty_cell_prob: float = 0.08
    wide_col_prob: float = 0.12
    wide_col_scale: float = 2.5
    curve_amplitude: tuple[float, float] = (0.0, 0.0)
    curve_wavelength: float = 420.0
    distractor_blocks: tuple[int, int] = (1, 2)
    margin: int = 24
    min_row_height: int = 30
    max_row_height: int = 52
    min_col_width: int = 56
    max_col_width: int = 110
    text_height: tuple[int, int] = (10, 16)

    def validate(self) -> None:
        if not (2 <= self.rows[0] <= self.rows[1] <= 12):
            raise GenerationError(f"row bounds must lie in [2, 12], got {self.rows}")
        if not (2 <= self.cols[0] <= self.cols[1] <= 8):
            raise GenerationError(f"col bounds must lie in [2, 8], got {self.cols}")
        if not (1 <= self.table_count[0] <= self.table_count[1] <= 3):
            raise GenerationError(f"table count must lie in [1, 3], got {self.table_count}")
        if self.curve_amplitude[0] > self.curve_amplitude[1] or self.curve_amplitude[0] < 0:
            raise GenerationError("bad curve amplitude range")
        if self.curve_amplitude[1] > 0 and self.curve_amplitude[1] >= self.curve_wavelength / 8:
            raise GenerationError("amplitude must stay below wavelength/8")
        min_table_h = self.rows[0] * self.min_row_height
        if self.height < 2 * self.margin + min_table_h + 20:
            raise GenerationError("page too small for the configured tables")
        if self.width < 2 * self.margin + self.cols[0] * self.min_col_width:
            raise GenerationError("page too narrow for the configured tables")


# ---------------------------------------------------------------------------
# span partition


def _partition_spans(rng, rows, cols, span_prob) -> list[list[int]]:
    """Greedy rectangular partition of the grid; returns [r0, r1, c0, c1]."""
    occupied = np.zeros((rows, cols), dtype=bool)
    spans = []
    for r in range(rows):
        for c in range(cols):
            if occupied[r, c]:
                continue
            rs = cs = 1
            if rng.uniform() < span_prob:
                rs = int(rng.integers(1, min(3, rows - r) + 1))
                cs = int(rng.integers(1, min(3, cols - c) + 1))
                # shrink until the whole rectangle is free
                while occupied[r : r + rs, c : c + cs].any():
                    if cs > 1:
                        cs -= 1
                    elif rs > 1:
                        rs -= 1
            occupied[r : r + rs, c : c + cs] = True
            spans.append([r, r + rs - 1, c, c + cs - 1])
    return spans


def _repair_guards(spans, rows, cols) -> list[list[int]]:
    """Ensure every grid row has a rowspan-1 cell and every grid column a
    colspan-1 cell (required for separator ground truth to stay exact)."""

    def split_rows(span):
        r0, r1, c0, c1 = span
        return [[r, r, c0, c1] for r in range(r0, r1 + 1)]

    def split_cols(span):
        r0, r1, c0, c1 = span
        return [[r0, r1, c, c] for c in range(c0, c1 + 1)]

    for axis in ("row", "col"):
        size = rows if axis == "row" else cols
        for k in range(size):
            def covers(s):
                return (s[0] <= k <= s[1]) if axis == "row" else (s[2] <= k <= s[3])

            def unit(s):
                return s[0] == s[1] if axis == "row" else s[2] == s[3]

            if any(covers(s) and unit(s) for s in spans):
                continue
            victim = next(i for i, s in enumerate(spans) if covers(s))
            split = split_rows(spans[victim]) if axis == "row" else split_cols(spans[victim])
            spans = spans[:victim] + split + spans[victim + 1 :]
    return spans


def _choose_empty(rng, spans, rows, cols, empty_prob) -> list[bool]:
    """Mark cells empty while keeping, per row and column, at least one
    non-empty cell that does not span along that axis."""
    non_empty = [True] * len(spans)
    row_guards = {r: [i for i, s in enumerate(spans) if s[0] == s[1] == r] for r in range(rows)}
    col_guards = {c: [i for i, s in enumerate(spans) if s[2] == s[3] == c] for c in range(cols)}
    order = rng.permutation(len(spans))
    for i in order:
        if rng.uniform() >= empty_prob:
            continue
        s = spans[i]
        if s[0] == s[1]:
            alive = sum(1 for j in row_guards[s[0]] if non_empty[j])
            if alive <= 1:
                continue
        if s[2] == s[3]:
            alive = sum(1 for j in col_guards[s[2]] if non_empty[j])
            if alive <= 1:
                continue
        non_empty[i] = False
    return non_empty


# ---------------------------------------------------------------------------
# page synthesis


def _draw_glyph_block(canvas, box: Box, rng) -> None:
    """Word-like dark chunks filling the box."""
    y0, y1 = int(round(box.y)), int(round(box.y2))
    x = box.x
    while x < box.x2 - 4:
        w = float(rng.uniform(8, 22))
        x1 = min(x + w, box.x2)
        shade = int(rng.integers(25, 75))
        canvas[y0:y1, int(round(x)) : int(round(x1))] = shade
        x = x1 + float(rng.uniform(3, 6))


def _make_table(rng, config: PageConfig, x0: float, y0: float, avail_w: float,
                warp_amp: float, content_boxes: list[Box]) -> TableAnnotation:
    rows = int(rng.integers(config.rows[0], config.rows[1] + 1))
    cols = int(rng.integers(config.cols[0], config.cols[1] + 1))

    widths = rng.uniform(config.min_col_width, config.max_col_width, size=cols)
    wide = rng.uniform(size=cols) < config.wide_col_prob
    widths[wide] *= config.wide_col_scale
    if widths.sum() > avail_w:
        widths *= avail_w / widths.sum()
    widths = np.maximum(widths, 30.0)

    # vertical clearance needs a margin for the worst-case warp shear
    # across a text box (see warp_curved); column clearance analogously
    shear = 2 * np.pi * warp_amp / config.curve_wavelength
    pad_y = TEXT_CLEARANCE + min(2 * warp_amp, shear * float(widths.max()))
    pad_x = TEXT_CLEARANCE + min(2 * warp_amp, shear * config.text_height[1])
    min_h = config.text_height[0] + 2 * pad_y + 2
    heights = rng.uniform(
        max(config.min_row_height, min_h), max(config.max_row_height, min_h + 2), size=rows
    )

    xs = x0 + np.concatenate([[0.0], np.cumsum(widths)])
    ys = y0 + np.concatenate([[0.0], np.cumsum(heights)])

    spans = _repair_guards(_partition_spans(rng, rows, cols, config.span_prob), rows, cols)
    non_empty = _choose_empty(rng, spans, rows, cols, config.empty_cell_prob)

    cells = []
    for s, filled in zip(spans, non_empty):
        r0, r1, c0, c1 = s
        quad = np.array(
            [
                [xs[c0], ys[r0]],
                [xs[c1 + 1], ys[r0]],
                [xs[c1 + 1], ys[r1 + 1]],
                [xs[c0], ys[r1 + 1]],
            ]
        )
        ids: list[int] = []
        if filled:
            inner_x0, inner_x1 = xs[c0] + pad_x, xs[c1 + 1] - pad_x
            inner_y0, inner_y1 = ys[r0] + pad_y, ys[r1 + 1] - pad_y
            n_lines = 1 if r1 == r0 else int(rng.integers(1, 3))
            for k in range(n_lines):
                th = float(rng.uniform(*config.text_height))
                ty0 = inner_y0 + k * (inner_y1 - inner_y0) / n_lines
                ty1 = min(ty0 + th, inner_y1)
                if ty1 - ty0 < 6:
                    continue
                tw = float(rng.uniform(0.35, 0.85)) * (inner_x1 - inner_x0)
                tx0 = inner_x0 + float(rng.uniform(0, max(1e-6, (inner_x1 - inner_x0) - tw)))
                if tw < 8:
                    continue
                ids.append(len(content_boxes))
                content_boxes.append(Box(tx0, ty0, tw, ty1 - ty0))
        cells.append(CellAnnotation(r0, r1, c0, c1, quad, ids))

    table_w = float(xs[-1] - xs[0])
    quad = np.array([[xs[0], ys[0]], [xs[-1], ys[0]], [xs[-1], ys[-1]], [xs[0], ys[-1]]])
    row_seps = [
        np.array([[xs[0], y], [xs[0] + table_w / 2, y], [xs[-1], y]]) for y in ys[1:-1]
    ]
    col_seps = [
        np.array([[x, ys[0]], [x, ys[0] + (ys[-1] - ys[0]) / 2], [x, ys[-1]]]) for x in xs[1:-1]
    ]
    return TableAnnotation(quad, row_seps, col_seps, cells, rows, cols)


def _render_table(canvas, table: TableAnnotation, content_boxes, rng, bordered: bool) -> None:
    if bordered:
        hull = _quad_hull(table.quad)
        shade = int(rng.integers(20, 70))
        x0, y0, x1, y1 = (int(round(v)) for v in hull)
        canvas[y0 : y0 + 2, x0:x1] = shade
        canvas[y1 - 2 : y1, x0:x1] = shade
        canvas[y0:y1, x0 : x0 + 2] = shade
        canvas[y0:y1, x1 - 2 : x1] = shade
        for line in table.row_separators:
            y = int(round(line[0, 1]))
            canvas[y : y + 2, x0:x1] = shade
        for line in table.col_separators:
            x = int(round(line[0, 0]))
            canvas[y0:y1, x : x + 2] = shade
    for cell in table.cells:
        for cid in cell.content_ids:
            _draw_glyph_block(canvas, content_boxes[cid], rng)


def synthesize_page(config: PageConfig, seed: int) -> tuple[np.ndarray, DocAnnotation]:
    """Render one page; byte-identical output for equal (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    warp_amp = float(rng.uniform(*config.curve_amplitude))
    canvas = np.full((config.height, config.width), 255, dtype=np.uint8)

    n_tables = int(rng.integers(config.table_count[0], config.table_count[1] + 1))
    content_boxes: list[Box] = []
    tables: list[TableAnnotation] = []
    distractors: list[Box] = []

    # reserve the warp margin at the page border so warped content stays inside
    edge = config.margin + warp_amp
    y = edge + float(rng.uniform(0, 20))
    avail_w = config.width - 2 * edge
    for t in range(n_tables):
        remaining = config.height - edge - y
        min_h = config.rows[0] * config.min_row_height
        if remaining < min_h + 10:
            raise GenerationError(
                f"page cannot fit table {t + 1}/{n_tables}; increase page height"
            )
        x0 = edge + float(rng.uniform(0, max(1.0, avail_w - config.cols[0] * config.min_col_width)) * 0.2)
        table = _make_table(rng, config, x0, y, avail_w - (x0 - edge), warp_amp, content_boxes)
        hull = _quad_hull(table.quad)
        if hull[3] > config.height - edge:
            raise GenerationError("generated table exceeds the page; increase page height")
        tables.append(table)
        bordered = bool(rng.uniform() < config.ruling_line_prob)
        _render_table(canvas, table, content_boxes, rng, bordered)
        y = hull[3] + float(rng.uniform(24, 60))

        # distractor paragraph between tables when there is room
        n_blocks = int(rng.integers(config.distractor_blocks[0], config.distractor_blocks[1] + 1))
        for _ in range(n_blocks):
            if y + 30 > config.height - edge:
                break
            pw = float(rng.uniform(0.4, 0.9)) * avail_w
            px = edge + float(rng.uniform(0, avail_w - pw))
            for line_idx in range(int(rng.integers(1, 4))):
                ly = y + line_idx * 14
                if ly + 10 > config.height - edge:
                    break
                b = Box(px, ly, pw * float(rng.uniform(0.7, 1.0)), 9)
                distractors.append(b)
                _draw_glyph_block(canvas, b, rng)
            y += 14 * 3 + float(rng.uniform(10, 30))

    annotation = DocAnnotation(
        width=config.width,
        height=config.height,
        tables=tables,
        content_boxes=content_boxes,
        distractors=distractors,
    )
    image = np.repeat(canvas[:, :, None], 3, axis=2)
    if warp_amp > 0:
        image, annotation = warp_curved(
            image,
            annotation,
            amplitude=warp_amp,
            wavelength=config.curve_wavelength,
            phase_x=float(rng.uniform(0, 2 * np.pi)),
            phase_y=float(rng.uniform(0, 2 * np.pi)),
        )
    annotation.validate()
    return image, annotation


# ---------------------------------------------------------------------------
# warping


def _resample_polyline(poly: np.ndarray, step: float = 4.0) -> np.ndarray:
    pts = np.asarray(poly, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = seg.sum()
    if total <= step:
        return pts
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    samples = np.arange(0.0, total + step / 2, step)
    samples[-1] = total
    x = np.interp(samples, arc, pts[:, 0])
    y = np.interp(samples, arc, pts[:, 1])
    return np.stack([x, y], axis=1)


def warp_points(points: np.ndarray, amplitude, wavelength, phase_x=0.0, phase_y=0.0):
    """Forward warp: vertical shift dy(x), then horizontal shift dx(y)."""
    p = np.asarray(points, dtype=np.float64).copy()
    p[:, 1] = p[:, 1] + amplitude * np.sin(2 * np.pi * p[:, 0] / wavelength + phase_y)
    p[:, 0] = p[:, 0] + amplitude * np.sin(2 * np.pi * p[:, 1] / wavelength + phase_x)
    return p


def unwarp_points(points: np.ndarray, amplitude, wavelength, phase_x=0.0, phase_y=0.0):
    """Exact inverse of warp_points."""
    p = np.asarray(points, dtype=np.float64).copy()
    p[:, 0] = p[:, 0] - amplitude * np.sin(2 * np.pi * p[:, 1] / wavelength + phase_x)
    p[:, 1] = p[:, 1] - amplitude * np.sin(2 * np.pi * p[:, 0] / wavelength + phase_y)
    return p


def _warp_box(box: Box, amplitude, wavelength, phase_x, phase_y) -> Box:
    corners = np.array([[box.x, box.y], [box.x2, box.y], [box.x2, box.y2], [box.x, box.y2]])
    w = warp_points(corners, amplitude, wavelength, phase_x, phase_y)
    return Box.from_xyxy(w[:, 0].min(), w[:, 1].min(), w[:, 0].max(), w[:, 1].max())


def warp_curved(
    image: np.ndarray,
    annotation: DocAnnotation,
    amplitude: float,
    wavelength: float,
    phase_x: float = 0.0,
    phase_y: float = 0.0,
) -> tuple[np.ndarray, DocAnnotation]:
    """Smooth sinusoidal distortion of the page and all its geometry.

    Polylines are re-sampled every 4 px before warping; boxes become the
    bounding box of their warped corners. amplitude 0 is the identity.
    """
    if amplitude == 0:
        return image, annotation

    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src = unwarp_points(
        np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1), amplitude, wavelength, phase_x, phase_y
    )
    coords = np.stack([src[:, 1].reshape(h, w), src[:, 0].reshape(h, w)])
    if image.ndim == 3:
        warped = np.stack(
            [
                ndimage.map_coordinates(image[..., c].astype(np.float64), coords, order=1,
                                        mode="constant", cval=255.0)
                for c in range(image.shape[2])
            ],
            axis=2,
        )
    else:
        warped = ndimage.map_coordinates(image.astype(np.float64), coords, order=1,
                                         mode="constant", cval=255.0)
    warped = np.clip(np.rint(warped), 0, 255).astype(np.uint8)

    def wp(points):
        return warp_points(points, amplitude, wavelength, phase_x, phase_y)

    tables = []
    for t in annotation.tables:
        tables.append(
            TableAnnotation(
                quad=wp(t.quad),
                row_separators=[wp(_resample_polyline(p)) for p in t.row_separators],
                col_separators=[wp(_resample_polyline(p)) for p in t.col_separators],
                cells=[replace(c, quad=wp(c.quad)) for c in t.cells],
                grid_rows=t.grid_rows,
                grid_cols=t.grid_cols,
            )
        )
    params = dict(amplitude=amplitude, wavelength=wavelength, phase_x=phase_x, phase_y=phase_y)
    new_annotation = DocAnnotation(
        width=annotation.width,
        height=annotation.height,
        tables=tables,
        content_boxes=[_warp_box(b, **params) for b in annotation.content_boxes],
        distractors=[_warp_box(b, **params) for b in annotation.distractors],
        warp=params,
    )
    return warped, new_annotation


# ---------------------------------------------------------------------------
# JSON round trip and corpus writing


def annotation_to_dict(annotation: DocAnnotation) -> dict:
    return {
        "width": annotation.width,
        "height": annotation.height,
        "warp": annotation.warp,
        "content_boxes": [[b.x, b.y, b.w, b.h] for b in annotation.content_boxes],
        "distractors": [[b.x, b.y, b.w, b.h] for b in annotation.distractors],
        "tables": [
            {
                "quad": np.asarray(t.quad).reshape(-1).tolist(),
                "grid_rows": t.grid_rows,
                "grid_cols": t.grid_cols,
                "row_separators": [np.asarray(p).tolist() for p in t.row_separators],
                "col_separators": [np.asarray(p).tolist() for p in t.col_separators],
                "cells": [
                    {
                        "start_row": c.start_row,
                        "end_row": c.end_row,
                        "start_col": c.start_col,
                        "end_col": c.end_col,
                        "quad": np.asarray(c.quad).reshape(-1).tolist(),
                        "content_ids": list(c.content_ids),
                    }
                    for c in t.cells
                ],
            }
            for t in annotation.tables
        ],
    }


def annotation_from_dict(d: dict) -> DocAnnotation:
    tables = []
    for t in d["tables"]:
        tables.append(
            TableAnnotation(
                quad=np.array(t["quad"], dtype=np.float64).reshape(4, 2),
                row_separators=[np.array(p, dtype=np.float64) for p in t["row_separators"]],
                col_separators=[np.array(p, dtype=np.float64) for p in t["col_separators"]],
                cells=[
                    CellAnnotation(
                        c["start_row"],
                        c["end_row"],
                        c["start_col"],
                        c["end_col"],
                        np.array(c["quad"], dtype=np.float64).reshape(4, 2),
                        list(c["content_ids"]),
                    )
                    for c in t["cells"]
                ],
                grid_rows=t["grid_rows"],
                grid_cols=t["grid_cols"],
            )
        )
    return DocAnnotation(
        width=d["width"],
        height=d["height"],
        tables=tables,
        content_boxes=[Box(*b) for b in d["content_boxes"]],
        distractors=[Box(*b) for b in d.get("distractors", [])],
        warp=d.get("warp"),
    )


def save_annotation(path, annotation: DocAnnotation) -> None:
    Path(path).write_text(json.dumps(annotation_to_dict(annotation), sort_keys=True))


def load_annotation(path) -> DocAnnotation:
    return annotation_from_dict(json.loads(Path(path).read_text()))


def write_corpus(config: PageConfig, out_dir, count: int, seed: int) -> dict:
    """images/NNNN.png + annotations/NNNN.json + manifest.json."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    for i in range(count):
        image, annotation = synthesize_page(config, seed + i)
        Image.fromarray(image).save(out / "images" / f"{i:04d}.png")
        save_annotation(out / "annotations" / f"{i:04d}.json", annotation)
    manifest = {
        "config": asdict(config),
        "seed": seed,
        "count": count,
        "version": 1,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return manifest


@dataclass
class TableCrop:
    """One table's geometry re-expressed in its crop frame."""

    origin: tuple[int, int]  # (x, y) of the crop in page coords
    size: tuple[int, int]  # (h, w)
    table: TableAnnotation
    contents: dict[int, Box]  # content id -> box, crop coords


def crop_table_annotation(
    annotation: DocAnnotation, index: int, margin: float = 0.0
) -> TableCrop:
    """Axis-aligned crop of one annotated table plus transformed geometry."""
    table = annotation.tables[index]
    x0, y0, x1, y1 = _quad_hull(table.quad)
    ox = int(np.floor(max(0.0, x0 - margin)))
    oy = int(np.floor(max(0.0, y0 - margin)))
    ex = int(np.ceil(min(annotation.width, x1 + margin)))
    ey = int(np.ceil(min(annotation.height, y1 + margin)))
    moved = table.transformed((ox, oy), 1.0)
    contents = {}
    for cell in table.cells:
        for cid in cell.content_ids:
            b = annotation.content_boxes[cid]
            contents[cid] = Box(b.x - ox, b.y - oy, b.w, b.h)
    return TableCrop(origin=(ox, oy), size=(ey - oy, ex - ox), table=moved, contents=contents)


def load_corpus(corpus_dir) -> list[tuple[np.ndarray, DocAnnotation]]:
    from PIL import Image

    out = []
    root = Path(corpus_dir)
    for img_path in sorted((root / "images").glob("*.png")):
        ann_path = root / "annotations" / (img_path.stem + ".json")
        image = np.asarray(Image.open(img_path).convert("RGB"))
        out.append((image, load_annotation(ann_path)))
    return out
