"""Deterministic post-processing from separator masks to a cell grid.

Binarize the row/column probability maps, extract connected components,
fit a polynomial center line and thickness per component, offset border
lines, and intersect everything into an M x N grid of shrunk cell quads.

Mask resolutions follow the prediction heads: the row mask is
(H, ceil(W/8)) and the column mask is (ceil(H/8), W) for a crop of
H x W pixels; the reduced axis maps back through x = 8*c + 3.5 (pixel
centers of the 8-px span).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import QuadBox

logger = logging.getLogger(__name__)

REDUCED_AXIS_SCALE = 8.0
REDUCED_AXIS_OFFSET = 3.5
BORDER_SNAP_DISTANCE = 4.0
POLYLINE_STEP = 2.0

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class AssemblyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# components


@dataclass
class Component:
    """Pixel set of one connected blob plus its boundary contour."""

    pixels: np.ndarray  # (N, 2) int (row, col) in mask coordinates
    contour: np.ndarray  # (M, 2) boundary subset

    @property
    def size(self) -> int:
        return len(self.pixels)

    def merged_with(self, other: "Component") -> "Component":
        return Component(
            pixels=np.concatenate([self.pixels, other.pixels]),
            contour=np.concatenate([self.contour, other.contour]),
        )


def binarize(mask: np.ndarray, threshold: float = 0.8) -> np.ndarray:
    """Boundary-inclusive thresholding: value >= threshold -> separator."""
    return np.asarray(mask) >= threshold


def extract_components(binary: np.ndarray, min_pixels: int = 4) -> list[Component]:
    """8-connected components with boundary contours; tiny blobs dropped."""
    binary = np.asarray(binary, dtype=bool)
    if not binary.any():
        return []
    labels, count = ndimage.label(binary, structure=_EIGHT_CONNECTED)
    interior = ndimage.binary_erosion(binary, structure=np.array(
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool))
    boundary = binary & ~interior
    out = []
    for idx in range(1, count + 1):
        sel = labels == idx
        if int(sel.sum()) < min_pixels:
            continue
        pixels = np.argwhere(sel)
        contour = np.argwhere(sel & boundary)
        out.append(Component(pixels=pixels, contour=contour))
    return out


# ---------------------------------------------------------------------------
# line fitting


@dataclass
class SeparatorLine:
    """Fitted curvilinear separator.

    center holds polynomial coefficients (highest power first) of
    value = f(position - origin), where position runs along x for row
    lines and along y for column lines, in crop pixels.
    """

    orientation: str  # "row" | "col"
    center: np.ndarray
    origin: float
    thickness: float
    extent: tuple[float, float]

    def __post_init__(self):
        if self.orientation not in ("row", "col"):
            raise ValueError(f"bad orientation {self.orientation!r}")
        if self.thickness < 0:
            raise ValueError("thickness must be >= 0")
        if self.extent[1] <= self.extent[0]:
            raise ValueError("extent must be non-degenerate")

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        """Evaluate the center line, extending linearly beyond the extent."""
        t = np.asarray(positions, dtype=np.float64)
        lo, hi = self.extent
        clamped = np.clip(t, lo, hi)
        vals = np.polyval(self.center, clamped - self.origin)
        deriv = np.polyval(np.polyder(self.center), clamped - self.origin)
        return vals + deriv * (t - clamped)

    def region_bounds(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = self(positions)
        return c - self.thickness / 2, c + self.thickness / 2


def _scan_midpoints(component: Component, orientation: str):
    """Per-scan-position (min+max)/2 midpoints and pixel counts."""
    pix = component.pixels
    if orientation == "row":
        pos_axis, val_axis = 1, 0  # scan along columns, midpoint over rows
    else:
        pos_axis, val_axis = 0, 1
    positions = pix[:, pos_axis]
    values = pix[:, val_axis]
    uniq = np.unique(positions)
    mids = np.empty(len(uniq), dtype=np.float64)
    counts = np.empty(len(uniq), dtype=np.float64)
    for i, p in enumerate(uniq):
        vals = values[positions == p]
        mids[i] = (vals.min() + vals.max()) / 2.0
        counts[i] = len(vals)
    return uniq.astype(np.float64), mids, counts


def fit_center_line(
    component: Component,
    orientation: str,
    degree: int = 3,
    axis_scale: float = 1.0,
    axis_offset: float = 0.0,
) -> SeparatorLine:
    """Least-squares polynomial through per-scan-position midpoints.

    axis_scale / axis_offset map mask scan positions to crop pixels for
    masks whose scan axis is reduced (8x for the prediction heads). The
    degree drops automatically when there are fewer midpoints than
    coefficients.
    """
    positions, mids, counts = _scan_midpoints(component, orientation)
    if len(positions) <= 2:
        raise AssemblyError(
            f"{orientation} component spans only {len(positions)} scan positions"
        )
    xs = positions * axis_scale + axis_offset
    deg = min(degree, len(xs) - 1)
    origin = float(xs.mean())
    coeffs = np.polyfit(xs - origin, mids, deg)
    extent = (float(xs.min() - axis_scale / 2), float(xs.max() + axis_scale / 2))
    thickness = float(counts.mean())
    return SeparatorLine(orientation, coeffs, origin, thickness, extent)


def estimate_thickness(
    component: Component,
    orientation: str,
    scan_stride: int = 8,
    axis_scale: float = 1.0,
) -> float:
    """Mean pixel count over perpendicular scans every scan_stride crop px."""
    positions, _, counts = _scan_midpoints(component, orientation)
    step = max(1, round(scan_stride / axis_scale))
    picked = counts[:: step]
    return float(picked.mean())


def border_lines(
    line: SeparatorLine,
    lo: float | None = None,
    hi: float | None = None,
    step: float = POLYLINE_STEP,
) -> tuple[np.ndarray, np.ndarray]:
    """Center polyline offset by +-thickness/2 perpendicular to the axis.

    Returns (first, second) polylines as (K, 2) arrays of (x, y); for row
    lines first is the upper border, for column lines the left border.
    """
    lo = line.extent[0] if lo is None else lo
    hi = line.extent[1] if hi is None else hi
    ts = np.arange(lo, hi + step, step)
    a, b = line.region_bounds(ts)
    if line.orientation == "row":
        first = np.stack([ts, a], axis=1)
        second = np.stack([ts, b], axis=1)
    else:
        first = np.stack([a, ts], axis=1)
        second = np.stack([b, ts], axis=1)
    return first, second


# ---------------------------------------------------------------------------
# grid intersection


@dataclass
class CellGrid:
    """M x N shrunk cell quads plus the separator center intersections."""

    rows: int
    cols: int
    cells: list[list[QuadBox]]
    points: np.ndarray  # (M+1, N+1, 2) center-line intersections
    row_lines: list[SeparatorLine] = field(default_factory=list)
    col_lines: list[SeparatorLine] = field(default_factory=list)

    def cell_list(self) -> list[QuadBox]:
        return [q for row in self.cells for q in row]


def _border_separator(orientation: str, position: float, length: float) -> SeparatorLine:
    return SeparatorLine(
        orientation=orientation,
        center=np.array([float(position)]),
        origin=0.0,
        thickness=0.0,
        extent=(0.0, max(length - 1.0, 1.0)),
    )


def _lines_overlap(a: SeparatorLine, b: SeparatorLine, step: float = POLYLINE_STEP) -> bool:
    lo = min(a.extent[0], b.extent[0])
    hi = max(a.extent[1], b.extent[1])
    ts = np.arange(lo, hi + step, step)
    a_lo, a_hi = a.region_bounds(ts)
    b_lo, b_hi = b.region_bounds(ts)
    return bool((np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo) >= 0).any())


def _merge_overlapping(
    components: list[Component],
    lines: list[SeparatorLine],
    orientation: str,
    axis_scale: float,
    axis_offset: float,
) -> list[SeparatorLine]:
    comps = list(components)
    fitted = list(lines)
    changed = True
    while changed:
        changed = False
        for i in range(len(fitted)):
            for j in range(i + 1, len(fitted)):
                if _lines_overlap(fitted[i], fitted[j]):
                    logger.warning(
                        "merging overlapping %s separators at ~%.1f px",
                        orientation,
                        float(np.polyval(fitted[i].center, 0.0)),
                    )
                    merged = comps[i].merged_with(comps[j])
                    comps[i] = merged
                    fitted[i] = fit_center_line(
                        merged, orientation, axis_scale=axis_scale, axis_offset=axis_offset
                    )
                    del comps[j], fitted[j]
                    changed = True
                    break
            if changed:
                break
    return fitted


def _sort_key(line: SeparatorLine) -> float:
    mid = (line.extent[0] + line.extent[1]) / 2
    return float(line(np.array([mid]))[0])


def _interp_fn(polyline: np.ndarray, along: str):
    """Linear interpolation over a sampled polyline; along='x' means the
    polyline is y(x), along='y' means x(y)."""
    if along == "x":
        xs, ys = polyline[:, 0], polyline[:, 1]
        return lambda t: np.interp(t, xs, ys)
    ys, xs = polyline[:, 1], polyline[:, 0]
    return lambda t: np.interp(t, ys, xs)


def _intersect_polylines(row_poly: np.ndarray, col_poly: np.ndarray) -> tuple[float, float]:
    """Crossing of a near-horizontal and a near-vertical polyline.

    Solves x = g(f(x)) by bisection, where f is the row polyline as y(x)
    and g the column polyline as x(y); unique for separators whose slopes
    satisfy |f'||g'| < 1.
    """
    f = _interp_fn(row_poly, "x")
    g = _interp_fn(col_poly, "y")
    lo = float(min(row_poly[:, 0].min(), col_poly[:, 0].min())) - 8.0
    hi = float(max(row_poly[:, 0].max(), col_poly[:, 0].max())) + 8.0
    h_lo = lo - g(f(lo))
    h_hi = hi - g(f(hi))
    if h_lo > 0 or h_hi < 0:
        # no sign change: clamp to the nearer bracket end
        x = lo if abs(h_lo) < abs(h_hi) else hi
        return float(x), float(f(x))
    for _ in range(48):
        mid = (lo + hi) / 2
        if mid - g(f(mid)) < 0:
            lo = mid
        else:
            hi = mid
    x = (lo + hi) / 2
    return float(x), float(f(x))


def _line_polyline(
    line: SeparatorLine, lo: float, hi: float, side: int, step: float = POLYLINE_STEP
) -> np.ndarray:
    """Border polyline (side=-1 first border, +1 second, 0 center) sampled
    over [lo, hi] regardless of the line's own extent."""
    ts = np.arange(lo, hi + step, step)
    vals = line(ts) + side * line.thickness / 2
    if line.orientation == "row":
        return np.stack([ts, vals], axis=1)
    return np.stack([vals, ts], axis=1)


def intersect_grid(
    row_lines: list[SeparatorLine],
    col_lines: list[SeparatorLine],
    crop_size: tuple[int, int],
) -> CellGrid:
    """Intersect sorted separator border polylines into cell quads.

    Implicit zero-thickness border separators are synthesized at crop
    edges that have no separator within BORDER_SNAP_DISTANCE px. Cell
    (i, j) is bounded by row i's lower border, row i+1's upper border,
    column j's right border and column j+1's left border.
    """
    h, w = crop_size
    rows = sorted(row_lines, key=_sort_key)
    cols = sorted(col_lines, key=_sort_key)

    def ensure_borders(lines, orientation, length, crop_len):
        ts = np.arange(0.0, length, POLYLINE_STEP)
        if not lines or min(float(l.region_bounds(ts)[0].min()) for l in lines) > BORDER_SNAP_DISTANCE:
            lines.insert(0, _border_separator(orientation, 0.0, length))
        if len(lines) < 2 or max(float(l.region_bounds(ts)[1].max()) for l in lines) < crop_len - 1 - BORDER_SNAP_DISTANCE:
            lines.append(_border_separator(orientation, crop_len - 1.0, length))
        return lines

    rows = ensure_borders(rows, "row", float(w), float(h))
    cols = ensure_borders(cols, "col", float(h), float(w))

    m, n = len(rows) - 1, len(cols) - 1
    if m < 1 or n < 1:
        raise AssemblyError(f"not enough separators for a grid ({m + 1} rows, {n + 1} cols)")

    span_x = (-8.0, w + 7.0)
    span_y = (-8.0, h + 7.0)
    row_polys = {
        (i, side): _line_polyline(rows[i], span_x[0], span_x[1], side)
        for i in range(len(rows))
        for side in (-1, 0, 1)
    }
    col_polys = {
        (j, side): _line_polyline(cols[j], span_y[0], span_y[1], side)
        for j in range(len(cols))
        for side in (-1, 0, 1)
    }

    points = np.zeros((m + 1, n + 1, 2))
    for i in range(m + 1):
        for j in range(n + 1):
            points[i, j] = _intersect_polylines(row_polys[(i, 0)], col_polys[(j, 0)])

    cells: list[list[QuadBox]] = []
    for i in range(m):
        row_cells = []
        top = row_polys[(i, 1)]
        bottom = row_polys[(i + 1, -1)]
        for j in range(n):
            left = col_polys[(j, 1)]
            right = col_polys[(j + 1, -1)]
            tl = _intersect_polylines(top, left)
            tr = _intersect_polylines(top, right)
            br = _intersect_polylines(bottom, right)
            bl = _intersect_polylines(bottom, left)
            row_cells.append(QuadBox((tl, tr, br, bl)))
        cells.append(row_cells)
    return CellGrid(rows=m, cols=n, cells=cells, points=points, row_lines=rows, col_lines=cols)


# ---------------------------------------------------------------------------
# orchestration


def assemble_grid(
    row_mask: np.ndarray,
    col_mask: np.ndarray,
    crop_size: tuple[int, int],
    binarize_threshold: float = 0.8,
    min_component: int = 4,
) -> CellGrid:
    """Masks -> CellGrid. Row mask is (H, ceil(W/8)); column mask is
    (ceil(H/8), W); crop_size is (H, W) in pixels."""
    lines = {"row": [], "col": []}
    comps = {"row": [], "col": []}
    for orientation, mask in (("row", row_mask), ("col", col_mask)):
        for comp in extract_components(binarize(mask, binarize_threshold), min_component):
            try:
                line = fit_center_line(
                    comp,
                    orientation,
                    axis_scale=REDUCED_AXIS_SCALE,
                    axis_offset=REDUCED_AXIS_OFFSET,
                )
            except AssemblyError as exc:
                logger.warning("dropping %s component: %s", orientation, exc)
                continue
            comps[orientation].append(comp)
            lines[orientation].append(line)
    merged_rows = _merge_overlapping(
        comps["row"], lines["row"], "row", REDUCED_AXIS_SCALE, REDUCED_AXIS_OFFSET
    )
    merged_cols = _merge_overlapping(
        comps["col"], lines["col"], "col", REDUCED_AXIS_SCALE, REDUCED_AXIS_OFFSET
    )
    return intersect_grid(merged_rows, merged_cols, crop_size)
