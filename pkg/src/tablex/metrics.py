"""Evaluation metrics: IoU-thresholded detection P/R/F1 with weighted average,
adjacency-relation precision/recall, and TEDS-Struct tree similarity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, iou
from .structure import TableStructure

DEFAULT_IOU_THRESHOLDS = (0.6, 0.7, 0.8, 0.9)


# ---------------------------------------------------------------------------
# detection metrics


def detection_prf(
    preds: Sequence[tuple[Box, float]],
    gts: Sequence[Box],
    iou_threshold: float,
) -> tuple[float, float, float]:
    """Greedy one-to-one matching by descending score.

    A prediction matches the highest-IoU unmatched ground truth when that
    IoU >= threshold. Empty prediction lists score 0 (1 when the ground
    truth is empty too).
    """
    if len(preds) == 0 and len(gts) == 0:
        return 1.0, 1.0, 1.0
    if len(preds) == 0 or len(gts) == 0:
        return 0.0, 0.0, 0.0
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))
    matched_gt: set[int] = set()
    matches = 0
    for i in order:
        box = preds[i][0]
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if j in matched_gt:
                continue
            v = iou(box, gt)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_threshold:
            matched_gt.add(best_j)
            matches += 1
    p = matches / len(preds)
    r = matches / len(gts)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def wavg_f1(f1_per_threshold: dict[float, float]) -> float:
    """F1 scores averaged with weights equal to their IoU thresholds."""
    num = sum(t * f for t, f in f1_per_threshold.items())
    den = sum(f1_per_threshold.keys())
    return num / den


# ---------------------------------------------------------------------------
# adjacency-relation metric


@dataclass(frozen=True)
class AdjacencyRelation:
    source: int
    target: int
    direction: str  # "horizontal" | "vertical"


def adjacency_relations(
    structure: TableStructure, non_empty: Sequence[bool]
) -> set[AdjacencyRelation]:
    """Immediate-neighbor relations between non-empty cells.

    For each non-empty cell, the nearest non-empty cell to the right and
    below along each grid row/column of its span, skipping empty cells.
    """
    owner = structure.owner_grid()
    rels: set[AdjacencyRelation] = set()
    for idx, cell in enumerate(structure.cells):
        if not non_empty[idx]:
            continue
        for r in range(cell.start_row, cell.end_row + 1):
            for c in range(cell.end_col + 1, structure.cols):
                j = owner[r][c]
                if non_empty[j]:
                    rels.add(AdjacencyRelation(idx, j, "horizontal"))
                    break
        for c in range(cell.start_col, cell.end_col + 1):
            for r in range(cell.end_row + 1, structure.rows):
                j = owner[r][c]
                if non_empty[j]:
                    rels.add(AdjacencyRelation(idx, j, "vertical"))
                    break
    return rels


def _content_key(ids: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted(ids))


def relation_keys(
    structure: TableStructure, contents: Sequence[Sequence[int]]
) -> set[tuple]:
    """Adjacency relations as content-keyed tuples for cross-structure
    comparison; cells with no content are empty and excluded."""
    non_empty = [len(c) > 0 for c in contents]
    rels = adjacency_relations(structure, non_empty)
    return {
        (_content_key(contents[r.source]), _content_key(contents[r.target]), r.direction)
        for r in rels
    }


def adjacency_prf(
    pred: TableStructure,
    pred_contents: Sequence[Sequence[int]],
    gt: TableStructure,
    gt_contents: Sequence[Sequence[int]],
) -> tuple[float, float, float]:
    """Relation-level P/R/F1 with cells identified by their content ids.

    A cell with no assigned content is empty and takes part in no relation.
    """
    pred_keys = relation_keys(pred, pred_contents)
    gt_keys = relation_keys(gt, gt_contents)
    if not pred_keys and not gt_keys:
        return 1.0, 1.0, 1.0
    if not pred_keys or not gt_keys:
        return 0.0, 0.0, 0.0
    hits = len(pred_keys & gt_keys)
    p = hits / len(pred_keys)
    r = hits / len(gt_keys)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


# ---------------------------------------------------------------------------
# TEDS-Struct


@dataclass
class StructTree:
    """Rooted ordered tree over table/row/cell nodes; cells carry spans."""

    label: str
    rowspan: int = 1
    colspan: int = 1
    children: list["StructTree"] = field(default_factory=list)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)


def structure_tree(structure: TableStructure) -> StructTree:
    """table -> row -> cell tree; a spanning cell attaches to its start row."""
    root = StructTree("table")
    by_row: dict[int, list] = {r: [] for r in range(structure.rows)}
    for cell in structure.cells:
        by_row[cell.start_row].append(cell)
    for r in range(structure.rows):
        row_node = StructTree("row")
        for cell in sorted(by_row[r], key=lambda c: c.start_col):
            row_node.children.append(
                StructTree("cell", rowspan=cell.rowspan, colspan=cell.colspan)
            )
        root.children.append(row_node)
    return root


def _node_substitution_cost(a: StructTree, b: StructTree) -> int:
    if a.label != b.label:
        return 1
    if a.label == "cell" and (a.rowspan, a.colspan) != (b.rowspan, b.colspan):
        return 1
    return 0


def tree_edit_distance(a: StructTree, b: StructTree) -> int:
    """Ordered tree edit distance (Zhang-Shasha); unit insert/delete cost."""

    def postorder(root):
        nodes, stack = [], [(root, False)]
        while stack:
            node, seen = stack.pop()
            if seen:
                nodes.append(node)
            else:
                stack.append((node, True))
                for child in reversed(node.children):
                    stack.append((child, False))
        return nodes

    def leftmost_leaves(nodes):
        index = {id(n): i for i, n in enumerate(nodes)}
        lml = []
        for n in nodes:
            m = n
            while m.children:
                m = m.children[0]
            lml.append(index[id(m)])
        return lml

    def keyroots(lml):
        seen = set()
        roots = []
        for i in range(len(lml) - 1, -1, -1):
            if lml[i] not in seen:
                roots.append(i)
                seen.add(lml[i])
        return sorted(roots)

    na, nb = postorder(a), postorder(b)
    la, lb = leftmost_leaves(na), leftmost_leaves(nb)
    ka, kb = keyroots(la), keyroots(lb)
    td = np.zeros((len(na), len(nb)), dtype=np.int64)

    for i in ka:
        for j in kb:
            # forest distance over subforests na[la[i]..i], nb[lb[j]..j]
            m, n = i - la[i] + 2, j - lb[j] + 2
            fd = np.zeros((m, n), dtype=np.int64)
            fd[:, 0] = np.arange(m)
            fd[0, :] = np.arange(n)
            for x in range(1, m):
                ni = la[i] + x - 1
                for y in range(1, n):
                    nj = lb[j] + y - 1
                    if la[ni] == la[i] and lb[nj] == lb[j]:
                        cost = _node_substitution_cost(na[ni], nb[nj])
                        fd[x, y] = min(
                            fd[x - 1, y] + 1,
                            fd[x, y - 1] + 1,
                            fd[x - 1, y - 1] + cost,
                        )
                        td[ni, nj] = fd[x, y]
                    else:
                        px = la[ni] - la[i]
                        py = lb[nj] - lb[j]
                        fd[x, y] = min(
                            fd[x - 1, y] + 1,
                            fd[x, y - 1] + 1,
                            fd[px, py] + td[ni, nj],
                        )
    return int(td[-1, -1])


def teds_struct(pred: StructTree, gt: StructTree) -> float:
    """1 - edit_distance / max(tree sizes); 1.0 for identical trees.

    Clamped at 0: degenerate tree pairs can have an edit distance larger
    than the bigger tree (delete everything, insert everything).
    """
    dist = tree_edit_distance(pred, gt)
    return max(0.0, 1.0 - dist / max(pred.size(), gt.size()))


# ---------------------------------------------------------------------------
# corpus-level report


@dataclass
class PageEval:
    """Everything needed to score one page.

    gt_structures/gt_contents come from the annotation; pred contents are
    assigned from the same content boxes, so relation keys are comparable.
    """

    image_id: str
    pred_boxes: list[tuple[Box, float]]
    gt_boxes: list[Box]
    pred_structures: list[TableStructure]
    pred_contents: list[Sequence[Sequence[int]]]
    gt_structures: list[TableStructure]
    gt_contents: list[Sequence[Sequence[int]]]


def _greedy_table_matches(page: PageEval, min_iou: float = 0.5) -> list[tuple[int, int]]:
    order = sorted(
        range(len(page.pred_boxes)), key=lambda i: (-page.pred_boxes[i][1], i)
    )
    taken: set[int] = set()
    matches = []
    for i in order:
        box = page.pred_boxes[i][0]
        best, best_iou = -1, min_iou
        for j, gt in enumerate(page.gt_boxes):
            if j in taken:
                continue
            v = iou(box, gt)
            if v >= best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken.add(best)
            matches.append((i, best))
    return matches


def evaluate_pages(
    pages: Sequence[PageEval], thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS
) -> dict:
    """Corpus report: per-threshold detection P/R/F1 (micro-averaged),
    WAvg F1, mean per-image adjacency F1, mean TEDS-Struct, and a
    per-image breakdown."""
    detection = {}
    for thr in thresholds:
        matches = preds = gts = 0
        for page in pages:
            p, r, _ = detection_prf(page.pred_boxes, page.gt_boxes, thr)
            matches += round(p * len(page.pred_boxes))
            preds += len(page.pred_boxes)
            gts += len(page.gt_boxes)
        p = matches / preds if preds else (1.0 if gts == 0 else 0.0)
        r = matches / gts if gts else (1.0 if preds == 0 else 0.0)
        f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        detection[thr] = {"precision": p, "recall": r, "f1": f1}

    per_image = []
    adjacency_f1s = []
    teds_scores = []
    for page in pages:
        pred_keys: set = set()
        for s, c in zip(page.pred_structures, page.pred_contents):
            pred_keys |= relation_keys(s, c)
        gt_keys: set = set()
        for s, c in zip(page.gt_structures, page.gt_contents):
            gt_keys |= relation_keys(s, c)
        if not pred_keys and not gt_keys:
            adj = (1.0, 1.0, 1.0)
        elif not pred_keys or not gt_keys:
            adj = (0.0, 0.0, 0.0)
        else:
            hits = len(pred_keys & gt_keys)
            p = hits / len(pred_keys)
            r = hits / len(gt_keys)
            adj = (p, r, 0.0 if p + r == 0 else 2 * p * r / (p + r))
        adjacency_f1s.append(adj[2])

        matches = dict((j, i) for i, j in _greedy_table_matches(page))
        if page.gt_structures:
            scores = []
            for j, gt_structure in enumerate(page.gt_structures):
                if j in matches:
                    pred_structure = page.pred_structures[matches[j]]
                    scores.append(
                        teds_struct(structure_tree(pred_structure), structure_tree(gt_structure))
                    )
                else:
                    scores.append(0.0)
            page_teds = float(np.mean(scores))
        else:
            page_teds = 1.0 if not page.pred_structures else 0.0
        teds_scores.append(page_teds)
        per_image.append(
            {
                "image": page.image_id,
                "adjacency_f1": adj[2],
                "adjacency_precision": adj[0],
                "adjacency_recall": adj[1],
                "teds_struct": page_teds,
                "n_pred_tables": len(page.pred_structures),
                "n_gt_tables": len(page.gt_structures),
            }
        )

    return {
        "detection": {f"{t:.1f}": detection[t] for t in thresholds},
        "wavg_f1": wavg_f1({t: detection[t]["f1"] for t in thresholds}),
        "mean_adjacency_f1": float(np.mean(adjacency_f1s)) if adjacency_f1s else 1.0,
        "mean_teds_struct": float(np.mean(teds_scores)) if teds_scores else 1.0,
        "per_image": per_image,
    }
