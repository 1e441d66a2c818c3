import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from tablex.geometry import Box, QuadBox, iou
from tablex.metrics import (
    AdjacencyRelation,
    adjacency_prf,
    adjacency_relations,
    detection_prf,
    structure_tree,
    StructTree,
    teds_struct,
    tree_edit_distance,
    wavg_f1,
)
from tablex.structure import CellSpan, TableStructure


def unit_grid(rows, cols, cell_size=10.0):
    cells = []
    for r in range(rows):
        for c in range(cols):
            box = Box(c * cell_size, r * cell_size, cell_size, cell_size)
            cells.append(CellSpan(r, r, c, c, QuadBox.from_box(box)))
    return TableStructure(rows=rows, cols=cols, cells=cells)


# ---------------------------------------------------------------------------
# detection P/R/F1


class TestDetectionPRF:
    def test_perfect(self):
        gts = [Box(0, 0, 10, 10), Box(50, 50, 20, 20)]
        preds = [(b, 0.9) for b in gts]
        assert detection_prf(preds, gts, 0.9) == (1.0, 1.0, 1.0)

    def test_no_preds(self):
        assert detection_prf([], [Box(0, 0, 10, 10)], 0.6) == (0.0, 0.0, 0.0)

    def test_empty_both(self):
        assert detection_prf([], [], 0.6) == (1.0, 1.0, 1.0)

    def test_matches_optimal_assignment_oracle(self):
        rng = np.random.default_rng(21)
        disagreements = 0
        for _ in range(200):
            n_gt = int(rng.integers(1, 5))
            gts = []
            x = 0.0
            for _ in range(n_gt):
                w, h = rng.uniform(20, 60, size=2)
                gts.append(Box(x, rng.uniform(0, 40), w, h))
                x += w + rng.uniform(5, 30)
            preds = []
            for gt in gts:
                if rng.uniform() < 0.85:
                    dx, dy = rng.uniform(-4, 4, size=2)
                    dw, dh = rng.uniform(0.9, 1.1, size=2)
                    preds.append(
                        (Box(gt.x + dx, gt.y + dy, gt.w * dw, gt.h * dh), float(rng.uniform(0.3, 1)))
                    )
            for _ in range(int(rng.integers(0, 2))):
                preds.append((Box(rng.uniform(0, 200), 200, 30, 30), float(rng.uniform(0, 1))))
            thr = float(rng.choice([0.6, 0.7, 0.8]))
            p, r, f1 = detection_prf(preds, gts, thr)
            greedy_matches = round(p * len(preds)) if preds else 0

            # optimal bipartite matching oracle
            if preds and gts:
                gain = np.zeros((len(preds), len(gts)))
                for i, (pb, _) in enumerate(preds):
                    for j, gb in enumerate(gts):
                        gain[i, j] = 1.0 if iou(pb, gb) >= thr else 0.0
                ri, cj = linear_sum_assignment(-gain)
                optimal = int(gain[ri, cj].sum())
            else:
                optimal = 0
            if greedy_matches != optimal:
                disagreements += 1
                print(f"greedy/optimal disagreement: {greedy_matches} vs {optimal}")
        assert disagreements == 0


class TestWAvgF1:
    def test_reference_values(self):
        # published leaderboard rows reproduce to within rounding
        f1s = {0.6: 95.9, 0.7: 95.6, 0.8: 95.0, 0.9: 91.5}
        assert wavg_f1(f1s) == pytest.approx(94.3, abs=0.05)
        f1s = {0.6: 96.1, 0.7: 96.0, 0.8: 95.4, 0.9: 92.9}
        assert wavg_f1(f1s) == pytest.approx(94.9, abs=0.05)

    @given(st.floats(0, 1))
    def test_constant_inputs(self, f):
        assert wavg_f1({t: f for t in (0.6, 0.7, 0.8, 0.9)}) == pytest.approx(f)

    @given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
    def test_bounded_by_min_max(self, f1s):
        value = wavg_f1(dict(zip((0.6, 0.7, 0.8, 0.9), f1s)))
        assert min(f1s) - 1e-9 <= value <= max(f1s) + 1e-9


# ---------------------------------------------------------------------------
# adjacency relations


def adjacency_oracle_unit(rows, cols, non_empty_grid):
    """Pairwise oracle on a unit grid: relation iff all cells between are empty."""
    rels = set()
    for r in range(rows):
        for c1 in range(cols):
            if not non_empty_grid[r][c1]:
                continue
            for c2 in range(c1 + 1, cols):
                if non_empty_grid[r][c2]:
                    if all(not non_empty_grid[r][c] for c in range(c1 + 1, c2)):
                        rels.add((r * cols + c1, r * cols + c2, "horizontal"))
                    break
    for c in range(cols):
        for r1 in range(rows):
            if not non_empty_grid[r1][c]:
                continue
            for r2 in range(r1 + 1, rows):
                if non_empty_grid[r2][c]:
                    if all(not non_empty_grid[r][c] for r in range(r1 + 1, r2)):
                        rels.add((r1 * cols + c, r2 * cols + c, "vertical"))
                    break
    return rels


class TestAdjacencyRelations:
    def test_2x2_all_non_empty(self):
        s = unit_grid(2, 2)
        rels = adjacency_relations(s, [True] * 4)
        assert len(rels) == 4
        assert AdjacencyRelation(0, 1, "horizontal") in rels
        assert AdjacencyRelation(0, 2, "vertical") in rels

    def test_skip_empty_middle(self):
        s = unit_grid(1, 3)
        rels = adjacency_relations(s, [True, False, True])
        assert rels == {AdjacencyRelation(0, 2, "horizontal")}

    def test_matches_bruteforce_scan(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            rows, cols = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            grid = rng.uniform(size=(rows, cols)) < 0.7
            s = unit_grid(rows, cols)
            got = {
                (r.source, r.target, r.direction)
                for r in adjacency_relations(s, grid.reshape(-1).tolist())
            }
            assert got == adjacency_oracle_unit(rows, cols, grid)

    def test_scale_invariant(self):
        rng = np.random.default_rng(5)
        flags = (rng.uniform(size=12) < 0.7).tolist()
        a = adjacency_relations(unit_grid(3, 4, 10.0), flags)
        b = adjacency_relations(unit_grid(3, 4, 37.0), flags)
        assert a == b

    def test_spanning_cell_relations(self):
        # 2x2 grid, left column merged into one 2x1 cell
        cells = [
            CellSpan(0, 1, 0, 0, QuadBox.from_box(Box(0, 0, 10, 20))),
            CellSpan(0, 0, 1, 1, QuadBox.from_box(Box(10, 0, 10, 10))),
            CellSpan(1, 1, 1, 1, QuadBox.from_box(Box(10, 10, 10, 10))),
        ]
        s = TableStructure(rows=2, cols=2, cells=cells)
        rels = adjacency_relations(s, [True, True, True])
        assert rels == {
            AdjacencyRelation(0, 1, "horizontal"),
            AdjacencyRelation(0, 2, "horizontal"),
            AdjacencyRelation(1, 2, "vertical"),
        }


class TestAdjacencyPRF:
    def test_identical(self):
        s = unit_grid(2, 2)
        contents = [[0], [1], [2], [3]]
        assert adjacency_prf(s, contents, s, contents) == (1.0, 1.0, 1.0)

    def test_empty_prediction(self):
        gt = unit_grid(2, 2)
        pred = unit_grid(1, 1)
        assert adjacency_prf(pred, [[]], gt, [[0], [1], [2], [3]]) == (0.0, 0.0, 0.0)

    def test_wrong_merge_counts(self):
        # GT: 2x2 all distinct; prediction merges the top row into one cell.
        gt = unit_grid(2, 2)
        gt_contents = [[0], [1], [2], [3]]
        pred_cells = [
            CellSpan(0, 0, 0, 1, QuadBox.from_box(Box(0, 0, 20, 10))),
            CellSpan(1, 1, 0, 0, QuadBox.from_box(Box(0, 10, 10, 10))),
            CellSpan(1, 1, 1, 1, QuadBox.from_box(Box(10, 10, 10, 10))),
        ]
        pred = TableStructure(rows=2, cols=2, cells=pred_cells)
        pred_contents = [[0, 1], [2], [3]]
        p, r, f1 = adjacency_prf(pred, pred_contents, gt, gt_contents)
        # prediction relations: ({0,1}->2 V), ({0,1}->3 V), (2->3 H); none match
        # gt relations: 0->1 H, 2->3 H, 0->2 V, 1->3 V; only 2->3 H shared
        assert p == pytest.approx(1 / 3)
        assert r == pytest.approx(1 / 4)


# ---------------------------------------------------------------------------
# TEDS-Struct


def ref_tree_edit_distance(t1, t2):
    """Independent memoized forest-distance recursion (rightmost roots)."""

    def sub(a, b):
        if a.label != b.label:
            return 1
        if a.label == "cell" and (a.rowspan, a.colspan) != (b.rowspan, b.colspan):
            return 1
        return 0

    def size(n):
        return 1 + sum(size(c) for c in n.children)

    memo = {}

    def dist(f1, f2):
        key = (tuple(id(n) for n in f1), tuple(id(n) for n in f2))
        if key in memo:
            return memo[key]
        if not f1 and not f2:
            res = 0
        elif not f1:
            res = sum(size(n) for n in f2)
        elif not f2:
            res = sum(size(n) for n in f1)
        else:
            v, w = f1[-1], f2[-1]
            res = min(
                dist(f1[:-1] + tuple(v.children), f2) + 1,
                dist(f1, f2[:-1] + tuple(w.children)) + 1,
                dist(f1[:-1], f2[:-1]) + dist(tuple(v.children), tuple(w.children)) + sub(v, w),
            )
        memo[key] = res
        return res

    return dist((t1,), (t2,))


def random_tree(rng, max_nodes):
    root = StructTree(
        str(rng.choice(["table", "row", "cell"])),
        rowspan=int(rng.integers(1, 4)),
        colspan=int(rng.integers(1, 4)),
    )
    nodes = [root]
    while len(nodes) < max_nodes and rng.uniform() < 0.8:
        parent = nodes[int(rng.integers(0, len(nodes)))]
        child = StructTree(
            str(rng.choice(["table", "row", "cell"])),
            rowspan=int(rng.integers(1, 4)),
            colspan=int(rng.integers(1, 4)),
        )
        parent.children.append(child)
        nodes.append(child)
    return root


class TestTedsStruct:
    def test_identical_trees(self):
        s = unit_grid(2, 3)
        t = structure_tree(s)
        assert teds_struct(t, t) == 1.0

    def test_single_cell_colspan_mismatch(self):
        a = StructTree("table", children=[StructTree("row", children=[StructTree("cell")])])
        b = StructTree(
            "table", children=[StructTree("row", children=[StructTree("cell", colspan=2)])]
        )
        assert teds_struct(a, b) == pytest.approx(1 - 1 / 3)

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            a = random_tree(rng, int(rng.integers(1, 16)))
            b = random_tree(rng, int(rng.integers(1, 16)))
            assert tree_edit_distance(a, b) == ref_tree_edit_distance(a, b)

    def test_symmetric(self):
        rng = np.random.default_rng(23)
        for _ in range(25):
            a = random_tree(rng, 10)
            b = random_tree(rng, 10)
            assert teds_struct(a, b) == pytest.approx(teds_struct(b, a))
            assert 0.0 <= teds_struct(a, b) <= 1.0

    def test_structure_tree_shape(self):
        s = unit_grid(2, 2)
        t = structure_tree(s)
        assert t.label == "table"
        assert [c.label for c in t.children] == ["row", "row"]
        assert t.size() == 1 + 2 + 4
