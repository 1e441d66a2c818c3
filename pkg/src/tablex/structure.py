"""Final table structure representation: cells with grid spans and geometry."""

from __future__ import annotations

from dataclasses import dataclass, field

from .geometry import Box, QuadBox


@dataclass(frozen=True)
class CellSpan:
    """One table cell: inclusive grid span plus its quad in pixels."""

    start_row: int
    end_row: int
    start_col: int
    end_col: int
    quad: QuadBox

    def __post_init__(self):
        if self.end_row < self.start_row or self.end_col < self.start_col:
            raise ValueError("cell span end must be >= start")

    @property
    def rowspan(self) -> int:
        return self.end_row - self.start_row + 1

    @property
    def colspan(self) -> int:
        return self.end_col - self.start_col + 1

    def hull(self) -> Box:
        return self.quad.hull()


@dataclass
class TableStructure:
    """Cells of one table; spans must exactly partition the rows x cols grid."""

    rows: int
    cols: int
    cells: list[CellSpan] = field(default_factory=list)

    def validate(self) -> None:
        owner = [[-1] * self.cols for _ in range(self.rows)]
        for idx, cell in enumerate(self.cells):
            if not (0 <= cell.start_row and cell.end_row < self.rows):
                raise ValueError(f"cell {idx} row span outside grid")
            if not (0 <= cell.start_col and cell.end_col < self.cols):
                raise ValueError(f"cell {idx} col span outside grid")
            for r in range(cell.start_row, cell.end_row + 1):
                for c in range(cell.start_col, cell.end_col + 1):
                    if owner[r][c] != -1:
                        raise ValueError(f"grid element ({r},{c}) covered twice")
                    owner[r][c] = idx
        for r in range(self.rows):
            for c in range(self.cols):
                if owner[r][c] == -1:
                    raise ValueError(f"grid element ({r},{c}) not covered")

    def owner_grid(self) -> list[list[int]]:
        """rows x cols matrix mapping each grid element to its cell index."""
        owner = [[-1] * self.cols for _ in range(self.rows)]
        for idx, cell in enumerate(self.cells):
            for r in range(cell.start_row, cell.end_row + 1):
                for c in range(cell.start_col, cell.end_col + 1):
                    owner[r][c] = idx
        return owner

    def sorted_cells(self) -> list[CellSpan]:
        return sorted(self.cells, key=lambda c: (c.start_row, c.start_col))
