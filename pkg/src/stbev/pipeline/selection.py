"""Masked multi-stage query selection.

Each stage picks the ``k`` best unmasked cells of a score grid, zeroes them
in the stage mask, and then widens the zeros around each pick so the next
stage explores elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SelectionError(ValueError):
    pass


@dataclass
class StageMask:
    """Binary ``rows x cols`` grid; 1 marks a cell still available for selection."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or not np.isin(v, (0, 1)).all():
            raise ValueError("stage mask must be a 2D grid of zeros and ones")
        self.values = v.astype(np.uint8)

    @classmethod
    def ones(cls, rows: int, cols: int) -> StageMask:
        return cls(np.ones((rows, cols), np.uint8))

    @property
    def remaining(self) -> int:
        return int(self.values.sum())

    def zeros(self) -> set[tuple[int, int]]:
        return {tuple(rc) for rc in np.argwhere(self.values == 0).tolist()}


@dataclass
class Query:
    cell: tuple[int, int]
    stage: int
    score: float
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cls: int = 0

    def __post_init__(self):
        self.cell = (int(self.cell[0]), int(self.cell[1]))
        if min(self.cell) < 0:
            raise ValueError(f"query cell {self.cell} is outside the grid")
        if not np.isfinite(self.score):
            raise ValueError("query score must be finite")


@dataclass(frozen=True)
class StageConfig:
    num_stages: int = 3
    k_per_stage: int = 16
    pool_radius: int = 1

    def __post_init__(self):
        if self.num_stages < 1 or self.k_per_stage < 1 or self.pool_radius < 0:
            raise ValueError("stage config needs num_stages, k_per_stage >= 1 and pool_radius >= 0")

    def check_grid(self, rows: int, cols: int) -> None:
        if self.num_stages * self.k_per_stage > rows * cols:
            raise SelectionError(f"{self.num_stages} x {self.k_per_stage} queries do not fit a {rows}x{cols} grid")

    @property
    def total_queries(self) -> int:
        return self.num_stages * self.k_per_stage


def topk_select(scores: np.ndarray, mask: StageMask, k: int, stage: int = 0,
                features: np.ndarray | None = None) -> tuple[list[Query], StageMask]:
    """Pick the ``k`` highest-scoring available cells.

    ``scores`` is ``(rows, cols)`` or per class ``(K, rows, cols)``; per-class
    grids are max-reduced and the winning class is kept on the query.  Ties go
    to the lower row-major index.  ``features`` (``(C, rows, cols)``), when
    given, is copied onto each query.
    """
    s = np.asarray(scores, dtype=np.float64)
    cls_map = None
    if s.ndim == 3:
        cls_map = s.argmax(axis=0)
        s = s.max(axis=0)
    if s.shape != mask.values.shape:
        raise SelectionError(f"score grid {s.shape} does not match mask {mask.values.shape}")
    if k < 0 or k > mask.remaining:
        raise SelectionError(f"cannot select {k} cells with {mask.remaining} remaining")
    flat = s.ravel()
    avail = np.flatnonzero(mask.values.ravel())
    # lexsort keys run last-to-first: primary -score, secondary index
    order = avail[np.lexsort((avail, -flat[avail]))][:k]
    cols = s.shape[1]
    out = mask.values.copy()
    queries = []
    for f in order:
        r, c = divmod(int(f), cols)
        out[r, c] = 0
        feat = np.array(features[:, r, c], dtype=np.float64) if features is not None else np.zeros(0)
        queries.append(Query((r, c), stage, float(flat[f]), feat,
                             int(cls_map[r, c]) if cls_map is not None else 0))
    return queries, StageMask(out)


def box_pool_mask(mask: StageMask, selected: list[Query], radius: int) -> StageMask:
    """Zero the ``(2r+1)^2`` neighborhood of each selected cell, clipped at the border."""
    if radius < 0:
        raise ValueError("pool radius must be non-negative")
    out = mask.values.copy()
    R, C = out.shape
    for q in selected:
        r, c = q.cell
        out[max(r - radius, 0):min(r + radius + 1, R), max(c - radius, 0):min(c + radius + 1, C)] = 0
    return StageMask(out)
