"""Hierarchical meshes of intervals (1D) and axis-aligned quadrilaterals (2D).

Cells live on a dyadic lattice: a cell at refinement level ``l`` with integer
coordinates ``ijk`` covers ``[ijk * h_l, (ijk + 1) * h_l]`` per axis, where
``h_l`` halves with each level.  All geometric queries (neighbors, containment,
hanging faces) are exact integer arithmetic on this lattice.

Meshes are immutable values: refinement and order changes return new
``MeshTopology`` instances that share the underlying refinement tree, so the
grids of a multigrid hierarchy can relate cells by id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Cell",
    "MeshTopology",
    "MeshHierarchy",
    "refine_cells",
    "build_hierarchy",
    "greedy_select",
    "face_neighbors",
]


def child_offsets(dim: int) -> tuple[tuple[int, ...], ...]:
    """Lexicographic child offsets (x fastest): 2 in 1D, 4 in 2D."""
    if dim == 1:
        return ((0,), (1,))
    return ((0, 0), (1, 0), (0, 1), (1, 1))


def cell_faces(dim: int) -> tuple[tuple[int, int], ...]:
    """Faces of a cell as (normal_axis, side); side 0 = low, 1 = high."""
    return tuple((axis, side) for axis in range(dim) for side in (0, 1))


@dataclass(frozen=True)
class Cell:
    cid: int
    level: int
    ijk: tuple[int, ...]
    parent: int | None = None
    children: tuple[int, ...] | None = None


class MeshTopology:
    """Forest of dyadically refined axis-aligned cells over a box domain."""

    def __init__(self, dim, origin, extent, root_shape, cells, active, orders):
        self.dim = dim
        self.origin = tuple(float(v) for v in origin)
        self.extent = tuple(float(v) for v in extent)
        self.root_shape = tuple(int(n) for n in root_shape)
        self.cells = tuple(cells)
        self.active = frozenset(active)
        self.orders = dict(orders)
        self._index = {(c.level, c.ijk): c.cid for c in self.cells}
        self._active_sorted = tuple(sorted(self.active))
        self._max_level = max((self.cells[c].level for c in self.active), default=0)

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------
    @classmethod
    def uniform(cls, dim, lo, hi, shape, k):
        """Root mesh: a ``shape`` grid of cells over the box [lo, hi]."""
        if isinstance(shape, int):
            shape = (shape,) * dim
        lo = tuple(float(v) for v in np.atleast_1d(lo))
        hi = tuple(float(v) for v in np.atleast_1d(hi))
        if len(lo) != dim or len(shape) != dim:
            raise ValueError("dimension mismatch in mesh construction")
        cells = []
        if dim == 1:
            for ix in range(shape[0]):
                cells.append(Cell(ix, 0, (ix,)))
        else:
            for iy in range(shape[1]):
                for ix in range(shape[0]):
                    cells.append(Cell(len(cells), 0, (ix, iy)))
        extent = tuple(h - l for l, h in zip(lo, hi))
        active = range(len(cells))
        orders = {c: int(k) for c in active}
        return cls(dim, lo, extent, shape, cells, active, orders)

    def with_active(self, active: Iterable[int], orders) -> "MeshTopology":
        """View over the same tree with a different active set / orders."""
        active = frozenset(active)
        if isinstance(orders, int):
            orders = {c: orders for c in active}
        return MeshTopology(self.dim, self.origin, self.extent,
                            self.root_shape, self.cells, active, orders)

    def with_uniform_order(self, k: int) -> "MeshTopology":
        return self.with_active(self.active, int(k))

    def with_orders(self, orders: dict) -> "MeshTopology":
        return self.with_active(self.active, dict(orders))

    def root_mesh(self, k: int) -> "MeshTopology":
        roots = [c.cid for c in self.cells if c.level == 0]
        return self.with_active(roots, int(k))

    # ------------------------------------------------------------------
    # basic queries
    # ------------------------------------------------------------------
    @property
    def active_ids(self) -> tuple[int, ...]:
        return self._active_sorted

    @property
    def root_ids(self) -> tuple[int, ...]:
        return tuple(c.cid for c in self.cells if c.level == 0)

    @property
    def max_level(self) -> int:
        return self._max_level

    def is_active(self, cid: int) -> bool:
        return cid in self.active

    def cell(self, cid: int) -> Cell:
        return self.cells[cid]

    def order(self, cid: int) -> int:
        return self.orders[cid]

    def min_order(self) -> int:
        return min(self.orders[c] for c in self.active)

    def cell_size(self, cid: int) -> np.ndarray:
        c = self.cells[cid]
        return np.array([self.extent[d] / (self.root_shape[d] << c.level)
                         for d in range(self.dim)])

    def cell_lo(self, cid: int) -> np.ndarray:
        c = self.cells[cid]
        h = self.cell_size(cid)
        return np.array(self.origin) + h * np.array(c.ijk)

    def cell_box(self, cid: int) -> tuple[np.ndarray, np.ndarray]:
        lo = self.cell_lo(cid)
        return lo, lo + self.cell_size(cid)

    def cell_center(self, cid: int) -> np.ndarray:
        lo, hi = self.cell_box(cid)
        return 0.5 * (lo + hi)

    def h_range(self) -> tuple[float, float]:
        """(h_max, h_min) over active cells, measured along axis 0."""
        sizes = [self.cell_size(c)[0] for c in self.active]
        return max(sizes), min(sizes)

    def domain_measure(self) -> float:
        return float(np.prod(self.extent))

    def to_ref(self, cid: int, pts: np.ndarray) -> np.ndarray:
        """Physical points (n, dim) -> reference coordinates in [-1, 1]^dim."""
        lo, hi = self.cell_box(cid)
        return 2.0 * (np.atleast_2d(pts) - lo) / (hi - lo) - 1.0

    def from_ref(self, cid: int, ref: np.ndarray) -> np.ndarray:
        lo, hi = self.cell_box(cid)
        return lo + (np.atleast_2d(ref) + 1.0) * 0.5 * (hi - lo)

    # ------------------------------------------------------------------
    # neighbor queries
    # ------------------------------------------------------------------
    def _lattice_width(self, axis: int, level: int) -> int:
        return self.root_shape[axis] << level

    def across_face(self, cid: int, axis: int, side: int) -> list[int]:
        """Active cells sharing the (axis, side) face of ``cid``; [] = boundary."""
        c = self.cells[cid]
        step = 1 if side == 1 else -1
        j = c.ijk[axis] + step
        if j < 0 or j >= self._lattice_width(axis, c.level):
            return []
        ijk = list(c.ijk)
        ijk[axis] = j
        key = (c.level, tuple(ijk))
        nid = self._index.get(key)
        if nid is not None:
            if nid in self.active:
                return [nid]
            return self._active_descendants_on_face(nid, axis, 1 - side)
        # coarser neighbor: walk up until the ancestor cell exists
        level, ijk = c.level, ijk
        while level > 0:
            level -= 1
            ijk = [v >> 1 for v in ijk]
            nid = self._index.get((level, tuple(ijk)))
            if nid is not None:
                if nid not in self.active:
                    raise RuntimeError(f"non-active coarse neighbor of cell {cid}")
                return [nid]
        raise RuntimeError(f"no neighbor found across face of cell {cid}")

    def _active_descendants_on_face(self, cid, axis, side):
        """Active descendants of ``cid`` touching its (axis, side) face."""
        out = []
        stack = [cid]
        while stack:
            cur = stack.pop()
            if cur in self.active:
                out.append(cur)
                continue
            cell = self.cells[cur]
            if cell.children is None:
                raise RuntimeError(f"cell {cur} neither active nor refined")
            for off, ch in zip(child_offsets(self.dim), cell.children):
                if off[axis] == side:
                    stack.append(ch)
        return sorted(out)

    def face_neighbors(self, cid: int) -> list[int]:
        """All active cells sharing a face with active cell ``cid``.

        On a hanging face the neighbors of the coarse cell are the fine
        cells whose faces subdivide it, and vice versa.
        """
        if cid not in self.active:
            raise ValueError(f"cell {cid} is not active")
        out = set()
        for axis, side in cell_faces(self.dim):
            out.update(self.across_face(cid, axis, side))
        return sorted(out)

    def locate(self, point) -> int:
        """Active cell containing ``point`` (ties resolved toward lower cells)."""
        point = np.atleast_1d(np.asarray(point, dtype=float))
        origin = np.array(self.origin)
        h0 = np.array(self.extent) / np.array(self.root_shape)
        ijk = np.minimum(((point - origin) / h0).astype(int), np.array(self.root_shape) - 1)
        ijk = np.maximum(ijk, 0)
        cid = self._index[(0, tuple(int(v) for v in ijk))]
        while cid not in self.active:
            cell = self.cells[cid]
            mid = self.cell_center(cid)
            off = tuple(int(point[d] >= mid[d]) for d in range(self.dim))
            cid = cell.children[child_offsets(self.dim).index(off)]
        return cid

    def active_descendants(self, cid: int) -> list[int]:
        """Active cells equal to or descended from ``cid``."""
        out = []
        stack = [cid]
        while stack:
            cur = stack.pop()
            if cur in self.active:
                out.append(cur)
            else:
                ch = self.cells[cur].children
                if ch:
                    stack.extend(ch)
        return sorted(out)

    # ------------------------------------------------------------------
    # refinement
    # ------------------------------------------------------------------
    def refine_cells(self, ids: Iterable[int]) -> "MeshTopology":
        """Isotropically refine the listed active cells.

        Additional cells are refined as needed to keep the mesh 1-irregular
        (no face may span more than one level of refinement).
        """
        ids = sorted(set(ids))
        for cid in ids:
            if cid < 0 or cid >= len(self.cells):
                raise ValueError(f"unknown cell id {cid}")
            if cid not in self.active:
                raise ValueError(f"cell {cid} is not active")
        state = _RefineState(self)
        for cid in ids:
            if cid in state.active:
                state.refine(cid)
        return MeshTopology(self.dim, self.origin, self.extent, self.root_shape,
                            state.cells, state.active, state.orders)

    def refine_uniform(self, times: int = 1) -> "MeshTopology":
        mesh = self
        for _ in range(times):
            mesh = mesh.refine_cells(mesh.active_ids)
        return mesh

    # ------------------------------------------------------------------
    # serialization / validation
    # ------------------------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "dim": self.dim,
            "origin": list(self.origin),
            "extent": list(self.extent),
            "root_shape": list(self.root_shape),
            "cells": [
                {"id": c.cid, "level": c.level, "ijk": list(c.ijk),
                 "parent": c.parent,
                 "children": list(c.children) if c.children else None}
                for c in self.cells
            ],
            "active": sorted(self.active),
            "orders": {str(c): self.orders[c] for c in sorted(self.active)},
        }
        return json.dumps(doc, sort_keys=True)

    def validate(self) -> None:
        measure = sum(float(np.prod(self.cell_size(c))) for c in self.active)
        if abs(measure - self.domain_measure()) > 1e-12 * self.domain_measure():
            raise AssertionError("active cells do not tile the domain")
        for cid in self.active:
            lvl = self.cells[cid].level
            for axis, side in cell_faces(self.dim):
                for n in self.across_face(cid, axis, side):
                    if abs(self.cells[n].level - lvl) > 1:
                        raise AssertionError(
                            f"face between {cid} and {n} spans two levels")

    def same_grid(self, other: "MeshTopology") -> bool:
        return self.active == other.active

    def __eq__(self, other):
        return (isinstance(other, MeshTopology)
                and self.active == other.active and self.orders == other.orders
                and self.root_shape == other.root_shape)

    def __hash__(self):
        return hash((self.root_shape, self.active))


class _RefineState:
    """Mutable scratch used while producing a refined mesh value."""

    def __init__(self, mesh: MeshTopology):
        self.dim = mesh.dim
        self.root_shape = mesh.root_shape
        self.cells = list(mesh.cells)
        self.active = set(mesh.active)
        self.orders = dict(mesh.orders)
        self.index = dict(mesh._index)

    def refine(self, cid: int) -> None:
        cell = self.cells[cid]
        # closure: a coarser face neighbor would end up two levels away
        for axis, side in cell_faces(self.dim):
            nbr = self._coarser_neighbor(cell, axis, side)
            if nbr is not None:
                self.refine(nbr)
        kids = []
        k = self.orders[cid]
        for off in child_offsets(self.dim):
            nid = len(self.cells)
            ijk = tuple(2 * cell.ijk[d] + off[d] for d in range(self.dim))
            child = Cell(nid, cell.level + 1, ijk, parent=cid)
            self.cells.append(child)
            self.index[(child.level, child.ijk)] = nid
            self.active.add(nid)
            self.orders[nid] = k
            kids.append(nid)
        self.cells[cid] = Cell(cid, cell.level, cell.ijk, cell.parent, tuple(kids))
        self.active.discard(cid)
        self.orders.pop(cid, None)

    def _coarser_neighbor(self, cell: Cell, axis: int, side: int) -> int | None:
        step = 1 if side == 1 else -1
        j = cell.ijk[axis] + step
        if j < 0 or j >= (self.root_shape[axis] << cell.level):
            return None
        ijk = list(cell.ijk)
        ijk[axis] = j
        level = cell.level
        while level > 0:
            if (level, tuple(ijk)) in self.index:
                nid = self.index[(level, tuple(ijk))]
                return nid if (nid in self.active and level < cell.level) else None
            level -= 1
            ijk = [v >> 1 for v in ijk]
        nid = self.index.get((0, tuple(ijk)))
        if nid is not None and nid in self.active and cell.level > 0:
            return nid
        return None


@dataclass
class MeshHierarchy:
    """Coarse-to-fine stack of meshes; kinds[i] labels the levels[i]->[i+1]
    transition as an h-refinement pass ('h') or a polynomial-order change ('p')."""

    levels: list[MeshTopology]
    kinds: list[str]

    def __len__(self):
        return len(self.levels)

    @property
    def fine(self) -> MeshTopology:
        return self.levels[-1]


def refine_cells(mesh: MeshTopology, ids: Iterable[int]) -> MeshTopology:
    return mesh.refine_cells(ids)


def face_neighbors(mesh: MeshTopology, cid: int) -> list[int]:
    return mesh.face_neighbors(cid)


def build_hierarchy(fine: MeshTopology, k_coarse: int,
                    skip_intermediate_p: bool) -> MeshHierarchy:
    """Build the multigrid mesh stack for a given fine mesh.

    The coarsest mesh is the root geometry at order ``k_coarse``.  Single
    h-refinement passes are applied to every cell still coarser than the
    fine mesh; afterwards either the fine mesh is appended directly
    (``skip_intermediate_p``) or orders are repeatedly doubled (capped at
    the fine order) until they match.
    """
    if k_coarse > fine.min_order():
        raise ValueError("k_coarse exceeds the order of a fine-mesh cell")
    levels = [fine.root_mesh(k_coarse)]
    kinds: list[str] = []
    while True:
        cur = levels[-1]
        stale = [c for c in cur.active if not fine.is_active(c)]
        if not stale:
            break
        active = set(cur.active)
        orders = dict(cur.orders)
        for cid in stale:
            active.discard(cid)
            k = orders.pop(cid)
            for ch in fine.cell(cid).children:
                active.add(ch)
                orders[ch] = k
        levels.append(fine.with_active(active, orders))
        kinds.append("h")
    if skip_intermediate_p:
        if levels[-1].orders != fine.orders:
            levels.append(fine)
            kinds.append("p")
    else:
        while levels[-1].orders != fine.orders:
            cur = levels[-1]
            orders = {c: min(2 * max(cur.order(c), 1), fine.order(c))
                      for c in cur.active}
            levels.append(fine.with_active(cur.active, orders))
            kinds.append("p")
    return MeshHierarchy(levels, kinds)


def greedy_select(errors: Sequence[float], fraction: float) -> set[int]:
    """Indices with error strictly above ``fraction`` times the max error.

    The argmax is always included, so the result is nonempty.
    """
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("empty error vector")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    emax = float(errors.max())
    sel = {int(i) for i in np.nonzero(errors > fraction * emax)[0]}
    if not sel:
        sel = {int(np.argmax(errors))}
    return sel
