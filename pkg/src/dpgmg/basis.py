"""Nodal tensor-product Lagrange bases at Lobatto points.

All volume and trace spaces are built from one ingredient: the 1D Lagrange
basis on Gauss-Lobatto nodes, represented in the Legendre basis for stable
evaluation at high order.  Faces of quads are intervals; faces of intervals
are points (a single constant "basis").

``reconcile`` expresses a coarse basis in a (geometrically nested, equal or
higher order) fine basis; for nodal bases this is point evaluation of the
coarse functions at the fine nodes, mapped through the refinement branch.
The field-to-trace map used by multigrid prolongation is likewise point
evaluation of volume basis functions at face nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as _leg

__all__ = [
    "lobatto_nodes",
    "gauss_rule",
    "Lagrange1D",
    "NodalBasis",
    "RefinementBranch",
    "build_basis",
    "reconcile",
    "trace_gamma",
    "face_embedding",
]

VOLUME_KINDS = ("scalar-L2", "scalar-H1", "vector-L2")
TRACE_KINDS = ("H1-trace", "normal-trace")


@lru_cache(maxsize=None)
def lobatto_nodes(order: int) -> np.ndarray:
    """Gauss-Lobatto points of the given order on [-1, 1] (order+1 nodes)."""
    if order < 0:
        raise ValueError("order must be >= 0")
    if order == 0:
        return np.array([0.0])
    if order == 1:
        return np.array([-1.0, 1.0])
    # interior nodes are the roots of P'_order
    dcoef = _leg.legder(np.eye(order + 1)[-1])
    interior = _leg.legroots(dcoef)
    nodes = np.concatenate(([-1.0], np.sort(interior), [1.0]))
    # symmetrize against roundoff
    return 0.5 * (nodes - nodes[::-1])


@lru_cache(maxsize=None)
def gauss_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = _leg.leggauss(max(n, 1))
    return x, w


class Lagrange1D:
    """Lagrange basis on Lobatto nodes, stored as Legendre coefficients."""

    def __init__(self, order: int):
        self.order = order
        self.nodes = lobatto_nodes(order)
        vander = _leg.legvander(self.nodes, order)
        self._coef = np.linalg.inv(vander)          # column j: coeffs of phi_j
        dcoef = np.zeros_like(self._coef)
        if order > 0:
            dcoef[:order, :] = _leg.legder(self._coef, axis=0)
        self._dcoef = dcoef

    @property
    def n(self) -> int:
        return self.order + 1

    def values(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return _leg.legvander(x, self.order) @ self._coef

    def derivs(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return _leg.legvander(x, self.order) @ self._dcoef


@lru_cache(maxsize=None)
def lagrange1d(order: int) -> Lagrange1D:
    return Lagrange1D(order)


class NodalBasis:
    """Tensor-product nodal basis on the reference cell [-1, 1]^dim.

    dim 0 is the point "cell" (faces of 1D cells): a single constant function.
    Function index runs over nodes lexicographically with axis 0 fastest.
    """

    def __init__(self, dim: int, order: int):
        self.dim = dim
        self.order = order
        if dim == 0:
            self.n = 1
            self.nodes = np.zeros((1, 0))
            return
        b = lagrange1d(order)
        self.n = b.n ** dim
        if dim == 1:
            self.nodes = b.nodes[:, None]
        else:
            X, Y = np.meshgrid(b.nodes, b.nodes, indexing="xy")
            self.nodes = np.column_stack([X.ravel(order="C"), Y.ravel(order="C")])
            # ravel of meshgrid(indexing="xy") runs x fastest per y row
        self._b = b

    def values(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.dim == 0:
            return np.ones((pts.shape[0], 1))
        vx = self._b.values(pts[:, 0])
        if self.dim == 1:
            return vx
        vy = self._b.values(pts[:, 1])
        return _tensor2(vx, vy)

    def gradients(self, pts: np.ndarray) -> np.ndarray:
        """(npts, n, dim) reference-coordinate gradients."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.dim == 0:
            return np.zeros((pts.shape[0], 1, 0))
        vx = self._b.values(pts[:, 0])
        dx = self._b.derivs(pts[:, 0])
        if self.dim == 1:
            return dx[:, :, None]
        vy = self._b.values(pts[:, 1])
        dy = self._b.derivs(pts[:, 1])
        out = np.empty((pts.shape[0], self.n, 2))
        out[:, :, 0] = _tensor2(dx, vy)
        out[:, :, 1] = _tensor2(vx, dy)
        return out


def _tensor2(vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
    """Combine 1D tables into the 2D tensor table, x index fastest."""
    npts, nx = vx.shape
    ny = vy.shape[1]
    return (vy[:, :, None] * vx[:, None, :]).reshape(npts, ny * nx)


@lru_cache(maxsize=None)
def nodal_basis(dim: int, order: int) -> NodalBasis:
    return NodalBasis(dim, order)


def build_basis(order: int, shape: str, kind: str) -> NodalBasis:
    """Nodal basis for a (shape, kind) pair.

    shape: 'interval' | 'quad' | 'face-of-quad' | 'face-of-interval'
    kind:  volume kinds take the shape's dimension; trace kinds live on faces.
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    dims = {"interval": 1, "quad": 2, "face-of-quad": 1, "face-of-interval": 0}
    if shape not in dims:
        raise ValueError(f"unsupported shape {shape!r}")
    if kind in VOLUME_KINDS:
        if shape.startswith("face"):
            raise ValueError(f"volume kind {kind!r} on face shape {shape!r}")
    elif kind in TRACE_KINDS:
        if not shape.startswith("face"):
            raise ValueError(f"trace kind {kind!r} on volume shape {shape!r}")
    else:
        raise ValueError(f"unsupported kind {kind!r}")
    return nodal_basis(dims[shape], order)


@dataclass(frozen=True)
class RefinementBranch:
    """Affine map from a fine reference frame into an ancestor's frame.

    Per axis, x_coarse = scale * x_fine + shift.  Composed from dyadic
    child steps; the identity branch has scale 1 and shift 0.
    """

    scale: tuple[float, ...]
    shift: tuple[float, ...]

    @classmethod
    def identity(cls, dim: int) -> "RefinementBranch":
        return cls((1.0,) * dim, (0.0,) * dim)

    @classmethod
    def from_children(cls, dim: int, steps) -> "RefinementBranch":
        """steps: coarse-to-fine sequence of child offset tuples (0/1 per axis)."""
        br = cls.identity(dim)
        for step in steps:
            child = cls(tuple(0.5 for _ in range(dim)),
                        tuple(0.5 * (2 * c - 1) for c in step))
            br = br.compose_outer(child)
        return br

    def compose_outer(self, inner: "RefinementBranch") -> "RefinementBranch":
        """Map applying ``inner`` first, then self (self is closer to the root)."""
        scale = tuple(s * i for s, i in zip(self.scale, inner.scale))
        shift = tuple(s * ish + sh
                      for s, ish, sh in zip(self.scale, inner.shift, self.shift))
        return RefinementBranch(scale, shift)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts * np.array(self.scale) + np.array(self.shift)


def reconcile(coarse: NodalBasis, fine: NodalBasis,
              branch: RefinementBranch) -> np.ndarray:
    """Coefficients of the coarse basis in the fine nodal basis.

    Row i holds coarse function i expressed in the fine basis restricted to
    the fine cell; exact whenever the fine space contains the mapped coarse
    space (fine order >= coarse order, geometry nested through ``branch``).
    """
    if fine.order < coarse.order or fine.dim != coarse.dim:
        raise ValueError("fine space does not contain the coarse space")
    if coarse.dim == 0:
        return np.ones((1, 1))
    return coarse.values(branch.apply(fine.nodes)).T


@lru_cache(maxsize=None)
def reconcile_cached(dim: int, c_order: int, f_order: int,
                     branch: RefinementBranch) -> np.ndarray:
    mat = reconcile(nodal_basis(dim, c_order), nodal_basis(dim, f_order), branch)
    mat.setflags(write=False)
    return mat


def face_embedding(dim: int, axis: int, side: int, face_pts: np.ndarray) -> np.ndarray:
    """Embed face reference points into the cell reference frame.

    The face coordinate runs along the axes other than ``axis`` in increasing
    order; the ``axis`` coordinate is pinned at -1 (side 0) or +1 (side 1).
    """
    face_pts = np.atleast_2d(np.asarray(face_pts, dtype=float))
    npts = face_pts.shape[0]
    out = np.empty((npts, dim))
    out[:, axis] = -1.0 if side == 0 else 1.0
    free = [d for d in range(dim) if d != axis]
    for j, d in enumerate(free):
        out[:, d] = face_pts[:, j]
    return out


def trace_gamma(field_basis: NodalBasis, face: tuple[int, int], kind: str,
                normal: np.ndarray | None = None,
                trace_order: int | None = None) -> np.ndarray:
    """Map field coefficients to nodal trace coefficients on one face.

    For an H1 trace this is point evaluation of the (scalar) field at the
    face nodes; for a normal trace it evaluates (vector field) . normal, so
    the returned matrix acts on the component-stacked coefficient vector.
    The trace degree must not exceed the field degree.
    """
    axis, side = face
    dim = field_basis.dim
    if trace_order is None:
        trace_order = field_basis.order
    if trace_order < field_basis.order:
        raise ValueError("trace space too coarse to represent the traced field")
    fb = nodal_basis(dim - 1, trace_order)
    pts = face_embedding(dim, axis, side, fb.nodes)
    evals = field_basis.values(pts)
    if kind == "H1-trace":
        return evals
    if kind == "normal-trace":
        if normal is None:
            normal = np.zeros(dim)
            normal[axis] = 1.0 if side == 1 else -1.0
        return np.hstack([normal[d] * evals for d in range(dim)])
    raise ValueError(f"unsupported trace kind {kind!r}")
