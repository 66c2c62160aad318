"""Geometric multigrid preconditioner for the condensed DPG trace system.

One multiplicative V-cycle per application: weighted additive-Schwarz
pre-smoothing, coarse correction through P M_C P^T with the recursion
continuing on Galerkin coarse operators A_c = P^T A P, then post-smoothing.
The coarsest level is a direct factorization.

Prolongation rows come in two flavors.  Trace dofs whose geometric carrier
exists on the coarse skeleton interpolate the coarse trace polynomials
(basis reconciliation).  Trace dofs on faces that only exist on the fine
grid are filled from the coarse element's field polynomials: the coarse
trace unknowns are first mapped to fields by the static-condensation
recovery u = -K11^-1 K12 f, then traced onto the new faces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import basis as bas
from .assembly import (DofMap, _convert_vkey, _old_point_on_edge,
                       _old_vertex_rows, element_matrices)
from .formulation import FormDescriptor
from .mesh import MeshHierarchy, MeshTopology

__all__ = [
    "LevelSpec", "Prolongation", "SchwarzSmoother", "VCycle",
    "schwarz_blocks", "sigma_weight", "build_prolongation", "build_vcycle",
    "vcycle_apply", "CoarseSolver", "dump_level_debug",
]

DENSE_COARSE_LIMIT = 600


# ----------------------------------------------------------------------
# Schwarz smoother
# ----------------------------------------------------------------------

def schwarz_blocks(mesh: MeshTopology, dofmap: DofMap, overlap: int) -> list:
    """Free-dof index sets, one block per active cell.

    Overlap 0: the dofs seen by the element (those on its boundary,
    including dofs shared with neighbors).  Overlap 1: the dofs seen by the
    element and its face neighbors.
    """
    if overlap not in (0, 1):
        raise ValueError("overlap must be 0 or 1")
    blocks = []
    for cid in mesh.active_ids:
        cells = [cid]
        if overlap == 1:
            cells += mesh.face_neighbors(cid)
        dofs = np.unique(np.concatenate([dofmap.cell_masters(c) for c in cells]))
        free = dofmap.master_to_free[dofs]
        blocks.append(np.sort(free[free >= 0]))
    return blocks


def sigma_weight(mesh: MeshTopology, overlap: int, mode: str = "aggressive",
                 dofmap: Optional[DofMap] = None) -> float:
    """Schwarz damping weight keeping lambda_max(sigma B A) <= 1.

    aggressive: 1/(N+1) with N the largest count of distinct cells that are
    face neighbors of a block's domain (domain cells included).
    conservative: 1/(N_max+2) with N_max the largest number of blocks any
    single dof participates in (requires a dofmap).
    """
    if mode == "aggressive":
        worst = 0
        for cid in mesh.active_ids:
            domain = {cid}
            if overlap == 1:
                domain.update(mesh.face_neighbors(cid))
            reach = set(domain)
            for c in domain:
                reach.update(mesh.face_neighbors(c))
            worst = max(worst, len(reach))
        return 1.0 / (worst + 1)
    if mode == "conservative":
        if dofmap is None:
            raise ValueError("conservative weight needs the dof map")
        counts = np.zeros(dofmap.n_free, dtype=int)
        for blk in schwarz_blocks(mesh, dofmap, overlap):
            counts[blk] += 1
        return 1.0 / (int(counts.max()) + 2)
    raise ValueError(f"unknown sigma mode {mode!r}")


class SchwarzSmoother:
    """Weighted overlapping additive Schwarz: sigma * sum_b R_b^T A_bb^-1 R_b."""

    def __init__(self, A: sp.csr_matrix, blocks: list, sigma: float):
        self.blocks = [b for b in blocks if len(b)]
        self.sigma = sigma
        self.n = A.shape[0]
        Ac = A.tocsc()
        self.factors = []
        for b in self.blocks:
            sub = Ac[:, b][b, :].toarray()
            try:
                self.factors.append(sla.cho_factor(sub, lower=True,
                                                   check_finite=False))
            except np.linalg.LinAlgError as exc:
                raise RuntimeError("Schwarz block is not SPD") from exc

    def apply(self, r: np.ndarray) -> np.ndarray:
        """Unweighted B r; block order does not affect the result."""
        z = np.zeros_like(r)
        for b, f in zip(self.blocks, self.factors):
            z[b] += sla.cho_solve(f, r[b], check_finite=False)
        return z

    def weighted(self, r: np.ndarray) -> np.ndarray:
        return self.sigma * self.apply(r)


# ----------------------------------------------------------------------
# prolongation
# ----------------------------------------------------------------------

@dataclass
class LevelSpec:
    """Everything the operator build needs to know about one grid level."""
    mesh: MeshTopology
    dofmap: DofMap
    form: FormDescriptor
    delta_k: int
    background: object = None
    overlap: int = 0               # smoother overlap used at this level
    sigma_mode: str = "aggressive"


@dataclass
class Prolongation:
    full: sp.csr_matrix            # all masters (fine) x all masters (coarse)
    free: sp.csr_matrix            # free x free, used in the cycle
    provenance: np.ndarray         # per fine master: 0 direct, 1 gamma

    def counts(self):
        return {"direct": int(np.sum(self.provenance == 0)),
                "gamma": int(np.sum(self.provenance == 1))}


def _gamma_operator(spec: LevelSpec, cid: int) -> tuple:
    """(-K11^-1 K12, layout) for a coarse cell, mapping that cell's local
    trace coefficients to its field coefficients (load part dropped, as the
    preconditioner only sees residual corrections)."""
    ls = element_matrices(spec.mesh, cid, spec.form, spec.delta_k,
                          spec.dofmap, spec.background, need_load=False)
    nf = ls.layout.n_field
    K11 = ls.K[:nf, :nf]
    K12 = ls.K[:nf, nf:]
    c = sla.cho_factor(K11, lower=True, check_finite=False)
    return -sla.cho_solve(c, K12, check_finite=False), ls.layout


def _gamma_rows(spec: LevelSpec, gamma_cache: dict, pos: np.ndarray,
                defs, normal_axis) -> list:
    """Master-dof weights realizing the field-to-trace value at one point."""
    cid = spec.mesh.locate(pos)
    if spec.form.cacheable:
        # congruent cells share the recovery operator
        key = (tuple(float(v) for v in spec.mesh.cell_size(cid)),
               spec.mesh.order(cid), spec.dofmap._face_orders[cid])
    else:
        key = cid
    if key not in gamma_cache:
        gamma_cache[key] = _gamma_operator(spec, cid)
    gamma, layout = gamma_cache[key]
    fb = bas.nodal_basis(spec.mesh.dim, spec.mesh.order(cid))
    ref = spec.mesh.to_ref(cid, pos[None, :])
    vals = fb.values(ref)[0]
    row_fields = np.zeros(layout.n_field)
    for fvar, fc, naxis, coeff in defs:
        if naxis is not None and naxis != normal_axis:
            continue
        row_fields[layout.field_slice(fvar, fc)] += coeff * vals
    row_tr = row_fields @ gamma
    cmap = spec.dofmap.cell_map(cid)
    out: dict[int, float] = {}
    if cmap[0] == "perm":
        for g, w in zip(cmap[1], row_tr):
            if w != 0.0:
                out[int(g)] = out.get(int(g), 0.0) + w
    else:
        _, gcols, mat = cmap
        wts = row_tr @ mat
        for g, w in zip(gcols, wts):
            if w != 0.0:
                out[int(g)] = out.get(int(g), 0.0) + w
    return sorted(out.items())


def build_prolongation(coarse: LevelSpec, fine: LevelSpec,
                       kind: str) -> Prolongation:
    """Prolongation from the coarse level's condensed dofs to the fine's.

    For p transitions (same grid) every trace dof interpolates the coarse
    trace polynomial on the same carrier.  For h transitions the carriers on
    the coarse skeleton interpolate coarse traces; dofs strictly inside a
    refined coarse cell go through the gamma (field-to-trace) route.
    """
    if kind not in ("h", "p"):
        raise ValueError("transition kind must be 'h' or 'p'")
    fdm, cdm = fine.dofmap, coarse.dofmap
    rows, cols, vals = [], [], []
    provenance = np.zeros(fdm.n_master, dtype=np.int8)
    gamma_cache: dict = {}

    def emit(idx, entries):
        for g, w in entries:
            rows.append(idx)
            cols.append(g)
            vals.append(w)

    def gamma(idx, var, comp, naxis):
        if kind == "p":
            raise RuntimeError("p-transition met a dof with no coarse "
                               "carrier; grids differ")
        defs = fine.form.trace_defs[var][comp]
        provenance[idx] = 1
        emit(idx, _gamma_rows(coarse, gamma_cache, fdm.dof_pos[idx],
                              defs, naxis))

    # vertex-supported dofs (1D trace dofs are all vertex-supported)
    for (var, comp), table in fdm._vertex_dof.items():
        for vkey, idx in table.items():
            ovk = _convert_vkey(vkey, fdm.L, cdm.L)
            entries = None
            if ovk is not None:
                if fine.mesh.dim == 1:
                    ct = cdm._vertex_dof[(var, comp)]
                    entries = [(ct[ovk], 1.0)] if ovk in ct else None
                else:
                    entries = _old_vertex_rows(cdm, var, comp, ovk)
                    if entries is None:
                        host = _old_point_on_edge(cdm, ovk)
                        if host is not None:
                            ek, xi = host
                            entries = cdm.edge_value_rows(ek, var, comp,
                                                          [xi])[0]
            if entries is None:
                gamma(idx, var, comp, 0 if fine.mesh.dim == 1 else None)
            else:
                emit(idx, entries)

    # edge dofs, batched per (variable, master edge)
    for (var, comp), etable in fdm._edge_dofs.items():
        h1 = fdm.form.trace_var(var).kind == "h1"
        for ekey, idxs in etable.items():
            if len(idxs) == 0:
                continue
            info = fdm.edges[ekey]
            q = info.order + 1 if h1 else info.order
            xis = bas.lobatto_nodes(q)
            if h1:
                xis = xis[1:-1]
            host = cdm.find_host_edge(ekey)
            if host is not None:
                hek, (sc, sh) = host
                batch = cdm.edge_value_rows(hek, var, comp, sc * xis + sh)
                for idx, entries in zip(idxs, batch):
                    emit(int(idx), entries)
            else:
                for idx in idxs:
                    gamma(int(idx), var, comp, 1 - ekey[0])

    full = sp.csr_matrix((vals, (rows, cols)),
                         shape=(fdm.n_master, cdm.n_master))
    free = full[fdm.free_idx][:, cdm.free_idx].tocsr()
    return Prolongation(full, free, provenance)


# ----------------------------------------------------------------------
# V-cycle
# ----------------------------------------------------------------------

class CoarseSolver:
    """Direct solve at the bottom of the cycle: dense Cholesky for small
    systems, sparse LU above the crossover."""

    def __init__(self, A: sp.spmatrix):
        self.n = A.shape[0]
        if self.n <= DENSE_COARSE_LIMIT:
            self._chol = sla.cho_factor(A.toarray(), lower=True,
                                        check_finite=False)
            self._lu = None
        else:
            from scipy.sparse.linalg import splu
            self._lu = splu(A.tocsc())
            self._chol = None

    def solve(self, r: np.ndarray) -> np.ndarray:
        if self._chol is not None:
            return sla.cho_solve(self._chol, r, check_finite=False)
        return self._lu.solve(r)


@dataclass
class GridLevel:
    A: sp.csr_matrix
    smoother: Optional[SchwarzSmoother]
    P: Optional[Prolongation]      # from next-coarser level to this one
    spec: Optional[LevelSpec] = None


class VCycle:
    """Multiplicative V-cycle as an SPD linear operator (CG preconditioner)."""

    def __init__(self, levels: list[GridLevel]):
        self.levels = levels
        self.coarse = CoarseSolver(levels[0].A)

    @property
    def n(self) -> int:
        return self.levels[-1].A.shape[0]

    def apply(self, r: np.ndarray) -> np.ndarray:
        return self._cycle(len(self.levels) - 1, r)

    def _cycle(self, i: int, r: np.ndarray) -> np.ndarray:
        if i == 0:
            return self.coarse.solve(r)
        lvl = self.levels[i]
        x = lvl.smoother.weighted(r)
        r1 = r - lvl.A @ x
        x = x + lvl.P.free @ self._cycle(i - 1, lvl.P.free.T @ r1)
        r2 = r - lvl.A @ x
        return x + lvl.smoother.weighted(r2)


def vcycle_apply(vc: VCycle, r: np.ndarray) -> np.ndarray:
    return vc.apply(r)


def _symmetrize_prune(A: sp.spmatrix) -> sp.csr_matrix:
    A = ((A + A.T) * 0.5).tocsr()
    if A.nnz:
        A.data[np.abs(A.data) < 1e-15 * np.abs(A.data).max()] = 0.0
        A.eliminate_zeros()
    return A


def build_vcycle(specs: list[LevelSpec], kinds: list[str],
                 A_fine: sp.csr_matrix) -> VCycle:
    """Assemble the level stack: Galerkin coarse operators, per-level
    Schwarz smoothers (overlap chosen by the transition kind below each
    level), and the coarsest direct factorization."""
    n = len(specs)
    levels: list = [None] * n
    A = A_fine
    levels[n - 1] = GridLevel(A, None, None, specs[n - 1])
    for i in range(n - 1, 0, -1):
        P = build_prolongation(specs[i - 1], specs[i], kinds[i - 1])
        levels[i].P = P
        A = _symmetrize_prune(P.free.T @ (levels[i].A @ P.free))
        levels[i - 1] = GridLevel(A, None, None, specs[i - 1])
    for i in range(1, n):
        spec = specs[i]
        blocks = schwarz_blocks(spec.mesh, spec.dofmap, spec.overlap)
        sigma = sigma_weight(spec.mesh, spec.overlap, spec.sigma_mode,
                             spec.dofmap)
        levels[i].smoother = SchwarzSmoother(levels[i].A, blocks, sigma)
    return VCycle(levels)


def dump_level_debug(vc: VCycle, path) -> None:
    """JSON dump of prolongation and smoother structure for golden tests."""
    doc = []
    for i, lvl in enumerate(vc.levels):
        entry = {"level": i, "n": int(lvl.A.shape[0]),
                 "nnz": int(lvl.A.nnz)}
        if lvl.smoother is not None:
            entry["sigma"] = lvl.smoother.sigma
            entry["block_sizes"] = [int(len(b)) for b in lvl.smoother.blocks]
        if lvl.P is not None:
            coo = lvl.P.free.tocoo()
            entry["P"] = {"shape": list(coo.shape),
                          "rows": coo.row.tolist(),
                          "cols": coo.col.tolist(),
                          "vals": [float(v) for v in coo.data],
                          "provenance": lvl.P.counts()}
        doc.append(entry)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
