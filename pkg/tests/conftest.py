import numpy as np
import pytest

from dpgmg import basis as bas
from dpgmg.assembly import DofMap, Solution
from dpgmg.formulation import manufactured_solution
from dpgmg.mesh import MeshTopology


def zero_dirichlet_1(p):
    return np.zeros((len(p), 1))


def zero_dirichlet_2(p):
    return np.zeros((len(p), 2))


def interpolate_exact(prob, mesh, form, dofmap) -> Solution:
    """Nodal interpolant of a problem's closed-form solution, traces filled
    from the trace definitions (flux traces against the global +axis
    normal)."""
    ex = prob.exact_fields
    sol = Solution.zero(mesh, form, dofmap)
    for cid in mesh.active_ids:
        fb = bas.nodal_basis(mesh.dim, mesh.order(cid))
        pts = mesh.from_ref(cid, fb.nodes)
        for var in sol.fields[cid]:
            sol.fields[cid][var] = np.asarray(ex[var](pts)).T
    for i, (var, comp, kind, ent) in enumerate(dofmap.dof_meta):
        pos = dofmap.dof_pos[i][None, :]
        defs = form.trace_defs[var][comp]
        if mesh.dim == 1:
            axis = 0
        elif kind == "edge":
            axis = 1 - ent[0][0]
        else:
            axis = None
        val = 0.0
        for fvar, fc, naxis, coeff in defs:
            if naxis is not None and naxis != axis:
                continue
            val += coeff * np.asarray(ex[fvar](pos))[0, fc]
        sol.traces[i] = val
    return sol


@pytest.fixture
def poisson1d():
    return manufactured_solution("poisson", dim=1)


@pytest.fixture
def poisson2d():
    return manufactured_solution("poisson", dim=2)


@pytest.fixture
def stokes2d():
    return manufactured_solution("stokes")


def unit_mesh(dim, width, k, lo=None, hi=None):
    lo = (0.0,) * dim if lo is None else lo
    hi = (1.0,) * dim if hi is None else hi
    return MeshTopology.uniform(dim, lo, hi, width, k)
