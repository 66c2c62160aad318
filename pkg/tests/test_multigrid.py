import json

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from dpgmg import assembly as asm
from dpgmg import formulation as fm
from dpgmg import multigrid as mg
from dpgmg.krylov import pcg
from dpgmg.mesh import MeshHierarchy, MeshTopology, build_hierarchy

from conftest import zero_dirichlet_1, zero_dirichlet_2


def _poisson_level(mesh, delta_k=None, overlap=0):
    prob = fm.manufactured_solution("poisson", dim=mesh.dim)
    form = prob.form()
    dm = asm.DofMap(mesh, form, prob.dirichlet)
    dk = delta_k if delta_k is not None else mesh.dim
    return mg.LevelSpec(mesh, dm, form, dk, overlap=overlap), prob, form


def test_schwarz_blocks_examples():
    mesh = MeshTopology.uniform(2, (0, 0), (1, 1), 1, 1)
    spec, _, _ = _poisson_level(mesh)
    blocks = mg.schwarz_blocks(mesh, spec.dofmap, 0)
    assert len(blocks) == 1
    assert len(blocks[0]) == spec.dofmap.n_free

    m1 = MeshTopology.uniform(1, 0.0, 1.0, 2, 1)
    spec1, _, _ = _poisson_level(m1)
    b1 = mg.schwarz_blocks(m1, spec1.dofmap, 1)
    assert all(len(b) == spec1.dofmap.n_free for b in b1)

    m4 = MeshTopology.uniform(2, (0, 0), (1, 1), 4, 1)
    spec4, _, _ = _poisson_level(m4)
    b4 = mg.schwarz_blocks(m4, spec4.dofmap, 1)
    interior = [c for c in m4.active_ids if len(m4.face_neighbors(c)) == 4][0]
    idx = m4.active_ids.index(interior)
    cells = [interior] + m4.face_neighbors(interior)
    want = np.unique(np.concatenate(
        [spec4.dofmap.cell_masters(c) for c in cells]))
    want = spec4.dofmap.master_to_free[want]
    want = np.sort(want[want >= 0])
    assert np.array_equal(b4[idx], want)
    with pytest.raises(ValueError):
        mg.schwarz_blocks(m4, spec4.dofmap, 2)


SIGMA_TABLE_OVERLAP0 = {   # (dim, width) -> (conservative, aggressive)
    (1, 2): (1 / 4, 1 / 3), (1, 4): (1 / 4, 1 / 4), (1, 8): (1 / 4, 1 / 4),
    (2, 2): (1 / 6, 1 / 4), (2, 4): (1 / 6, 1 / 6), (2, 8): (1 / 6, 1 / 6),
}
SIGMA_TABLE_OVERLAP1 = {
    (1, 2): (1 / 4, 1 / 3), (1, 4): (1 / 6, 1 / 5), (1, 8): (1 / 6, 1 / 6),
    (2, 2): (1 / 6, 1 / 5), (2, 4): (1 / 14, 1 / 12), (2, 8): (1 / 14, 1 / 14),
}


@pytest.mark.parametrize("overlap,table", [(0, SIGMA_TABLE_OVERLAP0),
                                           (1, SIGMA_TABLE_OVERLAP1)])
def test_sigma_weights_reproduce_reference_tables(overlap, table):
    for (dim, width), (cons, aggr) in table.items():
        mesh = MeshTopology.uniform(dim, (0.0,) * dim, (1.0,) * dim, width, 1)
        spec, _, _ = _poisson_level(mesh)
        a = mg.sigma_weight(mesh, overlap, "aggressive")
        c = mg.sigma_weight(mesh, overlap, "conservative", spec.dofmap)
        assert abs(a - aggr) < 1e-15, (dim, width, overlap, "aggressive")
        assert abs(c - cons) < 1e-15, (dim, width, overlap, "conservative")
        assert a >= c - 1e-15


def test_sigma_mode_validation():
    mesh = MeshTopology.uniform(1, 0.0, 1.0, 2, 1)
    with pytest.raises(ValueError):
        mg.sigma_weight(mesh, 0, "bold")
    with pytest.raises(ValueError):
        mg.sigma_weight(mesh, 0, "conservative")   # needs dofmap


def test_prolongation_identity_for_identical_levels():
    mesh = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 2)
    spec, _, _ = _poisson_level(mesh)
    P = mg.build_prolongation(spec, spec, "p")
    dense = P.full.toarray()
    assert np.abs(dense - np.eye(dense.shape[0])).max() < 1e-12
    assert P.counts()["gamma"] == 0


def test_prolongation_p_injects_linear_traces_exactly():
    coarse_mesh = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 1)
    fine_mesh = coarse_mesh.with_uniform_order(2)
    cs, prob, form = _poisson_level(coarse_mesh)
    fs, _, _ = _poisson_level(fine_mesh)
    P = mg.build_prolongation(cs, fs, "p")
    lin = lambda p: 0.25 + 0.5 * p[:, 0] - 0.75 * p[:, 1]
    xc = np.zeros(cs.dofmap.n_master)
    for i, (var, comp, kind, ent) in enumerate(cs.dofmap.dof_meta):
        if var == "u_hat":
            xc[i] = lin(cs.dofmap.dof_pos[i][None, :])[0]
    xf = P.full @ xc
    for i, (var, comp, kind, ent) in enumerate(fs.dofmap.dof_meta):
        if var == "u_hat":
            want = lin(fs.dofmap.dof_pos[i][None, :])[0]
            assert abs(xf[i] - want) < 1e-12


def _solve_level(spec, prob):
    sys = asm.assemble_condensed(spec.mesh, spec.form, spec.dofmap,
                                 spec.delta_k,
                                 pressure_pin=prob.pressure_pin)
    x = spla.spsolve(sys.A.tocsc(), sys.b)
    return sys, x


@pytest.mark.parametrize("dim", [1, 2])
def test_prolongation_exactness_h_poisson_linear(dim):
    """A coarse-exact solution of a problem with a linear exact solution
    prolongates to a (near-)zero fine residual, including the gamma route."""
    lin = lambda p: (0.2 + 0.7 * p[:, 0] - (0.3 * p[:, 1] if dim == 2 else 0))[:, None]
    prob = fm.manufactured_solution("poisson", dim=dim)
    form = fm.poisson_form(dim, forcing=0.0)
    prob.dirichlet = {"u_hat": lin}
    coarse_mesh = MeshTopology.uniform(dim, (0.0,) * dim, (1.0,) * dim, 2, 2)
    fine_mesh = coarse_mesh.refine_uniform(1)
    cdm = asm.DofMap(coarse_mesh, form, prob.dirichlet)
    fdm = asm.DofMap(fine_mesh, form, prob.dirichlet)
    cs = mg.LevelSpec(coarse_mesh, cdm, form, dim)
    fs = mg.LevelSpec(fine_mesh, fdm, form, dim)
    csys = asm.assemble_condensed(coarse_mesh, form, cdm, dim)
    xc = spla.spsolve(csys.A.tocsc(), csys.b)
    fsys = asm.assemble_condensed(fine_mesh, form, fdm, dim)
    P = mg.build_prolongation(cs, fs, "h")
    xf_full = P.full @ csys.full_trace_vector(xc)
    res = fsys.b - fsys.A @ xf_full[fdm.free_idx]
    assert np.linalg.norm(res) <= 1e-9 * np.linalg.norm(fsys.b)
    if dim == 2:
        assert P.counts()["gamma"] > 0


def test_prolongation_exactness_h_with_hanging_face():
    lin = lambda p: (0.2 + 0.7 * p[:, 0] - 0.3 * p[:, 1])[:, None]
    form = fm.poisson_form(2, forcing=0.0)
    fine_mesh = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 2).refine_cells({3})
    hier = build_hierarchy(fine_mesh, 2, True)
    assert len(hier.levels) == 2 and hier.kinds == ["h"]
    coarse_mesh = hier.levels[0]
    dirichlet = {"u_hat": lin}
    cdm = asm.DofMap(coarse_mesh, form, dirichlet)
    fdm = asm.DofMap(fine_mesh, form, dirichlet)
    csys = asm.assemble_condensed(coarse_mesh, form, cdm, 2)
    xc = spla.spsolve(csys.A.tocsc(), csys.b)
    fsys = asm.assemble_condensed(fine_mesh, form, fdm, 2)
    P = mg.build_prolongation(mg.LevelSpec(coarse_mesh, cdm, form, 2),
                              mg.LevelSpec(fine_mesh, fdm, form, 2), "h")
    xf_full = P.full @ csys.full_trace_vector(xc)
    res = fsys.b - fsys.A @ xf_full[fdm.free_idx]
    assert np.linalg.norm(res) <= 1e-9 * np.linalg.norm(fsys.b)


def test_prolongation_exactness_h_stokes_linear_state():
    uex = lambda p: np.column_stack([p[:, 1], p[:, 0]])
    form = fm.stokes_vgp_form(1.0)
    coarse_mesh = MeshTopology.uniform(2, (-1, -1), (1, 1), 2, 1)
    fine_mesh = coarse_mesh.refine_uniform(1)
    dirichlet = {"u_hat": uex}
    pin = ("p", (0.0, 0.0))
    cdm = asm.DofMap(coarse_mesh, form, dirichlet)
    fdm = asm.DofMap(fine_mesh, form, dirichlet)
    csys = asm.assemble_condensed(coarse_mesh, form, cdm, 2, pressure_pin=pin)
    xc = spla.spsolve(csys.A.tocsc(), csys.b)
    fsys = asm.assemble_condensed(fine_mesh, form, fdm, 2, pressure_pin=pin)
    P = mg.build_prolongation(mg.LevelSpec(coarse_mesh, cdm, form, 2),
                              mg.LevelSpec(fine_mesh, fdm, form, 2), "h")
    xf_full = P.full @ csys.full_trace_vector(xc)
    res = fsys.b - fsys.A @ xf_full[fdm.free_idx]
    assert np.linalg.norm(res) <= 1e-9 * np.linalg.norm(fsys.b)


def _two_level_vcycle(prob, coarse_mesh, fine_mesh, kind, dk, overlap):
    form = prob.form()
    cdm = asm.DofMap(coarse_mesh, form, prob.dirichlet)
    fdm = asm.DofMap(fine_mesh, form, prob.dirichlet)
    specs = [mg.LevelSpec(coarse_mesh, cdm, form, dk),
             mg.LevelSpec(fine_mesh, fdm, form, dk, overlap=overlap)]
    sys = asm.assemble_condensed(fine_mesh, form, fdm, dk,
                                 pressure_pin=prob.pressure_pin)
    vc = mg.build_vcycle(specs, [kind], sys.A)
    return sys, vc


def test_vcycle_is_spd_operator():
    prob = fm.manufactured_solution("poisson", dim=2)
    fine = MeshTopology.uniform(2, (0, 0), (1, 1), 4, 2)
    coarse = fine.with_uniform_order(1)
    sys, vc = _two_level_vcycle(prob, coarse, fine, "p", 2, 0)
    rng = np.random.default_rng(0)
    r1 = rng.normal(size=sys.A.shape[0])
    r2 = rng.normal(size=sys.A.shape[0])
    s12 = vc.apply(r1) @ r2
    s21 = vc.apply(r2) @ r1
    assert abs(s12 - s21) <= 1e-10 * abs(s12)
    for _ in range(5):
        r = rng.normal(size=sys.A.shape[0])
        assert vc.apply(r) @ r > 0


def test_vcycle_single_level_is_direct():
    prob = fm.manufactured_solution("poisson", dim=2)
    mesh = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 1)
    form = prob.form()
    dm = asm.DofMap(mesh, form, prob.dirichlet)
    sys = asm.assemble_condensed(mesh, form, dm, 2)
    vc = mg.VCycle([mg.GridLevel(sys.A, None, None)])
    x, rep = pcg(sys.A, sys.b, vc, tol=1e-10)
    assert rep.iterations == 1 and rep.converged


def test_vcycle_exact_smoother_gives_direct_action():
    prob = fm.manufactured_solution("poisson", dim=2)
    fine = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 1)
    coarse = fine.with_uniform_order(0)
    sys, vc = _two_level_vcycle(prob, coarse, fine, "p", 2, 0)

    class ExactSmoother:
        def __init__(self, A):
            self.Ainv = np.linalg.inv(A.toarray())
            self.sigma = 1.0

        def apply(self, r):
            return self.Ainv @ r

        def weighted(self, r):
            return self.Ainv @ r

    vc.levels[-1].smoother = ExactSmoother(sys.A)
    rng = np.random.default_rng(1)
    r = rng.normal(size=sys.A.shape[0])
    z = vc.apply(r)
    assert np.linalg.norm(sys.A @ z - r) < 1e-10 * np.linalg.norm(r)


def test_1d_p_two_grid_single_iteration():
    prob = fm.manufactured_solution("poisson", dim=1)
    for k in (1, 4):
        fine = MeshTopology.uniform(1, 0.0, 1.0, 16, k)
        coarse = fine.with_uniform_order(k // 2)
        sys, vc = _two_level_vcycle(prob, coarse, fine, "p", 1, 0)
        x, rep = pcg(sys.A, sys.b, vc, tol=1e-10)
        assert rep.iterations == 1 and rep.converged


def test_smoother_block_order_independence():
    prob = fm.manufactured_solution("poisson", dim=2)
    mesh = MeshTopology.uniform(2, (0, 0), (1, 1), 4, 1)
    form = prob.form()
    dm = asm.DofMap(mesh, form, prob.dirichlet)
    sys = asm.assemble_condensed(mesh, form, dm, 2)
    blocks = mg.schwarz_blocks(mesh, dm, 1)
    sm1 = mg.SchwarzSmoother(sys.A, blocks, 1.0)
    rng = np.random.default_rng(2)
    perm = rng.permutation(len(blocks))
    sm2 = mg.SchwarzSmoother(sys.A, [blocks[i] for i in perm], 1.0)
    r = rng.normal(size=sys.A.shape[0])
    z1, z2 = sm1.apply(r), sm2.apply(r)
    assert np.linalg.norm(z1 - z2) <= 1e-12 * np.linalg.norm(z1)


def test_eigenvalue_bound_quick_subset():
    """Power-iteration check of lambda_max(sigma B A) <= 1 on a few meshes
    (the full sweep is in the acceptance suite)."""
    for dim, width, overlap in [(1, 4, 0), (1, 4, 1), (2, 8, 0), (2, 8, 1)]:
        prob = fm.manufactured_solution("poisson", dim=dim)
        mesh = MeshTopology.uniform(dim, (0.0,) * dim, (1.0,) * dim, width, 2)
        form = prob.form()
        dm = asm.DofMap(mesh, form, prob.dirichlet)
        sys = asm.assemble_condensed(mesh, form, dm, dim)
        blocks = mg.schwarz_blocks(mesh, dm, overlap)
        sig = mg.sigma_weight(mesh, overlap, "aggressive")
        sm = mg.SchwarzSmoother(sys.A, blocks, sig)
        rng = np.random.default_rng(0)
        v = rng.normal(size=sys.A.shape[0])
        lam = 0.0
        for _ in range(200):
            w = sig * sm.apply(sys.A @ v)
            lam = (v @ (sys.A @ w)) / (v @ (sys.A @ v))
            v = w / np.linalg.norm(w)
        assert lam <= 1 + 1e-6, (dim, width, overlap, lam)


def test_dump_level_debug(tmp_path):
    prob = fm.manufactured_solution("poisson", dim=2)
    fine = MeshTopology.uniform(2, (0, 0), (1, 1), 4, 2)
    coarse = fine.with_uniform_order(1)
    sys, vc = _two_level_vcycle(prob, coarse, fine, "p", 2, 0)
    path = tmp_path / "levels.json"
    mg.dump_level_debug(vc, path)
    doc = json.loads(path.read_text())
    assert len(doc) == 2
    assert "sigma" in doc[1] and "P" in doc[1]
    assert doc[1]["P"]["provenance"]["gamma"] == 0
