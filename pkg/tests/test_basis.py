import numpy as np
import pytest

from dpgmg import basis as bas


def test_lobatto_nodes():
    assert np.allclose(bas.lobatto_nodes(2), [-1.0, 0.0, 1.0], atol=1e-15)
    assert np.allclose(bas.lobatto_nodes(1), [-1.0, 1.0])
    assert bas.lobatto_nodes(0).tolist() == [0.0]
    n7 = bas.lobatto_nodes(7)
    assert np.allclose(n7, -n7[::-1], atol=1e-15)   # symmetric


@pytest.mark.parametrize("dim,order", [(1, 1), (1, 4), (1, 9), (2, 2), (2, 5)])
def test_nodal_partition_of_unity(dim, order):
    b = bas.nodal_basis(dim, order)
    assert b.n == (order + 1) ** dim
    vals = b.values(b.nodes)
    assert np.abs(vals - np.eye(b.n)).max() < 1e-12


def test_build_basis_contracts():
    b = bas.build_basis(1, "interval", "scalar-H1")
    assert np.allclose(b.values(np.array([[-1.0], [1.0]])), np.eye(2))
    b0 = bas.build_basis(0, "quad", "scalar-L2")
    assert b0.n == 1 and np.allclose(b0.values(np.zeros((3, 2))), 1.0)
    with pytest.raises(ValueError):
        bas.build_basis(2, "quad", "H1-trace")
    with pytest.raises(ValueError):
        bas.build_basis(2, "face-of-quad", "scalar-L2")
    with pytest.raises(ValueError):
        bas.build_basis(-1, "interval", "scalar-H1")


def test_reconcile_identity_and_half():
    b1 = bas.nodal_basis(1, 1)
    ident = bas.reconcile(b1, b1, bas.RefinementBranch.identity(1))
    assert np.allclose(ident, np.eye(2), atol=1e-14)
    left = bas.RefinementBranch.from_children(1, [(0,)])
    R = bas.reconcile(b1, b1, left)
    assert np.allclose(R, [[1.0, 0.5], [0.0, 0.5]], atol=1e-14)


def test_reconcile_exact_reproduction_order2_to_4():
    coarse = bas.nodal_basis(1, 2)
    fine = bas.nodal_basis(1, 4)
    R = bas.reconcile(coarse, fine, bas.RefinementBranch.identity(1))
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, (10, 1))
    # row i of R holds coarse_i in the fine basis
    lhs = R @ fine.values(pts).T
    rhs = coarse.values(pts).T
    assert np.abs(lhs - rhs).max() < 1e-12


def test_reconcile_h_reproduction_2d():
    coarse = bas.nodal_basis(2, 3)
    fine = bas.nodal_basis(2, 3)
    br = bas.RefinementBranch.from_children(2, [(1, 0)])
    R = bas.reconcile(coarse, fine, br)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, (12, 2))       # fine reference points
    lhs = R @ fine.values(pts).T
    rhs = coarse.values(br.apply(pts)).T
    assert np.abs(lhs - rhs).max() < 1e-12


def test_reconcile_rejects_non_nested():
    with pytest.raises(ValueError):
        bas.reconcile(bas.nodal_basis(1, 3), bas.nodal_basis(1, 2),
                      bas.RefinementBranch.identity(1))


def test_reconcile_cache_dedupes():
    a = bas.reconcile_cached(1, 1, 2, bas.RefinementBranch.from_children(1, [(0,)]))
    b = bas.reconcile_cached(1, 1, 2, bas.RefinementBranch.from_children(1, [(0,)]))
    assert a is b


def test_gradient_matches_finite_differences():
    b = bas.nodal_basis(2, 4)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.9, 0.9, (20, 2))
    g = b.gradients(pts)
    eps = 1e-6
    for ax in range(2):
        d = np.zeros(2)
        d[ax] = eps
        fd = (b.values(pts + d) - b.values(pts - d)) / (2 * eps)
        assert np.abs(g[:, :, ax] - fd).max() < 1e-6


def test_trace_gamma_constant_field():
    fb = bas.nodal_basis(2, 2)
    G = bas.trace_gamma(fb, (1, 0), "H1-trace", trace_order=3)
    coeffs = np.ones(fb.n)
    assert np.allclose(G @ coeffs, 1.0, atol=1e-13)


def test_trace_gamma_normal_component():
    fb = bas.nodal_basis(2, 1)
    # face with normal (0, 1): top face
    G = bas.trace_gamma(fb, (1, 1), "normal-trace", normal=np.array([0.0, 1.0]),
                        trace_order=1)
    sigma = np.concatenate([np.ones(fb.n), np.zeros(fb.n)])  # (1, 0) field
    assert np.abs(G @ sigma).max() < 1e-14


def test_trace_gamma_quadratic_restriction():
    fb = bas.nodal_basis(2, 2)
    G = bas.trace_gamma(fb, (1, 0), "H1-trace", trace_order=3)
    coeffs = fb.nodes[:, 0] ** 2              # u(x, y) = x^2 nodally exact
    got = G @ coeffs
    xi = bas.lobatto_nodes(3)
    assert np.abs(got - xi ** 2).max() < 1e-13


def test_trace_gamma_degree_mismatch():
    with pytest.raises(ValueError):
        bas.trace_gamma(bas.nodal_basis(2, 3), (0, 0), "H1-trace",
                        trace_order=1)


def test_gamma_commutes_with_point_evaluation():
    fb = bas.nodal_basis(2, 3)
    rng = np.random.default_rng(5)
    coeffs = rng.normal(size=fb.n)
    G = bas.trace_gamma(fb, (0, 1), "H1-trace", trace_order=4)
    trace_vals = G @ coeffs
    face = bas.nodal_basis(1, 4)
    xi = rng.uniform(-1, 1, (7, 1))
    lhs = face.values(xi) @ trace_vals
    pts = bas.face_embedding(2, 0, 1, xi)
    rhs = fb.values(pts) @ coeffs
    assert np.abs(lhs - rhs).max() < 1e-12
