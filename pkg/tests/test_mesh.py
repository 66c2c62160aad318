import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpgmg.mesh import (MeshTopology, build_hierarchy, cell_faces,
                        face_neighbors, greedy_select, refine_cells)


def test_refine_1d_single_bisection():
    m = MeshTopology.uniform(1, 0.0, 1.0, 2, 1)
    r = refine_cells(m, {0})
    assert len(r.active_ids) == 3
    levels = sorted(r.cell(c).level for c in r.active_ids)
    assert levels == [0, 1, 1]
    assert len(m.active_ids) == 2  # input untouched


def test_refine_2d_quad_split():
    m = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 1)
    r = refine_cells(m, {0})
    assert len(r.active_ids) == 7


def test_refine_closure_one_irregularity():
    m = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 1)
    r = m.refine_cells({0})
    child = r.cell(0).children[0]
    rr = r.refine_cells({child})
    rr.validate()
    # brute-force check of the 1-irregular rule across every face
    for cid in rr.active_ids:
        for axis, side in cell_faces(2):
            for n in rr.across_face(cid, axis, side):
                assert abs(rr.cell(n).level - rr.cell(cid).level) <= 1


def test_refine_errors():
    m = MeshTopology.uniform(1, 0.0, 1.0, 2, 1)
    with pytest.raises(ValueError):
        m.refine_cells({99})
    r = m.refine_cells({0})
    with pytest.raises(ValueError):
        r.refine_cells({0})   # no longer active


def test_refine_monotone_and_measure():
    m = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 1)
    rng = np.random.default_rng(7)
    for _ in range(6):
        ids = list(m.active_ids)
        pick = {ids[rng.integers(len(ids))]}
        r = m.refine_cells(pick)
        assert len(r.active_ids) > len(m.active_ids)
        measure = sum(float(np.prod(r.cell_size(c))) for c in r.active_ids)
        assert abs(measure - 1.0) < 1e-12
        m = r


def test_build_hierarchy_h_then_p():
    fine = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 4).refine_uniform(1)
    h = build_hierarchy(fine, 1, True)
    shapes = [(len(l.active_ids), sorted(set(l.orders.values()))) for l in h.levels]
    assert shapes == [(4, [1]), (16, [1]), (16, [4])]
    assert h.kinds == ["h", "p"]


def test_build_hierarchy_p_doubling():
    fine = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 16)
    h = build_hierarchy(fine, 1, False)
    assert [sorted(set(l.orders.values()))[0] for l in h.levels] == [1, 2, 4, 8, 16]
    assert h.kinds == ["p"] * 4


def test_build_hierarchy_trivial_and_errors():
    root = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 1)
    h = build_hierarchy(root, 1, True)
    assert len(h.levels) == 1
    with pytest.raises(ValueError):
        build_hierarchy(root, 2, True)   # k_coarse above fine order


def test_hierarchy_invariants_randomized():
    rng = np.random.default_rng(0)
    for trial in range(100):
        dim = int(rng.integers(1, 3))
        root = int(rng.choice([1, 2, 3]))
        k = int(rng.choice([1, 2, 4]))
        lo = (0.0,) * dim
        hi = (1.0,) * dim
        mesh = MeshTopology.uniform(dim, lo, hi, root, k)
        for _ in range(int(rng.integers(0, 3))):
            ids = list(mesh.active_ids)
            mesh = mesh.refine_cells({ids[rng.integers(len(ids))]})
        kc = int(rng.integers(1, k + 1))
        h = build_hierarchy(mesh, kc, bool(rng.integers(2)))
        assert h.fine.active == mesh.active
        for a, b, kind in zip(h.levels, h.levels[1:], h.kinds):
            if kind == "p":
                assert a.active == b.active
                assert any(a.order(c) != b.order(c) for c in a.active)
            else:
                assert a.active != b.active
            # every cell of the coarser level is ancestor-or-equal of finer
            for cid in a.active:
                descendants = b.active_descendants(cid) if hasattr(b, "active_descendants") else None
                assert descendants, f"cell {cid} lost between levels"
                assert all(a.order(cid) <= b.order(d) for d in descendants)


def test_face_neighbors_uniform():
    m = MeshTopology.uniform(2, (0, 0), (1, 1), 4, 1)
    # interior cell of the 4x4 grid
    interior = [c for c in m.active_ids
                if len(m.face_neighbors(c)) == 4]
    assert len(interior) == 4
    m2 = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 1)
    assert len(m2.face_neighbors(0)) == 2


def test_face_neighbors_hanging_rule():
    m = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 1)
    r = m.refine_cells({1})   # cell 1 = (1, 0)
    nbrs = r.face_neighbors(0)
    kids = [c for c in r.cell(1).children if c in nbrs]
    # the two children across the shared face are both neighbors
    assert len(kids) == 2
    with pytest.raises(ValueError):
        r.face_neighbors(1)


def test_face_neighbors_symmetric_on_refined_mesh():
    m = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 1)
    m = m.refine_cells({0, 3})
    m = m.refine_cells({m.active_ids[4]})
    m.validate()
    for a in m.active_ids:
        for b in face_neighbors(m, a):
            assert a in face_neighbors(m, b)


def test_greedy_select_examples():
    assert greedy_select([1.0, 0.3, 0.1], 0.2) == {0, 1}
    assert greedy_select([1.0, 1.0, 1.0], 0.2) == {0, 1, 2}
    assert greedy_select([0.0, 0.0, 5.0], 0.2) == {2}
    with pytest.raises(ValueError):
        greedy_select([], 0.2)
    with pytest.raises(ValueError):
        greedy_select([1.0], 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(min_value=0, max_value=1e6), min_size=1, max_size=40),
       st.floats(min_value=1e-6, max_value=1.0))
def test_greedy_select_matches_bruteforce(errors, fraction):
    got = greedy_select(errors, fraction)
    emax = max(errors)
    brute = {i for i, e in enumerate(errors) if e > fraction * emax}
    if not brute:
        brute = {int(np.argmax(errors))}
    assert got == brute


def test_to_json_deterministic_and_complete():
    m = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 3).refine_cells({2})
    doc = json.loads(m.to_json())
    assert doc["root_shape"] == [2, 2]
    assert set(doc) >= {"cells", "active", "orders", "origin", "extent"}
    assert m.to_json() == m.refine_cells(set()).to_json()


def test_locate_and_boxes():
    m = MeshTopology.uniform(2, (0, 0), (1, 1), 2, 1).refine_cells({3})
    cid = m.locate((0.9, 0.9))
    lo, hi = m.cell_box(cid)
    assert np.all(lo <= [0.9, 0.9]) and np.all(hi >= [0.9, 0.9])
    assert m.cell(cid).level == 1
