import io

import numpy as np
import pytest

from nefem.mesh import (InterfaceGeometry, MeshError, barycentric,
                        build_structured_mesh, classify_interface_elements,
                        locate_point)


@pytest.fixture(scope="module")
def mesh32():
    return build_structured_mesh(32, 32)


def test_counts_32():
    m = build_structured_mesh(32, 32)
    assert m.num_nodes == 33 * 33 == 1089
    assert m.num_elements == 2 * 32 * 32 == 2048


def test_counts_1x1():
    m = build_structured_mesh(1, 1)
    assert m.num_nodes == 4
    assert m.num_elements == 2
    assert len(m.edges) == 5


def test_interior_patches_have_six_triangles(mesh32):
    interior = [i for i in range(mesh32.num_nodes)
                if i not in set(mesh32.boundary_nodes)]
    for i in interior:
        assert len(mesh32.node_patches[i]) == 6


def test_rejects_bad_cell_counts():
    with pytest.raises(MeshError):
        build_structured_mesh(0, 4)
    with pytest.raises(MeshError):
        build_structured_mesh(4, -1)
    with pytest.raises(MeshError):
        build_structured_mesh(4, 4, bounds=(0, 0, 0, 1))


def test_areas_positive_and_sum(mesh32):
    areas = mesh32.areas()
    assert (areas > 0).all()
    assert abs(areas.sum() - 1.0) < 1e-12


def test_conformity_edge_counts(mesh32):
    # each interior edge shared by exactly 2, each boundary edge by 1
    interior = ~mesh32.edge_boundary
    assert (mesh32.edge_elems[interior] >= 0).all()
    assert (mesh32.edge_elems[mesh32.edge_boundary, 1] == -1).all()
    # Euler: E = V + T - 1 for a simply connected planar triangulation
    assert len(mesh32.edges) == mesh32.num_nodes + mesh32.num_elements - 1


def test_conformity_reconstruction(mesh32):
    seen = {}
    for e in range(mesh32.num_elements):
        a, b, c = mesh32.triangles[e]
        for pair in ((a, b), (b, c), (a, c)):
            seen.setdefault((min(pair), max(pair)), []).append(e)
    rebuilt = np.array(sorted(seen.keys()))
    assert (rebuilt == mesh32.edges).all()


def test_node_patches_match_triangles(mesh32):
    for i in range(0, mesh32.num_nodes, 37):
        expect = {e for e in range(mesh32.num_elements)
                  if i in mesh32.triangles[e]}
        assert set(mesh32.node_patches[i]) == expect


def test_locate_centroid(mesh32):
    for e in (0, 17, 2047):
        c = mesh32.element_coords(e).mean(axis=0)
        assert locate_point(mesh32, c) == e


def test_locate_shared_vertex_lowest_id(mesh32):
    node = 17 * 33 + 11
    x = mesh32.nodes[node]
    found = locate_point(mesh32, x)
    assert found == min(mesh32.node_patches[node])


def test_locate_outside_raises(mesh32):
    with pytest.raises(MeshError):
        locate_point(mesh32, np.array([1.5, 0.5]))


def test_locate_random_points_brute_force():
    # DERIVED oracle: brute-force scan over all triangles
    mesh = build_structured_mesh(7, 5, bounds=(-0.3, 1.1, 0.2, 0.9))
    rng = np.random.default_rng(42)
    pts = np.column_stack([rng.uniform(-0.3, 1.1, 300),
                           rng.uniform(0.2, 0.9, 300)])
    for x in pts:
        e = locate_point(mesh, x)
        assert barycentric(mesh, e, x).min() >= -1e-12
        brute = [k for k in range(mesh.num_elements)
                 if barycentric(mesh, k, x).min() >= -1e-12]
        assert e in brute


def test_locate_many_random_containment(mesh32):
    rng = np.random.default_rng(1)
    pts = rng.uniform(0.0, 1.0, size=(10_000, 2))
    for x in pts:
        e = locate_point(mesh32, x)
        assert barycentric(mesh32, e, x).min() >= -1e-12


# ---------------------------------------------------------------------------
# interface classification
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def geom():
    return InterfaceGeometry(center=(0.0, 0.15), radius=0.5)


@pytest.fixture(scope="module")
def imesh():
    return build_structured_mesh(32, 32, bounds=(-1, 1, -1, 1))


def test_far_outside_element(imesh, geom):
    tags, _, _ = classify_interface_elements(imesh, geom)
    e = locate_point(imesh, np.array([-0.9, -0.9]))
    assert tags[e] == 0


def test_center_element_inside(imesh, geom):
    tags, _, _ = classify_interface_elements(imesh, geom)
    e = locate_point(imesh, np.array([0.0, 0.15]))
    assert tags[e] == 1


def _mc_cut_oracle(mesh, geom, n_samples=1_000_000, seed=0):
    """Monte-Carlo sign sampling per element, prefiltered by a distance bound."""
    rng = np.random.default_rng(seed)
    cut = np.zeros(mesh.num_elements, dtype=bool)
    for e in range(mesh.num_elements):
        p = mesh.element_coords(e)
        dv = np.linalg.norm(p - np.asarray(geom.center), axis=1)
        reach = mesh.h
        if dv.min() - reach > geom.radius or dv.max() + reach < geom.radius:
            continue
        u = rng.random((n_samples, 2))
        flip = u.sum(axis=1) > 1
        u[flip] = 1.0 - u[flip]
        pts = p[0] + u[:, :1] * (p[1] - p[0]) + u[:, 1:] * (p[2] - p[0])
        inside = geom.level_set(pts) < 0
        cut[e] = inside.any() and not inside.all()
    return cut


def test_cut_count_against_monte_carlo(imesh, geom):
    tags, cut_nodes, _ = classify_interface_elements(imesh, geom)
    oracle = _mc_cut_oracle(imesh, geom)
    assert (tags == 2).sum() == oracle.sum()
    assert ((tags == 2) == oracle).all()
    expect_nodes = sorted({int(v) for e in np.nonzero(oracle)[0]
                           for v in imesh.triangles[e]})
    assert cut_nodes == expect_nodes


def test_tangent_gridline_mesh_consistent():
    # nx=8 puts grid lines exactly tangent to the circle at x = +-0.5
    mesh = build_structured_mesh(8, 8, bounds=(-1, 1, -1, 1))
    geom = InterfaceGeometry(center=(0.0, 0.15), radius=0.5)
    tags, _, _ = classify_interface_elements(mesh, geom)
    oracle = _mc_cut_oracle(mesh, geom, n_samples=400_000)
    assert ((tags == 2) == oracle).all()


def test_snapped_vertex_diagnostic():
    mesh = build_structured_mesh(4, 4, bounds=(-1, 1, -1, 1))
    geom = InterfaceGeometry(center=(0.0, 0.0), radius=0.5)
    # node (0.5, 0) lies exactly on the circle
    _, _, diag = classify_interface_elements(mesh, geom)
    assert diag["snapped_vertices"] >= 2


def test_mesh_dump():
    mesh = build_structured_mesh(1, 1)
    buf = io.StringIO()
    mesh.dump_text(buf)
    text = buf.getvalue()
    assert "# nodes 4" in text and "# triangles 2" in text
