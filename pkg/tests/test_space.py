import numpy as np
import pytest

from nefem.mesh import barycentric, build_structured_mesh
from nefem.network import SPATIAL, init_network
from nefem.space import (AnalyticEnrichment, EnrichmentSpace, SpaceError,
                         StaleCacheError, build_space)


def interior_nodes(mesh):
    bnd = set(mesh.boundary_nodes.tolist())
    return [i for i in range(mesh.num_nodes) if i not in bnd]


def nets_for(mesh, nodes, seed0=0, scales=(3, 2)):
    return [init_network((2, 20, 20, 1), scales, SPATIAL, mesh.nodes[n],
                         seed0 + k) for k, n in enumerate(nodes)]


@pytest.fixture(scope="module")
def small_space():
    mesh = build_structured_mesh(4, 4)
    nodes = interior_nodes(mesh)[:3]
    return build_space(mesh, nodes, nets_for(mesh, nodes))


def test_pure_p1_space():
    mesh = build_structured_mesh(4, 4)
    space = build_space(mesh, [], [])
    assert space.num_dofs == mesh.num_nodes
    assert space.num_enrichment_dofs == 0


def test_dof_count_32x32_all_interior():
    mesh = build_structured_mesh(32, 32)
    nodes = interior_nodes(mesh)
    assert len(nodes) == 961
    nets = nets_for(mesh, nodes)
    space = build_space(mesh, nodes, nets)
    assert space.num_dofs == 1089 + 961 == 2050


def test_duplicate_enriched_nodes_rejected():
    mesh = build_structured_mesh(2, 2)
    with pytest.raises(SpaceError):
        build_space(mesh, [4, 4], nets_for(mesh, [4, 4]))


def test_partition_of_unity(small_space):
    # P1 values sum to 1, gradients to 0, at random interior points
    mesh = small_space.mesh
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.uniform(0.01, 0.99, 2)
        from nefem.mesh import locate_point
        e = locate_point(mesh, x)
        _, vals, grads = small_space.eval_basis(e, x)
        assert abs(vals[:3].sum() - 1.0) < 1e-12
        assert np.abs(grads[:3].sum(axis=0)).max() < 1e-10


def test_enrichment_vanishes_at_all_nodes(small_space):
    mesh = small_space.mesh
    for node in range(mesh.num_nodes):
        e = mesh.node_patches[node][0]
        x = mesh.nodes[node]
        _, vals, _ = small_space.eval_basis(e, x)
        assert np.abs(vals[3:]).max() < 1e-12 if len(vals) > 3 else True


def test_compact_support(small_space):
    # basis of enriched node vanishes outside its patch
    mesh = small_space.mesh
    node = int(small_space.enriched_nodes[0])
    dof = small_space.enrichment_dof(node)
    patch = set(mesh.node_patches[node])
    outside = [e for e in range(mesh.num_elements) if e not in patch]
    rng = np.random.default_rng(1)
    for e in outside[:10]:
        coords = mesh.element_coords(e)
        lam = rng.dirichlet((1, 1, 1))
        x = lam @ coords
        dofs, vals, _ = small_space.eval_basis(e, x)
        assert dof not in dofs.tolist()


def test_linear_stub_annihilated():
    # a linear enrichment is reproduced by its interpolant: B = 0
    mesh = build_structured_mesh(4, 4)
    nodes = interior_nodes(mesh)[:2]
    stub = lambda x: (x[0], np.array([1.0, 0.0]))
    enr = [AnalyticEnrichment(stub), AnalyticEnrichment(stub)]
    space = build_space(mesh, nodes, enr)
    rng = np.random.default_rng(2)
    for node in nodes:
        for e in mesh.node_patches[node]:
            coords = mesh.element_coords(e)
            for _ in range(5):
                lam = rng.dirichlet((1, 1, 1))
                x = lam @ coords
                _, vals, grads = space.eval_basis(e, x)
                assert np.abs(vals[3:]).max() < 1e-10
                assert np.abs(grads[3:]).max() < 1e-10


def test_basis_gradient_matches_fd(small_space):
    mesh = small_space.mesh
    node = int(small_space.enriched_nodes[1])
    e = mesh.node_patches[node][2]
    coords = mesh.element_coords(e)
    x = coords.mean(axis=0)
    _, vals, grads = small_space.eval_basis(e, x)
    h = 1e-6
    for j in range(2):
        dx = np.zeros(2)
        dx[j] = h
        _, vp, _ = small_space.eval_basis(e, x + dx)
        _, vm, _ = small_space.eval_basis(e, x - dx)
        fd = (vp - vm) / (2 * h)
        assert np.abs(grads[:, j] - fd).max() < 1e-6


def test_stale_cache_detected(small_space):
    mesh = small_space.mesh
    node = int(small_space.enriched_nodes[0])
    e = mesh.node_patches[node][0]
    x = mesh.element_coords(e).mean(axis=0)
    small_space.enrichments[0].bump_version()
    with pytest.raises(StaleCacheError):
        small_space.eval_basis(e, x)
    small_space.refresh_cache()
    small_space.eval_basis(e, x)


# ---------------------------------------------------------------------------
# Laplacian
# ---------------------------------------------------------------------------

def test_basis_laplacian_zero_net():
    mesh = build_structured_mesh(4, 4)
    nodes = interior_nodes(mesh)[:1]
    nets = nets_for(mesh, nodes)
    nets[0].set_params(np.zeros_like(nets[0].params))
    space = build_space(mesh, nodes, nets)
    e = mesh.node_patches[nodes[0]][0]
    x = mesh.element_coords(e).mean(axis=0)
    _, laps = space.eval_basis_laplacian(e, x)
    assert np.abs(laps).max() == 0.0


def test_basis_laplacian_quadratic_stub():
    # phi = x^2: on an element, Lap B = 2 dL.(grad phi - grad ell) + L * 2
    mesh = build_structured_mesh(2, 2)
    node = 4  # center node of the 3x3 grid
    stub = AnalyticEnrichment(lambda x: (x[0] ** 2, np.array([2 * x[0], 0.0])),
                              laplacian=lambda x: 2.0)
    space = build_space(mesh, [node], [stub])
    e = mesh.node_patches[node][0]
    coords = mesh.element_coords(e)
    tri = mesh.triangles[e]
    x = coords.mean(axis=0)
    dofs, laps = space.eval_basis_laplacian(e, x)
    lam = barycentric(mesh, e, x)
    T = np.array([[coords[1, 0] - coords[0, 0], coords[2, 0] - coords[0, 0]],
                  [coords[1, 1] - coords[0, 1], coords[2, 1] - coords[0, 1]]])
    Tinv = np.linalg.inv(T)
    dlam = np.vstack([-Tinv.sum(axis=0), Tinv])
    s = list(tri).index(node)
    cv = coords[:, 0] ** 2
    ell_grad = dlam.T @ cv
    expect = 2.0 * dlam[s] @ (np.array([2 * x[0], 0.0]) - ell_grad) + lam[s] * 2.0
    assert abs(laps[3] - expect) < 1e-12


def test_basis_laplacian_matches_fd(small_space):
    mesh = small_space.mesh
    node = int(small_space.enriched_nodes[2])
    e = mesh.node_patches[node][3]
    coords = mesh.element_coords(e)
    x = 0.5 * coords.mean(axis=0) + 0.5 * coords[0]
    dofs, laps = small_space.eval_basis_laplacian(e, x)
    h = 1e-4
    cols = {}
    for (dx, dy) in ((0, 0), (h, 0), (-h, 0), (0, h), (0, -h)):
        _, vals, _ = small_space.eval_basis(e, x + np.array([dx, dy]))
        cols[(dx, dy)] = vals
    fd = (cols[(h, 0)] + cols[(-h, 0)] + cols[(0, h)] + cols[(0, -h)]
          - 4 * cols[(0, 0)]) / h ** 2
    scale = max(1.0, np.abs(fd[3:]).max())
    assert np.abs(laps[3:] - fd[3:]).max() <= 1e-4 * scale


# ---------------------------------------------------------------------------
# Gram diagnostic
# ---------------------------------------------------------------------------

def test_gram_single_function_is_one():
    mesh = build_structured_mesh(4, 4)
    nodes = interior_nodes(mesh)[:1]
    space = build_space(mesh, nodes, nets_for(mesh, nodes))
    e = mesh.node_patches[nodes[0]][0]
    assert abs(space.gram_diagnostic(e) - 1.0) < 1e-12


def test_gram_degenerate_pair():
    # two enrichments engineered to give identical basis functions on the
    # element: B_i = B_j = L0 L1 L2 (hat-product stubs)
    mesh = build_structured_mesh(2, 2)
    e = 0
    tri = mesh.triangles[e]

    def hat_product(skip_local):
        def fn(x):
            lam = barycentric(mesh, e, x)
            coords = mesh.element_coords(e)
            T = np.array([[coords[1, 0] - coords[0, 0], coords[2, 0] - coords[0, 0]],
                          [coords[1, 1] - coords[0, 1], coords[2, 1] - coords[0, 1]]])
            Tinv = np.linalg.inv(T)
            dlam = np.vstack([-Tinv.sum(axis=0), Tinv])
            others = [k for k in range(3) if k != skip_local]
            val = lam[others[0]] * lam[others[1]]
            grad = dlam[others[0]] * lam[others[1]] + dlam[others[1]] * lam[others[0]]
            return val, grad
        return fn

    nodes = sorted(int(v) for v in tri[:2])
    locals_ = [list(tri).index(n) for n in nodes]
    enr = [AnalyticEnrichment(hat_product(l)) for l in locals_]
    space = build_space(mesh, nodes, enr)
    lam_min = space.gram_diagnostic(e)
    assert lam_min < 1e-8


def test_gram_random_matches_dense_oracle():
    mesh = build_structured_mesh(2, 2)
    node_candidates = [4]
    e = mesh.node_patches[4][0]
    tri = [int(v) for v in mesh.triangles[e]]
    nets = nets_for(mesh, tri, seed0=11)
    space = build_space(mesh, sorted(tri), nets)
    got = space.gram_diagnostic(e)
    # dense oracle: scipy eigensolver on the same integrals
    from nefem.quadrature import map_rule, reference_rule
    import scipy.linalg
    rule = reference_rule(20)
    pts, w = map_rule(rule, mesh.element_coords(e))
    vals = []
    for x in pts:
        _, bv, _ = space.eval_basis(e, x)
        vals.append(bv[3:])
    vals = np.array(vals).T
    G = (vals * w) @ vals.T
    d = np.sqrt(np.diag(G))
    G = G / np.outer(d, d)
    oracle = scipy.linalg.eigh(G, eigvals_only=True).min()
    assert abs(got - oracle) < 1e-10
