"""The enriched approximation space: P1 hats plus hat-localized,
interpolation-subtracted enrichment functions.

For an enriched node i with enrichment phi_i, the extra basis function is

    B_i = L_i (phi_i - I_h phi_i),

where L_i is the node's hat function and I_h the elementwise linear
interpolant of phi_i's vertex values.  B_i vanishes at every mesh node and
outside the patch of node i.  DoF numbering: P1 DoFs 0..N-1 over all mesh
nodes, then one enrichment DoF per enriched node in sorted node order.

Vertex values of each phi_i over its patch are cached; a version counter per
enrichment ties the cache to the parameter state.
"""

from dataclasses import dataclass, field

import numpy as np

from .mesh import barycentric
from .quadrature import map_rule, reference_rule


class SpaceError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class AnalyticEnrichment:
    """Enrichment defined by analytic callables, mainly for stubbing the
    network path in tests (e.g. a linear function that the interpolation
    subtraction must annihilate)."""

    def __init__(self, value_grad, laplacian=None):
        self._value_grad = value_grad
        self._laplacian = laplacian
        self.input_mode = "spatial"
        self.version = 0

    def eval_with_gradient(self, x, d=None):
        return self._value_grad(np.asarray(x, dtype=float))

    def eval_laplacian(self, x):
        if self._laplacian is None:
            raise SpaceError("stub enrichment has no Laplacian")
        return self._laplacian(np.asarray(x, dtype=float))


@dataclass
class EnrichmentSpace:
    mesh: object
    enriched_nodes: np.ndarray           # sorted node ids
    enrichments: list                    # one per enriched node
    distance_fn: object = None           # x -> (D, grad D), distance mode only
    node_rank: dict = field(default_factory=dict)
    nodal_cache: list = field(default_factory=list)   # per rank: {node: value}
    cache_versions: np.ndarray = None

    @property
    def num_p1_dofs(self):
        return self.mesh.num_nodes

    @property
    def num_enrichment_dofs(self):
        return len(self.enriched_nodes)

    @property
    def num_dofs(self):
        return self.num_p1_dofs + self.num_enrichment_dofs

    @property
    def input_mode(self):
        modes = {e.input_mode for e in self.enrichments}
        if len(modes) > 1:
            raise SpaceError(f"mixed enrichment input modes {modes}")
        return modes.pop() if modes else "spatial"

    def enrichment_dof(self, node):
        return self.num_p1_dofs + self.node_rank[node]

    def _net_input(self, enrichment, x):
        d = None
        if enrichment.input_mode == "spatial+distance":
            if self.distance_fn is None:
                raise SpaceError("distance-mode enrichment without a "
                                 "distance function")
            d = self.distance_fn(x)
        return d

    def refresh_cache(self):
        """Recompute phi_i vertex values over every patch; must be called
        after any parameter change before basis evaluation."""
        mesh = self.mesh
        for rank, node in enumerate(self.enriched_nodes):
            enr = self.enrichments[rank]
            values = {}
            for e in mesh.node_patches[node]:
                for v in mesh.triangles[e]:
                    v = int(v)
                    if v not in values:
                        x = mesh.nodes[v]
                        val, _ = enr.eval_with_gradient(
                            x, d=self._net_input(enr, x))
                        values[v] = val
            self.nodal_cache[rank] = values
            self.cache_versions[rank] = enr.version

    def _check_fresh(self, rank):
        if self.cache_versions[rank] != self.enrichments[rank].version:
            raise StaleCacheError(
                f"nodal cache stale for enrichment {rank}: cached version "
                f"{self.cache_versions[rank]}, parameters at "
                f"{self.enrichments[rank].version}")

    def element_enrichment_ranks(self, e):
        """(local vertex, enrichment rank) pairs active on element e."""
        out = []
        for s, v in enumerate(self.mesh.triangles[e]):
            r = self.node_rank.get(int(v))
            if r is not None:
                out.append((s, r))
        return out

    def eval_basis(self, e, x):
        """Values and gradients of all basis functions active on element e
        at physical point x.

        Returns (dofs, values, gradients) with the 3 vertex P1 functions
        first, then one entry per enriched vertex.
        """
        mesh = self.mesh
        tri = mesh.triangles[e]
        coords = mesh.nodes[tri]
        lam = barycentric(mesh, e, x)
        T = np.array([[coords[1, 0] - coords[0, 0], coords[2, 0] - coords[0, 0]],
                      [coords[1, 1] - coords[0, 1], coords[2, 1] - coords[0, 1]]])
        Tinv = np.linalg.inv(T)
        dlam = np.vstack([-Tinv.sum(axis=0), Tinv])  # (3, 2) rows: d lam_v

        dofs = [int(v) for v in tri]
        values = list(lam)
        grads = [dlam[0], dlam[1], dlam[2]]
        for s, rank in self.element_enrichment_ranks(e):
            self._check_fresh(rank)
            enr = self.enrichments[rank]
            val, grad = enr.eval_with_gradient(x, d=self._net_input(enr, x))
            cache = self.nodal_cache[rank]
            cv = np.array([cache[int(v)] for v in tri])
            ell = lam @ cv
            ell_grad = dlam.T @ cv
            diff = val - ell
            dofs.append(self.enrichment_dof(int(tri[s])))
            values.append(lam[s] * diff)
            grads.append(dlam[s] * diff + lam[s] * (grad - ell_grad))
        return np.array(dofs), np.array(values), np.array(grads)

    def eval_basis_laplacian(self, e, x):
        """Laplacians of the active basis functions at x (spatial mode).

        Uses the per-element identity
        Lap B_i = 2 grad L_i . (grad phi_i - grad ell_i) + L_i Lap phi_i,
        where ell_i is the element-local linear interpolant; P1 entries are 0.
        """
        if self.input_mode != "spatial":
            raise SpaceError("basis Laplacian unsupported in distance mode")
        mesh = self.mesh
        tri = mesh.triangles[e]
        coords = mesh.nodes[tri]
        lam = barycentric(mesh, e, x)
        T = np.array([[coords[1, 0] - coords[0, 0], coords[2, 0] - coords[0, 0]],
                      [coords[1, 1] - coords[0, 1], coords[2, 1] - coords[0, 1]]])
        Tinv = np.linalg.inv(T)
        dlam = np.vstack([-Tinv.sum(axis=0), Tinv])

        dofs = [int(v) for v in tri]
        laps = [0.0, 0.0, 0.0]
        for s, rank in self.element_enrichment_ranks(e):
            self._check_fresh(rank)
            enr = self.enrichments[rank]
            _, grad = enr.eval_with_gradient(x)
            lap_phi = enr.eval_laplacian(x)
            cache = self.nodal_cache[rank]
            cv = np.array([cache[int(v)] for v in tri])
            ell_grad = dlam.T @ cv
            dofs.append(self.enrichment_dof(int(tri[s])))
            laps.append(2.0 * dlam[s] @ (grad - ell_grad) + lam[s] * lap_phi)
        return np.array(dofs), np.array(laps)

    def gram_diagnostic(self, e, rule=None):
        """Smallest eigenvalue of the L2-normalized Gram matrix of the
        element's enrichment basis functions (1.0 for a single function,
        near 0 for linear dependence)."""
        active = self.element_enrichment_ranks(e)
        if not active:
            raise SpaceError(f"element {e} has no enrichment functions")
        rule = rule or reference_rule(20)
        pts, w = map_rule(rule, self.mesh.nodes[self.mesh.triangles[e]])
        vals = np.empty((len(active), len(w)))
        for q, x in enumerate(pts):
            _, bv, _ = self.eval_basis(e, x)
            vals[:, q] = bv[3:]
        G = (vals * w) @ vals.T
        norms = np.sqrt(np.diag(G))
        if norms.min() <= 0:
            return 0.0
        G = G / np.outer(norms, norms)
        return float(np.linalg.eigvalsh(G).min())


def build_space(mesh, enriched_nodes, enrichments, distance_fn=None):
    """Assemble the enriched space; one enrichment per node, caches filled."""
    enriched_nodes = np.asarray(sorted(int(n) for n in enriched_nodes),
                                dtype=np.int64)
    if len(set(enriched_nodes.tolist())) != len(enriched_nodes):
        raise SpaceError("duplicate enriched nodes")
    if (enriched_nodes < 0).any() or (enriched_nodes >= mesh.num_nodes).any():
        raise SpaceError("enriched node id out of range")
    if len(enrichments) != len(enriched_nodes):
        raise SpaceError(f"{len(enriched_nodes)} enriched nodes but "
                         f"{len(enrichments)} enrichment functions")
    space = EnrichmentSpace(
        mesh=mesh,
        enriched_nodes=enriched_nodes,
        enrichments=list(enrichments),
        distance_fn=distance_fn,
        node_rank={int(n): r for r, n in enumerate(enriched_nodes)},
        nodal_cache=[None] * len(enriched_nodes),
        cache_versions=np.full(len(enriched_nodes), -1, dtype=np.int64),
    )
    space.refresh_cache()
    return space
