"""Residual-based a posteriori error indicators and marking strategies.

Per element K:

    eta_K^2 = h_K^2 || f + div(a grad u_h) ||_{L2(K)}^2
              + 1/2 sum_{l in interior edges of K} h_l || [a dn u_h] ||_{L2(l)}^2

with h_K the longest edge of K and h_l the edge length.  The strong-form
divergence uses grad a . grad u_h + a Lap u_h with the analytic coefficient
gradient; one-sided traces at edge quadrature points come from each adjacent
element's own basis restriction.
"""

from dataclasses import dataclass

import numpy as np

from .mesh import barycentric
from .network import MlpEnrichment
from .quadrature import edge_rule


class EstimatorError(ValueError):
    pass


@dataclass
class EstimatorField:
    eta_sq: np.ndarray        # (E,)
    interior_sq: np.ndarray   # (E,)
    edge_sq: np.ndarray       # (E,)

    @property
    def total_sq(self):
        return float(self.eta_sq.sum())

    @property
    def eta(self):
        return float(np.sqrt(self.eta_sq.sum()))

    def dump_csv(self, stream):
        stream.write("element,eta_sq,interior_sq,edge_sq\n")
        for e in range(self.eta_sq.shape[0]):
            stream.write(f"{e},{self.eta_sq[e]!r},{self.interior_sq[e]!r},"
                         f"{self.edge_sq[e]!r}\n")


def _solution_gradient_at(space, e, pts, cache):
    """Gradient of u_h restricted to element e at arbitrary physical points;
    cache carries (u_full, per-element data)."""
    u_full = cache["u_full"]
    mesh = space.mesh
    tri = mesh.triangles[e]
    dlam = cache["dlam"][e]
    grads = np.zeros((pts.shape[0], 2))
    grads += (u_full[tri] @ dlam)[None, :]
    for s, rank in space.element_enrichment_ranks(e):
        enr = space.enrichments[rank]
        dof = space.enrichment_dof(int(tri[s]))
        ce = u_full[dof]
        if ce == 0.0:
            continue
        X = pts - mesh.nodes[space.enriched_nodes[rank]]
        if isinstance(enr, MlpEnrichment):
            vals, g = enr.eval_batch(X)
        else:
            vals = np.empty(pts.shape[0])
            g = np.empty((pts.shape[0], 2))
            for q in range(pts.shape[0]):
                vals[q], g[q] = enr.eval_with_gradient(pts[q])
        cv = np.array([space.nodal_cache[rank][int(v)] for v in tri])
        lam = cache["lam_fn"](e, pts)
        ell = lam @ cv
        ell_grad = dlam.T @ cv
        diff = vals - ell
        grads += ce * (dlam[s][None, :] * diff[:, None]
                       + lam[:, s:s + 1] * (g - ell_grad[None, :]))
    return grads


def estimate(assembler, u_full, edge_order=25):
    """EstimatorField for the discrete solution u_full (all-DoF vector).

    Requires spatial input mode (interior residual needs the network
    Laplacian) and an analytic coefficient gradient.
    """
    space = assembler.space
    problem = assembler.problem
    eq = assembler.equad
    mesh = space.mesh
    if space.num_enrichment_dofs and space.input_mode != "spatial":
        raise EstimatorError("estimator requires spatial-mode enrichments")
    if problem.grad_coefficient is None:
        raise EstimatorError(f"{problem.name} supplies no coefficient "
                             "gradient")

    # interior residual: f + grad a . grad u_h + a Lap u_h
    vals, grads = assembler.solution_at_quadrature(u_full)
    grad_a = problem.grad_coefficient(eq.pts)
    resid = eq.f + np.einsum("qd,qd->q", grad_a, grads)
    lap_u = np.zeros(eq.pts.shape[0])
    arr = assembler.arrays
    for rank in range(space.num_enrichment_dofs):
        enr = space.enrichments[rank]
        node = int(space.enriched_nodes[rank])
        dof = space.num_p1_dofs + rank
        ce = u_full[dof]
        if ce == 0.0:
            continue
        anchor = mesh.nodes[node]
        for idx in range(arr.patch_ptr[rank], arr.patch_ptr[rank + 1]):
            K = arr.patch_elems[idx]
            s = arr.patch_slots[idx]
            lo, hi = eq.elem_ptr[K], eq.elem_ptr[K + 1]
            X = eq.pts[lo:hi] - anchor
            if isinstance(enr, MlpEnrichment):
                nv, ng, nl = enr.eval_batch_laplacian(X)
            else:
                nv = np.empty(hi - lo)
                ng = np.empty((hi - lo, 2))
                nl = np.empty(hi - lo)
                for q in range(hi - lo):
                    nv[q], ng[q] = enr.eval_with_gradient(eq.pts[lo + q])
                    nl[q] = enr.eval_laplacian(eq.pts[lo + q])
            tri = mesh.triangles[K]
            cv = np.array([space.nodal_cache[rank][int(v)] for v in tri])
            ell_grad = eq.dlam[K].T @ cv
            lap_b = (2.0 * (ng - ell_grad[None, :]) @ eq.dlam[K, s]
                     + eq.lam[lo:hi, s] * nl)
            lap_u[lo:hi] += ce * lap_b
    resid += eq.a * lap_u
    counts = np.diff(eq.elem_ptr)
    interior_int = np.zeros(mesh.num_elements)
    np.add.at(interior_int, np.repeat(np.arange(mesh.num_elements), counts),
              eq.w * resid * resid)
    hk = mesh.longest_edges()
    interior_sq = hk ** 2 * interior_int

    # edge jumps
    cache = {"u_full": u_full, "dlam": eq.dlam,
             "lam_fn": lambda e, pts: np.array(
                 [barycentric(mesh, e, p) for p in pts])}
    edge_sq = np.zeros(mesh.num_elements)
    interior_edges = np.nonzero(~mesh.edge_boundary)[0]
    for l in interior_edges:
        n0, n1 = mesh.edges[l]
        p0, p1 = mesh.nodes[n0], mesh.nodes[n1]
        pts, w = edge_rule(edge_order, p0, p1)
        t = p1 - p0
        length = np.linalg.norm(t)
        normal = np.array([t[1], -t[0]]) / length
        e_plus, e_minus = mesh.edge_elems[l]
        g_plus = _solution_gradient_at(space, e_plus, pts, cache)
        g_minus = _solution_gradient_at(space, e_minus, pts, cache)
        a_edge = problem.coefficient(pts, np.zeros(pts.shape[0],
                                                   dtype=np.int8))
        jump = a_edge * ((g_plus - g_minus) @ normal)
        contrib = 0.5 * length * float(np.sum(w * jump * jump))
        edge_sq[e_plus] += contrib
        edge_sq[e_minus] += contrib

    eta_sq = interior_sq + edge_sq
    return EstimatorField(eta_sq=eta_sq, interior_sq=interior_sq,
                          edge_sq=edge_sq)


# ---------------------------------------------------------------------------
# marking
# ---------------------------------------------------------------------------

def _descending_order(eta_sq, ids=None):
    if ids is None:
        ids = np.arange(eta_sq.shape[0])
    ids = np.asarray(ids, dtype=np.int64)
    order = np.lexsort((ids, -eta_sq[ids]))
    return ids[order]


def percentage_mark(field, alpha1):
    """The ceil(alpha1 * E) elements of largest eta_K^2, ties broken by
    element id."""
    if not (0.0 < alpha1 <= 1.0):
        raise EstimatorError(f"alpha1={alpha1} outside (0, 1]")
    E = field.eta_sq.shape[0]
    count = int(np.ceil(alpha1 * E))
    return np.sort(_descending_order(field.eta_sq)[:count])


def doerfler_mark(field, alpha2, candidates=None):
    """Minimal-cardinality set with sum eta_K^2 >= alpha2 * total (greedy
    descending prefix; provably minimal).  With a candidate subset, the
    threshold still refers to the total over all elements; if unreachable,
    all candidates are returned and the flag is False.

    Returns (sorted element ids, threshold_reached).
    """
    if not (0.0 < alpha2 < 1.0):
        raise EstimatorError(f"alpha2={alpha2} outside (0, 1)")
    threshold = alpha2 * field.total_sq
    order = _descending_order(field.eta_sq, candidates)
    csum = np.cumsum(field.eta_sq[order])
    reached = csum >= threshold * (1.0 - 1e-13)
    if not reached.any():
        return np.sort(order), False
    k = int(np.argmax(reached))
    return np.sort(order[:k + 1]), True
