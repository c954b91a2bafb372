"""SPD solves (sparse direct or Jacobi-preconditioned CG) and the scaled
condition number diagnostic."""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    pass


DIRECT_LIMIT = 200_000


@dataclass(frozen=True)
class SolverConfig:
    method: str = "auto"          # "direct" | "cg" | "auto"
    tolerance: float = 1e-10      # relative residual
    max_iterations: int = 50_000

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("solver tolerance must be positive")
        if self.method not in ("auto", "direct", "cg"):
            raise ValueError(f"unknown solver method {self.method!r}")


def solve_spd(A, F, config=SolverConfig()):
    """Solve the SPD system A c = F; the relative residual is verified
    against config.tolerance afterwards."""
    A = sp.csr_matrix(A)
    F = np.asarray(F, dtype=float)
    n = A.shape[0]
    if n == 0:
        return np.zeros(0)
    method = config.method
    if method == "auto":
        method = "direct" if n <= DIRECT_LIMIT else "cg"
    if method == "direct":
        try:
            lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc
        if (lu.U.diagonal() <= 0).any():
            raise SolverError("matrix is not positive definite")
        c = lu.solve(F)
    else:
        d = A.diagonal()
        if (d <= 0).any():
            raise SolverError("non-positive diagonal entry; cannot "
                              "Jacobi-precondition")
        M = sp.diags(1.0 / d)
        c, info = spla.cg(A, F, rtol=config.tolerance * 1e-2, atol=0.0,
                          maxiter=config.max_iterations, M=M)
        if info != 0:
            raise SolverError(f"CG failed to converge (info={info})")
    scale = max(float(np.linalg.norm(F)), 1e-300)
    resid = float(np.linalg.norm(A @ c - F)) / scale
    if resid > config.tolerance:
        raise SolverError(f"solution residual {resid:.2e} above tolerance "
                          f"{config.tolerance:.2e}")
    return c


DENSE_EIG_LIMIT = 4000


def scaled_condition_number(A):
    """kappa_2 of H = D A D with D = diag(A)^(-1/2): the standard diagnostic
    for linear independence of an enriched basis.  Dense eigensolve up to
    4000 DoFs, extremal Lanczos iterations beyond."""
    A = sp.csr_matrix(A)
    d = A.diagonal()
    if (d <= 0).any():
        raise SolverError("zero or negative diagonal entry")
    Dinv = sp.diags(1.0 / np.sqrt(d))
    H = Dinv @ A @ Dinv
    n = H.shape[0]
    if n == 1:
        return 1.0
    if n <= DENSE_EIG_LIMIT:
        eigs = scipy.linalg.eigvalsh(H.toarray())
        lmin, lmax = eigs[0], eigs[-1]
    else:
        H = H.tocsc()
        lmax = spla.eigsh(H, k=1, which="LA", tol=1e-6,
                          return_eigenvectors=False)[0]
        lmin = spla.eigsh(H, k=1, sigma=0.0, which="LM", tol=1e-6,
                          return_eigenvectors=False)[0]
    if lmin <= 0:
        raise SolverError(f"matrix not positive definite (lambda_min={lmin})")
    return float(lmax / lmin)
