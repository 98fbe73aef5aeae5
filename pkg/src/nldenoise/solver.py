"""Lower-level denoising solve: (diag(lambda) + diag(eta) - Gamma) u = lambda o f.

The unknowns are the interior pixels only; the padding ring is clamped to
zero (it still contributes to the row sums eta, which is what makes the
operator positive definite for positive fidelity weights).  The system is
symmetric, assembled in CSR form, diagonally preconditioned and solved with
an augmented restarted GMRES; a dense LU path is kept both as a testing
oracle and as a fallback for small systems.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SolverError",
    "SolveReport",
    "LowerLevelSystem",
    "build_system",
    "interior_indices",
    "assemble_operator",
    "diagonal_preconditioner",
    "solve_state",
    "solve_adjoint",
    "solve_dense",
]

_DENSE_FALLBACK_LIMIT = 20_000  # unknown count below which a failed Krylov solve retries densely


class SolverError(RuntimeError):
    """Raised when a linear solve cannot reach the requested residual."""


@dataclass(frozen=True)
class SolveReport:
    """Iteration count, final relative residual and wall time of one solve."""

    iterations: int
    residual: float
    wall_time: float
    converged: bool
    method: str


def interior_indices(grid_shape, pad):
    """Row-major indices of the interior pixels inside the padded grid."""
    hp, wp = grid_shape
    mask = np.zeros((hp, wp), dtype=bool)
    mask[pad : hp - pad, pad : wp - pad] = True
    return np.flatnonzero(mask.ravel())


@dataclass(frozen=True)
class LowerLevelSystem:
    """Assembled operator A = diag(lam) + 2*mu*(diag(eta) - Gamma) on the interior.

    ``lam`` is the per-pixel fidelity weight (scalar input is broadcast) and
    ``mu`` the diffusion constant; with the canonical mu = 1/2 the diffusion
    block is exactly diag(eta) - Gamma.
    """

    operator: sp.csr_matrix
    lam: np.ndarray
    mu: float
    interior: np.ndarray
    grid_shape: tuple

    @property
    def n(self):
        return self.operator.shape[0]

    def rhs_from(self, f_interior):
        """Fidelity right-hand side lambda o f for a state solve."""
        return self.lam * f_interior


def assemble_operator(kernel, lam, pad, mu=0.5):
    """Build the interior operator from a kernel matrix on the padded grid.

    Parameters
    ----------
    kernel : KernelMatrix
    lam : float or ndarray
        Fidelity weight, scalar or one value per interior pixel (>= 0).
    pad : int
        Padding width; defines which grid pixels are unknowns.
    mu : float
        Diffusion constant (default 1/2).

    Returns
    -------
    LowerLevelSystem
    """
    hp, wp = kernel.dissimilarity.grid_shape
    idx = interior_indices((hp, wp), pad)
    n = idx.size
    if np.ndim(lam) == 0:
        lam_vec = np.full(n, float(lam))
    else:
        lam_vec = np.asarray(lam, dtype=np.float64).ravel().copy()
        if lam_vec.size != n:
            raise ValueError(f"lambda has {lam_vec.size} entries for {n} unknowns")
    if np.any(lam_vec < 0):
        raise ValueError("fidelity weights must be non-negative")

    gamma_ii = kernel.matrix[idx, :][:, idx].tocsr()
    eta_i = kernel.row_sums[idx]
    scale = 2.0 * mu
    a = (-scale) * gamma_ii
    a = a + sp.diags(lam_vec + scale * eta_i, format="csr")
    a.sort_indices()
    return LowerLevelSystem(
        operator=a, lam=lam_vec, mu=float(mu), interior=idx, grid_shape=(hp, wp)
    )


def build_system(kernel, lam, image, mu=0.5):
    """Operator plus state right-hand side for a concrete noisy image."""
    system = assemble_operator(kernel, lam, image.pad, mu)
    return system, system.rhs_from(image.interior_vector())


def diagonal_preconditioner(matrix):
    """Diagonal scaling P_ii = (sum_j a_ij^2)^(-1/2).

    Applied symmetrically (PAP) the scaled system keeps the operator's
    symmetry; a zero row means the configuration is singular and is rejected.
    """
    sq = np.asarray(matrix.multiply(matrix).sum(axis=1)).ravel()
    if np.any(sq <= 0.0):
        raise SolverError("operator has an all-zero row; system is singular")
    return sq**-0.5


def _scaled_system(matrix, p):
    scaled = matrix.copy()
    row = np.repeat(p, np.diff(matrix.indptr))
    scaled.data = scaled.data * row * p[matrix.indices]
    return scaled


def solve_state(system, rhs, *, tol=1e-10, max_iter=2000, x0=None, method="lgmres"):
    """Solve A u = rhs to a relative residual of ``tol``.

    ``method`` is ``"lgmres"`` (augmented restarted GMRES, restart 30 with 3
    augmentation vectors), ``"cg"`` (the operator is symmetric positive
    definite for positive lambda) or ``"dense"``.  A non-converged Krylov
    solve falls back to the dense path for small systems and otherwise
    raises :class:`SolverError`.

    Returns
    -------
    (u, SolveReport)
    """
    a = system.operator
    b = np.asarray(rhs, dtype=np.float64).ravel()
    if b.size != a.shape[0]:
        raise ValueError("right-hand side size does not match the operator")
    start = time.perf_counter()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, time.perf_counter() - start, True, method)
    if method == "dense":
        u = np.linalg.solve(a.toarray(), b)
        res = float(np.linalg.norm(a @ u - b)) / bnorm
        return u, SolveReport(1, res, time.perf_counter() - start, True, "dense")

    p = diagonal_preconditioner(a)
    a_s = _scaled_system(a, p)
    b_s = p * b
    z0 = None if x0 is None else np.asarray(x0, dtype=np.float64).ravel() / p
    count = _IterationCounter()
    if method == "lgmres":
        z, info = spla.lgmres(
            a_s, b_s, x0=z0, rtol=tol * 1e-2, atol=0.0, maxiter=max_iter,
            inner_m=30, outer_k=3, callback=count,
        )
    elif method == "cg":
        z, info = spla.cg(
            a_s, b_s, x0=z0, rtol=tol * 1e-2, atol=0.0, maxiter=max_iter, callback=count,
        )
    else:
        raise ValueError(f"unknown solve method {method!r}")
    u = p * z
    res = float(np.linalg.norm(a @ u - b)) / bnorm
    elapsed = time.perf_counter() - start
    if res <= tol:
        return u, SolveReport(count.n, res, elapsed, True, method)
    if info == 0 and res <= tol * 10.0:
        # Converged on the scaled system but slightly off on the original;
        # accept only within a small factor, otherwise retry below.
        return u, SolveReport(count.n, res, elapsed, True, method)
    if a.shape[0] <= _DENSE_FALLBACK_LIMIT:
        u = np.linalg.solve(a.toarray(), b)
        res = float(np.linalg.norm(a @ u - b)) / bnorm
        return u, SolveReport(count.n, res, time.perf_counter() - start, True, "dense")
    raise SolverError(
        f"linear solve stalled: relative residual {res:.3e} after {count.n} iterations"
    )


def solve_adjoint(system, state, target, *, scale=1.0, **kwargs):
    """Adjoint solve A p = scale * (target - state); A is symmetric.

    ``scale`` carries the 1/|batch| factor of averaged training losses.
    """
    rhs = scale * (np.asarray(target, dtype=np.float64) - np.asarray(state, dtype=np.float64))
    return solve_state(system, rhs, **kwargs)


def solve_dense(system, rhs):
    """Dense LU oracle used by the tests."""
    return np.linalg.solve(system.operator.toarray(), np.asarray(rhs, dtype=np.float64))


class _IterationCounter:
    def __init__(self):
        self.n = 0

    def __call__(self, _xk):
        self.n += 1
