"""Reduced gradients of the training loss via state/adjoint solves.

Each evaluator solves the lower-level denoising system for ``u``, the
adjoint system (same symmetric operator) for ``p``, and combines the two:

* scalar fidelity weight:      dj/dlam   = sum_i (u_i - f_i) p_i
* spatial fidelity weight:     nodal F   = quarter-spread((u - f) o p)
                                           + beta (A + B) lam,
                               returned as the H1-Riesz representative
                               y = (A + B)^{-1} F on the corner nodes;
* kernel weight:               dj/dw     = p . (diag(eta_hat) - Gamma_hat) u
                               with the entrywise kernel derivative
                               gamma_hat = -D o gamma;
* batches: the mean of per-image losses, gradients summed with the 1/|I|
  factor carried by the adjoint right-hand side.

Weight evaluations always re-weight a reference kernel whose mask was frozen
at a small reference weight, so the reduced functional stays smooth in w.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import build_fe_matrices, corner_spread, element_average
from .kernel import linearized_kernel, reweight
from .solver import assemble_operator, solve_adjoint, solve_state

__all__ = [
    "ReducedGradient",
    "WarmStart",
    "denoise_image",
    "scalar_fidelity_gradient",
    "batch_fidelity_gradient",
    "spatial_fidelity_gradient",
    "kernel_weight_gradient",
    "batch_objective",
    "spatial_objective",
    "weight_objective",
    "loss_surface",
]


@dataclass(frozen=True)
class ReducedGradient:
    """Gradient value, objective at the evaluation point, and solve reports."""

    value: object  # float for scalar parameters, ndarray for fields
    objective: float
    diagnostics: dict


class WarmStart:
    """Per-image cache of the latest state/adjoint solutions.

    Passing one instance through repeated evaluations of the same training
    problem lets the Krylov solves start from the previous iterate.
    """

    def __init__(self):
        self.state = {}
        self.adjoint = {}


def _warm(cache, table, key):
    if cache is None:
        return None
    return getattr(cache, table).get(key)


def _store(cache, table, key, value):
    if cache is not None:
        getattr(cache, table)[key] = value


def denoise_image(noisy, kernel, lam, *, mu=0.5, tol=1e-10, method="lgmres"):
    """Solve the lower-level problem and return the denoised image."""
    system = assemble_operator(kernel, lam, noisy.pad, mu)
    u, report = solve_state(
        system, system.rhs_from(noisy.interior_vector()), tol=tol, method=method
    )
    return noisy.with_interior(u.reshape(noisy.height, noisy.width)), report


def _half_sq(vec):
    return 0.5 * float(np.dot(vec, vec))


def batch_fidelity_gradient(pairs, kernels, lam, *, mu=0.5, tol=1e-10,
                            method="lgmres", warm=None):
    """Reduced gradient of the averaged loss over ``(noisy, truth)`` pairs.

    The objective is (1/(2|I|)) sum_i ||u_i - truth_i||^2; each adjoint
    right-hand side carries the 1/|I| factor so the per-image terms
    (u_i - f_i) . p_i sum directly to the gradient.
    """
    n_img = len(pairs)
    if n_img == 0:
        raise ValueError("empty training batch")
    if len(kernels) != n_img:
        raise ValueError("one kernel per training pair is required")
    scale = 1.0 / n_img
    grad = 0.0
    sq_sum = 0.0
    reports = []
    for i, (noisy, truth) in enumerate(pairs):
        system = assemble_operator(kernels[i], lam, noisy.pad, mu)
        f = noisy.interior_vector()
        u, rep_u = solve_state(
            system, system.rhs_from(f), tol=tol, method=method,
            x0=_warm(warm, "state", i),
        )
        _store(warm, "state", i, u)
        p, rep_p = solve_adjoint(
            system, u, truth.interior_vector(), scale=scale, tol=tol,
            method=method, x0=_warm(warm, "adjoint", i),
        )
        _store(warm, "adjoint", i, p)
        grad += float(np.dot(u - f, p))
        diff = u - truth.interior_vector()
        sq_sum += float(np.dot(diff, diff))
        reports.append({"state": rep_u, "adjoint": rep_p})
    objective = (0.5 / n_img) * sq_sum
    return ReducedGradient(value=grad, objective=objective,
                           diagnostics={"images": reports, "batch_size": n_img})


def scalar_fidelity_gradient(noisy, truth, kernel, lam, **kwargs):
    """Single-image scalar gradient; a batch of one with scale exactly 1."""
    return batch_fidelity_gradient([(noisy, truth)], [kernel], lam, **kwargs)


def batch_objective(pairs, kernels, lam, *, mu=0.5, tol=1e-10, method="lgmres",
                    warm=None):
    """Averaged loss only (state solves, no adjoints); used by line probes."""
    sq_sum = 0.0
    for i, (noisy, truth) in enumerate(pairs):
        system = assemble_operator(kernels[i], lam, noisy.pad, mu)
        u, _ = solve_state(
            system, system.rhs_from(noisy.interior_vector()), tol=tol,
            method=method, x0=_warm(warm, "state", i),
        )
        _store(warm, "state", i, u)
        diff = u - truth.interior_vector()
        sq_sum += float(np.dot(diff, diff))
    return (0.5 / len(pairs)) * sq_sum


def spatial_fidelity_gradient(noisy, truth, kernel, lam_nodes, beta, *,
                              fe=None, mu=0.5, tol=1e-10, method="lgmres",
                              warm=None):
    """H1-Riesz gradient for a corner-node fidelity field.

    ``lam_nodes`` has shape (h+1, w+1); the state equation sees its
    element average.  The objective includes the Tikhonov term
    (beta/2) ||lam||_H1^2, and the returned nodal field ``y`` solves
    (A + B) y = F with the full derivative F, so that the directional
    derivative along a nodal direction h equals the H1 product (y, h).
    """
    h, w = noisy.height, noisy.width
    lam_nodes = np.asarray(lam_nodes, dtype=np.float64).reshape(h + 1, w + 1)
    if fe is None:
        fe = build_fe_matrices(h, w)
    lam_elems = element_average(lam_nodes).ravel()
    system = assemble_operator(kernel, lam_elems, noisy.pad, mu)
    f = noisy.interior_vector()
    u, rep_u = solve_state(system, system.rhs_from(f), tol=tol, method=method,
                           x0=_warm(warm, "state", 0))
    _store(warm, "state", 0, u)
    p, rep_p = solve_adjoint(system, u, truth.interior_vector(), tol=tol,
                             method=method, x0=_warm(warm, "adjoint", 0))
    _store(warm, "adjoint", 0, p)

    lam_flat = lam_nodes.ravel()
    h1_grad = (fe.stiffness + fe.mass) @ lam_flat
    resid = ((u - f) * p).reshape(h, w)
    force = corner_spread(resid).ravel() + beta * h1_grad
    y = fe.riesz_solve(force)

    diff = u - truth.interior_vector()
    objective = _half_sq(diff) + 0.5 * beta * float(lam_flat @ h1_grad)
    return ReducedGradient(
        value=y.reshape(h + 1, w + 1),
        objective=objective,
        diagnostics={"state": rep_u, "adjoint": rep_p, "force": force, "fe": fe},
    )


def spatial_objective(noisy, truth, kernel, lam_nodes, beta, *, fe=None,
                      mu=0.5, tol=1e-10, method="lgmres", warm=None):
    """Loss + Tikhonov term for a nodal fidelity field (state solve only)."""
    h, w = noisy.height, noisy.width
    lam_nodes = np.asarray(lam_nodes, dtype=np.float64).reshape(h + 1, w + 1)
    if fe is None:
        fe = build_fe_matrices(h, w)
    lam_elems = element_average(lam_nodes).ravel()
    system = assemble_operator(kernel, lam_elems, noisy.pad, mu)
    u, _ = solve_state(system, system.rhs_from(noisy.interior_vector()),
                       tol=tol, method=method, x0=_warm(warm, "state", 0))
    _store(warm, "state", 0, u)
    diff = u - truth.interior_vector()
    return _half_sq(diff) + 0.5 * beta * fe.h1_norm_sq(lam_nodes.ravel())


def kernel_weight_gradient(noisy, truth, reference_kernel, weight, lam, *,
                           kappa=None, mu=0.5, tol=1e-10, method="lgmres",
                           warm=None):
    """Reduced derivative of the loss in the kernel weight w.

    The kernel at ``weight`` is obtained by re-weighting
    ``reference_kernel`` (frozen mask), the state/adjoint pair is solved,
    and the derivative of the operator in w is applied through the
    linearized kernel:  j'(w) = 2*mu * p . (diag(eta_hat) - Gamma_hat) u.
    With ``kappa`` the derivative is chained to the scaled variable
    s = w / kappa, i.e. multiplied by kappa.
    """
    kern = reweight(reference_kernel, weight)
    system = assemble_operator(kern, lam, noisy.pad, mu)
    f = noisy.interior_vector()
    u, rep_u = solve_state(system, system.rhs_from(f), tol=tol, method=method,
                           x0=_warm(warm, "state", 0))
    _store(warm, "state", 0, u)
    p, rep_p = solve_adjoint(system, u, truth.interior_vector(), tol=tol,
                             method=method, x0=_warm(warm, "adjoint", 0))
    _store(warm, "adjoint", 0, p)

    lin = linearized_kernel(kern)
    idx = system.interior
    ghat_ii = lin.matrix[idx, :][:, idx]
    au = lin.row_sums[idx] * u - ghat_ii @ u
    value = 2.0 * mu * float(np.dot(p, au))
    if kappa is not None:
        value *= kappa
    diff = u - truth.interior_vector()
    return ReducedGradient(
        value=value,
        objective=_half_sq(diff),
        diagnostics={"state": rep_u, "adjoint": rep_p, "weight": weight},
    )


def weight_objective(noisy, truth, reference_kernel, weight, lam, *, mu=0.5,
                     tol=1e-10, method="lgmres", warm=None):
    """Loss at a given kernel weight (state solve only)."""
    kern = reweight(reference_kernel, weight)
    system = assemble_operator(kern, lam, noisy.pad, mu)
    u, _ = solve_state(system, system.rhs_from(noisy.interior_vector()),
                       tol=tol, method=method, x0=_warm(warm, "state", 0))
    _store(warm, "state", 0, u)
    diff = u - truth.interior_vector()
    return _half_sq(diff)


def loss_surface(noisy, truth, reference_kernel, lambdas, weights, *, mu=0.5,
                 tol=1e-10, method="lgmres"):
    """Training loss on a (weight, lambda) grid.

    Returns an array of shape (len(weights), len(lambdas)); every weight row
    re-weights the reference kernel once and sweeps the fidelity values.
    """
    out = np.empty((len(weights), len(lambdas)))
    truth_vec = truth.interior_vector()
    f = noisy.interior_vector()
    for iw, w in enumerate(weights):
        kern = reweight(reference_kernel, w)
        u_prev = None
        for il, lam in enumerate(lambdas):
            system = assemble_operator(kern, lam, noisy.pad, mu)
            u, _ = solve_state(system, system.rhs_from(f), tol=tol,
                               method=method, x0=u_prev)
            u_prev = u
            diff = u - truth_vec
            out[iw, il] = _half_sq(diff)
    return out
