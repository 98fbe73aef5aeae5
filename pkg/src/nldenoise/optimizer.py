"""Projected trust-region minimisation over a box, with L-BFGS curvature.

The method keeps a limited-memory BFGS model of the Hessian in compact form
(B = theta*I - W M^-1 W^T) and, per iteration:

1. predicts the active bounds from proximity (margin xi = min(beta, c*|g|)),
   steps those components onto their bound (clipped to the radius);
2. solves the trust-region subproblem on the free components with truncated
   conjugate gradients on the quasi-Newton model;
3. forms a projected-gradient direction scaled by the current radius;
4. picks the best convex blend of the two directions by a short
   golden-section scan of the true objective;
5. applies the classical accept/shrink/expand radius update on the model
   decrease ratio, with Powell damping of every curvature pair before it
   enters the memory.

Two safeguards from the restart policy keep long runs alive: a collapsed
radius is reset to its initial value as long as the run is still making
progress, and a curvature pair with no usable information wipes the memory.
Termination is on the projected-gradient residual |P(x - g) - x|_inf.
"""

from __future__ import annotations

import csv
import enum
import time
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "OptimizerError",
    "Box",
    "LbfgsMemory",
    "TrustRegionConfig",
    "TrustRegionState",
    "TrustRegionResult",
    "IterationRecord",
    "RestartAction",
    "restart_policy",
    "minimize",
    "write_trace",
]


class OptimizerError(RuntimeError):
    """Raised on non-finite callback values or malformed configuration."""


class Box:
    """Bound constraints l <= x <= u with projection helpers."""

    def __init__(self, lower, upper, n=None):
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        if n is not None:
            lower = np.broadcast_to(lower, (n,)).copy()
            upper = np.broadcast_to(upper, (n,)).copy()
        if lower.shape != upper.shape:
            raise OptimizerError("box bound shapes differ")
        if np.any(lower > upper):
            raise OptimizerError("box is empty: lower > upper somewhere")
        self.lower = lower
        self.upper = upper

    def project(self, x):
        return np.minimum(np.maximum(x, self.lower), self.upper)

    def residual(self, x, g):
        """Projected-gradient stationarity residual |P(x - g) - x|_inf."""
        return float(np.max(np.abs(self.project(x - g) - x)))

    def min_width(self):
        w = self.upper - self.lower
        finite = w[np.isfinite(w)]
        return float(finite.min()) if finite.size else np.inf


class LbfgsMemory:
    """Compact-form limited-memory BFGS Hessian approximation.

    Stores up to ``m`` curvature pairs (s, y) with s'y > 0 and applies
    B v = theta*v - W (M \\ (W' v)) with W = [Y, theta*S] and
    M = [[-D, L'], [L, theta*S'S]].  The scalar ``theta`` is refreshed from
    the stored history after every update (aggregated secant scaling), which
    keeps the model well sized across changes of local curvature.
    """

    def __init__(self, m=10):
        self.m = int(m)
        self.s = []
        self.y = []
        self.theta = 1.0

    def __len__(self):
        return len(self.s)

    def clear(self):
        self.s.clear()
        self.y.clear()
        self.theta = 1.0

    def push(self, s, y):
        self.s.append(np.array(s, dtype=np.float64))
        self.y.append(np.array(y, dtype=np.float64))
        if len(self.s) > self.m:
            self.s.pop(0)
            self.y.pop(0)
        yy = sum(float(np.dot(v, v)) for v in self.y)
        sy = sum(float(np.dot(a, b)) for a, b in zip(self.s, self.y))
        if sy > 0 and np.isfinite(yy / sy):
            self.theta = min(max(yy / sy, 1e-10), 1e10)

    def matvec(self, v):
        """Model Hessian action B v."""
        v = np.asarray(v, dtype=np.float64)
        if not self.s:
            return self.theta * v
        s_mat = np.stack(self.s, axis=1)
        y_mat = np.stack(self.y, axis=1)
        k = s_mat.shape[1]
        sy = s_mat.T @ y_mat
        mid = np.zeros((2 * k, 2 * k))
        mid[:k, :k] = -np.diag(np.diag(sy))
        lower = np.tril(sy, -1)
        mid[:k, k:] = lower.T
        mid[k:, :k] = lower
        mid[k:, k:] = self.theta * (s_mat.T @ s_mat)
        w_t_v = np.concatenate([y_mat.T @ v, self.theta * (s_mat.T @ v)])
        try:
            coeff = np.linalg.solve(mid, w_t_v)
        except np.linalg.LinAlgError:
            return self.theta * v
        return self.theta * v - (y_mat @ coeff[:k] + self.theta * (s_mat @ coeff[k:]))


@dataclass
class TrustRegionConfig:
    """Tuning constants of the projected trust-region method."""

    delta0: float = 1.0
    delta_max: float = 1e3
    delta_min: float = 1e-12
    shrink: float = 0.25
    grow: float = 2.0
    accept_ratio: float = 0.25
    expand_ratio: float = 0.75
    memory: int = 10
    powell: float = 0.2
    active_scale: float = 1e-2
    tol: float = 1e-8
    max_iter: int = 100
    restarts: int = 5
    curvature_tol: float = 1e-12
    blend_evals: int = 10
    omega: float = None  # PG scaling cap; defaults to delta_max


@dataclass
class TrustRegionState:
    """Mutable per-run bookkeeping, exposed to the restart policy."""

    x: np.ndarray
    objective: float
    gradient: np.ndarray
    radius: float
    beta: float
    iteration: int = 0
    restarts_used: int = 0
    max_restarts: int = 5
    descent_since_restart: bool = False
    accepted_steps: int = 0


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    pg_norm: float
    radius: float
    step_type: str
    wall_time: float


@dataclass(frozen=True)
class TrustRegionResult:
    x: np.ndarray
    objective: float
    gradient: np.ndarray
    residual: float
    iterations: int
    status: str
    trace: list
    iterates: list
    restarts_used: int
    fun_evals: int
    grad_evals: int

    @property
    def converged(self):
        return self.status == "converged"


class RestartAction(enum.Enum):
    NONE = "none"
    RESET_RADIUS = "reset_radius"
    WIPE_MEMORY = "wipe_memory"


def restart_policy(state, config, pair=None):
    """Decide the safeguard action after a collapse or a memory update.

    With ``pair=(s, y)`` given, checks the curvature of a candidate
    correction pair: a value of s'y at or below ``curvature_tol * |s||y|``
    carries no usable information and the memory is wiped.  Without a pair,
    checks the radius: once it falls below ``delta_min`` the radius is reset
    to ``delta0``, provided some accepted step has decreased the objective
    since the last restart and the restart budget is not exhausted.
    """
    if pair is not None:
        s, y = pair
        gate = config.curvature_tol * float(np.linalg.norm(s)) * float(np.linalg.norm(y))
        if float(np.dot(s, y)) <= gate:
            return RestartAction.WIPE_MEMORY
        return RestartAction.NONE
    if state.radius < config.delta_min:
        if state.descent_since_restart and state.restarts_used < state.max_restarts:
            return RestartAction.RESET_RADIUS
    return RestartAction.NONE


def _to_boundary(d, p, radius):
    """Positive tau with |d + tau*p| = radius."""
    dd = float(np.dot(d, d))
    dp = float(np.dot(d, p))
    pp = float(np.dot(p, p))
    if pp == 0.0:
        return 0.0
    disc = max(dp * dp + pp * (radius * radius - dd), 0.0)
    return (-dp + np.sqrt(disc)) / pp


def _steihaug(g, bvec, radius, max_iter):
    """Truncated CG on min g'd + 0.5 d'Bd subject to |d| <= radius."""
    d = np.zeros_like(g)
    r = -g.copy()
    rr = float(np.dot(r, r))
    if rr == 0.0:
        return d
    gnorm = np.sqrt(rr)
    tol = min(0.5, np.sqrt(gnorm)) * gnorm * 1e-2
    p = r.copy()
    for _ in range(max_iter):
        bp = bvec(p)
        pbp = float(np.dot(p, bp))
        if pbp <= 0.0:
            return d + _to_boundary(d, p, radius) * p
        alpha = rr / pbp
        d_new = d + alpha * p
        if float(np.linalg.norm(d_new)) >= radius:
            return d + _to_boundary(d, p, radius) * p
        d = d_new
        r -= alpha * bp
        rr_new = float(np.dot(r, r))
        if np.sqrt(rr_new) <= tol:
            return d
        p = r + (rr_new / rr) * p
        rr = rr_new
    return d


_INV_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _blend_search(fun, x, d_tr, d_g, box, budget):
    """Scan j(P(x + t*d_g + (1-t)*d_tr)), t in [0, 1]; return the best point.

    Endpoints first, then golden-section refinement until the evaluation
    budget is spent.  Full accuracy is unnecessary: the result only has to
    be a good convex blend of the two candidate directions.

    Every probe point is projected before evaluation.  Both candidate
    steps are feasible, so their blend is feasible in exact arithmetic,
    but the floating-point combination can land one ulp outside an active
    bound — fatal for objectives that are only defined on the box.
    """

    def probe(t):
        z = box.project(x + t * d_g + (1.0 - t) * d_tr)
        j = fun(z)
        if np.isnan(j):
            raise OptimizerError("objective returned NaN during step search")
        return j, z

    best_j, best_z = probe(0.0)
    evals = 1
    if budget >= 2:
        j1, z1 = probe(1.0)
        evals += 1
        if j1 < best_j:
            best_j, best_z = j1, z1
    a, b = 0.0, 1.0
    c1 = b - _INV_GOLDEN * (b - a)
    c2 = a + _INV_GOLDEN * (b - a)
    j_c1 = j_c2 = None
    while evals < budget:
        if j_c1 is None:
            j_c1, z_c1 = probe(c1)
            evals += 1
            if j_c1 < best_j:
                best_j, best_z = j_c1, z_c1
            continue
        if j_c2 is None:
            j_c2, z_c2 = probe(c2)
            evals += 1
            if j_c2 < best_j:
                best_j, best_z = j_c2, z_c2
            continue
        if j_c1 <= j_c2:
            b, c2, j_c2 = c2, c1, j_c1
            c1 = b - _INV_GOLDEN * (b - a)
            j_c1 = None
        else:
            a, c1, j_c1 = c1, c2, j_c2
            c2 = a + _INV_GOLDEN * (b - a)
            j_c2 = None
    return best_j, best_z


def _check_config(cfg):
    ok = (
        0.0 < cfg.delta_min <= cfg.delta0 <= cfg.delta_max
        and 0.0 < cfg.shrink < 1.0 < cfg.grow
        and 0.0 < cfg.accept_ratio <= cfg.expand_ratio < 1.0
        and cfg.memory >= 1
        and cfg.blend_evals >= 1
        and cfg.tol > 0.0
    )
    if not ok:
        raise OptimizerError("inconsistent trust-region configuration")


def minimize(fun_grad, x0, box, config=None, fun=None, callback=None):
    """Minimise a smooth objective over a box.

    Parameters
    ----------
    fun_grad : callable
        ``fun_grad(x) -> (j, g)`` with ``g`` the gradient array.
    x0 : array_like
        Starting point; it is projected into the box.
    box : Box or (lower, upper)
        Bound constraints.
    config : TrustRegionConfig, optional
    fun : callable, optional
        Objective-only evaluator ``fun(x) -> j`` used by the step search;
        defaults to calling ``fun_grad`` and dropping the gradient.
    callback : callable, optional
        Called with the state after every accepted step.

    Returns
    -------
    TrustRegionResult
    """
    cfg = config if config is not None else TrustRegionConfig()
    _check_config(cfg)
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64)).copy()
    if not isinstance(box, Box):
        box = Box(box[0], box[1], n=x0.size)
    elif box.lower.ndim == 0 or box.lower.size != x0.size:
        box = Box(box.lower, box.upper, n=x0.size)
    evals = {"fun": 0, "grad": 0}

    def eval_fg(z):
        evals["grad"] += 1
        j, g = fun_grad(z)
        g = np.asarray(g, dtype=np.float64).ravel()
        if not np.isfinite(j) or not np.all(np.isfinite(g)):
            raise OptimizerError("non-finite objective or gradient")
        return float(j), g

    if fun is None:
        def eval_f(z):
            evals["fun"] += 1
            return float(fun_grad(z)[0])
    else:
        def eval_f(z):
            evals["fun"] += 1
            return float(fun(z))

    start = time.perf_counter()
    x = box.project(x0)
    j, g = eval_fg(x)
    memory = LbfgsMemory(cfg.memory)
    omega = cfg.omega if cfg.omega is not None else cfg.delta_max
    state = TrustRegionState(
        x=x, objective=j, gradient=g, radius=cfg.delta0,
        beta=min(cfg.delta0, 0.49 * box.min_width()),
        max_restarts=cfg.restarts,
    )
    residual = box.residual(x, g)
    trace = [IterationRecord(0, j, residual, state.radius, "initial",
                             time.perf_counter() - start)]
    iterates = [x.copy()]
    status = "max_iterations"

    while state.iteration < cfg.max_iter:
        if residual <= cfg.tol:
            status = "converged"
            break
        state.iteration += 1
        dhat = min(max(state.radius, cfg.delta_min), cfg.delta_max)
        accepted = False
        collapse = False
        while not accepted:
            d_star, z_star, j_new, pred, ratio = _trial_step(
                x, j, g, dhat, box, memory, state, cfg, omega, eval_f
            )
            if j_new < j and pred < 0.0 and ratio >= cfg.accept_ratio:
                accepted = True
                break
            trace.append(IterationRecord(
                state.iteration, j, residual, dhat, "rejected",
                time.perf_counter() - start,
            ))
            dhat *= cfg.shrink
            if dhat < cfg.delta_min:
                state.radius = dhat
                action = restart_policy(state, cfg)
                if action is RestartAction.RESET_RADIUS:
                    state.restarts_used += 1
                    state.descent_since_restart = False
                    dhat = cfg.delta0
                    state.radius = cfg.delta0
                    trace.append(IterationRecord(
                        state.iteration, j, residual, dhat, "restart",
                        time.perf_counter() - start,
                    ))
                else:
                    collapse = True
                    break
        if collapse:
            status = "radius_collapse"
            break

        x_new = z_star  # exactly the point the accepted trial was evaluated at
        j_acc, g_new = eval_fg(x_new)
        state.radius = min(dhat * cfg.grow, cfg.delta_max) \
            if ratio >= cfg.expand_ratio else dhat
        state.beta = min(max(dhat, cfg.delta_min), 0.49 * box.min_width())

        s = x_new - x
        yv = g_new - g
        bs = memory.matvec(s)
        s_bs = float(np.dot(s, bs))
        s_y = float(np.dot(s, yv))
        if s_y < cfg.powell * s_bs and s_bs > 0.0:
            # Powell damping: blend the gradient difference with the model
            # image of the step so the pair keeps positive curvature.
            alpha = 0.8 * s_bs / (s_bs - s_y)
            yv = alpha * yv + (1.0 - alpha) * bs
        action = restart_policy(state, cfg, pair=(s, yv))
        if action is RestartAction.WIPE_MEMORY:
            memory.clear()
        else:
            memory.push(s, yv)

        x, j, g = x_new, j_acc, g_new
        state.x, state.objective, state.gradient = x, j, g
        state.descent_since_restart = True
        state.accepted_steps += 1
        residual = box.residual(x, g)
        trace.append(IterationRecord(
            state.iteration, j, residual, dhat, "accepted",
            time.perf_counter() - start,
        ))
        iterates.append(x.copy())
        if callback is not None:
            callback(state)
    else:
        if residual <= cfg.tol:
            status = "converged"

    return TrustRegionResult(
        x=x, objective=j, gradient=g, residual=residual,
        iterations=state.iteration, status=status, trace=trace,
        iterates=iterates, restarts_used=state.restarts_used,
        fun_evals=evals["fun"], grad_evals=evals["grad"],
    )


def _trial_step(x, j, g, dhat, box, memory, state, cfg, omega, eval_f):
    """One trust-region proposal: active clamp + free CG + PG blend."""
    gnorm = float(np.linalg.norm(g))
    xi = min(state.beta, cfg.active_scale * gnorm)
    lo_active = (x - box.lower) <= xi
    hi_active = (box.upper - x) <= xi
    active = lo_active | hi_active

    d_a = np.zeros_like(x)
    d_a[lo_active] = box.lower[lo_active] - x[lo_active]
    d_a[hi_active] = box.upper[hi_active] - x[hi_active]
    va_norm = float(np.linalg.norm(d_a))
    if va_norm > dhat:
        d_a *= dhat / va_norm

    free = ~active
    d_i = np.zeros_like(x)
    if np.any(free):
        g_lin = (g + memory.matvec(d_a)) * free

        def bvec(v):
            return memory.matvec(v * free) * free

        d_i = _steihaug(g_lin, bvec, dhat, 2 * cfg.memory + 5)
    d_tr = box.project(x + d_a + d_i) - x

    kappa = min(1.0, cfg.delta_max / gnorm, omega / gnorm) if gnorm > 0 else 0.0
    d_g = box.project(x - (dhat / cfg.delta_max) * kappa * g) - x

    tr_norm = float(np.linalg.norm(d_tr))
    if tr_norm == 0.0:
        z_star = box.project(x + d_g)
        j_new = eval_f(z_star)
        if np.isnan(j_new):
            raise OptimizerError("objective returned NaN")
    elif float(np.linalg.norm(d_tr - d_g)) <= 1e-14 * max(tr_norm, 1.0):
        z_star = box.project(x + d_tr)
        j_new = eval_f(z_star)
        if np.isnan(j_new):
            raise OptimizerError("objective returned NaN")
    else:
        j_new, z_star = _blend_search(eval_f, x, d_tr, d_g, box, cfg.blend_evals)

    d_star = z_star - x
    pred = float(np.dot(g, d_star)) + 0.5 * float(np.dot(d_star, memory.matvec(d_star)))
    ratio = (j_new - j) / pred if pred < 0.0 else -np.inf
    return d_star, z_star, j_new, pred, ratio


def write_trace(path, trace):
    """Write iteration records as CSV (17 significant digits)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "objective", "pg_norm", "radius", "step_type", "wall_time"]
        )
        for rec in trace:
            writer.writerow([
                rec.iteration,
                f"{rec.objective:.17g}",
                f"{rec.pg_norm:.17g}",
                f"{rec.radius:.17g}",
                rec.step_type,
                f"{rec.wall_time:.17g}",
            ])
