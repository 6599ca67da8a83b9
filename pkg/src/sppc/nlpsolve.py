"""Augmented-Lagrangian NLP solver with a projected quasi-Newton inner loop.

Solves ``min f(x)  s.t.  c_eq(x) = 0, c_ineq(x) >= 0, lower <= x <= upper``.
Inequalities become equalities ``c_ineq(x) - s = 0`` with slacks ``s >= 0``
folded into the box. The inner problem minimizes

    Phi(y) = f + lam^T c + mu/2 |c|^2

over the box by projected Newton steps on the model ``B + mu J^T J``, where
``B`` is a damped-BFGS estimate of the Lagrangian Hessian and ``J^T J`` is the
exact Gauss-Newton part of the penalty.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = ["FunctionNlp", "KktResiduals", "NlpSolution", "NlpSolveOptions", "kkt_residuals", "solve"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NlpSolveOptions:
    max_outer: int = 40
    max_inner: int = 300
    constraint_tol: float = 1e-6
    # relative to max(1, |grad f|_inf)
    stationarity_tol: float = 1e-5
    mu0: float = 10.0
    mu_growth: float = 10.0
    mu_max: float = 1e8
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    scale_constraints: bool = False
    # re-seed the quasi-Newton matrix from the problem's Lagrangian Hessian
    # (when it provides one) at each outer iteration and after a failed search
    curvature_refresh: bool = True
    # 'least_squares' fits grad f + J^T lam = 0 at the start point; 'zero'
    multiplier_init: str = "least_squares"
    trace: bool = False

    def __post_init__(self):
        if self.constraint_tol <= 0 or self.stationarity_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.mu_growth <= 1:
            raise ValueError("penalty growth factor must exceed 1")
        if self.multiplier_init not in ("least_squares", "zero"):
            raise ValueError("multiplier_init must be 'least_squares' or 'zero'")


@dataclass
class NlpSolution:
    x: np.ndarray
    objective: float
    eq_violation: float
    ineq_violation: float
    multipliers_eq: np.ndarray
    multipliers_ineq: np.ndarray
    status: str
    iterations: int
    evaluations: int
    outer_iterations: int
    stationarity: float
    penalty: float
    trace: list = field(default_factory=list, repr=False)

    @property
    def converged(self):
        return self.status == "converged"


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    eq_feasibility: float
    ineq_feasibility: float
    complementarity: float


class FunctionNlp:
    """Adapter turning plain callables into the solver's problem protocol."""

    def __init__(self, objective, gradient, n_var, eq=None, eq_jac=None, ineq=None, ineq_jac=None,
                 lower=None, upper=None, n_eq=0, n_ineq=0, hessian=None):
        self.n_var = n_var
        self._f, self._g = objective, gradient
        self._ce, self._je = eq, eq_jac
        self._ci, self._ji = ineq, ineq_jac
        self.n_eq, self.n_ineq = n_eq, n_ineq
        self.lower = np.full(n_var, -np.inf) if lower is None else np.asarray(lower, dtype=float)
        self.upper = np.full(n_var, np.inf) if upper is None else np.asarray(upper, dtype=float)
        self._h = hessian

    def objective(self, x):
        return float(self._f(x))

    def objective_gradient(self, x):
        return np.asarray(self._g(x), dtype=float)

    def equality(self, x):
        return np.asarray(self._ce(x), dtype=float) if self.n_eq else np.zeros(0)

    def equality_jacobian(self, x):
        return np.atleast_2d(self._je(x)) if self.n_eq else np.zeros((0, self.n_var))

    def inequality(self, x):
        return np.asarray(self._ci(x), dtype=float) if self.n_ineq else np.zeros(0)

    def inequality_jacobian(self, x):
        return np.atleast_2d(self._ji(x)) if self.n_ineq else np.zeros((0, self.n_var))

    def objective_hessian(self):
        return None if self._h is None else np.asarray(self._h, dtype=float)


def _project(y, lo, hi):
    return np.minimum(np.maximum(y, lo), hi)


def kkt_residuals(nlp, x, multipliers_eq=None, multipliers_ineq=None):
    """
    First-order optimality residuals with the Lagrangian
    ``f + lam_eq^T c_eq + lam_ineq^T c_ineq`` (lam_ineq <= 0 at a KKT point).

    Stationarity is the infinity norm of the projected Lagrangian gradient.
    """
    x = np.asarray(x, dtype=float)
    lam_e = np.zeros(nlp.n_eq) if multipliers_eq is None else np.asarray(multipliers_eq, dtype=float)
    lam_i = np.zeros(nlp.n_ineq) if multipliers_ineq is None else np.asarray(multipliers_ineq, dtype=float)
    grad = nlp.objective_gradient(x).copy()
    if nlp.n_eq:
        grad += nlp.equality_jacobian(x).T @ lam_e
    ci = nlp.inequality(x)
    if nlp.n_ineq:
        grad += nlp.inequality_jacobian(x).T @ lam_i
    stat = np.abs(_project(x - grad, nlp.lower, nlp.upper) - x)
    ce = nlp.equality(x)
    return KktResiduals(
        stationarity=float(stat.max(initial=0.0)),
        eq_feasibility=float(np.abs(ce).max(initial=0.0)),
        ineq_feasibility=float(np.maximum(-ci, 0.0).max(initial=0.0)),
        complementarity=float(np.abs(lam_i * ci).max(initial=0.0)),
    )


class _Merit:
    """
    Augmented-Lagrangian pieces on y = [x, s].

    Optionally, constraint rows are scaled by 1 / max(1, |grad c_i(x0)|_inf),
    fixed at the start point. Scaling leaves the feasible set and the Lagrangian
    stationarity unchanged but keeps mu J^T J from swamping the curvature model.
    """

    def __init__(self, nlp, x0, scale=True):
        self.nlp = nlp
        self.nx = nlp.n_var
        self.ne = nlp.n_eq
        self.ni = nlp.n_ineq
        self.evals = 0
        rows = np.vstack((nlp.equality_jacobian(x0).reshape(self.ne, self.nx),
                          nlp.inequality_jacobian(x0).reshape(self.ni, self.nx)))
        self.row_scale = 1.0 / np.maximum(1.0, np.abs(rows).max(axis=1, initial=0.0))
        if not scale:
            self.row_scale[:] = 1.0

    def values(self, y):
        x, s = y[:self.nx], y[self.nx:]
        self.evals += 1
        f = self.nlp.objective(x)
        c = np.concatenate((self.nlp.equality(x), self.nlp.inequality(x) - s))
        return f, self.row_scale * c

    def derivatives(self, y):
        x = y[:self.nx]
        g = self.nlp.objective_gradient(x)
        J = np.zeros((self.ne + self.ni, self.nx + self.ni))
        if self.ne:
            J[:self.ne, :self.nx] = self.nlp.equality_jacobian(x)
        if self.ni:
            J[self.ne:, :self.nx] = self.nlp.inequality_jacobian(x)
            J[self.ne:, self.nx:] = -np.eye(self.ni)
        return g, self.row_scale[:, None] * J

    def violation(self, c):
        """Unscaled max violation from scaled residuals."""
        return float(np.abs(c / self.row_scale).max(initial=0.0))


def _damped_bfgs(B, s, r):
    """Powell-damped BFGS update; returns B unchanged when the step is degenerate."""
    Bs = B @ s
    sBs = s @ Bs
    if not sBs > 1e-300:
        return B
    sr = s @ r
    if sr < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sr)
        r = theta * r + (1 - theta) * Bs
        sr = s @ r
    if not sr > 1e-300:
        return B
    return B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / sr


def _refreshed_curvature(nlp, merit, y, pi):
    """Eigenvalue-modified Lagrangian Hessian, or None if the problem has none."""
    lh = getattr(nlp, "lagrangian_hessian", None)
    if lh is None:
        return None
    nx, ne = merit.nx, merit.ne
    pi = pi * merit.row_scale
    H = lh(y[:nx], pi[:ne], pi[ne:])
    if not np.all(np.isfinite(H)):
        return None
    w, V = linalg.eigh(0.5 * (H + H.T))
    floor = 1e-8 * max(1.0, np.abs(w).max())
    w = np.maximum(np.abs(w), floor)
    return (V * w) @ V.T


def _ls_multipliers(g, J, y, nx, ne):
    """
    Least-squares fit of grad f + J_x^T lam = 0; inequality multipliers are
    clipped to be nonpositive and zeroed where the slack is inactive.
    """
    if J.shape[0] == 0:
        return np.zeros(0)
    lam = linalg.lstsq(J[:, :nx].T, -g, lapack_driver="gelsy")[0]
    lam[ne:] = np.where(y[nx:] > 0, 0.0, np.minimum(lam[ne:], 0.0))
    if not np.all(np.isfinite(lam)):
        return np.zeros(J.shape[0])
    return lam


def _phi(f, c, lam, mu):
    return f + lam @ c + 0.5 * mu * c @ c


def solve(nlp, x_init, opts=None):
    """
    Minimize the NLP from `x_init`.

    Returns an :class:`NlpSolution`; ``status`` is 'converged' only when the
    constraint violation and projected stationarity both meet tolerance.
    """
    opts = opts or NlpSolveOptions()
    nx, ne, ni = nlp.n_var, nlp.n_eq, nlp.n_ineq
    x0 = np.asarray(x_init, dtype=float)
    clipped = _project(x0, nlp.lower, nlp.upper)
    if np.any(clipped != x0):
        log.info("initial point clipped into the box")
    merit = _Merit(nlp, clipped, opts.scale_constraints)
    ci0 = nlp.inequality(clipped) if ni else np.zeros(0)
    y = np.concatenate((clipped, np.maximum(ci0, 0.0)))
    lo = np.concatenate((nlp.lower, np.zeros(ni)))
    hi = np.concatenate((nlp.upper, np.full(ni, np.inf)))

    hess = getattr(nlp, "objective_hessian", None)
    H0 = hess() if callable(hess) else None
    if H0 is None:
        B0 = np.eye(nx)
    else:
        B0 = H0 + 1e-6 * np.eye(nx)
    B = B0.copy()

    mu = opts.mu0
    omega = 1.0 / mu
    eta = 1.0 / mu**0.1

    f, c = merit.values(y)
    g, J = merit.derivatives(y)
    lam = np.zeros(ne + ni)
    if opts.multiplier_init == "least_squares":
        lam = _ls_multipliers(g, J, y, nx, ne)
    total_inner = 0
    status = "max_iters"
    trace = []
    stationarity = np.inf
    outer = 0
    stalls = 0

    for outer in range(1, opts.max_outer + 1):
        if opts.curvature_refresh:
            fresh = _refreshed_curvature(nlp, merit, y, lam + mu * c)
            if fresh is not None:
                B0 = B = fresh
        # ---- inner: minimize Phi(.; lam, mu) over the box ----
        inner_fail = False
        accepted = 0
        for _ in range(opts.max_inner):
            pi = lam + mu * c
            grad = np.concatenate((g, np.zeros(ni))) + J.T @ pi
            pg = _project(y - grad, lo, hi) - y
            scale = max(1.0, np.abs(g).max(initial=0.0))
            pg_norm = np.abs(pg).max(initial=0.0)
            if pg_norm <= max(omega, opts.stationarity_tol * scale):
                break
            total_inner += 1
            phi = _phi(f, c, lam, mu)

            eps = min(1e-3, pg_norm)
            active = ((y <= lo + eps) & (grad > 0)) | ((y >= hi - eps) & (grad < 0))
            free = ~active

            step = None
            for attempt in range(2):
                H = mu * (J.T @ J)
                H[:nx, :nx] += B
                d = np.zeros_like(y)
                d[active] = -grad[active] / np.maximum(np.diag(H)[active], 1e-12)
                Hff = H[np.ix_(free, free)]
                try:
                    cf = linalg.cho_factor(Hff)
                    d[free] = -linalg.cho_solve(cf, grad[free])
                except linalg.LinAlgError:
                    d[free] = -grad[free] / np.maximum(np.abs(np.diag(Hff)), 1e-8)
                t = 1.0
                y_size = 1.0 + np.abs(y).max(initial=0.0)
                for n_back in range(opts.max_backtracks):
                    y_new = _project(y + t * d, lo, hi)
                    if np.abs(y_new - y).max(initial=0.0) <= 1e-14 * y_size:
                        # the step has vanished; a null step would be accepted forever
                        break
                    f_new, c_new = merit.values(y_new)
                    phi_new = _phi(f_new, c_new, lam, mu)
                    decrease = min(grad @ (y_new - y), 0.0)
                    if np.isfinite(phi_new) and phi_new <= phi + opts.armijo * decrease and phi_new < phi:
                        step = (y_new, f_new, c_new, phi_new)
                        break
                    t *= opts.backtrack
                if step is not None:
                    break
                fresh = _refreshed_curvature(nlp, merit, y, lam + mu * c) if opts.curvature_refresh else None
                B = B0.copy() if fresh is None else fresh
            if step is None:
                if opts.trace:
                    trace.append({"outer": outer, "failed": True, "mu": mu, "pg": pg_norm})
                inner_fail = True
                break

            y_new, f_new, c_new, phi_new = step
            g_new, J_new = merit.derivatives(y_new)
            # damped BFGS on the Lagrangian curvature (x part only)
            pi_new = lam + mu * c_new
            s_vec = (y_new - y)[:nx]
            r_vec = (g_new - g) + ((J_new - J).T @ pi_new)[:nx]
            B = _damped_bfgs(B, s_vec, r_vec)
            if opts.trace:
                trace.append({"outer": outer, "phi": phi_new, "mu": mu, "viol": float(np.abs(c_new).max(initial=0.0)),
                              "backtracks": n_back, "attempt": attempt, "pg": pg_norm})
            y, f, c, g, J = y_new, f_new, c_new, g_new, J_new
            accepted += 1

        viol = float(np.abs(c).max(initial=0.0))
        # a stalled line search usually means the merit decrease fell below
        # roundoff; let the outer update act, and give up only when it keeps
        # stalling without progress
        stalls = stalls + 1 if inner_fail and accepted == 0 else 0
        if stalls >= 2:
            status = "line_search_failed"
            break
        if viol <= eta:
            lam = lam + mu * c
            grad_l = np.concatenate((g, np.zeros(ni))) + J.T @ lam
            scale = max(1.0, np.abs(g).max(initial=0.0))
            stationarity = float(np.abs(_project(y - grad_l, lo, hi) - y).max(initial=0.0)) / scale
            feasible = merit.violation(c) <= opts.constraint_tol
            if feasible and stationarity > opts.stationarity_tol:
                # the first-order update is noisy when J is nearly rank deficient;
                # a least-squares estimate at the same point may certify it
                lam_ls = _ls_multipliers(g, J, y, nx, ne)
                grad_ls = np.concatenate((g, np.zeros(ni))) + J.T @ lam_ls
                stat_ls = float(np.abs(_project(y - grad_ls, lo, hi) - y).max(initial=0.0)) / scale
                if stat_ls < stationarity:
                    lam, stationarity = lam_ls, stat_ls
            if feasible and stationarity <= opts.stationarity_tol:
                status = "converged"
                break
            eta = max(eta / mu**0.9, 0.1 * opts.constraint_tol)
            omega = omega / mu
        else:
            if mu >= opts.mu_max:
                lam = lam + mu * c
            mu = min(mu * opts.mu_growth, opts.mu_max)
            eta = 1.0 / mu**0.1
            omega = 1.0 / mu

    x = y[:nx]
    ce = nlp.equality(x)
    ci = nlp.inequality(x)
    if status == "converged" or np.isinf(stationarity):
        grad_l = np.concatenate((g, np.zeros(ni))) + J.T @ lam
        scale = max(1.0, np.abs(g).max(initial=0.0))
        stationarity = float(np.abs(_project(y - grad_l, lo, hi) - y).max(initial=0.0)) / scale
    return NlpSolution(
        x=x.copy(),
        objective=float(nlp.objective(x)),
        eq_violation=float(np.abs(ce).max(initial=0.0)),
        ineq_violation=float(np.maximum(-ci, 0.0).max(initial=0.0)),
        multipliers_eq=lam[:ne] * merit.row_scale[:ne],
        multipliers_ineq=lam[ne:] * merit.row_scale[ne:],
        status=status,
        iterations=total_inner,
        evaluations=merit.evals,
        outer_iterations=outer,
        stationarity=stationarity,
        penalty=mu,
        trace=trace,
    )
