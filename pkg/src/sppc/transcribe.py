"""Gauss pseudospectral transcription of a fixed-time Bolza problem into an NLP.

Decision vector layout (row-major blocks)::

    [X_0, X_1, ..., X_K, X_f, U_1, ..., U_K]

with X_i in R^n and U_k in R^m, total length n (K + 2) + m K.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .polybasis import collocation_grid, lagrange_interpolate, tau_from_time, time_map

__all__ = ["OcProblem", "TranscribedNlp", "check_gradients", "interpolate_solution", "transcribe"]


@dataclass(frozen=True)
class OcProblem:
    """
    Fixed-time optimal control problem.

    Running cost ``(x - x_ref)^T Q (x - x_ref) + (u - u_ref)^T R (u - u_ref)``;
    with ``terminal='hard'`` the entries ``terminal_indices`` of X_f are pinned
    to ``xf``, with ``terminal='cost'`` a quadratic penalty weighted by
    ``Qf`` is added instead. Path constraints are objects returning values that
    must be nonnegative at every interior node.
    """

    dynamics: object
    x0: np.ndarray
    xf: np.ndarray
    t0: float
    tf: float
    Q: np.ndarray
    R: np.ndarray
    terminal: str = "hard"
    terminal_indices: tuple = None
    Qf: np.ndarray = None
    x_ref: np.ndarray = None
    u_ref: np.ndarray = None
    state_lower: np.ndarray = None
    state_upper: np.ndarray = None
    control_lower: np.ndarray = None
    control_upper: np.ndarray = None
    path_constraints: tuple = ()
    u_guess: np.ndarray = None
    error_indices: tuple = None

    def __post_init__(self):
        n, m = self.dynamics.state_dim, self.dynamics.control_dim
        conv = lambda a: None if a is None else np.asarray(a, dtype=float)  # noqa: E731
        for name in ("x0", "xf", "Q", "R", "Qf", "x_ref", "u_ref", "u_guess"):
            object.__setattr__(self, name, conv(getattr(self, name)))
        if self.x0.shape != (n,) or self.xf.shape != (n,):
            raise ValueError("x0 and xf must have the state dimension")
        if self.Q.shape != (n, n) or self.R.shape != (m, m):
            raise ValueError("Q must be n x n and R m x m")
        if np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T)).min() < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (self.R + self.R.T)).min() <= 0:
            raise ValueError("R must be positive definite")
        if self.terminal not in ("hard", "cost"):
            raise ValueError("terminal must be 'hard' or 'cost'")
        if self.terminal == "cost" and self.Qf is None:
            raise ValueError("terminal cost needs Qf")
        if not self.tf > self.t0:
            raise ValueError("final time must exceed initial time")
        idx = tuple(range(n)) if self.terminal_indices is None else tuple(int(i) for i in self.terminal_indices)
        object.__setattr__(self, "terminal_indices", idx)
        err = idx if self.error_indices is None else tuple(int(i) for i in self.error_indices)
        object.__setattr__(self, "error_indices", err)
        for name, size in (("state_lower", n), ("state_upper", n), ("control_lower", m), ("control_upper", m)):
            val = getattr(self, name)
            default = -np.inf if name.endswith("lower") else np.inf
            val = np.full(size, default) if val is None else np.broadcast_to(np.asarray(val, dtype=float), (size,)).copy()
            object.__setattr__(self, name, val)
        if np.any(self.state_lower > self.state_upper) or np.any(self.control_lower > self.control_upper):
            raise ValueError("lower bounds exceed upper bounds")
        if np.any(self.x0 < self.state_lower) or np.any(self.x0 > self.state_upper):
            raise ValueError("x0 violates the state bounds")
        object.__setattr__(self, "path_constraints", tuple(self.path_constraints))

    @property
    def state_dim(self):
        return self.dynamics.state_dim

    @property
    def control_dim(self):
        return self.dynamics.control_dim

    @property
    def state_ref(self):
        return self.xf if self.x_ref is None else self.x_ref

    @property
    def control_ref(self):
        return np.zeros(self.control_dim) if self.u_ref is None else self.u_ref

    def with_window(self, x0, t0, tf):
        """Same problem re-posed from state x0 over [t0, tf]."""
        return replace(self, x0=np.asarray(x0, dtype=float), t0=float(t0), tf=float(tf))

    def running_cost(self, x, u):
        dx = np.atleast_2d(x) - self.state_ref
        du = np.atleast_2d(u) - self.control_ref
        return np.einsum("ki,ij,kj->k", dx, self.Q, dx) + np.einsum("ki,ij,kj->k", du, self.R, du)

    def error(self, x):
        """Distance to the target over the error indices."""
        idx = list(self.error_indices)
        return float(np.linalg.norm(np.asarray(x)[idx] - self.xf[idx]))


@dataclass
class TranscribedNlp:
    """
    Finite-dimensional NLP ``min f(v)  s.t.  c_eq(v) = 0, c_ineq(v) >= 0, lower <= v <= upper``.

    Evaluators are pure functions of the decision vector.
    """

    problem: OcProblem
    grid: object
    lower: np.ndarray
    upper: np.ndarray
    n_eq: int
    n_ineq: int
    _hess: np.ndarray = field(repr=False, default=None)

    # layout ---------------------------------------------------------------
    @property
    def n(self):
        return self.problem.state_dim

    @property
    def m(self):
        return self.problem.control_dim

    @property
    def K(self):
        return self.grid.order

    @property
    def n_var(self):
        return self.n * (self.K + 2) + self.m * self.K

    @property
    def half_span(self):
        return 0.5 * (self.problem.tf - self.problem.t0)

    def unpack(self, v):
        """Split v into (X of shape (K+2, n), U of shape (K, m)); X rows are X_0..X_K, X_f."""
        v = np.asarray(v, dtype=float)
        nx = self.n * (self.K + 2)
        return v[:nx].reshape(self.K + 2, self.n), v[nx:].reshape(self.K, self.m)

    def pack(self, X, U):
        return np.concatenate((np.asarray(X, dtype=float).ravel(), np.asarray(U, dtype=float).ravel()))

    def node_times(self):
        """Physical times of tau_0, tau_1..tau_K and tau_f."""
        p = self.problem
        tau = np.concatenate(([-1.0], self.grid.nodes, [1.0]))
        return time_map(tau, p.t0, p.tf)

    # objective ------------------------------------------------------------
    def objective(self, v):
        p = self.problem
        X, U = self.unpack(v)
        J = self.half_span * self.grid.weights @ p.running_cost(X[1:-1], U)
        if p.terminal == "cost":
            e = X[-1] - p.xf
            J += e @ p.Qf @ e
        return float(J)

    def objective_gradient(self, v):
        p = self.problem
        X, U = self.unpack(v)
        gX = np.zeros_like(X)
        w = self.half_span * self.grid.weights[:, None]
        Qs = p.Q + p.Q.T
        Rs = p.R + p.R.T
        gX[1:-1] = w * ((X[1:-1] - p.state_ref) @ Qs)
        gU = w * ((U - p.control_ref) @ Rs)
        if p.terminal == "cost":
            gX[-1] = (X[-1] - p.xf) @ (p.Qf + p.Qf.T)
        return self.pack(gX, gU)

    def objective_hessian(self):
        """Constant Hessian of the quadratic objective."""
        if self._hess is None:
            p = self.problem
            H = np.zeros((self.n_var, self.n_var))
            n, m, K = self.n, self.m, self.K
            Qs, Rs = p.Q + p.Q.T, p.R + p.R.T
            nx = n * (K + 2)
            for k in range(K):
                w = self.half_span * self.grid.weights[k]
                i = n * (k + 1)
                H[i:i + n, i:i + n] = w * Qs
                j = nx + m * k
                H[j:j + m, j:j + m] = w * Rs
            if p.terminal == "cost":
                i = n * (K + 1)
                H[i:i + n, i:i + n] = p.Qf + p.Qf.T
            self._hess = H
        return self._hess

    def lagrangian_hessian(self, v, multipliers_eq, multipliers_ineq=None, h=1e-6):
        """
        Hessian of ``f + lam_eq^T c_eq + lam_ineq^T c_ineq``.

        The constraint terms are separable over the interior nodes, so the
        second derivatives come from central differences of the analytic
        node Jacobians, perturbing one coordinate of every node at once.
        """
        n, m, K = self.n, self.m, self.K
        p = self.problem
        X, U = self.unpack(v)
        Z = np.hstack((X[1:-1], U))
        lam = np.asarray(multipliers_eq, dtype=float)
        hs = self.half_span
        # weight on f(X_k, U_k) collected from the defect and closure rows
        wf = -hs * (lam[:K * n].reshape(K, n) + self.grid.weights[:, None] * lam[K * n:K * n + n])
        lam_in = np.zeros(self.n_ineq) if multipliers_ineq is None else np.asarray(multipliers_ineq, dtype=float)

        def weighted_grad(Zp):
            Jx, Ju = p.dynamics.jacobian(Zp[:, :n], Zp[:, n:])
            G = np.einsum("ki,kij->kj", wf, np.concatenate((np.reshape(Jx, (K, n, n)), np.reshape(Ju, (K, n, m))), axis=2))
            row = 0
            for c in p.path_constraints:
                Gx, Gu = c.jacobian(Zp[:, :n], Zp[:, n:])
                q = Gx.shape[1]
                lk = lam_in[row:row + q * K].reshape(K, q)
                G = G + np.einsum("ki,kij->kj", lk, np.concatenate((Gx, Gu), axis=2))
                row += q * K
            return G

        blocks = np.empty((K, n + m, n + m))
        for j in range(n + m):
            dz = np.zeros(n + m)
            dz[j] = h
            blocks[:, :, j] = (weighted_grad(Z + dz) - weighted_grad(Z - dz)) / (2 * h)
        blocks = 0.5 * (blocks + blocks.transpose(0, 2, 1))
        H = self.objective_hessian().copy()
        nx = n * (K + 2)
        for k in range(K):
            idx = np.concatenate((np.arange(n * (k + 1), n * (k + 2)), np.arange(nx + m * k, nx + m * (k + 1))))
            H[np.ix_(idx, idx)] += blocks[k]
        return H

    # constraints ----------------------------------------------------------
    def equality(self, v):
        """[defects (K n), quadrature closure (n), initial (n), terminal (len(terminal_indices))]."""
        p = self.problem
        X, U = self.unpack(v)
        F = np.atleast_2d(p.dynamics(X[1:-1], U))
        h = self.half_span
        defects = self.grid.diff_matrix @ X[:-1] - h * F
        closure = X[-1] - X[0] - h * self.grid.weights @ F
        initial = X[0] - p.x0
        parts = [defects.ravel(), closure, initial]
        if p.terminal == "hard":
            idx = list(p.terminal_indices)
            parts.append(X[-1, idx] - p.xf[idx])
        return np.concatenate(parts)

    def equality_jacobian(self, v):
        p = self.problem
        n, m, K = self.n, self.m, self.K
        X, U = self.unpack(v)
        Jx, Ju = p.dynamics.jacobian(X[1:-1], U)
        Jx = np.reshape(Jx, (K, n, n))
        Ju = np.reshape(Ju, (K, n, m))
        h = self.half_span
        w = self.grid.weights
        nx = n * (K + 2)
        J = np.zeros((self.n_eq, self.n_var))
        J[:K * n, :(K + 1) * n] = np.kron(self.grid.diff_matrix, np.eye(n))
        r0 = K * n
        for k in range(K):
            rows = slice(n * k, n * (k + 1))
            cols = slice(n * (k + 1), n * (k + 2))
            J[rows, cols] -= h * Jx[k]
            J[rows, nx + m * k:nx + m * (k + 1)] = -h * Ju[k]
            J[r0:r0 + n, cols] = -h * w[k] * Jx[k]
            J[r0:r0 + n, nx + m * k:nx + m * (k + 1)] = -h * w[k] * Ju[k]
        J[r0:r0 + n, (K + 1) * n:(K + 2) * n] += np.eye(n)
        J[r0:r0 + n, :n] -= np.eye(n)
        J[r0 + n:r0 + 2 * n, :n] = np.eye(n)
        if p.terminal == "hard":
            for row, i in enumerate(p.terminal_indices):
                J[r0 + 2 * n + row, (K + 1) * n + i] = 1.0
        return J

    def inequality(self, v):
        if not self.n_ineq:
            return np.zeros(0)
        X, U = self.unpack(v)
        return np.concatenate([np.ravel(c(X[1:-1], U)) for c in self.problem.path_constraints])

    def inequality_jacobian(self, v):
        J = np.zeros((self.n_ineq, self.n_var))
        if not self.n_ineq:
            return J
        n, m, K = self.n, self.m, self.K
        X, U = self.unpack(v)
        nx = n * (K + 2)
        row = 0
        for c in self.problem.path_constraints:
            Gx, Gu = c.jacobian(X[1:-1], U)  # (K, q, n), (K, q, m)
            q = Gx.shape[1]
            for k in range(K):
                rows = slice(row + q * k, row + q * (k + 1))
                J[rows, n * (k + 1):n * (k + 2)] = Gx[k]
                J[rows, nx + m * k:nx + m * (k + 1)] = Gu[k]
            row += q * K
        return J

    def evaluate(self, v):
        """Objective and constraint values with their derivatives, checked for finiteness."""
        out = {
            "f": self.objective(v),
            "g": self.objective_gradient(v),
            "c_eq": self.equality(v),
            "J_eq": self.equality_jacobian(v),
            "c_ineq": self.inequality(v),
            "J_ineq": self.inequality_jacobian(v),
        }
        for key, val in out.items():
            bad = ~np.isfinite(np.asarray(val))
            if np.any(bad):
                loc = np.argwhere(bad)[0]
                raise FloatingPointError(f"non-finite entry in {key} at index {tuple(loc)}")
        return out

    # guesses --------------------------------------------------------------
    def linear_guess(self):
        """Straight line x0 -> xf through the node times, controls at u_guess (or zero)."""
        p = self.problem
        t = self.node_times()
        s = ((t - p.t0) / (p.tf - p.t0))[:, None]
        X = (1 - s) * p.x0 + s * p.xf
        u = np.zeros(self.m) if p.u_guess is None else p.u_guess
        U = np.tile(u, (self.K, 1))
        return self.clip(self.pack(X, U))

    def clip(self, v):
        return np.clip(v, self.lower, self.upper)


def transcribe(problem, grid=None, K=None):
    """Build the :class:`TranscribedNlp` for `problem` on an LG grid of order K."""
    if grid is None:
        grid = collocation_grid(K if K is not None else 30)
    if grid.order < 2:
        raise ValueError("collocation order must be at least 2")
    n, m, K = problem.state_dim, problem.control_dim, grid.order
    lower = np.concatenate((np.tile(problem.state_lower, K + 2), np.tile(problem.control_lower, K)))
    upper = np.concatenate((np.tile(problem.state_upper, K + 2), np.tile(problem.control_upper, K)))
    # X_0 is pinned by an equality; leave it unbounded so the initial state never clips
    lower[:n], upper[:n] = -np.inf, np.inf
    n_eq = K * n + 2 * n + (len(problem.terminal_indices) if problem.terminal == "hard" else 0)
    n_ineq = sum(c.size for c in problem.path_constraints) * K
    return TranscribedNlp(problem, grid, lower, upper, n_eq, n_ineq)


def check_gradients(nlp, v, h=1e-6):
    """
    Central-difference check of the objective gradient and constraint Jacobians.

    Returns the maximum relative error for each of ('g', 'J_eq', 'J_ineq').
    """
    v = np.asarray(v, dtype=float)
    fd_g = np.empty(nlp.n_var)
    fd_eq = np.empty((nlp.n_eq, nlp.n_var))
    fd_in = np.empty((nlp.n_ineq, nlp.n_var))
    for i in range(nlp.n_var):
        e = np.zeros(nlp.n_var)
        e[i] = h
        fd_g[i] = (nlp.objective(v + e) - nlp.objective(v - e)) / (2 * h)
        fd_eq[:, i] = (nlp.equality(v + e) - nlp.equality(v - e)) / (2 * h)
        fd_in[:, i] = (nlp.inequality(v + e) - nlp.inequality(v - e)) / (2 * h)

    def rel(a, b):
        if a.size == 0:
            return 0.0
        return float(np.abs(a - b).max() / max(1.0, np.abs(b).max()))

    return {
        "g": rel(nlp.objective_gradient(v), fd_g),
        "J_eq": rel(nlp.equality_jacobian(v), fd_eq),
        "J_ineq": rel(nlp.inequality_jacobian(v), fd_in),
    }


def interpolate_solution(nlp, v, times):
    """
    States and controls of a transcribed solution at physical `times`.

    States interpolate over (tau_0, tau_1..tau_K); controls over tau_1..tau_K.

    Returns
    -------
    X : ndarray, shape (q, n)
    U : ndarray, shape (q, m)
    """
    p = nlp.problem
    times = np.atleast_1d(np.asarray(times, dtype=float))
    span = p.tf - p.t0
    if np.any(times < p.t0 - 1e-9 * span) or np.any(times > p.tf + 1e-9 * span):
        raise ValueError(f"query outside [{p.t0}, {p.tf}]")
    tau = np.clip(tau_from_time(times, p.t0, p.tf), -1.0, 1.0)
    X, U = nlp.unpack(v)
    Xs = lagrange_interpolate(nlp.grid.support, X[:-1], tau)
    Us = lagrange_interpolate(nlp.grid.nodes, U, tau)
    return Xs, Us
