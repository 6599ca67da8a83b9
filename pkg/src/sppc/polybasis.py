"""Legendre-Gauss collocation machinery.

Legendre polynomials, Legendre-Gauss (LG) nodes and weights, the Gauss
pseudospectral differentiation matrix, Lagrange interpolation and the affine
map between physical time and the reference interval [-1, 1].
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "CollocationGrid",
    "collocation_grid",
    "differentiation_matrix",
    "lagrange_interpolate",
    "legendre_eval",
    "lg_nodes",
    "quadrature_weights",
    "tau_from_time",
    "time_map",
]

_MAX_NEWTON = 100


def legendre_eval(K, tau):
    """
    Evaluate P_K and its first two derivatives with the three-term recurrence.

    Parameters
    ----------
    K : int
        Polynomial degree, K >= 0.
    tau : float or array_like
        Evaluation point(s) in [-1, 1].

    Returns
    -------
    p, dp, ddp : float or ndarray
        P_K(tau), P_K'(tau), P_K''(tau), shaped like `tau`.
    """
    if K < 0:
        raise ValueError("degree must be nonnegative")
    tau = np.asarray(tau, dtype=float)
    if np.any(np.abs(tau) > 1.0 + 1e-9):
        raise ValueError("tau outside [-1, 1]")

    p_prev, p = np.ones_like(tau), tau.copy()
    dp_prev, dp = np.zeros_like(tau), np.ones_like(tau)
    ddp_prev, ddp = np.zeros_like(tau), np.zeros_like(tau)
    if K == 0:
        return _unwrap(p_prev), _unwrap(dp_prev), _unwrap(ddp_prev)
    for n in range(1, K):
        p_next = ((2 * n + 1) * tau * p - n * p_prev) / (n + 1)
        dp_next = dp_prev + (2 * n + 1) * p
        ddp_next = ddp_prev + (2 * n + 1) * dp
        p_prev, p = p, p_next
        dp_prev, dp = dp, dp_next
        ddp_prev, ddp = ddp, ddp_next
    return _unwrap(p), _unwrap(dp), _unwrap(ddp)


def _unwrap(a):
    return float(a) if a.ndim == 0 else a


def lg_nodes(K):
    """
    Roots of P_K, sorted ascending.

    Each root is polished by Newton's method from a Chebyshev-type initial
    guess. Bruns' inequality brackets every root, so a Newton step that leaves
    its bracket is replaced by bisection.

    Raises
    ------
    ArithmeticError
        If a root has not converged after the iteration cap.
    """
    K = int(K)
    if not 1 <= K <= 200:
        raise ValueError("K must lie in [1, 200]")
    k = np.arange(1, K + 1)
    # roots in descending order: theta_k in ((k - 1/2) pi / (K + 1/2), k pi / (K + 1/2))
    lo = np.cos(k * np.pi / (K + 0.5))
    hi = np.cos((k - 0.5) * np.pi / (K + 0.5))
    x = np.cos(np.pi * (k - 0.25) / (K + 0.5))

    sign_lo = np.sign(legendre_eval(K, lo)[0])
    converged = np.zeros(K, dtype=bool)
    tiny = 4 * np.finfo(float).eps
    for _ in range(_MAX_NEWTON):
        p, dp, _ = legendre_eval(K, x)
        step = p / dp
        done = np.abs(step) <= tiny
        # shrink the bracket around the sign change
        same = np.sign(p) == sign_lo
        lo = np.where(same, x, lo)
        hi = np.where(same, hi, x)
        x_new = x - step
        outside = ~done & ((x_new < lo) | (x_new > hi))
        x_new = np.where(outside, 0.5 * (lo + hi), x_new)
        x = np.where(converged, x, x_new)
        converged |= done
        if converged.all():
            break
    else:
        raise ArithmeticError(f"Legendre root search for K={K} did not converge")
    x = np.sort(x)
    if K % 2 == 1:
        x[K // 2] = 0.0
    # enforce exact symmetry
    x = 0.5 * (x - x[::-1])
    return x


def quadrature_weights(nodes):
    """LG quadrature weights 2 / ((1 - tau^2) P_K'(tau)^2) at the K given roots."""
    nodes = np.asarray(nodes, dtype=float)
    K = nodes.size
    _, dp, _ = legendre_eval(K, nodes)
    return 2.0 / ((1.0 - nodes**2) * dp**2)


def differentiation_matrix(nodes):
    """
    Gauss pseudospectral differentiation matrix.

    Parameters
    ----------
    nodes : array_like, shape (K+1,)
        Support points ``[-1, tau_1, ..., tau_K]`` where tau_k are LG roots.

    Returns
    -------
    D : ndarray, shape (K, K+1)
        ``D @ X`` is the derivative of the degree-K interpolant of ``X`` at
        tau_1..tau_K. Built from g(tau) = (1 + tau) P_K(tau).
    """
    nodes = np.asarray(nodes, dtype=float)
    K = nodes.size - 1
    p, dp, ddp = legendre_eval(K, nodes)
    gdot = (1.0 + nodes) * dp + p
    gddot = (1.0 + nodes) * ddp + 2.0 * dp

    interior = nodes[1:]
    diff = interior[:, None] - nodes[None, :]
    D = np.empty((K, K + 1))
    off = ~np.eye(K, K + 1, k=1, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        full = gdot[1:, None] / (diff * gdot[None, :])
    D[off] = full[off]
    idx = np.arange(K)
    D[idx, idx + 1] = gddot[1:] / (2.0 * gdot[1:])
    return D


@dataclass(frozen=True)
class CollocationGrid:
    """Immutable LG grid of order K for one phase."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray
    diff_matrix: np.ndarray

    @property
    def support(self):
        """State support points, ``[-1, tau_1, ..., tau_K]``."""
        return np.concatenate(([-1.0], self.nodes))


@lru_cache(maxsize=None)
def collocation_grid(K):
    """Cached :class:`CollocationGrid` for order K."""
    nodes = lg_nodes(K)
    weights = quadrature_weights(nodes)
    D = differentiation_matrix(np.concatenate(([-1.0], nodes)))
    for a in (nodes, weights, D):
        a.setflags(write=False)
    return CollocationGrid(int(K), nodes, weights, D)


def lagrange_interpolate(support, values, query):
    """
    Evaluate the Lagrange interpolant through ``(support, values)`` at `query`.

    Uses the barycentric form; a query that coincides with a support node
    returns that node's value exactly.

    Parameters
    ----------
    support : array_like, shape (P,)
    values : array_like, shape (P,) or (P, q)
    query : float or array_like, shape (Q,)

    Returns
    -------
    ndarray, shape (Q,) or (Q, q) (scalar query drops the leading axis)
    """
    support = np.asarray(support, dtype=float)
    values = np.asarray(values, dtype=float)
    scalar = np.ndim(query) == 0
    query = np.atleast_1d(np.asarray(query, dtype=float))
    if values.shape[0] != support.size:
        raise ValueError("support and values disagree in length")
    if np.unique(support).size != support.size:
        raise ValueError("duplicate support nodes")

    diff = support[:, None] - support[None, :]
    np.fill_diagonal(diff, 1.0)
    bary = 1.0 / np.prod(diff, axis=1)

    delta = query[:, None] - support[None, :]
    exact = delta == 0.0
    hit = exact.any(axis=1)
    delta[exact] = 1.0
    terms = bary[None, :] / delta
    terms[hit] = exact[hit].astype(float)
    denom = terms.sum(axis=1)
    out = np.tensordot(terms, values, axes=(1, 0))
    out = out / denom.reshape((-1,) + (1,) * (values.ndim - 1))
    return out[0] if scalar else out


def time_map(tau, t0, tf):
    """Map reference time tau in [-1, 1] to physical time in [t0, tf]."""
    if not tf > t0:
        raise ValueError("final time must exceed initial time")
    return 0.5 * (tf - t0) * np.asarray(tau, dtype=float) + 0.5 * (tf + t0)


def tau_from_time(t, t0, tf):
    """Inverse of :func:`time_map`."""
    if not tf > t0:
        raise ValueError("final time must exceed initial time")
    return (2.0 * np.asarray(t, dtype=float) - (tf + t0)) / (tf - t0)
