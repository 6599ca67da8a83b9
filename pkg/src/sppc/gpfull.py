"""Exact Gaussian Process regression with a squared-exponential ARD kernel.

One independent scalar GP is kept per output column. Observation noise enters
only on the diagonal of the training covariance.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = [
    "GaussianProcess",
    "HyperparamFit",
    "KernelHyperparams",
    "NotPositiveDefiniteError",
    "TrainingSet",
    "jittered_cholesky",
    "kernel_eval",
    "log_marginal_likelihood",
    "se_kernel",
    "train_hyperparams",
]

log = logging.getLogger(__name__)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a covariance matrix stays indefinite after jitter escalation."""


@dataclass(frozen=True, eq=False)
class KernelHyperparams:
    """SE kernel hyperparameters: signal std, noise std and ARD lengthscales."""

    signal_std: float
    noise_std: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_std", float(self.signal_std))
        object.__setattr__(self, "noise_std", float(self.noise_std))
        if not self.signal_std > 0:
            raise ValueError("signal_std must be positive")
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be nonnegative")
        if not np.all(ls > 0):
            raise ValueError("lengthscales must be positive")

    @property
    def dim(self):
        return self.lengthscales.size

    @property
    def W(self):
        """Diagonal quadratic-form matrix diag(1 / lengthscale^2)."""
        return np.diag(self.lengthscales**-2)

    def to_dict(self):
        return {
            "signal_std": self.signal_std,
            "noise_std": self.noise_std,
            "lengthscales": self.lengthscales.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["signal_std"], d["noise_std"], np.asarray(d["lengthscales"]))


@dataclass(frozen=True)
class TrainingSet:
    """Inputs Z (N x d) and targets Y (N x m)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        Y = np.asarray(self.targets, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Z.shape[0] != Y.shape[0]:
            raise ValueError("inputs and targets disagree in sample count")
        if not np.all(np.isfinite(Z)):
            raise ValueError("non-finite training inputs")
        if Y.shape[1] < 1:
            raise ValueError("need at least one target column")
        object.__setattr__(self, "inputs", Z)
        object.__setattr__(self, "targets", Y)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    @property
    def output_dim(self):
        return self.targets.shape[1]


def kernel_eval(zi, zj, hp):
    """Noise-free SE kernel sigma_s^2 exp(-1/2 (zi-zj)^T W (zi-zj))."""
    zi = np.asarray(zi, dtype=float).ravel()
    zj = np.asarray(zj, dtype=float).ravel()
    if zi.size != hp.dim or zj.size != hp.dim:
        raise ValueError(f"expected inputs of dimension {hp.dim}")
    r = (zi - zj) / hp.lengthscales
    return hp.signal_std**2 * np.exp(-0.5 * r @ r)


def se_kernel(A, B, hp):
    """Kernel matrix between the rows of A (n x d) and B (p x d)."""
    A = np.atleast_2d(A) / hp.lengthscales
    B = np.atleast_2d(B) / hp.lengthscales
    if A.shape[1] != hp.dim or B.shape[1] != hp.dim:
        raise ValueError(f"expected inputs of dimension {hp.dim}")
    sq = (A**2).sum(1)[:, None] + (B**2).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(sq, 0.0, out=sq)
    return hp.signal_std**2 * np.exp(-0.5 * sq)


def jittered_cholesky(M, lower=True):
    """
    Cholesky factor of a symmetric matrix, escalating diagonal jitter on failure.

    Jitter starts at 1e-10 times the mean diagonal and grows tenfold up to
    1e-4 times the mean diagonal.

    Returns
    -------
    L : ndarray
        Triangular factor.
    jitter : float
        Jitter that was added (0.0 when none was needed).
    """
    try:
        return linalg.cholesky(M, lower=lower), 0.0
    except linalg.LinAlgError:
        pass
    scale = max(np.mean(np.diag(M)), np.finfo(float).tiny)
    for rel in 10.0 ** np.arange(-10, -3):
        jitter = rel * scale
        try:
            L = linalg.cholesky(M + jitter * np.eye(M.shape[0]), lower=lower)
        except linalg.LinAlgError:
            continue
        log.debug("cholesky needed jitter %.3g", jitter)
        return L, jitter
    raise NotPositiveDefiniteError("matrix not positive definite after jitter escalation")


class GaussianProcess:
    """
    Independent-output exact GP.

    Parameters
    ----------
    data : TrainingSet
    hyperparams : KernelHyperparams or sequence of them
        One per output column; a single instance is shared by all columns.
    """

    def __init__(self, data, hyperparams):
        if isinstance(hyperparams, KernelHyperparams):
            hyperparams = [hyperparams] * data.output_dim
        hyperparams = list(hyperparams)
        if len(hyperparams) != data.output_dim:
            raise ValueError("need one hyperparameter set per output column")
        for hp in hyperparams:
            if hp.dim != data.input_dim:
                raise ValueError("lengthscale count does not match input dimension")
        self.data = data
        self.hyperparams = hyperparams
        self.chol = []
        self.alpha = []
        self.jitter = []
        Z = data.inputs
        for j, hp in enumerate(hyperparams):
            Ky = se_kernel(Z, Z, hp) + hp.noise_std**2 * np.eye(len(data))
            L, jit = jittered_cholesky(Ky)
            self.chol.append(L)
            self.jitter.append(jit)
            self.alpha.append(linalg.cho_solve((L, True), data.targets[:, j]))

    @property
    def input_dim(self):
        return self.data.input_dim

    @property
    def output_dim(self):
        return self.data.output_dim

    def predict(self, Zs):
        """
        Posterior mean and variance.

        Parameters
        ----------
        Zs : array_like, shape (d,) or (q, d)

        Returns
        -------
        mean, var : ndarray, shape (m,) or (q, m)
        """
        Zs = np.asarray(Zs, dtype=float)
        single = Zs.ndim == 1
        Zs = np.atleast_2d(Zs)
        mean = np.empty((Zs.shape[0], self.output_dim))
        var = np.empty_like(mean)
        for j, hp in enumerate(self.hyperparams):
            Ks = se_kernel(Zs, self.data.inputs, hp)
            mean[:, j] = Ks @ self.alpha[j]
            v = linalg.solve_triangular(self.chol[j], Ks.T, lower=True)
            var[:, j] = hp.signal_std**2 - (v**2).sum(0)
        np.maximum(var, 0.0, out=var)
        if single:
            return mean[0], var[0]
        return mean, var

    def predict_mean(self, Zs):
        Zs = np.atleast_2d(np.asarray(Zs, dtype=float))
        out = np.empty((Zs.shape[0], self.output_dim))
        for j, hp in enumerate(self.hyperparams):
            out[:, j] = se_kernel(Zs, self.data.inputs, hp) @ self.alpha[j]
        return out

    def predict_mean_gradient(self, Zs):
        """
        Jacobian of the posterior mean with respect to the test input.

        Returns
        -------
        ndarray, shape (m, d) for a single input or (q, m, d) for a batch
        """
        Zs = np.asarray(Zs, dtype=float)
        single = Zs.ndim == 1
        Zs = np.atleast_2d(Zs)
        Z = self.data.inputs
        grad = np.empty((Zs.shape[0], self.output_dim, self.input_dim))
        for j, hp in enumerate(self.hyperparams):
            Ks = se_kernel(Zs, Z, hp)
            weighted = Ks * self.alpha[j][None, :]
            # d k(z*, z_i) / d z* = -k(z*, z_i) W (z* - z_i)
            diff = Zs[:, None, :] - Z[None, :, :]
            grad[:, j, :] = -np.einsum("qn,qnd->qd", weighted, diff) / hp.lengthscales**2
        return grad[0] if single else grad

    def log_marginal_likelihood(self):
        return sum(
            log_marginal_likelihood(self.data.inputs, self.data.targets[:, j], hp)
            for j, hp in enumerate(self.hyperparams)
        )


def _lml_and_grad(Z, y, log_params):
    """LML of one output column and its gradient in log-parameter space."""
    N, d = Z.shape
    sf2 = np.exp(2 * log_params[0])
    sn2 = np.exp(2 * log_params[1])
    ls = np.exp(log_params[2:])
    hp = KernelHyperparams(np.sqrt(sf2), np.sqrt(sn2), ls)
    Kf = se_kernel(Z, Z, hp)
    Ky = Kf + sn2 * np.eye(N)
    try:
        L = linalg.cholesky(Ky, lower=True)
    except linalg.LinAlgError:
        return -np.inf, None
    alpha = linalg.cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * N * np.log(2 * np.pi)
    inner = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(N))
    grad = np.empty(d + 2)
    grad[0] = np.sum(inner * Kf)
    grad[1] = sn2 * np.trace(inner)
    for k in range(d):
        dk = ((Z[:, k, None] - Z[None, :, k]) / ls[k]) ** 2
        grad[2 + k] = 0.5 * np.sum(inner * Kf * dk)
    return lml, grad


def log_marginal_likelihood(Z, y, hp):
    """Log marginal likelihood of one target column under `hp`."""
    lp = np.concatenate(([np.log(hp.signal_std), np.log(max(hp.noise_std, 1e-300))], np.log(hp.lengthscales)))
    return _lml_and_grad(np.atleast_2d(Z), np.asarray(y, dtype=float), lp)[0]


@dataclass
class HyperparamFit:
    """Result of :func:`train_hyperparams`."""

    hyperparams: list
    log_marginal_likelihood: list
    degraded: bool = False
    trace: list = field(default_factory=list, repr=False)


# log-parameter box keeps the noise away from exact zero
_LOG_NOISE_MIN = np.log(1e-6)
_LOG_MAX = np.log(1e4)


def _ascend(objective, x0, max_iter, trace):
    """Quasi-Newton gradient ascent with backtracking; accepted steps never decrease the objective."""
    lo = np.full_like(x0, -_LOG_MAX)
    lo[1] = _LOG_NOISE_MIN
    hi = np.full_like(x0, _LOG_MAX)
    x = np.clip(x0, lo, hi)
    f, g = objective(x)
    trace.append(f)
    if not np.isfinite(f):
        return x, f, False
    H = np.eye(x.size)
    ok = True
    for _ in range(max_iter):
        d = H @ g
        if d @ g <= 0:
            H = np.eye(x.size)
            d = g.copy()
        d *= min(1.0, 3.0 / max(np.abs(d).max(), 1e-300))
        t = 1.0
        for _ in range(40):
            x_new = np.clip(x + t * d, lo, hi)
            f_new, g_new = objective(x_new)
            if np.isfinite(f_new) and f_new >= f + 1e-4 * max(g @ (x_new - x), 0.0):
                break
            if np.abs(x_new - x).max() < 1e-10:
                # step collapsed against the box or below roundoff: stationary
                return x, f, True
            t *= 0.5
        else:
            ok = False
            break
        s, yv = x_new - x, g_new - g
        trace.append(f_new)
        converged = abs(f_new - f) <= 1e-9 * max(1.0, abs(f)) or np.abs(s).max() < 1e-8
        x, f, g = x_new, f_new, g_new
        sy = -(s @ yv)  # ascent on f == descent on -f
        if sy > 1e-12:
            rho = 1.0 / sy
            V = np.eye(x.size) + rho * np.outer(s, yv)
            H = V @ H @ V.T + rho * np.outer(s, s)
        if converged:
            break
    return x, f, ok


def train_hyperparams(data, init, restarts=5, seed=0, shared=False, max_iter=200):
    """
    Maximize the log marginal likelihood over log-hyperparameters.

    Parameters
    ----------
    data : TrainingSet
    init : KernelHyperparams
        Starting point for the first restart; later restarts perturb it.
    restarts : int
        Number of initializations per output column.
    shared : bool
        Train one hyperparameter set maximizing the summed LML of all columns.

    Returns
    -------
    HyperparamFit
        ``degraded`` is set when every restart of some column failed its
        line search; the best iterate found is returned regardless.
    """
    if len(data) < 2:
        raise ValueError("hyperparameter training needs at least two samples")
    if init.dim != data.input_dim:
        raise ValueError("lengthscale count does not match input dimension")
    rng = np.random.default_rng(seed)
    x_init = np.concatenate(([np.log(init.signal_std), np.log(max(init.noise_std, 1e-6))], np.log(init.lengthscales)))
    Z = data.inputs
    columns = [list(range(data.output_dim))] if shared else [[j] for j in range(data.output_dim)]

    hps, lmls, degraded, trace = [], [], False, []
    for cols in columns:

        def objective(lp, cols=cols):
            total, grad = 0.0, np.zeros_like(lp)
            for j in cols:
                f, g = _lml_and_grad(Z, data.targets[:, j], lp)
                if not np.isfinite(f):
                    return -np.inf, None
                total += f
                grad += g
            return total, grad

        best_x, best_f, any_ok = None, -np.inf, False
        for r in range(max(1, restarts)):
            x0 = x_init if r == 0 else x_init + rng.normal(scale=1.0, size=x_init.size)
            path = []
            x, f, ok = _ascend(objective, x0, max_iter, path)
            trace.append(path)
            any_ok |= ok
            if f > best_f:
                best_x, best_f = x, f
        if best_x is None:
            best_x, best_f = x_init, objective(x_init)[0]
        degraded |= not any_ok
        hp = KernelHyperparams(np.exp(best_x[0]), np.exp(best_x[1]), np.exp(best_x[2:]))
        hps.extend([hp] * len(cols))
        lmls.extend([best_f / len(cols)] * len(cols))
    if degraded:
        log.warning("hyperparameter training degraded: line search failed on every restart")
    return HyperparamFit(hps, lmls, degraded, trace)
