"""Sparse Spectrum GP: random Fourier features with online rank-1 updates.

The information matrix ``A = Phi Phi^T + sigma_n^2 I`` is kept as its upper
Cholesky factor ``R``. Each online sample applies the forgetting-factor
recurrence

    A <- lam * A + (1 - lam) * phi phi^T
    b <- lam * b + (1 - lam) * phi y^T

as a scaling of ``R`` by sqrt(lam) followed by an O(r^2) rank-1 update.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .gpfull import jittered_cholesky

__all__ = ["SpectralBasis", "SsgpState", "cholesky_rank1_update", "sample_basis"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpectralBasis:
    """Random frequencies (d x r) plus the kernel scales they approximate."""

    omega: np.ndarray
    signal_std: float
    noise_std: float
    seed: int

    @property
    def n_freq(self):
        return self.omega.shape[1]

    @property
    def input_dim(self):
        return self.omega.shape[0]

    @property
    def n_features(self):
        return 2 * self.n_freq

    def features(self, Z):
        """Feature matrix, shape (q, 2r), one row per input row."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        proj = Z @ self.omega
        scale = self.signal_std / np.sqrt(self.n_freq)
        return scale * np.hstack((np.cos(proj), np.sin(proj)))

    def feature_map(self, z):
        """phi(z) = sigma_s / sqrt(r) [cos(Omega^T z); sin(Omega^T z)]."""
        return self.features(np.asarray(z, dtype=float).ravel())[0]

    def feature_jacobian(self, Z):
        """d phi / d z, shape (q, 2r, d)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        proj = Z @ self.omega
        scale = self.signal_std / np.sqrt(self.n_freq)
        dcos = -np.sin(proj)[:, :, None] * self.omega.T[None]
        dsin = np.cos(proj)[:, :, None] * self.omega.T[None]
        return scale * np.concatenate((dcos, dsin), axis=1)


def sample_basis(hp, r, seed):
    """
    Draw r frequencies from the SE kernel's spectral density.

    For k(z, z') = s^2 exp(-1/2 d^T W d) the density is N(0, W), i.e.
    each coordinate has standard deviation 1 / lengthscale.
    """
    if r < 1:
        raise ValueError("need at least one frequency")
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((hp.dim, int(r))) / hp.lengthscales[:, None]
    return SpectralBasis(omega, hp.signal_std, hp.noise_std, seed)


def cholesky_rank1_update(R, v):
    """
    In-place update of upper-triangular R so that R^T R gains v v^T.

    Returns False (leaving R partially updated) if a diagonal entry fails to
    stay positive; callers then rebuild from the dense matrix.
    """
    v = np.array(v, dtype=float)
    n = v.size
    for k in range(n):
        vk = v[k]
        if vk == 0.0:
            continue
        rkk = R[k, k]
        r = np.hypot(rkk, vk)
        if not (r > 0.0 and rkk > 0.0):
            return False
        c, s = r / rkk, vk / rkk
        R[k, k] = r
        if k + 1 < n:
            R[k, k + 1:] = (R[k, k + 1:] + s * v[k + 1:]) / c
            v[k + 1:] = c * v[k + 1:] - s * R[k, k + 1:]
    return bool(np.all(np.diag(R) > 0.0))


class SsgpState:
    """
    Bayesian linear regression on random Fourier features, with a shared
    basis and information matrix across all output columns.

    Parameters
    ----------
    basis : SpectralBasis
    output_dim : int
    forgetting : float
        Forgetting factor lambda in (0, 1].
    output_scale : array_like, optional
        Per-column target scale; targets are divided by it internally so a
        single kernel serves outputs of different magnitude.
    """

    def __init__(self, basis, output_dim, forgetting=0.999, output_scale=None):
        if not 0.0 < forgetting <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        self.basis = basis
        self.output_dim = int(output_dim)
        self.forgetting = float(forgetting)
        self.output_scale = (
            np.ones(self.output_dim) if output_scale is None else np.asarray(output_scale, dtype=float).copy()
        )
        nf = basis.n_features
        self.R = basis.noise_std * np.eye(nf)
        self.b = np.zeros((nf, self.output_dim))
        self._w = np.zeros((nf, self.output_dim))
        self._stale = False
        self.n_seen = 0
        self.n_updates = 0
        self.n_rebuilds = 0

    @property
    def input_dim(self):
        return self.basis.input_dim

    @classmethod
    def batch_fit(cls, data, basis, forgetting=0.999, output_scale=None):
        """Posterior from a batch: A = Phi Phi^T + sigma_n^2 I, b = Phi Y."""
        state = cls(basis, data.output_dim, forgetting, output_scale)
        if len(data):
            Phi = basis.features(data.inputs).T
            A = Phi @ Phi.T + basis.noise_std**2 * np.eye(basis.n_features)
            L, _ = jittered_cholesky(A, lower=False)
            state.R = L
            state.b = Phi @ (data.targets / state.output_scale)
            state.n_seen = len(data)
            state.solve_weights()
        return state

    def copy(self):
        new = object.__new__(SsgpState)
        new.__dict__.update(self.__dict__)
        for name in ("R", "b", "_w", "output_scale"):
            setattr(new, name, getattr(self, name).copy())
        return new

    @property
    def A(self):
        return self.R.T @ self.R

    def solve_weights(self):
        """w = (R^T R)^{-1} b via two triangular solves."""
        tmp = linalg.solve_triangular(self.R, self.b, trans="T", lower=False)
        self._w = linalg.solve_triangular(self.R, tmp, lower=False)
        self._stale = False
        return self._w

    @property
    def weights(self):
        if self._stale:
            self.solve_weights()
        return self._w

    def online_update(self, z, y):
        """Fold one sample into R and b; weights are re-solved lazily."""
        z = np.asarray(z, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel() / self.output_scale
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite sample")
        lam = self.forgetting
        phi = self.basis.feature_map(z)
        self.n_seen += 1
        self.n_updates += 1
        if lam == 1.0:
            # the recurrence is a fixed point at lam == 1
            return
        v = np.sqrt(1.0 - lam) * phi
        R_new = np.sqrt(lam) * self.R
        if not cholesky_rank1_update(R_new, v):
            log.warning("rank-1 Cholesky update lost positivity; rebuilding from dense matrix")
            A = lam * self.A + np.outer(v, v)
            R_new, _ = jittered_cholesky(A, lower=False)
            self.n_rebuilds += 1
        self.R = R_new
        self.b = lam * self.b + (1.0 - lam) * np.outer(phi, y)
        self._stale = True

    def update_batch(self, Z, Y):
        """Apply :meth:`online_update` row by row, then re-solve the weights once."""
        Y = np.asarray(Y, dtype=float).reshape(len(Z), -1)
        for z, y in zip(np.atleast_2d(Z), Y):
            self.online_update(z, y)
        self.solve_weights()

    def predict(self, Zs):
        """
        Predictive mean w^T phi and variance sigma_n^2 (1 + phi^T A^{-1} phi).

        Returns
        -------
        mean, var : ndarray, shape (m,) or (q, m)
        """
        Zs = np.asarray(Zs, dtype=float)
        single = Zs.ndim == 1
        Phi = self.basis.features(Zs)
        mean = Phi @ self.weights * self.output_scale
        v = linalg.solve_triangular(self.R, Phi.T, trans="T", lower=False)
        quad = (v**2).sum(0)
        var = self.basis.noise_std**2 * (1.0 + quad)[:, None] * self.output_scale**2
        if single:
            return mean[0], var[0]
        return mean, var

    def predict_mean(self, Zs):
        return self.basis.features(Zs) @ self.weights * self.output_scale

    def predict_mean_gradient(self, Zs):
        """Jacobian of the mean, shape (m, d) or (q, m, d)."""
        Zs = np.asarray(Zs, dtype=float)
        single = Zs.ndim == 1
        J = self.basis.feature_jacobian(Zs)
        grad = np.einsum("fm,qfd->qmd", self.weights, J) * self.output_scale[None, :, None]
        return grad[0] if single else grad

    def to_dict(self):
        return {
            "omega": self.basis.omega.tolist(),
            "signal_std": self.basis.signal_std,
            "noise_std": self.basis.noise_std,
            "seed": self.basis.seed,
            "forgetting": self.forgetting,
            "output_scale": self.output_scale.tolist(),
            "R": self.R.tolist(),
            "b": self.b.tolist(),
            "n_seen": self.n_seen,
        }

    @classmethod
    def from_dict(cls, d):
        basis = SpectralBasis(np.asarray(d["omega"], dtype=float), d["signal_std"], d["noise_std"], d["seed"])
        b = np.asarray(d["b"], dtype=float)
        state = cls(basis, b.shape[1], d["forgetting"], d["output_scale"])
        state.R = np.asarray(d["R"], dtype=float)
        state.b = b
        state.n_seen = d["n_seen"]
        state.solve_weights()
        return state

