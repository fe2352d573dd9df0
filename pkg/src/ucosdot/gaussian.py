"""Gaussian priors, the analytic linear-Gaussian posterior and its diffused score."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .grid import Grid
from .operator import DimensionError, LinearOperator

__all__ = [
    "NumericalError",
    "CovarianceOperator",
    "GaussianPosterior",
    "GaussianScore",
    "ou_covariance",
    "sample_gaussian",
    "analytic_posterior",
    "tikhonov_map",
    "gaussian_posterior_score",
    "diffused_moments",
]

PSD_TOL = 1e-10


class NumericalError(ArithmeticError):
    """A factorisation or linear solve failed."""


class CovarianceOperator:
    """Symmetric positive semi-definite operator on fields.

    ``mode`` is ``"identity"``, ``"diagonal"`` or ``"dense"``.  In dense mode
    ``matrix`` is one block that is repeated ``channels`` times along the
    diagonal (independent identical channels); the full dimension is
    ``channels * matrix.shape[0]``.

    Vectors passed to the methods may be flat (trailing axis ``dim``) or
    shaped like ``field_shape``; the output mirrors the input.
    """

    def __init__(self, mode, dim=None, *, variances=None, matrix=None, channels=1,
                 field_shape=None):
        if mode not in ("identity", "diagonal", "dense"):
            raise ValueError(f"unknown covariance mode {mode!r}")
        self.mode = mode
        self.channels = int(channels)
        if mode == "identity":
            if dim is None:
                dim = int(np.prod(field_shape))
            self.block_dim = int(dim) // self.channels
        elif mode == "diagonal":
            variances = np.asarray(variances, dtype=float).ravel()
            if np.any(variances < 0):
                raise ValueError("diagonal covariance needs non-negative variances")
            self.variances = variances
            self.block_dim = variances.size
            self.channels = 1
        else:
            matrix = np.asarray(matrix, dtype=float)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
                raise DimensionError("dense covariance needs a square matrix")
            scale = max(np.abs(matrix).max(), 1e-300)
            if np.abs(matrix - matrix.T).max() > 1e-12 * scale:
                raise ValueError("dense covariance is not symmetric")
            self.matrix = 0.5 * (matrix + matrix.T)
            self.block_dim = matrix.shape[0]
        self.dim = self.block_dim * self.channels
        if field_shape is None:
            field_shape = (self.dim,)
        if int(np.prod(field_shape)) != self.dim:
            raise DimensionError(f"field shape {field_shape} does not have {self.dim} entries")
        self.field_shape = tuple(field_shape)

    @classmethod
    def identity(cls, field_shape):
        return cls("identity", field_shape=tuple(np.atleast_1d(field_shape)))

    @classmethod
    def diagonal(cls, variances, field_shape=None):
        return cls("diagonal", variances=variances, field_shape=field_shape)

    @classmethod
    def dense(cls, matrix, channels=1, field_shape=None):
        return cls("dense", matrix=matrix, channels=channels, field_shape=field_shape)

    # --- shape plumbing -------------------------------------------------
    def _split(self, v):
        v = np.asarray(v, dtype=float)
        nd = len(self.field_shape)
        if v.shape[-nd:] == self.field_shape:
            lead = v.shape[:-nd]
        elif v.shape[-1:] == (self.dim,):
            lead = v.shape[:-1]
        else:
            raise DimensionError(f"vector of shape {v.shape} does not match {self.field_shape}")
        return v.reshape(lead + (self.channels, self.block_dim)), v.shape

    def _blockwise(self, v, mat):
        blocks, shape = self._split(v)
        return (blocks @ mat.T).reshape(shape)

    # --- factorisation --------------------------------------------------
    @cached_property
    def _factor(self):
        """Return ``(kind, L)`` with ``L L^T`` equal to the dense block."""
        try:
            return "chol", np.linalg.cholesky(self.matrix)
        except np.linalg.LinAlgError:
            pass
        w, V = np.linalg.eigh(self.matrix)
        lam_max = max(w.max(), 0.0)
        if w.min() < -PSD_TOL * max(lam_max, 1e-300):
            raise NumericalError(
                f"covariance is indefinite: smallest eigenvalue {w.min():.3e}, "
                f"largest {lam_max:.3e}"
            )
        return "eig", V * np.sqrt(np.clip(w, 0.0, None))

    def sqrt_factor(self):
        """Dense square-root block ``L`` with ``L L^T = C_block``."""
        if self.mode == "identity":
            return np.eye(self.block_dim)
        if self.mode == "diagonal":
            return np.diag(np.sqrt(self.variances))
        return self._factor[1]

    # --- actions --------------------------------------------------------
    def apply(self, v):
        if self.mode == "identity":
            self._split(v)
            return np.array(v, dtype=float)
        if self.mode == "diagonal":
            blocks, shape = self._split(v)
            return (blocks * self.variances).reshape(shape)
        return self._blockwise(v, self.matrix)

    def sqrt_apply(self, z):
        """Return ``C^{1/2} z`` using the lower-triangular or eigen factor."""
        if self.mode == "identity":
            self._split(z)
            return np.array(z, dtype=float)
        if self.mode == "diagonal":
            blocks, shape = self._split(z)
            return (blocks * np.sqrt(self.variances)).reshape(shape)
        return self._blockwise(z, self._factor[1])

    def solve(self, v):
        """Return ``C^{-1} v``."""
        if self.mode == "identity":
            self._split(v)
            return np.array(v, dtype=float)
        if self.mode == "diagonal":
            if np.any(self.variances <= 0):
                raise NumericalError("singular diagonal covariance")
            blocks, shape = self._split(v)
            return (blocks / self.variances).reshape(shape)
        kind, L = self._factor
        if kind != "chol":
            raise NumericalError("covariance is singular; cannot solve")
        blocks, shape = self._split(v)
        flat = blocks.reshape(-1, self.block_dim).T
        out = sla.cho_solve((L, True), flat)
        return out.T.reshape(shape)

    def inv_sqrt_apply(self, z):
        """Return a vector with covariance ``C^{-1}`` given white ``z``.

        For diagonal covariances this is ``C^{-1/2} z`` exactly; for dense
        ones it is ``L^{-T} z``.
        """
        if self.mode == "identity":
            self._split(z)
            return np.array(z, dtype=float)
        if self.mode == "diagonal":
            blocks, shape = self._split(z)
            return (blocks / np.sqrt(self.variances)).reshape(shape)
        kind, L = self._factor
        if kind != "chol":
            raise NumericalError("covariance is singular")
        blocks, shape = self._split(z)
        flat = blocks.reshape(-1, self.block_dim).T
        out = sla.solve_triangular(L, flat, lower=True, trans="T")
        return out.T.reshape(shape)

    def block_dense(self):
        if self.mode == "identity":
            return np.eye(self.block_dim)
        if self.mode == "diagonal":
            return np.diag(self.variances)
        return self.matrix.copy()

    def to_dense(self):
        return np.kron(np.eye(self.channels), self.block_dense())

    def diag(self):
        if self.mode == "identity":
            return np.ones(self.dim)
        if self.mode == "diagonal":
            return self.variances.copy()
        return np.tile(np.diag(self.matrix), self.channels)


@dataclass
class GaussianPosterior:
    """Gaussian law ``N(mean, covariance)`` over fields."""

    mean: np.ndarray
    covariance: CovarianceOperator

    def __post_init__(self):
        if not np.all(np.isfinite(self.mean)):
            raise NumericalError("posterior mean is not finite")


def ou_covariance(grid: Grid, sigma: float, ell: float, channels: int = 1) -> CovarianceOperator:
    """Exponential (Ornstein-Uhlenbeck) covariance over the pixel centres.

    Entries are ``sigma^2 exp(-|r_i - r_j| / ell)``; multi-channel fields get
    independent identical blocks.
    """
    if not sigma > 0 or not ell > 0:
        raise ValueError(f"OU covariance needs sigma > 0 and ell > 0, got {sigma}, {ell}")
    pts = grid.center_points()
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    mat = sigma**2 * np.exp(-dist / ell)
    return CovarianceOperator.dense(mat, channels=channels,
                                    field_shape=(channels,) + grid.shape)


def sample_gaussian(mean, cov: CovarianceOperator, rng, size=None):
    """Draw ``mean + C^{1/2} z`` with ``z`` standard normal.

    ``size`` adds leading sample axes.
    """
    mean = np.asarray(mean, dtype=float)
    lead = () if size is None else tuple(np.atleast_1d(size))
    z = rng.standard_normal(lead + mean.shape)
    return mean + cov.sqrt_apply(z)


def _dense_forward(A: LinearOperator):
    return A.to_dense()


def analytic_posterior(A: LinearOperator, gamma_obs: CovarianceOperator, prior_mean,
                       prior_cov: CovarianceOperator, y) -> GaussianPosterior:
    """Posterior of ``y = A x + e`` with Gaussian prior and noise.

    ``mean = m + S A^T (A S A^T + G)^{-1} (y - A m)`` and
    ``cov = S - S A^T (A S A^T + G)^{-1} A S``.
    """
    prior_mean = np.asarray(prior_mean, dtype=float)
    y = np.asarray(y, dtype=float)
    Am = _dense_forward(A)
    S = prior_cov.to_dense()
    G = gamma_obs.to_dense()
    SAt = S @ Am.T
    gram = Am @ SAt + G
    gram = 0.5 * (gram + gram.T)
    try:
        cf = sla.cho_factor(gram, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"A S A^T + Gamma_obs is singular: {exc}") from exc
    resid = y - Am @ prior_mean.ravel()
    mean = prior_mean.ravel() + SAt @ sla.cho_solve(cf, resid)
    cov = S - SAt @ sla.cho_solve(cf, SAt.T)
    cov = 0.5 * (cov + cov.T)
    shape = prior_mean.shape
    return GaussianPosterior(mean.reshape(shape),
                             CovarianceOperator.dense(cov, field_shape=shape))


def tikhonov_map(A: LinearOperator, gamma_obs: CovarianceOperator, prior_mean,
                 prior_cov: CovarianceOperator, y):
    """Minimiser of ``|y - A x|^2_G + |x - m|^2_S`` via the normal equations."""
    prior_mean = np.asarray(prior_mean, dtype=float)
    Am = _dense_forward(A)
    Gi_A = np.linalg.solve(gamma_obs.to_dense(), Am)
    Si = np.linalg.inv(prior_cov.to_dense())
    lhs = Am.T @ Gi_A + Si
    rhs = Gi_A.T @ np.asarray(y, dtype=float) + Si @ prior_mean.ravel()
    return np.linalg.solve(lhs, rhs).reshape(prior_mean.shape)


def gaussian_posterior_score(post: GaussianPosterior, C: CovarianceOperator, x, tau):
    """Score ``C ((1 - e^-tau) C + e^-tau G_post)^{-1} (e^{-tau/2} mean - x)``.

    Direct dense solve; see :class:`GaussianScore` for the pre-factorised
    version used inside samplers.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = np.asarray(x, dtype=float)
    Cd = C.to_dense()
    M = (1 - np.exp(-tau)) * Cd + np.exp(-tau) * post.covariance.to_dense()
    shape = x.shape
    flat = x.reshape(-1, Cd.shape[0])
    rhs = np.exp(-tau / 2) * post.mean.ravel() - flat
    try:
        sol = np.linalg.solve(M, rhs.T)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular diffused covariance at tau={tau}") from exc
    return (Cd @ sol).T.reshape(shape)


class GaussianScore:
    """Diffused score of ``N(mean, G_post)`` with both covariances co-diagonalised.

    Solves ``G_post v = mu C v`` once (``V^T C V = I``) so each evaluation is
    ``C V diag(1 / (1 - e^-tau + e^-tau mu)) V^T (e^{-tau/2} mean - x)``.
    """

    def __init__(self, post: GaussianPosterior, C: CovarianceOperator):
        self.post = post
        self.shape = post.mean.shape
        Cd = C.to_dense()
        P = post.covariance.to_dense()
        try:
            mu, V = sla.eigh(P, Cd)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"cannot co-diagonalise posterior and diffusion covariances: {exc}") from exc
        self.mu = np.clip(mu, 0.0, None)
        self.V = V
        self.CV = Cd @ V
        self.mean_flat = post.mean.ravel()

    def __call__(self, x, tau):
        x = np.asarray(x, dtype=float)
        lead = x.shape[: x.ndim - len(self.shape)]
        flat = x.reshape(lead + (-1,))
        d = 1.0 / ((1 - np.exp(-tau)) + np.exp(-tau) * self.mu)
        r = np.exp(-tau / 2) * self.mean_flat - flat
        out = ((r @ self.V) * d) @ self.CV.T
        return out.reshape(x.shape)


def diffused_moments(post: GaussianPosterior, C: CovarianceOperator, tau):
    """Mean and covariance of ``e^{-tau/2} X_0 + sqrt(1 - e^-tau) C^{1/2} Z``."""
    mean = np.exp(-tau / 2) * post.mean
    cov = np.exp(-tau) * post.covariance.to_dense() + (1 - np.exp(-tau)) * C.to_dense()
    return mean, cov
