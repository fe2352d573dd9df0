"""Unconditional-to-conditional score (UCoS): training and posterior sampling.

Notation, all at effective time ``tau``::

    a        = e^tau - 1
    lambda   = 1 / (e^{tau/2} - e^{-tau/2})
    F        = C A* G^{-1} A                       (G = observation covariance)
    R        = (I / a + F)^{-1}
    Sigma    = R C
    xi(x)    = C A* G^{-1} y + lambda x

A measurement-independent map ``r(eta, tau)`` trained on ``eta = R^{-1} x_tau``
yields the conditional score ``lambda (r(xi(x), tau) - e^{tau/2} x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .autodiff import Tensor
from .diffusion import DiffusionSchedule, chain_streams, reverse_em
from .ensemble import SampleEnsemble
from .gaussian import CovarianceOperator, GaussianPosterior, GaussianScore, analytic_posterior
from .network import OptimizerState, ScoreNetwork, TrainingError, adamw_step
from .operator import DimensionError, LinearOperator

__all__ = [
    "UcosProblem",
    "TrainingConfig",
    "lambda_coeff",
    "xi",
    "sample_training_input",
    "training_input_covariance",
    "explicit_operators",
    "check_sigma_psd",
    "LearnedR",
    "gaussian_r",
    "conditional_score",
    "regularized_score",
    "fit",
    "train",
    "sample_posterior",
    "sample_gaussian_posterior",
]


def lambda_coeff(tau):
    """``1 / (e^{tau/2} - e^{-tau/2})``; zero at ``tau = inf``."""
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(~(tau_arr > 0)):
        raise ValueError(f"tau must be positive, got {tau}")
    with np.errstate(over="ignore"):
        out = 0.5 / np.sinh(0.5 * tau_arr)
    return float(out) if out.ndim == 0 else out


@dataclass
class UcosProblem:
    """Linear inverse problem ``y = A x + e`` with diffusion covariance ``C``."""

    A: LinearOperator
    C: CovarianceOperator
    gamma_obs: CovarianceOperator
    y: np.ndarray | None = None
    sched: DiffusionSchedule = field(default_factory=DiffusionSchedule)

    def __post_init__(self):
        if self.A.domain_dim != self.C.dim:
            raise DimensionError(
                f"operator domain {self.A.domain_dim} does not match covariance dimension {self.C.dim}")
        if self.A.codomain_dim != self.gamma_obs.dim:
            raise DimensionError(
                f"operator codomain {self.A.codomain_dim} does not match noise dimension {self.gamma_obs.dim}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float).ravel()
            if self.y.size != self.A.codomain_dim:
                raise DimensionError(f"data length {self.y.size} does not match {self.A.codomain_dim}")

    @property
    def field_shape(self):
        return self.C.field_shape

    def _to_field(self, v):
        v = np.asarray(v)
        return v.reshape(v.shape[: v.ndim - len(self.A.domain_shape)] + self.field_shape)

    def backproject(self, d):
        """``C A* G^{-1} d`` as a field."""
        return self.C.apply(self._to_field(self.A.adjoint(self.gamma_obs.solve(d))))

    def fisher_apply(self, x):
        """``F x = C A* G^{-1} A x`` for a field or a batch of fields."""
        return self.backproject(self.A.apply(x))

    @cached_property
    def gamma(self):
        """Data term ``C A* G^{-1} y``, computed once per problem."""
        if self.y is None:
            raise ValueError("problem has no data vector")
        return self.backproject(self.y)

    @cached_property
    def _spectral(self):
        """Factors with ``F = left diag(mu) right^T`` and ``left right^T = I``.

        From ``C = L L^T`` and the symmetric eigenproblem
        ``L^T A* G^{-1} A L = W diag(mu) W^T``: ``left = L W``,
        ``right = L^{-T} W``.
        """
        Cd = self.C.to_dense()
        L = np.linalg.cholesky(Cd)
        Am = self.A.to_dense()
        B = Am.T @ self.gamma_obs.solve(Am.T).T
        LBL = L.T @ B @ L
        mu, W = np.linalg.eigh(0.5 * (LBL + LBL.T))
        right = np.linalg.solve(L.T, W)
        return np.clip(mu, 0.0, None), L @ W, right

    @property
    def kappa(self) -> float:
        """Largest eigenvalue of ``F``."""
        return float(self._spectral[0].max())

    def apply_R(self, eta, tau):
        """``R_tau eta = (I / a + F)^{-1} eta``; ``tau`` scalar or one per sample."""
        eta = np.asarray(eta, dtype=float)
        mu, left, right = self._spectral
        nd = len(self.field_shape)
        lead = eta.shape[: eta.ndim - nd]
        a = np.expm1(np.asarray(tau, dtype=float)).reshape(np.shape(tau) + (1,))
        coef = eta.reshape(lead + (-1,)) @ right
        coef = coef / (1.0 / a + mu)
        return (coef @ left.T).reshape(eta.shape)

    def with_data(self, y):
        return UcosProblem(self.A, self.C, self.gamma_obs, y, self.sched)


def xi(problem: UcosProblem, x, tau):
    """``C A* G^{-1} y + lambda(tau) x`` (zero data term when ``y`` is unset)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-len(problem.field_shape):] != problem.field_shape:
        raise DimensionError(f"state shape {x.shape} does not match {problem.field_shape}")
    base = lambda_coeff(tau) * x
    return base if problem.y is None else base + problem.gamma


def _per_sample(v, x):
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (x.ndim - v.ndim)) if v.ndim else v


def sample_training_input(problem: UcosProblem, x0, tau, rng):
    """Draw ``R^{-1} x_tau`` given clean fields ``x0`` without forming ``R``.

    ``(I/a + F) x0 + a^{-1/2} C^{1/2} z1 + C A* G^{-1/2} z2`` with
    ``a = e^tau - 1``.  ``tau`` may be a scalar or one value per sample.
    """
    x0 = np.asarray(x0, dtype=float)
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(~(tau_arr > 0)):
        raise ValueError(f"tau must be positive, got {tau}")
    a = _per_sample(np.expm1(tau_arr), x0)
    lead = x0.shape[: x0.ndim - len(problem.field_shape)]
    z1 = rng.standard_normal(x0.shape)
    z2 = rng.standard_normal(lead + (problem.A.codomain_dim,))
    noise_data = problem.C.apply(
        problem._to_field(problem.A.adjoint(problem.gamma_obs.inv_sqrt_apply(z2))))
    return x0 / a + problem.fisher_apply(x0) + problem.C.sqrt_apply(z1) / np.sqrt(a) + noise_data


def explicit_operators(problem: UcosProblem, tau):
    """Dense ``R``, ``Sigma``, ``C_tau``, ``lambda`` at ``tau`` for small problems.

    ``C_tau = a A C A* + G`` and ``R = a I - a^2 C A* C_tau^{-1} A``.
    """
    a = math.expm1(tau)
    Am = problem.A.to_dense()
    Cd = problem.C.to_dense()
    G = problem.gamma_obs.to_dense()
    C_tau = a * Am @ Cd @ Am.T + G
    R = a * np.eye(Cd.shape[0]) - a * a * Cd @ Am.T @ np.linalg.solve(C_tau, Am)
    return {"R": R, "Sigma": R @ Cd, "C_tau": C_tau, "lambda": lambda_coeff(tau)}


def training_input_covariance(problem: UcosProblem, tau):
    """Covariance of ``R^{-1} x_tau`` given ``x0``: ``R^{-1} Sigma R^{-T}``."""
    ops = explicit_operators(problem, tau)
    Rinv = np.linalg.inv(ops["R"])
    return Rinv @ ops["Sigma"] @ Rinv.T


def check_sigma_psd(problem: UcosProblem, taus, tol=1e-10):
    """Return ``[(tau, min_eig)]`` for every ``tau`` where ``Sigma`` is not PSD."""
    bad = []
    for tau in taus:
        S = explicit_operators(problem, tau)["Sigma"]
        S = 0.5 * (S + S.T)
        w = np.linalg.eigvalsh(S)
        if w.min() < -tol * max(abs(w.max()), 1e-300):
            bad.append((float(tau), float(w.min())))
    return bad


# ----------------------------------------------------------------------------
# r maps


class LearnedR:
    """Network-backed ``r(eta, tau)``.

    The network sees the preconditioned input ``e^{-tau/2} R_tau eta``, which is
    ``e^{-tau/2} x0`` plus Gaussian noise of covariance ``e^{-tau} Sigma_tau``,
    so it acts as a denoiser with O(1) inputs at every ``tau``.  Its time
    channel is the raw diffusion time.
    """

    def __init__(self, net: ScoreNetwork, problem: UcosProblem):
        self.net = net
        self.problem = problem
        self.sched = problem.sched

    def network_input(self, eta, tau):
        tau_arr = np.asarray(tau, dtype=float)
        scale = _per_sample(np.exp(-tau_arr / 2), np.asarray(eta))
        return scale * self.problem.apply_R(eta, tau)

    def __call__(self, eta, tau):
        t = float(self.sched.raw_time(tau))
        return self.net(self.network_input(eta, tau), t)


def gaussian_r(problem: UcosProblem, prior_mean, prior_cov: CovarianceOperator):
    """Exact ``r`` for the prior ``N(m, S)``: ``m + S (S + Sigma)^{-1} (R eta - m)``."""
    m = np.asarray(prior_mean, dtype=float).ravel()
    S = prior_cov.to_dense()
    shape = problem.field_shape

    def r(eta, tau):
        ops = explicit_operators(problem, tau)
        eta = np.asarray(eta, dtype=float)
        flat = eta.reshape(-1, m.size)
        gain = S @ np.linalg.inv(S + ops["Sigma"])
        out = m + (flat @ ops["R"].T - m) @ gain.T
        return out.reshape(eta.shape[:-len(shape)] + shape) if eta.size else out

    return r


def conditional_score(problem: UcosProblem, r, x, tau):
    """``lambda(tau) (r(xi(x), tau) - e^{tau/2} x)``."""
    x = np.asarray(x, dtype=float)
    return lambda_coeff(tau) * (np.asarray(r(xi(problem, x, tau), tau)) - math.exp(tau / 2) * x)


def regularized_score(s_data, s_gauss, alpha):
    """Convex combination ``(1 - alpha) s_data + alpha s_gauss``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    s_data = np.asarray(s_data, dtype=float)
    s_gauss = np.asarray(s_gauss, dtype=float)
    if s_data.shape != s_gauss.shape:
        raise DimensionError(f"score shapes differ: {s_data.shape} vs {s_gauss.shape}")
    if alpha == 0.0:
        return s_data.copy()
    if alpha == 1.0:
        return s_gauss.copy()
    return (1.0 - alpha) * s_data + alpha * s_gauss


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainingConfig:
    """Mini-batch AdamW settings for denoising score matching.

    ``weighting`` is ``"none"`` (plain squared error) or ``"lambda2"``
    (per-sample weight ``lambda(tau)^2``).
    """

    epochs: int = 20
    batch_size: int = 16
    t_truncation: float = 0.001
    seed: int = 0
    base_lr: float = 0.002
    final_lr: float = 0.0005
    weight_decay: float = 1e-4
    weighting: str = "none"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 < self.t_truncation < 1.0:
            raise ValueError(f"t_truncation must lie in (0, 1), got {self.t_truncation}")
        if self.weighting not in ("none", "lambda2"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


def fit(net: ScoreNetwork, dataset, cfg: TrainingConfig, make_input):
    """Generic regression of ``net(input, t)`` onto clean fields.

    ``make_input(x0, t, rng)`` returns the network input batch for clean
    batch ``x0`` at raw times ``t``.  Loss is the per-pixel mean squared error,
    optionally weighted by ``lambda(tau)^2``.  The per-epoch mean loss is stored
    in ``net.loss_trace``.
    """
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 4 or len(data) == 0:
        raise ValueError("dataset must be a non-empty (N, C, H, W) array")
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * per_epoch
    state = OptimizerState(base_lr=cfg.base_lr, final_lr=cfg.final_lr,
                           weight_decay=cfg.weight_decay)
    names = net.parameter_names
    params = net.parameters()
    npix = int(np.prod(data.shape[1:]))
    sched = getattr(make_input, "sched", DiffusionSchedule())
    trace = []
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            x0 = data[perm[start:start + cfg.batch_size]]
            t = rng.uniform(cfg.t_truncation, 1.0, size=len(x0))
            inp = make_input(x0, t, rng)
            if cfg.weighting == "lambda2":
                w = lambda_coeff(sched.effective_time(t)) ** 2
            else:
                w = np.ones(len(x0))
            net.zero_grad()
            diff = net.forward(inp, t) - x0
            per = (diff * diff).sum(axis=(1, 2, 3)) * (1.0 / npix)
            loss = (per * Tensor(w)).mean()
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at step {step}")
            loss.backward()
            frac = step / (total - 1) if total > 1 else 0.0
            adamw_step(state, [p.data for p in params], [p.grad for p in params], frac, names)
            for name, p in zip(names, params):
                if not np.all(np.isfinite(p.data)):
                    raise TrainingError(f"parameter {name} became non-finite at step {step}")
            losses.append(float(loss.data))
            step += 1
        trace.append(float(np.mean(losses)))
    net.loss_trace = trace
    return net


def train(problem: UcosProblem, dataset, net: ScoreNetwork, cfg: TrainingConfig) -> ScoreNetwork:
    """Fit ``r_theta`` so that ``r_theta(R^{-1} x_tau, t) ~ x0``."""
    data = np.asarray(dataset, dtype=float)
    if data.shape[1:] != problem.field_shape:
        raise DimensionError(f"dataset fields {data.shape[1:]} do not match {problem.field_shape}")
    wrapper = LearnedR(net, problem)
    sched = problem.sched

    def make_input(x0, t, rng):
        tau = sched.effective_time(t)
        return wrapper.network_input(sample_training_input(problem, x0, tau, rng), tau)

    make_input.sched = sched
    return fit(net, data, cfg, make_input)


# ----------------------------------------------------------------------------
# sampling


def sample_gaussian_posterior(post: GaussianPosterior, n_samples, master_seed):
    """Draw directly from ``N(x_bar, G_post)``; chain ``i`` uses stream ``i``."""
    streams = chain_streams(master_seed, n_samples)
    L = post.covariance.sqrt_factor()
    shape = post.mean.shape
    z = np.stack([g.standard_normal(L.shape[1]) for g in streams])
    return post.mean + (z @ L.T).reshape((n_samples,) + shape)


def sample_posterior(problem: UcosProblem, r, alpha, n_samples, master_seed,
                     gaussian_prior=None, config_digest="") -> SampleEnsemble:
    """Reverse Euler-Maruyama with the (regularized) UCoS conditional score.

    ``r`` is a :class:`ScoreNetwork` (wrapped in :class:`LearnedR`) or any
    callable ``r(eta, tau)``.  ``gaussian_prior = (mean, covariance)`` is
    required when ``alpha > 0``.
    """
    if problem.y is None:
        raise ValueError("sampling needs a data vector")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(r, ScoreNetwork):
        r = LearnedR(r, problem)
    g_score = None
    if alpha > 0:
        if gaussian_prior is None:
            raise ValueError("alpha > 0 needs the Gaussian prior (mean, covariance)")
        post = analytic_posterior(problem.A, problem.gamma_obs, gaussian_prior[0],
                                  gaussian_prior[1], problem.y)
        g_score = GaussianScore(post, problem.C)
    _ = problem.gamma

    def score(x, tau):
        if alpha == 1.0:
            return g_score(x, tau)
        s_data = conditional_score(problem, r, x, tau)
        if alpha == 0.0:
            return s_data
        return regularized_score(s_data, g_score(x, tau), alpha)

    streams = chain_streams(master_seed, n_samples)
    states, failed = reverse_em(score, problem.C, problem.sched, streams, problem.field_shape)
    method = "ucos" if alpha == 0.0 else "ucos-reg"
    return SampleEnsemble(states, method, master_seed, config_digest, failed)

