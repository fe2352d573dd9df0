"""Unconditional denoiser training and diffusion posterior sampling (DPS).

The unconditional model is a denoiser ``D(x, t) ~ E[X_0 | X_tau = x]``; the
prior score follows from Tweedie's identity as
``s = (e^{-tau/2} D - x) / (1 - e^{-tau})``.  DPS adds the C-preconditioned
gradient of the data misfit evaluated at the denoised estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .diffusion import DiffusionSchedule, chain_streams, reverse_em
from .ensemble import SampleEnsemble
from .gaussian import CovarianceOperator
from .network import ScoreNetwork
from .ucos import TrainingConfig, UcosProblem, fit

__all__ = [
    "DpsConfig",
    "train_unconditional",
    "denoiser_score",
    "fidelity_gradient",
    "dps_score",
    "sample_dps",
]


@dataclass(frozen=True)
class DpsConfig:
    """``rho`` scales the fidelity step; with ``normalize_by_residual`` the
    step is ``rho / |y - A x0_hat|_G`` per chain."""

    rho: float = 1.0
    normalize_by_residual: bool = True
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")


def train_unconditional(dataset, net: ScoreNetwork, cfg: TrainingConfig,
                        C: CovarianceOperator, sched: DiffusionSchedule | None = None):
    """Fit ``net(e^{-tau/2} x0 + sqrt(1 - e^{-tau}) C^{1/2} z, t) ~ x0``."""
    sched = sched or DiffusionSchedule()

    def make_input(x0, t, rng):
        tau = sched.effective_time(t)
        shape = (-1,) + (1,) * (x0.ndim - 1)
        mean_scale = np.exp(-tau / 2).reshape(shape)
        noise_scale = np.sqrt(-np.expm1(-tau)).reshape(shape)
        z = rng.standard_normal(x0.shape)
        return mean_scale * x0 + noise_scale * C.sqrt_apply(z)

    make_input.sched = sched
    return fit(net, dataset, cfg, make_input)


def _denoise(model, x, tau, sched, requires_grad=False):
    t = float(sched.raw_time(tau))
    if isinstance(model, ScoreNetwork):
        model = model._detached()
    xt = Tensor(x, requires_grad=requires_grad)
    single = xt.ndim == 3
    inp = xt.reshape((1,) + xt.shape) if single else xt
    out = model.forward(inp, t)
    return xt, (out.reshape(xt.shape) if single else out)


def denoiser_score(model, x, tau, sched: DiffusionSchedule):
    """Prior score implied by the denoiser via Tweedie's identity."""
    _, d = _denoise(model, np.asarray(x, dtype=float), tau, sched)
    return (math.exp(-tau / 2) * d.data - x) / (-math.expm1(-tau))


def fidelity_gradient(model, problem: UcosProblem, x, tau, sched: DiffusionSchedule):
    """``grad_x |y - A D(x)|^2_G`` by reverse-mode through the denoiser.

    Returns ``(gradient, x0_hat, residual_norm)`` with the residual norm
    measured in the ``G``-weighted norm, one value per leading batch entry.
    Non-finite values are left in place so the sampler retires only the
    affected chain.
    """
    x = np.asarray(x, dtype=float)
    xt, d = _denoise(model, x, tau, sched, requires_grad=True)
    resid = problem.y - problem.A.apply(d.data)
    weighted = problem.gamma_obs.solve(resid)
    seed = -2.0 * problem.A.adjoint(weighted).reshape(d.shape)
    d.backward(seed)
    grad = xt.grad
    norms = np.sqrt(np.maximum((resid * weighted).sum(axis=-1), 0.0))
    return grad, d.data, norms


def dps_score(model, problem: UcosProblem, x, tau, cfg: DpsConfig, return_residual=False):
    """``s_prior(x) - rho_eff C grad_x |y - A D(x)|^2_G``."""
    x = np.asarray(x, dtype=float)
    sched = cfg.schedule
    if cfg.rho == 0.0:
        s = denoiser_score(model, x, tau, sched)
        if return_residual:
            _, d = _denoise(model, x, tau, sched)
            resid = problem.y - problem.A.apply(d.data)
            return s, np.sqrt((resid * problem.gamma_obs.solve(resid)).sum(axis=-1))
        return s
    grad, d, norms = fidelity_gradient(model, problem, x, tau, sched)
    prior = (math.exp(-tau / 2) * d - x) / (-math.expm1(-tau))
    rho = cfg.rho / np.maximum(norms, 1e-300) if cfg.normalize_by_residual else np.full_like(norms, cfg.rho)
    rho = np.asarray(rho).reshape(np.shape(rho) + (1,) * (x.ndim - np.ndim(rho)))
    s = prior - rho * problem.C.apply(grad)
    return (s, norms) if return_residual else s


def sample_dps(problem: UcosProblem, model, cfg: DpsConfig, n_samples, master_seed,
               config_digest="") -> SampleEnsemble:
    """Reverse Euler-Maruyama driven by :func:`dps_score`.

    The per-step mean residual ``|y - A x0_hat|_G`` over live chains is kept in
    ``ensemble.diagnostics["residual"]``.
    """
    if problem.y is None:
        raise ValueError("sampling needs a data vector")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    trace = []

    def score(x, tau):
        s, norms = dps_score(model, problem, x, tau, cfg, return_residual=True)
        trace.append(float(np.mean(norms)))
        return s

    streams = chain_streams(master_seed, n_samples)
    states, failed = reverse_em(score, problem.C, cfg.schedule, streams, problem.field_shape)
    ens = SampleEnsemble(states, "dps", master_seed, config_digest, failed)
    ens.diagnostics["residual"] = np.array(trace)
    return ens
