"""Self-contained oracle checks run by ``ucosdot verify``."""

from __future__ import annotations

import numpy as np

from .diffusion import mixture_rate_check
from .dotfwd import (ForwardModel, Instrument, OpticalField, difference_data, forward_data,
                     patches_at_fractions)
from .gaussian import CovarianceOperator, analytic_posterior, gaussian_posterior_score, ou_covariance
from .grid import Grid
from .operator import DenseMatrixOperator
from .ucos import UcosProblem, conditional_score, gaussian_r

__all__ = ["random_gaussian_instance", "gaussian_ucos_error", "mixture_rate_ratio",
           "jacobian_fd_error", "run_all"]


def random_gaussian_instance(rng, side=None, m=None, ou=None):
    """Small linear-Gaussian problem with a random dense operator.

    Returns ``(problem, prior_mean, prior_cov, posterior)``.
    """
    side = side or int(rng.integers(2, 5))
    g = Grid(side, 10.0)
    n = g.n_pixels
    m = m or int(rng.integers(1, min(8, n) + 1))
    shape = (1,) + g.shape
    A = DenseMatrixOperator(rng.standard_normal((m, n)), shape)
    ou = bool(rng.integers(2)) if ou is None else ou
    C = ou_covariance(g, 1.0, float(rng.uniform(2, 8))) if ou else CovarianceOperator.identity(shape)
    G = CovarianceOperator.diagonal(rng.uniform(0.1, 1.0, m))
    S = ou_covariance(g, float(rng.uniform(0.3, 1.5)), float(rng.uniform(2, 8)))
    mean = 0.3 * rng.standard_normal(shape)
    y = rng.standard_normal(m)
    prob = UcosProblem(A, C, G, y)
    return prob, mean, S, analytic_posterior(A, G, mean, S, y)


def gaussian_ucos_error(n_instances=20, times=(0.05, 0.2, 0.5, 0.9), seed=0):
    """Worst relative gap between the UCoS score with exact Gaussian ``r`` and
    the analytic posterior score."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        prob, mean, S, post = random_gaussian_instance(rng)
        r = gaussian_r(prob, mean, S)
        for t in times:
            tau = prob.sched.effective_time(t)
            x = rng.standard_normal((4,) + prob.field_shape)
            got = conditional_score(prob, r, x, tau)
            want = gaussian_posterior_score(post, prob.C, x, tau)
            worst = max(worst, float(np.linalg.norm(got - want) / np.linalg.norm(want)))
    return worst


def mixture_rate_ratio():
    table = dict(mixture_rate_check((0.0, 1.0), (1.0, 2.0), 0.5, 0.3, [0.05, 0.1]))
    return table[0.05] / table[0.1]


def jacobian_fd_error(n=16, n_src=4, n_det=4, h=1e-6, columns=(0, 37, 120, 255), seed=0):
    """Worst relative column gap between the adjoint Jacobian and forward differences."""
    k = np.arange(n_src)
    kd = np.arange(n_det)
    inst = Instrument(patches_at_fractions((k + 0.1) / n_src, 2.0, 50.0),
                      patches_at_fractions((kd + 0.6) / n_det, 2.0, 50.0))
    rng = np.random.default_rng(seed)
    bg = OpticalField(0.01 + 0.002 * rng.random((n, n)), 1.0 + 0.2 * rng.random((n, n)))
    fm = ForwardModel(bg, inst)
    j_mua, j_mus = fm.jacobian_dense()
    y0 = fm.measurements()
    worst = 0.0
    for p in columns:
        e = np.zeros(n * n)
        e[p] = h
        e = e.reshape(n, n)
        for J, pert in ((j_mua, bg.perturbed(dmua=e)), (j_mus, bg.perturbed(dmus=e))):
            fd = difference_data(forward_data(pert, inst), y0) / h
            worst = max(worst, float(np.linalg.norm(fd - J[:, p]) / np.linalg.norm(fd)))
    return worst


def run_all():
    """Return ``[(name, passed, detail)]``."""
    out = []
    err = gaussian_ucos_error()
    out.append(("gaussian-ucos", err < 1e-6, f"max relative error {err:.2e} (limit 1e-6)"))
    ratio = mixture_rate_ratio()
    out.append(("mixture-rate", 0.4 <= ratio <= 0.65, f"error ratio {ratio:.4f} (range [0.4, 0.65])"))
    jerr = jacobian_fd_error()
    out.append(("jacobian-fd", jerr < 1e-3, f"max relative column error {jerr:.2e} (limit 1e-3)"))
    return out

