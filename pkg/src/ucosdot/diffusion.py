"""Variance-preserving diffusion: schedule, kernel, Tweedie denoiser, reverse sampler.

Conventions
-----------
The forward process is ``dX = -1/2 beta(t) X dt + sqrt(beta(t)) C^{1/2} dB`` with
``beta(t) = beta0 + t (beta1 - beta0)``.  All closed forms are written in the
effective time ``tau(t) = int_0^t beta(s) ds``, so that
``X_t | X_0 ~ N(e^{-tau/2} X_0, (1 - e^{-tau}) C)``.

A *score function* is any callable ``score(x, tau)`` returning
``C grad log q_tau(x)`` with the same shape as ``x``; ``x`` may carry leading
batch axes.

Chains are seeded by splitting a master seed: chain ``i`` of a run with master
seed ``s`` uses ``numpy.random.default_rng(SeedSequence(s).spawn(n)[i])``.  Each
chain first draws its initial white vector, then one white vector per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussian import CovarianceOperator

__all__ = [
    "DiffusionSchedule",
    "DivergenceError",
    "effective_time",
    "perturbation_params",
    "tweedie_denoiser",
    "chain_streams",
    "reverse_em",
    "reverse_em_sample",
    "mixture_rate_check",
]


class DivergenceError(FloatingPointError):
    """A sampler state became non-finite."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state at reverse step {step}")


@dataclass(frozen=True)
class DiffusionSchedule:
    t_min: float = 0.005
    t_max: float = 1.0
    n_steps: int = 500
    beta0: float = 0.05
    beta1: float = 10.0

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max:
            raise ValueError(f"need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if not (self.beta0 > 0 and self.beta1 > 0):
            raise ValueError("beta endpoints must be positive")

    def beta(self, t):
        return self.beta0 + np.asarray(t) * (self.beta1 - self.beta0)

    def effective_time(self, t):
        return effective_time(self, t)

    def raw_time(self, tau):
        """Inverse of :meth:`effective_time`."""
        tau = np.asarray(tau, dtype=float)
        db = self.beta1 - self.beta0
        if abs(db) < 1e-14:
            return tau / self.beta0
        return (np.sqrt(self.beta0**2 + 2 * db * tau) - self.beta0) / db

    @property
    def dt(self) -> float:
        return (self.t_max - self.t_min) / self.n_steps

    def step_times(self):
        """Times at which the score is evaluated, from ``t_max`` downwards."""
        return self.t_max - self.dt * np.arange(self.n_steps)


def effective_time(sched: DiffusionSchedule, t):
    """``tau(t) = beta0 t + (beta1 - beta0) t^2 / 2``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > sched.t_max + 1e-12):
        raise ValueError(f"time {t} outside [0, {sched.t_max}]")
    tau = sched.beta0 * t_arr + 0.5 * (sched.beta1 - sched.beta0) * t_arr**2
    return float(tau) if np.ndim(tau) == 0 else tau


def perturbation_params(tau):
    """Mean scale and noise-variance scale of the forward kernel at ``tau``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if math.isinf(tau):
        return 0.0, 1.0
    return math.exp(-tau / 2), -math.expm1(-tau)


def tweedie_denoiser(score, C: CovarianceOperator | None, x, tau):
    """Posterior mean ``E[X_0 | X_tau = x] = e^{tau/2} (x + (1 - e^{-tau}) s(x, tau))``.

    ``score`` is a callable ``(x, tau)`` or an already evaluated array.  With the
    ``C grad log q`` convention the covariance cancels, so ``C`` is accepted for
    interface symmetry only.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    s = score(x, tau) if callable(score) else np.asarray(score)
    return math.exp(tau / 2) * (np.asarray(x) + (-math.expm1(-tau)) * s)


def chain_streams(master_seed, n_chains):
    """Independent generators for ``n_chains`` chains of one run."""
    children = np.random.SeedSequence(master_seed).spawn(n_chains)
    return [np.random.default_rng(c) for c in children]


def _draw(streams, alive, shape):
    out = np.empty((len(streams),) + shape)
    for i, g in enumerate(streams):
        if alive[i]:
            out[i] = g.standard_normal(shape)
    return out


def reverse_em(score, C: CovarianceOperator, sched: DiffusionSchedule, streams,
               field_shape, x_init=None):
    """Batched reverse-time Euler-Maruyama over independent chains.

    Integrates ``dY = (-1/2 Y - s(Y, tau(t))) beta(t) dt + sqrt(beta(t)) C^{1/2} dB``
    with ``dt < 0`` from ``t_max`` to ``t_min`` in ``n_steps`` uniform steps,
    starting from ``N(0, C)``.

    Returns ``(states, failed_step)``; ``failed_step[i]`` is ``-1`` for chains
    that stayed finite, otherwise the step at which chain ``i`` diverged (its
    state is then NaN).  Diverged chains are frozen and never passed to
    ``score`` again.
    """
    n = len(streams)
    field_shape = tuple(field_shape)
    dim = int(np.prod(field_shape))
    alive = np.ones(n, dtype=bool)
    failed = np.full(n, -1, dtype=int)
    z0 = _draw(streams, alive, field_shape)
    x = C.sqrt_apply(z0) if x_init is None else np.array(x_init, dtype=float)
    dt = sched.dt
    times = sched.step_times()
    chunk = max(1, min(sched.n_steps, 4_000_000 // max(1, n * dim)))
    noise = None
    for k, t in enumerate(times):
        if k % chunk == 0:
            span = min(chunk, sched.n_steps - k)
            noise = np.empty((n, span) + field_shape)
            for i, g in enumerate(streams):
                if alive[i]:
                    noise[i] = g.standard_normal((span,) + field_shape)
        z = noise[:, k % chunk]
        tau = effective_time(sched, t)
        b = float(sched.beta(t))
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xa = x[idx]
        s = score(xa, tau)
        xa = xa + (0.5 * xa + s) * (b * dt) + math.sqrt(b * dt) * C.sqrt_apply(z[idx])
        bad = ~np.all(np.isfinite(xa.reshape(len(idx), -1)), axis=1)
        if np.any(bad):
            failed[idx[bad]] = k
            alive[idx[bad]] = False
            xa[bad] = np.nan
        x[idx] = xa
    return x, failed


def reverse_em_sample(score, C: CovarianceOperator, sched: DiffusionSchedule, rng,
                      field_shape=None):
    """Single reverse-time Euler-Maruyama chain driven by ``rng``.

    Raises :class:`DivergenceError` with the step index on a non-finite state.
    """
    if field_shape is None:
        field_shape = C.field_shape
    states, failed = reverse_em(score, C, sched, [rng], field_shape)
    if failed[0] >= 0:
        raise DivergenceError(int(failed[0]))
    return states[0]


def _diffused_gaussian_score(mean, var, x, t):
    a = math.exp(-t / 2)
    v = math.exp(-t) * var + (-math.expm1(-t))
    return -(x - a * mean) / v


def mixture_rate_check(p1, p2, alpha, x, t_list):
    """Error of the convex score combination against the geometric-mixture score.

    ``p1`` and ``p2`` are ``(mean, variance)`` of 1-D Gaussians.  For each ``t``
    the table holds ``|alpha s1 + (1 - alpha) s2 - s_q|`` at ``x`` where ``s_q``
    is the diffused score of ``q = p1^alpha p2^(1 - alpha)`` (identity diffusion
    covariance, no time change).  Returns a list of ``(t, error)`` pairs.
    """
    (m1, v1), (m2, v2) = p1, p2
    if v1 <= 0 or v2 <= 0:
        raise ValueError("Gaussian variances must be positive")
    prec = alpha / v1 + (1 - alpha) / v2
    mq = (alpha * m1 / v1 + (1 - alpha) * m2 / v2) / prec
    vq = 1.0 / prec
    table = []
    for t in t_list:
        combo = (alpha * _diffused_gaussian_score(m1, v1, x, t)
                 + (1 - alpha) * _diffused_gaussian_score(m2, v2, x, t))
        exact = _diffused_gaussian_score(mq, vq, x, t)
        table.append((float(t), abs(combo - exact)))
    return table
