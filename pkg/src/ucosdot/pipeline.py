"""Construction of problem objects from a resolved configuration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionSchedule
from .dotfwd import (Instrument, OpticalField, experimental, experimental_background, full_view,
                     jacobian, limited_view, read_data_vector, simulate_difference_data)
from .gaussian import CovarianceOperator, ou_covariance
from .grid import Grid
from .network import PROFILES, ScoreNetwork
from .operator import LinearOperator, read_matrix
from .phantom import PhantomSpec, generate_phantom, ood_phantoms
from .ucos import TrainingConfig, UcosProblem

__all__ = [
    "extent_for",
    "instrument_for",
    "background_for",
    "build_operator",
    "noise_covariance",
    "diffusion_covariance",
    "gaussian_prior",
    "schedule_for",
    "truth_for",
    "data_for",
    "network_for",
    "training_config_for",
    "phantom_spec_for",
    "Setup",
    "build_setup",
]


def extent_for(cfg) -> float:
    return 80.0 if cfg["problem"]["geometry"] == "experimental" else 50.0


def instrument_for(cfg) -> Instrument:
    geo = cfg["problem"]["geometry"]
    return {"full": full_view, "limited": limited_view, "experimental": experimental}[geo]()


def background_for(cfg, n) -> OpticalField:
    if cfg["problem"]["geometry"] == "experimental":
        return experimental_background(n)
    return OpticalField.homogeneous(n, 0.01, 1.0, extent_for(cfg))


def build_operator(cfg, n=None) -> LinearOperator:
    """Rescaled Jacobian on an ``n``-cell grid (the inversion grid by default)."""
    n = n or cfg["problem"]["grid"]
    path = cfg["problem"]["operator_file"]
    if path and n == cfg["problem"]["grid"]:
        return read_matrix(path, (2, n, n))
    return jacobian(background_for(cfg, n), instrument_for(cfg))


def noise_covariance(cfg, m) -> CovarianceOperator:
    half = m // 2
    var = np.concatenate([np.full(half, cfg["problem"]["sigma_amp"] ** 2),
                          np.full(m - half, cfg["problem"]["sigma_phase"] ** 2)])
    return CovarianceOperator.diagonal(var)


def diffusion_covariance(cfg, grid: Grid) -> CovarianceOperator:
    if cfg["prior"]["diffusion_cov"] == "identity":
        return CovarianceOperator.identity((2,) + grid.shape)
    return ou_covariance(grid, cfg["prior"]["c_sigma"], cfg["prior"]["c_ell"], channels=2)


def gaussian_prior(cfg, grid: Grid):
    """Model-based OU prior ``(mean field, covariance)``."""
    cov = ou_covariance(grid, cfg["prior"]["gauss_sigma"], cfg["prior"]["gauss_ell"], channels=2)
    return np.full((2,) + grid.shape, cfg["prior"]["gauss_mean"]), cov


def schedule_for(cfg) -> DiffusionSchedule:
    d = cfg["diffusion"]
    return DiffusionSchedule(d["t_min"], d["t_max"], d["n_steps"], d["beta0"], d["beta1"])


def phantom_spec_for(cfg, seed=None) -> PhantomSpec:
    grid = Grid(cfg["problem"]["grid"], extent_for(cfg))
    return PhantomSpec(grid=grid, seed=cfg["training"]["phantom_seed"] if seed is None else seed)


def truth_for(cfg, grid: Grid):
    kind, _, arg = cfg["problem"]["truth"].partition(":")
    if kind == "ood":
        return ood_phantoms(grid)[arg]
    spec = PhantomSpec(grid=grid, seed=int(arg))
    return generate_phantom(spec, np.random.default_rng(int(arg)))


def data_for(cfg, truth):
    """External data vector if configured, otherwise simulated difference data.

    Simulation uses the data grid's Jacobian so that data and inversion
    operators differ.
    """
    p = cfg["problem"]
    if p["data_file"]:
        return read_data_vector(p["data_file"], 2 * _n_pairs(cfg))
    n_data = p["data_grid"] or p["grid"]
    A_data = build_operator(cfg, n_data) if n_data != p["grid"] else build_operator(cfg)
    return simulate_difference_data(truth, A_data, p["noise_seed"], p["sigma_amp"],
                                    p["sigma_phase"], extent=extent_for(cfg))


def _n_pairs(cfg):
    inst = instrument_for(cfg)
    return inst.n_sources * inst.n_detectors


def network_for(cfg) -> ScoreNetwork:
    n = cfg["network"]
    arch = dict(PROFILES[n["profile"]])
    for key in ("width", "depth", "n_modes"):
        if n[key]:
            arch[key] = n[key]
    return ScoreNetwork(channels=2, activation=n["activation"], seed=n["seed"], **arch)


def training_config_for(cfg) -> TrainingConfig:
    t = cfg["training"]
    return TrainingConfig(t["epochs"], t["batch_size"], t["t_truncation"], t["seed"],
                          t["base_lr"], t["final_lr"], t["weight_decay"], t["weighting"])


@dataclass
class Setup:
    grid: Grid
    problem: UcosProblem
    prior: tuple
    truth: np.ndarray


def build_setup(cfg, A: LinearOperator | None = None, with_data=True) -> Setup:
    grid = Grid(cfg["problem"]["grid"], extent_for(cfg))
    A = A if A is not None else build_operator(cfg)
    truth = truth_for(cfg, grid)
    y = data_for(cfg, truth) if with_data else None
    problem = UcosProblem(A, diffusion_covariance(cfg, grid), noise_covariance(cfg, A.codomain_dim),
                          y, schedule_for(cfg))
    return Setup(grid, problem, gaussian_prior(cfg, grid), truth)
