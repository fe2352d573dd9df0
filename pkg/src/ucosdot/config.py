"""Run configuration: an INI document with a fixed schema.

Every key is optional; missing keys take the defaults below.  Unknown
sections or keys are rejected with their ``section.key`` path.

.. code-block:: ini

    [problem]
    grid = 32               ; inversion grid cells per side
    data_grid = 33          ; data-generation grid (0 = same as grid)
    geometry = full         ; full | limited | experimental
    truth = ood:ellipse_triangle   ; ood:<name> | phantom:<seed>
    noise_seed = 1
    sigma_amp = 0.05
    sigma_phase = 0.001
    data_file =             ; optional float64 data vector replacing simulation
    operator_file =         ; optional SPMAT1 operator replacing assembly

    [prior]
    diffusion_cov = ou      ; ou | identity
    c_sigma = 1.0
    c_ell = 5.0             ; mm
    gauss_sigma = 0.16
    gauss_ell = 10.0        ; mm
    gauss_mean = 0.0

    [diffusion]
    t_min = 0.005
    t_max = 1.0
    n_steps = 500
    beta0 = 0.05
    beta1 = 10.0

    [network]
    profile = reduced       ; reduced | full
    width = 0               ; 0 = profile value (same for depth, n_modes)
    depth = 0
    n_modes = 0
    activation = silu
    seed = 0

    [training]
    mode = ucos             ; ucos | unconditional
    n_phantoms = 10000
    phantom_seed = 0
    epochs = 20
    batch_size = 16
    t_truncation = 0.001
    seed = 0
    base_lr = 0.002
    final_lr = 0.0005
    weight_decay = 0.0001
    weighting = none        ; none | lambda2

    [sampling]
    method = ucos-reg       ; ucos | ucos-reg | dps | gaussian
    alpha = 0.5
    samples = 100
    seed = 0
    rho = 1.0
    normalize_by_residual = true
"""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

__all__ = ["ConfigError", "SCHEMA", "load_config", "default_config", "config_digest"]


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the ``section.key`` path."""


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _truth(text):
    kind, _, arg = text.partition(":")
    if kind == "ood" and arg in ("ellipse", "triangle", "ellipse_triangle"):
        return text
    if kind == "phantom" and arg.isdigit():
        return text
    raise ValueError("expected ood:<ellipse|triangle|ellipse_triangle> or phantom:<seed>")


SCHEMA = {
    "problem": {
        "grid": (int, 32),
        "data_grid": (int, 33),
        "geometry": (_choice("full", "limited", "experimental"), "full"),
        "truth": (_truth, "ood:ellipse_triangle"),
        "noise_seed": (int, 1),
        "sigma_amp": (float, 0.05),
        "sigma_phase": (float, 0.001),
        "data_file": (str, ""),
        "operator_file": (str, ""),
    },
    "prior": {
        "diffusion_cov": (_choice("ou", "identity"), "ou"),
        "c_sigma": (float, 1.0),
        "c_ell": (float, 5.0),
        "gauss_sigma": (float, 0.16),
        "gauss_ell": (float, 10.0),
        "gauss_mean": (float, 0.0),
    },
    "diffusion": {
        "t_min": (float, 0.005),
        "t_max": (float, 1.0),
        "n_steps": (int, 500),
        "beta0": (float, 0.05),
        "beta1": (float, 10.0),
    },
    "network": {
        "profile": (_choice("reduced", "full"), "reduced"),
        "width": (int, 0),
        "depth": (int, 0),
        "n_modes": (int, 0),
        "activation": (_choice("silu", "gelu", "tanh"), "silu"),
        "seed": (int, 0),
    },
    "training": {
        "mode": (_choice("ucos", "unconditional"), "ucos"),
        "n_phantoms": (int, 10000),
        "phantom_seed": (int, 0),
        "epochs": (int, 20),
        "batch_size": (int, 16),
        "t_truncation": (float, 0.001),
        "seed": (int, 0),
        "base_lr": (float, 0.002),
        "final_lr": (float, 0.0005),
        "weight_decay": (float, 1e-4),
        "weighting": (_choice("none", "lambda2"), "none"),
    },
    "sampling": {
        "method": (_choice("ucos", "ucos-reg", "dps", "gaussian"), "ucos-reg"),
        "alpha": (float, 0.5),
        "samples": (int, 100),
        "seed": (int, 0),
        "rho": (float, 1.0),
        "normalize_by_residual": (_bool, True),
    },
}

_POSITIVE = {
    "problem.grid", "problem.sigma_amp", "problem.sigma_phase", "prior.c_sigma", "prior.c_ell",
    "prior.gauss_sigma", "prior.gauss_ell", "diffusion.n_steps", "diffusion.beta0",
    "diffusion.beta1", "diffusion.t_min", "diffusion.t_max", "training.n_phantoms",
    "training.epochs", "training.batch_size", "sampling.samples",
}


def default_config() -> dict:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _validate(cfg):
    for path in _POSITIVE:
        sec, key = path.split(".")
        if not cfg[sec][key] > 0:
            raise ConfigError(f"{path}: must be positive, got {cfg[sec][key]}")
    if cfg["problem"]["data_grid"] < 0:
        raise ConfigError("problem.data_grid: must be non-negative")
    if not cfg["diffusion"]["t_min"] < cfg["diffusion"]["t_max"]:
        raise ConfigError("diffusion.t_min: must be smaller than diffusion.t_max")
    if not 0.0 <= cfg["sampling"]["alpha"] <= 1.0:
        raise ConfigError(f"sampling.alpha: must lie in [0, 1], got {cfg['sampling']['alpha']}")
    if not 0.0 < cfg["training"]["t_truncation"] < 1.0:
        raise ConfigError("training.t_truncation: must lie in (0, 1)")
    if cfg["sampling"]["rho"] < 0:
        raise ConfigError("sampling.rho: must be non-negative")
    for key in ("width", "depth", "n_modes"):
        if cfg["network"][key] < 0:
            raise ConfigError(f"network.{key}: must be non-negative")


def load_config(path=None, text=None) -> dict:
    """Parse and validate a configuration into nested plain dicts."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            if not Path(path).is_file():
                raise ConfigError(f"config file {path} not found")
            parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    cfg = default_config()
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{sec}: unknown section")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{sec}.{key}: unknown key")
            conv = SCHEMA[sec][key][0]
            try:
                cfg[sec][key] = conv(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{sec}.{key}: invalid value {raw!r} ({exc})") from exc
    _validate(cfg)
    return cfg


def config_digest(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form of a resolved configuration."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
