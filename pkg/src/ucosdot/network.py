"""Spectral-convolution score network, AdamW, and checkpoint I/O.

Architecture: a pointwise lift from ``channels + 1`` inputs (field channels
plus a constant time channel) to ``width`` channels, ``depth`` blocks of
``act(spectral_conv(h) + W h + b)``, then a two-layer pointwise projection
``width -> width -> channels`` with the activation in between.

Checkpoint layout (all integers and floats little-endian)::

    b"SPNET1\\0"                      7-byte magic
    version                           1 byte (currently 1)
    width, depth, n_modes, channels   4 x uint32
    parameters                        float64, canonical order

Canonical order is ``lift.W, lift.b``, then for each block
``spec_re, spec_im, skip.W, skip.b``, then ``proj1.W, proj1.b, proj2.W, proj2.b``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ACTIVATIONS, Tensor, channel_linear, concat, spectral_conv
from .operator import DimensionError

__all__ = [
    "ScoreNetwork",
    "PROFILES",
    "TrainingError",
    "OptimizerState",
    "learning_rate",
    "adamw_step",
    "save_checkpoint",
    "load_checkpoint",
]

NET_MAGIC = b"SPNET1\0"
NET_VERSION = 1

PROFILES = {
    "full": dict(width=32, depth=10, n_modes=17),
    "reduced": dict(width=16, depth=4, n_modes=8),
}


class TrainingError(RuntimeError):
    """Non-finite gradients, loss or parameters during optimisation."""


def _identity(x):
    return x


class ScoreNetwork:
    """Fourier-layer network mapping ``(x, t)`` to a field of the same shape.

    Parameters
    ----------
    width, depth, n_modes : int
        Lifted channel count, number of spectral blocks, retained modes per axis.
    channels : int
        Field channels in and out.
    activation : str
        One of ``"silu"``, ``"gelu"``, ``"tanh"``, ``"identity"``.
    seed : int or numpy Generator
        Initialisation randomness.
    """

    def __init__(self, width=16, depth=4, n_modes=8, channels=2, activation="silu", seed=0):
        if min(width, depth, n_modes, channels) < 1:
            raise ValueError("width, depth, n_modes and channels must be positive")
        if activation != "identity" and activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.width, self.depth, self.n_modes, self.channels = width, depth, n_modes, channels
        self.activation = activation
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params = {}

        def affine(name, n_in, n_out):
            bound = 1.0 / np.sqrt(n_in)
            self._add(f"{name}.W", rng.uniform(-bound, bound, (n_out, n_in)))
            self._add(f"{name}.b", rng.uniform(-bound, bound, n_out))

        affine("lift", channels + 1, width)
        spec_shape = (width, width, 2 * n_modes - 1, n_modes)
        scale = 1.0 / (width * n_modes)
        for k in range(depth):
            self._add(f"block{k}.spec_re", scale * rng.standard_normal(spec_shape))
            self._add(f"block{k}.spec_im", scale * rng.standard_normal(spec_shape))
            affine(f"block{k}.skip", width, width)
        affine("proj1", width, width)
        affine("proj2", width, channels)

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    @property
    def parameter_names(self):
        return list(self.params)

    def parameters(self):
        return list(self.params.values())

    @property
    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _act(self, h):
        return _identity(h) if self.activation == "identity" else ACTIVATIONS[self.activation](h)

    def forward(self, x, t) -> Tensor:
        """Recorded forward pass on a batch ``x`` of shape ``(B, channels, H, W)``.

        ``t`` is a scalar or a length-``B`` array of raw diffusion times.
        """
        xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)
        if xd.ndim != 4 or xd.shape[1] != self.channels:
            raise DimensionError(
                f"expected input (B, {self.channels}, H, W), got {xd.shape}")
        B, _, H, W = xd.shape
        t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
        t_chan = np.broadcast_to(t[:, None, None, None], (B, 1, H, W))
        p = self.params
        h = concat([x if isinstance(x, Tensor) else Tensor(xd), Tensor(t_chan)], axis=1)
        h = channel_linear(h, p["lift.W"], p["lift.b"])
        for k in range(self.depth):
            spec = spectral_conv(h, p[f"block{k}.spec_re"], p[f"block{k}.spec_im"], self.n_modes)
            h = self._act(spec + channel_linear(h, p[f"block{k}.skip.W"], p[f"block{k}.skip.b"]))
        h = self._act(channel_linear(h, p["proj1.W"], p["proj1.b"]))
        return channel_linear(h, p["proj2.W"], p["proj2.b"])

    def __call__(self, x, t):
        """Evaluate without keeping gradients; accepts one field or a batch."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 3
        xb = x[None] if single else x
        out = self._detached().forward(xb, t).data
        return out[0] if single else out

    def _detached(self):
        clone = object.__new__(ScoreNetwork)
        clone.__dict__.update(self.__dict__)
        clone.params = {k: Tensor(v.data) for k, v in self.params.items()}
        return clone

    def get_flat(self):
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_parameters:
            raise DimensionError(f"expected {self.n_parameters} parameters, got {flat.size}")
        pos = 0
        for p in self.params.values():
            n = p.data.size
            p.data = flat[pos:pos + n].reshape(p.data.shape).copy()
            pos += n


# ----------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    base_lr: float = 0.002
    final_lr: float = 0.0005
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def learning_rate(state: OptimizerState, epoch_fraction: float) -> float:
    """Linear decay from ``base_lr`` at fraction 0 to ``final_lr`` at fraction 1."""
    if not 0.0 <= epoch_fraction <= 1.0:
        raise ValueError(f"epoch_fraction must lie in [0, 1], got {epoch_fraction}")
    return state.base_lr + epoch_fraction * (state.final_lr - state.base_lr)


def adamw_step(state: OptimizerState, params, grads, epoch_fraction: float, names=None):
    """One AdamW update in place on the arrays in ``params``.

    Weight decay is decoupled: ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``.
    Raises :class:`TrainingError` naming the offending parameter if any
    gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingError(
                f"non-finite gradient in parameter {label} ({bad} entries) at step {state.step}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    lr = learning_rate(state, epoch_fraction)
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + state.epsilon) + state.weight_decay * p)
    return params


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: ScoreNetwork) -> None:
    with open(path, "wb") as fh:
        fh.write(NET_MAGIC)
        fh.write(bytes([NET_VERSION]))
        fh.write(struct.pack("<4I", net.width, net.depth, net.n_modes, net.channels))
        fh.write(net.get_flat().astype("<f8").tobytes())


def load_checkpoint(path, activation="silu") -> ScoreNetwork:
    raw = Path(path).read_bytes()
    if raw[:7] != NET_MAGIC:
        raise ValueError(f"{path}: not an SPNET1 checkpoint")
    if raw[7] != NET_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {raw[7]}")
    width, depth, n_modes, channels = struct.unpack("<4I", raw[8:24])
    net = ScoreNetwork(width, depth, n_modes, channels, activation=activation, seed=0)
    body = raw[24:]
    if len(body) != 8 * net.n_parameters:
        raise ValueError(
            f"{path}: header implies {net.n_parameters} parameters, file holds {len(body) // 8}")
    net.set_flat(np.frombuffer(body, dtype="<f8"))
    return net
