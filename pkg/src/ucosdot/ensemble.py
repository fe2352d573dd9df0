"""Sample ensembles, pixelwise statistics, and their file formats.

Ensemble file layout (little-endian)::

    b"SPENS1\\0"        7-byte magic
    header_len         uint32
    header             UTF-8 JSON: method, master_seed, config_digest,
                       shape, failed_step, has_truth
    samples            N*C*H*W float64
    truth              C*H*W float64 (only when has_truth)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .operator import ABSORPTION_OFFSET, ABSORPTION_SCALE, DimensionError, SCATTERING_OFFSET, SCATTERING_SCALE

__all__ = [
    "METHODS",
    "SampleEnsemble",
    "EnsembleStats",
    "ensemble_stats",
    "write_ensemble",
    "read_ensemble",
    "to_physical",
    "write_pgm",
    "write_csv",
]

METHODS = ("ucos", "ucos-reg", "dps", "gaussian")
ENSEMBLE_MAGIC = b"SPENS1\0"


@dataclass
class SampleEnsemble:
    """Posterior samples of one run.

    ``failed_step[i]`` is ``-1`` for a finite chain, otherwise the reverse
    step at which chain ``i`` diverged (its sample is NaN).
    """

    samples: np.ndarray
    method: str
    master_seed: int
    config_digest: str = ""
    failed_step: np.ndarray | None = None
    truth: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim < 2 or self.samples.shape[0] == 0:
            raise ValueError("an ensemble needs at least one sample")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.failed_step is None:
            self.failed_step = np.full(len(self.samples), -1, dtype=int)
        self.failed_step = np.asarray(self.failed_step, dtype=int)

    def __len__(self):
        return len(self.samples)

    @property
    def finite_samples(self):
        return self.samples[self.failed_step < 0]


@dataclass
class EnsembleStats:
    mean: np.ndarray
    std: np.ndarray
    bias: np.ndarray | None
    n_used: int


def ensemble_stats(ens: SampleEnsemble, truth=None) -> EnsembleStats:
    """Pixelwise mean, population std, and ``mean - truth`` over finite chains."""
    good = ens.finite_samples
    if len(good) == 0:
        raise ValueError("every chain in the ensemble diverged")
    mean = good.mean(axis=0)
    std = good.std(axis=0)
    bias = None
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        if truth.shape != mean.shape:
            raise DimensionError(f"truth shape {truth.shape} does not match samples {mean.shape}")
        bias = mean - truth
    return EnsembleStats(mean, std, bias, len(good))


def write_ensemble(path, ens: SampleEnsemble) -> None:
    header = {
        "method": ens.method,
        "master_seed": int(ens.master_seed),
        "config_digest": ens.config_digest,
        "shape": list(ens.samples.shape),
        "failed_step": [int(v) for v in ens.failed_step],
        "has_truth": ens.truth is not None,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(ENSEMBLE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(ens.samples.astype("<f8").tobytes())
        if ens.truth is not None:
            fh.write(np.asarray(ens.truth, dtype="<f8").tobytes())


def read_ensemble(path) -> SampleEnsemble:
    raw = Path(path).read_bytes()
    if raw[:7] != ENSEMBLE_MAGIC:
        raise ValueError(f"{path}: not an SPENS1 ensemble file")
    (hlen,) = struct.unpack("<I", raw[7:11])
    header = json.loads(raw[11:11 + hlen].decode())
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    body = np.frombuffer(raw[11 + hlen:], dtype="<f8")
    expected = n + (n // shape[0] if header["has_truth"] else 0)
    if body.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {body.size}")
    samples = body[:n].reshape(shape).astype(float)
    truth = body[n:].reshape(shape[1:]).astype(float) if header["has_truth"] else None
    return SampleEnsemble(samples, header["method"], header["master_seed"],
                          header["config_digest"], np.array(header["failed_step"]), truth)


def to_physical(field_2ch):
    """Map rescaled ``[0, 1]`` channels back to absorption / scattering changes in mm^-1."""
    f = np.asarray(field_2ch, dtype=float)
    out = np.empty_like(f)
    out[..., 0, :, :] = ABSORPTION_SCALE * f[..., 0, :, :] + ABSORPTION_OFFSET
    out[..., 1, :, :] = SCATTERING_SCALE * f[..., 1, :, :] + SCATTERING_OFFSET
    return out


def write_pgm(path, image, digest="", vmin=None, vmax=None) -> None:
    """16-bit binary graymap; the value range and digest go in header comments."""
    img = np.asarray(image, dtype=float)
    lo = float(np.nanmin(img)) if vmin is None else vmin
    hi = float(np.nanmax(img)) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    q = np.clip(np.round((np.nan_to_num(img, nan=lo) - lo) / span * 65535), 0, 65535).astype(">u2")
    h, w = img.shape
    head = f"P5\n# digest {digest}\n# range {lo!r} {hi!r}\n{w} {h}\n65535\n".encode()
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(q.tobytes())


def write_csv(path, image, digest="") -> None:
    img = np.asarray(image, dtype=float)
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# digest {digest}\n")
        for row in img:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
