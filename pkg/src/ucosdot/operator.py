"""Matrix-free linear operators acting on channel-major image fields.

A field is a real array of shape ``(channels, height, width)``; a data vector
is a flat real array of length ``m``.  Operators are immutable once built.

The binary matrix file used for dense operators is::

    b"SPMAT1\\0"            7 bytes magic
    m, n                    two little-endian uint64
    entries                 m*n little-endian float64, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "DimensionError",
    "LinearOperator",
    "DenseMatrixOperator",
    "IdentityOperator",
    "ZeroOperator",
    "ScaledOperator",
    "HStackOperator",
    "apply",
    "apply_adjoint",
    "rescale_jacobian",
    "read_matrix",
    "write_matrix",
    "ABSORPTION_SCALE",
    "SCATTERING_SCALE",
]

MATRIX_MAGIC = b"SPMAT1\0"

# Rescaled unknowns x = (dmua + 0.01) / 0.02 and (dmus + 1) / 2 lie in [0, 1].
ABSORPTION_SCALE = 0.02
ABSORPTION_OFFSET = -0.01
SCATTERING_SCALE = 2.0
SCATTERING_OFFSET = -1.0


class DimensionError(ValueError):
    """Raised when a field or data vector does not match an operator."""


class LinearOperator:
    """Base class for a linear map from fields to data vectors.

    Subclasses implement ``_apply`` on a flat vector of length
    ``prod(domain_shape)`` and ``_adjoint`` on a vector of length
    ``codomain_dim``.  Both may also receive a leading batch axis.
    """

    def __init__(self, domain_shape, codomain_dim):
        self.domain_shape = tuple(int(s) for s in domain_shape)
        self.codomain_dim = int(codomain_dim)

    @property
    def domain_dim(self) -> int:
        return int(np.prod(self.domain_shape))

    @property
    def shape(self):
        return (self.codomain_dim, self.domain_dim)

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    def apply(self, x):
        """Return ``A x`` for a field (or a batch of fields)."""
        x = np.asarray(x, dtype=float)
        nd = len(self.domain_shape)
        if x.shape[-nd:] != self.domain_shape and x.shape[-1:] != (self.domain_dim,):
            raise DimensionError(
                f"field of shape {x.shape} does not match domain {self.domain_shape}"
            )
        if x.shape[-nd:] == self.domain_shape:
            flat = x.reshape(x.shape[:-nd] + (self.domain_dim,))
        else:
            flat = x
        return self._apply(flat)

    def adjoint(self, y):
        """Return ``A* y`` reshaped to the domain field shape."""
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.codomain_dim:
            raise DimensionError(
                f"data vector of length {y.shape[-1]} does not match codomain {self.codomain_dim}"
            )
        out = self._adjoint(y)
        return out.reshape(y.shape[:-1] + self.domain_shape)

    def to_dense(self):
        """Materialise the operator as an ``(m, n)`` array."""
        return self._apply(np.eye(self.domain_dim)).T.copy()

    def __mul__(self, alpha):
        return ScaledOperator(self, float(alpha))

    __rmul__ = __mul__

    def __matmul__(self, x):
        return self.apply(x)


def apply(op: LinearOperator, x):
    return op.apply(x)


def apply_adjoint(op: LinearOperator, y):
    return op.adjoint(y)


class DenseMatrixOperator(LinearOperator):
    """Operator backed by an explicit row-major ``(m, n)`` matrix."""

    def __init__(self, entries, domain_shape=None):
        entries = np.ascontiguousarray(entries, dtype=float)
        if entries.ndim != 2:
            raise DimensionError("dense operator needs a 2-D matrix")
        m, n = entries.shape
        if domain_shape is None:
            domain_shape = (n,)
        if int(np.prod(domain_shape)) != n:
            raise DimensionError(f"domain shape {domain_shape} has not {n} entries")
        super().__init__(domain_shape, m)
        self.entries = entries
        self.entries.setflags(write=False)

    def _apply(self, x):
        return x @ self.entries.T

    def _adjoint(self, y):
        return y @ self.entries

    def to_dense(self):
        return self.entries.copy()


class IdentityOperator(LinearOperator):
    def __init__(self, domain_shape):
        super().__init__(domain_shape, int(np.prod(domain_shape)))

    def _apply(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()


class ZeroOperator(LinearOperator):
    def _apply(self, x):
        return np.zeros(x.shape[:-1] + (self.codomain_dim,))

    def _adjoint(self, y):
        return np.zeros(y.shape[:-1] + (self.domain_dim,))


class ScaledOperator(LinearOperator):
    def __init__(self, base: LinearOperator, alpha: float):
        super().__init__(base.domain_shape, base.codomain_dim)
        self.base = base
        self.alpha = alpha

    def _apply(self, x):
        return self.alpha * self.base._apply(x)

    def _adjoint(self, y):
        return self.alpha * self.base._adjoint(y)


class HStackOperator(LinearOperator):
    """Block row ``[A_1, A_2, ...]`` acting on a multi-channel field.

    Each block acts on one channel (or group of channels) of the input and
    the results are summed.
    """

    def __init__(self, blocks):
        blocks = list(blocks)
        m = blocks[0].codomain_dim
        spatial = blocks[0].domain_shape[-2:] if len(blocks[0].domain_shape) >= 2 else None
        for b in blocks:
            if b.codomain_dim != m:
                raise DimensionError("blocks must share the codomain dimension")
        channels = 0
        for b in blocks:
            channels += b.domain_shape[0] if len(b.domain_shape) == 3 else 1
        if spatial is not None and all(len(b.domain_shape) >= 2 for b in blocks):
            domain = (channels,) + tuple(spatial)
        else:
            domain = (sum(b.domain_dim for b in blocks),)
        super().__init__(domain, m)
        self.blocks = blocks
        self._splits = np.cumsum([b.domain_dim for b in blocks])[:-1]

    def _apply(self, x):
        parts = np.split(x, self._splits, axis=-1)
        return sum(b._apply(p) for b, p in zip(self.blocks, parts))

    def _adjoint(self, y):
        return np.concatenate([b._adjoint(y) for b in self.blocks], axis=-1)


def rescale_jacobian(j_mua: LinearOperator, j_mus: LinearOperator) -> HStackOperator:
    """Build the operator acting on rescaled ``(absorption, scattering)`` fields.

    Returns ``A = (0.02 J_mua, 2 J_mus)``.  The constant part of the affine
    rescaling is kept in :attr:`offset` as a physical-unit field so data can
    be shifted consistently; it is not part of the linear map.
    """
    if j_mua.codomain_dim != j_mus.codomain_dim:
        raise DimensionError(
            f"incompatible codomains {j_mua.codomain_dim} and {j_mus.codomain_dim}"
        )
    op = HStackOperator([ABSORPTION_SCALE * j_mua, SCATTERING_SCALE * j_mus])
    op.offset = (ABSORPTION_OFFSET, SCATTERING_OFFSET)
    return op


def write_matrix(path, op_or_matrix) -> None:
    mat = op_or_matrix.to_dense() if isinstance(op_or_matrix, LinearOperator) else op_or_matrix
    mat = np.ascontiguousarray(mat, dtype="<f8")
    m, n = mat.shape
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<QQ", m, n))
        fh.write(mat.tobytes(order="C"))


def read_matrix(path, domain_shape=None) -> DenseMatrixOperator:
    data = Path(path).read_bytes()
    if data[:7] != MATRIX_MAGIC:
        raise ValueError(f"{path}: not an SPMAT1 matrix file")
    m, n = struct.unpack("<QQ", data[7:23])
    body = data[23:]
    if len(body) != 8 * m * n:
        raise ValueError(f"{path}: expected {m}x{n} entries, found {len(body) // 8} values")
    entries = np.frombuffer(body, dtype="<f8").reshape(m, n).astype(float)
    return DenseMatrixOperator(entries, domain_shape)
