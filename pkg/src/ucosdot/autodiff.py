"""Minimal reverse-mode differentiation over numpy arrays.

Each :class:`Tensor` records the tensors it was computed from and a closure
that pushes its gradient back to them.  :meth:`Tensor.backward` walks the
recorded graph in reverse topological order.  Only the handful of operations
needed by the spectral score network are provided.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "AutodiffError",
    "Tensor",
    "as_tensor",
    "concat",
    "channel_linear",
    "spectral_conv",
    "retained_modes",
    "silu",
    "gelu",
    "tanh",
    "ACTIVATIONS",
]


class AutodiffError(RuntimeError):
    """Misuse of the differentiation tape (e.g. backward on a detached value)."""


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data, dtype=float)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=float)
        else:
            self.grad = self.grad + g

    @staticmethod
    def _make(data, parents, backward_fn):
        req = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=req, parents=parents if req else (),
                      backward_fn=backward_fn if req else None)

    # --- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data

        def bw(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(out_data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(out_data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise AutodiffError("division by a Tensor is not supported")
        return self * (1.0 / other)

    def __pow__(self, exponent):
        exponent = float(exponent)
        out_data = self.data**exponent

        def bw(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(out_data, (self,), bw)

    def sum(self, axis=None):
        out_data = self.data.sum(axis=axis)

        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape))
            else:
                axes = (axis,) if np.isscalar(axis) else tuple(axis)
                self._accumulate(np.broadcast_to(np.expand_dims(g, axes), self.shape))

        return Tensor._make(out_data, (self,), bw)

    def mean(self, axis=None):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in ((axis,) if np.isscalar(axis) else axis)])
        return self.sum(axis) * (1.0 / count)

    def reshape(self, *shape):
        out_data = self.data.reshape(*shape)

        def bw(g):
            self._accumulate(g.reshape(self.shape))

        return Tensor._make(out_data, (self,), bw)

    # --- reverse sweep --------------------------------------------------
    def backward(self, grad=None):
        """Populate ``.grad`` of every leaf that requires gradients."""
        if not self.requires_grad:
            raise AutodiffError("backward() on a tensor that is not attached to a recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise AutodiffError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            if node._backward_fn is not None:
                node.grad = None
        self._accumulate(np.broadcast_to(np.asarray(grad, dtype=float), self.shape))
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            g, node.grad = node.grad, None
            node._backward_fn(g)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t._accumulate(piece)

    return Tensor._make(out_data, tuple(tensors), bw)


def channel_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise affine map over the channel axis of a ``(B, C, H, W)`` tensor."""
    out_data = np.einsum("oi,bihw->bohw", weight.data, x.data, optimize=True)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if weight.requires_grad:
            weight._accumulate(np.einsum("bohw,bihw->oi", g, x.data, optimize=True))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accumulate(np.einsum("oi,bohw->bihw", weight.data, g, optimize=True))

    return Tensor._make(out_data, parents, bw)


def retained_modes(size, n_modes):
    """Row indices and weight indices of the retained frequencies along one axis.

    Frequencies ``k`` with ``|k| < n_modes`` are kept, clamped so that every
    retained row of the length-``size`` spectrum is distinct.  Weight slot for
    frequency ``k`` is ``k + n_modes - 1``.
    """
    k_hi = min(n_modes - 1, size // 2)
    k_lo = max(-(n_modes - 1), -((size - 1) // 2))
    ks = np.arange(k_lo, k_hi + 1)
    return ks % size, ks + n_modes - 1


def spectral_conv(x: Tensor, w_re: Tensor, w_im: Tensor, n_modes: int) -> Tensor:
    """Truncated Fourier-space channel mixing.

    ``x`` is ``(B, Ci, H, W)``; weights are ``(Ci, Co, 2 n_modes - 1, n_modes)``
    (row axis indexed by signed frequency, column axis by non-negative
    frequency).  Uses unitary real-to-complex transforms.
    """
    B, Ci, H, W = x.shape
    rows, kidx = retained_modes(H, n_modes)
    ncol = min(n_modes, W // 2 + 1)
    X = np.fft.rfft2(x.data, norm="ortho")
    Xs = X[:, :, rows, :ncol]
    Wc = w_re.data[:, :, kidx, :ncol] + 1j * w_im.data[:, :, kidx, :ncol]
    Co = Wc.shape[1]
    Ys = np.einsum("birc,iorc->borc", Xs, Wc, optimize=True)
    Yf = np.zeros((B, Co, H, W // 2 + 1), dtype=complex)
    Yf[:, :, rows, :ncol] = Ys
    out_data = np.fft.irfft2(Yf, s=(H, W), norm="ortho")

    def bw(g):
        G = np.fft.rfft2(g, norm="ortho")
        n_double = W - (W // 2 + 1)
        if n_double > 0:
            G[..., 1:1 + n_double] *= 2.0
        Gs = G[:, :, rows, :ncol]
        if w_re.requires_grad or w_im.requires_grad:
            gW = np.einsum("birc,borc->iorc", np.conj(Xs), Gs, optimize=True)
            full_re = np.zeros_like(w_re.data)
            full_im = np.zeros_like(w_im.data)
            full_re[:, :, kidx, :ncol] = gW.real
            full_im[:, :, kidx, :ncol] = gW.imag
            w_re._accumulate(full_re)
            w_im._accumulate(full_im)
        if x.requires_grad:
            gXs = np.einsum("borc,iorc->birc", Gs, np.conj(Wc), optimize=True)
            full = np.zeros((B, Ci, H, W), dtype=complex)
            full[:, :, rows, :ncol] = gXs
            x._accumulate(np.fft.ifft2(full, norm="ortho").real)

    return Tensor._make(out_data, (x, w_re, w_im), bw)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def silu(x: Tensor) -> Tensor:
    sig = _sigmoid(x.data)
    out_data = x.data * sig

    def bw(g):
        x._accumulate(g * sig * (1.0 + x.data * (1.0 - sig)))

    return Tensor._make(out_data, (x,), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    th = np.tanh(inner)
    out_data = 0.5 * v * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        x._accumulate(g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * d_inner))

    return Tensor._make(out_data, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    th = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - th**2))

    return Tensor._make(th, (x,), bw)


ACTIVATIONS = {"silu": silu, "gelu": gelu, "tanh": tanh}
