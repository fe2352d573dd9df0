"""Frequency-domain diffuse optical tomography on a square grid.

Model::

    -div(kappa grad Phi) + (mu_a + j omega / c) Phi = 0        in the square
    Phi + (alpha / (2 zeta)) kappa dPhi/dn = q / zeta on a source patch, 0 elsewhere

with ``kappa = 1 / (d (mu_a + mu_s'))``.  The exitance is
``Gamma = (2 zeta / alpha) Phi`` on the boundary.

Discretisation is cell-centred finite volumes on ``n x n`` cells of side ``h``.
Interior faces use the harmonic mean of the two cell diffusivities.  On a
boundary face the half-cell flux ``K (Phi_i - Phi_b)`` with ``K = 2 kappa / h``
is matched to the Robin flux ``B Phi_b - s`` with ``B = 2 zeta / alpha``, which
eliminates the boundary value ``Phi_b = (K Phi_i + s) / (K + B)``.  Source and
detector weights are then both proportional to ``ell K / (K + B)`` (``ell`` =
patch overlap with the face), which makes the discrete measurements exactly
reciprocal.

Boundary positions are given by arc length along the perimeter,
counter-clockwise from the corner ``(0, 0)``: bottom edge, right edge, top
edge, left edge.  Row ``i`` of a field is the line ``y = (i + 0.5) h``.

Measurement vectors are ``[log|Gamma|; arg Gamma]``; within a block entry
``s * n_detectors + d`` belongs to source ``s`` and detector ``d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .gaussian import NumericalError
from .grid import Grid, resample_field
from .operator import (DenseMatrixOperator, DimensionError, HStackOperator, LinearOperator,
                       rescale_jacobian)

__all__ = [
    "OpticalField",
    "Patch",
    "Instrument",
    "MeasurementError",
    "SPEED_OF_LIGHT",
    "full_view",
    "limited_view",
    "experimental",
    "experimental_background",
    "patches_at_fractions",
    "ForwardModel",
    "solve_forward",
    "measure",
    "forward_data",
    "jacobian",
    "wrap_phase",
    "difference_data",
    "simulate_difference_data",
    "nonlinear_difference_data",
    "read_data_vector",
    "write_data_vector",
]

# mm/s in tissue with refractive index 1.4
SPEED_OF_LIGHT = 2.99792458e11 / 1.4


class MeasurementError(ArithmeticError):
    """Exitance vanished or became non-finite at a detector."""


@dataclass(frozen=True)
class OpticalField:
    """Absorption and reduced scattering maps (mm^-1) on a square grid."""

    mua: np.ndarray
    mus: np.ndarray
    extent: float = 50.0

    def __post_init__(self):
        mua = np.asarray(self.mua, dtype=float)
        mus = np.asarray(self.mus, dtype=float)
        if mua.shape != mus.shape or mua.ndim != 2 or mua.shape[0] != mua.shape[1]:
            raise DimensionError(f"need equal square maps, got {mua.shape} and {mus.shape}")
        if not (np.all(mua > 0) and np.all(mus > 0)):
            raise ValueError("optical coefficients must be strictly positive")
        object.__setattr__(self, "mua", mua)
        object.__setattr__(self, "mus", mus)

    @classmethod
    def homogeneous(cls, n, mua=0.01, mus=1.0, extent=50.0):
        return cls(np.full((n, n), float(mua)), np.full((n, n), float(mus)), extent)

    @property
    def grid(self) -> Grid:
        return Grid(self.mua.shape[0], self.extent)

    def perturbed(self, dmua=0.0, dmus=0.0):
        return OpticalField(self.mua + dmua, self.mus + dmus, self.extent)


@dataclass(frozen=True)
class Patch:
    """Boundary segment of ``width`` mm centred at perimeter arc length ``center``."""

    center: float
    width: float
    strength: float = 1.0

    def interval(self):
        return self.center - 0.5 * self.width, self.center + 0.5 * self.width


@dataclass(frozen=True)
class Instrument:
    sources: tuple
    detectors: tuple
    extent: float = 50.0
    omega: float = 2 * math.pi * 100e6
    c: float = SPEED_OF_LIGHT
    zeta: float = 1.0 / math.pi
    alpha_bc: float = 1.0
    dim_factor: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "detectors", tuple(self.detectors))
        if not self.sources or not self.detectors:
            raise ValueError("need at least one source and one detector")
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        L = self.extent
        for p in self.sources + self.detectors:
            lo, hi = p.interval()
            if p.width <= 0 or lo < 0 or hi > 4 * L:
                raise ValueError(f"patch {p} does not lie on the perimeter [0, {4 * L}]")
            if math.floor(lo / L) != math.floor(hi / L) and hi / L != math.floor(hi / L):
                raise ValueError(f"patch {p} wraps around a corner")
        for s in self.sources:
            for d in self.detectors:
                (a, b), (c, e) = s.interval(), d.interval()
                if min(b, e) > max(a, c):
                    raise ValueError(f"source {s} overlaps detector {d}")

    @property
    def n_sources(self):
        return len(self.sources)

    @property
    def n_detectors(self):
        return len(self.detectors)

    @property
    def n_measurements(self):
        return 2 * self.n_sources * self.n_detectors

    def swapped(self):
        """Instrument with the roles of sources and detectors exchanged."""
        return replace(self, sources=self.detectors, detectors=self.sources)


def patches_at_fractions(fractions, width, extent, strength=1.0):
    perim = 4.0 * extent
    return tuple(Patch(float(f) * perim, width, strength) for f in fractions)


def full_view(extent=50.0, width=1.0, omega=2 * math.pi * 100e6) -> Instrument:
    """20 sources and 20 interleaved detectors evenly around the perimeter."""
    k = np.arange(20)
    return Instrument(patches_at_fractions((k + 0.25) / 20, width, extent),
                      patches_at_fractions((k + 0.75) / 20, width, extent),
                      extent=extent, omega=omega)


def limited_view(extent=50.0, width=1.0, omega=2 * math.pi * 100e6) -> Instrument:
    """10 sources and 10 detectors over half of the perimeter."""
    k = np.arange(10)
    return Instrument(patches_at_fractions(0.5 * (k + 0.25) / 10, width, extent),
                      patches_at_fractions(0.5 * (k + 0.75) / 10, width, extent),
                      extent=extent, omega=omega)


def experimental(extent=80.0) -> Instrument:
    """16 wide sources and 16 narrow detectors, 56.98 MHz modulation."""
    k = np.arange(16)
    return Instrument(patches_at_fractions((k + 0.25) / 16, 8.0, extent),
                      patches_at_fractions((k + 0.75) / 16, 0.6, extent),
                      extent=extent, omega=2 * math.pi * 56.98e6)


def experimental_background(n, extent=80.0, radius=30.0) -> OpticalField:
    """Inner disk ``mu_a = 0.0065, mu_s' = 0.95`` in an outer ``0.01, 0.8`` region."""
    X, Y = Grid(n, extent).centers()
    inside = (X - extent / 2) ** 2 + (Y - extent / 2) ** 2 <= radius**2
    return OpticalField(np.where(inside, 0.0065, 0.01), np.where(inside, 0.95, 0.8), extent)


# ----------------------------------------------------------------------------
# grid topology


@dataclass(frozen=True)
class _Topology:
    n: int
    extent: float
    face_p: np.ndarray = field(repr=False)
    face_q: np.ndarray = field(repr=False)
    bnd_cell: np.ndarray = field(repr=False)
    bnd_lo: np.ndarray = field(repr=False)
    bnd_hi: np.ndarray = field(repr=False)


def _topology(n, extent) -> _Topology:
    idx = np.arange(n * n).reshape(n, n)
    face_p = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    face_q = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    h = extent / n
    j = np.arange(n)
    # boundary faces in perimeter order with their arc-length intervals
    cells = [idx[0, j], idx[j, n - 1], idx[n - 1, n - 1 - j], idx[n - 1 - j, 0]]
    lo = np.concatenate([e * extent + j * h for e in range(4)])
    return _Topology(n, extent, face_p, face_q, np.concatenate(cells), lo, lo + h)


class ForwardModel:
    """Assembled finite-volume system for one optical field and instrument."""

    def __init__(self, optics: OpticalField, inst: Instrument):
        if abs(optics.extent - inst.extent) > 1e-12 * inst.extent:
            raise ValueError(f"field extent {optics.extent} differs from instrument extent {inst.extent}")
        self.optics = optics
        self.inst = inst
        n = optics.mua.shape[0]
        self.n = n
        self.h = optics.extent / n
        self.topo = _topology(n, optics.extent)
        self.kappa = 1.0 / (inst.dim_factor * (optics.mua + optics.mus)).ravel()
        self.B = 2.0 * inst.zeta / inst.alpha_bc
        self.src_overlap = self._overlaps(inst.sources)
        self.det_overlap = self._overlaps(inst.detectors)

    def _overlaps(self, patches):
        """``(n_patches, n_boundary_faces)`` overlap lengths."""
        t = self.topo
        out = np.zeros((len(patches), t.bnd_cell.size))
        for k, p in enumerate(patches):
            lo, hi = p.interval()
            out[k] = np.clip(np.minimum(t.bnd_hi, hi) - np.maximum(t.bnd_lo, lo), 0.0, None)
        return out

    # --- assembly -------------------------------------------------------
    def _bnd_K(self):
        return 2.0 * self.kappa[self.topo.bnd_cell] / self.h

    @cached_property
    def matrix(self):
        t = self.topo
        N = self.n * self.n
        kp, kq = self.kappa[t.face_p], self.kappa[t.face_q]
        cf = 2.0 * kp * kq / (kp + kq)
        K = self._bnd_K()
        diag = np.zeros(N, dtype=complex)
        np.add.at(diag, t.face_p, cf)
        np.add.at(diag, t.face_q, cf)
        np.add.at(diag, t.bnd_cell, self.h * K * self.B / (K + self.B))
        diag += self.h**2 * (self.optics.mua.ravel() + 1j * self.inst.omega / self.inst.c)
        rows = np.concatenate([np.arange(N), t.face_p, t.face_q])
        cols = np.concatenate([np.arange(N), t.face_q, t.face_p])
        vals = np.concatenate([diag, -cf, -cf]).astype(complex)
        return sp.csc_matrix((vals, (rows, cols)), shape=(N, N))

    def _boundary_weights(self, overlap, scale):
        """Scatter ``scale * ell K / (K + B)`` onto cells; one column per patch."""
        K = self._bnd_K()
        u = overlap * (K / (K + self.B))
        out = np.zeros((self.n * self.n, overlap.shape[0]))
        np.add.at(out, self.topo.bnd_cell, (u * scale[:, None]).T)
        return out

    @cached_property
    def rhs(self):
        q = np.array([p.strength for p in self.inst.sources])
        return self._boundary_weights(self.src_overlap, 2.0 * q / self.inst.alpha_bc).astype(complex)

    @cached_property
    def det_weights(self):
        widths = np.array([p.width for p in self.inst.detectors])
        return self._boundary_weights(self.det_overlap, self.B / widths)

    @cached_property
    def _lu(self):
        try:
            return spla.splu(self.matrix)
        except RuntimeError:
            return None

    def _solve(self, rhs, trans="N"):
        if self._lu is not None:
            sol = self._lu.solve(np.ascontiguousarray(rhs), trans=trans)
        else:
            M = self.matrix if trans == "N" else self.matrix.T.tocsc()
            sol = np.empty_like(rhs)
            for k in range(rhs.shape[1]):
                sol[:, k], info = spla.gmres(M, rhs[:, k], rtol=1e-10, atol=0.0, maxiter=2000)
                if info != 0:
                    raise NumericalError(f"iterative fallback did not converge (info={info})")
        M = self.matrix if trans == "N" else self.matrix.T
        res = np.linalg.norm(M @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if not np.isfinite(res) or res > 1e-9:
            raise NumericalError(f"forward solve residual {res:.3e} exceeds 1e-9")
        return sol

    @cached_property
    def fields(self):
        """Fluence for every source, ``(n_sources, n*n)`` complex."""
        return self._solve(self.rhs).T

    @cached_property
    def adjoint_fields(self):
        """``M^{-T} w_d`` for every detector, ``(n_detectors, n*n)`` complex."""
        return self._solve(self.det_weights.astype(complex), trans="T").T

    def exitance(self):
        """Complex patch-averaged exitance ``(n_sources, n_detectors)``."""
        return self.fields @ self.det_weights

    def measurements(self):
        gam = self.exitance()
        mag = np.abs(gam)
        if not np.all(np.isfinite(gam)) or np.any(mag == 0):
            raise MeasurementError("exitance is zero or non-finite at some detector")
        return np.concatenate([np.log(mag).ravel(), np.angle(gam).ravel()])

    # --- adjoint Jacobian -----------------------------------------------
    def jacobian_dense(self):
        """``dY / d(mu_a)`` and ``dY / d(mu_s')`` as ``(2 S D, n*n)`` arrays."""
        t = self.topo
        N = self.n * self.n
        phi = self.fields
        psi = self.adjoint_fields
        S, D = phi.shape[0], psi.shape[0]
        B = self.B
        kap = self.kappa
        dG = np.zeros((S, D, N), dtype=complex)

        # interior faces: -dc (psi_p - psi_q)(phi_p - phi_q)
        kp, kq = kap[t.face_p], kap[t.face_q]
        dc_dp = 2.0 * kq**2 / (kp + kq) ** 2
        dc_dq = 2.0 * kp**2 / (kp + kq) ** 2
        prod = np.einsum("sf,df->sdf", phi[:, t.face_p] - phi[:, t.face_q],
                         psi[:, t.face_p] - psi[:, t.face_q])
        face_to_cell = sp.csr_matrix(
            (np.concatenate([dc_dp, dc_dq]),
             (np.concatenate([np.arange(t.face_p.size)] * 2), np.concatenate([t.face_p, t.face_q]))),
            shape=(t.face_p.size, N))
        dG -= (face_to_cell.T @ prod.reshape(S * D, -1).T).T.reshape(S, D, N)

        # boundary faces: diagonal term, source and detector weights
        K = self._bnd_K()
        cells = t.bnd_cell
        d_diag = 2.0 * B**2 / (K + B) ** 2
        d_ratio = (B / (K + B) ** 2) * (2.0 / self.h)
        q = np.array([p.strength for p in self.inst.sources])
        widths = np.array([p.width for p in self.inst.detectors])
        diag_c = np.zeros(N)
        np.add.at(diag_c, cells, d_diag)
        dG -= np.einsum("sn,dn->sdn", phi, psi) * diag_c
        db = np.zeros((S, N))
        np.add.at(db.T, cells, (self.src_overlap * d_ratio * (2.0 * q / self.inst.alpha_bc)[:, None]).T)
        dw = np.zeros((D, N))
        np.add.at(dw.T, cells, (self.det_overlap * d_ratio * (B / widths)[:, None]).T)
        dG += np.einsum("dn,sn->sdn", psi, db)
        dG += np.einsum("dn,sn->sdn", dw, phi)

        dkappa = -self.inst.dim_factor * kap**2
        dG_mus = dG * dkappa
        dG_mua = dG_mus - self.h**2 * np.einsum("sn,dn->sdn", phi, psi)
        gam = self.exitance()[:, :, None]
        out = []
        for dg in (dG_mua, dG_mus):
            rel = (dg / gam).reshape(S * D, N)
            out.append(np.vstack([rel.real, rel.imag]))
        return out[0], out[1]


def solve_forward(optics: OpticalField, inst: Instrument, source_index=None):
    """Complex fluence ``(n, n)`` for one source, or ``(S, n, n)`` for all."""
    fm = ForwardModel(optics, inst)
    n = fm.n
    if source_index is None:
        return fm.fields.reshape(-1, n, n)
    return fm.fields[source_index].reshape(n, n)


def measure(phi, optics: OpticalField, inst: Instrument):
    """``[log|Gamma|; arg Gamma]`` from fluence fields ``(S, n, n)``."""
    fm = ForwardModel(optics, inst)
    phi = np.asarray(phi).reshape(inst.n_sources, -1)
    gam = phi @ fm.det_weights
    mag = np.abs(gam)
    if not np.all(np.isfinite(gam)) or np.any(mag == 0):
        raise MeasurementError("exitance is zero or non-finite at some detector")
    return np.concatenate([np.log(mag).ravel(), np.angle(gam).ravel()])


def forward_data(optics: OpticalField, inst: Instrument):
    """Nonlinear measurement map ``Y = [log amplitude; phase]``."""
    return ForwardModel(optics, inst).measurements()


def jacobian(background: OpticalField, inst: Instrument, rescale=True) -> LinearOperator:
    """Adjoint-assembled Jacobian at ``background``.

    With ``rescale`` the result acts on the ``[0, 1]``-rescaled two-channel
    field; otherwise it is the block ``(J_mua, J_mus)`` in physical units.
    """
    j_mua, j_mus = ForwardModel(background, inst).jacobian_dense()
    shape = (1,) + background.mua.shape
    a = DenseMatrixOperator(j_mua, shape)
    b = DenseMatrixOperator(j_mus, shape)
    if rescale:
        return rescale_jacobian(a, b)
    return HStackOperator([a, b])


def wrap_phase(p):
    """Map angles to ``(-pi, pi]``."""
    p = np.asarray(p, dtype=float)
    return np.pi - np.mod(np.pi - p, 2 * np.pi)


def difference_data(y2, y1):
    """``y2 - y1`` with the phase block wrapped to ``(-pi, pi]``."""
    y2 = np.asarray(y2, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    if y2.shape != y1.shape or y2.size % 2:
        raise DimensionError("measurement vectors must have equal even length")
    d = y2 - y1
    half = d.size // 2
    d[half:] = wrap_phase(d[half:])
    return d


def simulate_difference_data(truth, A: LinearOperator, noise_seed, sigma_amp=0.05,
                             sigma_phase=0.001, noise=True, extent=50.0):
    """``A x + e`` with independent Gaussian noise per block.

    ``truth`` is a rescaled two-channel field.  When its grid differs from the
    operator's (for example 32 vs 33 cells), it is resampled onto the
    operator's grid first so that data and inversion use different meshes.
    """
    x = np.asarray(truth, dtype=float)
    if x.shape != A.domain_shape:
        if x.ndim != 3 or len(A.domain_shape) != 3 or x.shape[0] != A.domain_shape[0]:
            raise DimensionError(f"truth {x.shape} is incompatible with operator domain {A.domain_shape}")
        x = resample_field(x, Grid(x.shape[-1], extent), Grid(A.domain_shape[-1], extent))
    y = A.apply(x)
    if noise:
        half = y.size // 2
        sig = np.concatenate([np.full(half, sigma_amp), np.full(y.size - half, sigma_phase)])
        y = y + sig * np.random.default_rng(noise_seed).standard_normal(y.size)
    return y


def nonlinear_difference_data(truth, background: OpticalField, inst: Instrument):
    """Exact ``Y(background + delta) - Y(background)`` for a rescaled truth field.

    ``delta`` is the physical perturbation of ``truth``, so the result is
    comparable with ``A x - A x0`` where ``x0`` is the neutral field 0.5.
    """
    from .ensemble import to_physical

    phys = to_physical(np.asarray(truth, dtype=float))
    y_pert = forward_data(background.perturbed(phys[0], phys[1]), inst)
    return difference_data(y_pert, forward_data(background, inst))


def read_data_vector(path, n_measurements=None):
    """Load raw float64 little-endian measurements in ``[amplitude; phase]`` order."""
    vals = np.frombuffer(Path(path).read_bytes(), dtype="<f8").astype(float)
    if vals.size % 2:
        raise DimensionError(f"{path}: data vector length {vals.size} is odd")
    if n_measurements is not None and vals.size != n_measurements:
        raise DimensionError(f"{path}: expected {n_measurements} values, found {vals.size}")
    return vals


def write_data_vector(path, y) -> None:
    Path(path).write_bytes(np.asarray(y, dtype="<f8").tobytes())
