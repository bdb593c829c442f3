"""Lattice geometry, periodic grids, and periodic elliptic solvers.

Everything on the unit cell is discretized by Fourier collocation on a
uniform grid: derivatives are exact for grid-resolvable trigonometric
polynomials and spectrally accurate for smooth fields, which is what lets
effective constants downstream be trusted to ~1e-10 at modest resolutions.

Conventions
-----------
* Grid nodes along axis i sit at ``x = j * L_i / N_i``, ``j = 0..N_i-1``.
* ``D_j = -i d/dx_j`` has Fourier symbol ``2*pi*fftfreq(N, d=h)``.
* Matrix-valued fields are stored as arrays of shape ``grid.shape + (k, l)``.
* The cell mean of a smooth periodic field is the plain node average
  (trapezoid rule on a periodic grid).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    NoConvergence,
    NonZeroMeanRHS,
    SingularSample,
    UnsupportedDimension,
)

_ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class Lattice:
    """Orthogonal lattice with elementary cell ``prod (-L_i/2, L_i/2)``.

    Only rectangular lattices are supported; they keep every periodic solve
    FFT-friendly.
    """

    lengths: tuple[float, ...]

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.lengths)
        object.__setattr__(self, "lengths", lengths)
        if len(lengths) not in (1, 2):
            raise UnsupportedDimension(f"lattice dimension must be 1 or 2, got {len(lengths)}")
        if any(v <= 0 for v in lengths):
            raise ValueError("lattice basis lengths must be positive")

    @property
    def d(self) -> int:
        return len(self.lengths)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.lengths))

    @property
    def r1(self) -> float:
        """Half the cell diameter: ``r1 = sqrt(sum L_i^2) / 2``."""
        return 0.5 * float(np.sqrt(sum(v * v for v in self.lengths)))


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform sampling of the elementary cell, ``N_i`` even and >= 8."""

    lattice: Lattice
    shape: tuple[int, ...]

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        object.__setattr__(self, "shape", shape)
        if len(shape) != self.lattice.d:
            raise ValueError("grid shape must match lattice dimension")
        for n in shape:
            if n < 8 or n % 2:
                raise ValueError(f"samples per dimension must be even and >= 8, got {n}")

    @property
    def d(self) -> int:
        return self.lattice.d

    @property
    def steps(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.lattice.lengths, self.shape))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def axes(self) -> list[np.ndarray]:
        """Node coordinates along each axis."""
        return [np.arange(n) * (L / n) for L, n in zip(self.lattice.lengths, self.shape)]

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape ``(*shape, d)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    def wavenumbers(self) -> list[np.ndarray]:
        """Symbol of ``D_j`` per axis (1-d arrays)."""
        return [
            2.0 * np.pi * np.fft.fftfreq(n, d=h)
            for n, h in zip(self.shape, self.steps)
        ]

    def wavenumber_mesh(self) -> list[np.ndarray]:
        """Symbols of ``D_j`` broadcast over the full grid."""
        return list(np.meshgrid(*self.wavenumbers(), indexing="ij"))


@dataclass
class PeriodicField:
    """Matrix-valued samples of a Gamma-periodic function on a cell grid."""

    grid: PeriodicGrid
    values: np.ndarray  # shape grid.shape + (k, l), complex
    hermitian: bool = False
    positive_definite: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        expected = self.grid.shape
        if values.ndim != self.grid.d + 2 or values.shape[: self.grid.d] != expected:
            raise ValueError(
                f"field values must have shape {expected} + (k, l), got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite entries")
        self.values = values
        if self.hermitian:
            dev = np.max(np.abs(values - np.conj(np.swapaxes(values, -1, -2))))
            scale = max(1.0, float(np.max(np.abs(values))))
            if dev > 1e-10 * scale:
                raise ValueError(f"field claimed hermitian, max deviation {dev:.3e}")
        if self.positive_definite:
            if self.shape[0] != self.shape[1]:
                raise ValueError("positive_definite requires a square matrix field")
            eigs = np.linalg.eigvalsh(0.5 * (values + np.conj(np.swapaxes(values, -1, -2))))
            if eigs.min() <= 0:
                raise ValueError("field claimed positive definite has a nonpositive eigenvalue")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[-2], self.values.shape[-1]

    def eval(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at arbitrary points, shape ``(P, d) -> (P, k, l)``.

        Points that land on grid nodes (mod the lattice) are gathered
        exactly; anything else goes through the trigonometric interpolant,
        which is exact for fields resolvable on the grid.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.grid.d:
            raise ValueError("points have wrong dimension")
        frac = np.empty_like(pts)
        for j, (L, n) in enumerate(zip(self.grid.lattice.lengths, self.grid.shape)):
            frac[:, j] = np.mod(pts[:, j] / (L / n), n)
        idx = np.rint(frac)
        if np.max(np.abs(frac - idx)) < _ALIGN_TOL:
            idx = np.mod(idx.astype(int), np.array(self.grid.shape))
            return self.values[tuple(idx.T)]
        return self._trig_eval(pts)

    def _trig_eval(self, pts: np.ndarray) -> np.ndarray:
        axes = tuple(range(self.grid.d))
        hat = np.fft.fftn(self.values, axes=axes) / self.grid.n_nodes
        # Per-axis evaluation matrices; the Nyquist column uses a cosine so
        # that real fields get a real interpolant.
        mats = []
        for j, (n, k) in enumerate(zip(self.grid.shape, self.grid.wavenumbers())):
            phase = np.exp(1j * np.outer(pts[:, j], k))
            ny = n // 2
            phase[:, ny] = np.cos(pts[:, j] * k[ny])
            mats.append(phase)
        if self.grid.d == 1:
            return np.einsum("pa,akl->pkl", mats[0], hat)
        return np.einsum("pa,pb,abkl->pkl", mats[0], mats[1], hat)


def field_from_callable(
    grid: PeriodicGrid,
    fn: Callable[[np.ndarray], np.ndarray],
    shape: tuple[int, int] | None = None,
    **flags,
) -> PeriodicField:
    """Sample a closure ``fn(points (P, d)) -> (P, k, l)`` onto the grid."""
    pts = grid.nodes().reshape(-1, grid.d)
    vals = np.asarray(fn(pts), dtype=complex)
    if vals.ndim == 1:  # scalar closure convenience
        vals = vals.reshape(-1, 1, 1)
    if shape is not None and vals.shape[1:] != tuple(shape):
        raise ValueError(f"closure returned shape {vals.shape[1:]}, expected {shape}")
    return PeriodicField(grid, vals.reshape(grid.shape + vals.shape[1:]), **flags)


def const_field(grid: PeriodicGrid, matrix: np.ndarray, **flags) -> PeriodicField:
    mat = np.atleast_2d(np.asarray(matrix, dtype=complex))
    vals = np.broadcast_to(mat, grid.shape + mat.shape).copy()
    return PeriodicField(grid, vals, **flags)


def mean_value(f: PeriodicField) -> np.ndarray:
    """Cell mean ``|Omega|^-1 int_Omega f`` (plain node average)."""
    axes = tuple(range(f.grid.d))
    return f.values.mean(axis=axes)


def underline_mean(f: PeriodicField) -> np.ndarray:
    """Inverse of the mean of pointwise inverses."""
    k, l = f.shape
    if k != l:
        raise ValueError("underline mean requires a square matrix field")
    flat = f.values.reshape(-1, k, k)
    conds = np.linalg.cond(flat)
    if np.max(conds) > 1e12:
        raise SingularSample(f"nodal matrix condition number {np.max(conds):.3e} exceeds 1e12")
    inv_mean = np.linalg.inv(flat).mean(axis=0)
    return np.linalg.inv(inv_mean)


def l2_cell_norm(f: PeriodicField) -> float:
    """``L_2(Omega)`` norm of a field (Frobenius over matrix entries)."""
    axes = tuple(range(f.grid.d))
    density = (np.abs(f.values) ** 2).sum(axis=(-2, -1)).mean(axis=axes)
    return float(np.sqrt(f.grid.lattice.cell_volume * density))


def spectral_derivative(f: PeriodicField, axis: int) -> PeriodicField:
    """Partial derivative ``d/dx_axis`` via the Fourier interpolant."""
    g = f.grid
    axes = tuple(range(g.d))
    hat = np.fft.fftn(f.values, axes=axes)
    k = g.wavenumber_mesh()[axis].copy()
    # Nyquist derivative of a real signal vanishes by symmetry.
    idx = [slice(None)] * g.d
    idx[axis] = g.shape[axis] // 2
    k[tuple(idx)] = 0.0
    hat = hat * (1j * k)[(...,) + (None, None)]
    return PeriodicField(g, np.fft.ifftn(hat, axes=axes))


def apply_D(f_values: np.ndarray, grid: PeriodicGrid, axis: int) -> np.ndarray:
    """Apply ``D_axis = -i d/dx`` spectrally to raw values ``(*shape, ...)``."""
    axes = tuple(range(grid.d))
    hat = np.fft.fftn(f_values, axes=axes)
    k = grid.wavenumber_mesh()[axis]
    extra = f_values.ndim - grid.d
    hat = hat * k.reshape(k.shape + (1,) * extra)
    return np.fft.ifftn(hat, axes=axes)


def b_of_D(values: np.ndarray, grid: PeriodicGrid, b_mats: Sequence[np.ndarray]) -> np.ndarray:
    """``b(D) u = sum_j b_j D_j u`` for ``u`` of shape ``(*shape, n, cols)``."""
    out = None
    for j, bj in enumerate(b_mats):
        term = np.einsum("mn,...nc->...mc", bj, apply_D(values, grid, j))
        out = term if out is None else out + term
    return out


def b_of_D_adjoint(values: np.ndarray, grid: PeriodicGrid, b_mats: Sequence[np.ndarray]) -> np.ndarray:
    """``b(D)^* w = sum_j D_j (b_j^* w)`` for ``w`` of shape ``(*shape, m, cols)``."""
    out = None
    for j, bj in enumerate(b_mats):
        term = apply_D(np.einsum("nm,...mc->...nc", bj.conj().T, values), grid, j)
        out = term if out is None else out + term
    return out


def _symbol_matrices(b) -> list[np.ndarray]:
    mats = getattr(b, "matrices", b)
    return [np.atleast_2d(np.asarray(m, dtype=complex)) for m in mats]


def _precond_inverses(grid: PeriodicGrid, g_mean: np.ndarray, b_mats) -> np.ndarray:
    """Per-mode inverses of the constant-coefficient symbol ``b(k)^* g_mean b(k)``."""
    kmesh = grid.wavenumber_mesh()
    n = b_mats[0].shape[1]
    sym = np.zeros(grid.shape + (n, n), dtype=complex)
    for j, bj in enumerate(b_mats):
        for l, bl in enumerate(b_mats):
            mat = bj.conj().T @ g_mean @ bl
            sym += (kmesh[j] * kmesh[l])[(...,) + (None, None)] * mat
    flat = sym.reshape(-1, n, n)
    inv = np.zeros_like(flat)
    # Mode zero (flat index 0) stays zero: solves live on the zero-mean subspace.
    inv[1:] = np.linalg.inv(flat[1:])
    return inv.reshape(sym.shape)


def periodic_elliptic_solve(
    g: PeriodicField,
    b,
    rhs: PeriodicField,
    tol: float = 1e-10,
) -> PeriodicField:
    """Zero-mean periodic solution of ``b(D)^* g b(D) u = rhs``.

    Preconditioned conjugate gradients on the zero-mean subspace; the
    preconditioner is the exact inverse of the constant-coefficient operator
    built from the cell mean of ``g``.  Columns of ``rhs`` are solved
    independently.
    """
    grid = g.grid
    b_mats = _symbol_matrices(b)
    m, n = b_mats[0].shape
    if g.shape != (m, m):
        raise ValueError(f"g must be {m}x{m} for this symbol, got {g.shape}")
    if rhs.shape[0] != n:
        raise ValueError(f"rhs must have {n} rows, got {rhs.shape[0]}")

    rhs_mean = mean_value(rhs)
    scale = max(1.0, float(np.max(np.abs(rhs.values))))
    if np.max(np.abs(rhs_mean)) > 1e-10 * scale:
        raise NonZeroMeanRHS(
            f"rhs mean {np.max(np.abs(rhs_mean)):.3e} exceeds tolerance (column-wise zero mean required)"
        )

    g_vals = g.values
    axes = tuple(range(grid.d))

    def apply_op(u: np.ndarray) -> np.ndarray:
        bu = b_of_D(u, grid, b_mats)
        return b_of_D_adjoint(np.einsum("...mp,...pc->...mc", g_vals, bu), grid, b_mats)

    pre_inv = _precond_inverses(grid, mean_value(g), b_mats)

    def apply_pre(r: np.ndarray) -> np.ndarray:
        rhat = np.fft.fftn(r, axes=axes)
        xhat = np.einsum("...nk,...kc->...nc", pre_inv, rhat)
        return np.fft.ifftn(xhat, axes=axes)

    cap = 10 * grid.n_nodes
    ncols = rhs.values.shape[-1]
    sol = np.zeros(grid.shape + (n, ncols), dtype=complex)
    for c in range(ncols):
        bcol = rhs.values[..., :, c : c + 1]
        bnorm = np.linalg.norm(bcol)
        if bnorm == 0.0:
            continue
        x = np.zeros_like(bcol)
        r = bcol.copy()
        z = apply_pre(r)
        p = z.copy()
        rz = np.vdot(r, z)
        for _ in range(cap):
            if np.linalg.norm(r) <= tol * bnorm:
                break
            ap = apply_op(p)
            alpha = rz / np.vdot(p, ap)
            x += alpha * p
            r -= alpha * ap
            if np.linalg.norm(r) <= tol * bnorm:
                break
            z = apply_pre(r)
            rz_new = np.vdot(r, z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        else:
            raise NoConvergence(
                f"CG failed to reach {tol:.1e} in {cap} iterations (residual "
                f"{np.linalg.norm(r) / bnorm:.3e})"
            )
        x -= x.mean(axis=axes)
        sol[..., :, c : c + 1] = x
    return PeriodicField(grid, sol)


def poisson_periodic(v: PeriodicField) -> PeriodicField:
    """Zero-mean periodic solution of ``Laplace(Phi) = v`` (spectral)."""
    if v.shape != (1, 1):
        raise ValueError("poisson_periodic expects a scalar field")
    grid = v.grid
    scale = max(1.0, float(np.max(np.abs(v.values))))
    if np.max(np.abs(mean_value(v))) > 1e-10 * scale:
        raise NonZeroMeanRHS("potential must have zero cell mean")
    axes = tuple(range(grid.d))
    hat = np.fft.fftn(v.values, axes=axes)
    k2 = sum(k * k for k in grid.wavenumber_mesh())
    k2 = np.where(k2 == 0.0, 1.0, k2)
    phi_hat = -hat / k2[(...,) + (None, None)]
    idx = (0,) * grid.d
    phi_hat[idx] = 0.0
    return PeriodicField(grid, np.fft.ifftn(phi_hat, axes=axes))
