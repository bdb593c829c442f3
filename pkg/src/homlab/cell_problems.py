"""Corrector cell problems and every effective constant built from them.

The two periodic problems are

    b(D)^* g (b(D) Lambda + 1_m) = 0,      mean(Lambda) = 0,
    b(D)^* g b(D) LambdaTilde = -sum_j D_j a_j^*,   mean(LambdaTilde) = 0,

and the effective data are means of pointwise products of their spectral
first-order derivatives with g.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import CoefficientSet, SymbolB, validate_symbol
from .periodic_cell import (
    PeriodicField,
    PeriodicGrid,
    apply_D,
    b_of_D,
    b_of_D_adjoint,
    mean_value,
    periodic_elliptic_solve,
    underline_mean,
)

_ZERO_DETECT_TOL = 1e-9


@dataclass
class CellData:
    """All cell-problem outputs and effective constants of one preset."""

    Lambda: PeriodicField          # n x m
    LambdaTilde: PeriodicField     # n x n
    g_tilde: PeriodicField         # m x m
    g0: np.ndarray                 # m x m, Hermitian positive definite
    V: np.ndarray                  # m x n
    W: np.ndarray                  # n x n, Hermitian PSD
    a_bar: tuple[np.ndarray, ...]  # means of a_j + a_j^*
    Q_bar: np.ndarray
    Q0_bar: np.ndarray
    f0: np.ndarray                 # (mean Q0)^{-1/2}
    lam: float | None
    c_flat: float
    alpha0: float
    alpha1: float
    underline_g: np.ndarray
    overline_g: np.ndarray
    sup_norms: dict
    zero_corrector: bool
    divergence_free_a: bool
    grid_shape: tuple[int, ...]

    def voigt_reuss_margins(self) -> tuple[float, float]:
        """Smallest eigenvalues of ``g0 - underline(g)`` and ``overline(g) - g0``."""
        lo = np.linalg.eigvalsh(self.g0 - self.underline_g).min()
        hi = np.linalg.eigvalsh(self.overline_g - self.g0).min()
        return float(lo), float(hi)

    def constants_dict(self) -> dict:
        """JSON-ready dictionary of all effective constants."""
        def c(mat):
            arr = np.asarray(mat)
            return {"re": arr.real.tolist(), "im": arr.imag.tolist()}

        lo, hi = self.voigt_reuss_margins()
        return {
            "g0": c(self.g0),
            "V": c(self.V),
            "W": c(self.W),
            "a_bar": [c(a) for a in self.a_bar],
            "Q_bar": c(self.Q_bar),
            "Q0_bar": c(self.Q0_bar),
            "f0": c(self.f0),
            "lambda": self.lam,
            "c_flat": self.c_flat,
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "underline_g": c(self.underline_g),
            "overline_g": c(self.overline_g),
            "voigt_reuss_margins": [lo, hi],
            "zero_corrector": self.zero_corrector,
            "divergence_free_a": self.divergence_free_a,
            "cell_grid": list(self.grid_shape),
            "sup_norms": self.sup_norms,
        }


def _hermitize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.conj().T)


def solve_Lambda(g: PeriodicField, b: SymbolB) -> PeriodicField:
    """Periodic corrector of the principal part, one solve per column of 1_m."""
    grid = g.grid
    m = b.m
    # rhs column k is -b(D)^* (g e_k); its mean vanishes identically.
    cols = []
    for k in range(m):
        w = g.values[..., :, k : k + 1]
        cols.append(-b_of_D_adjoint(w, grid, b.matrices))
    rhs = PeriodicField(grid, np.concatenate(cols, axis=-1))
    return periodic_elliptic_solve(g, b, rhs)


def solve_LambdaTilde(g: PeriodicField, b: SymbolB, a_fields: list[PeriodicField]) -> PeriodicField:
    """Periodic corrector of the first-order terms."""
    grid = g.grid
    rhs_vals = None
    for j, aj in enumerate(a_fields):
        term = -apply_D(np.conj(np.swapaxes(aj.values, -1, -2)), grid, j)
        rhs_vals = term if rhs_vals is None else rhs_vals + term
    rhs = PeriodicField(grid, rhs_vals)
    return periodic_elliptic_solve(g, b, rhs)


def effective_tensor(g: PeriodicField, Lam: PeriodicField, b: SymbolB) -> tuple[PeriodicField, np.ndarray]:
    """``g_tilde = g (b(D) Lambda + 1_m)`` and its Hermitized cell mean."""
    grid = g.grid
    bdl = b_of_D(Lam.values, grid, b.matrices)
    bdl = bdl + np.eye(b.m)
    g_tilde = PeriodicField(grid, np.einsum("...mp,...pk->...mk", g.values, bdl))
    return g_tilde, _hermitize(mean_value(g_tilde))


def lower_order_constants(
    g: PeriodicField, Lam: PeriodicField, LamTilde: PeriodicField, b: SymbolB
) -> tuple[np.ndarray, np.ndarray]:
    """Constant matrices coupling the correctors to the first-order data."""
    grid = g.grid
    bdl = b_of_D(Lam.values, grid, b.matrices)
    bdlt = b_of_D(LamTilde.values, grid, b.matrices)
    axes = tuple(range(grid.d))
    V = np.einsum("...pm,...pq,...qn->...mn", bdl.conj(), g.values, bdlt).mean(axis=axes)
    W = np.einsum("...pm,...pq,...qn->...mn", bdlt.conj(), g.values, bdlt).mean(axis=axes)
    return V, _hermitize(W)


def residual_Lambda(g: PeriodicField, Lam: PeriodicField, b: SymbolB) -> float:
    """Sup-norm residual of the principal cell problem."""
    grid = g.grid
    bdl = b_of_D(Lam.values, grid, b.matrices) + np.eye(b.m)
    res = b_of_D_adjoint(np.einsum("...mp,...pk->...mk", g.values, bdl), grid, b.matrices)
    return float(np.max(np.abs(res)))


def _divergence_free(a_fields: list[PeriodicField], grid: PeriodicGrid) -> bool:
    acc = None
    scale = 1e-30
    for j, aj in enumerate(a_fields):
        scale = max(scale, float(np.max(np.abs(aj.values))))
        term = apply_D(np.conj(np.swapaxes(aj.values, -1, -2)), grid, j)
        acc = term if acc is None else acc + term
    return float(np.max(np.abs(acc))) <= _ZERO_DETECT_TOL * max(1.0, scale)


def _columns_divergence_free(g: PeriodicField, b: SymbolB) -> bool:
    grid = g.grid
    res = b_of_D_adjoint(g.values, grid, b.matrices)
    scale = max(1.0, float(np.max(np.abs(g.values))))
    return float(np.max(np.abs(res))) <= _ZERO_DETECT_TOL * scale


def assemble_cell_data(
    coeffs: CoefficientSet,
    domain_diameter: float,
    cell_nodes: int = 128,
) -> CellData:
    """Solve both cell problems and fill every effective constant.

    ``c_flat`` is the common spectral lower bound
    ``alpha0 / (4 |g^-1| |Q0| diam(O)^2)`` with nodal sup-norms standing in
    for the L_inf norms (exact for sampled fields).
    """
    b = coeffs.symbol
    grid = PeriodicGrid(coeffs.lattice, (cell_nodes,) * coeffs.d)
    g = coeffs.g.sample(grid, hermitian=True, positive_definite=True)
    a_fields = [aj.sample(grid) for aj in coeffs.a]

    Lam = solve_Lambda(g, b)
    LamTilde = solve_LambdaTilde(g, b, a_fields)
    g_tilde, g0 = effective_tensor(g, Lam, b)
    V, W = lower_order_constants(g, Lam, LamTilde, b)

    a_bar = tuple(
        mean_value(aj) + mean_value(aj).conj().T for aj in a_fields
    )
    Q_bar = _hermitize(mean_value(coeffs.Q.sample(grid)))
    Q0_bar = _hermitize(mean_value(coeffs.Q0.sample(grid)))
    w0, u0 = np.linalg.eigh(Q0_bar)
    f0 = u0 @ np.diag(1.0 / np.sqrt(w0)) @ u0.conj().T

    alpha0, alpha1 = validate_symbol(b)
    sups = coeffs.sup_norms(grid)
    c_flat = 0.25 * alpha0 / (sups["g_inv"] * sups["Q0"] * domain_diameter**2)

    zero_g = _columns_divergence_free(g, b)
    zero_a = _divergence_free(a_fields, grid)

    return CellData(
        Lambda=Lam,
        LambdaTilde=LamTilde,
        g_tilde=g_tilde,
        g0=g0,
        V=V,
        W=W,
        a_bar=a_bar,
        Q_bar=Q_bar,
        Q0_bar=Q0_bar,
        f0=f0,
        lam=coeffs.lam,
        c_flat=float(c_flat),
        alpha0=alpha0,
        alpha1=alpha1,
        underline_g=underline_mean(g),
        overline_g=mean_value(g),
        sup_norms=sups,
        zero_corrector=zero_g and zero_a,
        divergence_free_a=zero_a,
        grid_shape=grid.shape,
    )
