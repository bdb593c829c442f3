"""First-order approximations: corrector and flux operators, with and
without Steklov smoothing, plus interior-subdomain norm helpers.

All operators are materialized as matrices acting on interior-node vectors;
the oscillating multiplication factors ``Lambda^eps``, ``LambdaTilde^eps``,
``g_tilde^eps`` are sampled exactly on the (aligned) scaled grid.  Chains
are kept sparse until the dense effective engine is applied, so one dense
product per corrector matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .cell_problems import CellData
from .coefficients import CoefficientSet
from .domain_ops import (
    DomainGrid,
    LinearMapNorm,
    block_diag_matrix,
    centered_D,
    extension_matrix,
    forward_difference,
    operator_norm,
    sample_scaled,
    steklov_matrix,
)
from .periodic_cell import PeriodicField, b_of_D


def _eval_periodic(field: PeriodicField, points: np.ndarray, eps: float) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 1)
    return field.eval(pts / eps)


def _mult(blocks: np.ndarray) -> sp.csr_matrix:
    return block_diag_matrix(blocks)


def _kron(scalar: sp.spmatrix, block: np.ndarray) -> sp.csr_matrix:
    return sp.kron(scalar, block, format="csr")


def _selection(ext_nodes: int, picks: np.ndarray) -> sp.csr_matrix:
    R = sp.csr_matrix(
        (np.ones(picks.size), (np.arange(picks.size), picks)),
        shape=(picks.size, ext_nodes),
    )
    return R


def smoothing_chains(
    cell: CellData, coeffs: CoefficientSet, grid: DomainGrid, eps: float
) -> dict[str, sp.csr_matrix]:
    """Sparse factors shared by the smoothed corrector and flux operators.

    Returns the chains ``SbP`` (smooth after ``b(D)`` after extension,
    m components) and ``SP`` (smooth after extension, n components), both
    restricted to interior domain nodes.
    """
    b1 = coeffs.symbol.matrices[0]
    n, m = coeffs.symbol.n, coeffs.symbol.m
    half = int(round(eps / grid.h)) // 2
    P_scalar, ext = extension_matrix(grid, margin=half + 4)
    S_scalar, out = steklov_matrix(ext, eps)
    sel = _selection(out.n_nodes, out.interior_index())

    C_ext = centered_D(ext.n_nodes, grid.h)
    Bd = _kron(C_ext, b1)  # (ext*m) x (ext*n)

    P_n = _kron(P_scalar, np.eye(n))
    RS_m = _kron(sel @ S_scalar, np.eye(m))
    RS_n = _kron(sel @ S_scalar, np.eye(n))

    return {
        "SbP": (RS_m @ Bd @ P_n).tocsr(),  # (N_int*m) x (N_int*n)
        "SP": (RS_n @ P_n).tocsr(),        # (N_int*n) x (N_int*n)
    }


def plain_chains(coeffs: CoefficientSet, grid: DomainGrid) -> dict[str, sp.csr_matrix]:
    """The unsmoothed analogues: ``b(D)`` by centered differences on the box.

    Nodes next to the boundary use the homogeneous Dirichlet value, which
    keeps the stencil second order without one-sided corrections.
    """
    b1 = coeffs.symbol.matrices[0]
    n = coeffs.symbol.n
    C = centered_D(grid.n_interior, grid.h)
    return {
        "bD": _kron(C, b1),                        # (N_int*m) x (N_int*n)
        "I": sp.eye(grid.n_interior * n).tocsr(),
    }


def corrector_chain(
    cell: CellData,
    coeffs: CoefficientSet,
    grid: DomainGrid,
    eps: float,
    smoothed: bool = True,
) -> sp.csr_matrix:
    """The oscillating part of the corrector, without the effective engine."""
    x = grid.interior_nodes()
    lam_mult = _mult(_eval_periodic(cell.Lambda, x, eps))        # n x m blocks
    lamt_mult = _mult(_eval_periodic(cell.LambdaTilde, x, eps))  # n x n blocks
    if smoothed:
        ch = smoothing_chains(cell, coeffs, grid, eps)
        return (lam_mult @ ch["SbP"] + lamt_mult @ ch["SP"]).tocsr()
    ch = plain_chains(coeffs, grid)
    return (lam_mult @ ch["bD"] + lamt_mult @ ch["I"]).tocsr()


def corrector_KD(
    cell: CellData,
    coeffs: CoefficientSet,
    grid: DomainGrid,
    eps: float,
    t: float,
    engine,
) -> np.ndarray:
    """Dense matrix of the smoothed corrector at time ``t``.

    ``engine`` is the effective spectral factorization (or any object with a
    ``semigroup(t)`` method); composition order is engine, extension, b(D),
    smoothing, oscillating multiplication, restriction.
    """
    chain = corrector_chain(cell, coeffs, grid, eps, smoothed=True)
    return chain @ engine.semigroup(t)


def corrector_KD0(
    cell: CellData,
    coeffs: CoefficientSet,
    grid: DomainGrid,
    eps: float,
    t: float,
    engine,
) -> np.ndarray:
    """Dense matrix of the plain (unsmoothed) corrector at time ``t``."""
    chain = corrector_chain(cell, coeffs, grid, eps, smoothed=False)
    return chain @ engine.semigroup(t)


# ---------------------------------------------------------------------------
# Fluxes
# ---------------------------------------------------------------------------

def flux_true_chain(coeffs: CoefficientSet, grid: DomainGrid, eps: float) -> sp.csr_matrix:
    """Node-averaged discrete flux ``g^eps b(D) u`` from interior values.

    The flux is formed at midpoints (where the conservative scheme samples
    ``g``) and averaged back to nodes, m components per node.
    """
    b1 = coeffs.symbol.matrices[0]
    n, m = coeffs.symbol.n, coeffs.symbol.m
    g_mid = sample_scaled(coeffs.g, grid.midpoints(), eps)
    gb = np.einsum("pml,lk->pmk", g_mid, b1)  # (P, m, n)
    Gmat = _mult(gb)
    D = _kron(forward_difference(grid), np.eye(n)) * (-1j)  # b(D) u = -i b1 u'
    n_int = grid.n_interior
    rows, cols, vals = [], [], []
    for i in range(n_int):
        rows.extend([i, i])
        cols.extend([i, i + 1])
        vals.extend([0.5, 0.5])
    Avg = sp.csr_matrix((vals, (rows, cols)), shape=(n_int, grid.n_cells))
    return (_kron(Avg, np.eye(m)) @ Gmat @ D).tocsr()


def flux_true(
    coeffs: CoefficientSet, grid: DomainGrid, eps: float, u: np.ndarray
) -> np.ndarray:
    """Flux of one solution snapshot (m components per node, flattened)."""
    return flux_true_chain(coeffs, grid, eps) @ u


def flux_approx_chain(
    cell: CellData,
    coeffs: CoefficientSet,
    grid: DomainGrid,
    eps: float,
    smoothed: bool = True,
) -> sp.csr_matrix:
    """Two-term flux approximation without the effective engine.

    ``g_tilde^eps S b(D) P + g^eps (b(D) LambdaTilde)^eps S P`` in the
    smoothed variant; the plain variant drops the smoothing and extension.
    """
    x = grid.interior_nodes()
    gt_mult = _mult(_eval_periodic(cell.g_tilde, x, eps))  # m x m
    bdlt = b_of_D(cell.LambdaTilde.values, cell.LambdaTilde.grid, coeffs.symbol.matrices)
    bdlt_field = PeriodicField(cell.LambdaTilde.grid, bdlt)
    g_nodes = sample_scaled(coeffs.g, x, eps)
    second = np.einsum("pml,plk->pmk", g_nodes, _eval_periodic(bdlt_field, x, eps))
    second_mult = _mult(second)  # m x n
    if smoothed:
        ch = smoothing_chains(cell, coeffs, grid, eps)
        return (gt_mult @ ch["SbP"] + second_mult @ ch["SP"]).tocsr()
    ch = plain_chains(coeffs, grid)
    return (gt_mult @ ch["bD"] + second_mult @ ch["I"]).tocsr()


def flux_approx(
    cell: CellData,
    coeffs: CoefficientSet,
    grid: DomainGrid,
    eps: float,
    t: float,
    engine,
    smoothed: bool = True,
) -> np.ndarray:
    """Dense matrix of the flux approximation at time ``t``."""
    return flux_approx_chain(cell, coeffs, grid, eps, smoothed) @ engine.semigroup(t)


def interior_norm_pack(
    T: np.ndarray,
    grid: DomainGrid,
    delta0: float,
    ncomp: int = 1,
) -> LinearMapNorm:
    """``L2 -> H1(O')`` norm over the strict interior at distance ``delta0``."""
    value = operator_norm(
        T,
        grid,
        source="L2",
        target="H1",
        ncomp_source=ncomp,
        ncomp_target=ncomp,
        subdomain_delta=delta0,
    )
    return LinearMapNorm(value, "L2", "H1", delta0)


# ---------------------------------------------------------------------------
# Solution bundles
# ---------------------------------------------------------------------------

@dataclass
class CorrectorBundle:
    """Snapshots of one evolved state and its first-order approximations."""

    eps: float
    t: float
    variant: str
    x: np.ndarray
    u_eps: np.ndarray
    u0: np.ndarray
    v_eps: np.ndarray
    corrector_term: np.ndarray
    p_eps: np.ndarray
    flux_approx: np.ndarray

    def csv_rows(self):
        """Rows of (x, re/im pairs for u_eps, u0, v_eps, p_eps, flux_approx)."""
        header = ["x"]
        for name in ("u_eps", "u0", "v_eps", "p_eps", "flux_approx"):
            header += [f"{name}_re", f"{name}_im"]
        rows = [header]
        for i, xi in enumerate(self.x):
            row = [f"{xi:.17g}"]
            for vec in (self.u_eps, self.u0, self.v_eps, self.p_eps, self.flux_approx):
                row += [f"{vec[i].real:.17g}", f"{vec[i].imag:.17g}"]
            rows.append(row)
        return rows


def evolve_bundle(
    cell: CellData,
    coeffs: CoefficientSet,
    grid: DomainGrid,
    eps: float,
    t: float,
    phi: np.ndarray,
    fact_eps,
    fact_eff,
    smoothed: bool = True,
) -> CorrectorBundle:
    """Evolve one initial state and assemble all first-order approximations."""
    u_eps = fact_eps.apply_semigroup(t, phi)
    u0 = fact_eff.apply_semigroup(t, phi)
    k_chain = corrector_chain(cell, coeffs, grid, eps, smoothed)
    k_term = k_chain @ u0
    v_eps = u0 + eps * k_term
    p = flux_true(coeffs, grid, eps, u_eps)
    q = flux_approx_chain(cell, coeffs, grid, eps, smoothed) @ u0
    return CorrectorBundle(
        eps=eps,
        t=t,
        variant="smoothed" if smoothed else "plain",
        x=grid.interior_nodes(),
        u_eps=u_eps,
        u0=u0,
        v_eps=v_eps,
        corrector_term=k_term,
        p_eps=p,
        flux_approx=q,
    )
