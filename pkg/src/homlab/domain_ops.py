"""Dirichlet discretization of the bounded interval, extension/smoothing
operators, and operator norms between weighted discrete spaces.

The domain machinery is one-dimensional: the box is ``O = (0, l)`` with a
uniform step ``h`` tied to the oscillation period by ``eps / h = n_per``.
Unknowns live on interior nodes (Dirichlet rows eliminated), stored
node-major / component-minor.  The second-order part is the conservative
scheme ``D_h^T G(midpoints) D_h / h^2`` with ``G = b_1^* g b_1``; first-order
terms use the Hermitian centered-difference pair ``A C + C A^*``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cell_problems import CellData
from .coefficients import CellCoefficient, CoefficientSet
from .errors import (
    CalibrationDiverged,
    EmptySubdomain,
    IndivisibleEpsilon,
    NonConvergedSVD,
    UnsupportedDimension,
    WindowExceedsMargin,
)

_DIV_TOL = 1e-9


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainGrid:
    """Uniform Dirichlet grid on ``O = (0, length)`` with step ``h``."""

    length: float
    n_cells: int  # number of cells; nodes 0..n_cells, interior 1..n_cells-1

    def __post_init__(self):
        if self.length <= 0 or self.n_cells < 4:
            raise ValueError("need positive length and at least 4 cells")

    @property
    def h(self) -> float:
        return self.length / self.n_cells

    @property
    def n_interior(self) -> int:
        return self.n_cells - 1

    @property
    def diameter(self) -> float:
        return self.length

    def interior_nodes(self) -> np.ndarray:
        return np.arange(1, self.n_cells) * self.h

    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.h

    @classmethod
    def for_epsilon(cls, length: float, eps: float, n_per: int) -> "DomainGrid":
        """Grid with ``h = eps / n_per``; both commensurability rules checked."""
        if n_per < 8:
            raise IndivisibleEpsilon(f"n_per must be >= 8, got {n_per}")
        h = eps / n_per
        cells = length / h
        if abs(cells - round(cells)) > 1e-9:
            raise IndivisibleEpsilon(
                f"step h = eps/n_per = {h} does not divide the box length {length}"
            )
        return cls(length, int(round(cells)))


@dataclass(frozen=True)
class ExtendedGrid:
    """Domain grid enlarged by ``margin`` nodes beyond each face."""

    base: DomainGrid
    margin: int

    @property
    def h(self) -> float:
        return self.base.h

    @property
    def n_nodes(self) -> int:
        return self.base.n_cells + 1 + 2 * self.margin

    def nodes(self) -> np.ndarray:
        return (np.arange(self.n_nodes) - self.margin) * self.h

    def interior_index(self) -> np.ndarray:
        """Positions of the interior domain nodes inside the extended vector."""
        return self.margin + np.arange(1, self.base.n_cells)


@dataclass
class GridFunction:
    """Complex nodal values with ``ncomp`` components per node."""

    grid: DomainGrid | ExtendedGrid
    values: np.ndarray  # (n_nodes, ncomp)

    @property
    def ncomp(self) -> int:
        return self.values.shape[1]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


# ---------------------------------------------------------------------------
# Coefficient sampling along the domain
# ---------------------------------------------------------------------------

def sample_scaled(coeff: CellCoefficient, points: np.ndarray, eps: float) -> np.ndarray:
    """Nodal samples of ``coeff(x / eps)`` at domain points, shape (P, k, l)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 1)
    return coeff.eval(pts / eps)


def block_diag_matrix(blocks: np.ndarray) -> sp.csr_matrix:
    """Sparse block-diagonal matrix from stacked ``(P, k, l)`` blocks."""
    P, k, l = blocks.shape
    if k == 1 and l == 1:
        return sp.diags(blocks[:, 0, 0]).tocsr()
    return sp.block_diag(list(blocks), format="csr")


# ---------------------------------------------------------------------------
# Difference operators (sparse)
# ---------------------------------------------------------------------------

def forward_difference(grid: DomainGrid) -> sp.csr_matrix:
    """Scaled differences interior -> midpoints (Dirichlet zeros included).

    Row ``i + 1/2`` carries ``(u_{i+1} - u_i) / h``.
    """
    n = grid.n_interior
    rows, cols, vals = [], [], []
    for mid in range(grid.n_cells):
        if mid + 1 <= n:  # +u_{mid+1}
            rows.append(mid)
            cols.append(mid)
            vals.append(1.0)
        if mid >= 1:  # -u_{mid}
            rows.append(mid)
            cols.append(mid - 1)
            vals.append(-1.0)
    return sp.csr_matrix(
        (np.array(vals) / grid.h, (rows, cols)), shape=(grid.n_cells, n)
    )


def centered_D(n_nodes: int, h: float) -> sp.csr_matrix:
    """Hermitian matrix of ``D = -i d/dx`` by centered differences.

    Off-grid neighbours are treated as zeros, which is exact for Dirichlet
    functions on the domain grid and irrelevant on extended grids whose
    boundary rows are discarded downstream.
    """
    off = np.ones(n_nodes - 1)
    S = sp.diags([off, -off], [1, -1])
    return (-1j / (2.0 * h)) * S.tocsr()


def _kron_blocks(scalar_mat: sp.spmatrix, block: np.ndarray) -> sp.csr_matrix:
    return sp.kron(scalar_mat, block, format="csr")


# ---------------------------------------------------------------------------
# Operator assembly
# ---------------------------------------------------------------------------

@dataclass
class DiscreteOperator:
    """Hermitian matrix on the Dirichlet grid plus its weight data."""

    matrix: sp.csr_matrix
    grid: DomainGrid
    ncomp: int
    descriptor: str
    q0_blocks: np.ndarray  # (n_interior, n, n) nodal weight samples

    def weight_matrix(self) -> sp.csr_matrix:
        return block_diag_matrix(self.q0_blocks)

    def hermiticity_defect(self) -> float:
        diff = (self.matrix - self.matrix.getH()).tocoo()
        num = np.max(np.abs(diff.data)) if diff.nnz else 0.0
        den = np.max(np.abs(self.matrix.tocoo().data))
        return float(num / den)

    def smallest_eigenvalue(self) -> float:
        return _smallest_eig(self.matrix)


def _smallest_eig(M: sp.csr_matrix, weight: sp.csr_matrix | None = None) -> float:
    """Smallest (generalized) eigenvalue of a Hermitian sparse matrix.

    Shift-invert Lanczos anchored strictly below the spectrum via a
    Gershgorin bound, so the eigenvalue closest to the shift is the minimum.
    """
    Mc = M.tocsr()
    diag = Mc.diagonal().real
    absrow = np.abs(Mc).sum(axis=1).A1 - np.abs(diag)
    lower = float((diag - absrow).min()) - 1.0
    if weight is not None:
        wd = weight.diagonal().real
        lower = min(lower / max(wd.min(), 1e-12), lower / max(wd.max(), 1e-12)) - 1.0
    try:
        vals = spla.eigsh(
            Mc,
            k=1,
            M=weight,
            sigma=lower,
            which="LM",
            v0=np.ones(Mc.shape[0]),
            tol=1e-10,
            return_eigenvectors=False,
        )
    except spla.ArpackError as exc:  # pragma: no cover
        raise NonConvergedSVD(f"smallest-eigenvalue iteration failed: {exc}") from exc
    return float(vals[0])


def _principal_part(
    coeffs: CoefficientSet, grid: DomainGrid, eps: float
) -> sp.csr_matrix:
    b1 = coeffs.symbol.matrices[0]
    g_mid = sample_scaled(coeffs.g, grid.midpoints(), eps)
    G = np.einsum("nm,pml,lk->pnk", b1.conj().T, g_mid, b1)
    D = _kron_blocks(forward_difference(grid), np.eye(coeffs.symbol.n))
    Gmat = block_diag_matrix(G)
    return (D.getH() @ Gmat @ D).tocsr()


def _first_order_part(
    coeffs: CoefficientSet, grid: DomainGrid, eps: float
) -> sp.csr_matrix:
    n = coeffs.symbol.n
    a_nodes = sample_scaled(coeffs.a[0], grid.interior_nodes(), eps)
    if np.max(np.abs(a_nodes)) == 0.0:
        sz = grid.n_interior * n
        return sp.csr_matrix((sz, sz), dtype=complex)
    A = block_diag_matrix(a_nodes)
    C = _kron_blocks(centered_D(grid.n_interior, grid.h), np.eye(n))
    T = (A @ C).tocsr()
    return T + T.getH()


def assemble_Beps(
    coeffs: CoefficientSet,
    grid: DomainGrid,
    eps: float,
    lam: float | None = None,
) -> DiscreteOperator:
    """Conservative FD matrix of the oscillating operator at scale ``eps``.

    ``g`` is sampled at flux midpoints, multiplication coefficients at nodes,
    first-order terms in the symmetric split; the result is Hermitian by
    construction.
    """
    if coeffs.d != 1:
        raise UnsupportedDimension("domain assembly is implemented for d = 1")
    ratio = eps / grid.h
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 8:
        raise IndivisibleEpsilon(f"eps/h = {ratio} must be an integer >= 8")
    lam = coeffs.lam if lam is None else lam
    if lam is None:
        raise ValueError("lambda not set; calibrate first or pass lam explicitly")

    nodes = grid.interior_nodes()
    B = _principal_part(coeffs, grid, eps) + _first_order_part(coeffs, grid, eps)
    q_nodes = sample_scaled(coeffs.Q, nodes, eps)
    q0_nodes = sample_scaled(coeffs.Q0, nodes, eps)
    B = B + block_diag_matrix(q_nodes + lam * q0_nodes)
    return DiscreteOperator(B.tocsr(), grid, coeffs.symbol.n, f"B_eps(eps={eps})", q0_nodes)


def assemble_B0(
    cell: CellData,
    coeffs: CoefficientSet,
    grid: DomainGrid,
    lam: float | None = None,
) -> DiscreteOperator:
    """Constant-coefficient matrix of the effective operator."""
    if coeffs.d != 1:
        raise UnsupportedDimension("domain assembly is implemented for d = 1")
    lam = cell.lam if lam is None else lam
    lam = coeffs.lam if lam is None else lam
    if lam is None:
        raise ValueError("lambda not set; calibrate first or pass lam explicitly")

    b1 = coeffs.symbol.matrices[0]
    n = coeffs.symbol.n
    n_int = grid.n_interior

    G0 = b1.conj().T @ cell.g0 @ b1
    D = _kron_blocks(forward_difference(grid), np.eye(n))
    Gmat = _kron_blocks(sp.eye(grid.n_cells), G0)
    B = (D.getH() @ Gmat @ D).tocsr()

    C = centered_D(n_int, grid.h)
    first = b1.conj().T @ cell.V + cell.V.conj().T @ b1  # from -b(D)*V - V*b(D)
    drift = cell.a_bar[0]
    B = B + _kron_blocks(C, drift - first)

    zero_order = -cell.W + cell.Q_bar + lam * cell.Q0_bar
    B = B + _kron_blocks(sp.eye(n_int), zero_order)

    q0_nodes = np.broadcast_to(cell.Q0_bar, (n_int, n, n)).copy()
    return DiscreteOperator(B.tocsr(), grid, n, "B0", q0_nodes)


def calibrate_lambda(
    coeffs: CoefficientSet,
    length: float,
    eps_list: Sequence[float],
    n_per: int,
    resolution: float = 1e-3,
) -> float:
    """Smallest shift making the form dominate a quarter of its principal part.

    Bisection on ``lam`` such that ``B(lam) - A/4`` is positive semidefinite
    for every ``eps`` in the list, then a 1.1 safety factor.
    """
    if not eps_list:
        raise ValueError("eps_list must be nonempty")
    grids = [DomainGrid.for_epsilon(length, e, n_per) for e in eps_list]

    parts = []
    for eps, grid in zip(eps_list, grids):
        P = _principal_part(coeffs, grid, eps)
        M = 0.75 * P + _first_order_part(coeffs, grid, eps)
        M = M + block_diag_matrix(sample_scaled(coeffs.Q, grid.interior_nodes(), eps))
        W = block_diag_matrix(sample_scaled(coeffs.Q0, grid.interior_nodes(), eps))
        parts.append((M.tocsr(), W.tocsr()))

    def feasible(lam: float) -> bool:
        return all(_smallest_eig(M + lam * W) >= 0.0 for M, W in parts)

    if feasible(0.0):
        return 0.0

    cell_grid_shape = 4 * n_per
    from .periodic_cell import PeriodicGrid

    probe = PeriodicGrid(coeffs.lattice, (max(cell_grid_shape, 8),))
    sups = coeffs.sup_norms(probe)
    pts = probe.nodes().reshape(-1, 1)
    q_sup = float(np.linalg.norm(coeffs.Q.eval(pts), ord=2, axis=(1, 2)).max())
    scale = max(1.0, q_sup * sups["Q0_inv"])

    hi = resolution * scale
    while not feasible(hi):
        hi *= 2.0
        if hi > 1e6 * scale:
            raise CalibrationDiverged(f"lambda search exceeded 1e6 * scale = {1e6 * scale:.3e}")
    lo = 0.0
    while hi - lo > 1e-3 * resolution * scale:
        midpt = 0.5 * (lo + hi)
        if feasible(midpt):
            hi = midpt
        else:
            lo = midpt
    return 1.1 * hi


# ---------------------------------------------------------------------------
# Extension and smoothing
# ---------------------------------------------------------------------------

def _cutoff(dist: np.ndarray, plateau: float, support: float) -> np.ndarray:
    """Smooth cutoff: 1 up to ``plateau``, 0 beyond ``support``."""
    def f(t):
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = np.exp(-1.0 / t[pos])
        return out

    t = (support - dist) / (support - plateau)
    t = np.clip(t, 0.0, 1.0)
    return f(t) / (f(t) + f(1.0 - t))


def extension_matrix(grid: DomainGrid, margin: int | None = None) -> tuple[sp.csr_matrix, ExtendedGrid]:
    """Second-order reflection across each face followed by a smooth cutoff.

    Reflection across the face node: ``u(x_b -+ s) = 3 u(x_b) - 3 u(x_b +- s)
    + u(x_b +- 2s)`` (exact for quadratics, and ``u(x_b) = 0`` here).  The
    cutoff equals 1 within ``l/4`` of the box and vanishes past ``l/2``, so
    restriction after extension is the identity.
    """
    N = grid.n_cells
    if margin is None:
        margin = N // 2
    if margin > N // 2:
        raise WindowExceedsMargin(f"margin {margin} exceeds reflectable width {N // 2}")
    ext = ExtendedGrid(grid, margin)
    n_int = grid.n_interior
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    chi = _cutoff(
        np.maximum(np.maximum(-ext.nodes(), ext.nodes() - grid.length), 0.0),
        0.25 * grid.length,
        0.5 * grid.length,
    )

    for r in range(ext.n_nodes):
        pos = r - margin  # node index relative to x = 0, in [ -margin, N + margin ]
        if 1 <= pos <= N - 1:
            add(r, pos - 1, chi[r])
        elif pos <= 0:
            k = -pos
            if k == 0:
                continue  # boundary node, value 0
            # u(-k h) = -3 u(k h) + u(2 k h)
            if 1 <= k <= N - 1:
                add(r, k - 1, -3.0 * chi[r])
            if 1 <= 2 * k <= N - 1:
                add(r, 2 * k - 1, chi[r])
        else:
            k = pos - N
            if k == 0:
                continue
            if 1 <= N - k <= N - 1:
                add(r, N - k - 1, -3.0 * chi[r])
            if 1 <= N - 2 * k <= N - 1:
                add(r, N - 2 * k - 1, chi[r])

    P = sp.csr_matrix((vals, (rows, cols)), shape=(ext.n_nodes, n_int))
    return P, ext


def extension_PO(u: GridFunction, margin: int | None = None) -> GridFunction:
    """Apply the universal extension to a Dirichlet grid function."""
    if not isinstance(u.grid, DomainGrid):
        raise ValueError("extension expects a function on the base domain grid")
    P, ext = extension_matrix(u.grid, margin)
    return GridFunction(ext, P @ u.values)


def restriction_indices(ext: ExtendedGrid) -> np.ndarray:
    return ext.interior_index()


def steklov_matrix(ext: ExtendedGrid, eps: float) -> tuple[sp.csr_matrix, ExtendedGrid]:
    """Sliding cell average over a centred window of width ``eps * L``.

    Trapezoid weights with half-weighted endpoints; the output lives on the
    extended grid shrunk by half a window so every row is a full average.
    """
    h = ext.h
    k = eps / h
    if abs(k - round(k)) > 1e-9:
        raise IndivisibleEpsilon(f"eps/h = {k} must be an integer")
    k = int(round(k))
    if k % 2:
        raise IndivisibleEpsilon("eps/h must be even so the window ends on nodes")
    half = k // 2
    if half > ext.margin:
        raise WindowExceedsMargin(
            f"window half-width {half} nodes exceeds extension margin {ext.margin}"
        )
    out = ExtendedGrid(ext.base, ext.margin - half)
    w = np.full(k + 1, 1.0 / k)
    w[0] *= 0.5
    w[-1] *= 0.5
    rows, cols, vals = [], [], []
    for r in range(out.n_nodes):
        center = r + half  # index in the input grid
        for j in range(-half, half + 1):
            rows.append(r)
            cols.append(center + j)
            vals.append(w[j + half])
    S = sp.csr_matrix((vals, (rows, cols)), shape=(out.n_nodes, ext.n_nodes))
    return S, out


def steklov_smooth(u: GridFunction, eps: float) -> GridFunction:
    if not isinstance(u.grid, ExtendedGrid):
        raise ValueError("smoothing expects a function on an extended grid")
    S, out = steklov_matrix(u.grid, eps)
    return GridFunction(out, S @ u.values)


# ---------------------------------------------------------------------------
# Weighted operator norms
# ---------------------------------------------------------------------------

def _h1_weight(grid: DomainGrid, ncomp: int) -> sp.csr_matrix:
    D = _kron_blocks(forward_difference(grid), np.eye(ncomp))
    n = grid.n_interior * ncomp
    return (grid.h * (sp.eye(n) + D.getH() @ D)).tocsr()


def _h2_weight(grid: DomainGrid, ncomp: int) -> sp.csr_matrix:
    D = _kron_blocks(forward_difference(grid), np.eye(ncomp))
    L = D.getH() @ D
    n = grid.n_interior * ncomp
    return (grid.h * (sp.eye(n) + L + L.getH() @ L)).tocsr()


def subdomain_mask(grid: DomainGrid, delta0: float) -> np.ndarray:
    """Indices of interior nodes strictly inside ``(delta0, l - delta0)``."""
    x = grid.interior_nodes()
    mask = np.nonzero((x > delta0 + 1e-12) & (x < grid.length - delta0 - 1e-12))[0]
    if mask.size == 0:
        raise EmptySubdomain(f"no nodes strictly inside ({delta0}, {grid.length - delta0})")
    return mask


def _h1_weight_subdomain(grid: DomainGrid, mask: np.ndarray, ncomp: int) -> sp.csr_matrix:
    """H1 weight on a contiguous interior node set (no boundary jumps)."""
    ns = mask.size
    if ns == 1:
        return (grid.h * sp.eye(ncomp)).tocsr()
    off = np.ones(ns - 1)
    D1 = sp.diags([-off, off], [0, 1], shape=(ns - 1, ns)) / grid.h
    D = _kron_blocks(D1, np.eye(ncomp))
    n = ns * ncomp
    return (grid.h * (sp.eye(n) + D.getH() @ D)).tocsr()


@dataclass(frozen=True)
class LinearMapNorm:
    """Measured operator norm between tagged discrete spaces."""

    value: float
    source: str
    target: str
    subdomain_delta: float | None = None


def operator_norm(
    T: np.ndarray,
    grid: DomainGrid,
    source: str = "L2",
    target: str = "L2",
    ncomp_source: int = 1,
    ncomp_target: int = 1,
    subdomain_delta: float | None = None,
    tol: float = 1e-6,
) -> float:
    """Largest singular value of ``W_target^{1/2} T W_source^{-1/2}``.

    ``T`` maps source-grid vectors to target-grid vectors (node-major).  The
    L2 weight is ``h I``; the H1 weight adds the squared forward differences
    with Dirichlet boundary jumps.  On a strict subdomain the rows outside
    are dropped and the difference quotient never crosses its edge.  Computed
    by restarted Lanczos iteration on ``T^* W T`` with a deterministic start.
    """
    if source != "L2":
        raise ValueError("only L2 source norms are supported")
    T = np.asarray(T)
    h = grid.h

    if subdomain_delta is not None:
        mask = subdomain_mask(grid, subdomain_delta)
        comp_mask = (mask[:, None] * ncomp_target + np.arange(ncomp_target)).reshape(-1)
        T_eff = T[comp_mask, :]
        if target == "H1":
            W = _h1_weight_subdomain(grid, mask, ncomp_target)
        elif target == "L2":
            W = (h * sp.eye(T_eff.shape[0])).tocsr()
        else:
            raise ValueError(f"unsupported target norm {target!r} on a subdomain")
    else:
        T_eff = T
        if target == "L2":
            W = (h * sp.eye(T.shape[0])).tocsr()
        elif target == "H1":
            W = _h1_weight(grid, ncomp_target)
        elif target == "H2":
            W = _h2_weight(grid, ncomp_target)
        else:
            raise ValueError(f"unknown target norm {target!r}")

    def apply(v):
        w = T_eff @ v
        return (T_eff.conj().T @ (W @ w)) / h

    n = T_eff.shape[1]
    if n <= 2:
        M = (T_eff.conj().T @ (W @ T_eff)) / h
        return float(np.sqrt(max(np.linalg.eigvalsh(M).max(), 0.0)))
    op = spla.LinearOperator((n, n), matvec=apply, dtype=complex)
    try:
        vals = spla.eigsh(
            op, k=1, which="LA", v0=np.ones(n), tol=tol, return_eigenvectors=False
        )
    except (spla.ArpackError, spla.ArpackNoConvergence) as exc:
        raise NonConvergedSVD(f"operator norm Lanczos failed: {exc}") from exc
    return float(np.sqrt(max(float(vals[0]), 0.0)))


def export_matrix(path, M: sp.spmatrix | np.ndarray, drop_tol: float = 0.0):
    """Write a matrix in coordinate text form: header `rows cols nnz`,
    then one `i j re im` line per stored entry."""
    coo = sp.coo_matrix(M)
    keep = np.abs(coo.data) > drop_tol
    data = coo.data[keep]
    rows = coo.row[keep]
    cols = coo.col[keep]
    with open(path, "w", newline="\n") as fh:
        fh.write(f"{coo.shape[0]} {coo.shape[1]} {data.size}\n")
        for i, j, v in zip(rows, cols, data):
            fh.write(f"{i} {j} {v.real:.17g} {v.imag:.17g}\n")
