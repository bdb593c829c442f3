"""Operator data: the first-order symbol, periodic coefficients, and the
constructors for the scalar singular-potential families.

A coefficient is anything that can be evaluated at arbitrary points of the
cell; closures are sampled exactly, solved fields fall back to their
trigonometric interpolant.  The magnetic builder rewrites

    (D - A)^* g (D - A) + eps^-1 v + V

into principal + first-order + zero-order form with complex first-order
coefficients ``a_j = -(gA)_j + i xi_j``, ``xi = -grad Phi``, ``Phi`` the
periodic potential of ``v``.  The strongly singular builder factorizes the
cell operator through its positive periodic ground state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .errors import (
    DegenerateGroundState,
    NonPositiveGroundState,
    NonZeroMeanPotential,
    RankDeficientSymbol,
    UnsupportedDimension,
)
from .periodic_cell import (
    Lattice,
    PeriodicField,
    PeriodicGrid,
    field_from_callable,
    mean_value,
    poisson_periodic,
    spectral_derivative,
)


# ---------------------------------------------------------------------------
# First-order symbol
# ---------------------------------------------------------------------------

def _theta_samples(d: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        phi = np.linspace(0.0, 2.0 * np.pi, 720, endpoint=False)
        return np.stack([np.cos(phi), np.sin(phi)], axis=1)
    raise UnsupportedDimension("symbol validation supports d in {1, 2}")


@dataclass(frozen=True)
class SymbolB:
    """Constant matrices ``b_1..b_d`` of the first-order operator ``b(D)``."""

    matrices: tuple[np.ndarray, ...]

    def __post_init__(self):
        mats = tuple(np.atleast_2d(np.asarray(m, dtype=complex)) for m in self.matrices)
        object.__setattr__(self, "matrices", mats)
        shapes = {m.shape for m in mats}
        if len(shapes) != 1:
            raise ValueError("all symbol matrices must share one shape")
        m, n = mats[0].shape
        if m < n:
            raise ValueError(f"symbol needs m >= n, got {m} x {n}")

    @property
    def d(self) -> int:
        return len(self.matrices)

    @property
    def m(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def n(self) -> int:
        return self.matrices[0].shape[1]

    def at(self, theta: np.ndarray) -> np.ndarray:
        """``b(theta) = sum_j theta_j b_j`` for directions, shape (P, m, n)."""
        theta = np.atleast_2d(theta)
        return sum(theta[:, j, None, None] * bj for j, bj in enumerate(self.matrices))

    @property
    def alpha0(self) -> float:
        return validate_symbol(self)[0]

    @property
    def alpha1(self) -> float:
        return validate_symbol(self)[1]


def validate_symbol(b: SymbolB) -> tuple[float, float]:
    """Two-sided ellipticity bounds of ``b(theta)^* b(theta)`` on the sphere.

    Returns ``(alpha0, alpha1)``; raises if the minimum is numerically zero,
    i.e. the symbol loses maximal rank in some direction.
    """
    bt = b.at(_theta_samples(b.d))
    eigs = np.linalg.eigvalsh(np.einsum("pmn,pml->pnl", bt.conj(), bt))
    alpha0 = float(eigs.min())
    alpha1 = float(eigs.max())
    if alpha0 <= 1e-12:
        raise RankDeficientSymbol(f"min eigenvalue of b(theta)*b(theta) is {alpha0:.3e}")
    return alpha0, alpha1


def gradient_symbol(d: int) -> SymbolB:
    """The symbol of ``b(D) = D``: ``b_j = e_j`` (m = d, n = 1)."""
    cols = []
    for j in range(d):
        e = np.zeros((d, 1))
        e[j, 0] = 1.0
        cols.append(e)
    return SymbolB(tuple(cols))


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellCoefficient:
    """Gamma-periodic matrix-valued coefficient with pointwise evaluation."""

    eval_fn: Callable[[np.ndarray], np.ndarray]
    shape: tuple[int, int]
    name: str = ""

    def eval(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vals = np.asarray(self.eval_fn(pts), dtype=complex)
        if vals.ndim == 1:
            vals = vals.reshape(-1, 1, 1)
        if vals.shape != (pts.shape[0],) + self.shape:
            raise ValueError(f"coefficient {self.name or '?'} returned shape {vals.shape}")
        return vals

    def sample(self, grid: PeriodicGrid, **flags) -> PeriodicField:
        pts = grid.nodes().reshape(-1, grid.d)
        return PeriodicField(grid, self.eval(pts).reshape(grid.shape + self.shape), **flags)


def coeff_from_callable(fn, shape=(1, 1), name="") -> CellCoefficient:
    return CellCoefficient(fn, tuple(shape), name)


def coeff_from_scalar_fn(fn, name="") -> CellCoefficient:
    """Wrap a scalar closure ``fn(x (P, d)) -> (P,)``."""
    return CellCoefficient(lambda p: np.asarray(fn(p)).reshape(-1, 1, 1), (1, 1), name)


def coeff_constant(matrix, name="") -> CellCoefficient:
    mat = np.atleast_2d(np.asarray(matrix, dtype=complex))
    return CellCoefficient(
        lambda p, mat=mat: np.broadcast_to(mat, (p.shape[0],) + mat.shape).copy(),
        mat.shape,
        name,
    )


def coeff_from_field(f: PeriodicField, name="") -> CellCoefficient:
    return CellCoefficient(lambda p, f=f: f.eval(p), f.shape, name)


def _inv_sqrt_hermitian(mats: np.ndarray) -> np.ndarray:
    w, u = np.linalg.eigh(mats)
    if w.min() <= 0:
        raise ValueError("matrix not positive definite in inverse square root")
    return np.einsum("...ij,...j,...kj->...ik", u, 1.0 / np.sqrt(w), u.conj())


@dataclass
class CoefficientSet:
    """All data of the second-order operator family.

    ``lam`` is the nonnegative shift multiplying ``Q_0``; ``None`` means it
    still has to be calibrated against the positivity margin.  ``f`` is the
    pointwise Hermitian square root ``Q_0^{-1/2}`` (the gauge is fixed).
    """

    lattice: Lattice
    symbol: SymbolB
    g: CellCoefficient
    a: tuple[CellCoefficient, ...]
    Q: CellCoefficient
    Q0: CellCoefficient
    lam: float | None = None
    label: str = ""
    ground_state: PeriodicField | None = None

    def __post_init__(self):
        m, n = self.symbol.m, self.symbol.n
        if self.g.shape != (m, m):
            raise ValueError(f"g must be {m}x{m}")
        if len(self.a) != self.symbol.d:
            raise ValueError("need one a_j per dimension")
        for aj in self.a:
            if aj.shape != (n, n):
                raise ValueError(f"a_j must be {n}x{n}")
        if self.Q.shape != (n, n) or self.Q0.shape != (n, n):
            raise ValueError(f"Q and Q0 must be {n}x{n}")

    @property
    def d(self) -> int:
        return self.lattice.d

    @property
    def f(self) -> CellCoefficient:
        """Pointwise Hermitian square root ``Q_0^{-1/2}``."""
        q0 = self.Q0
        return CellCoefficient(
            lambda p: _inv_sqrt_hermitian(q0.eval(p)), q0.shape, name="f"
        )

    def with_lambda(self, lam: float) -> "CoefficientSet":
        return replace(self, lam=float(lam))

    def sup_norms(self, grid: PeriodicGrid) -> dict[str, float]:
        """Nodal sup-norms standing in for the L_inf norms of the data."""
        pts = grid.nodes().reshape(-1, grid.d)
        gv = self.g.eval(pts)
        q0 = self.Q0.eval(pts)
        return {
            "g": float(np.linalg.norm(gv, ord=2, axis=(1, 2)).max()),
            "g_inv": float(np.linalg.norm(np.linalg.inv(gv), ord=2, axis=(1, 2)).max()),
            "Q0": float(np.linalg.norm(q0, ord=2, axis=(1, 2)).max()),
            "Q0_inv": float(np.linalg.norm(np.linalg.inv(q0), ord=2, axis=(1, 2)).max()),
        }


def simple_coefficients(
    lattice: Lattice,
    symbol: SymbolB,
    g: CellCoefficient,
    a: Sequence[CellCoefficient] | None = None,
    Q: CellCoefficient | None = None,
    Q0: CellCoefficient | None = None,
    lam: float | None = None,
    label: str = "",
) -> CoefficientSet:
    n = symbol.n
    zero_n = coeff_constant(np.zeros((n, n)), "0")
    a = tuple(a) if a is not None else tuple(zero_n for _ in range(symbol.d))
    return CoefficientSet(
        lattice=lattice,
        symbol=symbol,
        g=g,
        a=a,
        Q=Q if Q is not None else zero_n,
        Q0=Q0 if Q0 is not None else coeff_constant(np.eye(n), "1"),
        lam=lam,
        label=label,
    )


# ---------------------------------------------------------------------------
# Scalar operator with an eps^-1 potential
# ---------------------------------------------------------------------------

def build_scalar_magnetic(
    lattice: Lattice,
    g: CellCoefficient,
    vector_potential: Sequence[CellCoefficient],
    singular_potential: CellCoefficient,
    regular_potential: CellCoefficient,
    weight: CellCoefficient | None = None,
    cell_nodes: int = 128,
    label: str = "magnetic",
) -> CoefficientSet:
    """Coefficients of ``(D - A)^* g (D - A) + eps^-1 v + V (+ lam Q0)``.

    Scalar case (n = 1, m = d, b(D) = D).  The zero-mean potential ``v`` is
    resolved through its periodic Poisson potential: ``a_j = -(gA)_j + i
    xi_j`` with ``xi = -grad Phi``, ``Delta Phi = v``, and ``Q = V +
    <gA, A>``.  The vector identity ``sum_j d_j xi_j = -v`` is verified on
    the sampling grid.
    """
    d = lattice.d
    symbol = gradient_symbol(d)
    grid = PeriodicGrid(lattice, (cell_nodes,) * d)

    v_field = singular_potential.sample(grid)
    scale = max(1.0, float(np.max(np.abs(v_field.values))))
    if abs(complex(mean_value(v_field)[0, 0])) > 1e-8 * scale:
        raise NonZeroMeanPotential("singular potential must have zero cell mean")

    phi = poisson_periodic(v_field)
    xi = [spectral_derivative(phi, j) for j in range(d)]
    for x in xi:
        x.values *= -1.0

    div_xi = sum(spectral_derivative(x, j).values for j, x in enumerate(xi))
    identity_dev = float(np.max(np.abs(div_xi + v_field.values)))
    if identity_dev > 1e-8 * scale:
        raise NonZeroMeanPotential(
            f"divergence identity residual {identity_dev:.3e} (grid too coarse for v)"
        )

    def eta_fn(pts, j):
        gv = g.eval(pts)
        av = np.concatenate([A.eval(pts) for A in vector_potential], axis=1)  # (P, d, 1)
        return np.einsum("pjk,pkl->pjl", gv, av)[:, j : j + 1, 0:1]

    a = []
    for j in range(d):
        xi_j = xi[j]

        def a_fn(pts, j=j, xi_j=xi_j):
            return -eta_fn(pts, j) + 1j * xi_j.eval(pts)

        a.append(CellCoefficient(a_fn, (1, 1), name=f"a_{j + 1}"))

    def q_fn(pts):
        gv = g.eval(pts)
        av = np.concatenate([A.eval(pts) for A in vector_potential], axis=1)
        quad = np.einsum("pjk,pkl,pjl->p", gv, av, av.conj()).real
        return regular_potential.eval(pts) + quad.reshape(-1, 1, 1)

    Q = CellCoefficient(q_fn, (1, 1), name="Q")
    return CoefficientSet(
        lattice=lattice,
        symbol=symbol,
        g=g,
        a=tuple(a),
        Q=Q,
        Q0=weight if weight is not None else coeff_constant(np.eye(1), "1"),
        label=label,
    )


def magnetic_form_residual(cset: CoefficientSet, vector_potential, singular_potential,
                           regular_potential, grid: PeriodicGrid, rng: np.random.Generator,
                           trials: int = 4) -> float:
    """Max relative deviation between the magnetic form and its rewritten form.

    Both quadratic forms are evaluated at ``eps = 1`` on random band-limited
    periodic test functions; they agree identically in the continuum.
    """
    from .periodic_cell import apply_D

    d = grid.d
    pts = grid.nodes().reshape(-1, grid.d)
    gv = cset.g.eval(pts).reshape(grid.shape + cset.g.shape)
    av = np.concatenate([A.eval(pts) for A in vector_potential], axis=1).reshape(grid.shape + (d, 1))
    vv = singular_potential.eval(pts).reshape(grid.shape + (1, 1))
    Vv = regular_potential.eval(pts).reshape(grid.shape + (1, 1))
    qv = cset.Q.eval(pts).reshape(grid.shape + (1, 1))
    a_v = [aj.eval(pts).reshape(grid.shape + (1, 1)) for aj in cset.a]

    kmax = min(grid.shape) // 8
    worst = 0.0
    for _ in range(trials):
        u = np.zeros(grid.shape, dtype=complex)
        hat = np.zeros(grid.shape, dtype=complex)
        for _ in range(6):
            idx = tuple(int(rng.integers(-kmax, kmax + 1)) % s for s in grid.shape)
            hat[idx] = rng.normal() + 1j * rng.normal()
        u = np.fft.ifftn(hat)
        uc = u[..., None, None]
        Du = np.stack([apply_D(uc, grid, j) for j in range(d)], axis=-3)[..., 0, 0]  # (*shape, d)
        Du_col = Du[..., None]
        shifted = Du_col - av * uc[..., 0, 0][..., None, None]
        form1 = (
            np.einsum("...jk,...kl,...jl->...", gv, shifted, shifted.conj())
            + (vv[..., 0, 0] + Vv[..., 0, 0]) * np.abs(u) ** 2
        ).mean().real
        first = sum(
            2.0 * (a_v[j][..., 0, 0] * Du[..., j] * u.conj()).real for j in range(d)
        )
        form2 = (
            np.einsum("...jk,...kl,...jl->...", gv, Du_col, Du_col.conj()).real
            + first
            + qv[..., 0, 0].real * np.abs(u) ** 2
        ).mean()
        scale = max(abs(form1), abs(form2), 1e-30)
        worst = max(worst, abs(form1 - form2) / scale)
    return worst


# ---------------------------------------------------------------------------
# Ground-state factorization for the eps^-2 potential
# ---------------------------------------------------------------------------

def _dense_spectral_derivative_matrix(grid: PeriodicGrid) -> np.ndarray:
    n = grid.shape[0]
    F = np.fft.fft(np.eye(n), axis=0)
    k = grid.wavenumbers()[0].copy()
    k[n // 2] = 0.0
    return np.fft.ifft(k[:, None] * F, axis=0)


def ground_state_factorize(
    g_check: CellCoefficient,
    v_check: CellCoefficient,
    lattice: Lattice,
    cell_nodes: int = 128,
) -> tuple[PeriodicField, float]:
    """Lowest periodic eigenpair of ``D^* g D + v`` on the cell.

    Returns ``(omega, shift)`` where ``shift`` is the bottom eigenvalue (the
    constant to subtract from the potential so the spectrum starts at zero)
    and ``omega > 0`` is normalized to ``mean(omega^2) = 1``.  Shift-invert
    Lanczos with a deterministic start vector; the gap to the second
    eigenvalue guards against degeneracy.
    """
    if lattice.d != 1:
        raise UnsupportedDimension("ground-state factorization is implemented for d = 1")
    grid = PeriodicGrid(lattice, (cell_nodes,))
    pts = grid.nodes().reshape(-1, 1)
    gv = g_check.eval(pts)[:, 0, 0].real
    vv = v_check.eval(pts)[:, 0, 0].real
    if np.min(gv) <= 0:
        raise ValueError("g must be positive for the ground-state problem")

    D = _dense_spectral_derivative_matrix(grid)
    H = D.conj().T @ (gv[:, None] * D) + np.diag(vv)
    H = 0.5 * (H + H.conj().T)

    sigma = float(vv.min()) - 1.0
    v0 = np.ones(grid.shape[0])
    vals, vecs = spla.eigsh(H, k=2, sigma=sigma, which="LM", v0=v0, tol=1e-12)
    order = np.argsort(vals)
    mu1, mu2 = float(vals[order[0]]), float(vals[order[1]])
    if mu2 - mu1 < 1e-8:
        raise DegenerateGroundState(f"spectral gap {mu2 - mu1:.3e} below 1e-8")

    omega = vecs[:, order[0]]
    phase = omega[np.argmax(np.abs(omega))]
    omega = (omega * np.conj(phase) / abs(phase)).real
    if omega.mean() < 0:
        omega = -omega
    if np.min(omega) <= 0:
        raise NonPositiveGroundState("ground state changes sign; refine the cell grid")
    omega = omega / np.sqrt((omega**2).mean())

    field = PeriodicField(grid, omega.reshape(grid.shape + (1, 1)).astype(complex))
    return field, mu1


def build_strong_singular(
    lattice: Lattice,
    g_check: CellCoefficient,
    v_check: CellCoefficient,
    vector_potential: Sequence[CellCoefficient] | None = None,
    v_hat: CellCoefficient | None = None,
    regular_potential: CellCoefficient | None = None,
    cell_nodes: int = 128,
    label: str = "strong_singular",
) -> tuple[CoefficientSet, PeriodicField]:
    """Coefficients of the eps^-2 family after ground-state factorization.

    The returned set carries ``g = omega^2 g_check`` and the weight
    ``Q_0 = omega^2``; approximations downstream hold for the sandwiched
    solution ``(omega^eps)^{-1} u_eps``, which is exactly the semigroup of
    this set.  ``v_hat`` is recentred so its omega^2-weighted mean vanishes.
    """
    d = lattice.d
    omega, shift = ground_state_factorize(g_check, v_check, lattice, cell_nodes)
    omega_coeff = coeff_from_field(omega, "omega")

    def omega2(pts):
        w = omega_coeff.eval(pts)
        return (w * w).real.astype(complex)

    def g_fn(pts):
        return omega2(pts) * g_check.eval(pts)

    g = CellCoefficient(g_fn, g_check.shape, name="omega^2*g")

    zero = coeff_constant(np.zeros((1, 1)), "0")
    v_hat = v_hat if v_hat is not None else zero
    regular_potential = regular_potential if regular_potential is not None else zero
    vector_potential = (
        list(vector_potential) if vector_potential is not None else [zero for _ in range(d)]
    )

    grid = PeriodicGrid(lattice, (cell_nodes,) * d)
    pts = grid.nodes().reshape(-1, d)
    w2 = omega2(pts)[:, 0, 0].real
    vh = v_hat.eval(pts)[:, 0, 0].real
    offset = float((vh * w2).mean() / w2.mean())

    def v_fn(pts):
        return (v_hat.eval(pts) - offset) * omega2(pts)

    def V_fn(pts):
        return regular_potential.eval(pts) * omega2(pts)

    cset = build_scalar_magnetic(
        lattice,
        g,
        vector_potential,
        CellCoefficient(v_fn, (1, 1), "vhat*omega^2"),
        CellCoefficient(V_fn, (1, 1), "Vcheck*omega^2"),
        weight=CellCoefficient(omega2, (1, 1), "omega^2"),
        cell_nodes=cell_nodes,
        label=label,
    )
    cset.ground_state = omega
    return cset, omega


# ---------------------------------------------------------------------------
# Named presets
# ---------------------------------------------------------------------------

def _sine_g_fn(L: float, base: float = 2.0):
    return lambda p: 1.0 / (base + np.sin(2.0 * np.pi * p[:, 0] / L))


def make_preset(name: str, params: dict | None = None, cell_nodes: int = 128) -> CoefficientSet:
    """Build one of the named coefficient presets.

    Known names: ``constant``, ``sine_g``, ``zero_corrector``,
    ``magnetic_sine``, ``strong_singular_sine``.
    """
    params = dict(params or {})
    L = float(params.pop("period", 1.0))
    lattice = Lattice((L,))
    one = SymbolB((np.array([[1.0]]),))

    if name == "constant":
        c = float(params.pop("g", 1.0))
        _check_params(name, params)
        return simple_coefficients(
            lattice, one, coeff_constant([[c]], "g"), lam=0.0, label=name
        )

    if name == "sine_g":
        base = float(params.pop("base", 2.0))
        _check_params(name, params)
        g = coeff_from_scalar_fn(_sine_g_fn(L, base), "g")
        return simple_coefficients(lattice, one, g, lam=0.0, label=name)

    if name == "zero_corrector":
        q_amp = float(params.pop("q_amp", 2.0))
        q0_amp = float(params.pop("q0_amp", 0.5))
        _check_params(name, params)
        if not (0.0 <= q0_amp < 1.0):
            raise ValueError("q0_amp must lie in [0, 1) to keep Q0 positive")
        Q = coeff_from_scalar_fn(lambda p: q_amp * np.cos(2.0 * np.pi * p[:, 0] / L), "Q")
        Q0 = coeff_from_scalar_fn(lambda p: 1.0 + q0_amp * np.sin(2.0 * np.pi * p[:, 0] / L), "Q0")
        return simple_coefficients(
            lattice, one, coeff_constant([[1.0]], "g"), Q=Q, Q0=Q0, label=name
        )

    if name == "magnetic_sine":
        base = float(params.pop("base", 2.0))
        a_amp = float(params.pop("a_amp", 0.6))
        v_amp = float(params.pop("v_amp", 1.0))
        V_amp = float(params.pop("V_amp", 0.5))
        _check_params(name, params)
        g = coeff_from_scalar_fn(_sine_g_fn(L, base), "g")
        A = [coeff_from_scalar_fn(lambda p: a_amp * np.cos(2.0 * np.pi * p[:, 0] / L), "A")]
        v = coeff_from_scalar_fn(lambda p: v_amp * np.sin(2.0 * np.pi * p[:, 0] / L), "v")
        V = coeff_from_scalar_fn(lambda p: V_amp * np.cos(2.0 * np.pi * p[:, 0] / L), "V")
        return build_scalar_magnetic(lattice, g, A, v, V, cell_nodes=cell_nodes, label=name)

    if name == "strong_singular_sine":
        v_amp = float(params.pop("v_check_amp", 0.5))
        vh_amp = float(params.pop("v_hat_amp", 0.5))
        _check_params(name, params)
        g_check = coeff_constant([[1.0]], "g_check")
        v_check = coeff_from_scalar_fn(lambda p: v_amp * np.cos(2.0 * np.pi * p[:, 0] / L), "v_check")
        v_hat = coeff_from_scalar_fn(lambda p: vh_amp * np.sin(2.0 * np.pi * p[:, 0] / L), "v_hat")
        cset, _ = build_strong_singular(
            lattice, g_check, v_check, v_hat=v_hat, cell_nodes=cell_nodes, label=name
        )
        return cset

    raise ValueError(f"unknown preset {name!r}")


def _check_params(name: str, leftovers: dict):
    if leftovers:
        raise ValueError(f"preset {name!r} got unknown parameters {sorted(leftovers)}")


PRESET_NAMES = (
    "constant",
    "sine_g",
    "zero_corrector",
    "magnetic_sine",
    "strong_singular_sine",
)
