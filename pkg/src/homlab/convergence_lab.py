"""Epsilon sweeps, operator-norm tables, log-log rate fitting, and the
theoretical rate envelopes.

A sweep builds, for every admissible ``eps``, the oscillating and effective
operators on the grid ``h = eps / n_per``, materializes the exponentials and
corrector/flux maps at the requested times, measures the requested operator
norms, and fits each table's log-log slope.  Gates encode the expected
exponents; constant-coefficient presets whose differences sit at the noise
floor pass degenerately.
"""

from __future__ import annotations

import concurrent.futures
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cell_problems import CellData, assemble_cell_data
from .coefficients import CoefficientSet, make_preset
from .correctors import corrector_chain, flux_approx_chain, flux_true_chain
from .domain_ops import (
    DomainGrid,
    assemble_B0,
    assemble_Beps,
    calibrate_lambda,
    operator_norm,
)
from .errors import ConfigError, NonPositiveValue, ReportIncomplete
from .evolution import SpectralFactorization, factorize

_NOISE_FLOOR = 1e-9

PARABOLIC_NORMS = ("L2", "H1_corrector", "H1_nocorr", "flux", "H1_interior")


# ---------------------------------------------------------------------------
# Rate envelopes
# ---------------------------------------------------------------------------

def theta_rate(eps: float, r: float) -> float:
    """Source-term rate for L_r-in-time data: eps^(2-2/r) / eps*sqrt(log) / eps."""
    if r <= 1:
        raise ValueError("theta rate needs r > 1")
    if r < 2:
        return eps ** (2.0 - 2.0 / r)
    if r == 2:
        return eps * np.sqrt(abs(np.log(eps)) + 1.0)
    return eps


def omega_rate(eps: float, r: float) -> float:
    """Energy-norm source rate: eps^(1-2/r) / eps^(1/2) log^(3/4) / eps^(1/2)."""
    if r <= 2:
        raise ValueError("omega rate needs r > 2")
    if r < 4:
        return eps ** (1.0 - 2.0 / r)
    if r == 4:
        return np.sqrt(eps) * (abs(np.log(eps)) + 1.0) ** 0.75
    return np.sqrt(eps)


def c_phi(phi: float) -> float:
    """Sector constant: ``|sin phi|^-1`` near the positive axis, else 1."""
    phi = float(np.mod(phi, 2.0 * np.pi))
    if 0.0 < phi < 0.5 * np.pi or 1.5 * np.pi < phi < 2.0 * np.pi:
        return 1.0 / abs(np.sin(phi))
    return 1.0


def rho_flat(zeta: complex, c_flat: float) -> float:
    """Inverse-square distance factor to the ray ``[c_flat, inf)``."""
    w = zeta - c_flat
    psi = float(np.angle(w)) % (2.0 * np.pi)
    cw = c_phi(psi)
    if abs(w) < 1.0:
        return cw**2 / abs(w) ** 2
    return cw**2


def fit_rate(points) -> tuple[float, float, float]:
    """Least-squares slope/intercept on (ln eps, ln value) plus RMS residual."""
    pts = [(float(e), float(v)) for e, v in points]
    if len(pts) < 3:
        raise ValueError("need at least 3 points to fit a rate")
    if any(v <= 0 for _, v in pts):
        raise NonPositiveValue("rate fit needs strictly positive values")
    x = np.log([e for e, _ in pts])
    y = np.log([v for _, v in pts])
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    rms = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return slope, intercept, rms


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    preset: str
    eps_list: tuple[float, ...]
    t_list: tuple[float, ...] = (0.25,)
    params: dict = field(default_factory=dict)
    n_per: int = 16
    cell_nodes: int = 128
    length: float = 1.0
    norms: tuple[str, ...] = ("L2", "H1_corrector", "flux")
    delta0: float | None = None
    variant: str = "smoothed"
    envelope: bool = False
    contour_check: bool = False
    zeta_list: tuple[complex, ...] = ()
    r: float = float("inf")
    seed: int = 0
    jobs: int = 1
    max_eps: float = 0.25

    def validate(self) -> None:
        if self.n_per < 8:
            raise ConfigError(f"n_per must be >= 8, got {self.n_per}")
        if self.n_per % 2:
            raise ConfigError("n_per must be even (smoothing window ends on nodes)")
        if len(self.eps_list) < 4:
            raise ConfigError("sweeps need at least 4 eps values for slope fits")
        eps = self.eps_list
        if any(e2 >= e1 for e1, e2 in zip(eps, eps[1:])):
            raise ConfigError("eps list must be strictly decreasing")
        for e in eps:
            if e > self.max_eps + 1e-12:
                raise ConfigError(f"eps {e} exceeds max_eps {self.max_eps}")
            inv = 1.0 / e
            if abs(inv - round(inv)) > 1e-9:
                raise ConfigError(f"1/eps must be an integer, got eps={e}")
            DomainGrid.for_epsilon(self.length, e, self.n_per)
        if self.variant not in ("smoothed", "plain"):
            raise ConfigError(f"unknown corrector variant {self.variant!r}")
        for nrm in self.norms:
            if nrm not in PARABOLIC_NORMS:
                raise ConfigError(f"unknown norm tag {nrm!r}")
        if "H1_interior" in self.norms and self.delta0 is None:
            raise ConfigError("H1_interior norms need delta0")
        if self.cell_nodes % (2 * self.n_per):
            raise ConfigError("cell_nodes must be a multiple of 2*n_per for aligned sampling")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _tkey(t: float) -> str:
    return f"{t:.6g}"


@dataclass
class ConvergenceReport:
    kind: str
    preset: str
    config: dict
    lam: float
    c_flat: float
    metadata: dict
    tables: dict          # tag -> key -> list of [eps, value]
    slopes: dict          # tag -> key -> {slope, intercept, rms} | {"degenerate": true}
    envelope: dict        # label -> {"values": {eps: rho}, "ratios": [...]}
    gates: dict           # name -> bool
    gate_notes: dict
    timings: dict

    def passed(self) -> bool:
        return all(self.gates.values())

    def to_dict(self, with_timings: bool = True) -> dict:
        out = {
            "kind": self.kind,
            "preset": self.preset,
            "config": self.config,
            "lambda": self.lam,
            "c_flat": self.c_flat,
            "metadata": self.metadata,
            "tables": self.tables,
            "slopes": self.slopes,
            "envelope": self.envelope,
            "gates": self.gates,
            "gate_notes": self.gate_notes,
        }
        if with_timings:
            out["timings"] = self.timings
        return out

    def canonical_bytes(self) -> bytes:
        """Deterministic serialization (timings excluded)."""
        return json.dumps(self.to_dict(with_timings=False), sort_keys=True,
                          separators=(",", ":")).encode()

    def table_csv_rows(self):
        rows = [["norm", "key", "eps", "value"]]
        for tag in sorted(self.tables):
            for key in sorted(self.tables[tag]):
                for e, v in self.tables[tag][key]:
                    rows.append([tag, key, f"{e:.17g}", f"{v:.17g}"])
        return rows


def _fit_or_degenerate(points) -> dict:
    values = [v for _, v in points]
    if max(values) <= _NOISE_FLOOR:
        return {"degenerate": True, "max_value": max(values)}
    slope, intercept, rms = fit_rate(points)
    return {"slope": slope, "intercept": intercept, "rms": rms}


# ---------------------------------------------------------------------------
# Shared per-preset and per-eps construction
# ---------------------------------------------------------------------------

@dataclass
class PresetWorkspace:
    coeffs: CoefficientSet
    cell: CellData


@dataclass
class EpsCell:
    eps: float
    grid: DomainGrid
    fact_eps: SpectralFactorization
    fact_eff: SpectralFactorization


def prepare_preset(cfg: SweepConfig) -> PresetWorkspace:
    """Build coefficients, calibrate the shift if needed, solve the cell."""
    coeffs = make_preset(cfg.preset, cfg.params, cell_nodes=cfg.cell_nodes)
    if coeffs.lam is None:
        lam = calibrate_lambda(coeffs, cfg.length, cfg.eps_list, cfg.n_per)
        coeffs = coeffs.with_lambda(lam)
    cell = assemble_cell_data(coeffs, domain_diameter=cfg.length, cell_nodes=cfg.cell_nodes)
    return PresetWorkspace(coeffs, cell)


def build_eps_cell(ws: PresetWorkspace, cfg: SweepConfig, eps: float,
                   n_per: int | None = None) -> EpsCell:
    n_per = cfg.n_per if n_per is None else n_per
    grid = DomainGrid.for_epsilon(cfg.length, eps, n_per)
    B_eps = assemble_Beps(ws.coeffs, grid, eps)
    f_blocks = ws.coeffs.f.eval(grid.interior_nodes().reshape(-1, 1) / eps)
    fact_eps = factorize(B_eps, f_blocks, descriptor=f"B_eps({eps})")
    B0 = assemble_B0(ws.cell, ws.coeffs, grid)
    fact_eff = factorize(B0, ws.cell.f0, descriptor="B0")
    return EpsCell(eps, grid, fact_eps, fact_eff)


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Parabolic sweep
# ---------------------------------------------------------------------------

def _envelope_times(eps: float) -> list[tuple[str, float]]:
    return [("eps^2", eps * eps), ("0.05", 0.05), ("0.25", 0.25), ("1", 1.0)]


def _measure_parabolic_cell(ws: PresetWorkspace, cfg: SweepConfig, cell: EpsCell) -> dict:
    """All requested norms for one eps, keyed (tag, t-key)."""
    eps, grid = cell.eps, cell.grid
    n = ws.coeffs.symbol.n
    m = ws.coeffs.symbol.m
    smoothed = cfg.variant == "smoothed"
    out: dict[tuple[str, str], float] = {}

    need_corr = "H1_corrector" in cfg.norms or "H1_interior" in cfg.norms
    k_chain = corrector_chain(ws.cell, ws.coeffs, grid, eps, smoothed) if need_corr else None
    if "flux" in cfg.norms:
        ft_chain = flux_true_chain(ws.coeffs, grid, eps)
        fa_chain = flux_approx_chain(ws.cell, ws.coeffs, grid, eps, smoothed)

    t_values = sorted({*cfg.t_list, *(t for _, t in _envelope_times(eps))}) if cfg.envelope else list(cfg.t_list)
    for t in t_values:
        E_eps = cell.fact_eps.semigroup(t)
        E_eff = cell.fact_eff.semigroup(t)
        diff = E_eps - E_eff
        if "L2" in cfg.norms or cfg.envelope:
            out[("L2", _tkey(t))] = operator_norm(diff, grid, target="L2",
                                                  ncomp_source=n, ncomp_target=n)
        if t in cfg.t_list:
            if "H1_nocorr" in cfg.norms:
                out[("H1_nocorr", _tkey(t))] = operator_norm(
                    diff, grid, target="H1", ncomp_source=n, ncomp_target=n)
            if need_corr and t > 0:
                with_corr = diff - eps * (k_chain @ E_eff)
                if "H1_corrector" in cfg.norms:
                    out[("H1_corrector", _tkey(t))] = operator_norm(
                        with_corr, grid, target="H1", ncomp_source=n, ncomp_target=n)
                if "H1_interior" in cfg.norms:
                    out[("H1_interior", _tkey(t))] = operator_norm(
                        with_corr, grid, target="H1", ncomp_source=n, ncomp_target=n,
                        subdomain_delta=cfg.delta0)
            if "flux" in cfg.norms and t > 0:
                fdiff = ft_chain @ E_eps - fa_chain @ E_eff
                out[("flux", _tkey(t))] = operator_norm(
                    fdiff, grid, target="L2", ncomp_source=n, ncomp_target=m)
    return out


def run_parabolic_sweep(cfg: SweepConfig, ws: PresetWorkspace | None = None) -> ConvergenceReport:
    """Operator-norm tables and fitted rates for the parabolic problem."""
    cfg.validate()
    t0 = time.perf_counter()
    ws = ws or prepare_preset(cfg)
    c_flat = ws.cell.c_flat
    timings = {"prepare": time.perf_counter() - t0}

    def one(eps: float):
        tic = time.perf_counter()
        cell = build_eps_cell(ws, cfg, eps)
        vals = _measure_parabolic_cell(ws, cfg, cell)
        return vals, cell.grid.n_interior, time.perf_counter() - tic

    try:
        results = _pmap(one, list(cfg.eps_list), cfg.jobs)
    except Exception as exc:
        raise ReportIncomplete(f"sweep cell failed: {exc}") from exc

    tables: dict = {}
    grid_sizes = {}
    for eps, (vals, n_int, dt) in zip(cfg.eps_list, results):
        grid_sizes[f"{eps:.12g}"] = n_int
        timings[f"eps={eps:.12g}"] = dt
        for (tag, tk), v in vals.items():
            tables.setdefault(tag, {}).setdefault(tk, []).append([eps, v])

    slopes = {
        tag: {tk: _fit_or_degenerate(pts) for tk, pts in sub.items() if len(pts) >= 3}
        for tag, sub in tables.items()
    }

    envelope = {}
    if cfg.envelope:
        for label, _ in _envelope_times(1.0):
            values = {}
            for eps in cfg.eps_list:
                t = dict(_envelope_times(eps))[label]
                pts = dict((e, v) for e, v in tables["L2"].get(_tkey(t), []))
                if eps in pts:
                    norm = pts[eps]
                    rho = norm * np.sqrt(t + eps**2) * np.exp(0.45 * c_flat * t) / eps
                    values[f"{eps:.12g}"] = float(rho)
            vals_in_order = [values[f"{eps:.12g}"] for eps in cfg.eps_list if f"{eps:.12g}" in values]
            ratios = [
                vals_in_order[i + 1] / vals_in_order[i] if vals_in_order[i] > _NOISE_FLOOR else 0.0
                for i in range(len(vals_in_order) - 1)
            ]
            envelope[label] = {"values": values, "ratios": ratios}

    gates, notes = _parabolic_gates(cfg, tables, slopes, envelope)
    meta = {
        "grid_sizes": grid_sizes,
        "cell_grid": list(ws.cell.grid_shape),
        "g0": _cmat(ws.cell.g0),
        "alpha0": ws.cell.alpha0,
        "alpha1": ws.cell.alpha1,
        "variant": cfg.variant,
        "seed": cfg.seed,
    }
    return ConvergenceReport(
        kind="parabolic",
        preset=cfg.preset,
        config=_config_dict(cfg),
        lam=float(ws.coeffs.lam),
        c_flat=c_flat,
        metadata=meta,
        tables=tables,
        slopes=slopes,
        envelope=envelope,
        gates=gates,
        gate_notes=notes,
        timings=timings,
    )


def _cmat(mat: np.ndarray) -> dict:
    arr = np.asarray(mat)
    return {"re": arr.real.tolist(), "im": arr.imag.tolist()}


def _config_dict(cfg: SweepConfig) -> dict:
    return {
        "preset": cfg.preset,
        "params": cfg.params,
        "eps_list": list(cfg.eps_list),
        "t_list": list(cfg.t_list),
        "n_per": cfg.n_per,
        "cell_nodes": cfg.cell_nodes,
        "length": cfg.length,
        "norms": list(cfg.norms),
        "delta0": cfg.delta0,
        "variant": cfg.variant,
        "envelope": cfg.envelope,
        "zeta_list": [[z.real, z.imag] for z in cfg.zeta_list],
        "r": "inf" if np.isinf(cfg.r) else cfg.r,
        "seed": cfg.seed,
        "max_eps": cfg.max_eps,
    }


_SLOPE_GATES = {
    "L2": ("two_sided", 0.85, 1.15),
    "H1_corrector": ("lower", 0.45, None),
    "flux": ("lower", 0.45, None),
    "H1_interior": ("lower", 0.85, None),
    "H1_nocorr": ("lower", 0.85, None),
}


def _slope_gate(tag: str, entry: dict) -> tuple[bool, str]:
    if entry.get("degenerate"):
        return True, f"degenerate: values at noise floor ({entry['max_value']:.2e})"
    kind, lo, hi = _SLOPE_GATES[tag]
    s = entry["slope"]
    if kind == "two_sided":
        ok = lo <= s <= hi
        return ok, f"slope {s:.4f} vs [{lo}, {hi}]"
    return s >= lo, f"slope {s:.4f} vs >= {lo}"


def _parabolic_gates(cfg: SweepConfig, tables, slopes, envelope):
    gates, notes = {}, {}
    t_ref = _tkey(cfg.t_list[0])
    for tag in cfg.norms:
        entry = slopes.get(tag, {}).get(t_ref)
        if entry is None:
            continue
        ok, note = _slope_gate(tag, entry)
        gates[f"{tag}_slope"] = ok
        notes[f"{tag}_slope"] = note
    if cfg.envelope:
        worst = 0.0
        for label, data in envelope.items():
            if data["ratios"]:
                worst = max(worst, max(data["ratios"]))
        gates["envelope_uniform"] = worst <= 1.5
        notes["envelope_uniform"] = f"max successive rho ratio {worst:.4f} vs <= 1.5"
    return gates, notes


# ---------------------------------------------------------------------------
# Elliptic sweep
# ---------------------------------------------------------------------------

def _zkey(z: complex) -> str:
    return f"{z.real:.6g}{z.imag:+.6g}j"


def run_elliptic_sweep(cfg: SweepConfig, ws: PresetWorkspace | None = None) -> ConvergenceReport:
    """Generalized-resolvent differences at the requested spectral points."""
    cfg.validate()
    if not cfg.zeta_list:
        raise ConfigError("elliptic sweep needs a nonempty zeta list")
    for z in cfg.zeta_list:
        if abs(z) < 1.0 - 1e-12 or (abs(z.imag) < 1e-14 and z.real >= 0):
            raise ConfigError(f"zeta {z} must satisfy |zeta| >= 1, off the positive axis")
    t0 = time.perf_counter()
    ws = ws or prepare_preset(cfg)
    timings = {"prepare": time.perf_counter() - t0}
    n = ws.coeffs.symbol.n
    with_corr = "H1_corrector" in cfg.norms

    def one(eps: float):
        tic = time.perf_counter()
        grid = DomainGrid.for_epsilon(cfg.length, eps, cfg.n_per)
        B_eps = assemble_Beps(ws.coeffs, grid, eps)
        B0 = assemble_B0(ws.cell, ws.coeffs, grid)
        W_eps = B_eps.weight_matrix().toarray()
        W0 = B0.weight_matrix().toarray()
        A_eps = B_eps.matrix.toarray()
        A0 = B0.matrix.toarray()
        k_chain = corrector_chain(ws.cell, ws.coeffs, grid, eps,
                                  cfg.variant == "smoothed") if with_corr else None
        vals = {}
        for z in cfg.zeta_list:
            R_eps = np.linalg.inv(A_eps - z * W_eps)
            R0 = np.linalg.inv(A0 - z * W0)
            diff = R_eps - R0
            vals[("L2", _zkey(z))] = operator_norm(diff, grid, target="L2",
                                                   ncomp_source=n, ncomp_target=n)
            if with_corr:
                vals[("H1_corrector", _zkey(z))] = operator_norm(
                    diff - eps * (k_chain @ R0), grid, target="H1",
                    ncomp_source=n, ncomp_target=n)
        return vals, grid.n_interior, time.perf_counter() - tic

    try:
        results = _pmap(one, list(cfg.eps_list), cfg.jobs)
    except Exception as exc:
        raise ReportIncomplete(f"elliptic cell failed: {exc}") from exc

    tables: dict = {}
    grid_sizes = {}
    for eps, (vals, n_int, dt) in zip(cfg.eps_list, results):
        grid_sizes[f"{eps:.12g}"] = n_int
        timings[f"eps={eps:.12g}"] = dt
        for (tag, zk), v in vals.items():
            tables.setdefault(tag, {}).setdefault(zk, []).append([eps, v])

    slopes = {
        tag: {zk: _fit_or_degenerate(pts) for zk, pts in sub.items()}
        for tag, sub in tables.items()
    }

    gates, notes = {}, {}
    for zk, entry in slopes.get("L2", {}).items():
        if entry.get("degenerate"):
            gates[f"L2_slope@{zk}"] = True
            notes[f"L2_slope@{zk}"] = "degenerate: values at noise floor"
        else:
            s = entry["slope"]
            gates[f"L2_slope@{zk}"] = 0.85 <= s <= 1.15
            notes[f"L2_slope@{zk}"] = f"slope {s:.4f} vs [0.85, 1.15]"

    # |zeta|^(-1/2) scaling between same-argument pairs at the finest eps.
    eps_fine = cfg.eps_list[-1]
    scaling = {}
    zs = list(cfg.zeta_list)
    for z1, z2 in zip(zs, zs[1:]):
        if abs(np.angle(z1) - np.angle(z2)) < 1e-12 and abs(z2) > abs(z1):
            pts1 = dict((e, v) for e, v in tables["L2"][_zkey(z1)])
            pts2 = dict((e, v) for e, v in tables["L2"][_zkey(z2)])
            if eps_fine in pts1 and pts2.get(eps_fine, 0.0) > 0:
                factor = pts1[eps_fine] / pts2[eps_fine]
                target = np.sqrt(abs(z2) / abs(z1))
                key = f"zeta_scaling {_zkey(z1)}->{_zkey(z2)}"
                scaling[key] = factor
                gates[key] = 0.8 * target <= factor <= 1.3 * target
                notes[key] = f"decay factor {factor:.3f} vs target {target:.3f} in [{0.8*target:.2f}, {1.3*target:.2f}]"

    meta = {
        "grid_sizes": grid_sizes,
        "cell_grid": list(ws.cell.grid_shape),
        "g0": _cmat(ws.cell.g0),
        "zeta_scaling": scaling,
        "seed": cfg.seed,
    }
    return ConvergenceReport(
        kind="elliptic",
        preset=cfg.preset,
        config=_config_dict(cfg),
        lam=float(ws.coeffs.lam),
        c_flat=ws.cell.c_flat,
        metadata=meta,
        tables=tables,
        slopes=slopes,
        envelope={},
        gates=gates,
        gate_notes=notes,
        timings=timings,
    )


# ---------------------------------------------------------------------------
# Nonhomogeneous (Duhamel) sweep
# ---------------------------------------------------------------------------

def default_source(cfg: SweepConfig):
    """Smooth separable source, constant in time."""
    def F(x: np.ndarray, t: float) -> np.ndarray:
        return np.sin(np.pi * x / cfg.length).astype(complex)

    return F


def run_duhamel_sweep(cfg: SweepConfig, source=None,
                      ws: PresetWorkspace | None = None,
                      n_time_samples: int = 33) -> ConvergenceReport:
    """Solution differences for the zero-initial-state source problem.

    Measures ``sup_t |u_eps(t) - u_0(t)|_{L2}`` over the configured time grid
    and fits the eps-rate normalized by the theoretical envelope for the
    configured integrability index ``r``.
    """
    from .evolution import duhamel_solve

    cfg.validate()
    t0 = time.perf_counter()
    ws = ws or prepare_preset(cfg)
    timings = {"prepare": time.perf_counter() - t0}
    source = source or default_source(cfg)
    t_max = max(cfg.t_list)
    sample_times = np.linspace(0.0, t_max, n_time_samples)

    def one(eps: float):
        tic = time.perf_counter()
        cell = build_eps_cell(ws, cfg, eps)
        x = cell.grid.interior_nodes()
        F_samples = np.stack([source(x, s) for s in sample_times])
        phi = np.zeros(cell.grid.n_interior * ws.coeffs.symbol.n, dtype=complex)
        u_eps = duhamel_solve(cell.fact_eps, phi, F_samples, sample_times, cfg.t_list)
        u_eff = duhamel_solve(cell.fact_eff, phi, F_samples, sample_times, cfg.t_list)
        h = cell.grid.h
        err = max(
            float(np.sqrt(h) * np.linalg.norm(a - b)) for a, b in zip(u_eps, u_eff)
        )
        return err, cell.grid.n_interior, time.perf_counter() - tic

    try:
        results = _pmap(one, list(cfg.eps_list), cfg.jobs)
    except Exception as exc:
        raise ReportIncomplete(f"duhamel cell failed: {exc}") from exc

    table = []
    normalized = []
    grid_sizes = {}
    for eps, (err, n_int, dt) in zip(cfg.eps_list, results):
        grid_sizes[f"{eps:.12g}"] = n_int
        timings[f"eps={eps:.12g}"] = dt
        table.append([eps, err])
        scale = np.sqrt(abs(np.log(eps)) + 1.0) if cfg.r == 2 else 1.0
        normalized.append([eps, float(err / scale)])

    tables = {"sup_L2": {"all_t": table}, "sup_L2_normalized": {"all_t": normalized}}
    slopes = {
        "sup_L2": {"all_t": _fit_or_degenerate(table)},
        "sup_L2_normalized": {"all_t": _fit_or_degenerate(normalized)},
    }

    gates, notes = {}, {}
    entry = slopes["sup_L2_normalized"]["all_t"]
    if entry.get("degenerate"):
        gates["duhamel_slope"] = True
        notes["duhamel_slope"] = "degenerate: values at noise floor"
    else:
        s = entry["slope"]
        gates["duhamel_slope"] = 0.85 <= s <= 1.15
        notes["duhamel_slope"] = f"normalized slope {s:.4f} vs [0.85, 1.15] (r={cfg.r})"

    meta = {
        "grid_sizes": grid_sizes,
        "cell_grid": list(ws.cell.grid_shape),
        "g0": _cmat(ws.cell.g0),
        "r": "inf" if np.isinf(cfg.r) else cfg.r,
        "theta": {f"{e:.12g}": float(theta_rate(e, cfg.r)) for e in cfg.eps_list},
        "seed": cfg.seed,
    }
    return ConvergenceReport(
        kind="duhamel",
        preset=cfg.preset,
        config=_config_dict(cfg),
        lam=float(ws.coeffs.lam),
        c_flat=ws.cell.c_flat,
        metadata=meta,
        tables=tables,
        slopes=slopes,
        envelope={},
        gates=gates,
        gate_notes=notes,
        timings=timings,
    )


# ---------------------------------------------------------------------------
# Discretization guard
# ---------------------------------------------------------------------------

def discretization_check(cfg: SweepConfig, ws: PresetWorkspace | None = None) -> dict:
    """Re-run the finest-eps cell with doubled n_per; report relative changes.

    Homogenization rates are trustworthy only if the FD error is subdominant:
    every measured norm should move by at most ~10 percent.
    """
    cfg.validate()
    ws = ws or prepare_preset(cfg)
    eps = cfg.eps_list[-1]
    base = _measure_parabolic_cell(ws, cfg, build_eps_cell(ws, cfg, eps))
    fine = _measure_parabolic_cell(ws, cfg, build_eps_cell(ws, cfg, eps, n_per=2 * cfg.n_per))
    out = {}
    for key in base:
        b, f = base[key], fine[key]
        rel = abs(f - b) / max(abs(b), 1e-300) if max(b, f) > _NOISE_FLOOR else 0.0
        out["|".join(key)] = {"coarse": b, "fine": f, "rel_change": rel}
    return out
