"""Time-discrete solutions of the non-local continuity equation.

A path stores densities at knots ``t_0 < ... < t_K`` and flux atoms on the
intervals between them. The discrete equation is the mass balance

    (rho_{k+1}(eta) - rho_k(eta)) pi(eta) = dt_k * (inflow_k(eta) - outflow_k(eta))

with ``inflow_k(eta) = sum_x V_k(eta - delta_x, x)`` and
``outflow_k(eta) = sum_x V_k(eta, x)``. This is the weak form
``d/dt mu_t(G) = nu_t(DG)`` tested against indicator functions. Inside one
interval the density is linear in time, so a path with zero residual is an
exact solution on the whole of ``[0, T]``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import __version__
from .calculus import difference, entropy, fisher, flux_divergence, lagrangian
from .config_space import Density, LatticeError, ReferenceMeasure, intensity_measure
from .semigroup import edge_apply, expm_kernel

SOLVER_CE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CEPath:
    ref: ReferenceMeasure
    times: np.ndarray  # (K + 1,)
    rho: np.ndarray  # (K + 1, S) densities at the knots
    flux: np.ndarray  # (K, E) atoms on the intervals
    ce_tol: float = SOLVER_CE_TOL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        rho = np.asarray(self.rho, dtype=float)
        flux = np.asarray(self.flux, dtype=float)
        K = times.size - 1
        if K < 1 or np.any(np.diff(times) <= 0):
            raise ValueError("path needs at least one interval and increasing times")
        S, E = self.ref.lattice.n_states, self.ref.lattice.n_edges
        if rho.shape != (K + 1, S) or flux.shape != (K, E):
            raise LatticeError(f"path arrays {rho.shape}, {flux.shape} do not match K={K}, S={S}, E={E}")
        for name, arr in (("times", times), ("rho", rho), ("flux", flux)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return self.times.size - 1

    @property
    def T(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def midpoint_rho(self) -> np.ndarray:
        return 0.5 * (self.rho[:-1] + self.rho[1:])

    def density(self, k: int) -> Density:
        return Density(self.ref, self.rho[k])

    def midpoint(self, k: int) -> Density:
        return Density(self.ref, self.midpoint_rho[k])

    def mass_error(self) -> float:
        return float(np.max(np.abs(self.rho @ self.ref.weights - 1.0)))

    def reversed(self) -> "CEPath":
        """The same curve traversed backwards (fluxes change sign)."""
        t = self.times[-1] + self.times[0] - self.times[::-1]
        return replace(self, times=t, rho=self.rho[::-1], flux=-self.flux[::-1])


def constant_path(mu: Density, T: float = 1.0, K: int = 1, flux=None) -> CEPath:
    flux = np.zeros((K, mu.lattice.n_edges)) if flux is None else np.asarray(flux, dtype=float)
    return CEPath(mu.ref, np.linspace(0.0, T, K + 1), np.tile(mu.rho, (K + 1, 1)), flux)


def mass_balance_defect(path: CEPath) -> np.ndarray:
    """``(rho_{k+1} - rho_k) pi - dt_k div V_k`` for every interval and state."""
    ref = path.ref
    div = np.array([flux_divergence(ref, v) for v in path.flux])
    return np.diff(path.rho, axis=0) * ref.weights - path.dt[:, None] * div


def ce_residual(path: CEPath) -> float:
    """Largest violation of the discrete mass balance."""
    return float(np.max(np.abs(mass_balance_defect(path))))


def ce_accumulated_defect(path: CEPath) -> float:
    """Largest violation of the mass balance integrated from ``t_0`` to each knot."""
    return float(np.max(np.abs(np.cumsum(mass_balance_defect(path), axis=0))))


def ou_path(mu0: Density, T: float, K: int) -> CEPath:
    """Ornstein-Uhlenbeck flow ``rho_t = P_t rho_0`` with flux ``-D P_t rho_0`` at interval midpoints."""
    if T <= 0 or K < 1:
        raise ValueError("need T > 0 and K >= 1")
    ref = mu0.ref
    times = np.linspace(0.0, T, K + 1)
    sites = ref.sites
    rho = np.array([expm_kernel(sites, t).apply(mu0.rho) for t in times])
    mids = 0.5 * (times[:-1] + times[1:])
    flux = np.array([-difference(ref, expm_kernel(sites, t).apply(mu0.rho)) for t in mids]) * ref.edge_weights
    return CEPath(ref, times, rho, flux, ce_tol=1e-3 * T / K, meta={"kind": "ou", "T": T})


def push_semigroup(path: CEPath, eps: float) -> CEPath:
    """Transport a solution along the semigroup: densities ``P_eps rho``, fluxes ``e^{-eps} P_eps w``.

    The flux densities are moved with the edgewise kernel that intertwines
    exactly with ``D`` on the truncated lattice, so the pushed path keeps the
    mass-balance residual of the input up to round-off.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if eps == 0:
        return path
    ref = path.ref
    P = expm_kernel(ref.sites, eps)
    rho = np.array([P.apply(r) for r in path.rho])
    w = path.flux / ref.edge_weights
    w = np.exp(-eps) * np.array([edge_apply(ref, eps, wk) for wk in w])
    return replace(path, rho=rho, flux=w * ref.edge_weights)


def density_at(path: CEPath, t) -> np.ndarray:
    """Piecewise-linear interpolation of the knot densities (exact inside each interval)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty((t.size, path.rho.shape[1]))
    for j in range(path.rho.shape[1]):
        out[:, j] = np.interp(t, path.times, path.rho[:, j])
    return out


def _flux_integral(path: CEPath, a: float, b: float) -> np.ndarray:
    """``int_a^b V(t) dt`` for the piecewise-constant flux of ``path``."""
    lo = np.clip(path.times[:-1], a, b)
    hi = np.clip(path.times[1:], a, b)
    return (hi - lo) @ path.flux


def reparametrize(path: CEPath, lam: Callable | tuple, T_new: float, K_new: int | None = None) -> CEPath:
    """Compose the path with a strictly increasing time change ``lam: [0, T_new] -> [t_0, t_K]``.

    ``lam`` is a callable or a knot table ``(s, lam(s))`` interpolated linearly.
    The new fluxes are the exact averages of ``lam' * V(lam(s))`` over the new
    intervals, so an exact solution stays exact after the change of time. A
    new interval covering parts of several old ones inherits the sum of the
    covered fractions of their defects; ``ce_tol`` is scaled by the largest
    such sum.
    """
    K_new = path.K if K_new is None else int(K_new)
    s = np.linspace(0.0, T_new, K_new + 1)
    if callable(lam):
        ts = np.asarray([lam(v) for v in s], dtype=float)
    else:
        knots, vals = (np.asarray(a, dtype=float) for a in lam)
        ts = np.interp(s, knots, vals)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("time change must be strictly increasing")
    if not (np.isclose(ts[0], path.times[0], atol=1e-12) and np.isclose(ts[-1], path.times[-1], rtol=1e-12)):
        raise ValueError("time change must map [0, T_new] onto the path's time interval")
    ts[0], ts[-1] = path.times[0], path.times[-1]
    rho = density_at(path, ts)
    ds = np.diff(s)
    flux = np.array([_flux_integral(path, a, b) for a, b in zip(ts[:-1], ts[1:])]) / ds[:, None]
    # each new interval inherits the covered fractions of the old interval defects
    lo = np.clip(path.times[None, :-1], ts[:-1, None], ts[1:, None])
    hi = np.clip(path.times[None, 1:], ts[:-1, None], ts[1:, None])
    cover = float(np.max(((hi - lo) / path.dt[None, :]).sum(axis=1)))
    return CEPath(path.ref, s, rho, flux, ce_tol=path.ce_tol * max(cover, 1.0), meta=dict(path.meta))


def concatenate(first: CEPath, second: CEPath) -> CEPath:
    """Run ``first`` then ``second``; the end of one must be the start of the other."""
    if first.ref is not second.ref and first.ref.lattice.hash != second.ref.lattice.hash:
        raise LatticeError("paths live on different lattices")
    if np.max(np.abs(first.rho[-1] - second.rho[0])) > 1e-10:
        raise ValueError("paths do not join")
    times = np.concatenate([first.times, first.times[-1] + second.times[1:] - second.times[0]])
    rho = np.vstack([first.rho, second.rho[1:]])
    flux = np.vstack([first.flux, second.flux])
    return CEPath(first.ref, times, rho, flux, ce_tol=max(first.ce_tol, second.ce_tol))


@dataclass(frozen=True)
class IdentityReport:
    name: str
    residual: float
    bound: float
    detail: dict = field(default_factory=dict)
    skipped: str | None = None

    @property
    def holds(self) -> bool:
        return self.skipped is None and self.residual <= self.bound


def intensity_evolution_check(path: CEPath, scale: float = 1.0 + 1e-9) -> IdentityReport:
    """``I_{rho_k}(x) - I_{rho_0}(x)`` against the time-integrated flux mass through site ``x``."""
    lat = path.ref.lattice
    intens = np.array([intensity_measure(path.density(k)) for k in range(path.K + 1)])
    per_site = np.array([np.bincount(lat.edge_site, v, lat.d) for v in path.flux])
    integrated = np.vstack([np.zeros(lat.d), np.cumsum(path.dt[:, None] * per_site, axis=0)])
    resid = np.abs(intens - intens[0] - integrated)
    # the identity is exact up to the occupation-weighted mass-balance defect
    occ_max = lat.states.max(axis=1)
    bound = 1e-12 + scale * float(np.abs(mass_balance_defect(path)).sum(axis=0) @ occ_max)
    return IdentityReport("intensity_evolution", float(resid.max()), bound,
                          {"intensity": intens, "integrated_flux": integrated})


def entropy_production_check(path: CEPath, bound: float | None = None) -> IdentityReport:
    """Entropy change along the path against ``sum_k dt_k sum_e D log(rho_bar_k) V_k``."""
    mids = path.midpoint_rho
    if np.any(mids <= 0):
        return IdentityReport("entropy_production", np.inf, 0.0, skipped="midpoint density vanishes somewhere")
    ref = path.ref
    lhs = entropy(path.density(-1)) - entropy(path.density(0))
    rhs = float(sum(dt * (difference(ref, np.log(m)) @ v) for dt, m, v in zip(path.dt, mids, path.flux)))
    if bound is None:
        bound = float(np.max(path.dt)) + path.K * path.ce_tol
    return IdentityReport("entropy_production", abs(lhs - rhs), bound, {"lhs": lhs, "rhs": rhs})


def path_speed(path: CEPath) -> np.ndarray:
    """``L(rho_bar_k, V_k)^{1/2}`` per interval: an upper bound on the metric speed."""
    return np.sqrt([lagrangian(path.midpoint(k), path.flux[k]) for k in range(path.K)])


def path_length(path: CEPath) -> float:
    return float(path.dt @ path_speed(path))


def fisher_along(path: CEPath) -> np.ndarray:
    return np.array([fisher(path.midpoint(k)) for k in range(path.K)])


# ---------------------------------------------------------------- serialization


def path_to_csv(path: CEPath) -> tuple[str, str]:
    """Return ``(densities_csv, fluxes_csv)`` with a metadata header line each."""
    head = f"# lattice {path.ref.lattice.hash} K {path.K} T {path.T!r} ce_tol {path.ce_tol!r} version {__version__}\n"
    dens = io.StringIO()
    dens.write(head)
    w = csv.writer(dens, lineterminator="\n")
    w.writerow(["k", "t", "state", "rho"])
    for k, (t, row) in enumerate(zip(path.times, path.rho)):
        for i, v in enumerate(row):
            w.writerow([k, repr(float(t)), i, repr(float(v))])
    flx = io.StringIO()
    flx.write(head)
    w = csv.writer(flx, lineterminator="\n")
    w.writerow(["k", "edge", "V"])
    for k, row in enumerate(path.flux):
        for e, v in enumerate(row):
            w.writerow([k, e, repr(float(v))])
    return dens.getvalue(), flx.getvalue()


def path_from_csv(ref: ReferenceMeasure, dens_text: str, flux_text: str) -> CEPath:
    header = dens_text.splitlines()[0].split()
    if header[2] != ref.lattice.hash:
        raise LatticeError(f"path belongs to lattice {header[2]}")
    K = int(header[4])
    ce_tol = float(header[8])
    times = np.zeros(K + 1)
    rho = np.zeros((K + 1, ref.lattice.n_states))
    for row in csv.DictReader(dens_text.splitlines()[1:]):
        k = int(row["k"])
        times[k] = float(row["t"])
        rho[k, int(row["state"])] = float(row["rho"])
    flux = np.zeros((K, ref.lattice.n_edges))
    for row in csv.DictReader(flux_text.splitlines()[1:]):
        flux[int(row["k"]), int(row["edge"])] = float(row["V"])
    return CEPath(ref, times, rho, flux, ce_tol=ce_tol)
