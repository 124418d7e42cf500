"""Discrete difference calculus on a truncated Poisson lattice.

Observables are arrays indexed by state, edge fields and flux measures are
arrays indexed by edge (see :mod:`poisson_ot.config_space` for the edge
order). A flux measure is stored by its atoms ``nu({eta} x {x})``; its density
against ``pi (x) m`` is ``w = atoms / (pi(eta) m_x)``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import __version__
from .config_space import Density, ReferenceMeasure, intensity_measure

_TAYLOR_RADIUS = 1e-4


def difference(ref: ReferenceMeasure, F) -> np.ndarray:
    """``D_x F(eta) = F(eta + delta_x) - F(eta)`` on every edge."""
    lat = ref.lattice
    F = np.asarray(F, dtype=float)
    return F[lat.edge_tgt] - F[lat.edge_src]


def skorokhod_div(ref: ReferenceMeasure, u) -> np.ndarray:
    """Adjoint of :func:`difference` with respect to ``pi`` and ``pi (x) m``.

    ``div u(eta) = sum_x eta_x u(eta - delta_x, x) - sum_x m_x u(eta, x)``
    where ``u`` vanishes on missing edges (``eta_x = N_x``).
    """
    lat = ref.lattice
    u = np.asarray(u, dtype=float)
    occ = lat.states[lat.edge_tgt, lat.edge_site]
    m = np.asarray(lat.sites.m)[lat.edge_site]
    n = lat.n_states
    return np.bincount(lat.edge_tgt, occ * u, n) - np.bincount(lat.edge_src, m * u, n)


def generator_apply(ref: ReferenceMeasure, F) -> np.ndarray:
    """Censored Ornstein-Uhlenbeck generator ``L F = -div(D F)``."""
    return -skorokhod_div(ref, difference(ref, F))


def flux_divergence(ref: ReferenceMeasure, atoms) -> np.ndarray:
    """Net inflow per state: ``sum_x V(eta - delta_x, x) - sum_x V(eta, x)``."""
    lat = ref.lattice
    n = lat.n_states
    atoms = np.asarray(atoms, dtype=float)
    return np.bincount(lat.edge_tgt, atoms, n) - np.bincount(lat.edge_src, atoms, n)


def _xlogx(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


def entropy(mu: Density) -> float:
    """Relative entropy ``sum rho log rho pi`` with ``0 log 0 = 0``."""
    return max(float(_xlogx(mu.rho) @ mu.ref.weights), 0.0)


def fisher_terms(a, b) -> np.ndarray:
    """``(b - a)(log b - log a)`` with ``0`` at ``a = b`` and ``inf`` if exactly one is zero."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.zeros(np.broadcast(a, b).shape)
    a, b = np.broadcast_arrays(a, b)
    both = (a > 0) & (b > 0)
    out[both] = (b[both] - a[both]) * (np.log(b[both]) - np.log(a[both]))
    out[(a > 0) ^ (b > 0)] = np.inf
    return out


def fisher(mu: Density) -> float:
    """Fisher information ``sum D rho D log rho d(pi (x) m)``."""
    lat = mu.lattice
    terms = fisher_terms(mu.rho[lat.edge_src], mu.rho[lat.edge_tgt])
    if np.any(np.isinf(terms)):
        return np.inf
    return float(terms @ mu.ref.edge_weights)


# ---------------------------------------------------------------- logarithmic mean


def _phi(x):
    """``(x - 1) / log x`` on ``x in [0, 1]``; Taylor series near ``x = 1``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    y = x - 1.0
    near = np.abs(y) < _TAYLOR_RADIUS
    far = ~near & (x > 0)
    out[far] = y[far] / np.log(x[far])
    yn = y[near]
    out[near] = 1.0 + yn * (0.5 + yn * (-1.0 / 12 + yn * (1.0 / 24 + yn * (-19.0 / 720))))
    return out


def _dphi(x):
    """Derivative of :func:`_phi`; infinite at ``x = 0``."""
    x = np.asarray(x, dtype=float)
    out = np.full_like(x, np.inf)
    y = x - 1.0
    near = np.abs(y) < _TAYLOR_RADIUS
    far = ~near & (x > 0)
    lx = np.log(x[far])
    out[far] = (lx - 1.0 + 1.0 / x[far]) / lx**2
    yn = y[near]
    out[near] = 0.5 + yn * (-1.0 / 6 + yn * (1.0 / 8 + yn * (-19.0 / 180 + yn * (3.0 / 32))))
    return out


def log_mean(s, t):
    """Logarithmic mean ``theta(s, t) = (s - t) / (log s - log t)``.

    ``theta(s, s) = s`` and ``theta(s, 0) = 0``. Evaluated as
    ``max(s, t) * phi(min / max)`` so that nearly equal arguments lose no
    precision. Scalars in, scalar out.
    """
    s_arr = np.asarray(s, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    if np.any(s_arr < 0) or np.any(t_arr < 0):
        raise ValueError("logarithmic mean is defined for non-negative arguments only")
    hi = np.maximum(s_arr, t_arr)
    lo = np.minimum(s_arr, t_arr)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(hi > 0, lo / np.where(hi > 0, hi, 1.0), 0.0)
    out = hi * _phi(ratio)
    return float(out) if out.ndim == 0 else out


def log_mean_grad(s, t):
    """``(theta, d theta / ds, d theta / dt)`` for strictly positive arrays."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    x = s / t
    # the derivative formula is evaluated at ratios <= 1 to stay in range
    swap = x > 1.0
    r = np.where(swap, 1.0 / x, x)
    hi = np.where(swap, s, t)
    th = hi * _phi(r)
    d_small = _dphi(r)
    d_large = _phi(r) - r * d_small
    ds = np.where(swap, d_large, d_small)
    dt = np.where(swap, d_small, d_large)
    return th, ds, dt


def rho_hat(mu: Density) -> np.ndarray:
    """Edge field ``theta(rho(eta), rho(eta + delta_x))``."""
    lat = mu.lattice
    return log_mean(mu.rho[lat.edge_src], mu.rho[lat.edge_tgt])


def quad_over_lin(num, den) -> np.ndarray:
    """``num^2 / den`` with ``0 / 0 = 0`` and ``x / 0 = inf``."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros(np.broadcast(num, den).shape)
    num, den = np.broadcast_arrays(num, den)
    pos = den > 0
    out[pos] = num[pos] ** 2 / den[pos]
    out[(~pos) & (num != 0)] = np.inf
    return out


def lagrangian(mu: Density, atoms) -> float:
    """Kinetic energy ``sum w^2 / rho_hat d(pi (x) m)`` of the flux with the given atoms."""
    ew = mu.ref.edge_weights
    terms = quad_over_lin(atoms, rho_hat(mu) * ew)
    return float(terms.sum())


def flux_density(ref: ReferenceMeasure, atoms) -> np.ndarray:
    return np.asarray(atoms, dtype=float) / ref.edge_weights


def flux_atoms(ref: ReferenceMeasure, w) -> np.ndarray:
    return np.asarray(w, dtype=float) * ref.edge_weights


@dataclass(frozen=True)
class FluxBoundReport:
    lhs: np.ndarray  # |nu|(Upsilon x {x}) per site
    rhs: np.ndarray  # (0.5 (m_x + I_mu(x)) L(mu, nu))^{1/2}
    worst_slack: float

    @property
    def holds(self) -> bool:
        return self.worst_slack >= -1e-12


def flux_mass_bound_check(mu: Density, atoms) -> FluxBoundReport:
    """Compare ``|nu|(Upsilon x {x})`` with ``sqrt(0.5 (m_x + I_mu(x)) L(mu, nu))`` per site."""
    lat = mu.lattice
    L = lagrangian(mu, atoms)
    lhs = np.bincount(lat.edge_site, np.abs(atoms), lat.d)
    rhs = np.sqrt(0.5 * (np.asarray(lat.sites.m) + intensity_measure(mu)) * L)
    return FluxBoundReport(lhs=lhs, rhs=rhs, worst_slack=float(np.min(rhs - lhs)))


def edge_table_to_csv(ref: ReferenceMeasure, values, name: str = "value") -> str:
    buf = io.StringIO()
    buf.write(f"# lattice {ref.lattice.hash} version {__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["edge", name])
    for i, v in enumerate(np.asarray(values, dtype=float)):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


def edge_table_from_csv(ref: ReferenceMeasure, text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines or lines[0].split()[2] != ref.lattice.hash:
        raise ValueError("edge table belongs to a different lattice")
    out = np.zeros(ref.lattice.n_edges)
    reader = csv.reader(lines[1:])
    next(reader)
    for idx, val in reader:
        out[int(idx)] = float(val)
    return out
