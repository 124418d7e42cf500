"""Truncated configuration lattices, the Poisson reference measure and
point-process primitives (intensity, Campbell measure, Mecke density).

States are occupancy vectors ``eta`` in ``{0..N_0} x ... x {0..N_{d-1}}``
enumerated in lexicographic order, i.e. C-order flattening of an array of
shape ``(N_0 + 1, ..., N_{d-1} + 1)``. Directed edges ``(eta, eta + delta_x)``
exist only where ``eta_x < N_x``; they are grouped by site, and inside the
block of site ``x`` they follow the C-order of the array with axis ``x``
shortened by one. This makes ``D_x F`` a plain ``np.diff`` along axis ``x``.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sps
import yaml
from scipy.special import gammaln
from scipy.stats import poisson

from . import __version__

DEFAULT_STATE_BUDGET = 200_000


class LatticeError(ValueError):
    """Raised when a lattice cannot be built or two objects live on different lattices."""


@dataclass(frozen=True)
class SiteSpace:
    """Finite base space ``X`` with intensity weights ``m`` and occupancy caps."""

    m: tuple[float, ...]
    cap: tuple[int, ...]

    def __post_init__(self):
        m = tuple(float(v) for v in np.atleast_1d(self.m))
        cap = tuple(int(v) for v in np.atleast_1d(self.cap))
        if len(m) != len(cap) or not m:
            raise LatticeError(f"need one intensity per cap, got m={m}, cap={cap}")
        if any(not np.isfinite(v) or v <= 0 for v in m):
            raise LatticeError(f"intensities must be positive, got {m}")
        if any(c < 1 for c in cap):
            raise LatticeError(f"caps must be >= 1, got {cap}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "cap", cap)

    @property
    def d(self) -> int:
        return len(self.m)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(c + 1 for c in self.cap)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.shape))

    def describe(self) -> dict:
        return {"d": self.d, "m": [float(v) for v in self.m], "cap": list(self.cap)}

    @property
    def hash(self) -> str:
        """Short content hash used to tag serialized artifacts."""
        text = repr((self.d, tuple(float(v).hex() for v in self.m), self.cap))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def uniform(cls, d: int, m: float = 1.0, cap: int = 8) -> "SiteSpace":
        return cls(m=(m,) * d, cap=(cap,) * d)


@dataclass(frozen=True, eq=False)
class ConfigLattice:
    """Enumerated truncated configuration space with its directed edges."""

    sites: SiteSpace
    states: np.ndarray  # (S, d) occupancy counts
    edge_src: np.ndarray  # (E,)
    edge_site: np.ndarray  # (E,)
    edge_tgt: np.ndarray  # (E,)
    boundary_mask: np.ndarray  # (S, d) True where eta_x == N_x
    edge_offsets: tuple[int, ...] = field(repr=False)  # block boundaries per site

    @property
    def d(self) -> int:
        return self.sites.d

    @property
    def shape(self) -> tuple[int, ...]:
        return self.sites.shape

    @property
    def n_states(self) -> int:
        return self.states.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_src.shape[0]

    @property
    def hash(self) -> str:
        return self.sites.hash

    def edge_shape(self, x: int) -> tuple[int, ...]:
        """Array shape of the edge block belonging to site ``x``."""
        shp = list(self.shape)
        shp[x] -= 1
        return tuple(shp)

    def edge_block(self, x: int) -> slice:
        return slice(self.edge_offsets[x], self.edge_offsets[x + 1])

    def encode(self, counts) -> int:
        counts = tuple(int(c) for c in counts)
        if len(counts) != self.d or any(c < 0 or c > n for c, n in zip(counts, self.sites.cap)):
            raise LatticeError(f"configuration {counts} outside lattice with caps {self.sites.cap}")
        return int(np.ravel_multi_index(counts, self.shape))

    def decode(self, index: int) -> tuple[int, ...]:
        return tuple(int(c) for c in self.states[index])

    @cached_property
    def diff_matrix(self) -> sps.csr_matrix:
        """Sparse ``(E, S)`` matrix of the difference operator ``D``."""
        E = self.n_edges
        rows = np.concatenate([np.arange(E), np.arange(E)])
        cols = np.concatenate([self.edge_tgt, self.edge_src])
        vals = np.concatenate([np.ones(E), -np.ones(E)])
        return sps.csr_matrix((vals, (rows, cols)), shape=(E, self.n_states))


def build_lattice(sites: SiteSpace, budget: int = DEFAULT_STATE_BUDGET) -> ConfigLattice:
    """Enumerate states (lexicographic) and edges (grouped by site)."""
    n = sites.n_states
    if n > budget:
        raise LatticeError(
            f"state count prod(N_x + 1) = {' * '.join(str(s) for s in sites.shape)} = {n} "
            f"exceeds budget {budget}"
        )
    shape = sites.shape
    states = np.array(np.unravel_index(np.arange(n), shape)).T.reshape(n, sites.d)
    index = np.arange(n).reshape(shape)
    src, site, tgt, offsets = [], [], [], [0]
    for x in range(sites.d):
        lo = [slice(None)] * sites.d
        hi = [slice(None)] * sites.d
        lo[x] = slice(0, -1)
        hi[x] = slice(1, None)
        s = index[tuple(lo)].ravel()
        src.append(s)
        tgt.append(index[tuple(hi)].ravel())
        site.append(np.full(s.shape, x))
        offsets.append(offsets[-1] + s.size)
    boundary = states == np.asarray(sites.cap)[None, :]
    return ConfigLattice(
        sites=sites,
        states=states,
        edge_src=np.concatenate(src),
        edge_site=np.concatenate(site),
        edge_tgt=np.concatenate(tgt),
        boundary_mask=boundary,
        edge_offsets=tuple(offsets),
    )


@dataclass(frozen=True, eq=False)
class ReferenceMeasure:
    """Truncated, renormalised product-Poisson measure on a lattice."""

    lattice: ConfigLattice
    weights: np.ndarray
    log_weights: np.ndarray
    tail_mass: np.ndarray  # per site, untruncated Poisson mass above N_x
    site_marginals: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def sites(self) -> SiteSpace:
        return self.lattice.sites

    @property
    def max_tail_mass(self) -> float:
        return float(np.max(self.tail_mass))

    @cached_property
    def edge_weights(self) -> np.ndarray:
        """``pi(eta) * m_x`` for every edge: the measure ``pi (x) m`` on edges."""
        m = np.asarray(self.sites.m)
        return self.weights[self.lattice.edge_src] * m[self.lattice.edge_site]


def _site_log_weights(m: float, cap: int) -> np.ndarray:
    n = np.arange(cap + 1)
    return n * np.log(m) - gammaln(n + 1)


def poisson_reference(lattice: ConfigLattice) -> ReferenceMeasure:
    sites = lattice.sites
    marginals, logs = [], []
    for m, cap in zip(sites.m, sites.cap):
        lw = _site_log_weights(m, cap)
        lw = lw - lw.max()
        lz = np.log(np.exp(lw).sum())
        logs.append(lw - lz)
        marginals.append(np.exp(lw - lz))
    log_w = logs[0]
    for lw in logs[1:]:
        log_w = np.add.outer(log_w, lw)
    log_w = np.asarray(log_w).ravel()
    weights = np.exp(log_w)
    weights /= weights.sum()
    tail = np.array([poisson.sf(cap, m) for m, cap in zip(sites.m, sites.cap)])
    return ReferenceMeasure(
        lattice=lattice,
        weights=weights,
        log_weights=np.log(weights),
        tail_mass=tail,
        site_marginals=tuple(marginals),
    )


def poisson_space(m, cap) -> ReferenceMeasure:
    """Shortcut: build lattice and reference measure from intensities and caps."""
    return poisson_reference(build_lattice(SiteSpace(m=tuple(np.atleast_1d(m)), cap=tuple(np.atleast_1d(cap)))))


@dataclass(frozen=True, eq=False)
class Density:
    """Probability measure ``mu = rho * pi`` given by its density ``rho``."""

    ref: ReferenceMeasure
    rho: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (self.ref.lattice.n_states,):
            raise LatticeError(f"density has shape {rho.shape}, lattice has {self.ref.lattice.n_states} states")
        if np.any(rho < 0) or not np.all(np.isfinite(rho)):
            raise ValueError("density must be finite and non-negative")
        mass = float(rho @ self.ref.weights)
        if abs(mass - 1.0) > 1e-12:
            raise ValueError(f"density has total mass {mass!r}, expected 1")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @property
    def lattice(self) -> ConfigLattice:
        return self.ref.lattice

    @property
    def probabilities(self) -> np.ndarray:
        return self.rho * self.ref.weights

    @property
    def strictly_positive(self) -> bool:
        return bool(np.all(self.rho > 0))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.rho.tobytes()).hexdigest()[:16]

    @classmethod
    def from_unnormalized(cls, ref: ReferenceMeasure, rho) -> "Density":
        rho = np.asarray(rho, dtype=float)
        return cls(ref, rho / (rho @ ref.weights))

    @classmethod
    def from_probabilities(cls, ref: ReferenceMeasure, p) -> "Density":
        p = np.asarray(p, dtype=float)
        return cls.from_unnormalized(ref, p / ref.weights)

    @classmethod
    def reference(cls, ref: ReferenceMeasure) -> "Density":
        return cls(ref, np.ones(ref.lattice.n_states))

    @classmethod
    def dirac(cls, ref: ReferenceMeasure, counts) -> "Density":
        rho = np.zeros(ref.lattice.n_states)
        i = ref.lattice.encode(counts)
        rho[i] = 1.0 / ref.weights[i]
        return cls.from_unnormalized(ref, rho)

    @classmethod
    def exp_perturbed(cls, ref: ReferenceMeasure, seed: int, a: float = 0.5, margin: int = 0) -> "Density":
        """``rho`` proportional to ``exp(g)``, ``g`` i.i.d. uniform on ``[-a, a]``.

        With ``margin > 0`` the perturbation is applied only to states at least
        ``margin`` levels below every cap; the remaining states keep ``g = 0``.
        """
        rng = np.random.default_rng(seed)
        g = rng.uniform(-a, a, ref.lattice.n_states)
        if margin:
            inner = np.all(ref.lattice.states <= np.asarray(ref.sites.cap) - margin, axis=1)
            g = np.where(inner, g, 0.0)
        return cls.from_unnormalized(ref, np.exp(g))


def intensity_measure(mu: Density) -> np.ndarray:
    """``I_mu(x) = sum_eta eta_x mu(eta)``."""
    return mu.probabilities @ mu.lattice.states


def campbell_measure(mu: Density) -> np.ndarray:
    """Atoms ``C_mu({eta} x {x}) = (eta_x + 1) rho(eta + delta_x) pi(eta + delta_x)`` per edge."""
    lat = mu.lattice
    occ = lat.states[lat.edge_tgt, lat.edge_site]
    return occ * mu.probabilities[lat.edge_tgt]


def campbell_density(mu: Density) -> np.ndarray:
    """Campbell density ``rho(eta + delta_x) / Z_x`` as an edge table.

    ``Z_x = sum_gamma rho(gamma + delta_x) pi(gamma)``. Detailed balance gives
    ``I_mu(x) = m_x Z_x``, so the table is the density of ``C_mu`` against
    ``pi (x) I_mu``. At ``mu = pi`` the entries equal ``1 / (1 - pi_x(N_x))``,
    which is one up to the tail mass. For sites with ``I_mu(x) = 0`` the
    density is undefined and reported as NaN.
    """
    lat = mu.lattice
    out = np.full(lat.n_edges, np.nan)
    intensity = intensity_measure(mu)
    for x in range(lat.d):
        blk = lat.edge_block(x)
        if intensity[x] <= 0:
            continue
        shifted = mu.rho[lat.edge_tgt[blk]]
        z = shifted @ mu.ref.weights[lat.edge_src[blk]]
        out[blk] = shifted / z
    return out


def mecke_residual(ref: ReferenceMeasure, u: np.ndarray) -> float:
    """Residual of the Mecke identity at ``mu = pi`` for an edge function ``u``.

    Compares ``sum_edges u(eta, x) pi(eta) m_x`` with
    ``sum_states sum_x eta_x u(eta - delta_x, x) pi(eta)``.
    """
    lat = ref.lattice
    lhs = u @ ref.edge_weights
    occ = lat.states[lat.edge_tgt, lat.edge_site]
    rhs = (occ * u) @ ref.weights[lat.edge_tgt]
    return float(abs(lhs - rhs))


def detailed_balance_residual(ref: ReferenceMeasure) -> float:
    lat = ref.lattice
    occ = lat.states[lat.edge_tgt, lat.edge_site]
    return float(np.max(np.abs(ref.edge_weights - ref.weights[lat.edge_tgt] * occ), initial=0.0))


# ---------------------------------------------------------------- serialization


def dump_sites(sites: SiteSpace, path) -> None:
    Path(path).write_text(yaml.safe_dump(sites.describe(), sort_keys=True))


def load_sites(path) -> SiteSpace:
    mapping = yaml.safe_load(Path(path).read_text())
    return sites_from_mapping(mapping)


def sites_from_mapping(mapping: dict) -> SiteSpace:
    d = int(mapping.get("d", len(np.atleast_1d(mapping["m"]))))
    m = np.broadcast_to(np.asarray(mapping.get("m", 1.0), dtype=float), (d,))
    cap = np.broadcast_to(np.asarray(mapping["cap"], dtype=int), (d,))
    return SiteSpace(m=tuple(m), cap=tuple(cap))


def density_to_csv(mu: Density) -> str:
    buf = io.StringIO()
    buf.write(f"# lattice {mu.lattice.hash} version {__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["state", "rho"])
    for i, v in enumerate(mu.rho):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


def density_from_csv(ref: ReferenceMeasure, text: str) -> Density:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# lattice "):
        raise ValueError("density CSV is missing its lattice header")
    tag = lines[0].split()[2]
    if tag != ref.lattice.hash:
        raise LatticeError(f"density belongs to lattice {tag}, not {ref.lattice.hash}")
    rho = np.zeros(ref.lattice.n_states)
    for row in csv.DictReader(lines[1:]):
        rho[int(row["state"])] = float(row["rho"])
    return Density(ref, rho)
