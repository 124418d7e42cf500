"""Discrete Benamou-Brenier problems on the truncated lattice.

The action of a path on the staggered grid is

    sum_k dt_k sum_e V_k(e)^2 / (theta(rho_bar_k(src), rho_bar_k(tgt)) pi(src) m_x)

with ``rho_bar_k`` the interval midpoint density. For fixed densities the
cheapest flux with a prescribed divergence ``c_k = (rho_{k+1} - rho_k) pi / dt_k``
is a weighted gradient ``V_k = a_k * D phi_k`` where ``a_k = theta_k pi m`` and
``phi_k`` solves the weighted graph Laplacian system ``D^T diag(a_k) D phi_k = c_k``.
Minimizing out the fluxes this way leaves a smooth problem in the interior
densities alone and the mass-balance constraints hold exactly by construction.
The reduced problem is convex in the densities and is solved by a damped
Newton method; the mass-weighted gradient is the optimality residual reported
to the caller.
"""
from __future__ import annotations

import enum
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.integrate as si
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .calculus import fisher, flux_divergence, lagrangian, log_mean, log_mean_grad
from .config_space import Density, LatticeError, ReferenceMeasure
from .continuity import SOLVER_CE_TOL, CEPath, ce_residual
from .semigroup import expm_kernel

DENSE_LIMIT = 600
_RHO_FLOOR = 1e-300
# interior knots never drop below this, so every logarithmic mean stays positive
_KNOT_FLOOR = 1e-250


class InitMode(str, enum.Enum):
    LINEAR = "linear"
    OU_BRIDGE = "ou_bridge"


@dataclass(frozen=True)
class SolverConfig:
    """Discretization and stopping parameters of one solve.

    ``floor_schedule`` is ``(initial, decay, final)`` for the lower bound on the
    logarithmic mean used while optimizing; every stage warm-starts the next.
    """

    K: int = 32
    max_iters: int = 200
    kkt_tol: float = 1e-8
    floor_schedule: tuple[float, float, float] = (1e-6, 1e-3, 1e-12)
    init: InitMode = InitMode.OU_BRIDGE
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.kkt_tol > 0:
            raise ValueError("kkt_tol must be > 0")
        lo, decay, hi = self.floor_schedule
        if not (hi >= 1e-12 and lo >= hi and 0 < decay < 1):
            raise ValueError("floor schedule must satisfy initial >= final >= 1e-12 and 0 < decay < 1")
        object.__setattr__(self, "init", InitMode(self.init))

    def floors(self) -> list[float]:
        lo, decay, hi = self.floor_schedule
        out = [lo]
        while out[-1] * decay > hi:
            out.append(out[-1] * decay)
        if out[-1] != hi:
            out.append(hi)
        return out


@dataclass
class SolverReport:
    objective: float
    stationarity: float
    feasibility: float
    iterations: int
    converged: bool
    wall_time: float
    status: str = ""
    refinement: list[tuple[int, float]] = field(default_factory=list)
    order: float | None = None
    extrapolate: float | None = None
    error_estimate: float | None = None
    flags: list[str] = field(default_factory=list)
    # first-order objective change available from relative perturbations of the knots
    slack: float = 0.0

    @property
    def kkt_residual(self) -> float:
        return max(self.stationarity, self.feasibility)

    def as_dict(self) -> dict:
        return {
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "stationarity": self.stationarity,
            "feasibility": self.feasibility,
            "iterations": self.iterations,
            "converged": self.converged,
            "status": self.status,
            "refinement": [[k, v] for k, v in self.refinement],
            "order": self.order,
            "extrapolate": self.extrapolate,
            "error_estimate": self.error_estimate,
            "flags": list(self.flags),
            "slack": self.slack,
        }


# ---------------------------------------------------------------- path functionals


def action(path: CEPath) -> float:
    """``sum_k dt_k L(rho_bar_k, V_k)``; ``inf`` if flux crosses an edge with zero mobility."""
    return float(sum(dt * lagrangian(path.midpoint(k), path.flux[k]) for k, dt in enumerate(path.dt)))


def action_entropic(path: CEPath, eps: float) -> float:
    """Action plus ``eps`` times the time-integrated Fisher information of the midpoints."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    base = action(path)
    if eps == 0 or np.isinf(base):
        return base
    fis = sum(dt * fisher(path.midpoint(k)) for k, dt in enumerate(path.dt))
    return float(base + eps * fis)


# ---------------------------------------------------------------- weighted Laplacians


class _Laplacian:
    """Batched solves of ``D^T diag(a_k) D phi_k = c_k`` for all intervals at once."""

    def __init__(self, ref: ReferenceMeasure):
        lat = ref.lattice
        self.S = lat.n_states
        self.src = lat.edge_src
        self.tgt = lat.edge_tgt
        self.D = lat.diff_matrix
        self.dense = self.S <= DENSE_LIMIT
        S = self.S
        self._flat = (
            np.concatenate([self.src * S + self.src, self.tgt * S + self.tgt, self.src * S + self.tgt, self.tgt * S + self.src]),
            np.array([1.0, 1.0, -1.0, -1.0]),
        )

    def solve(self, a: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Potentials grounded at state 0; ``a`` must be positive on every edge."""
        K = a.shape[0]
        S = self.S
        phi = np.zeros((K, S))
        if S == 1:
            return phi
        if self.dense:
            idx, sgn = self._flat
            L = np.zeros((K, S * S))
            vals = np.concatenate([a, a, -a, -a], axis=1)
            for k in range(K):
                L[k] = np.bincount(idx, vals[k], S * S)
            L = L.reshape(K, S, S)[:, 1:, 1:]
            phi[:, 1:] = np.linalg.solve(L, c[:, 1:, None])[..., 0]
            return phi
        for k in range(K):
            L = (self.D.T @ sps.diags(a[k]) @ self.D).tocsc()[1:, 1:]
            phi[k, 1:] = spla.spsolve(L, c[k, 1:])
        return phi

    def pinv_solve(self, a: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Minimum-norm potentials when some mobilities vanish."""
        out = np.zeros((a.shape[0], self.S))
        D = self.D.toarray()
        for k in range(a.shape[0]):
            L = D.T @ (a[k][:, None] * D)
            out[k] = sla.lstsq(L, c[k], cond=1e-13)[0]
        return out


# ---------------------------------------------------------------- reduced problem


class _Reduced:
    """Action (plus optional Fisher penalty) as a function of the interior knot densities."""

    def __init__(self, mu0: Density, mu1: Density, K: int, eps: float = 0.0):
        self.ref = mu0.ref
        lat = self.ref.lattice
        self.K = K
        self.dt = 1.0 / K
        self.eps = eps
        self.rho0 = mu0.rho
        self.rho1 = mu1.rho
        self.pi = self.ref.weights
        self.ew = self.ref.edge_weights
        self.src = lat.edge_src
        self.tgt = lat.edge_tgt
        self.S = lat.n_states
        self.lap = _Laplacian(self.ref)
        self.floor = 1e-12
        offs = (np.arange(K) * self.S)[:, None]
        self._src_k = (self.src[None, :] + offs).ravel()
        self._tgt_k = (self.tgt[None, :] + offs).ravel()

    def _scatter(self, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
        return np.bincount(idx, vals.ravel(), self.K * self.S).reshape(self.K, self.S)

    def potentials(self, R: np.ndarray):
        mids = np.maximum(0.5 * (R[:-1] + R[1:]), _RHO_FLOOR)
        th, ds, dt_ = log_mean_grad(mids[:, self.src], mids[:, self.tgt])
        active = th > self.floor
        a = np.where(active, th, self.floor) * self.ew
        c = np.diff(R, axis=0) * self.pi / self.dt
        phi = self.lap.solve(a, c)
        return mids, a, c, phi, (active, ds, dt_)

    def value_grad_rho(self, R: np.ndarray):
        """Objective and its gradient with respect to all knot densities (endpoints included)."""
        mids, a, c, phi, (active, ds, dt_) = self.potentials(R)
        g_edge = phi[:, self.tgt] - phi[:, self.src]
        f = self.dt * float(np.sum(c * phi))
        gR = np.zeros_like(R)
        # divergence part: f_k = dt c_k . phi_k with phi_k = L(a_k)^+ c_k
        gR[1:] += 2.0 * phi * self.pi
        gR[:-1] -= 2.0 * phi * self.pi
        # mobility part: d f_k / d a_e = -dt (D phi_k)_e^2
        ga = -self.dt * g_edge**2 * self.ew * active
        gm = self._scatter(self._src_k, ga * ds) + self._scatter(self._tgt_k, ga * dt_)
        if self.eps > 0:
            ls, lt = np.log(mids[:, self.src]), np.log(mids[:, self.tgt])
            diff = mids[:, self.tgt] - mids[:, self.src]
            f += self.eps * self.dt * float(np.sum(diff * (lt - ls) * self.ew))
            w = self.eps * self.dt * self.ew
            gm += self._scatter(self._tgt_k, w * ((lt - ls) + diff / mids[:, self.tgt]))
            gm += self._scatter(self._src_k, w * (-(lt - ls) - diff / mids[:, self.src]))
        gR[:-1] += 0.5 * gm
        gR[1:] += 0.5 * gm
        return f, gR

    def fg(self, x: np.ndarray):
        f, gR = self.value_grad_rho(np.vstack([self.rho0, x, self.rho1]))
        return f, gR[1:-1]

    def stationarity(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        """``x (g - lambda pi)`` per knot with the multiplier of the unit-mass constraint."""
        lam = np.sum(g * x, axis=1, keepdims=True)
        return x * (g - lam * self.pi)

    def scaled_hessian(self, x: np.ndarray, h: float = 1e-6) -> sps.csr_matrix:
        """``diag(x) H diag(x)`` by central differences of the gradient.

        The gradient at knot ``i`` depends on knots ``i - 1, i, i + 1`` only, so
        perturbing every third knot at once recovers the block-tridiagonal
        Hessian from ``6 S`` gradient evaluations.
        """
        K1, S = x.shape
        n = K1 * S
        idx_i = np.arange(K1)
        rows, cols, vals = [], [], []
        for j in range(3):
            ks = np.arange(j, K1, 3)
            # the unique perturbed knot adjacent to each row block
            owner = np.full(K1, -1)
            for d in (-1, 0, 1):
                k = idx_i + d
                ok = (k >= 0) & (k < K1) & (k % 3 == j)
                owner[ok] = k[ok]
            live = owner >= 0
            for s in range(S):
                P = np.zeros_like(x)
                P[ks, s] = h * x[ks, s]
                dg = (self.fg(x + P)[1] - self.fg(x - P)[1]) / (2.0 * h)
                blk = (dg * x)[live]
                ii = idx_i[live]
                rows.append((ii[:, None] * S + np.arange(S)).ravel())
                cols.append(np.repeat(owner[live] * S + s, S))
                vals.append(blk.ravel())
        H = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        return (0.5 * (H + H.T)).tocsr()

    def newton(self, x: np.ndarray, tol: float, max_iters: int, growth_cap: float = 2.0):
        """Damped Newton on the knot densities with a multiplicative update.

        The step is the equality-constrained Newton step in ``log x`` with the
        scaled Hessian ``diag(x) H diag(x)``. Growth of any entry is capped at
        ``e^growth_cap`` per iteration and shrinking never reaches zero.
        Returns ``(x, f, stationarity, iterations, status)``.
        """
        K1, S = x.shape
        n = K1 * S
        f, g = self.fg(x)
        history = [f]
        status = "iteration limit"
        it = 0
        A_rows = np.repeat(np.arange(K1), S)
        for it in range(max_iters + 1):
            r = self.stationarity(x, g)
            stat = float(np.max(np.abs(r)))
            if stat <= tol:
                status = "converged"
                break
            if len(history) > 3 and history[-4] - history[-1] <= 0.1 * tol * abs(history[-1]):
                status = "objective stagnated"
                break
            if it == max_iters:
                break
            H = self.scaled_hessian(x)
            A = sps.csr_matrix(((x * self.pi).ravel(), (A_rows, np.arange(n))), shape=(K1, n))
            gh = r.ravel()
            reg = 0.0
            dmax = float(np.abs(H.diagonal()).max())
            while True:
                kkt = sps.bmat([[H + reg * sps.eye(n), A.T], [A, None]], format="csc")
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", spla.MatrixRankWarning)
                    ph = spla.spsolve(kkt, np.concatenate([-gh, np.zeros(K1)]))[:n]
                if np.all(np.isfinite(ph)) and ph @ gh < -1e-3 * np.linalg.norm(ph) * np.linalg.norm(gh):
                    break
                reg = max(10.0 * reg, 1e-8 * dmax)
            ph = ph.reshape(K1, S)
            step = min(1.0, growth_cap / max(float(ph.max()), 1e-300))
            slope = float(gh @ ph.ravel())
            while True:
                xn = np.maximum(x * np.exp(step * ph), _KNOT_FLOOR)
                xn /= (xn @ self.pi)[:, None]
                fn, gn = self.fg(xn)
                if fn <= f + 1e-4 * step * slope or step < 1e-14:
                    break
                step *= 0.5
            x, f, g = xn, fn, gn
            history.append(f)
        self.last_slack = float(np.sum(np.abs(r)))
        return x, f, stat, it, status

    def path(self, R: np.ndarray) -> CEPath:
        _, a, c, phi, _ = self.potentials(R)
        flux = a * (phi[:, self.tgt] - phi[:, self.src])
        times = np.linspace(0.0, 1.0, self.K + 1)
        return CEPath(self.ref, times, R, flux, ce_tol=SOLVER_CE_TOL)


def _initial_knots(mu0: Density, mu1: Density, K: int, mode: InitMode) -> np.ndarray:
    t = np.linspace(0.0, 1.0, K + 1)[1:-1, None]
    if mode is InitMode.LINEAR:
        lin = (1 - t) * mu0.rho + t * mu1.rho
        # interior knots must stay strictly positive for the multiplicative updates
        return (1 - 1e-6) * lin + 1e-6
    sites = mu0.lattice.sites
    out = []
    for s in t[:, 0]:
        P = expm_kernel(sites, 4.0 * s * (1 - s))
        out.append((1 - s) * P.apply(mu0.rho) + s * P.apply(mu1.rho))
    return np.array(out)


def _resample_knots(path: CEPath, K: int) -> np.ndarray:
    """Interior knot densities of ``path`` linearly interpolated to a uniform grid of ``K`` intervals."""
    s = np.linspace(0.0, 1.0, K + 1)[1:-1]
    return np.array([[np.interp(v, path.times, path.rho[:, j]) for j in range(path.rho.shape[1])] for v in s])


def _check_pair(mu0: Density, mu1: Density):
    if mu0.lattice.hash != mu1.lattice.hash:
        raise LatticeError("endpoint densities live on different lattices")


def _constant_solution(mu: Density, K: int, t0: float) -> tuple[float, CEPath, SolverReport]:
    times = np.linspace(0.0, 1.0, K + 1)
    path = CEPath(mu.ref, times, np.tile(mu.rho, (K + 1, 1)), np.zeros((K, mu.lattice.n_edges)))
    rep = SolverReport(0.0, 0.0, 0.0, 0, True, time.perf_counter() - t0, status="identical endpoints")
    return 0.0, path, rep


def solve_entropic(mu0: Density, mu1: Density, eps: float, cfg: SolverConfig = SolverConfig(), warm: CEPath | None = None):
    """Minimize the discrete action plus ``eps`` times the integrated Fisher information.

    Returns ``(value, path, report)``. The path always satisfies the mass
    balance to round-off, so ``value`` is the objective of a feasible path and
    hence an upper bound on the discrete optimum.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    _check_pair(mu0, mu1)
    t0 = time.perf_counter()
    if np.array_equal(mu0.rho, mu1.rho) and (eps == 0 or mu0.strictly_positive and fisher(mu0) == 0):
        return _constant_solution(mu0, cfg.K, t0)
    prob = _Reduced(mu0, mu1, cfg.K, eps)
    if cfg.K == 1:
        return _single_interval(prob, mu0, mu1, eps, t0)
    init = _resample_knots(warm, cfg.K) if warm is not None else _initial_knots(mu0, mu1, cfg.K, cfg.init)
    x = np.maximum(init, _RHO_FLOOR)
    x /= (x @ prob.pi)[:, None]
    iters = 0
    for floor in cfg.floors():
        prob.floor = floor
        x, _, stat, n, status = prob.newton(x, cfg.kkt_tol, max(cfg.max_iters - iters, 0))
        iters += n
    R = np.vstack([mu0.rho, x, mu1.rho])
    path = prob.path(R)
    value = action_entropic(path, eps)
    feas = ce_residual(path)
    converged = stat <= cfg.kkt_tol and feas <= path.ce_tol
    rep = SolverReport(
        objective=value,
        stationarity=stat,
        feasibility=feas,
        iterations=iters,
        converged=converged,
        wall_time=time.perf_counter() - t0,
        status=status,
        slack=prob.last_slack,
    )
    return value, path, rep


def _single_interval(prob: _Reduced, mu0, mu1, eps, t0):
    R = np.vstack([mu0.rho, mu1.rho])
    mids = 0.5 * (R[0] + R[1])
    th = log_mean(mids[prob.src], mids[prob.tgt])
    a = (th * prob.ew)[None]
    c = (np.diff(R, axis=0) * prob.pi)
    flags = []
    if np.all(th > 0):
        phi = prob.lap.solve(a, c)
    else:
        phi = prob.lap.pinv_solve(a, c)
        flags.append("singular Laplacian: pseudo-inverse")
    flux = a * (phi[:, prob.tgt] - phi[:, prob.src])
    path = CEPath(prob.ref, np.array([0.0, 1.0]), R, flux, ce_tol=SOLVER_CE_TOL)
    feas = ce_residual(path)
    value = action_entropic(path, eps) if feas <= path.ce_tol else np.inf
    rep = SolverReport(value, 0.0, feas, 0, feas <= path.ce_tol, time.perf_counter() - t0, status="single interval", flags=flags)
    return value, path, rep


def solve_distance(mu0: Density, mu1: Density, cfg: SolverConfig = SolverConfig(), warm: CEPath | None = None):
    """Discrete squared distance: ``(W2, path, report)``."""
    return solve_entropic(mu0, mu1, 0.0, cfg, warm=warm)


# ---------------------------------------------------------------- geodesics


def project_fluxes(path: CEPath) -> tuple[CEPath, list[str]]:
    """Replace each flux by the cheapest flux with the same divergence at the same midpoint density."""
    ref = path.ref
    lat = ref.lattice
    lap = _Laplacian(ref)
    mids = path.midpoint_rho
    a = log_mean(mids[:, lat.edge_src], mids[:, lat.edge_tgt]) * ref.edge_weights
    c = np.array([flux_divergence(ref, v) for v in path.flux])
    flags = []
    if np.all(a > 0):
        phi = lap.solve(a, c)
    else:
        phi = lap.pinv_solve(a, c)
        flags.append("singular Laplacian: pseudo-inverse")
    flux = a * (phi[:, lat.edge_tgt] - phi[:, lat.edge_src])
    return replace(path, flux=flux), flags


def geodesic(mu0: Density, mu1: Density, cfg: SolverConfig = SolverConfig()) -> CEPath:
    _, path, rep = solve_distance(mu0, mu1, cfg)
    projected, flags = project_fluxes(path)
    projected.meta.update({"report": rep.as_dict(), "flags": flags})
    return projected


# ---------------------------------------------------------------- refinement


def richardson(table: list[tuple[int, float]]) -> tuple[float | None, float | None, float | None, list[str]]:
    """Empirical order, extrapolate and error estimate from the last three rungs of a doubling ladder."""
    flags: list[str] = []
    if len(table) < 3:
        return None, None, None, ["need three refinement levels"]
    (k1, w1), (k2, w2), (k3, w3) = table[-3:]
    if not (k2 == 2 * k1 and k3 == 2 * k2):
        return None, None, None, ["ladder is not a doubling sequence"]
    d1, d2 = w1 - w2, w2 - w3
    if d1 == 0 and d2 == 0:
        return None, w3, 0.0, flags
    if d1 * d2 <= 0 or abs(d2) >= abs(d1):
        return None, None, None, ["non-monotone convergence"]
    p = float(np.log2(d1 / d2))
    err = d2 / (2.0**p - 1.0)
    return p, w3 - err, abs(err), flags


def refine_with_path(mu0: Density, mu1: Density, Ks, cfg: SolverConfig = SolverConfig(), eps: float = 0.0):
    """Solve on an increasing ladder of ``K`` values, warm-starting each rung from the previous one.

    Returns ``(report, finest_path)``.
    """
    Ks = [int(k) for k in Ks]
    if not Ks or any(b <= a for a, b in zip(Ks, Ks[1:])):
        raise ValueError("K list must be non-empty and increasing")
    t0 = time.perf_counter()
    table = []
    warm = None
    worst_stat = worst_feas = 0.0
    iters = 0
    conv = True
    rep = None
    for K in Ks:
        val, warm, rep = solve_entropic(mu0, mu1, eps, replace(cfg, K=K), warm=warm)
        table.append((K, val))
        worst_stat = max(worst_stat, rep.stationarity)
        worst_feas = max(worst_feas, rep.feasibility)
        iters += rep.iterations
        conv &= rep.converged
    p, ext, err, flags = richardson(table)
    report = SolverReport(
        objective=table[-1][1],
        stationarity=worst_stat,
        feasibility=worst_feas,
        iterations=iters,
        converged=conv,
        wall_time=time.perf_counter() - t0,
        status="refined",
        refinement=table,
        order=p,
        extrapolate=ext,
        error_estimate=err,
        flags=flags,
        slack=rep.slack,
    )
    return report, warm


def refine(mu0: Density, mu1: Density, Ks, cfg: SolverConfig = SolverConfig(), eps: float = 0.0) -> SolverReport:
    """Refinement table, empirical order and Richardson extrapolate of the discrete cost."""
    return refine_with_path(mu0, mu1, Ks, cfg, eps)[0]


def discretization_gap(report: SolverReport) -> float:
    """``delta_K``: distance between the finest rung and the extrapolate (or the last difference)."""
    if report.error_estimate is not None:
        return float(report.error_estimate)
    t = report.refinement
    return abs(t[-1][1] - t[-2][1]) if len(t) >= 2 else float("inf")


# ---------------------------------------------------------------- two-point oracle


def two_point_oracle(m: float, beta0: float, beta1: float) -> float:
    """Distance between the laws on ``{0, 1}`` with mass ``beta0`` and ``beta1`` at state 1.

    On the one-site lattice with cap 1 there is a single edge, so the flux is
    ``d beta / dt`` and the distance is the length
    ``int dbeta / sqrt(theta((1 - beta) / pi0, beta / pi1) pi0 m)``. The square-root
    endpoint singularities are removed with ``beta = end + (mid - end) v^2``.
    """
    if not (0 <= beta0 <= 1 and 0 <= beta1 <= 1):
        raise ValueError("beta values must lie in [0, 1]")
    if m <= 0:
        raise ValueError("m must be > 0")
    lo, hi = sorted((float(beta0), float(beta1)))
    if lo == hi:
        return 0.0
    pi0, pi1 = 1.0 / (1.0 + m), m / (1.0 + m)

    def speed_inv(b):
        th = log_mean((1.0 - b) / pi0, b / pi1)
        return 1.0 / np.sqrt(th * pi0 * m)

    mid = 0.5 * (lo + hi)
    total = 0.0
    for end in (lo, hi):
        span = mid - end

        def f(v, end=end, span=span):
            if v == 0.0:
                return 0.0 if (end in (0.0, 1.0)) else 2.0 * v * span * speed_inv(end)
            return 2.0 * v * abs(span) * speed_inv(end + span * v * v)

        val, _ = si.quad(f, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)
        total += val
    return float(total)
