"""Numerical checks of functional inequalities for the Ornstein-Uhlenbeck flow.

Each ``check_*`` returns a :class:`VerificationReport`. Inequalities are
written as ``lhs <= rhs`` and the verdict is ``PASS`` iff
``rhs - lhs >= -tolerance``. The tolerance is a sum of named parts so every
report says where its allowance comes from:

* ``roundoff``: floating-point evaluation of closed-form sums;
* ``discretization``: ``delta_K`` from a refinement ladder of the solver;
* ``solver``: first-order objective slack reported by the solver;
* ``finite_difference``: Richardson estimate of a difference quotient;
* ``truncation``: Poisson tail mass beyond the caps.

The solver only produces upper estimates of the distance. When the distance
sits on the small side of an inequality (Talagrand, convexity, EVI) an upper
estimate makes a ``PASS`` conclusive; when it sits on the large side (HWI,
slope bound) a ``PASS`` relies on the estimate being accurate and the report
carries the corresponding sensitivity in its tolerance.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import quad, simpson

from .calculus import entropy, fisher
from .config_space import Density, SiteSpace
from .continuity import push_semigroup
from .semigroup import be_commutation_residual, evolve
from .transport import (
    SolverConfig,
    SolverReport,
    action,
    discretization_gap,
    refine_with_path,
    solve_distance,
)

ROUNDOFF = 1e-10
DEFAULT_LADDER = (16, 32, 64)


class Verdict(str, enum.Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    SKIPPED = "SKIPPED"


@dataclass
class VerificationReport:
    name: str
    inputs: dict
    lhs: float
    rhs: float
    tolerance_parts: dict = field(default_factory=dict)
    verdict: Verdict = Verdict.SKIPPED
    reason: str = ""
    vacuous: bool = False
    detail: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        if np.isinf(self.rhs) and self.rhs > 0:
            return np.inf
        return float(self.rhs - self.lhs)

    @property
    def tolerance(self) -> float:
        return float(sum(self.tolerance_parts.values()))

    @property
    def passed(self) -> bool:
        return self.verdict is Verdict.PASS

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "inputs": self.inputs,
            "lhs": _num(self.lhs),
            "rhs": _num(self.rhs),
            "slack": _num(self.slack),
            "tolerance": self.tolerance,
            "tolerance_parts": dict(self.tolerance_parts),
            "verdict": self.verdict.value,
            "reason": self.reason,
            "vacuous": self.vacuous,
            "detail": {k: _jsonable(v) for k, v in self.detail.items()},
        }


def _num(x):
    x = float(x)
    return x if np.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (float, np.floating)):
        return _num(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def judge(name: str, inputs: dict, lhs: float, rhs: float, tol: dict, **extra) -> VerificationReport:
    """Build a report whose verdict depends only on ``lhs``, ``rhs`` and the tolerance."""
    rep = VerificationReport(name, inputs, float(lhs), float(rhs), dict(tol), **extra)
    if rep.vacuous or rep.slack >= -rep.tolerance:
        rep.verdict = Verdict.PASS
    else:
        rep.verdict = Verdict.FAIL
    return rep


def combine(name: str, reports: list[VerificationReport], inputs: dict | None = None) -> VerificationReport:
    """Aggregate sub-reports: the worst normalized slack is reported, any failure fails."""
    live = [r for r in reports if r.verdict is not Verdict.SKIPPED]
    if not live:
        return VerificationReport(name, inputs or {}, np.nan, np.nan, verdict=Verdict.SKIPPED, reason="no checks ran")

    def margin(r):
        return r.slack + r.tolerance

    worst = min(live, key=margin)
    out = VerificationReport(
        name,
        inputs or worst.inputs,
        worst.lhs,
        worst.rhs,
        dict(worst.tolerance_parts),
        verdict=Verdict.PASS if all(r.passed for r in live) else Verdict.FAIL,
        reason=f"{sum(r.passed for r in live)}/{len(live)} sub-checks pass",
        vacuous=all(r.vacuous for r in live),
        detail={"sub": [r.as_dict() for r in reports]},
    )
    return out


def _density_inputs(*mus: Density, **kw) -> dict:
    out = {"lattice": mus[0].lattice.hash, "densities": [m.hash for m in mus]}
    out.update(kw)
    return out


def _truncation(mu: Density) -> float:
    return float(mu.ref.max_tail_mass)


# ---------------------------------------------------------------- closed-form checks


def check_mlsi(mu: Density) -> VerificationReport:
    """``H(mu) <= I(mu)``."""
    H, I = entropy(mu), fisher(mu)
    return judge("mlsi", _density_inputs(mu), H, I, {"roundoff": ROUNDOFF}, vacuous=bool(np.isinf(I)))


def check_exp_decay(mu: Density, t_grid) -> VerificationReport:
    """``H(P*_t mu) <= e^{-t} H(mu)`` at every grid time."""
    H0 = entropy(mu)
    subs = []
    for t in np.asarray(t_grid, dtype=float):
        Ht = entropy(evolve(mu, t))
        subs.append(judge(f"exp_decay[t={t!r}]", _density_inputs(mu, t=t), Ht, np.exp(-t) * H0, {"roundoff": ROUNDOFF}))
    return combine("exp_decay", subs, _density_inputs(mu, t_grid=list(map(float, t_grid))))


def _entropy_along(mu: Density, t: float) -> float:
    return entropy(evolve(mu, t))


def _fisher_along(mu: Density, t: float) -> float:
    return fisher(evolve(mu, t))


def check_de_bruijn(mu: Density, t_grid, h: float = 1e-3, rel_tol: float = 1e-3) -> VerificationReport:
    """Pointwise form ``d/dt H(P*_t mu) = -I(P*_t mu)`` by central differences.

    The relative error at each grid time is compared with ``rel_tol``; the
    constant ``C = error / h^2`` is recorded per grid point.
    """
    subs = []
    for t in np.asarray(t_grid, dtype=float):
        if t - h <= 0:
            subs.append(VerificationReport(f"de_bruijn[t={t!r}]", {"t": t}, np.nan, np.nan, verdict=Verdict.SKIPPED, reason="t - h must be > 0"))
            continue
        dH = (_entropy_along(mu, t + h) - _entropy_along(mu, t - h)) / (2 * h)
        I = _fisher_along(mu, t)
        if I == 0:
            err = abs(dH)
        else:
            err = abs(dH + I) / I
        subs.append(
            judge(
                f"de_bruijn[t={t!r}]",
                _density_inputs(mu, t=t, h=h),
                err,
                0.0,
                {"finite_difference": rel_tol},
                detail={"dH_dt": dH, "fisher": I, "C": err / h**2},
            )
        )
    return combine("de_bruijn", subs, _density_inputs(mu, t_grid=list(map(float, t_grid)), h=h))


def check_de_bruijn_integrated(mu: Density, T: float = 1.0, nodes: int = 200, rel_tol: float = 1e-4) -> VerificationReport:
    """``H(mu) - H(P*_T mu)`` against Simpson quadrature of ``I(P*_s mu)`` over ``[0, T]``.

    The substitution ``s = T u^2`` tames the logarithmic blow-up of the Fisher
    information at ``s = 0`` for densities that vanish somewhere.
    """
    u = np.linspace(0.0, 1.0, nodes + 1)
    vals = np.zeros_like(u)
    for i, ui in enumerate(u[1:], start=1):
        vals[i] = 2.0 * T * ui * _fisher_along(mu, T * ui * ui)
    if mu.strictly_positive:
        vals[0] = 0.0
    integral = float(simpson(vals, x=u))
    drop = entropy(mu) - _entropy_along(mu, T)
    err = abs(drop - integral) / max(abs(drop), 1e-300)
    return judge(
        "de_bruijn_integrated",
        _density_inputs(mu, T=T, nodes=nodes),
        err,
        0.0,
        {"discretization": rel_tol},
        detail={"entropy_drop": drop, "fisher_integral": integral},
    )


def check_be(sites: SiteSpace, F_samples, t_grid, margin: int = 4, killed: bool = True) -> VerificationReport:
    """``D P_t F = e^{-t} P_t D F`` on edges at least ``margin`` levels below the caps."""
    from .config_space import poisson_reference, build_lattice

    tail = float(poisson_reference(build_lattice(sites)).max_tail_mass)
    tol = {"truncation": max(1e-8, 10 * tail)}
    subs = []
    for t in np.asarray(t_grid, dtype=float):
        worst = max(be_commutation_residual(sites, F, t, margin=margin, killed=killed) for F in F_samples)
        subs.append(judge(f"be[t={t!r}]", {"lattice": sites.hash, "t": t, "margin": margin}, worst, 0.0, tol))
    return combine("be", subs, {"lattice": sites.hash, "margin": margin, "killed": killed, "samples": len(F_samples)})


# ---------------------------------------------------------------- solver-based checks


@dataclass(frozen=True)
class Estimate:
    """A refined solver value of ``W^2`` with its error allowances."""

    value: float
    delta: float
    slack: float
    report: SolverReport
    path: object

    @property
    def W(self) -> float:
        return float(np.sqrt(max(self.value, 0.0)))


def estimate_w2(mu0: Density, mu1: Density, cfg: SolverConfig = SolverConfig(), ladder=DEFAULT_LADDER) -> Estimate:
    if np.array_equal(mu0.rho, mu1.rho):
        v, p, r = solve_distance(mu0, mu1, replace(cfg, K=ladder[-1]))
        return Estimate(0.0, 0.0, 0.0, r, p)
    rep, path = refine_with_path(mu0, mu1, ladder, cfg)
    delta = discretization_gap(rep) if len(ladder) > 1 else 0.0
    return Estimate(rep.objective, float(delta), float(rep.slack), rep, path)


def _estimate_parts(est: Estimate, scale: float = 1.0) -> dict:
    return {"discretization": scale * est.delta, "solver": scale * est.slack}


def check_talagrand(mu: Density, cfg: SolverConfig = SolverConfig(), ladder=DEFAULT_LADDER) -> VerificationReport:
    """``W^2(mu, pi) <= H(mu)`` with the refined solver estimate on the left."""
    pi = Density.reference(mu.ref)
    est = estimate_w2(mu, pi, cfg, ladder)
    if not np.isfinite(est.value):
        return VerificationReport("talagrand", _density_inputs(mu), np.nan, np.nan, verdict=Verdict.SKIPPED, reason="solver returned inf")
    return judge(
        "talagrand",
        _density_inputs(mu, ladder=list(ladder)),
        est.value,
        entropy(mu),
        _estimate_parts(est) | {"truncation": _truncation(mu)},
        detail={"refinement": est.report.refinement, "extrapolate": est.report.extrapolate, "ratio": est.value / max(entropy(mu), 1e-300)},
    )


def ou_length(mu: Density, T: float = np.inf) -> float:
    """``int_0^T I(P*_t mu)^{1/2} dt`` by adaptive quadrature (``s = u^2`` near the origin)."""

    def near(u):
        return 0.0 if u == 0 else 2.0 * u * np.sqrt(_fisher_along(mu, u * u))

    head, _ = quad(near, 0.0, 1.0, limit=200, epsabs=1e-12, epsrel=1e-11)
    if T <= 1.0:
        return float(quad(near, 0.0, np.sqrt(T), limit=200, epsabs=1e-12, epsrel=1e-11)[0])
    # beyond t = 40 the remaining length is below e^{-40} times the initial scale
    tail_end = min(T, 40.0)
    tail, _ = quad(lambda t: np.sqrt(_fisher_along(mu, t)), 1.0, tail_end, limit=400, epsabs=1e-12, epsrel=1e-11)
    return float(head + tail)


def check_talagrand_ou_route(mu: Density, tol: float = 1e-6) -> VerificationReport:
    """``(int_0^inf I(P*_t mu)^{1/2} dt)^2 <= H(mu)``: the bound obtained by measuring the flow's length."""
    L = ou_length(mu)
    return judge("talagrand_ou_route", _density_inputs(mu), L * L, entropy(mu), {"discretization": tol}, detail={"ou_length": L})


def check_action_contraction(path, eps_grid, tol: float = 1e-10) -> VerificationReport:
    """``A(push(path, eps)) <= e^{-2 eps} A(path)`` for a given path."""
    A = action(path)
    subs = []
    for eps in np.asarray(eps_grid, dtype=float):
        Ap = action(push_semigroup(path, eps))
        subs.append(judge(f"action_contraction[eps={eps!r}]", {"eps": eps}, Ap, np.exp(-2 * eps) * A, {"roundoff": tol}))
    return combine("action_contraction", subs, {"lattice": path.ref.lattice.hash, "K": path.K, "eps_grid": list(map(float, eps_grid))})


def check_contraction(mu0: Density, mu1: Density, t_grid, cfg: SolverConfig = SolverConfig(), ladder=DEFAULT_LADDER) -> VerificationReport:
    """Two layers of ``W(P*_t mu0, P*_t mu1) <= e^{-t} W(mu0, mu1)``.

    (a) the action of the pushed optimal path against ``e^{-2t}`` times its
    action; (b) independent solves at both ends, with the refinement and
    solver allowances of both estimates.
    """
    base = estimate_w2(mu0, mu1, cfg, ladder)
    layer_a = check_action_contraction(base.path, t_grid)
    subs_b = []
    for t in np.asarray(t_grid, dtype=float):
        est_t = estimate_w2(evolve(mu0, t), evolve(mu1, t), cfg, ladder)
        rhs = np.exp(-t) * base.W
        # first-order propagation of W^2 allowances to W
        sens_t = 0.5 / max(est_t.W, 1e-12)
        sens_0 = 0.5 * np.exp(-t) / max(base.W, 1e-12)
        tol = {
            "discretization": sens_t * est_t.delta + sens_0 * base.delta,
            "solver": sens_t * est_t.slack + sens_0 * base.slack,
        }
        subs_b.append(judge(f"contraction[t={t!r}]", {"t": t}, est_t.W, rhs, tol))
    layer_b = combine("contraction_solver", subs_b)
    out = combine("contraction", [layer_a, layer_b], _density_inputs(mu0, mu1, t_grid=list(map(float, t_grid))))
    out.detail["layer_a"] = layer_a.as_dict()
    out.detail["layer_b"] = layer_b.as_dict()
    return out


def _fd_derivative(f, s: float, h: float):
    """Central difference at ``s`` with a Richardson error estimate from step ``2h``."""
    d_h = (f(s + h) - f(s - h)) / (2 * h)
    d_2h = (f(s + 2 * h) - f(s - 2 * h)) / (4 * h)
    return d_h, abs(d_h - d_2h) / 3.0


def check_evi(mu: Density, xi: Density, s_grid, h: float = 0.02, cfg: SolverConfig = SolverConfig(K=32)) -> VerificationReport:
    """``H(P*_s mu) + 1/2 d/ds W^2(P*_s mu, xi) + 1/2 W^2(P*_s mu, xi) <= H(xi)``.

    ``W^2`` is evaluated at fixed ``K`` (warm-started along ``s``), the
    derivative by central differences. The allowance is the Richardson estimate
    of the difference quotient plus ``2 * solver slack / h`` plus half the
    refinement gap of ``W^2`` at the node.
    """
    cache: dict[float, tuple[float, SolverReport]] = {}

    def w2(s):
        key = round(float(s), 12)
        if key not in cache:
            v, _, r = solve_distance(evolve(mu, s), xi, cfg)
            if not r.converged and not np.isfinite(v):
                raise RuntimeError(f"solver failed at s={s}")
            cache[key] = (v, r)
        return cache[key][0]

    Hxi = entropy(xi)
    subs = []
    for s in np.asarray(s_grid, dtype=float):
        try:
            d, fd_err = _fd_derivative(w2, s, h)
            coarse, _, _ = solve_distance(evolve(mu, s), xi, replace(cfg, K=cfg.K // 2))
        except RuntimeError as exc:
            subs.append(VerificationReport(f"evi[s={s!r}]", {"s": s}, np.nan, np.nan, verdict=Verdict.SKIPPED, reason=str(exc)))
            continue
        W2s = w2(s)
        slack = max(cache[round(float(x), 12)][1].slack for x in (s - h, s, s + h))
        lhs = entropy(evolve(mu, s)) + 0.5 * d + 0.5 * W2s
        tol = {
            "finite_difference": 0.5 * fd_err,
            "solver": 2.0 * slack / h,
            "discretization": 0.5 * abs(W2s - coarse) / 3.0,
        }
        subs.append(judge(f"evi[s={s!r}]", {"s": s, "h": h}, lhs, Hxi, tol, detail={"W2": W2s, "dW2_ds": d}))
    return combine("evi", subs, _density_inputs(mu, xi, s_grid=list(map(float, s_grid)), h=h, K=cfg.K))


def check_geodesic_convexity(mu0: Density, mu1: Density, cfg: SolverConfig = SolverConfig(), ladder=DEFAULT_LADDER) -> VerificationReport:
    """``H(mu_t) <= (1 - t) H(mu_0) + t H(mu_1) - t (1 - t) W^2 / 2`` at the knots of the computed geodesic."""
    est = estimate_w2(mu0, mu1, cfg, ladder)
    path = est.path
    t = path.times
    H = np.array([entropy(path.density(k)) for k in range(path.K + 1)])
    subs = []
    for k in range(1, path.K):
        w = 0.5 * t[k] * (1 - t[k])
        rhs = (1 - t[k]) * H[0] + t[k] * H[-1] - w * est.value
        subs.append(judge(f"convexity[t={t[k]!r}]", {"t": float(t[k])}, H[k], rhs, _estimate_parts(est, w) | {"roundoff": ROUNDOFF}))
    if not subs:
        subs.append(judge("convexity[endpoints]", {}, H[0], H[0], {"roundoff": ROUNDOFF}))
    return combine("geodesic_convexity", subs, _density_inputs(mu0, mu1, ladder=list(ladder)))


def check_hwi(mu: Density, cfg: SolverConfig = SolverConfig(), ladder=DEFAULT_LADDER) -> VerificationReport:
    """``H(mu) <= W(mu, pi) I(mu)^{1/2} - W^2(mu, pi) / 2``.

    The right side is increasing in ``W`` on ``[0, I^{1/2}]``. With an upper
    estimate of ``W`` in that range the right side can only be overstated, by
    at most ``(I^{1/2} - W) dW``; that amount is part of the tolerance and
    ``W <= I^{1/2}`` is verified explicitly.
    """
    H, I = entropy(mu), fisher(mu)
    if np.isinf(I):
        return judge("hwi", _density_inputs(mu), H, np.inf, {}, vacuous=True, reason="infinite Fisher information")
    pi = Density.reference(mu.ref)
    est = estimate_w2(mu, pi, cfg, ladder)
    W = est.W
    sqrtI = np.sqrt(I)
    rhs = W * sqrtI - 0.5 * est.value
    dW = 0.5 * (est.delta + est.slack) / max(W, 1e-12)
    tol = {"discretization": abs(sqrtI - W) * dW, "roundoff": ROUNDOFF}
    rep = judge("hwi", _density_inputs(mu, ladder=list(ladder)), H, rhs, tol, detail={"W": W, "sqrt_fisher": sqrtI})
    if W > sqrtI + dW:
        rep.verdict = Verdict.SKIPPED
        rep.reason = "W estimate exceeds I^(1/2): monotone range argument does not apply"
    return rep


def check_speed_bound(mu: Density, xi: Density, t_grid, h: float = 0.02, cfg: SolverConfig = SolverConfig(K=32)) -> VerificationReport:
    """Forward difference of ``t -> W(P*_t mu, xi)`` against ``I(P*_t mu)^{1/2}``."""
    subs = []
    for t in np.asarray(t_grid, dtype=float):
        v0, _, r0 = solve_distance(evolve(mu, t), xi, cfg)
        v1, _, r1 = solve_distance(evolve(mu, t + h), xi, cfg)
        W0, W1 = np.sqrt(max(v0, 0)), np.sqrt(max(v1, 0))
        deriv = (W1 - W0) / h
        rhs = np.sqrt(_fisher_along(mu, t))
        # second-order remainder of the forward difference, estimated from the half step
        vh, _, _ = solve_distance(evolve(mu, t + h / 2), xi, cfg)
        half = (np.sqrt(max(vh, 0)) - W0) / (h / 2)
        W_sens = 0.5 / max(min(W0, W1), 1e-12)
        tol = {"finite_difference": abs(deriv - half), "solver": 2.0 * W_sens * max(r0.slack, r1.slack) / h}
        subs.append(judge(f"speed[t={t!r}]", {"t": t, "h": h}, deriv, rhs, tol))
    return combine("speed_bound", subs, _density_inputs(mu, xi, t_grid=list(map(float, t_grid)), h=h))


def check_descending_slope(mu: Density, xis, cfg: SolverConfig = SolverConfig(), ladder=DEFAULT_LADDER) -> VerificationReport:
    """Sampled slope bound ``(H(mu) - H(xi))_+ / W(mu, xi) <= I(mu)^{1/2}``.

    ``W`` sits in a denominator, so the solver's upper estimate can only make
    the left side smaller; the tolerance carries that sensitivity.
    """
    H, I = entropy(mu), fisher(mu)
    subs = []
    for xi in xis:
        gain = max(H - entropy(xi), 0.0)
        if gain == 0.0:
            subs.append(judge("slope[xi]", {"xi": xi.hash}, 0.0, np.sqrt(I), {"roundoff": ROUNDOFF}, vacuous=bool(np.isinf(I))))
            continue
        est = estimate_w2(mu, xi, cfg, ladder)
        ratio = gain / est.W
        # an overestimate of W by dW understates the ratio by about ratio * dW / W
        dW = 0.5 * (est.delta + est.slack) / est.W
        subs.append(judge("slope[xi]", {"xi": xi.hash}, ratio, np.sqrt(I), {"discretization": ratio * dW / est.W, "roundoff": ROUNDOFF}, vacuous=bool(np.isinf(I))))
    return combine("descending_slope", subs, _density_inputs(mu, n_samples=len(xis)))


def _estimate_entropic(mu0: Density, mu1: Density, eps: float, cfg: SolverConfig, ladder) -> Estimate:
    rep, path = refine_with_path(mu0, mu1, ladder, cfg, eps)
    delta = discretization_gap(rep) if len(ladder) > 1 else 0.0
    return Estimate(rep.objective, float(delta), float(rep.slack), rep, path)


def check_gamma_family(
    mu0: Density,
    mu1: Density,
    eps_grid=(1e-4, 1e-3, 1e-2, 1e-1),
    cfg: SolverConfig = SolverConfig(),
    ladder=DEFAULT_LADDER,
    gap_factor: float = 5.0,
) -> VerificationReport:
    """``eps -> J_eps`` is nondecreasing and ``J_eps_min - W^2 <= gap_factor * delta_K``.

    All costs are compared on the finest rung of the ladder, where each is the
    minimum of a family of functions increasing in ``eps``; the allowance for
    the monotonicity steps is the solver slack of both neighbours.
    """
    eps_grid = sorted(float(e) for e in eps_grid)
    base = estimate_w2(mu0, mu1, cfg, ladder)
    ests = [_estimate_entropic(mu0, mu1, e, cfg, ladder) for e in eps_grid]
    subs = []
    for (e0, a), (e1, b) in zip(zip(eps_grid, ests), zip(eps_grid[1:], ests[1:])):
        subs.append(judge(f"gamma_monotone[{e0!r}<{e1!r}]", {"eps": [e0, e1]}, a.value, b.value, {"solver": a.slack + b.slack, "roundoff": ROUNDOFF}))
    first = ests[0]
    subs.append(
        judge(
            f"gamma_gap[eps={eps_grid[0]!r}]",
            {"eps": eps_grid[0]},
            first.value - base.value,
            gap_factor * base.delta,
            {"solver": first.slack + base.slack, "roundoff": ROUNDOFF},
            detail={"J": first.value, "W2": base.value, "delta_K": base.delta},
        )
    )
    out = combine("gamma_family", subs, _density_inputs(mu0, mu1, eps_grid=eps_grid, ladder=list(ladder)))
    out.detail["curve"] = [[e, x.value] for e, x in zip(eps_grid, ests)]
    out.detail["W2"] = base.value
    return out


def check_entropic_triangle(
    mu0: Density, mu1: Density, mu2: Density, eps: float, cfg: SolverConfig = SolverConfig(), ladder=DEFAULT_LADDER
) -> VerificationReport:
    """Quasi-triangle inequality ``J(mu0, mu2) <= 2 J(mu0, mu1) + 2 J(mu1, mu2)``.

    Every cost is an upper estimate, so the right side may be overstated by the
    allowances of its two terms; those (doubled) form the tolerance.
    """
    a = _estimate_entropic(mu0, mu2, eps, cfg, ladder)
    b = _estimate_entropic(mu0, mu1, eps, cfg, ladder)
    c = _estimate_entropic(mu1, mu2, eps, cfg, ladder)
    tol = {
        "discretization": 2 * (b.delta + c.delta),
        "solver": 2 * (b.slack + c.slack),
        "roundoff": ROUNDOFF,
    }
    return judge(
        "entropic_triangle",
        _density_inputs(mu0, mu1, mu2, eps=eps, ladder=list(ladder)),
        a.value,
        2 * b.value + 2 * c.value,
        tol,
        detail={"J02": a.value, "J01": b.value, "J12": c.value},
    )


def check_triangle(mu0: Density, mu1: Density, mu2: Density, cfg: SolverConfig = SolverConfig(), ladder=DEFAULT_LADDER) -> VerificationReport:
    """``W(mu0, mu2) <= W(mu0, mu1) + W(mu1, mu2)`` with first-order allowances of the right side."""
    a, b, c = estimate_w2(mu0, mu2, cfg, ladder), estimate_w2(mu0, mu1, cfg, ladder), estimate_w2(mu1, mu2, cfg, ladder)

    def dW(e):
        return 0.5 * (e.delta + e.slack) / max(e.W, 1e-12) if e.value > 0 else 0.0

    return judge(
        "triangle",
        _density_inputs(mu0, mu1, mu2, ladder=list(ladder)),
        a.W,
        b.W + c.W,
        {"discretization": dW(b) + dW(c), "roundoff": ROUNDOFF},
        detail={"W02": a.W, "W01": b.W, "W12": c.W},
    )


def random_positive(ref, seed: int, a: float = 0.5, margin: int = 2) -> Density:
    """Test density ``rho ~ exp(g)`` with ``g`` uniform on ``[-a, a]`` on states ``margin`` levels below the caps."""
    return Density.exp_perturbed(ref, seed, a=a, margin=margin)
