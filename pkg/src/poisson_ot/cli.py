"""Batch front-end: ``poisson-ot <task> --scenario file.yaml --out dir``.

A scenario is a YAML mapping::

    lattice: {m: [1.0], cap: [8]}
    mu0: exp-perturbed:3,0.5          # poisson | dirac:<n1,..,nd> | exp-perturbed:<seed,a[,margin]> | file:<csv>
    mu1: poisson
    task: distance                     # distance | entropic:<eps[,eps..]> | geodesic | flow:<T,K> | verify:<checks> | suite
    solver: {K: 32, kkt_tol: 1.0e-8, ladder: [16, 32, 64]}
    checks:                            # for suite (and optional parameters for verify)
      - {name: mlsi, seeds: 10}

The subcommand overrides the task kind. Exit status: 0 when every verdict
passes (or the task does not verify anything), 1 when a check fails, 2 for a
malformed scenario, 3 for a numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .calculus import entropy, fisher
from .config_space import Density, ReferenceMeasure, density_from_csv, density_to_csv, poisson_reference, build_lattice, sites_from_mapping
from .continuity import ou_path, path_speed, path_to_csv
from .inequalities import (
    VerificationReport,
    Verdict,
    check_action_contraction,
    check_be,
    check_contraction,
    check_de_bruijn,
    check_de_bruijn_integrated,
    check_descending_slope,
    check_entropic_triangle,
    check_evi,
    check_exp_decay,
    check_gamma_family,
    check_geodesic_convexity,
    check_hwi,
    check_mlsi,
    check_speed_bound,
    check_talagrand,
    check_talagrand_ou_route,
    check_triangle,
    random_positive,
)
from .transport import InitMode, SolverConfig, geodesic, refine_with_path, solve_entropic, two_point_oracle

EXIT_OK, EXIT_FAIL, EXIT_PARSE, EXIT_NUMERIC = 0, 1, 2, 3
TASKS = ("distance", "entropic", "geodesic", "flow", "verify", "suite")


class ScenarioError(ValueError):
    """Malformed scenario; the message carries a location when one is known."""


class NumericFailure(RuntimeError):
    pass


@dataclass
class Scenario:
    ref: ReferenceMeasure
    mu0: Density | None
    mu1: Density | None
    task: str
    task_args: list[str]
    solver: SolverConfig
    ladder: tuple[int, ...]
    checks: list[dict] = field(default_factory=list)
    raw: dict = field(default_factory=dict)


# ---------------------------------------------------------------- parsing


def parse_measure(ref: ReferenceMeasure, entry: str, base: Path, seed_offset: int = 0) -> Density:
    entry = str(entry).strip()
    kind, _, arg = entry.partition(":")
    if kind == "poisson":
        return Density.reference(ref)
    if kind == "dirac":
        counts = tuple(int(v) for v in arg.split(",")) if arg else (0,) * ref.lattice.d
        return Density.dirac(ref, counts)
    if kind == "exp-perturbed":
        parts = [p for p in arg.split(",") if p]
        if not parts:
            raise ScenarioError(f"exp-perturbed needs a seed: {entry!r}")
        seed = int(parts[0]) + seed_offset
        a = float(parts[1]) if len(parts) > 1 else 0.5
        margin = int(parts[2]) if len(parts) > 2 else 2
        return random_positive(ref, seed, a=a, margin=margin)
    if kind == "file":
        path = (base / arg).resolve()
        if not path.exists():
            raise ScenarioError(f"measure file not found: {path}")
        return density_from_csv(ref, path.read_text())
    raise ScenarioError(f"unknown measure constructor {kind!r}")


def _solver_config(entry: dict, seed: int) -> tuple[SolverConfig, tuple[int, ...]]:
    entry = dict(entry or {})
    ladder = tuple(int(k) for k in entry.pop("ladder", (16, 32, 64)))
    floor = entry.pop("floor_schedule", None)
    allowed = {"K", "max_iters", "kkt_tol", "init"}
    unknown = set(entry) - allowed
    if unknown:
        raise ScenarioError(f"unknown solver keys: {sorted(unknown)}")
    kw = {k: entry[k] for k in allowed & set(entry)}
    if "init" in kw:
        kw["init"] = InitMode(kw["init"])
    if floor is not None:
        kw["floor_schedule"] = tuple(float(v) for v in floor)
    try:
        return SolverConfig(seed=seed, **kw), ladder
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid solver settings: {exc}") from exc


def load_scenario(path: Path, task_override: str | None = None, seed: int = 0) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioError(f"YAML error{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a mapping")
    if "lattice" not in raw:
        raise ScenarioError("scenario needs a 'lattice' entry")
    try:
        sites = sites_from_mapping(raw["lattice"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid lattice: {exc}") from exc
    ref = poisson_reference(build_lattice(sites))
    task_spec = str(task_override or raw.get("task", "")).strip()
    if task_override and raw.get("task"):
        # keep arguments such as entropic:<eps> when the subcommand names the same task
        kind_file = str(raw["task"]).partition(":")[0]
        if kind_file == task_override:
            task_spec = str(raw["task"])
    kind, _, arg = task_spec.partition(":")
    if kind not in TASKS:
        raise ScenarioError(f"unknown task {kind!r}; expected one of {TASKS}")
    base = Path(path).resolve().parent
    mu0 = parse_measure(ref, raw["mu0"], base, seed) if "mu0" in raw else None
    mu1 = parse_measure(ref, raw["mu1"], base, seed) if "mu1" in raw else None
    if kind in ("distance", "entropic", "geodesic") and (mu0 is None or mu1 is None):
        raise ScenarioError(f"task {kind} needs mu0 and mu1")
    if kind == "flow" and mu0 is None:
        raise ScenarioError("task flow needs mu0")
    solver, ladder = _solver_config(raw.get("solver"), seed)
    checks = raw.get("checks") or []
    if kind == "verify":
        names = [n.strip() for n in arg.split(",") if n.strip()]
        if not names:
            raise ScenarioError("verify needs a check list, e.g. verify:mlsi,hwi")
        params = {c["name"]: c for c in checks if isinstance(c, dict) and "name" in c}
        checks = [dict(params.get(n, {}), name=n) for n in names]
    if kind == "suite" and not checks:
        raise ScenarioError("suite needs a 'checks' list")
    for c in checks:
        if not isinstance(c, dict) or c.get("name") not in CHECKS:
            raise ScenarioError(f"unknown check entry {c!r}; known: {sorted(CHECKS)}")
    args = [a for a in arg.split(",") if a] if kind != "verify" else []
    return Scenario(ref, mu0, mu1, kind, args, solver, ladder, checks, raw)


# ---------------------------------------------------------------- checks registry


def _pairs(ref, c, seed):
    n = int(c.get("seeds", 1))
    a = float(c.get("a", 0.5))
    return [(random_positive(ref, seed + 2 * i, a=a), random_positive(ref, seed + 2 * i + 1, a=a)) for i in range(n)]


def _singles(ref, c, seed):
    n = int(c.get("seeds", 1))
    a = float(c.get("a", 0.5))
    return [random_positive(ref, seed + i, a=a) for i in range(n)]


def _one(fn):
    def run(sc: Scenario, c: dict, seed: int):
        mus = [sc.mu0] if c.get("use_mu0") and sc.mu0 is not None else _singles(sc.ref, c, seed)
        return [fn(sc, c, mu) for mu in mus]

    return run


def _two(fn):
    def run(sc: Scenario, c: dict, seed: int):
        if c.get("use_mu0") and sc.mu0 is not None and sc.mu1 is not None:
            pairs = [(sc.mu0, sc.mu1)]
        else:
            pairs = _pairs(sc.ref, c, seed)
        return [fn(sc, c, a, b) for a, b in pairs]

    return run


def _three(fn):
    def run(sc: Scenario, c: dict, seed: int):
        n = int(c.get("seeds", 1))
        a = float(c.get("a", 0.5))
        return [fn(sc, c, *(random_positive(sc.ref, seed + 3 * i + j, a=a) for j in range(3))) for i in range(n)]

    return run


def _grid(c, key, default):
    return [float(v) for v in c.get(key, default)]


def _cfg(sc: Scenario, c: dict) -> SolverConfig:
    return replace(sc.solver, K=int(c.get("K", sc.solver.K)))


CHECKS = {
    "mlsi": _one(lambda sc, c, mu: check_mlsi(mu)),
    "exp_decay": _one(lambda sc, c, mu: check_exp_decay(mu, _grid(c, "t_grid", [0.1, 0.5, 1, 2, 5]))),
    "de_bruijn": _one(lambda sc, c, mu: check_de_bruijn(mu, _grid(c, "t_grid", [0.5, 1.0]), float(c.get("h", 1e-3)))),
    "de_bruijn_integrated": _one(lambda sc, c, mu: check_de_bruijn_integrated(mu, float(c.get("T", 1.0)), int(c.get("nodes", 200)))),
    "talagrand": _one(lambda sc, c, mu: check_talagrand(mu, sc.solver, sc.ladder)),
    "talagrand_ou_route": _one(lambda sc, c, mu: check_talagrand_ou_route(mu)),
    "hwi": _one(lambda sc, c, mu: check_hwi(mu, sc.solver, sc.ladder)),
    "contraction": _two(lambda sc, c, a, b: check_contraction(a, b, _grid(c, "t_grid", [0.1, 0.5, 1.0]), sc.solver, sc.ladder)),
    "action_contraction": _one(
        lambda sc, c, mu: check_action_contraction(ou_path(mu, float(c.get("T", 1.0)), int(c.get("K", 32))), _grid(c, "eps_grid", [0.1, 0.5, 1.0]))
    ),
    "evi": _two(lambda sc, c, a, b: check_evi(a, b, _grid(c, "s_grid", [0.1, 0.2, 0.4]), float(c.get("h", 0.02)), _cfg(sc, c))),
    "geodesic_convexity": _two(lambda sc, c, a, b: check_geodesic_convexity(a, b, sc.solver, sc.ladder)),
    "speed_bound": _two(lambda sc, c, a, b: check_speed_bound(a, b, _grid(c, "t_grid", [0.1, 0.5]), float(c.get("h", 0.02)), _cfg(sc, c))),
    "descending_slope": _one(
        lambda sc, c, mu: check_descending_slope(
            mu, [random_positive(sc.ref, 10_000 + i, a=2.0) for i in range(int(c.get("samples", 3)))], sc.solver, sc.ladder
        )
    ),
    "gamma_family": _two(lambda sc, c, a, b: check_gamma_family(a, b, _grid(c, "eps_grid", [1e-4, 1e-3, 1e-2, 1e-1]), sc.solver, sc.ladder)),
    "entropic_triangle": _three(lambda sc, c, a, b, d: check_entropic_triangle(a, b, d, float(c.get("eps", 1e-2)), sc.solver, sc.ladder)),
    "triangle": _three(lambda sc, c, a, b, d: check_triangle(a, b, d, sc.solver, sc.ladder)),
    "be": lambda sc, c, seed: [
        check_be(
            sc.ref.sites,
            [np.random.default_rng(seed + i).normal(size=sc.ref.lattice.n_states) for i in range(int(c.get("seeds", 5)))],
            _grid(c, "t_grid", [0.1, 1.0, 5.0]),
            int(c.get("margin", 4)),
        )
    ],
}


# ---------------------------------------------------------------- artifacts


def _header(sc: Scenario) -> dict:
    return {"version": __version__, "lattice": sc.ref.lattice.hash, "sites": sc.ref.sites.describe()}


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _finite(x):
    x = float(x)
    return x if np.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")


def _write_path(out: Path, stem: str, path) -> None:
    dens, flux = path_to_csv(path)
    (out / f"{stem}_rho.csv").write_text(dens)
    (out / f"{stem}_flux.csv").write_text(flux)


def _report_dict(rep, deterministic: bool) -> dict:
    d = rep.as_dict()
    d["refinement"] = [[k, _finite(v)] for k, v in d["refinement"]]
    for key in ("objective", "kkt_residual", "stationarity", "feasibility", "extrapolate", "error_estimate", "slack", "order"):
        if d.get(key) is not None:
            d[key] = _finite(d[key])
    if not deterministic:
        d["wall_time"] = rep.wall_time
    return d


def _oracle(sc: Scenario, value: float) -> dict | None:
    sites = sc.ref.sites
    if sites.d != 1 or sites.cap[0] != 1:
        return None
    b0 = float(sc.mu0.probabilities[1])
    b1 = float(sc.mu1.probabilities[1])
    W = two_point_oracle(sites.m[0], b0, b1)
    return {"W": W, "W2": W * W, "relative_error": abs(value - W * W) / W**2 if W > 0 else abs(value)}


def run_distance(sc: Scenario, out: Path, deterministic: bool, eps: float = 0.0, stem: str = "distance") -> dict:
    rep, path = refine_with_path(sc.mu0, sc.mu1, sc.ladder, sc.solver, eps)
    if not np.isfinite(rep.objective):
        raise NumericFailure(f"solver returned {rep.objective} on the finest rung")
    best = rep.extrapolate if rep.extrapolate is not None else rep.objective
    result = _header(sc) | {
        "task": stem,
        "eps": eps,
        "value": _finite(rep.objective),
        "extrapolate": _finite(best),
        "W": _finite(np.sqrt(max(best, 0.0))),
        "report": _report_dict(rep, deterministic),
    }
    if eps == 0.0:
        oracle = _oracle(sc, best)
        if oracle is not None:
            result["oracle"] = oracle
    _write_path(out, stem, path)
    return result


def run_entropic(sc: Scenario, out: Path, deterministic: bool) -> dict:
    eps_list = [float(e) for e in sc.task_args] or [0.01]
    curve = []
    for eps in eps_list:
        val, path, rep = solve_entropic(sc.mu0, sc.mu1, eps, replace(sc.solver, K=sc.ladder[-1]))
        curve.append({"eps": eps, "J": _finite(val), "report": _report_dict(rep, deterministic)})
        _write_path(out, f"entropic_{len(curve) - 1}", path)
    return _header(sc) | {"task": "entropic", "curve": curve}


def run_geodesic(sc: Scenario, out: Path, deterministic: bool) -> dict:
    path = geodesic(sc.mu0, sc.mu1, replace(sc.solver, K=sc.ladder[-1]))
    speeds = path_speed(path)
    H = [entropy(path.density(k)) for k in range(path.K + 1)]
    _write_path(out, "geodesic", path)
    rep = dict(path.meta["report"])
    if deterministic:
        rep.pop("wall_time", None)
    return _header(sc) | {
        "task": "geodesic",
        "times": path.times.tolist(),
        "speed": [_finite(v) for v in speeds],
        "entropy": H,
        "flags": path.meta["flags"],
        "report": {k: (_finite(v) if isinstance(v, float) else v) for k, v in rep.items()},
    }


def run_flow(sc: Scenario, out: Path, deterministic: bool) -> dict:
    T = float(sc.task_args[0]) if sc.task_args else 1.0
    K = int(sc.task_args[1]) if len(sc.task_args) > 1 else 32
    path = ou_path(sc.mu0, T, K)
    H = [entropy(path.density(k)) for k in range(K + 1)]
    I = [_finite(fisher(path.density(k))) for k in range(K + 1)]
    _write_path(out, "flow", path)
    return _header(sc) | {"task": "flow", "T": T, "K": K, "t": path.times.tolist(), "H": H, "I": I}


def run_checks(sc: Scenario, out: Path, deterministic: bool, seed: int, threads: int) -> tuple[dict, list[VerificationReport]]:
    jobs = [(i, c) for i, c in enumerate(sc.checks)]

    def work(job):
        i, c = job
        return i, c, CHECKS[c["name"]](sc, c, seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    rep_dir = out / "reports"
    rep_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    flat = []
    for i, c, reps in results:
        for j, r in enumerate(reps):
            name = f"{i:02d}_{c['name']}_{j:03d}"
            _dump_json(rep_dir / f"{name}.json", _header(sc) | {"check": c, "report": r.as_dict()})
            rows.append([name, c["name"], repr(float(r.slack)), repr(float(r.tolerance)), r.verdict.value])
            flat.append(r)
    buf = io.StringIO()
    buf.write(f"# lattice {sc.ref.lattice.hash} version {__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["report", "check", "slack", "tolerance", "verdict"])
    w.writerows(rows)
    (out / "summary.csv").write_text(buf.getvalue())
    counts = {v.value: sum(r.verdict is v for r in flat) for v in Verdict}
    return _header(sc) | {"task": sc.task, "counts": counts}, flat


# ---------------------------------------------------------------- plot data


def emit_plot_data(out: Path) -> list[Path]:
    """Long-format CSVs from the ``result.json`` found in ``out``."""
    src = out / "result.json"
    if not src.exists():
        raise FileNotFoundError(f"no result.json in {out}")
    res = json.loads(src.read_text())
    head = f"# lattice {res['lattice']} version {res['version']}\n"
    written = []

    def emit(name, cols, rows, flags=None):
        buf = io.StringIO()
        buf.write(head)
        if flags:
            buf.write("# " + " ".join(f"{k} {v}" for k, v in flags.items()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerows(rows)
        p = out / name
        p.write_text(buf.getvalue())
        written.append(p)

    task = res["task"]
    if task == "flow":
        emit("plot_flow.csv", ["t", "H", "I"], [[repr(t), repr(h), repr(i) if isinstance(i, float) else i] for t, h, i in zip(res["t"], res["H"], res["I"])])
    elif task == "geodesic":
        emit("plot_speed.csv", ["k", "speed"], [[k, repr(v) if isinstance(v, float) else v] for k, v in enumerate(res["speed"])])
    elif task == "entropic":
        rows = sorted(((c["eps"], c["J"]) for c in res["curve"]), key=lambda r: r[0])
        vals = [j for _, j in rows if isinstance(j, float)]
        mono = all(b >= a for a, b in zip(vals, vals[1:]))
        emit("plot_gamma.csv", ["eps", "J"], [[repr(e), repr(j) if isinstance(j, float) else j] for e, j in rows], {"nondecreasing": mono})
    elif task in ("distance",) or task.startswith("distance"):
        table = res["report"]["refinement"]
        vals = [v for _, v in table if isinstance(v, float)]
        diffs = np.diff(vals)
        mono = bool(np.all(diffs >= 0) or np.all(diffs <= 0))
        emit("plot_refinement.csv", ["K", "W2"], [[k, repr(v) if isinstance(v, float) else v] for k, v in table], {"monotone": mono})
    else:
        raise ValueError(f"no plot data defined for task {task!r}")
    return written


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poisson-ot", description="Transport distances and functional inequalities on truncated Poisson lattices.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in TASKS + ("plotdata",):
        s = sub.add_parser(name)
        if name != "plotdata":
            s.add_argument("--scenario", required=True, type=Path)
        s.add_argument("--out", required=True, type=Path)
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--deterministic", action="store_true")
        s.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out: Path = args.out
    if args.command == "plotdata":
        try:
            for p in emit_plot_data(out):
                print(p)
        except (FileNotFoundError, KeyError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_PARSE
        return EXIT_OK
    try:
        sc = load_scenario(args.scenario, args.command, args.seed)
    except (ScenarioError, ValueError) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    try:
        if sc.task == "distance":
            result = run_distance(sc, out, args.deterministic)
            line = f"W2 = {result['extrapolate']!r}  W = {result['W']!r}"
            if "oracle" in result:
                line += f"  oracle W2 = {result['oracle']['W2']!r}  rel. error = {result['oracle']['relative_error']:.3e}"
            print(line)
        elif sc.task == "entropic":
            result = run_entropic(sc, out, args.deterministic)
            for c in result["curve"]:
                print(f"eps = {c['eps']!r}  J = {c['J']!r}")
        elif sc.task == "geodesic":
            result = run_geodesic(sc, out, args.deterministic)
            print(f"geodesic with {len(result['speed'])} intervals written to {out}")
        elif sc.task == "flow":
            result = run_flow(sc, out, args.deterministic)
            print(f"flow with K = {result['K']} written to {out}")
        else:
            result, reports = run_checks(sc, out, args.deterministic, args.seed, args.threads)
            for name, n in result["counts"].items():
                print(f"{name}: {n}")
            if any(r.verdict is Verdict.FAIL for r in reports):
                status = EXIT_FAIL
    except (NumericFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        _dump_json(out / "result.json", _header(sc) | {"task": sc.task, "error": str(exc)})
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _dump_json(out / "result.json", result)
    if sc.mu0 is not None:
        (out / "mu0.csv").write_text(density_to_csv(sc.mu0))
    if sc.mu1 is not None:
        (out / "mu1.csv").write_text(density_to_csv(sc.mu1))
    return status


if __name__ == "__main__":
    sys.exit(main())
