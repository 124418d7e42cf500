import csv
import json
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from poisson_ot import __version__, cli
from poisson_ot.config_space import Density, density_to_csv, poisson_space
from poisson_ot.continuity import path_from_csv
from poisson_ot.transport import two_point_oracle


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


TWO_POINT = """\
    lattice: {m: 1.0, cap: 1}
    mu0: dirac:0
    mu1: dirac:1
    task: distance
    """

PAIR = """\
    lattice: {m: [1.0], cap: [6]}
    mu0: exp-perturbed:1,0.8
    mu1: poisson
    task: distance
    solver: {K: 16, ladder: [8, 16, 32]}
    """

SUITE = """\
    lattice: {m: 1.0, cap: 6}
    task: suite
    solver: {ladder: [8, 16, 32]}
    checks:
      - {name: mlsi, seeds: 3}
      - {name: exp_decay, seeds: 2}
      - {name: be, seeds: 2}
      - {name: geodesic_convexity, seeds: 1}
    """


def run(argv):
    return cli.main([str(a) for a in argv])


def test_distance_two_point(tmp_path, capsys):
    sc = write(tmp_path, "s.yaml", TWO_POINT)
    assert run(["distance", "--scenario", sc, "--out", tmp_path / "o", "--deterministic"]) == cli.EXIT_OK
    res = json.loads((tmp_path / "o" / "result.json").read_text())
    assert res["version"] == __version__
    assert res["lattice"] == poisson_space([1.0], [1]).lattice.hash
    assert res["oracle"]["W2"] == pytest.approx(two_point_oracle(1.0, 0.0, 1.0) ** 2, rel=1e-12)
    assert res["oracle"]["relative_error"] < 1e-3
    assert "wall_time" not in res["report"]
    assert "oracle W2" in capsys.readouterr().out


def test_distance_writes_path_artifacts(tmp_path):
    sc = write(tmp_path, "s.yaml", PAIR)
    out = tmp_path / "o"
    assert run(["distance", "--scenario", sc, "--out", out]) == 0
    ref = poisson_space([1.0], [6])
    path = path_from_csv(ref, (out / "distance_rho.csv").read_text(), (out / "distance_flux.csv").read_text())
    assert path.K == 32
    res = json.loads((out / "result.json").read_text())
    assert "wall_time" in res["report"]
    assert res["report"]["refinement"][-1][1] == pytest.approx(res["value"])


def test_file_measure(tmp_path):
    ref = poisson_space([1.0], [6])
    mu = Density.exp_perturbed(ref, 9, a=0.3)
    (tmp_path / "mu.csv").write_text(density_to_csv(mu))
    sc = write(tmp_path, "s.yaml", PAIR.replace("mu1: poisson", "mu1: file:mu.csv"))
    out = tmp_path / "o"
    assert run(["distance", "--scenario", sc, "--out", out]) == 0
    assert (out / "mu1.csv").read_text() == density_to_csv(mu)


def test_entropic_and_plotdata(tmp_path):
    sc = write(tmp_path, "s.yaml", PAIR.replace("task: distance", "task: entropic:0.1,0.0,0.01"))
    out = tmp_path / "o"
    assert run(["entropic", "--scenario", sc, "--out", out, "--deterministic"]) == 0
    assert run(["plotdata", "--out", out]) == 0
    lines = (out / "plot_gamma.csv").read_text().splitlines()
    assert lines[1] == "# nondecreasing True"
    rows = list(csv.reader(lines[2:]))
    assert rows[0] == ["eps", "J"]
    eps = [float(r[0]) for r in rows[1:]]
    assert eps == sorted(eps)


def test_geodesic_and_plotdata(tmp_path):
    sc = write(tmp_path, "s.yaml", PAIR)
    out = tmp_path / "o"
    assert run(["geodesic", "--scenario", sc, "--out", out]) == 0
    assert run(["plotdata", "--out", out]) == 0
    rows = list(csv.reader((out / "plot_speed.csv").read_text().splitlines()[1:]))
    speeds = np.array([float(r[1]) for r in rows[1:]])
    assert len(speeds) == 32 and np.ptp(speeds) < 0.05 * speeds.mean()


def test_flow_and_plotdata(tmp_path):
    sc = write(tmp_path, "s.yaml", PAIR.replace("task: distance", "task: flow:2.0,8"))
    out = tmp_path / "o"
    assert run(["flow", "--scenario", sc, "--out", out]) == 0
    assert run(["plotdata", "--out", out]) == 0
    rows = list(csv.reader((out / "plot_flow.csv").read_text().splitlines()[1:]))
    assert rows[0] == ["t", "H", "I"]
    H = [float(r[1]) for r in rows[1:]]
    assert len(H) == 9 and np.all(np.diff(H) < 0)


def test_refinement_plotdata(tmp_path):
    sc = write(tmp_path, "s.yaml", TWO_POINT)
    out = tmp_path / "o"
    run(["distance", "--scenario", sc, "--out", out])
    assert run(["plotdata", "--out", out]) == 0
    lines = (out / "plot_refinement.csv").read_text().splitlines()
    assert lines[1] == "# monotone True" and lines[2] == "K,W2"


def test_plotdata_without_artifacts(tmp_path):
    assert run(["plotdata", "--out", tmp_path]) == cli.EXIT_PARSE


def test_suite_summary(tmp_path):
    sc = write(tmp_path, "s.yaml", SUITE)
    out = tmp_path / "o"
    assert run(["suite", "--scenario", sc, "--out", out, "--deterministic"]) == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0].startswith("# lattice ")
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 3 + 2 + 1 + 1
    assert {r["verdict"] for r in rows} == {"PASS"}
    for r in rows:
        rep = json.loads((out / "reports" / f"{r['report']}.json").read_text())
        assert rep["report"]["verdict"] == r["verdict"]
        assert float(r["tolerance"]) == pytest.approx(rep["report"]["tolerance"])


def test_suite_is_deterministic_across_threads(tmp_path):
    sc = write(tmp_path, "s.yaml", SUITE)
    outs = []
    for i, threads in enumerate((1, 3)):
        out = tmp_path / f"o{i}"
        run(["suite", "--scenario", sc, "--out", out, "--deterministic", "--threads", threads])
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_seed_changes_instances(tmp_path):
    sc = write(tmp_path, "s.yaml", SUITE)
    run(["suite", "--scenario", sc, "--out", tmp_path / "a", "--deterministic"])
    run(["suite", "--scenario", sc, "--out", tmp_path / "b", "--deterministic", "--seed", 7])
    assert (tmp_path / "a" / "summary.csv").read_text() != (tmp_path / "b" / "summary.csv").read_text()


def test_verify_failure_exit_code(tmp_path):
    sc = write(
        tmp_path,
        "s.yaml",
        """\
        lattice: {m: 1.0, cap: 10}
        mu0: dirac:0
        task: verify:talagrand_ou_route
        checks:
          - {name: talagrand_ou_route, use_mu0: true}
        """,
    )
    assert run(["verify", "--scenario", sc, "--out", tmp_path / "o"]) == cli.EXIT_FAIL


def test_verify_pass(tmp_path):
    sc = write(tmp_path, "s.yaml", "lattice: {m: 1.0, cap: 6}\ntask: verify:mlsi,exp_decay\n")
    assert run(["verify", "--scenario", sc, "--out", tmp_path / "o"]) == cli.EXIT_OK


@pytest.mark.parametrize(
    "text,message",
    [
        ("lattice: {m: 1.0, cap: [3\ntask: distance\n", "line 2, column"),
        ("- 1\n- 2\n", "mapping"),
        ("task: distance\n", "lattice"),
        ("lattice: {m: 1.0, cap: 3}\nmu0: poisson\ntask: distance\n", "needs mu0 and mu1"),
        ("lattice: {m: 1.0, cap: 3}\nmu0: gauss\nmu1: poisson\ntask: distance\n", "unknown measure"),
        ("lattice: {m: -1.0, cap: 3}\ntask: suite\n", "invalid lattice"),
        ("lattice: {m: 1.0, cap: 3}\ntask: suite\nchecks: [{name: nope}]\n", "unknown check"),
        ("lattice: {m: 1.0, cap: 3}\ntask: verify\n", "check list"),
        ("lattice: {m: 1.0, cap: 3}\nmu0: poisson\nmu1: poisson\ntask: distance\nsolver: {K: 0}\n", "solver"),
        ("lattice: {m: 1.0, cap: 3}\nmu0: poisson\nmu1: poisson\ntask: distance\nsolver: {speed: 3}\n", "unknown solver keys"),
    ],
)
def test_parse_errors(tmp_path, capsys, text, message):
    sc = write(tmp_path, "s.yaml", text)
    cmd = text.split("task: ")[1].split(":")[0].split("\n")[0] if "task: " in text else "suite"
    cmd = cmd if cmd in cli.TASKS else "distance"
    assert run([cmd, "--scenario", sc, "--out", tmp_path / "o"]) == cli.EXIT_PARSE
    assert message in capsys.readouterr().err


def test_unknown_task_in_file(tmp_path):
    sc = write(tmp_path, "s.yaml", "lattice: {m: 1.0, cap: 3}\ntask: teleport\n")
    with pytest.raises(cli.ScenarioError, match="unknown task"):
        cli.load_scenario(sc)


def test_subcommand_keeps_task_arguments(tmp_path):
    sc = write(tmp_path, "s.yaml", PAIR.replace("task: distance", "task: entropic:0.5,0.25"))
    assert cli.load_scenario(sc, "entropic").task_args == ["0.5", "0.25"]
    assert cli.load_scenario(sc, "distance").task == "distance"


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise cli.NumericFailure("objective is inf")

    monkeypatch.setattr(cli, "run_distance", boom)
    sc = write(tmp_path, "s.yaml", PAIR)
    out = tmp_path / "o"
    assert run(["distance", "--scenario", sc, "--out", out]) == cli.EXIT_NUMERIC
    assert "inf" in json.loads((out / "result.json").read_text())["error"]


def test_console_entry_point(tmp_path):
    sc = write(tmp_path, "s.yaml", TWO_POINT)
    proc = subprocess.run(
        [sys.executable, "-m", "poisson_ot.cli", "distance", "--scenario", str(sc), "--out", str(tmp_path / "o")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "W2 =" in proc.stdout


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out
