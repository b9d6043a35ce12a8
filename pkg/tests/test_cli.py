"""Command-line entry points, one smoke path per verb plus the exit codes."""

import json

import numpy as np
import pytest

from kaclab.branching import Environment
from kaclab.cli import main
from kaclab.core import EmpiricalMeasure
from kaclab.experiments import ExperimentConfig
from kaclab.sampling import law_by_name, rescale, sample_empirical


def shell_measure(n, seed):
    law = law_by_name("gaussian", 3)
    rng = np.random.default_rng(seed)
    return rescale(sample_empirical(law, n, rng)).as_measure()


def run_cli(capsys, *argv):
    rc = main(list(argv))
    return rc, json.loads(capsys.readouterr().out)


def test_help_and_missing_verb():
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2


def test_simulate_writes_event_log(tmp_path, capsys):
    out = tmp_path / "events.jsonl"
    rc, report = run_cli(capsys, "simulate", "--n", "32", "--T", "0.3",
                         "--seed", "3", "--out", str(out))
    assert rc == 0
    assert report["n"] == 32 and report["d"] == 3
    assert report["momentum_error"] <= 1e-8
    assert report["energy_error"] <= 1e-8
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + report["n_events"]
    head = json.loads(lines[0])
    assert head["n"] == 32 and "git_describe" in head


def test_simulate_accepts_measure_file(tmp_path, capsys):
    mu = EmpiricalMeasure(np.random.default_rng(0).standard_normal((16, 3)),
                          np.full(16, 1.0 / 16))
    src = tmp_path / "init.json"
    mu.save(src)
    rc, report = run_cli(capsys, "simulate", "--init", str(src),
                         "--T", "0.2", "--seed", "1")
    assert rc == 0 and report["n"] == 16

    weights = np.full(16, 1.0 / 16)
    weights[0], weights[1] = 0.12, 2.0 / 16 - 0.12
    bad = EmpiricalMeasure(mu.atoms, weights)
    bad_src = tmp_path / "bad.json"
    bad.save(bad_src)
    with pytest.raises(SystemExit, match="uniform"):
        main(["simulate", "--init", str(bad_src)])


def test_wdist_exact_subsampled_and_relaxed(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    shell_measure(8, 1).save(a)
    shell_measure(12, 2).save(b)

    rc, report = run_cli(capsys, "wdist", "--a", str(a), "--b", str(b))
    assert rc == 0
    assert report["method"] == "exact"
    assert 0.0 < report["value"] <= 4.0

    rc, report = run_cli(capsys, "wdist", "--a", str(a), "--b", str(a))
    assert rc == 0 and report["value"] == 0.0

    rc, report = run_cli(capsys, "wdist", "--a", str(a), "--b", str(b),
                         "--subsample", "6,10", "--seed", "4")
    assert rc == 0
    assert report["method"].startswith("subsampled")
    assert report["stderr"] >= 0.0 and "biased" in report["note"]

    # raw (off-shell) inputs only pass through the relaxed comparison
    raw = tmp_path / "raw.json"
    EmpiricalMeasure(np.random.default_rng(5).standard_normal((10, 3)),
                     np.full(10, 0.1)).save(raw)
    rc, report = run_cli(capsys, "wdist", "--a", str(raw), "--b", str(b),
                         "--relaxed")
    assert rc == 0 and report["value"] > 0.0


def test_branch_verb(tmp_path, capsys):
    env = Environment.frozen(shell_measure(12, 6), horizon=0.8)
    env_file = tmp_path / "env.json"
    env.save(env_file)
    rc, report = run_cli(capsys, "branch", "--env", str(env_file),
                         "--v0", "0.5,0.2,0.0", "--reps", "60", "--seed", "2")
    assert rc == 0
    assert report["t"] == 0.8            # defaults to the environment horizon
    assert report["n_rep"] == 60 and not report["flagged"]
    assert np.isfinite(report["mean"]) and report["stderr"] >= 0.0
    assert report["f"] == "gauss_bump"


def test_branch_from_path_and_cap_exit_code(tmp_path, capsys):
    events = tmp_path / "events.jsonl"
    rc, _ = run_cli(capsys, "simulate", "--n", "24", "--T", "0.4",
                    "--seed", "8", "--out", str(events))
    assert rc == 0

    rc, report = run_cli(capsys, "branch", "--env", f"from-path:{events}",
                         "--v0", "0.3,0.0,0.1", "--t", "0.2",
                         "--reps", "40", "--seed", "3")
    assert rc == 0 and report["n_capped"] == 0

    # a 2-atom cap is exceeded by the first branching event
    rc, report = run_cli(capsys, "branch", "--env", f"from-path:{events}",
                         "--v0", "0.3,0.0,0.1", "--t", "0.4",
                         "--reps", "50", "--cap", "2", "--seed", "3")
    assert rc == 1
    assert report["flagged"] and report["n_capped"] > 0


def test_tv_check_verb(tmp_path, capsys):
    flow = tmp_path / "flow.json"
    flow.write_text(json.dumps({"mu0": [-1.0], "nu": [[1.0]] * 20,
                                "horizon": 2.0}))
    rc, report = run_cli(capsys, "tv-check", "--flow", str(flow))
    assert rc == 0
    assert report["within_bound"]
    assert report["lhs"] == pytest.approx(1.0)
    assert report["crossings"] == 2

    rc, report = run_cli(capsys, "tv-check", "--flow", str(flow),
                         "--dt", "0.05")
    assert rc == 0 and report["dt"] == 0.05


def test_experiment_verbs_write_reports(tmp_path, capsys):
    cases = [
        (["sampling-rate", "--Ns", "8,16", "--reps", "3",
          "--n-reference", "200", "--seed", "4"], "rate.png"),
        (["consistency", "--Ns", "8,16", "--T", "0.15", "--reps", "2",
          "--grid-points", "3", "--seed", "5"], "consistency.png"),
        (["moments", "--Ns", "12", "--qs", "2,4", "--p", "4",
          "--law", "two-point", "--T", "0.2", "--grid-points", "3",
          "--reps", "2", "--seed", "6"], "moments.png"),
        (["boltzmann-proxy", "--Ns", "8,16", "--T", "0.2", "--tau", "0.1",
          "--grid-points", "3", "--reps", "2", "--seed", "7"],
         "consistency.png"),
    ]
    for argv, figure_name in cases:
        outdir = tmp_path / argv[0]
        rc, summary = run_cli(capsys, *argv, "--log-events", "none",
                              "--out", str(outdir))
        assert rc == 0, argv[0]
        assert summary["experiment"] == argv[0]
        assert summary["violations"] == []
        assert summary["figure"].endswith(figure_name)
        for name in ("result.json", "curves.csv", figure_name):
            assert (outdir / name).exists(), (argv[0], name)
        payload = json.loads((outdir / "result.json").read_text())
        assert payload["config_hash"] == summary["config_hash"]


def test_config_file_overrides_flags(tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"Ns": [8], "reps": 2, "grid_points": 2,
                                  "seed": 9, "log_events": "none"}))
    rc, summary = run_cli(capsys, "consistency", "--config", str(config),
                          "--reps", "5", "--T", "0.25")
    assert rc == 0
    expected = ExperimentConfig(experiment="consistency", Ns=(8,), reps=2,
                                T=0.25, grid_points=2, seed=9,
                                log_events="none")
    # file entries beat flags; flags only fill what the file leaves out
    assert summary["config_hash"] == expected.config_hash()


def test_selftest_verb(tmp_path, capsys):
    rc, report = run_cli(capsys, "selftest", "--out", str(tmp_path / "st"))
    assert rc == 0 and report["passed"]
    stored = json.loads((tmp_path / "st" / "selftest.json").read_text())
    assert stored["passed"] is True
    assert len(stored["checks"]) == len(report["checks"])
