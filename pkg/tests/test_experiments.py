"""Experiment harness: config contract, run shapes, persistence, selftest."""

import json

import numpy as np
import pytest

import kaclab.core
import kaclab.experiments as ex
from kaclab.experiments import (ExperimentConfig, SelftestResult,
                                boltzmann_proxy, consistency_experiment,
                                moment_experiment, run_experiment,
                                sampling_rate_experiment, selftest)


def small_cfg(**over):
    base = dict(experiment="consistency", Ns=(8, 16), N_prime=16, T=0.2,
                reps=3, grid_points=4, seed=7, n_boot=200, log_events="none")
    base.update(over)
    return ExperimentConfig(**base)


def test_config_defaults_fill_in():
    cfg = ExperimentConfig(experiment="consistency", Ns=(8.0, 32, 16))
    assert cfg.Ns == (8, 32, 16)
    assert all(isinstance(n, int) for n in cfg.Ns)
    # reference size defaults to the largest requested run
    assert cfg.N_prime == 32
    assert cfg.build_kernel().d == 3
    law = cfg.build_law()
    assert law.name == "gaussian" and law.d == 3


def test_config_round_trip_and_hash():
    cfg = small_cfg(qs=(2, 4))
    assert cfg.qs == (2.0, 4.0)
    clone = ExperimentConfig.from_dict(cfg.to_dict())
    assert clone == cfg
    assert clone.config_hash() == cfg.config_hash()
    h = cfg.config_hash()
    assert len(h) == 16 and set(h) <= set("0123456789abcdef")
    assert small_cfg(seed=8).config_hash() != h


def test_config_rejects_bad_values():
    cases = [
        (dict(experiment="frobnicate"), "unknown experiment"),
        (dict(Ns=()), "nonempty"),
        (dict(Ns=(1, 8)), "sizes >= 2"),
        (dict(N_prime=1), "N_prime"),
        (dict(T=-0.5), "nonnegative"),
        (dict(tau=0.5), "tau"),
        (dict(reps=0), "reps"),
        (dict(grid_points=0), "grid_points"),
        (dict(quantile=1.0), "quantile"),
        (dict(n_boot=199), "n_boot must be >= 200"),
        (dict(log_events="loud"), "log_events"),
        (dict(kernel="hard-sphere-d2"), "kernel dimension 2"),
        (dict(kernel="bogus"), "kernel:"),
        (dict(law="cauchy"), "law:"),
    ]
    for over, fragment in cases:
        with pytest.raises(ValueError) as info:
            small_cfg(**over)
        assert fragment in str(info.value), over
    # every problem is reported, not just the first
    with pytest.raises(ValueError) as info:
        small_cfg(reps=0, n_boot=10)
    assert "reps" in str(info.value) and "n_boot" in str(info.value)


def test_config_unknown_keys_rejected():
    payload = small_cfg().to_dict()
    payload["frobnicate"] = 1
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict(payload)


def test_time_grid_shapes():
    assert np.allclose(ex._time_grid(0.0, 1.0, 5), np.linspace(0.0, 1.0, 5))
    assert ex._time_grid(0.0, 0.0, 7).tolist() == [0.0]
    assert ex._time_grid(0.0, 2.0, 1).tolist() == [2.0]
    assert ex._time_grid(0.3, 0.3, 4).tolist() == [0.3]


def test_consistency_null_comparison_is_exact_zero():
    cfg = ExperimentConfig(experiment="consistency", Ns=(16, 32), N_prime=32,
                           T=0.2, reps=2, grid_points=4, seed=5, n_boot=200,
                           log_events="small")
    res = consistency_experiment(cfg, independent_reference=False)
    # the N = N' run reuses the reference path, so the curve is identically 0
    assert res.sup_by_n[32].tolist() == [0.0, 0.0]
    ref_rows = [row for row in res.rows if row[0] == 32]
    assert len(ref_rows) == 2 * 4 and all(row[3] == 0.0 for row in ref_rows)
    assert np.all(res.sup_by_n[16] > 0)
    assert np.isnan(res.fit["exponent"])
    assert [tag for tag, _ in res.event_logs] == ["reference-N32-r0",
                                                  "path-N16-r0"]


def test_consistency_shapes_fit_and_degenerate_grid():
    cfg = small_cfg()
    res = consistency_experiment(cfg)
    assert np.allclose(res.time_grid, np.linspace(0.0, 0.2, 4))
    assert len(res.rows) == cfg.reps * len(cfg.Ns) * 4
    ws = np.array([row[3] for row in res.rows])
    assert np.all((ws >= 0.0) & (ws <= 4.0))
    assert res.violations == []

    fit = res.fit
    assert fit["Ns"] == [8, 16] and fit["n_boot"] == 200
    assert np.isfinite(fit["exponent"])
    assert fit["exponent_ci"][0] <= fit["exponent"] <= fit["exponent_ci"][1]
    assert len(fit["quantile_values"]) == 2 and len(fit["mean_values"]) == 2

    assert set(res.quantile_curves) == {"q0.5", "q0.8", "q0.9"}
    lo, hi = res.quantile_curves["q0.5"], res.quantile_curves["q0.9"]
    assert all(a <= b + 1e-12 for a, b in zip(lo, hi))
    json.dumps(res.summary())

    flat = consistency_experiment(small_cfg(T=0.0, grid_points=6, reps=2))
    assert flat.time_grid.tolist() == [0.0]
    assert len(flat.rows) == 2 * 2


def test_moment_energy_and_growth_envelope():
    # two-point start is far from equilibrium, so the p-th moment must grow
    cfg = ExperimentConfig(experiment="moments", law="two-point", p=4.0,
                           qs=(2.0, 4.0), Ns=(128,), reps=12, T=0.5,
                           grid_points=8, seed=0, n_boot=200,
                           log_events="none")
    res = moment_experiment(cfg)
    assert res.time_grid.size == 8
    assert len(res.rows) == 2 * 8
    ener = res.audits["N128-q2"]
    assert ener["kind"] == "energy-constant" and ener["ok"]
    assert ener["max_drift"] <= 1e-10
    env = res.audits["N128-q4"]
    assert env["kind"] == "linear-envelope"
    assert env["C"] > 0.0
    assert env["r2"] >= 0.8
    assert res.violations == []
    for N, q, t, mean, stderr in res.rows:
        if q == 2.0:
            assert abs(mean - 1.0) <= 1e-10
            assert stderr <= 1e-10


def test_moment_short_time_shape_audit():
    # tail order 2.5 source: orders above 2.5 blow up at t=0 but are created
    # immediately, so t^(q-p)-weighted values stay flat over [0.01, 0.1]
    cfg = ExperimentConfig(experiment="moments", law="heavy-tail:5.6", p=2.5,
                           qs=(2.0, 4.5), Ns=(64,), reps=8, T=0.15,
                           grid_points=4, seed=0, n_boot=200,
                           log_events="none")
    res = moment_experiment(cfg)
    assert res.time_grid.size >= 13
    early = (res.time_grid >= 0.0099) & (res.time_grid <= 0.1001)
    assert early.sum() >= 10
    aud = res.audits["N64-q4.5"]
    assert aud["kind"] == "short-time-shape"
    assert aud["median"] > 0.0
    assert aud["ok"] and aud["max"] <= 10.0 * aud["median"]
    assert res.audits["N64-q2"]["ok"]


def test_proxy_reference_size_is_zero():
    cfg = ExperimentConfig(experiment="boltzmann-proxy", Ns=(8, 24),
                           N_prime=24, tau=0.1, T=0.3, reps=3, grid_points=5,
                           seed=11, n_boot=200, log_events="none")
    res = boltzmann_proxy(cfg)
    assert res.time_grid[0] == pytest.approx(0.1)
    assert res.time_grid[-1] == pytest.approx(0.3)
    assert res.sup_by_n[24].tolist() == [0.0, 0.0, 0.0]
    assert np.all(res.sup_by_n[8] > 0)
    # a single non-reference size cannot support a decay fit
    assert np.isnan(res.fit["exponent"]) and "note" in res.fit
    assert res.violations == []


def test_proxy_full_horizon_restart():
    cfg = ExperimentConfig(experiment="boltzmann-proxy", Ns=(8, 16),
                           N_prime=32, tau=0.2, T=0.2, reps=3, grid_points=5,
                           seed=12, n_boot=200, log_events="none")
    res = boltzmann_proxy(cfg)
    assert res.time_grid.tolist() == [0.2]
    assert len(res.rows) == 3 * 2
    assert res.fit["Ns"] == [8, 16]
    assert np.isfinite(res.fit["exponent"])


def test_sampling_rate_wrapper():
    cfg = ExperimentConfig(experiment="sampling-rate", Ns=(12, 24, 48),
                           reps=4, n_reference=400, seed=9, n_boot=200,
                           log_events="none")
    res = sampling_rate_experiment(cfg)
    assert res.fit.fitted_slope < 0.0
    assert res.violations == []
    rows = res.curve_rows()
    assert [r[0] for r in rows] == [12, 24, 48]
    assert all(r[1] > 0.0 and r[2] > 0.0 for r in rows)
    summ = res.summary()
    assert summ["law"] == "gaussian" and summ["Ns"] == [12, 24, 48]
    assert len(summ["per_replica"]["12"]) == 4
    json.dumps(summ)


def test_write_outputs_layout(tmp_path):
    cfg = small_cfg(log_events="small", reps=2)
    out = tmp_path / "a"
    res = run_experiment(cfg, out)
    assert isinstance(res, ex.ConsistencyResult)

    payload = json.loads((out / "result.json").read_text())
    assert payload["experiment"] == "consistency"
    assert payload["config_hash"] == cfg.config_hash()
    assert payload["master_seed"] == cfg.seed
    assert payload["git_describe"]
    assert payload["violations"] == []
    assert ExperimentConfig.from_dict(payload["config"]) == cfg
    assert payload["summary"]["fit"]["Ns"] == [8, 16]

    lines = (out / "curves.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert lines[1].startswith("# git_describe=")
    assert lines[2] == f"# master_seed={cfg.seed}"
    assert lines[3] == "N,replica,t,W"
    body = lines[4:]
    assert len(body) == len(res.rows)
    for text, row in zip(body, res.rows):
        n_s, r_s, t_s, w_s = text.split(",")
        assert (int(n_s), int(r_s)) == (row[0], row[1])
        # %.17g wide enough to reproduce every double bit-exactly
        assert float(t_s) == row[2] and float(w_s) == row[3]

    names = sorted(p.name for p in (out / "events").iterdir())
    assert names == ["path-N16-r0.jsonl", "path-N8-r0.jsonl",
                     "reference-N16-r0.jsonl"]
    head = json.loads((out / "events" / names[0]).read_text().splitlines()[0])
    assert head["config_hash"] == cfg.config_hash()
    assert head["master_seed"] == cfg.seed


def test_outputs_bit_exact_rerun(tmp_path):
    run_experiment(small_cfg(), tmp_path / "a")
    run_experiment(small_cfg(), tmp_path / "b")
    for name in ("result.json", "curves.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, name


def test_selftest_all_green():
    rep = selftest()
    assert rep["passed"] is True
    assert all(c["ok"] for c in rep["checks"])
    assert {(c["module"], c["name"]) for c in rep["checks"]} == {
        ("simulator", "event-conservation"),
        ("core", "state-conservation"),
        ("transport", "metric-axioms"),
        ("transport", "optimality-certificate"),
        ("simulator", "collision-ledger"),
        ("kernels", "moment-dissipation"),
        ("signed_measure", "tv-identity"),
        ("branching", "population-identities"),
        ("sampling", "rescale-shell-membership"),
        ("experiments", "bit-exact-reruns"),
    }
    assert all(c["seed"] == rep["seed"] for c in rep["checks"])
    assert rep["elapsed_seconds"] >= 0.0

    wrap = SelftestResult(ExperimentConfig(experiment="selftest"), rep)
    assert wrap.violations == []
    rows = wrap.curve_rows()
    assert len(rows) == len(rep["checks"])
    assert all(r[2] == 1 for r in rows)
    assert wrap.summary() is rep


def test_selftest_canary_flags_corrupt_collisions(monkeypatch):
    real = kaclab.core.collide

    def skewed(v, vs, sigma):
        q0, q1 = real(v, vs, sigma)
        q0 = np.asarray(q0, dtype=np.float64).copy()
        q0[0] += 1e-3
        return q0, q1

    # simulator keeps its own import-time binding, so paths are generated
    # correctly; only the selftest recomputation sees the skewed map
    monkeypatch.setattr(kaclab.core, "collide", skewed)
    rep = selftest()
    assert rep["passed"] is False
    bad = [(c["module"], c["name"]) for c in rep["checks"] if not c["ok"]]
    assert bad == [("simulator", "event-conservation")]
    detail = next(c["detail"] for c in rep["checks"]
                  if c["name"] == "event-conservation")
    assert "first_bad_event=0" in detail

    wrap = SelftestResult(ExperimentConfig(experiment="selftest"), rep)
    assert len(wrap.violations) == 1
    assert wrap.violations[0].startswith("simulator.event-conservation")
