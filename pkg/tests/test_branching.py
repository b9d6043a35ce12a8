"""Signed branching populations, couplings, and their growth envelopes."""

import numpy as np
import pytest

from kaclab import (
    CapExceeded,
    Environment,
    SignedPopulation,
    branch_run,
    coupled_environment,
    coupled_initial,
    dcl_envelope,
    estimate_Ef,
    estimate_Ef_points,
    ghu_bound,
    jpe_bound,
    verify_representation,
)
from kaclab.core import EmpiricalMeasure, builtin_test_function
from kaclab.kernels import hard_sphere
from kaclab.sampling import gaussian_law, rescale, sample_empirical
from kaclab.simulator import run

from oracles import fit_slope

# six atoms on the coordinate axes at radius 0.9; with total mass 0.6 the
# flow satisfies the mass/energy caps (energy 0.6 * 0.81) and every moment
# integral has a closed form: <1 + |v|^q> = mass * (1 + 0.9^q)
OCTA = 0.9 * np.vstack([np.eye(3), -np.eye(3)])


def octa_env(horizon: float, mass: float = 0.6) -> Environment:
    mu = EmpiricalMeasure(OCTA.copy(), np.full(6, mass / 6.0))
    return Environment.frozen(mu, horizon)


def octa_rate(q: float, mass: float = 0.6) -> float:
    return mass * (1.0 + 0.9 ** q)


def small_path(n: int, seed: int, T: float = 0.3, law_seed: int = 3):
    rng = np.random.default_rng(law_seed)
    state = rescale(sample_empirical(gaussian_law(3), n, rng))
    return run(state, hard_sphere(3), T, seed)


# ---------------------------------------------------------------------------
# environments


def test_environment_construction_guards():
    mu = EmpiricalMeasure(np.array([[0.5, 0.0, 0.0]]), np.array([0.5]))
    with pytest.raises(ValueError, match="at least one piece"):
        Environment(pieces=[], horizon=1.0)
    with pytest.raises(ValueError, match="start at time 0"):
        Environment(pieces=[(0.5, mu)], horizon=1.0)
    with pytest.raises(ValueError, match="must increase"):
        Environment(pieces=[(0.0, mu), (0.0, mu)], horizon=1.0)
    with pytest.raises(ValueError, match="horizon"):
        Environment(pieces=[(0.0, mu), (0.8, mu)], horizon=0.5)


def test_environment_validate_caps():
    heavy = EmpiricalMeasure(np.array([[0.5, 0.0, 0.0]]), np.array([1.2]))
    with pytest.raises(ValueError, match="mass"):
        Environment.frozen(heavy, 1.0).validate()
    hot = EmpiricalMeasure(np.array([[2.0, 0.0, 0.0]]), np.array([0.5]))
    with pytest.raises(ValueError, match="energy"):
        Environment.frozen(hot, 1.0).validate()
    broken = EmpiricalMeasure(np.array([[np.nan, 0.0, 0.0]]), np.array([0.5]))
    with pytest.raises(ValueError, match="non-finite"):
        Environment.frozen(broken, 1.0).validate()
    octa_env(1.0).validate()


def test_environment_piece_lookup_and_moment_arithmetic():
    a = EmpiricalMeasure(np.array([[1.0, 0.0, 0.0]]), np.array([0.5]))
    b = EmpiricalMeasure(np.array([[0.5, 0.0, 0.0]]), np.array([0.8]))
    env = Environment(pieces=[(0.0, a), (1.0, b)], horizon=2.0)
    assert env.d == 3
    assert env.measure_at(0.0) is a
    assert env.measure_at(0.999) is a
    assert env.measure_at(1.0) is b
    assert env.measure_at(2.0) is b
    with pytest.raises(ValueError):
        env.measure_at(-0.1)
    with pytest.raises(ValueError):
        env.measure_at(2.2)
    # piece a: 0.5 * (1 + 1) = 1.0 per unit time, piece b: 0.8 * (1 + 0.125)
    assert env.m3_integral(0.0, 2.0) == pytest.approx(1.9, abs=1e-12)
    assert env.moment_integral(0.5, 1.5, 3.0) == pytest.approx(0.95, abs=1e-12)
    assert env.moment_integral(0.3, 0.3, 3.0) == 0.0
    with pytest.raises(ValueError, match="s <= t"):
        env.moment_integral(1.0, 0.5, 3.0)


def test_environment_serialization_round_trip(tmp_path):
    a = EmpiricalMeasure(np.array([[1.0, 0.0, 0.0], [0.0, -0.5, 0.2]]),
                         np.array([0.25, 0.5]))
    b = EmpiricalMeasure(np.array([[0.5, 0.0, 0.0]]), np.array([0.8]))
    env = Environment(pieces=[(0.0, a), (0.7, b)], horizon=1.4)
    for clone in (Environment.from_dict(env.to_dict()),):
        assert clone.horizon == env.horizon
        assert np.array_equal(clone.starts, env.starts)
        for (_, lhs), (_, rhs) in zip(clone.pieces, env.pieces):
            assert np.array_equal(lhs.atoms, rhs.atoms)
            assert np.array_equal(lhs.weights, rhs.weights)
    fname = tmp_path / "env.json"
    env.save(fname)
    loaded = Environment.load(fname)
    assert loaded.horizon == env.horizon
    assert loaded.m3_integral(0.0, 1.4) == pytest.approx(
        env.m3_integral(0.0, 1.4), abs=1e-15)


def test_environment_from_trajectories():
    pa = small_path(6, seed=11)
    pb = small_path(8, seed=12, law_seed=4)
    env = Environment.from_path(pa)
    assert env.horizon == pa.T
    assert len(env.pieces) == 1 + int(np.sum(pa.times < pa.T))
    for t in (0.0, 0.15, 0.3):
        mu = env.measure_at(t)
        assert np.array_equal(mu.atoms, pa.state_at(t).velocities)
        assert np.allclose(mu.weights, 1.0 / 6.0)
    # on the shell, mass + energy integrates to 2 per unit time
    assert env.moment_integral(0.0, 0.3, 2.0) == pytest.approx(0.6, abs=1e-8)
    env.validate()

    both = Environment.from_paths(pa, pb)
    assert both.horizon == 0.3
    assert len(both.pieces) >= max(len(env.pieces), 1)
    for _, mu in both.pieces:
        assert mu.mass == pytest.approx(1.0, abs=1e-12)
        assert mu.moment(2.0) == pytest.approx(1.0, abs=1e-7)


# ---------------------------------------------------------------------------
# single-particle runs


def test_zero_environment_keeps_the_particle():
    env = Environment.zero(3, 1.0)
    v0 = np.array([0.4, -0.2, 0.7])
    pop = branch_run(env, 0.0, v0, t=1.0, rng=np.random.default_rng(0))
    assert pop.n_events == 0 and pop.signed_event_sum == 0
    assert pop.velocities.shape == (1, 3)
    assert np.array_equal(pop.velocities[0], v0)
    assert pop.signs.tolist() == [1]
    assert pop.count_signed == 1 and pop.n_plus == 1 and pop.n_minus == 0
    assert pop.time == 1.0
    v_atom, s_atom = pop.atoms[0]
    assert np.array_equal(v_atom, v0) and s_atom == 1

    f = builtin_test_function("gauss_bump")
    est = estimate_Ef(env, 0.0, 1.0, f, v0, n_rep=16,
                      rng=np.random.default_rng(1))
    assert est.mean == pytest.approx(float(f(v0)), abs=1e-15)
    assert est.stderr == 0.0 and est.n_capped == 0 and not est.flagged
    m, se = est
    assert (m, se) == (est.mean, est.stderr)
    assert jpe_bound(env, 0.0, 1.0, v0) == pytest.approx(1.0 + v0 @ v0,
                                                         abs=1e-15)


def test_start_at_end_time_is_identity():
    env = octa_env(0.8)
    v0 = [1.0, 0.0, 0.0]
    pop = branch_run(env, 0.8, v0, t=0.8, rng=np.random.default_rng(5))
    assert pop.velocities.shape == (1, 3) and pop.n_events == 0
    est = estimate_Ef(env, 0.5, 0.5, builtin_test_function("energy"), v0,
                      n_rep=8, rng=np.random.default_rng(6))
    assert est.mean == pytest.approx(1.0, abs=1e-15)
    assert est.stderr == 0.0


def test_branch_run_argument_guards():
    env = octa_env(1.0)
    one = builtin_test_function("one")
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        branch_run(env, -0.1, [1.0, 0, 0], t=0.5, rng=rng)
    with pytest.raises(ValueError):
        branch_run(env, 0.6, [1.0, 0, 0], t=0.5, rng=rng)
    with pytest.raises(ValueError):
        branch_run(env, 0.0, [1.0, 0, 0], t=1.5, rng=rng)
    with pytest.raises(ValueError, match="cap"):
        branch_run(env, 0.0, [1.0, 0, 0], t=0.5, cap=0, rng=rng)
    with pytest.raises(ValueError, match="align"):
        estimate_Ef_points(env, [0.0, 0.1], [[1.0, 0, 0]], 0.5, one, rng=rng)
    with pytest.raises(ValueError, match="exceed"):
        estimate_Ef_points(env, [0.6], [[1.0, 0, 0]], 0.5, one, rng=rng)


@pytest.mark.parametrize("sign0", [1, -1])
def test_branch_population_sign_bookkeeping(sign0):
    # every event keeps one parent and adds a (+s, -s) pair, so the signed
    # count is conserved and the atom count is 1 + 2 * n_events
    env = octa_env(0.7)
    one = builtin_test_function("one")
    grew = False
    for seed in range(6):
        pop = branch_run(env, 0.0, [1.0, 0.2, 0.0], sign0=sign0, t=0.7,
                         rng=np.random.default_rng(100 + seed))
        assert pop.velocities.shape[0] == 1 + 2 * pop.n_events
        assert pop.count_signed == sign0
        assert pop.n_plus + pop.n_minus == pop.velocities.shape[0]
        assert pop.signed_pairing(one) == pytest.approx(sign0, abs=1e-12)
        assert len(pop.atoms) == pop.velocities.shape[0]
        grew = grew or pop.n_events > 0
    assert grew


def test_branch_run_deterministic_under_seed():
    env = octa_env(0.6)
    a = branch_run(env, 0.0, [0.9, 0.1, -0.3], t=0.6,
                   rng=np.random.default_rng(42))
    b = branch_run(env, 0.0, [0.9, 0.1, -0.3], t=0.6,
                   rng=np.random.default_rng(42))
    assert np.array_equal(a.velocities, b.velocities)
    assert np.array_equal(a.signs, b.signs)
    assert a.n_events == b.n_events


def test_population_cap_raises_with_context():
    env = octa_env(30.0)
    with pytest.raises(CapExceeded) as err:
        branch_run(env, 0.0, [1.0, 0.0, 0.0], t=30.0, cap=2,
                   rng=np.random.default_rng(7))
    assert err.value.cap == 2
    assert 0.0 < err.value.time_reached <= 30.0
    assert "cap 2" in str(err.value)


def test_estimator_flags_capped_replicas():
    env = octa_env(6.0)
    est = estimate_Ef(env, 0.0, 6.0, builtin_test_function("gauss_bump"),
                      [1.0, 0.0, 0.0], n_rep=40, cap=3,
                      rng=np.random.default_rng(8))
    assert est.n_capped > 0
    assert est.flagged


def test_signed_population_accessors():
    pop = SignedPopulation(
        velocities=np.array([[1.0, 0, 0], [0, 2.0, 0], [0, 0, -1.0]]),
        signs=np.array([1, -1, 1], dtype=np.int8), time=0.3)
    assert pop.n_plus == 2 and pop.n_minus == 1 and pop.count_signed == 1
    assert pop.weighted_count(2.0) == pytest.approx(9.0, abs=1e-12)
    f = builtin_test_function("energy")
    assert pop.signed_pairing(f) == pytest.approx(-2.0, abs=1e-12)
    empty = SignedPopulation(velocities=np.zeros((0, 3)),
                             signs=np.zeros(0, dtype=np.int8), time=0.0)
    assert empty.signed_pairing(f) == 0.0
    assert empty.weighted_count(2.0) == 0.0
    assert empty.count_signed == 0


# ---------------------------------------------------------------------------
# growth envelopes


def test_second_moment_envelope_holds():
    env = octa_env(0.4)
    v0 = np.array([1.0, 0.0, 0.2])
    rng = np.random.default_rng(9)
    masses = np.array([
        branch_run(env, 0.0, v0, t=0.4, rng=rng).weighted_count(2.0)
        for _ in range(400)])
    mean = masses.mean()
    se = masses.std(ddof=1) / np.sqrt(masses.size)
    bound = jpe_bound(env, 0.0, 0.4, v0)
    assert mean - 3.0 * se <= bound
    assert mean > 1.0 + v0 @ v0  # branching only ever adds weighted mass
    assert bound == pytest.approx(
        (1.0 + v0 @ v0) * np.exp(8.0 * octa_rate(3.0) * 0.4), rel=1e-12)


def test_branching_semigroup_consistency():
    # running to t directly and restarting from the time-s population must
    # estimate the same signed expectation
    env = octa_env(0.5)
    f = builtin_test_function("gauss_bump")
    v0 = np.array([1.0, 0.2, 0.0])
    rng = np.random.default_rng(10)
    direct = estimate_Ef(env, 0.0, 0.5, f, v0, n_rep=3000, rng=rng)
    nested = []
    for _ in range(48):
        mid = branch_run(env, 0.0, v0, t=0.25, rng=rng)
        means, _, cfrac = estimate_Ef_points(
            env, np.full(mid.signs.size, 0.25), mid.velocities, 0.5, f,
            n_rep=64, rng=rng)
        assert np.all(cfrac == 0.0)
        nested.append(float(np.sum(mid.signs * means)))
    nested = np.asarray(nested)
    nse = nested.std(ddof=1) / np.sqrt(nested.size)
    gap = abs(direct.mean - nested.mean())
    assert gap <= 3.0 * np.hypot(direct.stderr, nse) + 1e-12


# ---------------------------------------------------------------------------
# coupling two starting points in one environment


def test_identical_starts_never_uncouple():
    env = octa_env(0.5)
    v = [0.8, 0.0, 0.3]
    stats = coupled_initial(env, v, v, 0.5, n_rep=300,
                            rng=np.random.default_rng(11))
    assert stats.contraction_gap0 == 0.0
    assert stats.contraction_max == 0.0
    assert stats.uncoupled_total == 0.0
    assert stats.uncoupled_stderr == 0.0
    assert np.all(stats.per_replica["uncoupled_total"] == 0.0)
    assert stats.coupled_mass > 1.73  # grows past the initial 1 + |v|^2
    assert stats.n_capped == 0 and not stats.flagged


def test_coupling_at_time_zero_is_exact():
    env = octa_env(1.0)
    v1 = np.array([1.0, 0.0, 0.0])
    v2 = np.array([0.8, 0.3, 0.0])
    stats = coupled_initial(env, v1, v2, 0.0, n_rep=40,
                            rng=np.random.default_rng(12))
    expect = 0.5 * ((1.0 + v1 @ v1) + (1.0 + v2 @ v2))
    assert stats.coupled_mass == pytest.approx(expect, rel=1e-12)
    assert stats.uncoupled_total == 0.0
    gap0 = float(np.linalg.norm(v1 - v2))
    assert stats.contraction_gap0 == pytest.approx(gap0, abs=1e-15)
    assert stats.contraction_max == pytest.approx(gap0, abs=1e-15)


def test_coupled_pairs_contract_and_obey_growth_bound():
    env = octa_env(0.5)
    v1 = np.array([1.0, 0.0, 0.0])
    v2 = np.array([0.8, 0.3, 0.0])
    stats = coupled_initial(env, v1, v2, 0.5, p=2.0, n_rep=800,
                            rng=np.random.default_rng(13))
    gap0 = float(np.linalg.norm(v1 - v2))
    # the shared partner and direction make each collision 1-Lipschitz in
    # the pair gap, so the running maximum never exceeds the initial gap
    assert stats.contraction_max <= gap0 * (1.0 + 1e-12)
    pr = stats.per_replica
    assert np.array_equal(pr["uncoupled_total"],
                          pr["uncoupled_1"] + pr["uncoupled_2"])
    assert np.allclose(pr["coupled"], 0.5 * (pr["coupled_1"] + pr["coupled_2"]))
    ok = ~pr["capped"]
    assert stats.uncoupled_total == pytest.approx(
        float(pr["uncoupled_total"][ok].mean()))
    assert stats.uncoupled_mass_1 + stats.uncoupled_mass_2 == pytest.approx(
        stats.uncoupled_total, abs=1e-12)
    assert stats.uncoupled_total > 0.0
    bound = ghu_bound(env, v1, v2, 0.5)
    assert stats.uncoupled_total <= bound + 3.0 * stats.uncoupled_stderr
    with pytest.raises(ValueError, match="horizon"):
        coupled_initial(env, v1, v2, 0.9)


def test_growth_bound_formula():
    env = octa_env(2.0)
    v1 = np.array([1.0, 0.0, 0.0])
    v2 = np.array([0.5, 0.5, 0.0])
    t = 1.25
    gap = float(np.linalg.norm(v1 - v2))
    manual = 6.0 * t * (2.0 + 1.0 + 0.5) * gap * np.exp(
        8.0 * octa_rate(3.0) * t)
    assert ghu_bound(env, v1, v2, t) == pytest.approx(manual, rel=1e-12)
    assert ghu_bound(env, v1, v2, t, kappa=2.0) == pytest.approx(
        2.0 * manual, rel=1e-12)


# ---------------------------------------------------------------------------
# coupling one starting point across two environments


def test_identical_environments_stay_coupled():
    env = octa_env(0.5)
    stats = coupled_environment(env, env, [1.0, 0.0, 0.0], 0.5, n_rep=400,
                                rng=np.random.default_rng(14))
    pr = stats.per_replica
    assert np.all(pr["n_uncouple_events"] == 0)
    assert np.all(pr["uncoupled_total"] == 0.0)
    assert stats.uncoupled_total == 0.0 and stats.uncoupled_stderr == 0.0
    assert stats.coupled_mass > 2.0
    assert np.all(pr["coupled_count"] >= 1)


def test_vanishing_environment_reduces_to_plain_branching():
    # with the second environment empty there is no overlap: the particle
    # sits at v0 until its first proposal, which always uncouples, handing
    # the branch triple to side 1 and freezing a copy on side 2.  Side 1
    # therefore sees exactly the single-environment branching law.
    t, p = 0.6, 2.0
    env1 = octa_env(t)
    env2 = Environment.zero(3, t)
    v0 = np.array([1.1, 0.0, 0.0])
    unit = 1.0 + np.linalg.norm(v0) ** 2
    stats = coupled_environment(env1, env2, v0, t, p=p, n_rep=2000,
                                rng=np.random.default_rng(15))
    assert stats.n_capped == 0
    pr = stats.per_replica
    n_unc = pr["n_uncouple_events"]
    assert set(np.unique(n_unc).tolist()) <= {0, 1}
    assert np.array_equal(pr["coupled_count"] == 1, n_unc == 0)
    coupled = pr["coupled"]
    assert np.allclose(coupled[n_unc == 0], unit, atol=1e-12)
    assert np.all(coupled[n_unc == 1] == 0.0)
    assert stats.uncoupled_mass_2 == pytest.approx(unit * n_unc.mean(),
                                                   rel=1e-12)
    side1 = coupled + pr["uncoupled_total"] - n_unc * unit
    rng = np.random.default_rng(16)
    ref = np.array([
        branch_run(env1, 0.0, v0, t=t, rng=rng).weighted_count(p)
        for _ in range(800)])
    se = np.hypot(side1.std(ddof=1) / np.sqrt(side1.size),
                  ref.std(ddof=1) / np.sqrt(ref.size))
    assert abs(side1.mean() - ref.mean()) <= 3.0 * se


def test_uncoupled_mass_grows_linearly_in_weight_excess():
    t = 0.8
    env1 = octa_env(t)
    v0 = [1.1, 0.0, 0.0]
    eps = np.array([0.0, 0.02, 0.04, 0.08])
    ys = []
    for k, e in enumerate(eps):
        thin = EmpiricalMeasure(OCTA.copy(), np.full(6, 0.1 * (1.0 - e)))
        env2 = Environment.frozen(thin, t)
        stats = coupled_environment(env1, env2, v0, t, n_rep=3000,
                                    rng=np.random.default_rng(20 + k))
        ys.append(stats.uncoupled_total)
    ys = np.asarray(ys)
    assert ys[0] == 0.0
    assert ys[3] > ys[1]
    slope, intercept = fit_slope(eps, ys)
    assert slope > 0.0
    resid = ys - (slope * eps + intercept)
    r2 = 1.0 - float(resid @ resid) / float(((ys - ys.mean()) ** 2).sum())
    assert r2 >= 0.95


def test_environment_pair_must_share_horizon():
    env1 = octa_env(0.5)
    env2 = octa_env(0.6)
    with pytest.raises(ValueError, match="horizon"):
        coupled_environment(env1, env2, [1.0, 0, 0], 0.5, n_rep=4)
    with pytest.raises(ValueError, match="horizon"):
        dcl_envelope(env1, env2, [1.0, 0, 0], 0.5)


def test_difference_envelope_shape():
    y = np.array([[0.5, 0.0, 0.0]])
    env1 = Environment.frozen(EmpiricalMeasure(y, np.array([0.5])), 2.0)
    env2 = Environment.frozen(EmpiricalMeasure(y, np.array([0.3])), 2.0)
    v0 = [1.0, 0.0, 0.0]
    # p = 2: growth pairs with 1 + |y|^4, the difference with 1 + |y|^3
    grow = 2.0 * 0.8 * (1.0 + 0.5 ** 4)
    dint = 2.0 * 0.2 * (1.0 + 0.5 ** 3)
    manual = 2.0 * np.exp(grow) * dint
    assert dcl_envelope(env1, env2, v0, 2.0, p=2.0) == pytest.approx(
        manual, rel=1e-12)
    assert dcl_envelope(env1, env1, v0, 2.0) == 0.0
    assert dcl_envelope(env1, env2, v0, 1.0, p=2.0) == pytest.approx(
        2.0 * np.exp(grow / 2.0) * dint / 2.0, rel=1e-12)
    # union time grid: the second half of `late` matches env1, so only the
    # first half contributes to the difference integral
    late = Environment(
        pieces=[(0.0, EmpiricalMeasure(y, np.array([0.3]))),
                (1.0, EmpiricalMeasure(y, np.array([0.5])))],
        horizon=2.0)
    grow_mix = (0.8 + 1.0) * (1.0 + 0.5 ** 4)
    dint_mix = 0.2 * (1.0 + 0.5 ** 3)
    assert dcl_envelope(env1, late, v0, 2.0, p=2.0) == pytest.approx(
        2.0 * np.exp(grow_mix) * dint_mix, rel=1e-12)


# ---------------------------------------------------------------------------
# two-trajectory difference representation


def test_difference_representation_at_time_zero():
    pa = small_path(6, seed=31)
    pb = small_path(8, seed=32, law_seed=4)
    f = builtin_test_function("gauss_bump")
    rep = verify_representation(pa, pb, f, t=0.0, n_rep=4, n_groups=2,
                                rng=np.random.default_rng(33))
    ma = pa.state_at(0.0).as_measure()
    mb = pb.state_at(0.0).as_measure()
    manual = float(np.sum(ma.weights * f(ma.atoms))
                   - np.sum(mb.weights * f(mb.atoms)))
    assert rep.lhs == pytest.approx(manual, abs=1e-15)
    assert rep.rhs == pytest.approx(rep.lhs, abs=1e-12)
    assert rep.stderr == 0.0 and rep.z == 0.0


def test_difference_representation_statistics():
    pa = small_path(6, seed=35)
    pb = small_path(8, seed=36, law_seed=4)
    f = builtin_test_function("gauss_bump")
    rep = verify_representation(pa, pb, f, n_rep=8, n_groups=6,
                                pairs_per_piece=4,
                                rng=np.random.default_rng(37))
    assert rep.n_groups == 6
    assert np.asarray(rep.details["rhs_groups"]).shape == (6,)
    assert rep.stderr > 0.0
    assert not rep.flagged
    assert rep.n_points > 0
    assert abs(rep.z) <= 5.0
