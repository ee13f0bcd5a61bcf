import csv
import json
import math

import numpy as np
import pytest

from superou.branching import offspring_law, particle_laplace
from superou.errors import ConfigError, DomainError, PreconditionError, ResourceError
from superou.ou_spectral import OUParams, SpectralFunction, classify, evaluate
from superou.simulator import (
    InitialMeasure,
    Population,
    SimulationConfig,
    evolve,
    h_martingale,
    joint_statistic,
    measure_functional,
    record_from_json,
    replicate_seed,
    run_ensemble,
    simulate_replicate,
    summary_rows,
    upsilon,
    write_jsonl,
    write_summary_csv,
)


@pytest.fixture
def particle_cfg(ou, mech):
    return SimulationConfig(ou, mech, 100, InitialMeasure.dirac(), (0.0, 0.25, 0.5), engine="particle")


def test_initial_measure_validation(ou):
    with pytest.raises(DomainError):
        InitialMeasure(())
    with pytest.raises(DomainError):
        InitialMeasure((((0.0,), 0.0),))
    mu = InitialMeasure((((-1.0,), 0.5), ((1.0,), 0.25)))
    assert mu.total_mass == 0.75 and mu.dim == 1
    assert mu.particles(8).shape == (6, 1)
    with pytest.raises(PreconditionError):
        mu.particles(3)
    f = SpectralFunction.eigen((1,))
    assert mu.apply(f, ou) == pytest.approx(-0.25)  # phi_1(x) = x at unit scale


@pytest.mark.parametrize("kw", [dict(checkpoints=()), dict(checkpoints=(1.0, 0.5)),
                                dict(checkpoints=(-1.0,)), dict(engine="exact"),
                                dict(degree_cap=-1), dict(field_dt=0.0)])
def test_config_validation(ou, mech, kw):
    base = dict(ou=ou, mech=mech, n=100, initial=InitialMeasure.dirac(), checkpoints=(1.0,))
    base.update(kw)
    with pytest.raises(ConfigError):
        SimulationConfig(**base)


def test_config_dimension_mismatch(mech):
    with pytest.raises(ConfigError):
        SimulationConfig(OUParams(1.0, 1.0, dim=2), mech, 100, InitialMeasure.dirac(), (1.0,))


def test_config_digest_tracks_every_field(particle_cfg, ou, mech):
    same = SimulationConfig(ou, mech, 100, InitialMeasure.dirac(), (0, 0.25, 0.5), engine="particle")
    assert same.digest() == particle_cfg.digest()
    other = SimulationConfig(ou, mech, 101, InitialMeasure.dirac(), (0, 0.25, 0.5), engine="particle")
    assert other.digest() != particle_cfg.digest()
    assert json.loads(json.dumps(particle_cfg.to_dict()))["n"] == 100


def test_replicate_seeds_are_stable_and_distinct():
    seeds = [replicate_seed(42, i) for i in range(1000)]
    assert len(set(seeds)) == 1000
    assert seeds[:3] == [replicate_seed(42, i) for i in range(3)]
    assert replicate_seed(43, 0) != seeds[0]
    assert all(0 <= s < 2**64 for s in seeds)


def test_population_functionals(ou, mech):
    pop = Population(np.array([[0.0], [1.0], [-2.0]]), 0.5, time=0.3)
    assert pop.count == 3 and pop.total_mass == 1.5
    f = SpectralFunction.eigen((2,))
    assert measure_functional(pop, f, ou) == pytest.approx(0.5 * evaluate(f, pop.positions, ou).sum())
    assert h_martingale(pop, (2,), mech, ou) == pytest.approx(
        math.exp(-(3.0 - 2.0) * 0.3) * measure_functional(pop, f, ou))
    assert measure_functional(Population(np.zeros((0, 1)), 0.5), f, ou) == 0.0


def test_evolve_moves_forward_only(ou, mech):
    law = offspring_law(100, mech)
    pop = Population(np.zeros((100, 1)), 0.01, time=1.0)
    with pytest.raises(DomainError):
        evolve(pop, 0.5, law, ou, np.random.default_rng(0))
    out = evolve(pop, 1.2, law, ou, np.random.default_rng(0))
    assert out.time == 1.2 and out.unit_mass == 0.01


def test_evolve_reports_partial_population_at_cap(ou, mech):
    law = offspring_law(100, mech)
    pop = Population(np.zeros((100, 1)), 0.01)
    with pytest.raises(ResourceError) as err:
        evolve(pop, 5.0, law, ou, np.random.default_rng(1), particle_cap=500)
    assert err.value.exit_code == 4
    assert 0 < err.value.partial.count <= 500


def test_evolve_mass_laplace_matches_exact(ou, mech):
    law = offspring_law(100, mech)
    rng = np.random.default_rng(3)
    reps = 800
    vals = np.array([math.exp(-evolve(Population(np.zeros((100, 1)), 0.01), 0.5, law, ou, rng)
                              .total_mass) for _ in range(reps)])
    exact = particle_laplace(0.5, 1.0, 100, mech, 1.0)
    assert abs(vals.mean() - exact) <= 4 * vals.std(ddof=1) / math.sqrt(reps)


def test_replicate_is_deterministic_in_its_seed(particle_cfg):
    a, b = simulate_replicate(particle_cfg, 99), simulate_replicate(particle_cfg, 99)
    assert np.array_equal(a.mass, b.mass) and np.array_equal(a.coeffs, b.coeffs)
    c = simulate_replicate(particle_cfg, 100)
    assert not np.array_equal(a.coeffs, c.coeffs)


def test_replicate_records_initial_state(particle_cfg, ou):
    run = simulate_replicate(particle_cfg, 5)
    assert run.mass_at(0.0) == 1.0
    assert run.functional(0.0, SpectralFunction.eigen((2,))) == pytest.approx(-1 / math.sqrt(2))
    assert run.h(0.0, (0,)) == 1.0
    # particle masses are multiples of 1/n
    assert np.allclose(run.mass * 100, np.round(run.mass * 100))
    with pytest.raises(PreconditionError):
        run.mass_at(0.3)
    with pytest.raises(PreconditionError):
        run.functional(0.5, SpectralFunction.eigen((3,)))


def test_extinct_replicate_has_zero_state(ou, mech):
    cfg = SimulationConfig(ou, mech, 100, InitialMeasure.dirac(mass=0.01), (0.5, 3.0), engine="particle")
    runs = [simulate_replicate(cfg, s) for s in range(40)]
    dead = [r for r in runs if not r.survived]
    assert dead
    for r in dead:
        assert r.mass[-1] == 0.0 and np.all(r.coeffs[-1] == 0.0)


def test_particle_cap_aborts(ou, mech):
    cfg = SimulationConfig(ou, mech, 100, InitialMeasure.dirac(), (3.0,), engine="particle",
                           particle_cap=300)
    run = simulate_replicate(cfg, 1)
    assert run.status == "aborted" and not run.survived


def test_hybrid_switches_after_switch_time(ou, mech):
    cfg = SimulationConfig(ou, mech, 100, InitialMeasure.dirac(), (0.5, 1.0, 1.5), switch_time=0.5,
                           switch_min_particles=150)
    switched = [simulate_replicate(cfg, s) for s in range(30)]
    times = [r.switch_time for r in switched if r.switch_time is not None]
    assert times and all(t >= 0.5 for t in times)
    for r in switched:
        if r.switch_time is not None:
            assert r.mass_at(1.5) > 0 or not r.survived


def test_hybrid_switches_early_above_particle_limit(ou, mech):
    cfg = SimulationConfig(ou, mech, 100, InitialMeasure.dirac(), (2.0,), switch_time=1.5,
                           switch_particles=500, switch_min_particles=100)
    runs = [simulate_replicate(cfg, s) for s in range(20)]
    assert any(r.switch_time is not None and r.switch_time < 1.5 for r in runs)


def test_hybrid_starts_on_lattice_for_large_mass(ou, mech):
    mu = InitialMeasure((((-1.0,), 50.0), ((1.0,), 50.0)))
    cfg = SimulationConfig(ou, mech, 1000, mu, (0.0, 0.5), switch_time=0.0)
    run = simulate_replicate(cfg, 8)
    assert run.switch_time == 0.0
    assert run.mass_at(0.0) == pytest.approx(100.0)
    assert run.functional(0.0, SpectralFunction.eigen((1,))) == pytest.approx(0.0, abs=1e-12)


def test_hybrid_first_moments(ou, mech):
    # E X_t(phi_p) = e^{(alpha - p b) t} mu(phi_p); H^p_t is a martingale
    mu = InitialMeasure((((1.0,), 30.0),))
    cfg = SimulationConfig(ou, mech, 1000, mu, (0.5,), switch_time=0.0)
    runs = run_ensemble(cfg, 400, 11).records
    for p in [(0,), (1,), (2,)]:
        h = np.array([r.h(0.5, p) for r in runs])
        start = mu.apply(SpectralFunction.eigen(p), ou)
        assert abs(h.mean() - start) <= 4 * h.std(ddof=1) / math.sqrt(len(h)) + 0.02 * abs(start)


def test_json_round_trip(particle_cfg, tmp_path):
    run = simulate_replicate(particle_cfg, 21)
    back = record_from_json(json.loads(json.dumps(run.to_json())), particle_cfg)
    assert np.array_equal(back.mass, run.mass) and np.array_equal(back.coeffs, run.coeffs)
    assert back.seed == run.seed and back.survived == run.survived
    other = SimulationConfig(particle_cfg.ou, particle_cfg.mech, 200, InitialMeasure.dirac(),
                             particle_cfg.checkpoints, engine="particle")
    with pytest.raises(ConfigError):
        record_from_json(run.to_json(), other)


def test_ensemble_independent_of_parallelism(particle_cfg):
    a = run_ensemble(particle_cfg, 12, 5)
    b = run_ensemble(particle_cfg, 12, 5, parallelism=2, chunk=5)
    assert a.seeds == b.seeds == [replicate_seed(5, i) for i in range(12)]
    for x, y in zip(a.records, b.records):
        assert np.array_equal(x.coeffs, y.coeffs)


def test_survival_report(ou, mech):
    cfg = SimulationConfig(ou, mech, 100, InitialMeasure.dirac(mass=0.1), (2.0,), engine="particle")
    res = run_ensemble(cfg, 300, 2)
    rep = res.survival_report()
    assert rep["target"] == pytest.approx(1 - math.exp(-0.9))
    # survival by t = 2 bounds eventual survival from above
    assert rep["survival_fraction"] >= rep["target"] - 4 * rep["se"]
    assert res.aborted == []


def test_joint_statistic(particle_cfg, ou, mech):
    f = SpectralFunction.eigen((0,)) + SpectralFunction.eigen((1,)) + SpectralFunction.eigen((2,))
    dec = classify(f, ou, mech)
    run = next(r for r in (simulate_replicate(particle_cfg, s) for s in range(50)) if r.survived)
    with pytest.raises(PreconditionError):
        joint_statistic(run, dec, 0.5, 0.5)
    s = joint_statistic(run, dec, 0.5, 0.25)
    m = run.mass_at(0.5)
    assert s.h == pytest.approx(math.exp(-1.5) * m)
    assert s.s_stat == pytest.approx(run.functional(0.5, dec.f_s) / m ** (2 / 3))
    assert s.c_stat == pytest.approx(run.functional(0.5, dec.f_c) / (0.5 * m) ** (2 / 3))
    comp = math.exp(1.5) * run.h(0.25, (0,))
    assert s.l_stat == pytest.approx((m - comp) / m ** (2 / 3))
    small = SimulationConfig(ou, mech, 100, InitialMeasure.dirac(mass=0.01), (0.25, 0.5), engine="particle")
    dead = next(r for r in (simulate_replicate(small, s) for s in range(100)) if not r.survived)
    assert joint_statistic(dead, dec, 0.5, 0.25) is None


def test_upsilon(ou, mech):
    cfg = SimulationConfig(ou, mech, 100, InitialMeasure.dirac(), (0.25, 1.25), engine="particle")
    f = SpectralFunction.eigen((2,))
    run = next(r for r in (simulate_replicate(cfg, s) for s in range(50)) if r.survived)
    expected = (run.functional(1.25, f) - math.exp(1.0) * run.functional(0.25, f)) / \
        run.mass_at(0.25) ** (2 / 3)
    assert upsilon(run, f, 0.25) == pytest.approx(expected)


def test_persistence(particle_cfg, tmp_path):
    runs = [simulate_replicate(particle_cfg, s) for s in range(5)]
    write_jsonl(runs, tmp_path / "runs.jsonl")
    lines = (tmp_path / "runs.jsonl").read_text().splitlines()
    assert len(lines) == 5 and json.loads(lines[0])["seed"] == 0
    fs = {"mass": SpectralFunction.eigen((0,))}
    write_summary_csv(runs, fs, tmp_path / "summary.csv")
    rows = list(csv.reader(open(tmp_path / "summary.csv")))
    assert rows[0] == ["t", "functional", "mean", "se", "n_surviving"]
    alive = [r for r in runs if r.survived]
    assert len(rows) == 1 + 3 * bool(alive)
    assert summary_rows([], fs) == []
