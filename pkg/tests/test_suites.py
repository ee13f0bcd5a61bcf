import math

import numpy as np
import pytest

from superou import suites
from superou.simulator import InitialMeasure, SimulationConfig, run_ensemble

SETTINGS = suites.SuiteSettings(statistic_time=1.0, compensator_time=2.0, trend_times=(0.5, 1.0),
                                upsilon_time=1.0, laplace_n=(50, 100))


@pytest.fixture(scope="module")
def small_runs(ou, mech):
    cfg = SimulationConfig(ou, mech, 100, InitialMeasure.dirac(), (0.25, 0.5, 0.75, 1.0, 2.0),
                           engine="particle")
    return run_ensemble(cfg, 300, 3).records


@pytest.fixture(scope="module")
def lattice_runs(ou, mech):
    mu = InitialMeasure((((-1.0,), 50.0), ((1.0,), 50.0)))
    cfg = SimulationConfig(ou, mech, 1000, mu, (0.5, 1.0, 2.0), switch_time=0.0)
    return run_ensemble(cfg, 300, 4).records


def test_settings_grids():
    assert len(SETTINGS.thetas) == 25 and SETTINGS.thetas[0] == -3.0
    assert len(SETTINGS.joint_thetas) == 5


def test_means_suite(small_runs):
    reports = suites.means(small_runs, SETTINGS)
    assert [r.name for r in reports] == ["means 1 t=1", "means phi_1 t=1", "means phi_2 t=1"]
    assert reports[0].diagnostics["target"] == pytest.approx(math.exp(3.0))
    # phi_1 and phi_2 under the exact first moment: mu(P^alpha_t phi_p) = e^{(3 - p) t} phi_p(0)
    assert reports[1].diagnostics["target"] == 0.0
    assert reports[2].diagnostics["target"] == pytest.approx(math.exp(1.0) * -1 / math.sqrt(2))


def test_laplace_suite_reports_shrinking_allowance(ou, mech):
    ens = {}
    for n in (50, 100):
        cfg = SimulationConfig(ou, mech, n, InitialMeasure.dirac(), (0.5, 1.0), engine="particle")
        ens[n] = run_ensemble(cfg, 200, n).records
    reports = suites.laplace(ens, SETTINGS)
    assert len(reports) == 2 * 2 * 2 + 1
    shrink = reports[-1]
    assert shrink.diagnostics["ratio"] == pytest.approx(
        max(shrink.diagnostics["allowances"]["50"]) / max(shrink.diagnostics["allowances"]["100"]))
    # the allowance is O(1/n): halving the mass per particle roughly halves it
    assert 1.5 < shrink.diagnostics["ratio"] < 3.0
    assert not shrink.passed  # a factor 2 in n cannot give the required factor 5


def test_martingale_suite(small_runs):
    reports = suites.martingale(small_runs, SETTINGS)
    assert [r.name for r in reports[:3]] == ["martingale H^0", "martingale H^1", "martingale H^2"]
    norm = reports[-1]
    assert norm.tolerance == pytest.approx(1.5 * 1.43204, rel=1e-4)
    assert len(norm.diagnostics["norms"]) == 4


def test_clt_suite_shapes(lattice_runs):
    for regime in ("small", "critical", "large"):
        dist, trend = suites.clt(lattice_runs, regime, SETTINGS)
        assert dist.name == f"clt-{regime} t=1" and dist.n == 300
        assert dist.tolerance == SETTINGS.clt_tolerance
        assert trend.name == f"clt-{regime} trend" and len(trend.diagnostics["distances"]) == 2


def test_clt_without_the_regime_is_vacuous(ou, mech):
    cfg = SimulationConfig(ou, mech, 100, InitialMeasure.dirac(), (1.0, 2.0), engine="particle",
                           degree_cap=0)
    runs = run_ensemble(cfg, 5, 1).records
    (rep,) = suites.clt(runs, "small", SETTINGS)
    assert rep.passed and rep.diagnostics["vacuous"]


def test_joint_independence_control_detects_duplication(lattice_runs):
    dist, control = suites.joint_independence(lattice_runs, SETTINGS)
    assert dist.n == 300
    assert control.passed and control.diagnostics["distance"] > SETTINGS.joint_tolerance


def test_joint_sample_columns(lattice_runs):
    S = suites.joint_sample(lattice_runs, SETTINGS)
    assert S.shape == (300, 4)
    mass = np.array([r.mass_at(1.0) for r in lattice_runs])
    np.testing.assert_allclose(S[:, 0], math.exp(-3.0) * mass)


def test_corollary_cases(lattice_runs):
    reports = suites.corollary(lattice_runs, SETTINGS)
    assert [r.name for r in reports] == ["corollary large+small", "corollary critical+small"]
    assert reports[1].diagnostics["critical"] and not reports[0].diagnostics["critical"]


def test_upsilon_suite(lattice_runs):
    (rep,) = suites.upsilon_suite(lattice_runs, SETTINGS)
    assert rep.name == "upsilon t=1" and rep.n == 300
    assert rep.diagnostics["exponent"][0] == pytest.approx(-5.4924, abs=1e-4)


def test_dispatch(small_runs, lattice_runs):
    assert suites.run_suite("means", {100: small_runs}, SETTINGS)[0].name.startswith("means")
    assert suites.run_suite("clt-small", {1000: lattice_runs}, SETTINGS)[0].name.startswith("clt-small")
    with pytest.raises(KeyError):
        suites.run_suite("nope", {100: small_runs}, SETTINGS)
    assert set(suites.SUITES) >= {"means", "laplace", "martingale", "clt-small", "upsilon"}
