import math
from types import SimpleNamespace

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from superou.branching import (
    BranchingMechanism,
    abs_binomial_table,
    csbp_laplace,
    extinction_prob,
    extinction_root,
    grey_check,
    mass_martingale_laplace,
    mass_martingale_moment,
    offspring_law,
    particle_extinction_by,
    particle_laplace,
    psi_eval,
    psi_levy_integral,
    tail_draw,
)
from superou.errors import DivergenceError, DomainError, PreconditionError

from oracles import csbp_ode, grey_integral, levy_integral

mechanisms = st.builds(
    BranchingMechanism,
    alpha=st.floats(0.1, 5.0),
    rho=st.sampled_from([0.0, 0.0, 0.3, 1.0]),
    eta=st.floats(0.2, 3.0),
    beta=st.floats(0.1, 0.9),
)


@pytest.mark.parametrize("kw", [dict(alpha=0), dict(alpha=-1), dict(rho=-0.1), dict(eta=0),
                                dict(beta=0), dict(beta=1), dict(beta=1.5)])
def test_mechanism_rejects_bad_parameters(kw):
    base = dict(alpha=3.0, rho=0.0, eta=1.0, beta=0.5)
    base.update(kw)
    with pytest.raises(DomainError):
        BranchingMechanism(**base)


def test_derived_constants(mech):
    assert mech.index == 1.5
    assert mech.beta_tilde == pytest.approx(1 / 3)
    assert mech.threshold == pytest.approx(1.0)


def test_psi_zeros(mech):
    assert psi_eval(0.0, mech) == 0.0
    assert psi_eval(9.0, mech) == pytest.approx(0.0, abs=1e-12)
    assert psi_eval(1.0, mech) == pytest.approx(-2.0)
    with pytest.raises(DomainError):
        psi_eval(-1.0, mech)


@pytest.mark.parametrize("z", [0.5, 1.0, 2.0])
def test_psi_closed_form_matches_levy_integral(mech, z):
    closed = psi_eval(z, mech)
    assert levy_integral(z, 3.0, 1.0, 0.5) == pytest.approx(closed, rel=1e-6)
    assert psi_levy_integral(z, mech) == pytest.approx(closed, rel=1e-6)


def test_levy_integral_with_quadratic_part():
    m = BranchingMechanism(2.0, 0.7, 1.3, 0.3)
    for z in (0.01, 0.7, 40.0):
        assert psi_levy_integral(z, m) == pytest.approx(psi_eval(z, m), rel=1e-8)


@given(mechanisms, st.floats(0.0, 50.0), st.floats(1e-3, 1.0))
def test_psi_convex(m, z, h):
    mid = psi_eval(z + h, m)
    assert psi_eval(z, m) + psi_eval(z + 2 * h, m) - 2 * mid >= -1e-9 * (1 + abs(mid))


def test_grey_integral_against_oracle(mech):
    assert grey_check(mech, 16.0) == pytest.approx(grey_integral(16.0, 3.0, 1.0, 0.5), rel=1e-6)
    assert grey_check(mech, 16.0) == pytest.approx(0.9241962407, rel=1e-8)


def test_grey_needs_z_beyond_root(mech):
    for z in (4.0, 9.0):
        with pytest.raises(PreconditionError):
            grey_check(mech, z)
    with pytest.raises(DomainError):
        grey_check(mech, 0.0)


def test_grey_diverges_without_superlinear_part():
    linear = SimpleNamespace(alpha=1.0, rho=0.0, eta=0.0, beta=0.5)
    with pytest.raises(DivergenceError):
        grey_check(linear, 16.0)


def test_grey_quadratic_only_closed_form():
    # psi = -z + z^2: integral of 1/(z(z-1)) from 2 is log 2
    quad_only = SimpleNamespace(alpha=1.0, rho=1.0, eta=0.0, beta=0.5)
    assert grey_check(quad_only, 2.0) == pytest.approx(math.log(2.0), rel=1e-9)


def test_extinction_root(mech):
    assert extinction_root(mech) == pytest.approx(9.0, rel=1e-14)
    m = BranchingMechanism(3.0, 0.5, 1.0, 0.5)
    v = extinction_root(m)
    assert abs(psi_eval(v, m)) <= 1e-12 * v
    ref = mp.findroot(lambda z: -3 + 0.5 * z + mp.sqrt(z), 3.0)
    assert v == pytest.approx(float(ref), rel=1e-13)


def test_extinction_probability_vanishes_with_mass(mech):
    probs = [extinction_prob(mech, m) for m in (0.0, 0.1, 1.0, 10.0)]
    assert probs[0] == 1.0
    assert all(a > b for a, b in zip(probs, probs[1:]))
    assert probs[-1] < 1e-30
    with pytest.raises(DomainError):
        extinction_prob(mech, -1.0)


def test_csbp_laplace_endpoints(mech):
    assert csbp_laplace(0.0, 2.5, mech) == 2.5
    for lam in (0.1, 1.0, 100.0):
        assert csbp_laplace(40.0, lam, mech) == pytest.approx(9.0, rel=1e-10)
    with pytest.raises(DomainError):
        csbp_laplace(-1.0, 1.0, mech)
    with pytest.raises(DomainError):
        csbp_laplace(1.0, 0.0, mech)


@pytest.mark.parametrize("t", [0.1, 0.5, 1.0, 2.0])
@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
def test_csbp_laplace_against_ode(mech, t, lam):
    assert csbp_laplace(t, lam, mech) == pytest.approx(csbp_ode(t, lam, 3.0, 0.0, 1.0, 0.5), rel=1e-8)


def test_csbp_laplace_with_quadratic_part_against_ode():
    m = BranchingMechanism(2.0, 0.4, 1.0, 0.6)
    for t, lam in [(0.3, 0.5), (1.0, 5.0), (2.0, 50.0)]:
        assert csbp_laplace(t, lam, m) == pytest.approx(csbp_ode(t, lam, 2.0, 0.4, 1.0, 0.6), rel=1e-8)


def test_csbp_laplace_infinite_lambda(mech):
    # v_t(inf) is the limit of v_t(lambda); the gap decays like lambda^{-beta}
    assert csbp_laplace(1.0, math.inf, mech) == pytest.approx(csbp_laplace(1.0, 1e24, mech), rel=1e-9)


@given(st.floats(0.01, 3.0), st.floats(0.01, 3.0), st.floats(0.05, 200.0))
def test_csbp_flow_moves_monotonically_toward_root(s, ds, lam):
    mech = BranchingMechanism(3.0, 0.0, 1.0, 0.5)
    a, b = csbp_laplace(s, lam, mech), csbp_laplace(s + ds, lam, mech)
    if lam < 9.0:
        assert lam <= a * (1 + 1e-12) and a <= b * (1 + 1e-12) and b <= 9.0 * (1 + 1e-12)
    else:
        assert lam >= a * (1 - 1e-12) and a >= b * (1 - 1e-12) and b >= 9.0 * (1 - 1e-12)


@given(st.floats(0.01, 2.0), st.floats(0.01, 2.0), st.floats(0.1, 20.0))
def test_csbp_semigroup_property(s, t, lam):
    mech = BranchingMechanism(3.0, 0.0, 1.0, 0.5)
    composed = csbp_laplace(s, csbp_laplace(t, lam, mech), mech)
    assert composed == pytest.approx(csbp_laplace(s + t, lam, mech), rel=1e-10)


def test_particle_laplace_converges_to_csbp(mech):
    target = math.exp(-csbp_laplace(1.0, 2.0, mech))
    gaps = [abs(particle_laplace(1.0, 2.0, n, mech, 1.0) - target) for n in (100, 1000, 10000)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[1] / gaps[2] == pytest.approx(10.0, rel=0.2)  # O(1/n)


def test_particle_extinction_by(mech):
    assert particle_extinction_by(0.0, 100, mech, 1.0) == 0.0
    p = [particle_extinction_by(t, 100, mech, 1.0) for t in (0.5, 1.0, 5.0, 30.0)]
    assert all(a < b for a, b in zip(p, p[1:]))
    # the particle system dies out with probability g^count where g is the root of the pgf
    law = offspring_law(100, mech)
    from scipy.optimize import brentq
    q = brentq(lambda s: law.pgf(s) - s, 0.0, 0.999)
    assert p[-1] == pytest.approx(q**100, rel=1e-6)


def test_abs_binomial_table_against_mpmath():
    tab = abs_binomial_table(1.5, 60)
    ref = [abs(float(mp.binomial(1.5, k))) for k in range(61)]
    np.testing.assert_allclose(tab, ref, rtol=1e-13)


# -- offspring law -------------------------------------------------------------------------------


def test_offspring_law_values(mech):
    law = offspring_law(100, mech)
    assert law.rate == pytest.approx(15.0)
    assert law.probs[1] == pytest.approx(0.2)
    assert law.probs[0] == pytest.approx(0.46667, abs=1e-5)
    assert law.probs[2] == pytest.approx(0.25)
    assert law.mean == pytest.approx(1.2)
    assert law.probs.sum() + law.tail_mass == pytest.approx(1.0, abs=1e-12)


def test_offspring_law_requires_large_n(mech):
    for n in (1, 5, 9):
        with pytest.raises(PreconditionError):
            offspring_law(n, mech)
    with pytest.raises(DomainError):
        offspring_law(0, mech)
    with pytest.raises(DomainError):
        offspring_law(100, mech, table_size=1)


@given(mechanisms, st.integers(1, 200), st.sampled_from([8, 32, 128]))
def test_offspring_law_is_a_distribution(m, extra, K):
    n = int(math.floor(extinction_root(m))) + extra
    law = offspring_law(n, m, table_size=K)
    assert np.all(law.probs >= -1e-15)
    assert law.probs.sum() + law.tail_mass == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= law.tail_mass < 1.0


def test_offspring_mean_by_exact_series(mech):
    law = offspring_law(100, mech)
    head = sum(k * p for k, p in enumerate(law.probs))
    # sum_{k>K} k p_k = K P(k>K) + sum_{m>=K} P(k>m), with P(k>m) = w |C(beta, m)|
    # and sum_{m>=1} |C(beta, m)| = 1 since (1 - 1)^beta = 0
    w = 10.0 / 15.0
    tail_surv = w * (1 - mp.fsum(abs(mp.binomial(0.5, m)) for m in range(1, law.K)))
    tail = law.K * law.tail_mass + float(tail_surv)
    assert head + tail == pytest.approx(1.2, rel=1e-10)


@pytest.mark.parametrize("s", [0.0, 0.3, 0.7, 0.95])
def test_offspring_pgf_matches_probabilities(mech, s):
    law = offspring_law(100, mech)
    K = 20000
    p = (10.0 / 15.0) * abs_binomial_table(1.5, K)
    p[: law.K + 1] = law.probs
    series = np.polyval(p[::-1], s) if s else p[0]
    assert law.pgf(s) == pytest.approx(series, abs=1e-12)


def test_offspring_survival_function(mech):
    law = offspring_law(100, mech)
    for m in (0, 3, law.K - 1, law.K, 1000):
        ref = 1.0 - law.probs[: m + 1].sum() if m <= law.K else None
        if ref is not None:
            assert law.survival(m) == pytest.approx(ref, abs=1e-14)
    assert law.survival(law.K) == pytest.approx(law.tail_mass, rel=1e-13)
    assert law.survival(10**4) == pytest.approx(
        (10 / 15) * abs(float(mp.binomial(0.5, 10**4))), rel=1e-10)


def test_offspring_sampling_matches_law(mech):
    law = offspring_law(100, mech)
    x = law.sample(np.random.default_rng(2024), 2_000_000)
    N = x.size
    # frequencies of the table part
    for k in range(5):
        p = law.probs[k]
        assert abs(np.mean(x == k) - p) <= 4 * math.sqrt(p * (1 - p) / N)
    # tail probabilities, including beyond the table
    for m in (20, 200, 1000):
        p = law.survival(m)
        assert abs(np.mean(x > m) - p) <= 4 * math.sqrt(p * (1 - p) / N) + 1e-9
    # the full mean has infinite variance; truncate at 1000 where the exact value is a finite sum
    cap = 1000
    exact = sum(law.survival(m) for m in range(cap))
    y = np.minimum(x, cap)
    assert abs(y.mean() - exact) <= 3 * y.std(ddof=1) / math.sqrt(N)


def test_offspring_tail_exponent(mech):
    law = offspring_law(100, mech)
    x = law.sample(np.random.default_rng(7), 2_000_000)
    slope = math.log(np.mean(x > 200) / np.mean(x > 20)) / math.log(10.0)
    assert slope == pytest.approx(-1.5, abs=0.1)


def test_single_draws_follow_the_same_law(mech):
    law = offspring_law(100, mech)
    rng = np.random.default_rng(3)
    x = np.array([law.sample(rng) for _ in range(20000)])
    assert abs(np.mean(x == 0) - law.probs[0]) < 4 * math.sqrt(0.25 / 20000)
    assert np.all(x >= 0)


def test_tail_draw_edges():
    assert tail_draw(128, 0.0, 0.5) == 129
    assert tail_draw(128, 0.5, 1.0) == 129
    assert tail_draw(128, 0.5, 0.25) == 131
    assert tail_draw(128, 1.0, 0.5) > 10**15


# -- mass martingale -----------------------------------------------------------------------------


def test_mass_martingale_laplace(mech):
    assert mass_martingale_laplace(0.7, 0.0, mech, 2.0) == pytest.approx(math.exp(-1.4))
    t, lam = 1.3, 0.8
    direct = math.exp(-2.0 * csbp_laplace(t, lam * math.exp(-3.0 * t), mech))
    assert mass_martingale_laplace(lam, t, mech, 2.0) == pytest.approx(direct, rel=1e-10)
    assert mass_martingale_laplace(lam, math.inf, mech, 2.0) == pytest.approx(
        mass_martingale_laplace(lam, 30.0, mech, 2.0), rel=1e-12)


@pytest.mark.parametrize("M", [0.5, 1.0, 4.0])
def test_mass_martingale_moment_at_time_zero(mech, M):
    assert mass_martingale_moment(1.25, 0.0, mech, M) == pytest.approx(M**1.25, rel=1e-7)


def test_mass_martingale_moment_first_moment_limit(mech):
    # as p -> 1 the moment tends to E H_t = M
    assert mass_martingale_moment(1.001, 1.0, mech, 2.0) == pytest.approx(2.0, rel=3e-3)


def test_mass_martingale_moment_grows_in_time(mech):
    vals = [mass_martingale_moment(1.25, t, mech, 1.0) for t in (0.25, 1.0, 3.0, math.inf)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert vals[-1] ** 0.8 == pytest.approx(1.43204, abs=1e-4)
    with pytest.raises(DomainError):
        mass_martingale_moment(1.6, 1.0, mech, 1.0)
    with pytest.raises(DomainError):
        mass_martingale_moment(1.2, 1.0, BranchingMechanism(3, 0.1, 1, 0.5), 1.0)
