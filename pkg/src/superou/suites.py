"""Verification suites: each turns simulated ensembles into TestReports.

The suites only aggregate; simulation and persistence live in ``simulator`` and
the command line in ``cli``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import stats
from .branching import (csbp_laplace, mass_martingale_moment,
                        particle_laplace)
from .ou_spectral import OUParams, SpectralFunction, classify, multi_indices, semigroup_apply
from .simulator import joint_statistic, upsilon
from .stable_limits import StableCharExponent, cf_eval, m_limit, z1_bracket

SUITES = ("means", "laplace", "martingale", "clt-small", "clt-critical", "clt-large",
          "joint-independence", "corollary", "upsilon")


@dataclass(frozen=True)
class SuiteSettings:
    """Times, grids and tolerances shared by the suites."""

    statistic_time: float = 6.0
    compensator_time: float = 9.0
    trend_times: tuple = (3.0, 4.0, 5.0, 6.0)
    upsilon_time: float = 4.0
    theta_range: tuple = (-3.0, 3.0)
    theta_points: int = 25
    joint_points: int = 5
    mean_time: float = 1.0
    martingale_times: tuple = (0.25, 0.5, 0.75, 1.0)
    norm_exponent: float = 1.25
    norm_factor: float = 1.5
    laplace_n: tuple = (100, 1000)
    laplace_lambdas: tuple = (0.5, 2.0)
    laplace_times: tuple = (0.5, 1.0)
    laplace_shrink: float = 5.0
    z: float = 3.0
    clt_tolerance: float = 0.05
    corollary_tolerance: float = 0.07
    joint_tolerance: float = 0.1
    upsilon_tolerance: float = 0.03
    trend_slack_se: float = 2.0
    extra: dict = field(default_factory=dict)

    @property
    def thetas(self) -> np.ndarray:
        return np.linspace(self.theta_range[0], self.theta_range[1], self.theta_points)

    @property
    def joint_thetas(self) -> np.ndarray:
        return np.linspace(self.theta_range[0], self.theta_range[1], self.joint_points)


def _full_function(ou: OUParams, degree_cap: int) -> SpectralFunction:
    return SpectralFunction({p: 1.0 for p in multi_indices(ou.dim, degree_cap)}, dim=ou.dim)


def _survivors(records):
    return [r for r in records if r.survived]


# -- first-moment, Laplace and martingale suites --------------------------------------------


def means(records, settings: SuiteSettings) -> list:
    """Ensemble mean of X_t(f) against mu(P^alpha_t f) for f in {1, phi_1, ..., phi_{e_d 2}}."""
    cfg = records[0].config
    ou, mech, t = cfg.ou, cfg.mech, settings.mean_time
    fns = {"1": SpectralFunction.eigen(0, dim=ou.dim)}
    if cfg.degree_cap >= 1:
        fns["phi_1"] = SpectralFunction.eigen((1,) + (0,) * (ou.dim - 1), dim=ou.dim)
    if cfg.degree_cap >= 2:
        fns["phi_2"] = SpectralFunction.eigen((2,) + (0,) * (ou.dim - 1), dim=ou.dim)
    out = []
    for name, f in fns.items():
        target = cfg.initial.apply(semigroup_apply(t, f, ou, alpha=mech.alpha), ou)
        vals = [r.functional(t, f) for r in records]
        out.append(stats.mean_check(vals, target, name=f"means {name} t={t:g}", z=settings.z))
    return out


def laplace(ensembles: dict, settings: SuiteSettings) -> list:
    """E exp(-lambda ||X_t||) against exp(-||mu|| v_t(lambda)) for each particle mass 1/n.

    The bias allowance is the exact finite-n discrepancy
    |E_n exp(-lambda ||X_t||) - exp(-||mu|| v_t(lambda))|, so it is O(1/n).
    """
    out, allowance = [], {}
    for n, records in sorted(ensembles.items()):
        cfg = records[0].config
        mech, M = cfg.mech, cfg.initial.total_mass
        for t in settings.laplace_times:
            mass = np.array([r.mass_at(t) for r in records])
            for lam in settings.laplace_lambdas:
                vals = np.exp(-lam * mass)
                target = math.exp(-M * csbp_laplace(t, lam, mech))
                bias = abs(particle_laplace(t, lam, n, mech, M) - target)
                allowance.setdefault(n, []).append(bias)
                se = float(vals.std(ddof=1) / math.sqrt(len(vals)))
                out.append(stats.make_report(
                    f"laplace n={n} t={t:g} lambda={lam:g}", abs(vals.mean() - target), len(vals),
                    se=se, mc_term=settings.z * se, bias_allowance=bias,
                    empirical=float(vals.mean()), target=target))
    if len(allowance) >= 2:
        ns = sorted(allowance)
        ratio = max(allowance[ns[0]]) / max(allowance[ns[-1]])
        out.append(stats.make_report(
            f"laplace allowance shrinks n={ns[0]}->{ns[-1]}", settings.laplace_shrink / ratio, 0,
            tolerance=1.0, ratio=ratio, required_ratio=settings.laplace_shrink,
            allowances={str(n): allowance[n] for n in ns}))
    return out


def martingale(records, settings: SuiteSettings) -> list:
    """Drift of H_t^p for every stored |p| and the L^{1+gamma} growth of H_t^0.

    The norm check compares the largest empirical ||H_t^0||_{1+gamma} with
    ``norm_factor`` times the exact limit norm ||H_inf^0||_{1+gamma}.
    """
    cfg = records[0].config
    ou, mech = cfg.ou, cfg.mech
    times = settings.martingale_times
    out = []
    for p in multi_indices(ou.dim, cfg.degree_cap):
        H = np.array([[r.h(t, p) for t in times] for r in records])
        out.append(stats.martingale_drift(H, name=f"martingale H^{''.join(map(str, p))}",
                                          z=settings.z))
    q = settings.norm_exponent
    H0 = np.array([[r.h(t, (0,) * ou.dim) for t in times] for r in records])
    norms = [stats.empirical_lp_norm(H0[:, k], q) for k in range(len(times))]
    M = cfg.initial.total_mass
    exact = [mass_martingale_moment(q, t, mech, M) ** (1.0 / q) for t in times]
    limit = mass_martingale_moment(q, math.inf, mech, M) ** (1.0 / q)
    out.append(stats.make_report(
        f"martingale L^{q:g} norm of H^0", max(norms), len(records),
        tolerance=settings.norm_factor * limit, norms=norms, exact_norms=exact,
        limit_norm=limit))
    return out


# -- distributional suites -------------------------------------------------------------------


def _clt_target(regime: str, f: SpectralFunction, mech, ou) -> tuple:
    dec = classify(f, ou, mech)
    part = {"small": dec.f_s, "critical": dec.f_c, "large": -dec.f_l}[regime]
    return part, m_limit(part, mech, ou)


def _coordinate(regime: str) -> int:
    return {"small": 1, "critical": 2, "large": 3}[regime]


def clt(records, regime: str, settings: SuiteSettings) -> list:
    """ECF distance of one normalized coordinate of S(t) from exp(m[theta f_regime]).

    Also checks that the distance does not increase across ``trend_times`` by more
    than ``trend_slack_se`` ECF standard errors.
    """
    cfg = records[0].config
    ou, mech = cfg.ou, cfg.mech
    f = _full_function(ou, cfg.degree_cap)
    part, exponent = _clt_target(regime, f, mech, ou)
    name = f"clt-{regime}"
    if part.is_zero():
        return [stats.make_report(name, 0.0, 0, tolerance=settings.clt_tolerance, vacuous=True)]
    dec = classify(f, ou, mech)
    alive = _survivors(records)
    u = settings.compensator_time
    k = _coordinate(regime)
    cf = lambda th: cf_eval(exponent, th)

    def distance(t):
        S = [joint_statistic(r, dec, t, u) for r in alive]
        vals = np.array([s.as_tuple()[k] for s in S if s is not None])
        return stats.ecf_distance(vals, cf, settings.thetas), len(vals)

    dist, N = distance(settings.statistic_time)
    mc = settings.z * stats.ecf_noise_level(N)
    reports = [stats.make_report(
        f"{name} t={settings.statistic_time:g}", dist, N, mc_term=mc,
        bias_allowance=settings.clt_tolerance - mc, tolerance=settings.clt_tolerance,
        exponent=[exponent.value.real, exponent.value.imag], compensator_time=u)]
    trend = [distance(t)[0] for t in settings.trend_times]
    rises = [b - a for a, b in zip(trend, trend[1:])]
    slack = settings.trend_slack_se * stats.ecf_noise_level(N)
    reports.append(stats.make_report(
        f"{name} trend", max(rises) if rises else 0.0, N, mc_term=slack, tolerance=slack,
        times=list(settings.trend_times), distances=trend))
    return reports


def joint_sample(records, settings: SuiteSettings, t: float | None = None) -> np.ndarray:
    cfg = records[0].config
    f = _full_function(cfg.ou, cfg.degree_cap)
    dec = classify(f, cfg.ou, cfg.mech)
    t = settings.statistic_time if t is None else t
    S = [joint_statistic(r, dec, t, settings.compensator_time) for r in _survivors(records)]
    return np.array([s.as_tuple() for s in S if s is not None])


def joint_independence(records, settings: SuiteSettings) -> list:
    """Factorization distance of S(t), and its coordinate-duplication negative control.

    The control report stores the negated distance so that it passes (observed <=
    tolerance) exactly when the duplicated sample is detected as dependent.
    """
    S = joint_sample(records, settings)
    N = len(S)
    dist = stats.independence_factorization(S, settings.joint_thetas)
    mc = settings.z * stats.ecf_noise_level(N)
    tol = settings.joint_tolerance
    dup = np.column_stack([S[:, 1]] * 4)
    control = stats.independence_factorization(dup, settings.joint_thetas)
    return [
        stats.make_report(f"joint-independence t={settings.statistic_time:g}", dist, N,
                          mc_term=mc, bias_allowance=tol - mc, tolerance=tol),
        stats.make_report("joint-independence duplication control", -control, N,
                          tolerance=-tol, distance=control, required_above=tol),
    ]


def corollary(records, settings: SuiteSettings) -> list:
    """Both corollary cases: f = phi_0 + phi_2 style (no critical part) and phi_1 + phi_2."""
    cfg = records[0].config
    ou, mech = cfg.ou, cfg.mech
    dec = classify(_full_function(ou, cfg.degree_cap), ou, mech)
    cases = {}
    if not dec.f_s.is_zero() and not dec.f_l.is_zero():
        cases["large+small"] = dec.f_l + dec.f_s
    if not dec.f_c.is_zero() and not dec.f_s.is_zero():
        cases["critical+small"] = dec.f_c + dec.f_s
    if not cases:
        return [stats.corollary_check([], SpectralFunction.zero(ou.dim), mech, ou,
                                      settings.statistic_time, settings.compensator_time,
                                      settings.corollary_tolerance, name="corollary")]
    alive = _survivors(records)
    return [stats.corollary_check(alive, f, mech, ou, settings.statistic_time,
                                  settings.compensator_time, settings.corollary_tolerance,
                                  settings.thetas, name=f"corollary {name}")
            for name, f in cases.items()]


def upsilon_suite(records, settings: SuiteSettings, f: SpectralFunction | None = None) -> list:
    """|mean exp(i Upsilon_t^f) - exp(<Z_1 f, phi>)| at theta = 1.

    ``f`` defaults to the highest stored degree along the first axis.
    """
    cfg = records[0].config
    ou, mech = cfg.ou, cfg.mech
    if f is None:
        f = SpectralFunction.eigen((cfg.degree_cap,) + (0,) * (ou.dim - 1), dim=ou.dim)
    t = settings.upsilon_time
    vals = [upsilon(r, f, t) for r in _survivors(records)]
    vals = np.array([v for v in vals if v is not None])
    z = z1_bracket(f, mech, ou)
    emp = complex(np.mean(np.exp(1j * vals)))
    exponent = StableCharExponent(z, mech.index)
    grid_dist = stats.ecf_distance(vals, lambda th: cf_eval(exponent, th), settings.thetas)
    N = len(vals)
    mc = settings.z * stats.ecf_noise_level(N)
    tol = settings.upsilon_tolerance
    return [stats.make_report(f"upsilon t={t:g}", abs(emp - np.exp(z)), N, mc_term=mc,
                              bias_allowance=tol - mc, tolerance=tol,
                              empirical=[emp.real, emp.imag], exponent=[z.real, z.imag],
                              grid_distance=grid_dist)]


def run_suite(name: str, ensembles: dict, settings: SuiteSettings) -> list:
    """Dispatch by suite name. ``ensembles`` maps particle count n to run records."""
    main = ensembles[max(ensembles)]
    if name == "means":
        return means(main, settings)
    if name == "laplace":
        return laplace(ensembles, settings)
    if name == "martingale":
        return martingale(main, settings)
    if name.startswith("clt-"):
        return clt(main, name[4:], settings)
    if name == "joint-independence":
        return joint_independence(main, settings)
    if name == "corollary":
        return corollary(main, settings)
    if name == "upsilon":
        return upsilon_suite(main, settings)
    raise KeyError(name)
