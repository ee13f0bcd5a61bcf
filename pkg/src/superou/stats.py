"""Empirical characteristic functions and the pass/fail checks built on them."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import PreconditionError
from .ou_spectral import OUParams, SpectralFunction, classify
from .branching import BranchingMechanism

DEFAULT_THETAS = np.linspace(-3.0, 3.0, 25)
DEFAULT_JOINT_THETAS = np.linspace(-3.0, 3.0, 5)


@dataclass(frozen=True)
class EmpiricalSample:
    values: np.ndarray
    survival_conditioned: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[0] < 1:
            raise PreconditionError("sample must contain at least one value", "stats.EmpiricalSample")
        object.__setattr__(self, "values", v)

    @property
    def count(self) -> int:
        return int(self.values.shape[0])


@dataclass
class TestReport:
    """Outcome of one check. ``tolerance`` = ``mc_term`` + ``bias_allowance``."""

    __test__ = False  # not a pytest class

    name: str
    observed: float
    tolerance: float
    n: int
    se: float
    passed: bool
    mc_term: float = 0.0
    bias_allowance: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_plain(asdict(self)), sort_keys=True)

    def line(self) -> str:
        verdict, rel = ("PASS", "<=") if self.passed else ("FAIL", ">")
        return f"{verdict} {self.name}: observed {self.observed:.6g} {rel} tolerance {self.tolerance:.6g} (N={self.n})"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def make_report(name, observed, n, se=0.0, mc_term=0.0, bias_allowance=0.0, tolerance=None,
                **diagnostics) -> TestReport:
    tol = mc_term + bias_allowance if tolerance is None else tolerance
    return TestReport(name, float(observed), float(tol), int(n), float(se),
                      bool(observed <= tol), float(mc_term), float(bias_allowance), diagnostics)


# -- characteristic functions -----------------------------------------------------------------


def ecf(sample, thetas, chunk: int = 1 << 16) -> np.ndarray:
    """(1/N) sum_j exp(i theta x_j) for each theta."""
    x = np.asarray(sample.values if isinstance(sample, EmpiricalSample) else sample, dtype=float)
    if x.size < 1:
        raise PreconditionError("ecf needs at least one value", "stats.ecf")
    th = np.atleast_1d(np.asarray(thetas, dtype=float))
    out = np.zeros(th.shape, dtype=complex)
    for i in range(0, x.size, chunk):
        out += np.exp(1j * np.outer(th, x[i:i + chunk])).sum(axis=1)
    return out / x.size


def ecf_distance(sample, cf, thetas) -> float:
    """sup over the grid of |ecf(theta) - cf(theta)|; 0 for an empty grid."""
    th = np.atleast_1d(np.asarray(thetas, dtype=float))
    if th.size == 0:
        return 0.0
    target = np.array([cf(t) for t in th], dtype=complex)
    return float(np.max(np.abs(ecf(sample, th) - target)))


def ecf_noise_level(n: int) -> float:
    """Standard deviation scale 1/sqrt(N) of an ECF value."""
    return 1.0 / math.sqrt(n)


def independence_factorization(joint, thetas=None) -> float:
    """sup_theta |E exp(i theta . S) - prod_k E exp(i theta_k S_k)| on a tensor grid."""
    S = np.asarray(joint.values if isinstance(joint, EmpiricalSample) else joint, dtype=float)
    if S.ndim != 2 or S.shape[1] != 4:
        raise PreconditionError("joint sample must have shape (N, 4)", "stats.independence_factorization")
    grids = _axis_grids(thetas, 4)
    marg = [np.exp(1j * np.outer(g, S[:, k])) for k, g in enumerate(grids)]  # (G_k, N)
    best = 0.0
    mean_marg = [m.mean(axis=1) for m in marg]
    for i0 in range(len(grids[0])):
        a0 = marg[0][i0]
        for i1 in range(len(grids[1])):
            a01 = a0 * marg[1][i1]
            for i2 in range(len(grids[2])):
                a012 = a01 * marg[2][i2]
                joint_cf = marg[3] @ a012 / S.shape[0]
                prod = mean_marg[0][i0] * mean_marg[1][i1] * mean_marg[2][i2] * mean_marg[3]
                best = max(best, float(np.max(np.abs(joint_cf - prod))))
    return best


def _axis_grids(thetas, k):
    if thetas is None:
        return [DEFAULT_JOINT_THETAS] * k
    arr = [np.atleast_1d(np.asarray(t, dtype=float)) for t in thetas]
    if len(arr) == k and all(a.ndim == 1 for a in arr) and not np.isscalar(thetas[0]):
        return arr
    return [np.asarray(thetas, dtype=float)] * k


# -- martingale and mean checks -----------------------------------------------------------------


def martingale_drift(h_values, name: str = "martingale drift", z: float = 3.0) -> TestReport:
    """Pairwise differences of checkpoint means, each tested against 0 at ``z`` paired SEs.

    ``observed`` is the largest |mean difference| / SE (0 when all SEs vanish and the
    means agree); the tolerance is ``z``.
    """
    H = np.asarray(h_values, dtype=float)
    if H.ndim != 2 or H.shape[1] < 2:
        raise PreconditionError("need values at two or more checkpoints", "stats.martingale_drift")
    if H.shape[0] < 100:
        raise PreconditionError("need at least 100 replicates", "stats.martingale_drift")
    N = H.shape[0]
    worst, pairs = 0.0, []
    for i, j in itertools.combinations(range(H.shape[1]), 2):
        d = H[:, j] - H[:, i]
        m = float(d.mean())
        se = float(d.std(ddof=1) / math.sqrt(N))
        score = abs(m) / se if se > 0 else (0.0 if m == 0 else math.inf)
        pairs.append({"pair": [i, j], "mean_diff": m, "se": se, "z": score})
        worst = max(worst, score)
    return make_report(name, worst, N, tolerance=z, pairs=pairs,
                       means=H.mean(axis=0).tolist())


def mean_check(values, target: float, name: str = "mean", z: float = 3.0) -> TestReport:
    """|sample mean - target| against ``z`` standard errors (reported in SE units)."""
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / math.sqrt(v.size))
    dev = abs(float(v.mean()) - target)
    score = dev / se if se > 0 else (0.0 if dev == 0 else math.inf)
    return make_report(name, score, v.size, se=se, tolerance=z, mean=float(v.mean()), target=target)


def empirical_lp_norm(values, p: float) -> float:
    """(mean |v|^p)^{1/p}."""
    v = np.asarray(values, dtype=float)
    return float(np.mean(np.abs(v) ** p) ** (1.0 / p))


def hill_estimator(values, k: int) -> float:
    """Hill estimate of the upper tail index from the k largest positive values."""
    v = np.sort(np.asarray(values, dtype=float))[::-1]
    v = v[v > 0]
    if k >= v.size:
        raise PreconditionError("k must be smaller than the number of positive values",
                                "stats.hill_estimator")
    logs = np.log(v[:k]) - math.log(v[k])
    return float(1.0 / logs.mean())


# -- corollary -----------------------------------------------------------------------------------


def corollary_statistic(run, f: SpectralFunction, t: float, u: float):
    """Normalized X_t(f) per the corollary, or None for a run without mass.

    Without a critical part: (X_t(f) - x_t(f_l)) / ||X_t||^{1-beta~}, where the
    compensator uses H_u. With one: X_t(f) / (t ||X_t||)^{1-beta~}.
    """
    ou, mech = run.config.ou, run.config.mech
    dec = classify(f, ou, mech)
    mass_t = run.mass_at(t)
    if mass_t <= 0 or run.mass_at(u) <= 0:
        return None
    bt = mech.beta_tilde
    if not dec.f_c.is_zero():
        return run.functional(t, f) / (t * mass_t) ** (1.0 - bt)
    comp = sum(c * math.exp((mech.alpha - sum(p) * ou.b) * t) * run.h(u, p)
               for p, c in dec.f_l.coeffs.items())
    return (run.functional(t, f) - comp) / mass_t ** (1.0 - bt)


def corollary_check(runs, f: SpectralFunction, mech: BranchingMechanism, ou: OUParams, t: float,
                    u: float, tolerance: float, thetas=DEFAULT_THETAS, exponent=None,
                    name: str = "corollary") -> TestReport:
    """ECF distance of the corollary statistic from its stable target.

    Target exponent m[f_s] + m[-f_l] when f_c = 0, else m[f_c]; pass ``exponent``
    to reuse a precomputed value.
    """
    from .stable_limits import cf_eval, m_limit

    if f.is_zero():
        return make_report(name, 0.0, 0, tolerance=tolerance, vacuous=True)
    dec = classify(f, ou, mech)
    if exponent is None:
        if dec.f_c.is_zero():
            exponent = m_limit(dec.f_s, mech, ou) + m_limit(-dec.f_l, mech, ou)
        else:
            exponent = m_limit(dec.f_c, mech, ou)
    vals = [corollary_statistic(r, f, t, u) for r in runs if r.survived]
    vals = np.array([v for v in vals if v is not None])
    dist = ecf_distance(vals, lambda th: cf_eval(exponent, th), thetas)
    return make_report(name, dist, len(vals), mc_term=3.0 * ecf_noise_level(len(vals)),
                       bias_allowance=tolerance - 3.0 * ecf_noise_level(len(vals)),
                       tolerance=tolerance, critical=not dec.f_c.is_zero(),
                       exponent=[exponent.value.real, exponent.value.imag])
