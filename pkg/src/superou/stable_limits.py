"""Characteristic exponents of the stable limits and their numerical machinery.

With a = 1 + beta and the principal branch,

    m_t[f] = eta * int_0^t E[(-i T_u f(xi))^a] du,     xi ~ invariant law,

m[f] is its limit (or its time average when f has a critical part), and the
limit variable zeta^f has characteristic function theta -> exp(m[theta f]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import hermite_e
from scipy import integrate, optimize

from .branching import BranchingMechanism
from .errors import DomainError, NumericError
from .ou_spectral import (OUParams, QuadratureGrid, SpectralFunction, T_apply, classify,
                          decay_rate, evaluate, mehler_expectation, semigroup_apply)

TRUNCATION_TOL = 1e-10


def signed_stable_power(y, beta):
    """(-i y)^{1+beta} = |y|^{1+beta} exp(-i sgn(y) (1+beta) pi / 2); zero at y = 0."""
    y = np.asarray(y, dtype=float)
    a = 1.0 + float(beta)
    val = np.abs(y) ** a * np.exp(-1j * np.sign(y) * a * np.pi / 2.0)
    return val if val.ndim else complex(val)


def signed_power(y, a):
    """sgn(y) |y|^a."""
    return np.sign(y) * np.abs(y) ** a


@dataclass(frozen=True)
class StableCharExponent:
    value: complex
    index: float

    def __post_init__(self):
        object.__setattr__(self, "value", complex(self.value))
        if self.value.real > 1e-12 * max(1.0, abs(self.value)):
            raise DomainError(f"characteristic exponent {self.value} has positive real part",
                              "stable_limits.StableCharExponent")

    def __add__(self, other):
        if not isinstance(other, StableCharExponent):
            return NotImplemented
        if abs(other.index - self.index) > 1e-15:
            raise DomainError("cannot add exponents of different index",
                              "stable_limits.StableCharExponent")
        return StableCharExponent(self.value + other.value, self.index)

    def at(self, theta):
        """m[theta f] = |theta|^a (theta >= 0 ? m : conj m)."""
        theta = np.asarray(theta, dtype=float)
        val = np.abs(theta) ** self.index * np.where(theta >= 0, self.value, self.value.conjugate())
        return val if val.ndim else complex(val)


@dataclass(frozen=True)
class ComplexField:
    """Complex values of a function on the nodes of a quadrature grid."""

    grid: QuadratureGrid
    values: np.ndarray

    def mean(self) -> complex:
        """<g, phi> by the grid weights."""
        return complex(self.grid.expect(self.values))


# -- inner integral E[(-i g)^a] ---------------------------------------------------------------


def _poly_in_z(f: SpectralFunction, ou: OUParams) -> np.ndarray:
    """Coefficients (HermiteE basis, variable z = x / s) of a one-dimensional f."""
    deg = f.max_degree
    c = np.zeros(deg + 1)
    for (p,), v in f.coeffs.items():
        c[p] = v / math.sqrt(math.factorial(p))
    return c


def stable_moment(f: SpectralFunction, ou: OUParams, beta: float, grid: QuadratureGrid | None = None,
                  tol: float = 1e-13) -> complex:
    """E[(-i f(xi))^{1+beta}] for xi distributed by the invariant law.

    In one dimension (and no ``grid``) the integral over z = x / s is split at the
    real roots of f and done adaptively; otherwise the grid rule is used.
    """
    if f.is_zero():
        return 0j
    a = 1.0 + float(beta)
    if grid is not None or ou.dim != 1:
        if grid is None:
            raise DomainError("a quadrature grid is required for dim > 1", "stable_limits.stable_moment")
        vals = signed_stable_power(evaluate(f, grid.nodes, ou), beta)
        return complex(grid.expect(vals))
    coef = _poly_in_z(f, ou)
    if len(coef) == 1:
        return complex(signed_stable_power(coef[0], beta))
    L = 12.0 + 2.0 * math.sqrt(len(coef))
    roots = hermite_e.hermeroots(coef)
    cuts = sorted({float(r.real) for r in np.atleast_1d(roots)
                   if abs(r.imag) < 1e-9 * max(1.0, abs(r)) and -L < r.real < L})
    pts = [-L] + cuts + [L]
    norm_c = 1.0 / math.sqrt(2.0 * math.pi)

    def g_abs(z):
        return abs(hermite_e.hermeval(z, coef)) ** a * math.exp(-0.5 * z * z) * norm_c

    def g_sgn(z):
        v = hermite_e.hermeval(z, coef)
        return math.copysign(abs(v) ** a, v) * math.exp(-0.5 * z * z) * norm_c

    mom_abs = mom_sgn = err = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        if hi - lo < 1e-14:
            continue
        v1, e1 = integrate.quad(g_abs, lo, hi, epsabs=tol * 1e-2, epsrel=tol, limit=200)
        v2, e2 = integrate.quad(g_sgn, lo, hi, epsabs=tol * 1e-2, epsrel=tol, limit=200)
        mom_abs, mom_sgn, err = mom_abs + v1, mom_sgn + v2, err + e1 + e2
    if err > 1e3 * tol * max(1.0, mom_abs):
        raise NumericError("inner quadrature did not converge", "stable_limits.stable_moment",
                           achieved=err)
    return complex(math.cos(a * math.pi / 2) * mom_abs, -math.sin(a * math.pi / 2) * mom_sgn)


# -- m_t and m --------------------------------------------------------------------------------


def _time_integral(fn, lo, hi, tol, where):
    """Adaptive integral of a complex function of one variable."""
    val, err = integrate.quad_vec(lambda u: _pair(fn(u)), lo, hi, epsabs=tol, epsrel=tol,
                                  limit=400)
    if not np.all(np.isfinite(val)) or err > 1e3 * tol * max(1.0, float(np.abs(val).max())):
        raise NumericError("time quadrature did not converge", where, achieved=float(err))
    return complex(val[0], val[1])


def _pair(z):
    return np.array([z.real, z.imag])


def m_t(f: SpectralFunction, t: float, mech: BranchingMechanism, ou: OUParams,
        grid: QuadratureGrid | None = None, tol: float = 1e-12) -> complex:
    """eta * int_0^t E[(-i T_u f)^{1+beta}] du."""
    where = "stable_limits.m_t"
    if t < 0:
        raise DomainError("t must be non-negative", where)
    if f.is_zero() or t == 0:
        return 0j
    a = mech.index
    rates = {decay_rate(sum(p), ou, mech) for p in f.coeffs}
    if len(rates) == 1:
        # single decay rate: T_u f = e^{-r u} f, so the u-integral is explicit
        (r,) = rates
        inner = stable_moment(f, ou, mech.beta, grid)
        span = t if r == 0 else -math.expm1(-a * r * t) / (a * r)
        return mech.eta * inner * span
    fn = lambda u: stable_moment(T_apply(u, f, ou, mech), ou, mech.beta, grid)
    return mech.eta * _time_integral(fn, 0.0, t, tol, where)


def truncation_time(f: SpectralFunction, mech: BranchingMechanism, ou: OUParams,
                    tol: float = TRUNCATION_TOL) -> float:
    """U with eta * int_U^inf |E(-i T_u f)^a| du <= tol.

    E|T_u f|^a <= (E|T_u f|^2)^{a/2} <= (sum c_p^2)^{a/2} e^{-a delta u}, where delta
    is the slowest non-critical decay rate in the support of f.
    """
    a = mech.index
    delta = min(decay_rate(sum(p), ou, mech) for p in f.coeffs)
    if delta == 0:
        raise DomainError("f has a critical component; the integral does not converge",
                          "stable_limits.truncation_time")
    bound = mech.eta * sum(c * c for c in f.coeffs.values()) ** (a / 2.0)
    return max(0.0, math.log(bound / (a * delta * tol)) / (a * delta))


def m_limit(f: SpectralFunction, mech: BranchingMechanism, ou: OUParams,
            grid: QuadratureGrid | None = None) -> StableCharExponent:
    """m[f]: lim m_t[f] without a critical part, else eta E[(-i f_c)^{1+beta}]."""
    a = mech.index
    if f.is_zero():
        return StableCharExponent(0j, a)
    dec = classify(f, ou, mech)
    if not dec.f_c.is_zero():
        return StableCharExponent(mech.eta * stable_moment(dec.f_c, ou, mech.beta, grid), a)
    rates = {decay_rate(sum(p), ou, mech) for p in f.coeffs}
    if len(rates) == 1:
        (r,) = rates
        return StableCharExponent(mech.eta * stable_moment(f, ou, mech.beta, grid) / (a * r), a)
    U = truncation_time(f, mech, ou)
    return StableCharExponent(m_t(f, U, mech, ou, grid), a)


def cf_eval(m: StableCharExponent, theta):
    """exp(m[theta f])."""
    val = np.exp(m.at(theta))
    return val if np.ndim(val) else complex(val)


# -- sampling ----------------------------------------------------------------------------------


def cms_parameters(m: StableCharExponent) -> tuple[float, float]:
    """(scale, skewness) with -sigma^a (1 - i skew tan(pi a / 2)) = m."""
    a = m.index
    if m.value == 0:
        raise DomainError("zero exponent has no stable law", "stable_limits.cms_parameters")
    sig_a = -m.value.real
    if sig_a <= 0:
        raise NumericError(f"exponent {m.value} has no negative real part",
                           "stable_limits.cms_parameters")
    skew = m.value.imag / (sig_a * math.tan(math.pi * a / 2.0))
    if abs(skew) > 1.0 + 1e-9:
        raise NumericError(f"mapped skewness {skew} lies outside [-1, 1]",
                           "stable_limits.cms_parameters", achieved=skew)
    return sig_a ** (1.0 / a), max(-1.0, min(1.0, skew))


def stable_sample(m: StableCharExponent, rng: np.random.Generator, size=None):
    """Chambers-Mallows-Stuck draws with characteristic function cf_eval(m, .)."""
    a = m.index
    sigma, skew = cms_parameters(m)
    tan = math.tan(math.pi * a / 2.0)
    shift = math.atan(skew * tan) / a
    scale = (1.0 + skew * skew * tan * tan) ** (1.0 / (2.0 * a))
    v = np.pi * (rng.random(size) - 0.5)
    w = rng.standard_exponential(size)
    av = a * (v + shift)
    x = scale * np.sin(av) / np.cos(v) ** (1.0 / a) * (np.cos(v - av) / w) ** ((1.0 - a) / a)
    return sigma * x


# -- Z_1 ------------------------------------------------------------------------------------


def z1_bracket(f: SpectralFunction, mech: BranchingMechanism, ou: OUParams,
               grid: QuadratureGrid | None = None, tol: float = 1e-12) -> complex:
    """<Z_1 f, phi> = int_0^1 e^{alpha (1 - s)} eta E[(-i P^alpha_s f)^{1+beta}] ds."""
    if f.is_zero():
        return 0j
    a = mech.index
    if len({sum(p) for p in f.coeffs}) == 1:
        # P^alpha_s f = e^{(alpha - k b) s} f
        k = next(iter({sum(p) for p in f.coeffs}))
        c = (mech.alpha - k * ou.b) * a - mech.alpha
        span = 1.0 if c == 0 else math.expm1(c) / c
        return math.exp(mech.alpha) * mech.eta * stable_moment(f, ou, mech.beta, grid) * span
    fn = lambda s: math.exp(mech.alpha * (1.0 - s)) * stable_moment(
        semigroup_apply(s, f, ou, alpha=mech.alpha), ou, mech.beta, grid)
    return mech.eta * _time_integral(fn, 0.0, 1.0, tol, "stable_limits.z1_bracket")


def z1_field(f: SpectralFunction, mech: BranchingMechanism, ou: OUParams, grid: QuadratureGrid,
             s_nodes: int = 48, x_nodes: int = 48) -> ComplexField:
    """Z_1 f on the grid nodes, by Gauss-Legendre in s and Gauss-Hermite over the transition."""
    s, w = np.polynomial.legendre.leggauss(s_nodes)
    s, w = 0.5 * (s + 1.0), 0.5 * w
    total = np.zeros(len(grid.nodes), dtype=complex)
    for sk, wk in zip(s, w):
        g = semigroup_apply(sk, f, ou, alpha=mech.alpha)
        inner = lambda pts, g=g: signed_stable_power(evaluate(g, pts, ou), mech.beta)
        moved = mehler_expectation(inner, 1.0 - sk, grid.nodes, ou, nodes=x_nodes)
        total += wk * math.exp(mech.alpha * (1.0 - sk)) * mech.eta * moved
    return ComplexField(grid, total)


def z1_partial_sum(f: SpectralFunction, n: int, mech: BranchingMechanism, ou: OUParams,
                   grid: QuadratureGrid | None = None) -> tuple[complex, complex]:
    """(sum_{k=0}^n <Z_1 T_k f~, phi>, m_{n+1}[f]) with f~ = e^{alpha (beta~ - 1)} f."""
    ft = f * math.exp(mech.alpha * (mech.beta_tilde - 1.0))
    lhs = sum(z1_bracket(T_apply(float(k), ft, ou, mech), mech, ou, grid) for k in range(n + 1))
    return lhs, m_t(f, float(n + 1), mech, ou, grid)


# -- signed-power inequality ---------------------------------------------------------------------


def _ratio(x, y, beta):
    a = 1.0 + beta
    # the ratio is scale invariant; normalizing avoids subnormal powers
    big = np.maximum(np.abs(x), np.abs(y))
    big = np.where(big > 0, big, 1.0)
    x, y = x / big, y / big
    num = np.abs(signed_power(x + y, a) - signed_power(x, a) - signed_power(y, a))
    den = np.abs(x) * np.abs(y) ** beta + np.abs(x) ** beta * np.abs(y)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def power_inequality_constant(beta: float, grid_range: int = 10) -> dict:
    """Constants C in |(x+y)^<a> - x^<a> - y^<a>| <= C (|x||y|^beta + |x|^beta |y|).

    ``grid`` is the maximum over integer pairs in [-grid_range, grid_range]^2.
    ``sup`` is the true supremum: both sides are homogeneous of degree a, so it is
    the supremum over x = 1 of a one-variable ratio, found by a dense scan refined
    with a bounded minimizer.
    """
    ints = np.arange(-grid_range, grid_range + 1, dtype=float)
    X, Y = np.meshgrid(ints, ints)
    grid_c = float(np.max(_ratio(X, Y, beta)))
    r = np.concatenate([-np.logspace(-8, 8, 40001), np.logspace(-8, 8, 40001)])
    vals = _ratio(np.ones_like(r), r, beta)
    best = float(vals.max())
    i = int(np.argmax(vals))
    lo, hi = sorted((r[max(i - 1, 0)], r[min(i + 1, len(r) - 1)]))
    res = optimize.minimize_scalar(lambda y: -float(_ratio(1.0, y, beta)), bounds=(lo, hi),
                                   method="bounded", options={"xatol": 1e-14})
    sup = max(best, -float(res.fun))
    return {"grid": grid_c, "sup": sup, "argmax_ratio": float(res.x)}


def check_power_inequality(C: float, beta: float, x, y, rel_slack: float = 1e-12) -> float:
    """Largest violation ratio / C over the pairs; at most 1 + rel_slack when C is valid."""
    return float(np.max(_ratio(np.asarray(x, float), np.asarray(y, float), beta)) / C)
