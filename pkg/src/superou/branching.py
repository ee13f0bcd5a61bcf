"""Stable branching mechanism psi(z) = -alpha z + rho z^2 + eta z^{1+beta}.

Also: Grey's integral, the extinction root, the total-mass Laplace exponent
v_t(lambda) solving dv/dt = -psi(v), and the offspring law of the particle
approximation whose generating function is s + psi(n(1-s)) / (n gamma_n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special

from .errors import DivergenceError, DomainError, NumericError, PreconditionError


@dataclass(frozen=True)
class BranchingMechanism:
    alpha: float
    rho: float
    eta: float
    beta: float

    def __post_init__(self):
        where = "branching.BranchingMechanism"
        if not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}", where)
        if not self.rho >= 0:
            raise DomainError(f"rho must be non-negative, got {self.rho}", where)
        if not self.eta > 0:
            raise DomainError(f"eta must be positive, got {self.eta}", where)
        if not 0 < self.beta < 1:
            raise DomainError(f"beta must lie in (0, 1), got {self.beta}", where)

    @property
    def index(self) -> float:
        """Stable index a = 1 + beta."""
        return 1.0 + float(self.beta)

    @property
    def beta_tilde(self) -> float:
        return float(self.beta) / (1.0 + float(self.beta))

    @property
    def threshold(self) -> float:
        """alpha * beta~, the rate separating the three regimes."""
        return float(self.alpha) * self.beta_tilde


def psi_eval(z, mech: BranchingMechanism):
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr < 0):
        raise DomainError("psi is defined for z >= 0 only", "branching.psi_eval")
    a, r, e, be = (float(v) for v in (mech.alpha, mech.rho, mech.eta, mech.beta))
    val = -a * z_arr + r * z_arr**2 + e * z_arr ** (1.0 + be)
    return val if val.ndim else float(val)


def _compensated_exp(x):
    """e^{-x} - 1 + x without cancellation for small x."""
    if x < 1e-3:
        return x * x * (0.5 - x / 6.0 + x * x / 24.0 - x**3 / 120.0)
    return math.expm1(-x) + x


def psi_levy_integral(z: float, mech: BranchingMechanism, rel_tol: float = 1e-10) -> float:
    """psi(z) with the jump part computed from the stable Levy density numerically.

    pi(dy) = eta dy / (Gamma(-1-beta) y^{2+beta}).
    """
    if z < 0:
        raise DomainError("psi is defined for z >= 0 only", "branching.psi_levy_integral")
    be = float(mech.beta)
    dens = float(mech.eta) / special.gamma(-1.0 - be)

    def integrand(y):
        return _compensated_exp(z * y) * y ** (-2.0 - be)

    # Substituting y = w / z puts the kink of the integrand at w ~ 1.
    scale = 1.0 / max(z, 1e-300)
    pieces = [(0.0, scale), (scale, 30.0 * scale)]
    total, err = 0.0, 0.0
    for lo, hi in pieces:
        v, e = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=rel_tol, limit=200)
        total, err = total + v, err + e
    # Beyond 30/z the exponential is negligible: integrate (zy - 1) y^{-2-beta} exactly.
    y0 = 30.0 * scale
    tail = z * y0 ** (-be) / be - y0 ** (-1.0 - be) / (1.0 + be)
    tail += integrate.quad(lambda y: math.exp(-z * y) * y ** (-2.0 - be), y0, np.inf)[0]
    jump = dens * (total + tail)
    if err * abs(dens) > 1e3 * rel_tol * max(abs(jump), 1e-300):
        raise NumericError("Levy integral did not converge", "branching.psi_levy_integral",
                           achieved=err * abs(dens))
    return -float(mech.alpha) * z + float(mech.rho) * z * z + jump


def extinction_root(mech: BranchingMechanism) -> float:
    """Largest root v of psi; for rho = 0 it is (alpha / eta)^{1/beta}."""
    a, r, e, be = (float(v) for v in (mech.alpha, mech.rho, mech.eta, mech.beta))
    if r == 0.0:
        return (a / e) ** (1.0 / be)
    # psi(z)/z = -a + r z + e z^beta is increasing; bracket its root.
    g = lambda z: -a + r * z + e * z**be
    hi = 1.0
    while g(hi) <= 0:
        hi *= 2.0
    return optimize.brentq(g, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def extinction_prob(mech: BranchingMechanism, total_mass: float) -> float:
    """exp(-||mu|| v_bar), the probability that the total mass ever hits zero."""
    if total_mass < 0:
        raise DomainError("total mass must be non-negative", "branching.extinction_prob")
    return math.exp(-total_mass * extinction_root(mech))


def grey_check(mech, z_prime: float, rel_tol: float = 1e-10) -> float:
    """Value of the integral of 1/psi over (z_prime, infinity).

    Substituting z = z_prime / w maps the range to (0, 1]; when eta > 0 the
    integrand behaves like w^{beta-1} near 0, which an algebraic quadrature
    weight absorbs.
    """
    where = "branching.grey_check"
    if not z_prime > 0:
        raise DomainError("z_prime must be positive", where)
    a, r, e = float(mech.alpha), float(mech.rho), float(mech.eta)
    be = float(getattr(mech, "beta", 0.5))
    if e <= 0 and r <= 0:
        raise DivergenceError("psi grows at most linearly, so the integral diverges", where)
    psi = lambda z: -a * z + r * z * z + max(e, 0.0) * z ** (1.0 + be)
    # psi is convex with psi(0) = 0, so positivity just past z_prime and at z_prime suffices.
    if psi(z_prime) <= 0:
        raise PreconditionError(f"psi(z_prime) = {psi(z_prime):.6g} <= 0; need z_prime beyond the "
                                "extinction root", where)
    if e > 0:
        g = lambda w: z_prime * w ** (1.0 - be) / (w * w * psi(z_prime / w)) if w > 0 else \
            z_prime ** (-be) / e
        val, err = integrate.quad(g, 0.0, 1.0, weight="alg", wvar=(be - 1.0, 0.0),
                                  epsabs=0.0, epsrel=rel_tol, limit=200)
    else:
        g = lambda w: z_prime / (w * w * psi(z_prime / w)) if w > 0 else 1.0 / (r * z_prime)
        val, err = integrate.quad(g, 0.0, 1.0, epsabs=0.0, epsrel=rel_tol, limit=200)
    if not np.isfinite(val) or err > 1e3 * rel_tol * abs(val):
        raise NumericError("Grey integral quadrature did not converge", where, achieved=err)
    return float(val)


def _log1p_scaled_expm1(c: float, x: float) -> float:
    """log(1 + c (e^x - 1)) for c > 0, x >= 0 without overflow."""
    if x < 30.0:
        return math.log1p(c * math.expm1(x))
    return math.log(c) + x + math.log1p((1.0 - c) / c * math.exp(-x))


def csbp_laplace(t: float, lam: float, mech: BranchingMechanism) -> float:
    """v_t(lambda) with E exp(-lambda ||X_t||) = exp(-||mu|| v_t(lambda)).

    ``lam = inf`` gives v_t(inf) = -log P(||X_t|| = 0) / ||mu|| for t > 0.
    """
    where = "branching.csbp_laplace"
    if t < 0:
        raise DomainError("t must be non-negative", where)
    if not lam > 0:
        raise DomainError("lambda must be positive", where)
    if t == 0:
        return float(lam)
    a, r, e, be = (float(v) for v in (mech.alpha, mech.rho, mech.eta, mech.beta))
    if r == 0.0:
        if math.isinf(lam):
            return math.exp(a * t - math.log((e / a) * math.expm1(a * be * t)) / be)
        c = (e / a) * lam**be
        return math.exp(a * t + math.log(lam) - _log1p_scaled_expm1(c, a * be * t) / be)
    if math.isinf(lam):
        raise DomainError("lambda = inf requires rho = 0", where)
    sol = integrate.solve_ivp(lambda _, v: [-psi_eval(max(v[0], 0.0), mech)], (0.0, t), [lam],
                              method="DOP853", rtol=1e-12, atol=1e-14 * max(1.0, lam))
    if not sol.success:
        raise NumericError(sol.message, where)
    return float(sol.y[0, -1])


def particle_laplace(t: float, lam: float, n: int, mech: BranchingMechanism, total_mass: float) -> float:
    """Exact E exp(-lambda ||X_t||) for the particle system with mass 1/n per particle.

    With w = n(1 - u) the one-particle generating function u obeys dw/dt = -psi(w),
    so E s^{N_t} = 1 - v_t(n(1 - s)) / n with s = exp(-lambda / n).
    """
    count = round(n * total_mass)
    w0 = -n * math.expm1(-lam / n)
    return (1.0 - csbp_laplace(t, w0, mech) / n) ** count


def particle_extinction_by(t: float, n: int, mech: BranchingMechanism, total_mass: float) -> float:
    """Exact P(||X_t|| = 0) for the particle system started from n * ||mu|| particles."""
    count = round(n * total_mass)
    if t == 0:
        return 0.0 if count else 1.0
    return (1.0 - csbp_laplace(t, float(n), mech) / n) ** count


def abs_binomial_table(a: float, kmax: int) -> np.ndarray:
    """|C(a, k)| for k = 0..kmax via the ratio (k - a) / (k + 1) from k = 2 on."""
    out = np.empty(kmax + 1)
    out[0] = 1.0
    if kmax >= 1:
        out[1] = abs(a)
    if kmax >= 2:
        out[2] = abs(a * (a - 1.0) / 2.0)
    for k in range(2, kmax):
        out[k + 1] = out[k] * (k - a) / (k + 1.0)
    return out


@dataclass(frozen=True)
class OffspringLaw:
    """Offspring distribution with a table for k <= K and an exact sampler beyond.

    ``probs[k]`` for k <= K; ``tail_mass`` is the exact remaining mass, and the
    tail k > K is drawn as K + 1 + Geometric(1 - U) with U ~ Beta(K + 1 - a, a),
    which reproduces p_k proportional to |C(a, k)| there.
    """

    n: int
    rate: float
    probs: np.ndarray
    tail_mass: float
    mech: BranchingMechanism

    @property
    def K(self) -> int:
        return len(self.probs) - 1

    @property
    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)

    @property
    def mean(self) -> float:
        return 1.0 + float(self.mech.alpha) / self.rate

    def pgf(self, s):
        """Closed form g_n(s) = s + psi(n(1 - s)) / (n gamma_n) on [0, 1]."""
        s = np.asarray(s, dtype=float)
        val = s + psi_eval(self.n * (1.0 - s), self.mech) / (self.n * self.rate)
        return val if np.ndim(val) else float(val)

    def tail_beta_params(self) -> tuple[float, float]:
        a = self.mech.index
        return self.K + 1.0 - a, a

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Draw offspring counts: a uniform per draw, then a Beta and a uniform per tail draw."""
        if size is None:
            return self._draw(rng, rng.random())
        u = rng.random(size)
        out = np.searchsorted(self.cdf, u, side="right").astype(np.int64)
        tail = np.flatnonzero(u >= self.cdf[-1])
        if tail.size:
            p, q = self.tail_beta_params()
            ub = rng.beta(p, q, tail.size)
            v = 1.0 - rng.random(tail.size)
            out[tail] = [tail_draw(self.K, x, y) for x, y in zip(ub, v)]
        return out

    def _draw(self, rng, u):
        cdf = self.cdf
        if u < cdf[-1]:
            return int(np.searchsorted(cdf, u, side="right"))
        p, q = self.tail_beta_params()
        return tail_draw(self.K, rng.beta(p, q), 1.0 - rng.random())

    def survival(self, m: int) -> float:
        """Exact P(k > m).

        Beyond the table this is eta n^beta / gamma_n |C(beta, m)|, from
        sum_{k > m} |C(1 + beta, k)| = |C(beta, m)|; it requires rho = 0 for m < 2.
        """
        if m < 0:
            return 1.0
        if m < self.K:
            return float(max(0.0, 1.0 - self.cdf[m]))
        weight = float(self.mech.eta) * self.n ** float(self.mech.beta) / self.rate
        return float(weight * abs_binomial_table(float(self.mech.beta), m)[m])


def tail_draw(K: int, u_beta: float, v: float) -> int:
    """K + 1 + floor(log v / log u): geometric on {0, 1, ...} with success 1 - u."""
    if u_beta <= 0.0:
        return K + 1
    lu = math.log(u_beta)
    if lu == 0.0:
        return np.iinfo(np.int64).max // 4
    j = math.floor(math.log(v) / lu)
    return int(K + 1 + min(j, np.iinfo(np.int64).max // 4))


def offspring_law(n: int, mech: BranchingMechanism, table_size: int = 128) -> OffspringLaw:
    where = "branching.offspring_law"
    if int(n) != n or n < 1:
        raise DomainError("n must be a positive integer", where)
    if table_size < 2:
        raise DomainError("table_size must be at least 2", where)
    a, r, e, be = (float(v) for v in (mech.alpha, mech.rho, mech.eta, mech.beta))
    vbar = extinction_root(mech)
    if not n > vbar:
        raise PreconditionError(f"n = {n} must exceed the extinction root {vbar:.6g} so that p_0 >= 0",
                                where)
    gamma = 2.0 * r * n + (1.0 + be) * e * n**be
    if a > gamma:
        raise PreconditionError(f"p_1 = alpha / gamma_n = {a / gamma:.6g} exceeds 1", where)
    weight = e * n**be / gamma  # eta n^{1+beta} / (n gamma)
    binom = abs_binomial_table(1.0 + be, table_size)
    probs = weight * binom
    probs[0] = psi_eval(float(n), mech) / (n * gamma)
    probs[1] = a / gamma
    probs[2] += r * n / gamma
    tail = weight * abs_binomial_table(be, table_size)[table_size]
    return OffspringLaw(int(n), gamma, probs, float(tail), mech)


def mass_martingale_laplace(lam: float, t: float, mech: BranchingMechanism, total_mass: float) -> float:
    """E exp(-lambda H_t) for H_t = e^{-alpha t} ||X_t||; ``t = inf`` gives the limit H_inf.

    With rho = 0, w = v^{-beta} solves a linear equation, so
    v_t(lambda e^{-alpha t}) = ((eta/alpha)(1 - e^{-alpha beta t}) + lambda^{-beta})^{-1/beta}.
    """
    where = "branching.mass_martingale_laplace"
    if lam < 0 or t < 0:
        raise DomainError("lambda and t must be non-negative", where)
    if lam == 0:
        return 1.0
    a, e, be = float(mech.alpha), float(mech.eta), float(mech.beta)
    if mech.rho == 0:
        decay = 1.0 if math.isinf(t) else -math.expm1(-a * be * t)
        v = ((e / a) * decay + lam ** (-be)) ** (-1.0 / be)
    else:
        if math.isinf(t):
            raise DomainError("t = inf requires rho = 0", where)
        v = csbp_laplace(t, lam * math.exp(-mech.alpha * t), mech)
    return math.exp(-total_mass * v)


def _expm1_minus_x(x: float) -> float:
    """e^x - 1 - x without cancellation."""
    if abs(x) < 1e-2:
        return x * x * (0.5 + x * (1.0 / 6.0 + x * (1.0 / 24.0 + x / 120.0)))
    return math.expm1(x) - x


def mass_martingale_moment(p: float, t: float, mech: BranchingMechanism, total_mass: float) -> float:
    """E[H_t^p] for 1 < p < 1 + beta and rho = 0, from the Laplace transform.

    For 1 < p < 2, y^p = Gamma(-p)^{-1} int_0^inf (e^{-l y} - 1 + l y) l^{-p-1} dl.
    """
    where = "branching.mass_martingale_moment"
    if not 1.0 < p < 1.0 + mech.beta:
        raise DomainError("p must lie in (1, 1 + beta)", where)
    if mech.rho != 0:
        raise DomainError("the moment formula needs rho = 0", where)
    be = float(mech.beta)
    c = (mech.eta / mech.alpha) * (1.0 if math.isinf(t) else -math.expm1(-mech.alpha * be * t))
    if c == 0:
        return total_mass**p
    M = total_mass

    def integrand(s):
        lam = math.exp(s)
        shrink = math.log1p(c * math.exp(be * s)) / be  # v = lam e^{-shrink}
        v = lam * math.exp(-shrink)
        gap = -lam * math.expm1(-shrink)  # lam - v
        return (_expm1_minus_x(-M * v) + M * gap) * math.exp(-p * s)

    total = 0.0
    for lo, hi in ((-80.0, -20.0), (-20.0, -5.0), (-5.0, 5.0), (5.0, 20.0), (20.0, 80.0)):
        val, _ = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-11, limit=200)
        total += val
    # beyond l = e^80, v has reached v_inf = c^{-1/beta}; integrate the remainder exactly
    v_inf = c ** (-1.0 / be)
    total += math.expm1(-M * v_inf) * math.exp(-80.0 * p) / p + M * math.exp(80.0 * (1.0 - p)) / (p - 1.0)
    return total / math.gamma(-p)
