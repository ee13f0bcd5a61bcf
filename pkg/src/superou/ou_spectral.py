"""Ornstein-Uhlenbeck motion: invariant law, Hermite eigenbasis, semigroups.

The OU generator is ``L = (sigma^2 / 2) * Laplacian - b x . grad``. Its invariant
law is centred Gaussian with per-axis standard deviation ``s = sigma / sqrt(2b)``
and the normalized eigenfunctions are

    phi_p(x) = prod_k He_{p_k}(x_k / s) / sqrt(p_k!),    P_t phi_p = exp(-b|p|t) phi_p,

with ``He_n`` the probabilists' Hermite polynomials.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np
from scipy import special
from scipy.stats import norm, qmc

from .errors import DomainError

REGIME_TOL = 1e-12


@dataclass(frozen=True)
class OUParams:
    sigma: float
    b: float
    dim: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}", "ou_spectral.OUParams")
        if not self.b > 0:
            raise DomainError(f"b must be positive, got {self.b}", "ou_spectral.OUParams")
        if int(self.dim) != self.dim or self.dim < 1:
            raise DomainError(f"dim must be a positive integer, got {self.dim}", "ou_spectral.OUParams")

    @property
    def scale(self) -> float:
        """Stationary per-axis standard deviation sigma / sqrt(2b)."""
        return float(self.sigma) / math.sqrt(2.0 * float(self.b))


def _key(p, dim: int) -> tuple:
    if isinstance(p, (int, np.integer)):
        p = (int(p),)
    p = tuple(int(v) for v in p)
    if len(p) != dim:
        raise DomainError(f"multi-index {p} does not have length {dim}", "ou_spectral.MultiIndex")
    if any(v < 0 for v in p):
        raise DomainError(f"multi-index {p} has a negative entry", "ou_spectral.MultiIndex")
    return p


def degree(p) -> int:
    if isinstance(p, (int, np.integer)):
        return int(p)
    return int(sum(p))


def multi_indices(dim: int, max_degree: int) -> list[tuple]:
    """All p in Z_+^dim with |p| <= max_degree, ordered by degree then lexicographically."""
    out = []
    for k in range(max_degree + 1):
        level = [p for p in itertools.product(range(k + 1), repeat=dim) if sum(p) == k]
        out.extend(sorted(level, reverse=True))
    return out


class SpectralFunction:
    """A polynomial given by finitely many coefficients <f, phi_p>_phi.

    Immutable; zero coefficients are dropped at construction.
    """

    __slots__ = ("_coeffs", "dim")

    def __init__(self, coeffs: Mapping | Iterable = (), dim: int = 1):
        items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
        acc: dict[tuple, float] = {}
        for p, c in items:
            k = _key(p, dim)
            acc[k] = acc.get(k, 0.0) + float(c)
        object.__setattr__(self, "dim", int(dim))
        object.__setattr__(
            self, "_coeffs", MappingProxyType({k: v for k, v in sorted(acc.items()) if v != 0.0})
        )

    def __setattr__(self, name, value):
        raise AttributeError("SpectralFunction is immutable")

    @classmethod
    def eigen(cls, p, coeff: float = 1.0, dim: int = 1) -> "SpectralFunction":
        return cls({_key(p, dim): coeff}, dim)

    @classmethod
    def zero(cls, dim: int = 1) -> "SpectralFunction":
        return cls({}, dim)

    @property
    def coeffs(self) -> Mapping[tuple, float]:
        return self._coeffs

    @property
    def max_degree(self) -> int:
        return max((sum(p) for p in self._coeffs), default=0)

    def is_zero(self) -> bool:
        return not self._coeffs

    def coeff(self, p) -> float:
        return self._coeffs.get(_key(p, self.dim), 0.0)

    def map_coeffs(self, fn) -> "SpectralFunction":
        """New function with coefficient c_p replaced by fn(p, c_p)."""
        return SpectralFunction({p: fn(p, c) for p, c in self._coeffs.items()}, self.dim)

    def _check(self, other):
        if not isinstance(other, SpectralFunction):
            return NotImplemented
        if other.dim != self.dim:
            raise DomainError("dimension mismatch", "ou_spectral.SpectralFunction")
        return other

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        merged = dict(self._coeffs)
        for p, c in other._coeffs.items():
            merged[p] = merged.get(p, 0.0) + c
        return SpectralFunction(merged, self.dim)

    def __neg__(self):
        return self.map_coeffs(lambda p, c: -c)

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __mul__(self, scalar):
        if not isinstance(scalar, (int, float, np.floating, np.integer)):
            return NotImplemented
        return self.map_coeffs(lambda p, c: c * float(scalar))

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, SpectralFunction):
            return NotImplemented
        return self.dim == other.dim and dict(self._coeffs) == dict(other._coeffs)

    def __hash__(self):
        return hash((self.dim, tuple(self._coeffs.items())))

    def __repr__(self):
        terms = ", ".join(f"{p}: {c:.6g}" for p, c in self._coeffs.items())
        return f"SpectralFunction({{{terms}}}, dim={self.dim})"

    def __call__(self, x, ou: OUParams):
        return evaluate(self, x, ou)


@dataclass(frozen=True)
class RegimeDecomposition:
    f_s: SpectralFunction
    f_c: SpectralFunction
    f_l: SpectralFunction

    def total(self) -> SpectralFunction:
        return self.f_s + self.f_c + self.f_l


# -- evaluation ---------------------------------------------------------------

def hermite_table(z, nmax: int) -> np.ndarray:
    """Normalized probabilists' Hermite values He_n(z)/sqrt(n!) for n = 0..nmax.

    Returns an array of shape ``(nmax + 1,) + np.shape(z)``.
    """
    z = np.asarray(z, dtype=float)
    out = np.empty((nmax + 1,) + z.shape)
    out[0] = 1.0
    if nmax >= 1:
        out[1] = z
    for n in range(1, nmax):
        out[n + 1] = (z * out[n] - math.sqrt(n) * out[n - 1]) / math.sqrt(n + 1)
    return out


def _as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != dim:
        raise DomainError(f"points must have trailing dimension {dim}", "ou_spectral.points")
    return x


def eigenfunction_eval(p, x, ou: OUParams):
    """phi_p(x). For ``dim == 1`` plain scalars/arrays of positions are accepted."""
    p = _key(p, ou.dim)
    pts = _as_points(x, ou.dim)
    z = pts / ou.scale
    val = np.ones(pts.shape[:-1])
    for k, pk in enumerate(p):
        if pk:
            val = val * hermite_table(z[..., k], pk)[pk]
    return val if val.ndim else float(val)


def evaluate(f: SpectralFunction, x, ou: OUParams):
    """f(x) = sum_p <f, phi_p> phi_p(x)."""
    if f.dim != ou.dim:
        raise DomainError("dimension mismatch", "ou_spectral.evaluate")
    pts = _as_points(x, ou.dim)
    z = pts / ou.scale
    nmax = max((max(p) for p in f.coeffs), default=0)
    tables = [hermite_table(z[..., k], nmax) for k in range(ou.dim)]
    val = np.zeros(pts.shape[:-1])
    for p, c in f.coeffs.items():
        term = np.full(pts.shape[:-1], c)
        for k, pk in enumerate(p):
            if pk:
                term = term * tables[k][pk]
        val = val + term
    return val if val.ndim else float(val)


def invariant_density(x, ou: OUParams):
    """(b / (pi sigma^2))^{d/2} exp(-(b / sigma^2) |x|^2)."""
    pts = _as_points(x, ou.dim)
    b, sig2 = float(ou.b), float(ou.sigma) ** 2
    val = (b / (math.pi * sig2)) ** (ou.dim / 2.0) * np.exp(-(b / sig2) * np.sum(pts**2, axis=-1))
    return val if val.ndim else float(val)


# -- quadrature -----------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureGrid:
    """Nodes and probability weights for expectations under the invariant law.

    For ``method == "qmc"`` the nodes form ``blocks`` independent scrambled Sobol
    sets of equal size, which :meth:`expect_with_error` uses for an error bar.
    """

    nodes: np.ndarray
    weights: np.ndarray
    method: str = "gauss-hermite"
    blocks: int = 1

    def expect(self, values) -> float | complex:
        return np.dot(self.weights, values)

    def expect_with_error(self, values):
        est = self.expect(values)
        if self.method != "qmc":
            return est, 0.0
        parts = np.asarray(values).reshape(self.blocks, -1).mean(axis=1)
        return est, float(np.std(parts, ddof=1) / math.sqrt(self.blocks))


def gauss_hermite_1d(n: int):
    """Nodes and weights (summing to 1) for E g(Z), Z standard normal."""
    z, w = special.roots_hermitenorm(n)  # stable for large n, unlike hermegauss
    return z, w / w.sum()


def quadrature_grid(ou: OUParams, nodes: int = 64, qmc_points: int = 2**12, qmc_blocks: int = 8,
                    seed: int = 0) -> QuadratureGrid:
    """Tensor Gauss-Hermite grid for dim <= 3, randomized QMC above."""
    s = ou.scale
    if ou.dim <= 3:
        z, w = gauss_hermite_1d(nodes)
        pts = np.array(list(itertools.product(z, repeat=ou.dim)))
        wts = np.prod(np.array(list(itertools.product(w, repeat=ou.dim))), axis=1)
        return QuadratureGrid(s * pts, wts / wts.sum())
    blocks = []
    for r in range(qmc_blocks):
        u = qmc.Sobol(ou.dim, scramble=True, seed=seed + r).random(qmc_points)
        blocks.append(norm.ppf(u))
    pts = np.concatenate(blocks)
    wts = np.full(len(pts), 1.0 / len(pts))
    return QuadratureGrid(s * pts, wts, method="qmc", blocks=qmc_blocks)


def gram_matrix(ou: OUParams, max_degree: int, grid: QuadratureGrid | None = None) -> np.ndarray:
    """Quadrature Gram matrix <phi_p, phi_q>_phi over all |p|, |q| <= max_degree."""
    grid = grid or quadrature_grid(ou)
    idx = multi_indices(ou.dim, max_degree)
    vals = np.array([eigenfunction_eval(p, grid.nodes, ou) for p in idx])
    return (vals * grid.weights) @ vals.T


def mehler_expectation(g, t: float, x, ou: OUParams, nodes: int = 64) -> np.ndarray:
    """E[g(xi_t) | xi_0 = x] by Gauss-Hermite quadrature over the Gaussian transition.

    ``g`` maps an array of points ``(..., dim)`` to values. Exact for polynomials
    of degree below ``2 * nodes``.
    """
    pts = _as_points(x, ou.dim)
    decay = math.exp(-ou.b * t)
    spread = ou.scale * math.sqrt(-math.expm1(-2.0 * ou.b * t))
    z, w = gauss_hermite_1d(nodes)
    offs = np.array(list(itertools.product(z, repeat=ou.dim)))
    wts = np.prod(np.array(list(itertools.product(w, repeat=ou.dim))), axis=1)
    moved = pts[..., None, :] * decay + spread * offs
    return np.tensordot(g(moved), wts, axes=([-1], [0]))


# -- dynamics -------------------------------------------------------------------

def mehler_sample(t: float, x, ou: OUParams, rng: np.random.Generator) -> np.ndarray:
    """Exact OU transition: mean x e^{-bt}, per-axis variance s^2 (1 - e^{-2bt})."""
    if t < 0:
        raise DomainError("t must be non-negative", "ou_spectral.mehler_sample")
    x = np.asarray(x, dtype=float)
    if t == 0:
        return x.copy()
    spread = ou.scale * math.sqrt(-math.expm1(-2.0 * ou.b * t))
    return x * math.exp(-ou.b * t) + spread * rng.standard_normal(x.shape)


def semigroup_apply(t: float, f: SpectralFunction, ou: OUParams, alpha: float | None = None):
    """P_t f, or P^alpha_t f = e^{alpha t} P_t f when ``alpha`` is given."""
    if t < 0:
        raise DomainError("t must be non-negative", "ou_spectral.semigroup_apply")
    growth = 0.0 if alpha is None else float(alpha)
    return f.map_coeffs(lambda p, c: c * math.exp((growth - ou.b * sum(p)) * t))


def tilde(u):
    """u / (1 + u)."""
    if u == -1:
        raise DomainError("tilde is undefined at u = -1", "ou_spectral.tilde")
    return u / (1 + u)


def _threshold(mech):
    """alpha * beta~ as an exact Fraction when the inputs are rational, else float."""
    a, be = mech.alpha, mech.beta
    if isinstance(a, Rational) and isinstance(be, Rational):
        return Fraction(a) * Fraction(be) / (1 + Fraction(be))
    return float(a) * float(be) / (1.0 + float(be))


def regime(deg: int, ou: OUParams, mech) -> str:
    """'s', 'c' or 'l' according to how deg * b compares with alpha * beta~.

    Rational inputs compare exactly; otherwise a relative tolerance REGIME_TOL
    applies and near-ties resolve to the critical class.
    """
    thr = _threshold(mech)
    b = ou.b
    if isinstance(thr, Fraction) and isinstance(b, Rational):
        lhs = deg * Fraction(b)
        return "c" if lhs == thr else ("s" if lhs > thr else "l")
    lhs, thr = deg * float(b), float(thr)
    if abs(lhs - thr) <= REGIME_TOL * max(1.0, abs(thr)):
        return "c"
    return "s" if lhs > thr else "l"


def decay_rate(deg: int, ou: OUParams, mech) -> float:
    """| deg * b - alpha * beta~ |, the per-degree rate of T_t (zero when critical)."""
    if regime(deg, ou, mech) == "c":
        return 0.0
    return abs(deg * float(ou.b) - float(_threshold(mech)))


def T_apply(t: float, f: SpectralFunction, ou: OUParams, mech) -> SpectralFunction:
    """T_t f = sum_p exp(-| |p| b - alpha beta~ | t) <f, phi_p> phi_p."""
    if t < 0:
        raise DomainError("t must be non-negative", "ou_spectral.T_apply")
    return f.map_coeffs(lambda p, c: c * math.exp(-decay_rate(sum(p), ou, mech) * t))


def classify(f: SpectralFunction, ou: OUParams, mech) -> RegimeDecomposition:
    parts = {"s": {}, "c": {}, "l": {}}
    for p, c in f.coeffs.items():
        parts[regime(sum(p), ou, mech)][p] = c
    return RegimeDecomposition(*(SpectralFunction(parts[k], f.dim) for k in "scl"))


def order(f: SpectralFunction):
    """Smallest |p| with a nonzero coefficient; ``math.inf`` for the zero function."""
    return min((sum(p) for p in f.coeffs), default=math.inf)
