"""Branching OU particle system and its hybrid continuation as a mass field.

Each replicate starts as an exact event-driven particle system: particles of
mass 1/n branch at rate gamma_n with offspring drawn from
:func:`branching.offspring_law` and move by exact OU transitions between
events. With ``engine="hybrid"`` the population is handed to a field
representation at the first time after ``switch_time`` at which it holds
more than ``switch_min_particles`` particles (or earlier, once it exceeds
``switch_particles``): bin masses on a lattice carry the spatial profile that
drives the branching noise, and the tracked functionals X_t(phi_q) evolve by
their exact mean dynamics plus the per-bin (1+beta)-stable noise.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .branching import BranchingMechanism, extinction_root, offspring_law, OffspringLaw
from .errors import ConfigError, DomainError, PreconditionError, ResourceError
from .ou_spectral import (OUParams, RegimeDecomposition, SpectralFunction, eigenfunction_eval,
                          evaluate, multi_indices, semigroup_apply)

# -- state types --------------------------------------------------------------


@dataclass(frozen=True)
class InitialMeasure:
    atoms: tuple  # ((point, mass), ...)

    def __post_init__(self):
        if not self.atoms:
            raise DomainError("initial measure needs at least one atom", "simulator.InitialMeasure")
        if any(m <= 0 for _, m in self.atoms):
            raise DomainError("atom masses must be positive", "simulator.InitialMeasure")

    @classmethod
    def dirac(cls, point=(0.0,), mass: float = 1.0) -> "InitialMeasure":
        return cls(((tuple(np.atleast_1d(point).astype(float)), float(mass)),))

    @property
    def total_mass(self) -> float:
        return float(sum(m for _, m in self.atoms))

    @property
    def dim(self) -> int:
        return len(self.atoms[0][0])

    def apply(self, f: SpectralFunction, ou: OUParams) -> float:
        """mu(f)."""
        pts = np.array([p for p, _ in self.atoms], dtype=float)
        w = np.array([m for _, m in self.atoms])
        return float(np.dot(w, np.atleast_1d(evaluate(f, pts, ou))))

    def particles(self, n: int) -> np.ndarray:
        """Positions of n * mass particles per atom; masses must be multiples of 1/n."""
        pts = []
        for p, m in self.atoms:
            k = round(m * n)
            if abs(k - m * n) > 1e-9 * max(1.0, m * n) or k == 0:
                raise PreconditionError(f"atom mass {m} is not a positive multiple of 1/{n}",
                                        "simulator.InitialMeasure.particles")
            pts.extend([p] * k)
        return np.array(pts, dtype=float).reshape(len(pts), self.dim)


@dataclass
class Population:
    positions: np.ndarray  # (count, d)
    unit_mass: float
    time: float = 0.0

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])

    @property
    def total_mass(self) -> float:
        return self.unit_mass * self.count


def measure_functional(pop: Population, f: SpectralFunction, ou: OUParams) -> float:
    """X_t(f) = eps * sum_i f(x_i)."""
    if pop.count == 0:
        return 0.0
    return float(pop.unit_mass * np.sum(evaluate(f, pop.positions, ou)))


def h_martingale(pop: Population, p, mech: BranchingMechanism, ou: OUParams) -> float:
    """H_t^p = exp(-(alpha - |p| b) t) X_t(phi_p)."""
    f = SpectralFunction.eigen(p, dim=ou.dim)
    return math.exp(-(mech.alpha - f.max_degree * ou.b) * pop.time) * measure_functional(pop, f, ou)


def evolve(pop: Population, to_time: float, law: OffspringLaw, ou: OUParams,
           rng: np.random.Generator, particle_cap: int = 10**7) -> Population:
    """Exact event-driven dynamics of the particle system up to ``to_time``."""
    where = "simulator.evolve"
    if to_time < pop.time:
        raise DomainError("to_time must not precede the population time", where)
    count = pop.count
    d = ou.dim if count == 0 else pop.positions.shape[1]
    cap = max(count, min(max(64, 4 * count), particle_cap))
    pos = np.zeros((cap, d))
    pos[:count] = pop.positions
    last = np.full(cap, pop.time)
    t = pop.time
    pend_i, pend_k = -1, 0
    ta, tb = law.tail_beta_params()
    while True:
        count, t, status, pend_i, pend_k = kernels.advance_particles(
            pos, last, count, t, to_time, law.cdf, ta, tb, law.rate, float(ou.b), ou.scale,
            np.iinfo(np.int64).max // 4, rng, pend_i, pend_k)
        if status == kernels.ADVANCE_DONE:
            break
        need = count + pend_k - 1
        if need > particle_cap:
            kernels.sync_particles(pos, last, count, t, float(ou.b), ou.scale, rng)
            partial = Population(pos[:count].copy(), pop.unit_mass, t)
            raise ResourceError(f"population would reach {need} particles (cap {particle_cap})",
                                where, partial=partial)
        pos, last = _grow(pos, last, need, particle_cap)
    return Population(pos[:count].copy(), pop.unit_mass, to_time)


def _grow(pos, last, need, limit):
    """Larger copies of the particle arrays; capacity never exceeds ``limit``."""
    cap = min(max(2 * pos.shape[0], need + 16), limit)
    p2 = np.zeros((cap, pos.shape[1]))
    p2[: pos.shape[0]] = pos
    l2 = np.zeros(cap)
    l2[: last.shape[0]] = last
    return p2, l2


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class SimulationConfig:
    ou: OUParams
    mech: BranchingMechanism
    n: int
    initial: InitialMeasure
    checkpoints: tuple
    degree_cap: int = 2
    engine: str = "hybrid"
    switch_time: float = 1.0
    switch_particles: int = 10**6
    switch_min_particles: int = 20000
    particle_cap: int = 10**7
    field_bins: int = 0  # 0 selects a default per dimension
    field_dt: float = 0.02
    field_width: float = 8.0
    offspring_table: int = 128

    def __post_init__(self):
        where = "simulator.SimulationConfig"
        cp = tuple(float(t) for t in self.checkpoints)
        object.__setattr__(self, "checkpoints", cp)
        if not cp:
            raise ConfigError("at least one checkpoint time is required", where)
        if any(t < 0 for t in cp) or any(b <= a for a, b in zip(cp, cp[1:])):
            raise ConfigError("checkpoint times must be non-negative and strictly increasing", where)
        if self.engine not in ("hybrid", "particle"):
            raise ConfigError(f"unknown engine {self.engine!r}", where)
        if self.initial.dim != self.ou.dim:
            raise ConfigError("initial measure dimension differs from the OU dimension", where)
        if self.degree_cap < 0:
            raise ConfigError("degree_cap must be non-negative", where)
        if self.field_dt <= 0:
            raise ConfigError("field_dt must be positive", where)

    @property
    def horizon(self) -> float:
        return self.checkpoints[-1]

    @property
    def bins(self) -> int:
        if self.field_bins:
            return self.field_bins
        return {1: 256, 2: 64}.get(self.ou.dim, 24)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial"] = {"atoms": [[list(p), m] for p, m in self.initial.atoms]}
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def replicate_seed(master_seed: int, index: int) -> int:
    """64-bit seed of replicate ``index``: SeedSequence(master, spawn_key=(index,))."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


# -- run records ----------------------------------------------------------------


@dataclass
class RunRecord:
    seed: int
    config: SimulationConfig
    checkpoint_times: tuple
    mass: np.ndarray  # (T,)
    coeffs: np.ndarray  # (T, Q): X_t(phi_q) over ``indices``
    survived: bool
    status: str = "ok"
    switch_time: float | None = None

    @property
    def indices(self) -> list:
        return multi_indices(self.config.ou.dim, self.config.degree_cap)

    def _row(self, t: float) -> int:
        for i, s in enumerate(self.checkpoint_times):
            if abs(s - t) <= 1e-12 * max(1.0, abs(t)):
                return i
        raise PreconditionError(f"time {t} is not a stored checkpoint", "simulator.RunRecord")

    def mass_at(self, t: float) -> float:
        return float(self.mass[self._row(t)])

    def functional(self, t: float, f: SpectralFunction) -> float:
        """X_t(f) from the stored eigen-functionals."""
        if f.max_degree > self.config.degree_cap:
            raise PreconditionError(f"degree {f.max_degree} exceeds the stored cap "
                                    f"{self.config.degree_cap}", "simulator.RunRecord.functional")
        row = self.coeffs[self._row(t)]
        pos = {p: i for i, p in enumerate(self.indices)}
        return float(sum(c * row[pos[p]] for p, c in f.coeffs.items()))

    def h(self, t: float, p) -> float:
        ou, mech = self.config.ou, self.config.mech
        f = SpectralFunction.eigen(p, dim=ou.dim)
        return math.exp(-(mech.alpha - f.max_degree * ou.b) * t) * self.functional(t, f)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "params_hash": self.config.digest(),
            "survived": self.survived,
            "status": self.status,
            "switch_time": self.switch_time,
            "checkpoints": [
                {"t": t, "mass": float(self.mass[i]),
                 "functionals": {_index_key(p): float(v)
                                 for p, v in zip(self.indices, self.coeffs[i])}}
                for i, t in enumerate(self.checkpoint_times)
            ],
        }


def _index_key(p) -> str:
    return "".join(map(str, p)) if len(p) > 1 else str(p[0])


def record_from_json(data: dict, cfg: SimulationConfig) -> RunRecord:
    """Inverse of RunRecord.to_json for records written under ``cfg``."""
    if data.get("params_hash") != cfg.digest():
        raise ConfigError("stored run was produced under a different configuration",
                          "simulator.record_from_json")
    keys = [_index_key(p) for p in multi_indices(cfg.ou.dim, cfg.degree_cap)]
    cps = data["checkpoints"]
    return RunRecord(
        seed=int(data["seed"]), config=cfg,
        checkpoint_times=tuple(float(c["t"]) for c in cps),
        mass=np.array([c["mass"] for c in cps], dtype=float),
        coeffs=np.array([[c["functionals"][k] for k in keys] for c in cps], dtype=float),
        survived=bool(data["survived"]), status=data["status"],
        switch_time=data["switch_time"])


@dataclass(frozen=True)
class JointStatistic:
    h: float
    s_stat: float
    c_stat: float
    l_stat: float

    def as_tuple(self) -> tuple:
        return (self.h, self.s_stat, self.c_stat, self.l_stat)


def joint_statistic(run: RunRecord, decomp: RegimeDecomposition, t: float, u: float):
    """S(t), or None for a run with no mass at t or u.

    The compensator uses H_u^p in place of its limit; u may lie before or after t
    but not at t, where the large coordinate would vanish identically.
    """
    where = "simulator.joint_statistic"
    if u == t:
        raise PreconditionError("u = t makes the compensated coordinate identically zero", where)
    ou, mech = run.config.ou, run.config.mech
    mass_t = run.mass_at(t)
    if not run.survived or mass_t <= 0 or run.mass_at(u) <= 0:
        return None
    bt = mech.beta_tilde
    norm = mass_t ** (1.0 - bt)
    comp = 0.0
    for p, c in decomp.f_l.coeffs.items():
        rate = mech.alpha - sum(p) * ou.b
        comp += c * math.exp(rate * t) * run.h(u, p)
    return JointStatistic(
        h=math.exp(-mech.alpha * t) * mass_t,
        s_stat=run.functional(t, decomp.f_s) / norm,
        c_stat=run.functional(t, decomp.f_c) / (t * mass_t) ** (1.0 - bt) if t > 0 else 0.0,
        l_stat=(run.functional(t, decomp.f_l) - comp) / norm,
    )


def upsilon(run: RunRecord, f: SpectralFunction, t: float):
    """(X_{t+1}(f) - X_t(P^alpha_1 f)) / ||X_t||^{1 - beta~}, or None without mass."""
    ou, mech = run.config.ou, run.config.mech
    mass_t = run.mass_at(t)
    if mass_t <= 0 or run.mass_at(t + 1.0) <= 0:
        return None
    moved = semigroup_apply(1.0, f, ou, alpha=mech.alpha)
    return (run.functional(t + 1.0, f) - run.functional(t, moved)) / mass_t ** (1.0 - mech.beta_tilde)


# -- field representation -----------------------------------------------------------------


def stable_noise_constants(a: float) -> tuple[float, float, float]:
    """(sigma_L, CMS shift, CMS scale) for the totally skewed law with E exp(-l L) = exp(l^a)."""
    tan = math.tan(math.pi * a / 2.0)
    sigma = (-math.cos(math.pi * a / 2.0)) ** (1.0 / a)
    return sigma, math.atan(tan) / a, (1.0 + tan * tan) ** (1.0 / (2.0 * a))


@functools.lru_cache(maxsize=32)
def _transport_kernel(nb: int, first: float, h: float, b: float, scale: float, tau: float):
    """Column-normalized Gaussian OU transition between bin centers, with band limits."""
    var = scale**2 * -math.expm1(-2.0 * b * tau)
    x = first + np.arange(nb) * h
    diff = x[:, None] - x[None, :] * math.exp(-b * tau)
    kern = np.exp(-0.5 * diff**2 / var) if var > 0 else (diff == diff.min(0)).astype(float)
    kern[kern < 1e-17 * kern.max(axis=0, keepdims=True)] = 0.0
    kern /= kern.sum(axis=0, keepdims=True)
    nz = kern > 0
    lo = np.argmax(nz, axis=0).astype(np.intp)
    hi = (nb - np.argmax(nz[::-1], axis=0)).astype(np.intp)
    for arr in (kern, lo, hi):
        arr.setflags(write=False)
    return np.ascontiguousarray(kern), lo, hi


class Field:
    """Lattice bin masses plus exact eigen-functionals X(phi_q)."""

    def __init__(self, cfg: SimulationConfig, mass: np.ndarray, coeffs: np.ndarray):
        self.cfg = cfg
        ou = cfg.ou
        self.nb = cfg.bins
        half = cfg.field_width * ou.scale
        self.h = 2.0 * half / self.nb
        self.centers = -half + (np.arange(self.nb) + 0.5) * self.h
        grids = np.meshgrid(*([self.centers] * ou.dim), indexing="ij")
        pts = np.stack([g.reshape(-1) for g in grids], axis=-1)
        self.indices = multi_indices(ou.dim, cfg.degree_cap)
        self.degrees = np.array([sum(p) for p in self.indices], dtype=float)
        self.basis = np.ascontiguousarray(
            np.array([np.atleast_1d(eigenfunction_eval(p, pts, ou)) for p in self.indices]))
        self.mass = mass
        self.coeffs = coeffs

    @classmethod
    def from_particles(cls, cfg: SimulationConfig, positions: np.ndarray, eps: float,
                       extra: tuple | None = None) -> "Field":
        """Deposit particles at their nearest bin; ``extra`` = (point, mass) adds one more atom."""
        pts, w = positions, np.full(len(positions), eps)
        if extra is not None:
            pts = np.vstack([pts, np.reshape(extra[0], (1, -1))])
            w = np.append(w, extra[1])
        return cls.from_atoms(cfg, pts, w)

    @classmethod
    def from_atoms(cls, cfg: SimulationConfig, points: np.ndarray, weights: np.ndarray) -> "Field":
        """Field holding mass ``weights[i]`` at ``points[i]`` (nearest bin for the lattice)."""
        fld = cls(cfg, None, None)
        ou = cfg.ou
        pts = np.asarray(points, dtype=float).reshape(len(weights), ou.dim)
        w = np.asarray(weights, dtype=float)
        half = cfg.field_width * ou.scale
        idx = np.clip(np.floor((pts + half) / fld.h).astype(np.int64), 0, fld.nb - 1)
        flat = np.ravel_multi_index(tuple(idx.T), (fld.nb,) * ou.dim)
        fld.mass = np.bincount(flat, weights=w, minlength=fld.nb**ou.dim).astype(float)
        fld.coeffs = np.array([np.dot(w, np.atleast_1d(eigenfunction_eval(p, pts, ou)))
                               for p in fld.indices])
        return fld

    def _kernel(self, tau: float):
        ou = self.cfg.ou
        return _transport_kernel(self.nb, float(self.centers[0]), self.h, ou.b, ou.scale,
                                 round(tau, 15))

    def advance(self, duration: float, rng: np.random.Generator) -> bool:
        """Evolve by ``duration``; returns True when the field dies out."""
        if duration <= 0:
            return False
        cfg, mech = self.cfg, self.cfg.mech
        steps = max(1, math.ceil(duration / cfg.field_dt - 1e-9))
        dt = duration / steps
        kern, lo, hi = self._kernel(dt / 2.0)
        a = mech.index
        sigma_l, shift, scale = stable_noise_constants(a)
        growth = math.exp(mech.alpha * dt / 2.0)
        cgrowth = np.exp((mech.alpha - self.degrees * cfg.ou.b) * dt / 2.0)
        return bool(kernels.field_evolve(
            self.mass, self.coeffs, self.basis, kern, lo, hi, steps, growth, cgrowth,
            (mech.eta * dt) ** (1.0 / a) * sigma_l, math.sqrt(2.0 * mech.rho * dt), a, shift,
            scale, cfg.ou.dim, self.nb, rng))


# -- replicate driver ---------------------------------------------------------------------


def _functionals(positions: np.ndarray, count: int, eps: float, indices, ou) -> np.ndarray:
    if count == 0:
        return np.zeros(len(indices))
    pts = positions[:count]
    return np.array([eps * np.sum(np.atleast_1d(eigenfunction_eval(p, pts, ou))) for p in indices])


def simulate_replicate(cfg: SimulationConfig, seed: int, law: OffspringLaw | None = None) -> RunRecord:
    """Run one replicate through all checkpoints with a generator seeded by ``seed``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    law = law or offspring_law(cfg.n, cfg.mech, cfg.offspring_table)
    ou = cfg.ou
    eps = 1.0 / cfg.n
    indices = multi_indices(ou.dim, cfg.degree_cap)
    times = cfg.checkpoints
    mass = np.zeros(len(times))
    coeffs = np.zeros((len(times), len(indices)))

    hybrid = cfg.engine == "hybrid"
    t = 0.0
    fld = None
    switched = None
    if hybrid and cfg.switch_time <= 0 and \
            cfg.initial.total_mass * cfg.n > cfg.switch_min_particles:
        # enough initial mass to start on the lattice without materializing particles
        fld = Field.from_atoms(cfg, [p for p, _ in cfg.initial.atoms],
                               [m for _, m in cfg.initial.atoms])
        switched = 0.0
        start = np.zeros((0, ou.dim))
    else:
        start = cfg.initial.particles(cfg.n)
    count = len(start)
    pos = np.zeros((max(count, min(max(64, 4 * count), cfg.particle_cap)), ou.dim))
    pos[:count] = start
    last = np.zeros(pos.shape[0])
    ta, tb = law.tail_beta_params()
    b, s = float(ou.b), ou.scale
    switch_at = cfg.switch_time if hybrid else math.inf
    switch_count = cfg.switch_particles if hybrid else np.iinfo(np.int64).max // 4

    status = "ok"
    pend_i, pend_k = -1, 0
    for ci, tc in enumerate(times):
        while fld is None and count > 0 and t < tc:
            late = t >= switch_at
            if late and count > cfg.switch_min_particles:
                fld = Field.from_particles(cfg, pos[:count], eps)
                switched = t
                break
            target = tc if late else min(tc, switch_at)
            limit = min(switch_count, cfg.switch_min_particles) if late else switch_count
            count, t, st, pend_i, pend_k = kernels.advance_particles(
                pos, last, count, t, target, law.cdf, ta, tb, law.rate, b, s, limit, rng,
                pend_i, pend_k)
            if st == kernels.ADVANCE_PENDING:
                need = count + pend_k - 1
                if hybrid and need > limit:
                    # a family too large for the particle arrays: hand everything to the field
                    kernels.sync_particles(pos, last, count, t, b, s, rng)
                    fld = Field.from_particles(cfg, pos[:count], eps,
                                               extra=(pos[pend_i].copy(), (pend_k - 1) * eps))
                    switched, pend_i, pend_k = t, -1, 0
                elif need > cfg.particle_cap:
                    status = "aborted"
                    break
                else:
                    pos, last = _grow(pos, last, need, cfg.particle_cap)
            elif st == kernels.ADVANCE_SWITCH:
                fld = Field.from_particles(cfg, pos[:count], eps)
                switched = t
        if status == "aborted":
            break
        if fld is not None:
            if fld.advance(tc - t, rng):
                fld, count = None, 0
            t = tc
        if fld is not None:
            mass[ci] = fld.coeffs[0]
            coeffs[ci] = fld.coeffs
        else:
            t = tc
            mass[ci] = count * eps
            coeffs[ci] = _functionals(pos, count, eps, indices, ou)

    survived = status == "ok" and mass[-1] > 0
    return RunRecord(seed, cfg, times, mass, coeffs, bool(survived), status, switched)


# -- ensembles --------------------------------------------------------------------------


@dataclass
class EnsembleResult:
    config: SimulationConfig
    master_seed: int
    records: list
    seeds: list

    @property
    def survival_fraction(self) -> float:
        return float(np.mean([r.survived for r in self.records]))

    @property
    def aborted(self) -> list:
        return [i for i, r in enumerate(self.records) if r.status != "ok"]

    def survival_report(self) -> dict:
        """Survival fraction beside the eventual-survival probability 1 - exp(-||mu|| v_bar)."""
        N = len(self.records)
        p = self.survival_fraction
        target = 1.0 - math.exp(-self.config.initial.total_mass * extinction_root(self.config.mech))
        return {"replicates": N, "survival_fraction": p, "target": target,
                "se": math.sqrt(max(target * (1 - target), 1.0 / N) / N)}

    def arrays(self):
        """(mass (N, T), coeffs (N, T, Q), survived (N,))."""
        return (np.array([r.mass for r in self.records]),
                np.array([r.coeffs for r in self.records]),
                np.array([r.survived for r in self.records]))


def _worker(args):
    cfg, seeds = args
    law = offspring_law(cfg.n, cfg.mech, cfg.offspring_table)
    return [simulate_replicate(cfg, s, law) for s in seeds]


def run_ensemble(cfg: SimulationConfig, replicates: int, master_seed: int, parallelism: int = 1,
                 chunk: int = 64) -> EnsembleResult:
    """Run ``replicates`` independent replicates; replicate i uses replicate_seed(master, i).

    Records are returned in replicate order regardless of ``parallelism``.
    """
    seeds = [replicate_seed(master_seed, i) for i in range(replicates)]
    if parallelism <= 1:
        records = _worker((cfg, seeds))
    else:
        jobs = [(cfg, seeds[i:i + chunk]) for i in range(0, replicates, chunk)]
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            records = [r for part in pool.map(_worker, jobs) for r in part]
    return EnsembleResult(cfg, int(master_seed), records, seeds)


# -- persistence ---------------------------------------------------------------------------


def write_jsonl(records: Sequence[RunRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def summary_rows(records: Sequence[RunRecord], functionals: dict) -> list:
    """Rows (t, functional id, mean, SE, N_surviving) over surviving runs."""
    alive = [r for r in records if r.survived]
    rows = []
    if not alive:
        return rows
    for i, t in enumerate(alive[0].checkpoint_times):
        for name, f in functionals.items():
            vals = np.array([r.functional(t, f) for r in alive])
            se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            rows.append((t, name, float(np.mean(vals)), se, len(vals)))
    return rows


def write_summary_csv(records: Sequence[RunRecord], functionals: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "functional", "mean", "se", "n_surviving"])
        for row in summary_rows(records, functionals):
            w.writerow([repr(row[0]), row[1], repr(row[2]), repr(row[3]), row[4]])
