"""Time the compiled and pure-Python kernels on identical workloads.

    python benchmarks/bench_kernels.py [--repeat 3]

Each workload is run from the same seed on both backends. Particle outputs
agree bit for bit; the field stepper agrees to rounding, since the dense
matrix product and the vectorized transcendentals sum in a different order.
"""

import argparse
import math
import time

import numpy as np

from superou.branching import BranchingMechanism, offspring_law
from superou.kernels import backends
from superou.ou_spectral import OUParams
from superou.simulator import Field, InitialMeasure, SimulationConfig, stable_noise_constants


def particle_workload(mod, seed):
    mech = BranchingMechanism(3.0, 0.0, 1.0, 0.5)
    law = offspring_law(100, mech)
    ta, tb = law.tail_beta_params()
    pos = np.zeros((400_000, 1))
    last = np.zeros(400_000)
    rng = np.random.Generator(np.random.PCG64(seed))
    count, t, status, _, _ = mod.advance_particles(pos, last, 100, 0.0, 1.5, law.cdf, ta, tb,
                                                   law.rate, 1.0, 1.0, 300_000, rng)
    return count, t, status, pos[:count].copy()


def field_workload(mod, seed):
    ou = OUParams(math.sqrt(2.0), 1.0)
    mech = BranchingMechanism(3.0, 0.0, 1.0, 0.5)
    cfg = SimulationConfig(ou, mech, 1000, InitialMeasure.dirac(mass=1000.0), (1.0,),
                           switch_time=0.0)
    fld = Field.from_atoms(cfg, [(0.0,)], [1000.0])
    dt, steps = cfg.field_dt, 100
    kern, lo, hi = fld._kernel(dt / 2.0)
    sig, shift, scale = stable_noise_constants(mech.index)
    cg = np.exp((mech.alpha - fld.degrees * ou.b) * dt / 2.0)
    rng = np.random.Generator(np.random.PCG64(seed))
    mass, coeffs = fld.mass.copy(), fld.coeffs.copy()
    mod.field_evolve(mass, coeffs, fld.basis, kern, lo, hi, steps, math.exp(mech.alpha * dt / 2),
                     cg, (mech.eta * dt) ** (1 / mech.index) * sig, 0.0, mech.index, shift,
                     scale, 1, fld.nb, rng)
    return mass, coeffs


def bench(fn, mod, repeat):
    best = math.inf
    out = None
    for r in range(repeat):
        t0 = time.perf_counter()
        out = fn(mod, 12345)
        best = min(best, time.perf_counter() - t0)
    return best, out


def agreement(a, b):
    """'identical' or the largest relative difference between the two outputs."""
    pairs = list(zip(a, b)) if isinstance(a, tuple) else [(a, b)]
    if all(np.array_equal(np.asarray(x), np.asarray(y)) for x, y in pairs):
        return "identical"
    rel = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y))) / max(1e-300, np.max(np.abs(x))))
              for x, y in pairs)
    return f"max rel diff {rel:.1e}"


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    mods = backends()
    print(f"backends: {', '.join(mods)}")
    for name, fn in (("particles (n=100, t in [0, 1.5])", particle_workload),
                     ("field (256 bins, 100 steps)", field_workload)):
        times, outs = {}, {}
        for b, mod in mods.items():
            times[b], outs[b] = bench(fn, mod, args.repeat)
        line = "  ".join(f"{b}: {times[b] * 1e3:9.2f} ms" for b in mods)
        if "cython" in times:
            line += f"  speedup x{times['python'] / times['cython']:.1f}"
            line += "  " + agreement(outs["python"], outs["cython"])
        print(f"{name:34s} {line}")


if __name__ == "__main__":
    main()
