"""Pure-Python reference implementation of the simulation kernels.

Draws are taken from the generator one at a time in the same order as the
compiled kernel, so the particle phase is bit-identical across backends.
"""

import math

import numpy as np

ADVANCE_DONE, ADVANCE_PENDING, ADVANCE_SWITCH = 0, 1, 2
MAX_OFFSPRING = np.iinfo(np.int64).max // 4


def _offspring(rng, cdf, tail_a, tail_b):
    u = rng.random()
    K = cdf.shape[0] - 1
    if u < cdf[K]:
        lo, hi = 0, K
        while lo < hi:
            mid = (lo + hi) // 2
            if cdf[mid] > u:
                hi = mid
            else:
                lo = mid + 1
        return lo
    ub = rng.beta(tail_a, tail_b)
    v = 1.0 - rng.random()
    if ub <= 0.0:
        return K + 1
    lu = math.log(ub)
    if lu == 0.0:
        return MAX_OFFSPRING
    j = math.log(v) / lu
    if j >= MAX_OFFSPRING - K - 1:
        return MAX_OFFSPRING
    return K + 1 + int(math.floor(j))


def _move(pos, i, dt, b, scale, rng):
    if dt > 0.0:
        e = math.exp(-b * dt)
        sd = scale * math.sqrt(-math.expm1(-2.0 * b * dt))
        for k in range(pos.shape[1]):
            pos[i, k] = pos[i, k] * e + sd * rng.standard_normal()


def sync_particles(pos, last, count, t, b, scale, rng):
    """Bring every particle's lazily stored position forward to time t."""
    for i in range(count):
        _move(pos, i, t - last[i], b, scale, rng)
        last[i] = t


def _branch(pos, last, count, i, k, t, b, scale, rng):
    _move(pos, i, t - last[i], b, scale, rng)
    last[i] = t
    for _ in range(k - 1):
        pos[count] = pos[i]
        last[count] = t
        count += 1
    return count


def advance_particles(pos, last, count, t_now, t_stop, cdf, tail_a, tail_b, rate, b, scale,
                      switch_count, rng, pending_idx=-1, pending_k=0):
    """Run the branching event loop from t_now until t_stop.

    Returns ``(count, t, status, pending_idx, pending_k)``. Status 0: reached
    t_stop, all particles synced. Status 1: the event at t needs more capacity
    than ``pos`` has; it is returned unapplied. Status 2: the count exceeded
    ``switch_count`` after the event at t; all particles synced at t.
    """
    cap = pos.shape[0]
    t = t_now
    if pending_idx >= 0:
        count = _branch(pos, last, count, pending_idx, pending_k, t, b, scale, rng)
        if count > switch_count:
            sync_particles(pos, last, count, t, b, scale, rng)
            return count, t, ADVANCE_SWITCH, -1, 0
    while count > 0 and rate > 0.0:
        t_next = t + rng.standard_exponential() / (rate * count)
        if t_next > t_stop:
            break
        t = t_next
        i = int(rng.random() * count)
        if i >= count:
            i = count - 1
        k = _offspring(rng, cdf, tail_a, tail_b)
        if k == 1:
            continue
        if k == 0:
            count -= 1
            pos[i] = pos[count]
            last[i] = last[count]
            continue
        if count + k - 1 > cap:
            return count, t, ADVANCE_PENDING, i, k
        count = _branch(pos, last, count, i, k, t, b, scale, rng)
        if count > switch_count:
            sync_particles(pos, last, count, t, b, scale, rng)
            return count, t, ADVANCE_SWITCH, -1, 0
    sync_particles(pos, last, count, t_stop, b, scale, rng)
    return count, t_stop, ADVANCE_DONE, -1, 0


def cms_skewed(u, w, a, shift, scale):
    """Chambers-Mallows-Stuck transform for index a != 1 with precomputed constants.

    ``shift`` = arctan(beta tan(pi a / 2)) / a and ``scale`` = (1 + beta^2 tan^2)^{1/(2a)}.
    """
    v = np.pi * (u - 0.5)
    av = a * (v + shift)
    return scale * np.sin(av) / np.cos(v) ** (1.0 / a) * (np.cos(v - av) / w) ** ((1.0 - a) / a)


def transport(mass, kern, dim, nb):
    if dim == 1:
        return kern @ mass
    m = mass.reshape((nb,) * dim)
    for ax in range(dim):
        m = np.moveaxis(np.tensordot(kern, m, axes=([1], [ax])), 0, ax)
    return m.reshape(-1)


def field_evolve(mass, coeff, basis, kern, lo, hi, nsteps, growth_half, coeff_growth_half,
                 noise_scale, rho_scale, a, shift, scale, dim, nb, rng):
    """Strang-split steps of transport+growth / stable noise / transport+growth.

    ``mass`` (bins) and ``coeff`` (exact functionals) are updated in place.
    Returns True if the field died out.
    """
    nbins = mass.shape[0]
    inv_a = 1.0 / a
    for _ in range(nsteps):
        mass[:] = transport(mass, kern, dim, nb) * growth_half
        coeff *= coeff_growth_half
        u = rng.random(nbins)
        w = rng.standard_exponential(nbins)
        xi = noise_scale * mass**inv_a * cms_skewed(u, w, a, shift, scale)
        if rho_scale > 0.0:
            xi += rho_scale * np.sqrt(mass) * rng.standard_normal(nbins)
        xi = np.where(mass > 0.0, np.maximum(xi, -mass), 0.0)
        mass += xi
        coeff += basis @ xi
        mass[:] = transport(mass, kern, dim, nb) * growth_half
        coeff *= coeff_growth_half
        if not np.any(mass > 0.0):
            mass[:] = 0.0
            coeff[:] = 0.0
            return True
    return False
