# Compiled simulation kernels; same contracts and draw order as _pykernels.
from libc.math cimport exp, expm1, sqrt, log, floor, sin, cos, pow, M_PI
from libc.stdint cimport int64_t
from cpython.pycapsule cimport PyCapsule_GetPointer
from numpy.random cimport bitgen_t
cimport numpy as cnp
import numpy as np

cnp.import_array()

cdef extern from "numpy/random/distributions.h":
    double random_standard_uniform(bitgen_t *state) nogil
    double random_standard_exponential(bitgen_t *state) nogil
    double random_standard_normal(bitgen_t *state) nogil
    double random_beta(bitgen_t *state, double a, double b) nogil
    void random_standard_uniform_fill(bitgen_t *state, cnp.npy_intp cnt, double *out) nogil
    void random_standard_exponential_fill(bitgen_t *state, cnp.npy_intp cnt, double *out) nogil
    void random_standard_normal_fill(bitgen_t *state, cnp.npy_intp cnt, double *out) nogil

cdef enum:
    ADVANCE_DONE = 0
    ADVANCE_PENDING = 1
    ADVANCE_SWITCH = 2
cdef int64_t MAX_OFFSPRING = 9223372036854775807 // 4


cdef bitgen_t* _bitgen(rng) except NULL:
    capsule = rng.bit_generator.capsule
    return <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")


cdef inline int64_t _offspring(bitgen_t *bg, const double[::1] cdf, double tail_a,
                               double tail_b) nogil:
    cdef double u = random_standard_uniform(bg)
    cdef Py_ssize_t K = cdf.shape[0] - 1
    cdef Py_ssize_t lo = 0, hi = K, mid
    cdef double ub, v, lu, j
    if u < cdf[K]:
        while lo < hi:
            mid = (lo + hi) // 2
            if cdf[mid] > u:
                hi = mid
            else:
                lo = mid + 1
        return lo
    ub = random_beta(bg, tail_a, tail_b)
    v = 1.0 - random_standard_uniform(bg)
    if ub <= 0.0:
        return K + 1
    lu = log(ub)
    if lu == 0.0:
        return MAX_OFFSPRING
    j = log(v) / lu
    if j >= <double>(MAX_OFFSPRING - K - 1):
        return MAX_OFFSPRING
    return K + 1 + <int64_t> floor(j)


cdef inline void _move(double[:, ::1] pos, Py_ssize_t i, double dt, double b, double scale,
                       bitgen_t *bg) nogil:
    cdef double e, sd
    cdef Py_ssize_t k
    if dt > 0.0:
        e = exp(-b * dt)
        sd = scale * sqrt(-expm1(-2.0 * b * dt))
        for k in range(pos.shape[1]):
            pos[i, k] = pos[i, k] * e + sd * random_standard_normal(bg)


cdef void _sync(double[:, ::1] pos, double[::1] last, Py_ssize_t count, double t, double b,
                double scale, bitgen_t *bg) nogil:
    cdef Py_ssize_t i
    for i in range(count):
        _move(pos, i, t - last[i], b, scale, bg)
        last[i] = t


cdef Py_ssize_t _branch(double[:, ::1] pos, double[::1] last, Py_ssize_t count, Py_ssize_t i,
                        int64_t k, double t, double b, double scale, bitgen_t *bg) nogil:
    cdef int64_t c
    cdef Py_ssize_t d
    _move(pos, i, t - last[i], b, scale, bg)
    last[i] = t
    for c in range(k - 1):
        for d in range(pos.shape[1]):
            pos[count, d] = pos[i, d]
        last[count] = t
        count += 1
    return count


def sync_particles(double[:, ::1] pos, double[::1] last, Py_ssize_t count, double t, double b,
                   double scale, rng):
    cdef bitgen_t *bg = _bitgen(rng)
    with rng.bit_generator.lock:
        with nogil:
            _sync(pos, last, count, t, b, scale, bg)


def advance_particles(double[:, ::1] pos, double[::1] last, Py_ssize_t count, double t_now,
                      double t_stop, const double[::1] cdf, double tail_a, double tail_b,
                      double rate, double b, double scale, Py_ssize_t switch_count, rng,
                      Py_ssize_t pending_idx=-1, int64_t pending_k=0):
    cdef bitgen_t *bg = _bitgen(rng)
    cdef Py_ssize_t cap = pos.shape[0], i, d
    cdef double t = t_now, t_next
    cdef int64_t k
    cdef int status = ADVANCE_DONE
    cdef Py_ssize_t out_idx = -1
    cdef int64_t out_k = 0
    with rng.bit_generator.lock:
        with nogil:
            if pending_idx >= 0:
                count = _branch(pos, last, count, pending_idx, pending_k, t, b, scale, bg)
                if count > switch_count:
                    _sync(pos, last, count, t, b, scale, bg)
                    status = ADVANCE_SWITCH
            if status == ADVANCE_DONE:
                while count > 0 and rate > 0.0:
                    t_next = t + random_standard_exponential(bg) / (rate * count)
                    if t_next > t_stop:
                        break
                    t = t_next
                    i = <Py_ssize_t>(random_standard_uniform(bg) * count)
                    if i >= count:
                        i = count - 1
                    k = _offspring(bg, cdf, tail_a, tail_b)
                    if k == 1:
                        continue
                    if k == 0:
                        count -= 1
                        for d in range(pos.shape[1]):
                            pos[i, d] = pos[count, d]
                        last[i] = last[count]
                        continue
                    if count + k - 1 > cap:
                        status = ADVANCE_PENDING
                        out_idx = i
                        out_k = k
                        break
                    count = _branch(pos, last, count, i, k, t, b, scale, bg)
                    if count > switch_count:
                        _sync(pos, last, count, t, b, scale, bg)
                        status = ADVANCE_SWITCH
                        break
                if status == ADVANCE_DONE:
                    _sync(pos, last, count, t_stop, b, scale, bg)
                    t = t_stop
    return count, t, status, out_idx, out_k


def field_evolve(double[::1] mass, double[::1] coeff, const double[:, ::1] basis,
                 const double[:, ::1] kern, const Py_ssize_t[::1] lo, const Py_ssize_t[::1] hi,
                 Py_ssize_t nsteps, double growth_half, const double[::1] coeff_growth_half,
                 double noise_scale, double rho_scale, double a, double shift, double scale,
                 int dim, Py_ssize_t nb, rng):
    """One-dimensional field stepper; see _pykernels.field_evolve."""
    if dim != 1:
        raise ValueError("compiled field kernel supports dim == 1 only")
    cdef bitgen_t *bg = _bitgen(rng)
    cdef Py_ssize_t n = mass.shape[0], Q = coeff.shape[0]
    cdef double[::1] buf = np.empty(n)
    cdef double[::1] u = np.empty(n)
    cdef double[::1] w = np.empty(n)
    cdef double[::1] z = np.empty(n)
    cdef double[::1] xi = np.empty(n)
    cdef Py_ssize_t step, i, j, q, half
    cdef double inv_a = 1.0 / a, expo = (1.0 - a) / a, v, av, x, m, alive
    cdef bint extinct = False
    with rng.bit_generator.lock:
        with nogil:
            for step in range(nsteps):
                for half in range(2):
                    for i in range(n):
                        buf[i] = 0.0
                    for j in range(n):
                        m = mass[j]
                        if m > 0.0:
                            for i in range(lo[j], hi[j]):
                                buf[i] += kern[i, j] * m
                    for i in range(n):
                        mass[i] = buf[i] * growth_half
                    for q in range(Q):
                        coeff[q] *= coeff_growth_half[q]
                    if half == 1:
                        break
                    random_standard_uniform_fill(bg, n, &u[0])
                    random_standard_exponential_fill(bg, n, &w[0])
                    if rho_scale > 0.0:
                        random_standard_normal_fill(bg, n, &z[0])
                    for i in range(n):
                        m = mass[i]
                        if m > 0.0:
                            v = M_PI * (u[i] - 0.5)
                            av = a * (v + shift)
                            x = scale * sin(av) / pow(cos(v), inv_a) * pow(cos(v - av) / w[i], expo)
                            x = noise_scale * pow(m, inv_a) * x
                            if rho_scale > 0.0:
                                x += rho_scale * sqrt(m) * z[i]
                            if x < -m:
                                x = -m
                            xi[i] = x
                            mass[i] = m + x
                        else:
                            xi[i] = 0.0
                    for q in range(Q):
                        x = 0.0
                        for i in range(n):
                            x += basis[q, i] * xi[i]
                        coeff[q] += x
                alive = 0.0
                for i in range(n):
                    if mass[i] > 0.0:
                        alive = 1.0
                        break
                if alive == 0.0:
                    for i in range(n):
                        mass[i] = 0.0
                    for q in range(Q):
                        coeff[q] = 0.0
                    extinct = True
                    break
    return extinct
