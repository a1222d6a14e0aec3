# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled coordinate-descent sweeps (covariance updates).

Must stay interchangeable with ``_cd_py.cd_sweeps``.
"""

from libc.math cimport fabs

import numpy as np

DEF CONVERGED = 0
DEF NEED_COLUMNS = 1
DEF MAX_SWEEPS = 2


cdef inline double _soft(double z, double t) nogil:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


cdef double _full_sweep(double[::1, :] gram, long[::1] slot, double[::1] grad,
                        double[::1] beta, const double[::1] diag, const double[::1] thresh,
                        unsigned char[::1] pending, long *n_pending) nogil:
    cdef long j, s, i
    cdef long p = grad.shape[0]
    cdef double bj, new, d
    cdef double maxd = 0.0
    for j in range(p):
        if diag[j] <= 0.0:
            continue
        bj = beta[j]
        new = _soft(grad[j] + diag[j] * bj, thresh[j]) / diag[j]
        d = new - bj
        if d == 0.0:
            continue
        s = slot[j]
        if s < 0:
            if pending[j] == 0:
                pending[j] = 1
                n_pending[0] += 1
            continue
        beta[j] = new
        # plain loop, not BLAS axpy: keeps rounding identical to the numpy fallback
        for i in range(p):
            grad[i] -= d * gram[i, s]
        if fabs(d) > maxd:
            maxd = fabs(d)
    return maxd


cdef double _active_sweep(double[::1, :] gaa, double[::1] ga, long[::1] act, long na,
                          double[::1] beta, const double[::1] diag, const double[::1] thresh) nogil:
    cdef long c, j, i
    cdef double bj, new, d
    cdef double maxd = 0.0
    for c in range(na):
        j = act[c]
        bj = beta[j]
        new = _soft(ga[c] + diag[j] * bj, thresh[j]) / diag[j]
        d = new - bj
        if d == 0.0:
            continue
        beta[j] = new
        for i in range(na):
            ga[i] -= d * gaa[i, c]
        if fabs(d) > maxd:
            maxd = fabs(d)
    return maxd


def cd_sweeps(double[::1, :] gram, long[::1] slot, double[::1] grad, double[::1] beta,
              const double[::1] diag, const double[::1] thresh, double tol, long max_sweeps,
              long sweeps_done=0):
    """Run cyclic coordinate descent until convergence or a missing column.

    A full sweep visits every coordinate; between full sweeps the nonzero
    coordinates are iterated on their own Gram block, and the full gradient
    is brought up to date once the block converges.

    Returns ``(status, sweeps, pending)``; ``pending`` lists coordinates that
    want to leave zero but have no Gram column yet.
    """
    cdef long p = grad.shape[0]
    cdef long sweeps = sweeps_done
    cdef long n_pending = 0
    cdef long na, j, r, c, s, i
    cdef double maxd = 1e300
    cdef double d
    cdef long[::1] act = np.empty(p, dtype=np.int64)
    cdef double[::1] ga = np.empty(p, dtype=np.float64)
    cdef double[::1] b0 = np.empty(p, dtype=np.float64)
    cdef unsigned char[::1] pending = np.zeros(p, dtype=np.uint8)
    cdef double[::1, :] gaa

    while sweeps < max_sweeps:
        with nogil:
            maxd = _full_sweep(gram, slot, grad, beta, diag, thresh, pending, &n_pending)
        sweeps += 1
        if n_pending > 0 or maxd < tol:
            break
        na = 0
        for j in range(p):
            if beta[j] != 0.0:
                act[na] = j
                na += 1
        gaa = np.empty((na, na), dtype=np.float64, order="F")
        with nogil:
            for c in range(na):
                s = slot[act[c]]
                for r in range(na):
                    gaa[r, c] = gram[act[r], s]
                ga[c] = grad[act[c]]
                b0[c] = beta[act[c]]
            while sweeps < max_sweeps:
                maxd = _active_sweep(gaa, ga, act, na, beta, diag, thresh)
                sweeps += 1
                if maxd < tol:
                    break
            for c in range(na):
                d = beta[act[c]] - b0[c]
                if d == 0.0:
                    continue
                s = slot[act[c]]
                for i in range(p):
                    grad[i] -= d * gram[i, s]

    if n_pending > 0:
        return NEED_COLUMNS, sweeps, np.flatnonzero(np.asarray(pending))
    if sweeps >= max_sweeps and maxd >= tol:
        return MAX_SWEEPS, sweeps, np.zeros(0, dtype=np.int64)
    return CONVERGED, sweeps, np.zeros(0, dtype=np.int64)
