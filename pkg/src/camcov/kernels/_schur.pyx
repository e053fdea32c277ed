# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the reduced camera system."""

from libc.stdint cimport int64_t
from libc.math cimport fabs, sqrt
from scipy.linalg.cython_lapack cimport dsytrf, dsytri2, dsycon

import numpy as np


cdef void _accumulate(double[:, ::1] Z,
                      const double[:, :, ::1] E,
                      const double[:, :, ::1] F,
                      const double[:, :, ::1] EH,
                      const int64_t[::1] cam_ptr,
                      const int64_t[::1] cam_obs,
                      const int64_t[::1] pt_ptr,
                      const int64_t[::1] pt_obs,
                      const int64_t[::1] obs_cam,
                      const int64_t[::1] obs_pt,
                      Py_ssize_t border,
                      Py_ssize_t lo, Py_ssize_t hi) noexcept nogil:
    cdef Py_ssize_t a, b, idx, idx2, o, o2, j, r, s, l, row, col
    cdef double e0, e1, e2
    for a in range(lo, hi):
        for idx in range(cam_ptr[a], cam_ptr[a + 1]):
            o = cam_obs[idx]
            j = obs_pt[o]
            for idx2 in range(pt_ptr[j], pt_ptr[j + 1]):
                o2 = pt_obs[idx2]
                b = obs_cam[o2]
                for r in range(8):
                    e0 = E[o, r, 0]
                    e1 = E[o, r, 1]
                    e2 = E[o, r, 2]
                    row = 8 * a + r
                    col = 8 * b
                    for s in range(8):
                        Z[row, col + s] -= e0 * F[o2, s, 0] + e1 * F[o2, s, 1] + e2 * F[o2, s, 2]
            for r in range(8):
                row = 8 * a + r
                for l in range(7):
                    Z[row, border + l] -= EH[o, r, l]
                    Z[border + l, row] -= EH[o, r, l]


def schur_accumulate(double[:, ::1] Z, const double[:, :, ::1] E, const double[:, :, ::1] F,
                     const double[:, :, ::1] EH,
                     const int64_t[::1] cam_ptr, const int64_t[::1] cam_obs,
                     const int64_t[::1] pt_ptr, const int64_t[::1] pt_obs,
                     const int64_t[::1] obs_cam, const int64_t[::1] obs_pt,
                     Py_ssize_t n, Py_ssize_t lo, Py_ssize_t hi):
    """Subtract the point contributions of cameras ``lo..hi-1`` from ``Z`` in place.

    Only the row block of each camera in the range (and the matching border
    column block) is written, so disjoint ranges can run concurrently.
    """
    with nogil:
        _accumulate(Z, E, F, EH, cam_ptr, cam_obs, pt_ptr, pt_obs, obs_cam, obs_pt,
                    8 * n, lo, hi)


def sym_invert(double[:, ::1] Z):
    """Invert symmetric ``Z`` in place with Bunch-Kaufman LDL^T (dsytrf + dsytri2).

    Returns ``(info, min_pivot, max_pivot, rcond)``: the pivots are the
    smallest and largest absolute eigenvalues of the 1x1 / 2x2 blocks of ``D``
    and ``rcond`` is the LAPACK estimate of the reciprocal 1-norm condition
    number. On ``info != 0`` the contents of ``Z`` are undefined.
    """
    cdef int N = Z.shape[0]
    cdef int info = 0, lwork = -1
    cdef char uplo = b'L'
    cdef double wq = 0.0
    cdef int[::1] ipiv = np.zeros(max(N, 1), dtype=np.intc)
    cdef double[::1] work
    cdef Py_ssize_t k, i, j
    cdef double a, b, c, mean, rad, lo, hi, pmin = 1e308, pmax = 0.0
    cdef double anorm = 0.0, rcond = 0.0, colsum
    cdef int[::1] iwork
    if N == 0:
        return 0, 0.0, 0.0, 1.0
    with nogil:
        for i in range(N):
            colsum = 0.0
            for j in range(N):
                colsum += fabs(Z[i, j])
            if colsum > anorm:
                anorm = colsum
    # column-major lower triangle == row-major upper triangle of symmetric Z
    dsytrf(&uplo, &N, &Z[0, 0], &N, &ipiv[0], &wq, &lwork, &info)
    lwork = max(<int>wq, 1)
    work = np.empty(lwork)
    with nogil:
        dsytrf(&uplo, &N, &Z[0, 0], &N, &ipiv[0], &work[0], &lwork, &info)
    if info < 0:
        return info, 0.0, 0.0, 0.0
    k = 0
    while k < N:
        if ipiv[k] > 0:
            lo = fabs(Z[k, k])
            hi = lo
            k += 1
        else:
            a = Z[k, k]
            b = Z[k, k + 1]
            c = Z[k + 1, k + 1]
            mean = 0.5 * (a + c)
            rad = sqrt(0.25 * (a - c) * (a - c) + b * b)
            lo = fabs(mean - rad)
            hi = fabs(mean + rad)
            if hi < lo:
                lo, hi = hi, lo
            k += 2
        if lo < pmin:
            pmin = lo
        if hi > pmax:
            pmax = hi
    if info > 0:
        return info, 0.0, pmax, 0.0
    work = np.empty(2 * N)
    iwork = np.empty(N, dtype=np.intc)
    with nogil:
        dsycon(&uplo, &N, &Z[0, 0], &N, &ipiv[0], &anorm, &rcond, &work[0], &iwork[0], &info)
    lwork = -1
    dsytri2(&uplo, &N, &Z[0, 0], &N, &ipiv[0], &wq, &lwork, &info)
    lwork = max(<int>wq, 1)
    work = np.empty(lwork)
    with nogil:
        dsytri2(&uplo, &N, &Z[0, 0], &N, &ipiv[0], &work[0], &lwork, &info)
        if info == 0:
            for i in range(N):
                for j in range(i + 1, N):
                    Z[j, i] = Z[i, j]
    return info, pmin, pmax, rcond
