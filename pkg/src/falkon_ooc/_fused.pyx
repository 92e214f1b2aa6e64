# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused kernel-vector products for thin (small-d) data.

The q x r kernel block is never formed: each output row walks the columns in
tiles of ``COL_TILE`` entries held in a thread-local buffer.
"""
from cython.parallel cimport prange, parallel
from libc.math cimport exp, fmax
from libc.stdlib cimport malloc, free

cdef enum:
    COL_TILE = 256


cdef inline void _row_gaussian(
    const double* x1_row,
    const double* x2t,
    Py_ssize_t r,
    Py_ssize_t d,
    double n1_i,
    const double* n2,
    const double* v,
    double gamma,
    double* buf,
    double* result,
) noexcept nogil:
    cdef Py_ssize_t j0, jj, jn, k
    cdef double a, dist, acc = 0.0, acc_t
    cdef const double* col
    j0 = 0
    while j0 < r:
        jn = r - j0
        if jn > COL_TILE:
            jn = COL_TILE
        for jj in range(jn):
            buf[jj] = 0.0
        for k in range(d):
            a = x1_row[k]
            col = x2t + k * r + j0
            for jj in range(jn):
                buf[jj] += a * col[jj]
        acc_t = 0.0
        for jj in range(jn):
            dist = fmax(n1_i + n2[j0 + jj] - 2.0 * buf[jj], 0.0)
            acc_t += exp(-gamma * dist) * v[j0 + jj]
        acc += acc_t
        j0 += jn
    result[0] = acc


def gaussian_matvec(
    const double[:, ::1] x1,
    const double[:, ::1] x2t,
    const double[::1] n1,
    const double[::1] n2,
    const double[::1] v,
    double gamma,
    double[::1] out,
):
    """out[i] = sum_j exp(-gamma * max(n1[i] + n2[j] - 2 <x1_i, x2_j>, 0)) * v[j].

    ``x2t`` is the second operand transposed (d x r, C-contiguous) so the
    column tile loop is unit-stride.
    """
    cdef Py_ssize_t q = x1.shape[0]
    cdef Py_ssize_t d = x1.shape[1]
    cdef Py_ssize_t r = x2t.shape[1]
    cdef Py_ssize_t i
    cdef double* buf
    if x2t.shape[0] != d or n1.shape[0] != q or n2.shape[0] != r or v.shape[0] != r or out.shape[0] != q:
        raise ValueError("dimension mismatch")
    if q == 0:
        return
    if r == 0 or d == 0:
        raise ValueError("empty operand; handle in the caller")
    with nogil, parallel():
        buf = <double*> malloc(COL_TILE * sizeof(double))
        for i in prange(q, schedule="static"):
            _row_gaussian(&x1[i, 0], &x2t[0, 0], r, d, n1[i], &n2[0], &v[0], gamma, buf, &out[i])
        free(buf)


def compiled() -> bool:
    return True
