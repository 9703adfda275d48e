# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled Poincare-ball kernels.

Same contract as hyperada._kernels_py (the import-time fallback): float64
C-contiguous (n, d) arrays, positive curvature magnitude c = |kappa|, and
guard re-projection on every op that returns ball points.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport asinh, atanh, log, sqrt, tanh

cnp.import_array()

cdef double _ATANH_MAX = 1.0 - 1e-15


cdef inline double _tanh_ratio(double s) noexcept nogil:
    if s < 1e-7 and s > -1e-7:
        return 1.0 - s * s / 3.0
    return tanh(s) / s


cdef inline double _atanh_ratio(double s) noexcept nogil:
    cdef double clipped
    if s < 1e-7 and s > -1e-7:
        return 1.0 + s * s / 3.0
    clipped = s
    if clipped > _ATANH_MAX:
        clipped = _ATANH_MAX
    elif clipped < -_ATANH_MAX:
        clipped = -_ATANH_MAX
    return atanh(clipped) / clipped


cdef inline double _row_sq(const double[:, ::1] x, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t j
    cdef double acc = 0.0
    for j in range(x.shape[1]):
        acc += x[i, j] * x[i, j]
    return acc


cdef inline double _row_dot(const double[:, ::1] x, const double[:, ::1] y,
                            Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t j
    cdef double acc = 0.0
    for j in range(x.shape[1]):
        acc += x[i, j] * y[i, j]
    return acc


cdef inline void _project_row(double[:, ::1] out, Py_ssize_t i, double c,
                              double eps) noexcept nogil:
    cdef double sq = _row_sq(out, i)
    cdef double limit = (1.0 - eps) / c
    cdef double scale
    cdef Py_ssize_t j
    if sq > limit:
        scale = sqrt(limit / sq)
        for j in range(out.shape[1]):
            out[i, j] *= scale


cdef inline void _mobius_add_row(const double[:, ::1] x, const double[:, ::1] y,
                                 Py_ssize_t i, double c,
                                 double[:, ::1] out) noexcept nogil:
    cdef double xsq = _row_sq(x, i)
    cdef double ysq = _row_sq(y, i)
    cdef double xy = _row_dot(x, y, i)
    cdef double cx = 1.0 + 2.0 * c * xy + c * ysq
    cdef double cy = 1.0 - c * xsq
    cdef double den = 1.0 + 2.0 * c * xy + c * c * xsq * ysq
    cdef Py_ssize_t j
    for j in range(x.shape[1]):
        out[i, j] = (cx * x[i, j] + cy * y[i, j]) / den


def project_ball(const double[:, ::1] x, double c, double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] res = np.array(x, dtype=np.float64)
    cdef double[:, ::1] out = res
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            _project_row(out, i, c, eps)
    return res


def conformal_factor(const double[:, ::1] x, double c):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] res = np.empty(n, dtype=np.float64)
    cdef double[::1] out = res
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = 2.0 / (1.0 - c * _row_sq(x, i))
    return res


def mobius_add(const double[:, ::1] x, const double[:, ::1] y, double c,
               double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] res = np.empty((n, x.shape[1]),
                                                           dtype=np.float64)
    cdef double[:, ::1] out = res
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            _mobius_add_row(x, y, i, c, out)
            _project_row(out, i, c, eps)
    return res


cdef inline void _scalar_mul_row(double r, const double[:, ::1] x,
                                 Py_ssize_t i, double c, double eps,
                                 double[:, ::1] out) noexcept nogil:
    cdef double sc = sqrt(c)
    cdef double nrm = sqrt(_row_sq(x, i))
    cdef double s = sc * nrm
    cdef double t, coef
    cdef Py_ssize_t j
    if s > _ATANH_MAX:
        s = _ATANH_MAX
    t = _atanh_ratio(s) * s
    coef = r * _tanh_ratio(r * t) * _atanh_ratio(s)
    for j in range(x.shape[1]):
        out[i, j] = coef * x[i, j]
    _project_row(out, i, c, eps)


def mobius_scalar_mul(object r, const double[:, ::1] x, double c, double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] res = np.empty((n, x.shape[1]),
                                                           dtype=np.float64)
    cdef double[:, ::1] out = res
    cdef double[::1] rv
    cdef double rs
    cdef Py_ssize_t i
    if isinstance(r, np.ndarray) and np.ndim(r) == 1:
        rv = np.ascontiguousarray(r, dtype=np.float64)
        with nogil:
            for i in range(n):
                _scalar_mul_row(rv[i], x, i, c, eps, out)
    else:
        rs = float(r)
        with nogil:
            for i in range(n):
                _scalar_mul_row(rs, x, i, c, eps, out)
    return res


def expmap0(const double[:, ::1] v, double c, double eps):
    cdef Py_ssize_t n = v.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] res = np.empty((n, v.shape[1]),
                                                           dtype=np.float64)
    cdef double[:, ::1] out = res
    cdef double sc = sqrt(c)
    cdef double coef
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            coef = _tanh_ratio(sc * sqrt(_row_sq(v, i)))
            for j in range(v.shape[1]):
                out[i, j] = coef * v[i, j]
            _project_row(out, i, c, eps)
    return res


def logmap0(const double[:, ::1] x, double c, double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] res = np.empty((n, x.shape[1]),
                                                           dtype=np.float64)
    cdef double[:, ::1] out = res
    cdef double sc = sqrt(c)
    cdef double s, coef
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            s = sc * sqrt(_row_sq(x, i))
            if s > _ATANH_MAX:
                s = _ATANH_MAX
            coef = _atanh_ratio(s)
            for j in range(x.shape[1]):
                out[i, j] = coef * x[i, j]
    return res


def expmap(const double[:, ::1] base, const double[:, ::1] v, double c,
           double eps):
    cdef Py_ssize_t n = base.shape[0]
    cdef Py_ssize_t d = base.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] sec_arr = np.empty((n, d),
                                                               dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] res = np.empty((n, d),
                                                           dtype=np.float64)
    cdef double[:, ::1] sec = sec_arr
    cdef double[:, ::1] out = res
    cdef double sc = sqrt(c)
    cdef double lam, coef
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            lam = 2.0 / (1.0 - c * _row_sq(base, i))
            coef = _tanh_ratio(sc * lam * sqrt(_row_sq(v, i)) / 2.0) * lam / 2.0
            for j in range(d):
                sec[i, j] = coef * v[i, j]
            _mobius_add_row(base, sec, i, c, out)
            _project_row(out, i, c, eps)
    return res


def logmap(const double[:, ::1] base, const double[:, ::1] y, double c,
           double eps):
    cdef Py_ssize_t n = base.shape[0]
    cdef Py_ssize_t d = base.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] neg_arr = np.empty((n, d),
                                                               dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] res = np.empty((n, d),
                                                           dtype=np.float64)
    cdef double[:, ::1] neg = neg_arr
    cdef double[:, ::1] out = res
    cdef double sc = sqrt(c)
    cdef double lam, s, coef
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(d):
                neg[i, j] = -base[i, j]
            lam = 2.0 / (1.0 - c * _row_sq(base, i))
            _mobius_add_row(neg, y, i, c, out)
            s = sc * sqrt(_row_sq(out, i))
            if s > _ATANH_MAX:
                s = _ATANH_MAX
            coef = (2.0 / lam) * _atanh_ratio(s)
            for j in range(d):
                out[i, j] = coef * out[i, j]
    return res


def dist(const double[:, ::1] x, const double[:, ::1] y, double c):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] res = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] tmp_arr = np.empty((n, d),
                                                               dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] neg_arr = np.empty((n, d),
                                                               dtype=np.float64)
    cdef double[::1] out = res
    cdef double[:, ::1] tmp = tmp_arr
    cdef double[:, ::1] neg = neg_arr
    cdef double sc = sqrt(c)
    cdef double s
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(d):
                neg[i, j] = -x[i, j]
            _mobius_add_row(neg, y, i, c, tmp)
            s = sc * sqrt(_row_sq(tmp, i))
            if s > _ATANH_MAX:
                s = _ATANH_MAX
            out[i] = (2.0 / sc) * atanh(s)
    return res


def radius(const double[:, ::1] x, double c):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] res = np.empty(n, dtype=np.float64)
    cdef double[::1] out = res
    cdef double sc = sqrt(c)
    cdef double s
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            s = sc * sqrt(_row_sq(x, i))
            if s > _ATANH_MAX:
                s = _ATANH_MAX
            out[i] = (2.0 / sc) * atanh(s)
    return res


def gyromidpoint(const double[:, ::1] points, const double[::1] weights,
                 double c, double eps):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] u_arr = np.zeros((1, d),
                                                             dtype=np.float64)
    cdef double[:, ::1] u = u_arr
    cdef cnp.ndarray[cnp.float64_t, ndim=2] res = np.empty((1, d),
                                                           dtype=np.float64)
    cdef double[:, ::1] out = res
    cdef double lam, den = 0.0
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            lam = 2.0 / (1.0 - c * _row_sq(points, i))
            den += weights[i] * (lam - 1.0)
            for j in range(d):
                u[0, j] += weights[i] * lam * points[i, j]
        for j in range(d):
            u[0, j] /= den
        _scalar_mul_row(0.5, u, 0, c, eps, out)
    return res[0]


def gyromidpoint_pairs(const double[:, ::1] x, const double[:, ::1] y,
                       const double[::1] wx, const double[::1] wy,
                       double c, double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] u_arr = np.empty((n, d),
                                                             dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] res = np.empty((n, d),
                                                           dtype=np.float64)
    cdef double[:, ::1] u = u_arr
    cdef double[:, ::1] out = res
    cdef double lx, ly, den
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            lx = 2.0 / (1.0 - c * _row_sq(x, i))
            ly = 2.0 / (1.0 - c * _row_sq(y, i))
            den = wx[i] * (lx - 1.0) + wy[i] * (ly - 1.0)
            for j in range(d):
                u[i, j] = (wx[i] * lx * x[i, j] + wy[i] * ly * y[i, j]) / den
            _scalar_mul_row(0.5, u, i, c, eps, out)
    return res


def mlr_logits(const double[:, ::1] x, const double[:, ::1] p,
               const double[:, ::1] a, double c):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t n_classes = p.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] res = np.empty((n, n_classes),
                                                           dtype=np.float64)
    cdef double[:, ::1] out = res
    cdef double sc = sqrt(c)
    cdef double lam_p, a_norm, psq, xsq, px, cx, cy, den, msq, ma, mj, s, denom
    cdef Py_ssize_t i, j, k
    with nogil:
        for k in range(n_classes):
            psq = _row_sq(p, k)
            a_norm = sqrt(_row_sq(a, k))
            lam_p = 2.0 / (1.0 - c * psq)
            for i in range(n):
                xsq = _row_sq(x, i)
                px = 0.0
                for j in range(d):
                    px += -p[k, j] * x[i, j]
                cx = 1.0 + 2.0 * c * px + c * xsq
                cy = 1.0 - c * psq
                den = 1.0 + 2.0 * c * px + c * c * psq * xsq
                msq = 0.0
                ma = 0.0
                for j in range(d):
                    mj = (cx * (-p[k, j]) + cy * x[i, j]) / den
                    msq += mj * mj
                    ma += mj * a[k, j]
                denom = 1.0 - c * msq
                if denom < 1e-15:
                    denom = 1e-15
                s = 2.0 * sc * ma / (denom * a_norm)
                out[i, k] = (lam_p * a_norm / sc) * asinh(s)
    return res


def entropy_rows(const double[:, ::1] probs):
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t m = probs.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] res = np.empty(n, dtype=np.float64)
    cdef double[::1] out = res
    cdef double acc
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(m):
                if probs[i, j] > 0.0:
                    acc -= probs[i, j] * log(probs[i, j])
            out[i] = acc
    return res
