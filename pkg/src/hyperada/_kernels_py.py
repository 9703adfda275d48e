"""Pure-numpy fallback for the hot Poincare-ball kernels.

Mirrors the compiled extension ``hyperada._kernels``; ``hyperada.backend``
selects whichever is available.  Every function takes C-contiguous float64
arrays of shape (n, d) and the positive curvature magnitude c = |kappa|.
Ops that return ball points re-project their output so that
c * |x|^2 <= 1 - eps; distance-like ops work on the unprojected algebra so
far pairs are not truncated by the guard.
"""

import numpy as np

# Argument guard for atanh; keeps results finite for points pushed onto the
# boundary by rounding.
_ATANH_MAX = 1.0 - 1e-15


def _tanh_ratio(s):
    """tanh(s)/s with the s -> 0 limit handled by series expansion."""
    small = np.abs(s) < 1e-7
    safe = np.where(small, 1.0, s)
    return np.where(small, 1.0 - s * s / 3.0, np.tanh(safe) / safe)


def _atanh_ratio(s):
    """atanh(s)/s with the s -> 0 limit handled by series expansion."""
    small = np.abs(s) < 1e-7
    safe = np.where(small, 0.5, np.clip(s, -_ATANH_MAX, _ATANH_MAX))
    return np.where(small, 1.0 + s * s / 3.0, np.arctanh(safe) / safe)


def _row_sq(x):
    return np.einsum("nd,nd->n", x, x)


def _mobius_add_raw(x, y, c):
    xsq = _row_sq(x)[:, None]
    ysq = _row_sq(y)[:, None]
    xy = np.einsum("nd,nd->n", x, y)[:, None]
    num = (1.0 + 2.0 * c * xy + c * ysq) * x + (1.0 - c * xsq) * y
    den = 1.0 + 2.0 * c * xy + c * c * xsq * ysq
    return num / den


def project_ball(x, c, eps):
    """Scale rows with c*|x|^2 > 1 - eps back onto the guard sphere."""
    out = np.array(x, dtype=np.float64, copy=True)
    sq = _row_sq(out)
    limit = (1.0 - eps) / c
    bad = sq > limit
    if np.any(bad):
        out[bad] *= np.sqrt(limit / sq[bad])[:, None]
    return out


def conformal_factor(x, c):
    return 2.0 / (1.0 - c * _row_sq(x))


def mobius_add(x, y, c, eps):
    return project_ball(_mobius_add_raw(x, y, c), c, eps)


def mobius_scalar_mul(r, x, c, eps):
    """r (x)_kappa x row-wise; r is a scalar or an (n,) array."""
    sc = np.sqrt(c)
    n = np.sqrt(_row_sq(x))[:, None]
    s = np.minimum(sc * n, _ATANH_MAX)
    t = _atanh_ratio(s) * s
    r = np.asarray(r, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    out = r * _tanh_ratio(r * t) * _atanh_ratio(s) * x
    return project_ball(out, c, eps)


def expmap0(v, c, eps):
    sc = np.sqrt(c)
    n = np.sqrt(_row_sq(v))[:, None]
    return project_ball(_tanh_ratio(sc * n) * v, c, eps)


def logmap0(x, c, eps):
    sc = np.sqrt(c)
    n = np.sqrt(_row_sq(x))[:, None]
    return _atanh_ratio(np.minimum(sc * n, _ATANH_MAX)) * x


def expmap(base, v, c, eps):
    sc = np.sqrt(c)
    lam = conformal_factor(base, c)[:, None]
    n = np.sqrt(_row_sq(v))[:, None]
    second = _tanh_ratio(sc * lam * n / 2.0) * (lam / 2.0) * v
    return project_ball(_mobius_add_raw(base, second, c), c, eps)


def logmap(base, y, c, eps):
    sc = np.sqrt(c)
    lam = conformal_factor(base, c)[:, None]
    m = _mobius_add_raw(-base, y, c)
    n = np.sqrt(_row_sq(m))[:, None]
    return (2.0 / lam) * _atanh_ratio(np.minimum(sc * n, _ATANH_MAX)) * m


def dist(x, y, c):
    sc = np.sqrt(c)
    m = _mobius_add_raw(-x, y, c)
    n = np.sqrt(_row_sq(m))
    return (2.0 / sc) * np.arctanh(np.minimum(sc * n, _ATANH_MAX))


def radius(x, c):
    sc = np.sqrt(c)
    n = np.sqrt(_row_sq(x))
    return (2.0 / sc) * np.arctanh(np.minimum(sc * n, _ATANH_MAX))


def gyromidpoint(points, weights, c, eps):
    """Weighted Mobius gyromidpoint of n points, returns shape (d,)."""
    lam = conformal_factor(points, c)
    den = float(np.dot(weights, lam - 1.0))
    num = (weights * lam) @ points
    return mobius_scalar_mul(0.5, (num / den)[None, :], c, eps)[0]


def gyromidpoint_pairs(x, y, wx, wy, c, eps):
    """Row-wise two-point gyromidpoints; wx, wy have shape (n,)."""
    lx = conformal_factor(x, c)
    ly = conformal_factor(y, c)
    den = (wx * (lx - 1.0) + wy * (ly - 1.0))[:, None]
    num = (wx * lx)[:, None] * x + (wy * ly)[:, None] * y
    return mobius_scalar_mul(0.5, num / den, c, eps)


def mlr_logits(x, p, a, c):
    """Ganea-style hyperbolic MLR logits, shape (n, C)."""
    sc = np.sqrt(c)
    n_rows = x.shape[0]
    n_classes = p.shape[0]
    out = np.empty((n_rows, n_classes), dtype=np.float64)
    lam_p = conformal_factor(p, c)
    a_norm = np.sqrt(np.einsum("cd,cd->c", a, a))
    for k in range(n_classes):
        m = _mobius_add_raw(np.broadcast_to(-p[k], x.shape), x, c)
        msq = _row_sq(m)
        ma = m @ a[k]
        s = 2.0 * sc * ma / (np.maximum(1.0 - c * msq, 1e-15) * a_norm[k])
        out[:, k] = (lam_p[k] * a_norm[k] / sc) * np.arcsinh(s)
    return out


def entropy_rows(probs):
    """Shannon entropy of each row, with 0 * log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=1)
