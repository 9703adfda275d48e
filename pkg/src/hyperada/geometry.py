"""Poincare-ball operations: Mobius algebra, exp/log maps, distances, the
weighted gyromidpoint, and hyperbolic multinomial logistic regression.

All operations are pure; arrays are float64; a point is valid when
|kappa| * |x|^2 < 1 and every returning op re-projects its output to
|kappa| * |x|^2 <= 1 - eps.  Vector-Jacobian products for the pieces the
trainer differentiates live at the bottom of the module and are checked
against central finite differences in the test suite.
"""

from dataclasses import dataclass, field

import numpy as np

from hyperada.backend import kernels

EPS_BALL = 1e-5


class GeometryError(ValueError):
    """Invalid point, weight or shape handed to a ball operation."""


def _rows(x):
    """View input as (n, d) float64, remembering if it was a single point."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise GeometryError(f"expected a point or a batch of points, got ndim={arr.ndim}")
    return arr, False


def _unrows(arr, single):
    return arr[0] if single else arr


def softmax(z):
    """Row-wise softmax of a logit matrix."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Ball:
    """Poincare ball of curvature kappa < 0 with a numerical boundary guard."""

    kappa: float = -1.0
    eps: float = EPS_BALL

    def __post_init__(self):
        if not self.kappa < 0:
            raise GeometryError(f"curvature must be strictly negative, got {self.kappa}")
        if not 0 <= self.eps < 1:
            raise GeometryError(f"boundary guard eps must be in [0, 1), got {self.eps}")

    @property
    def c(self):
        """Positive curvature magnitude |kappa| used in the closed forms."""
        return -self.kappa

    # -- containment ---------------------------------------------------

    def sq_norm(self, x):
        arr, single = _rows(x)
        return _unrows(np.einsum("nd,nd->n", arr, arr), single)

    def contains(self, x, strict=True):
        sq = self.c * self.sq_norm(x)
        return sq < 1.0 if strict else sq <= 1.0 - self.eps

    def project(self, x):
        arr, single = _rows(x)
        return _unrows(kernels.project_ball(arr, self.c, self.eps), single)

    def _require_inside(self, x, what="point"):
        arr, single = _rows(x)
        sq = self.c * np.einsum("nd,nd->n", arr, arr)
        if np.any(sq >= 1.0):
            raise GeometryError(f"{what} on or outside the ball boundary (|kappa||x|^2 >= 1)")
        return arr, single

    def _check_dims(self, a, b):
        if a.shape[1] != b.shape[1]:
            raise GeometryError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
        if a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0]):
            raise GeometryError(f"batch size mismatch: {a.shape[0]} vs {b.shape[0]}")

    @staticmethod
    def _broadcast(a, b):
        if a.shape[0] == b.shape[0]:
            return a, b
        n = max(a.shape[0], b.shape[0])
        if a.shape[0] == 1:
            a = np.ascontiguousarray(np.broadcast_to(a, (n, a.shape[1])))
        else:
            b = np.ascontiguousarray(np.broadcast_to(b, (n, b.shape[1])))
        return a, b

    # -- Mobius algebra ------------------------------------------------

    def conformal_factor(self, x):
        arr, single = self._require_inside(x, "conformal_factor argument")
        return _unrows(kernels.conformal_factor(arr, self.c), single)

    def mobius_add(self, x, y):
        xa, xs = _rows(x)
        ya, ys = _rows(y)
        self._check_dims(xa, ya)
        xa, ya = self._broadcast(xa, ya)
        return _unrows(kernels.mobius_add(xa, ya, self.c, self.eps), xs and ys)

    def mobius_neg(self, x):
        arr, single = _rows(x)
        return _unrows(-arr, single)

    def mobius_scalar_mul(self, r, x):
        arr, single = _rows(x)
        return _unrows(kernels.mobius_scalar_mul(r, arr, self.c, self.eps), single)

    # -- exp / log maps ------------------------------------------------

    def expmap(self, v, base=None):
        va, vs = _rows(v)
        if base is None:
            return _unrows(kernels.expmap0(va, self.c, self.eps), vs)
        ba, bs = self._require_inside(base, "expmap base")
        self._check_dims(ba, va)
        ba, va = self._broadcast(ba, va)
        return _unrows(kernels.expmap(ba, va, self.c, self.eps), vs and bs)

    def logmap(self, y, base=None):
        ya, ys = self._require_inside(y, "logmap argument")
        if base is None:
            return _unrows(kernels.logmap0(ya, self.c, self.eps), ys)
        ba, bs = self._require_inside(base, "logmap base")
        self._check_dims(ba, ya)
        ba, ya = self._broadcast(ba, ya)
        return _unrows(kernels.logmap(ba, ya, self.c, self.eps), ys and bs)

    # -- distances -----------------------------------------------------

    def distance(self, x, y):
        xa, xs = _rows(x)
        ya, ys = _rows(y)
        self._check_dims(xa, ya)
        xa, ya = self._broadcast(xa, ya)
        out = kernels.dist(xa, ya, self.c)
        return float(out[0]) if (xs and ys) else out

    def radius(self, x):
        arr, single = _rows(x)
        out = kernels.radius(arr, self.c)
        return float(out[0]) if single else out

    # -- gyromidpoint ----------------------------------------------------

    def gyromidpoint(self, points, weights=None):
        arr = np.ascontiguousarray(points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise GeometryError("gyromidpoint needs a non-empty (n, d) batch of points")
        if weights is None:
            w = np.ones(arr.shape[0], dtype=np.float64)
        else:
            w = np.ascontiguousarray(weights, dtype=np.float64)
        if w.shape != (arr.shape[0],):
            raise GeometryError(
                f"weights length {w.shape} does not match {arr.shape[0]} points"
            )
        if np.any(w < 0):
            raise GeometryError("gyromidpoint weights must be non-negative")
        if not np.any(w > 0):
            raise GeometryError("gyromidpoint weights must not all be zero")
        return kernels.gyromidpoint(arr, w, self.c, self.eps)

    def gyromidpoint_pairs(self, x, y, wx, wy):
        xa, _ = _rows(x)
        ya, _ = _rows(y)
        self._check_dims(xa, ya)
        wx = np.ascontiguousarray(np.broadcast_to(wx, (xa.shape[0],)), dtype=np.float64)
        wy = np.ascontiguousarray(np.broadcast_to(wy, (xa.shape[0],)), dtype=np.float64)
        if np.any(wx < 0) or np.any(wy < 0) or np.any(wx + wy <= 0):
            raise GeometryError("pair weights must be non-negative and not both zero")
        return kernels.gyromidpoint_pairs(xa, ya, wx, wy, self.c, self.eps)

    # -- hyperbolic MLR --------------------------------------------------

    def mlr_logits(self, x, head):
        arr, single = _rows(x)
        head.validate(self)
        if arr.shape[1] != head.dim:
            raise GeometryError(
                f"point dimension {arr.shape[1]} does not match head dimension {head.dim}"
            )
        out = kernels.mlr_logits(arr, head.offsets, head.normals, self.c)
        return _unrows(out, single)


@dataclass
class MlrHead:
    """Per-class gyroplanes: offset point p_c inside the ball, normal a_c."""

    offsets: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.offsets = np.ascontiguousarray(self.offsets, dtype=np.float64)
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
        if self.offsets.ndim != 2 or self.offsets.shape != self.normals.shape:
            raise GeometryError("offsets and normals must both have shape (classes, dim)")
        if self.offsets.shape[0] < 2:
            raise GeometryError("hyperbolic MLR needs at least 2 classes")

    @property
    def n_classes(self):
        return self.offsets.shape[0]

    @property
    def dim(self):
        return self.offsets.shape[1]

    def validate(self, ball):
        norms = np.einsum("cd,cd->c", self.normals, self.normals)
        if np.any(norms == 0.0):
            raise GeometryError("zero normal vector for a class")
        if not np.all(ball.contains(self.offsets)):
            raise GeometryError("MLR offset point outside the ball")

    def copy(self):
        return MlrHead(self.offsets.copy(), self.normals.copy())


# ---------------------------------------------------------------------------
# Vector-Jacobian products.  Each *_vjp takes the forward inputs plus the
# upstream gradient and returns gradients w.r.t. the differentiated inputs.
# The guard projection is treated as identity (active only within eps of the
# boundary, which training never reaches).
# ---------------------------------------------------------------------------

_ATANH_MAX = 1.0 - 1e-15


def _sq(x):
    return np.einsum("nd,nd->n", x, x)


def expmap0_vjp(v, gbar, c):
    """Gradient of x = expmap0(v) contracted with gbar, both (n, d)."""
    n = np.sqrt(_sq(v))
    s = np.sqrt(c) * n
    # tanh(s)/s and its n-derivative over n, series-stable near zero.
    small = s < 1e-5
    s_safe = np.where(small, 1.0, s)
    g = np.where(small, 1.0 - s * s / 3.0, np.tanh(s_safe) / s_safe)
    sech2 = 1.0 - np.tanh(s_safe) ** 2
    gp_over_n = np.where(small, -2.0 * c / 3.0, c * (sech2 - g) / (s_safe * s_safe))
    dot = np.einsum("nd,nd->n", gbar, v)
    return g[:, None] * gbar + (gp_over_n * dot)[:, None] * v


def mobius_add_vjp(x, y, mbar, c):
    """VJPs of m = x (+) y w.r.t. both arguments; all arrays (n, d)."""
    xsq = _sq(x)[:, None]
    ysq = _sq(y)[:, None]
    xy = np.einsum("nd,nd->n", x, y)[:, None]
    A = 1.0 + 2.0 * c * xy + c * ysq
    B = 1.0 - c * xsq
    D = 1.0 + 2.0 * c * xy + c * c * xsq * ysq
    m = (A * x + B * y) / D
    mb_x = np.einsum("nd,nd->n", mbar, x)[:, None]
    mb_y = np.einsum("nd,nd->n", mbar, y)[:, None]
    mb_m = np.einsum("nd,nd->n", mbar, m)[:, None]
    dA_dx = 2.0 * c * y
    dB_dx = -2.0 * c * x
    dD_dx = 2.0 * c * y + 2.0 * c * c * ysq * x
    xbar = (A * mbar + mb_x * dA_dx + mb_y * dB_dx - mb_m * dD_dx) / D
    dA_dy = 2.0 * c * x + 2.0 * c * y
    dD_dy = 2.0 * c * x + 2.0 * c * c * xsq * y
    ybar = (mb_x * dA_dy + B * mbar - mb_m * dD_dy) / D
    return xbar, ybar


def _half_mul_vjp(u, mbar, c):
    """VJP of m = 0.5 (x)_kappa u; u, mbar are (n, d)."""
    nu = np.sqrt(_sq(u))
    s = np.minimum(np.sqrt(c) * nu, _ATANH_MAX)
    small = s < 1e-5
    s_safe = np.where(small, 0.5, s)
    t = np.arctanh(s_safe)
    th = np.tanh(t / 2.0)
    f = np.where(small, 0.5 + s * s / 8.0, th / s_safe)
    # df/ds = [ sech^2(t/2) / (2 (1 - s^2)) - f ] / s ;  f'(nu)/nu = c * (df/ds) / s
    sech2 = 1.0 - th * th
    df_ds = (sech2 / (2.0 * (1.0 - s_safe * s_safe)) - f) / s_safe
    fp_over_nu = np.where(small, c / 4.0, c * df_ds / s_safe)
    dot = np.einsum("nd,nd->n", mbar, u)
    return f[:, None] * mbar + (fp_over_nu * dot)[:, None] * u


def gyromidpoint_vjp(points, weights, mbar, c):
    """Gradient of the n-point gyromidpoint w.r.t. the points.

    points (n, d), weights (n,), mbar (d,); returns (n, d).
    """
    lam = 2.0 / (1.0 - c * _sq(points))
    S = float(np.dot(weights, lam - 1.0))
    num = (weights * lam) @ points
    u = num / S
    ubar = _half_mul_vjp(u[None, :], mbar[None, :], c)[0]
    dot_x = points @ ubar
    dot_u = float(np.dot(ubar, u))
    coef_lin = weights * lam / S
    coef_quad = weights * lam * lam * c / S * (dot_x - dot_u)
    return coef_lin[:, None] * ubar[None, :] + coef_quad[:, None] * points


def gyromidpoint_pairs_vjp(x, y, wx, wy, mbar, c):
    """Row-wise VJP of the two-point gyromidpoint w.r.t. both points."""
    lx = 2.0 / (1.0 - c * _sq(x))
    ly = 2.0 / (1.0 - c * _sq(y))
    S = wx * (lx - 1.0) + wy * (ly - 1.0)
    u = ((wx * lx)[:, None] * x + (wy * ly)[:, None] * y) / S[:, None]
    ubar = _half_mul_vjp(u, mbar, c)
    dot_u = np.einsum("nd,nd->n", ubar, u)

    def side(points, w, lam):
        dot_p = np.einsum("nd,nd->n", ubar, points)
        lin = (w * lam / S)[:, None] * ubar
        quad = (w * lam * lam * c / S * (dot_p - dot_u))[:, None] * points
        return lin + quad

    return side(x, wx, lx), side(y, wy, ly)


def dist_vjp(x, y, dbar, c):
    """Row-wise VJP of the geodesic distance w.r.t. both endpoints."""
    diff = x - y
    A = _sq(diff)
    Bx = 1.0 - c * _sq(x)
    By = 1.0 - c * _sq(y)
    G = 1.0 + 2.0 * c * A / (Bx * By)
    inv_root = 1.0 / np.sqrt(np.maximum(G * G - 1.0, 1e-30))
    coef = (dbar / np.sqrt(c)) * inv_root
    xbar = coef[:, None] * (
        4.0 * c * diff / (Bx * By)[:, None]
        + (4.0 * c * c * A / (Bx * Bx * By))[:, None] * x
    )
    ybar = coef[:, None] * (
        -4.0 * c * diff / (Bx * By)[:, None]
        + (4.0 * c * c * A / (By * By * Bx))[:, None] * y
    )
    return xbar, ybar


def mlr_logits_vjp(x, head, zbar, c):
    """VJP of the hyperbolic MLR logits.

    x (n, d), zbar (n, C); returns (xbar, offsets_bar, normals_bar).
    """
    P, A = head.offsets, head.normals
    n, d = x.shape
    sc = np.sqrt(c)
    xbar = np.zeros_like(x)
    pbar = np.zeros_like(P)
    abar = np.zeros_like(A)
    lam_p = 2.0 / (1.0 - c * _sq(P))
    for k in range(P.shape[0]):
        q = np.broadcast_to(-P[k], x.shape)
        qsq = _sq(q)[:, None]
        xsq = _sq(x)[:, None]
        qx = np.einsum("nd,nd->n", q, x)[:, None]
        Ak_coef = 1.0 + 2.0 * c * qx + c * xsq
        Bk = 1.0 - c * qsq
        Dk = 1.0 + 2.0 * c * qx + c * c * qsq * xsq
        m = (Ak_coef * q + Bk * x) / Dk
        msq = _sq(m)
        Dm = np.maximum(1.0 - c * msq, 1e-15)
        na = float(np.sqrt(np.dot(A[k], A[k])))
        inner = m @ A[k]
        s = 2.0 * sc * inner / (Dm * na)
        asinh_s = np.arcsinh(s)
        inv_root = 1.0 / np.sqrt(1.0 + s * s)
        zb = zbar[:, k]

        # normals
        a_hat = A[k] / na
        term_dir = (lam_p[k] / sc) * (zb * asinh_s)
        s_grad_a = (2.0 * sc) * (m - np.outer(inner / (na * na), A[k])) / Dm[:, None]
        term_s = (lam_p[k] / sc) * (zb * inv_root)
        abar[k] += term_dir @ np.broadcast_to(a_hat, x.shape) + term_s @ s_grad_a

        # m path
        ds_dm = (2.0 * sc / na) * (
            A[k][None, :] / Dm[:, None] + (inner * 2.0 * c / (Dm * Dm))[:, None] * m
        )
        mbar = ((lam_p[k] * na / sc) * zb * inv_root)[:, None] * ds_dm
        qbar, xk_bar = mobius_add_vjp(np.ascontiguousarray(q), x, mbar, c)
        xbar += xk_bar
        pbar[k] += -qbar.sum(axis=0)

        # conformal factor path
        pbar[k] += (lam_p[k] ** 2 * c) * float((zb * asinh_s).sum()) * (na / sc) * P[k]
    return xbar, pbar, abar
