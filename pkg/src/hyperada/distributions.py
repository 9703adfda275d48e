"""Per-class wrapped normals on the ball, gradient-flow estimation, and the
ODE solvers that drive it (adaptive RK4 for RGB, fixed-step Euler for LiDAR).
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from hyperada.geometry import Ball, GeometryError

V_MAX = 10.0          # flow-velocity clip
SIGMA_SQ_MAX = 4.0    # per-dimension covariance cap
LOG_COV_MIN = -40.0
DIST_DOC_VERSION = 1


class OdeError(RuntimeError):
    """Adaptive solver could not meet the tolerance above the minimum step."""


@dataclass
class ClassDistribution:
    """Wrapped normal for one class: ball mean + diagonal tangent covariance."""

    class_id: int
    mean: np.ndarray
    log_diag_cov: np.ndarray
    kappa: float = -1.0

    def __post_init__(self):
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        self.log_diag_cov = np.clip(
            np.ascontiguousarray(self.log_diag_cov, dtype=np.float64),
            LOG_COV_MIN,
            np.log(SIGMA_SQ_MAX),
        )
        ball = Ball(kappa=self.kappa)
        if not np.all(ball.contains(self.mean)):
            raise ValueError(f"class {self.class_id} mean lies outside the ball")

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def ball(self):
        return Ball(kappa=self.kappa)


def wrapped_normal_sample(dist, n, rng):
    """Draw n ball points: N(0, diag) at the origin tangent, parallel-
    transported to the mean and pushed through the exponential map."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    ball = dist.ball
    sigma = np.exp(0.5 * dist.log_diag_cov)
    v = rng.normal(size=(n, dist.dim)) * sigma
    lam_mu = ball.conformal_factor(dist.mean)
    transported = v * (2.0 / lam_mu)
    base = np.broadcast_to(dist.mean, (n, dist.dim))
    return ball.expmap(transported, base=base)


@dataclass
class FlowNetwork:
    """Two-layer map from (distribution params, class stats) to a velocity."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def create(cls, in_dim, out_dim, rng, hidden=32, scale=0.1):
        return cls(
            w1=rng.normal(size=(in_dim, hidden)) * scale,
            b1=np.zeros(hidden),
            w2=rng.normal(size=(hidden, out_dim)) * scale,
            b2=np.zeros(out_dim),
        )

    @classmethod
    def zeros(cls, in_dim, out_dim, hidden=32):
        return cls(
            w1=np.zeros((in_dim, hidden)),
            b1=np.zeros(hidden),
            w2=np.zeros((hidden, out_dim)),
            b2=np.zeros(out_dim),
        )

    @property
    def in_dim(self):
        return self.w1.shape[0]

    @property
    def out_dim(self):
        return self.w2.shape[1]

    def velocity(self, inp):
        return np.tanh(inp @ self.w1 + self.b1) @ self.w2 + self.b2

    def flatten(self):
        return np.concatenate([p.ravel() for p in (self.w1, self.b1, self.w2, self.b2)])

    def with_flat(self, flat):
        out = []
        offset = 0
        for p in (self.w1, self.b1, self.w2, self.b2):
            out.append(flat[offset:offset + p.size].reshape(p.shape).copy())
            offset += p.size
        return FlowNetwork(*out)

    def copy(self):
        return FlowNetwork(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def flow_field(dist_params, stats, net):
    """Velocity d(theta)/dt for one class, clipped to |v| <= V_MAX."""
    stats = np.asarray(stats, dtype=np.float64)
    if stats.size == 0:
        raise ValueError("flow_field needs statistics from at least one embedding")
    inp = np.concatenate([np.asarray(dist_params, dtype=np.float64), stats])
    v = net.velocity(inp)
    norm = np.linalg.norm(v)
    if norm > V_MAX:
        v = v * (V_MAX / norm)
    return v


@dataclass(frozen=True)
class OdeSolverConfig:
    mode: str = "adaptive_rk4"
    dt: float = 0.5
    steps: int = 2
    rel_tol: float = 1e-5
    abs_tol: float = 1e-8
    dt_min: float = 1e-10

    def __post_init__(self):
        if self.mode not in ("adaptive_rk4", "fixed_euler"):
            raise ValueError(f"unknown solver mode {self.mode!r}")


def rk4_step(f, theta, h):
    k1 = f(theta)
    k2 = f(theta + 0.5 * h * k1)
    k3 = f(theta + 0.5 * h * k2)
    k4 = f(theta + h * k3)
    return theta + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def integrate(f, theta0, config):
    """Integrate d(theta)/dt = f(theta) over t in [0, 1].

    fixed_euler takes ``steps`` explicit steps of size ``dt``; adaptive_rk4
    uses step doubling with Richardson extrapolation for error control.
    """
    theta = np.array(theta0, dtype=np.float64, copy=True)
    if config.mode == "fixed_euler":
        for _ in range(config.steps):
            theta = theta + config.dt * f(theta)
        return theta

    t, h = 0.0, 0.25
    while t < 1.0:
        h = min(h, 1.0 - t)
        full = rk4_step(f, theta, h)
        half = rk4_step(f, rk4_step(f, theta, h / 2.0), h / 2.0)
        err = np.abs(half - full).max() / 15.0
        # conservative error-per-unit-step control: the accumulated global
        # error then stays comfortably below the requested tolerance
        scale = 0.25 * (config.abs_tol + config.rel_tol * max(np.abs(theta).max(), 1.0)) * h
        if np.isfinite(err) and err <= scale:
            t += h
            theta = half + (half - full) / 15.0
            h *= min(5.0, max(0.2, 0.9 * (scale / max(err, 1e-300)) ** 0.25))
        else:
            shrink = 0.2 if not np.isfinite(err) else max(0.2, 0.9 * (scale / err) ** 0.25)
            h *= shrink
            if h < config.dt_min:
                raise OdeError(f"adaptive step size underflowed below {config.dt_min}")
    return theta


# -- distribution estimation -------------------------------------------------

def _theta_encode(mean, log_diag_cov, ball):
    return np.concatenate([ball.logmap(mean), log_diag_cov])


def _theta_decode(theta, dim, ball):
    mean = ball.expmap(theta[:dim])
    log_cov = np.clip(theta[dim:], LOG_COV_MIN, np.log(SIGMA_SQ_MAX))
    return mean, log_cov


def class_statistics(embeddings, mean, ball):
    """Count, tangent mean and tangent second moment at the current mean."""
    if embeddings.shape[0] == 0:
        raise ValueError("statistics need at least one embedding")
    base = np.broadcast_to(mean, embeddings.shape)
    tang = ball.logmap(embeddings, base=base)
    return np.concatenate([
        [np.log1p(embeddings.shape[0])],
        tang.mean(axis=0),
        (tang ** 2).mean(axis=0),
    ])


def flow_input_dim(dim):
    return 2 * dim + (2 * dim + 1)


def naive_distribution(class_id, embeddings, ball):
    """Tangent-space moment-matching initialiser for the flow ODE."""
    tang = ball.logmap(embeddings)
    mean = ball.expmap(tang.mean(axis=0))
    base = np.broadcast_to(mean, embeddings.shape)
    local = ball.logmap(embeddings, base=base)
    var = np.clip(local.var(axis=0), 1e-4, SIGMA_SQ_MAX)
    return ClassDistribution(class_id, mean, np.log(var), kappa=ball.kappa)


def estimate_distribution(class_id, embeddings, net, config, ball):
    """Evolve the naive estimate along the learned gradient flow."""
    start = naive_distribution(class_id, embeddings, ball)
    dim = start.dim
    theta0 = _theta_encode(start.mean, start.log_diag_cov, ball)

    def field(theta):
        mean, _ = _theta_decode(theta, dim, ball)
        stats = class_statistics(embeddings, mean, ball)
        return flow_field(theta, stats, net)

    theta1 = integrate(field, theta0, config)
    mean, log_cov = _theta_decode(theta1, dim, ball)
    return ClassDistribution(class_id, ball.project(mean), log_cov, kappa=ball.kappa)


def estimate_all(emb_map, net, config, ball):
    """Per-class estimates for every class present in the embedding map."""
    out = {}
    for class_id in emb_map.classes_present():
        cells = emb_map.cells_of(class_id)
        out[class_id] = estimate_distribution(
            class_id, emb_map.embeddings[cells], net, config, ball
        )
    return out


# -- meta-learning of the flow network ---------------------------------------

@dataclass
class MetaUpdateResult:
    net: FlowNetwork
    val_loss: float
    skipped_classes: list


def meta_update(net, train_split, val_split, inner_config, *, head, ball,
                mode="rgb", hfa_config=None, interp_weight=0.3, rng,
                spsa_step=0.02, spsa_lr=0.01, n_probes=4):
    """One outer step: fit distributions on the train split, score the HFA
    loss on the validation split, update the flow parameters along a
    simultaneous-perturbation estimate of the validation gradient.

    Returns the updated network plus the validation loss measured before the
    update; classes present in the validation split but absent from the
    train split are skipped and reported, never fabricated.
    """
    from hyperada import augmentation as aug

    if val_split.n_cells == 0 or not val_split.classes_present():
        raise ValueError("validation split is empty")
    if train_split.n_cells == 0 or not train_split.classes_present():
        raise ValueError("train split is empty")
    if hfa_config is None:
        hfa_config = aug.HfaLossConfig()

    train_classes = set(train_split.classes_present())
    val_classes = val_split.classes_present()
    usable = [k for k in val_classes if k in train_classes]
    skipped = [k for k in val_classes if k not in train_classes]
    if not usable:
        raise ValueError("no validation class has train-split support")

    val_view = val_split.copy()
    val_view.labels[~np.isin(val_view.labels, usable)] = -1

    def val_loss(candidate, seed):
        local_rng = np.random.default_rng(seed)
        dists = estimate_all(train_split, candidate, inner_config, ball)
        dists = {k: v for k, v in dists.items() if k in usable}
        pool = aug.build_pool(dists, mode, local_rng, classes=usable)
        schedule = aug.InterpolationSchedule(w0=interp_weight, w1=interp_weight)
        augmented = aug.augment_map(val_view, pool, schedule, 1.0, local_rng,
                                    mixup=None)
        report = aug.hfa_loss(val_view, augmented, dists, head, hfa_config,
                              pool, ball)
        return report.weighted_total

    flat = net.flatten()
    seed = int(rng.integers(0, 2**32))
    loss_before = val_loss(net, seed)
    grad = np.zeros_like(flat)
    for _ in range(n_probes):
        delta = rng.choice([-1.0, 1.0], size=flat.shape)
        plus = val_loss(net.with_flat(flat + spsa_step * delta), seed)
        minus = val_loss(net.with_flat(flat - spsa_step * delta), seed)
        grad += (plus - minus) / (2.0 * spsa_step) * delta
    grad /= n_probes
    new_net = net.with_flat(flat - spsa_lr * grad)
    return MetaUpdateResult(net=new_net, val_loss=float(loss_before),
                            skipped_classes=skipped)


# -- serialization ------------------------------------------------------------

def distributions_to_json(dists, net=None):
    doc = {
        "version": DIST_DOC_VERSION,
        "classes": [
            {
                "class_id": int(d.class_id),
                "kappa": float(d.kappa),
                "mean": d.mean.tolist(),
                "log_diag_cov": d.log_diag_cov.tolist(),
            }
            for d in sorted(dists.values(), key=lambda d: d.class_id)
        ],
    }
    if net is not None:
        doc["flow_network"] = {
            name: getattr(net, name).tolist() for name in ("w1", "b1", "w2", "b2")
        }
    return json.dumps(doc, sort_keys=True)


def distributions_from_json(text):
    doc = json.loads(text)
    if doc.get("version") != DIST_DOC_VERSION:
        raise ValueError(f"unsupported distribution document version {doc.get('version')!r}")
    dists = {
        entry["class_id"]: ClassDistribution(
            class_id=entry["class_id"],
            mean=np.array(entry["mean"]),
            log_diag_cov=np.array(entry["log_diag_cov"]),
            kappa=entry["kappa"],
        )
        for entry in doc["classes"]
    }
    net = None
    if "flow_network" in doc:
        raw = doc["flow_network"]
        net = FlowNetwork(*[np.array(raw[name]) for name in ("w1", "b1", "w2", "b2")])
    return dists, net
