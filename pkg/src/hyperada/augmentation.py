"""Feature augmentation for dense prediction: per-class synthetic sampling,
geodesic interpolation under a ramp schedule, hyperbolic mixup, reintegration
into spatial maps, and the combined augmentation loss.
"""

from dataclasses import dataclass, field

import numpy as np

from hyperada.containers import UNLABELED, EmbeddingMap
from hyperada.distributions import SIGMA_SQ_MAX, wrapped_normal_sample
from hyperada.geometry import Ball, softmax

RGB_SAMPLES_PER_CLASS = 5
LIDAR_SAMPLES_PER_CLASS = 2
RADIUS_SQ_CAP = 9.0


@dataclass
class AugmentationPool:
    """Per-class synthetic ball points drawn from the class distributions."""

    mode: str
    samples: dict

    def k_for_mode(self):
        return RGB_SAMPLES_PER_CLASS if self.mode == "rgb" else LIDAR_SAMPLES_PER_CLASS


@dataclass(frozen=True)
class InterpolationSchedule:
    """Linear ramp of the synthetic-embedding weight over training progress."""

    w0: float = 0.1
    w1: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.w0 <= 1.0 and 0.0 <= self.w1 <= 1.0):
            raise ValueError("schedule endpoints must lie in [0, 1]")
        if self.w1 < self.w0:
            raise ValueError("synthetic weight must be non-decreasing over training")

    def weight(self, t_frac):
        t = min(max(float(t_frac), 0.0), 1.0)
        return self.w0 + (self.w1 - self.w0) * t


@dataclass(frozen=True)
class HfaLossConfig:
    lambda_div: float = 0.01
    lambda_proto_reg: float = 0.01
    lambda_mean_var: float = 0.01
    focal_gamma: float = 2.0
    lambda_hfa: float = 0.1

    def __post_init__(self):
        for name in ("lambda_div", "lambda_proto_reg", "lambda_mean_var", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class MixupConfig:
    enabled: bool = True
    beta_alpha: float = 0.4

    def __post_init__(self):
        if self.beta_alpha <= 0:
            raise ValueError("beta_alpha must be > 0")


def build_pool(distributions, mode, rng, classes=None):
    """Sample k synthetic embeddings per present class (5 rgb / 2 lidar)."""
    if mode not in ("rgb", "lidar"):
        raise ValueError(f"unknown mode {mode!r}")
    k = RGB_SAMPLES_PER_CLASS if mode == "rgb" else LIDAR_SAMPLES_PER_CLASS
    wanted = sorted(distributions) if classes is None else sorted(classes)
    samples = {}
    for class_id in wanted:
        if class_id not in distributions:
            raise KeyError(f"no distribution for class {class_id} present in the batch")
        samples[class_id] = wrapped_normal_sample(distributions[class_id], k, rng)
    return AugmentationPool(mode=mode, samples=samples)


def interpolate(real_by_class, pool, schedule, t_frac, rng, ball=None):
    """Pull each real embedding toward a randomly assigned pool member along
    the geodesic, with synthetic weight w(t)."""
    ball = ball or Ball()
    w = schedule.weight(t_frac)
    out = {}
    for class_id, pts in sorted(real_by_class.items()):
        pts = np.asarray(pts, dtype=np.float64)
        if pts.shape[0] == 0:
            raise ValueError(f"class {class_id} has no real embeddings to interpolate")
        members = pool.samples[class_id]
        assign = rng.integers(0, members.shape[0], size=pts.shape[0])
        out[class_id] = ball.gyromidpoint_pairs(pts, members[assign], 1.0 - w, w)
    return out


def hyperbolic_mixup(real_by_class, cfg, rng, ball=None):
    """Geodesically mix shuffled same-class pairs with Beta(alpha, alpha)
    weights; classes with fewer than 2 members are skipped and reported."""
    ball = ball or Ball()
    mixed, skipped = {}, []
    for class_id, pts in sorted(real_by_class.items()):
        pts = np.asarray(pts, dtype=np.float64)
        if pts.shape[0] < 2:
            skipped.append(class_id)
            continue
        perm = rng.permutation(pts.shape[0])
        lam = rng.beta(cfg.beta_alpha, cfg.beta_alpha, size=pts.shape[0])
        mixed[class_id] = ball.gyromidpoint_pairs(pts, pts[perm], lam, 1.0 - lam)
    return mixed, skipped


def reintegrate(features, augmented, rng):
    """Swap per-class augmented embeddings back into the spatial map.

    ``augmented`` maps class id -> {"sampled": arr | None, "mixed": arr | None};
    a per-class coin flip picks the source pool.  Labels and unlabeled cells
    are untouched.
    """
    out = features.copy()
    for class_id in sorted(augmented):
        variants = augmented[class_id]
        options = [k for k in ("sampled", "mixed") if variants.get(k) is not None]
        if not options:
            continue
        choice = options[0] if len(options) == 1 else options[int(rng.integers(0, 2))]
        cells = features.cells_of(class_id)
        replacement = variants[choice]
        if replacement.shape[0] != cells.shape[0]:
            raise ValueError(
                f"class {class_id}: {replacement.shape[0]} augmented embeddings "
                f"for {cells.shape[0]} cells"
            )
        out.embeddings[cells] = replacement
    return out


# -- one-shot plan for a full embedding map -----------------------------------
# The trainer differentiates through the augmentation, so the random choices
# are frozen into a plan and application is a pure function of the embeddings.

@dataclass
class ClassAugPlan:
    cells: np.ndarray
    route: str                      # "sampled" | "mixed"
    assignment: np.ndarray = None   # pool member per cell   (sampled route)
    partner: np.ndarray = None      # within-class positions (mixed route)
    lam: np.ndarray = None          # Beta draws per cell    (mixed route)


@dataclass
class AugmentationPlan:
    weight: float
    per_class: dict


def plan_augmentation(emb_map, pool, schedule, t_frac, rng, mixup=None):
    w = schedule.weight(t_frac)
    per_class = {}
    for class_id in sorted(pool.samples):
        cells = emb_map.cells_of(class_id)
        if cells.size == 0:
            continue
        members = pool.samples[class_id]
        assignment = rng.integers(0, members.shape[0], size=cells.size)
        plan = ClassAugPlan(cells=cells, route="sampled", assignment=assignment)
        if mixup is not None and mixup.enabled and cells.size >= 2:
            partner = rng.permutation(cells.size)
            lam = rng.beta(mixup.beta_alpha, mixup.beta_alpha, size=cells.size)
            if rng.integers(0, 2) == 1:
                plan = ClassAugPlan(cells=cells, route="mixed", partner=partner, lam=lam)
        per_class[class_id] = plan
    return AugmentationPlan(weight=w, per_class=per_class)


def apply_plan(embeddings, plan, pool, ball):
    """Pure function of the embeddings; random draws live in the plan."""
    out = embeddings.copy()
    w = plan.weight
    for class_id, cp in plan.per_class.items():
        pts = embeddings[cp.cells]
        if cp.route == "sampled":
            members = pool.samples[class_id][cp.assignment]
            out[cp.cells] = ball.gyromidpoint_pairs(pts, members, 1.0 - w, w)
        else:
            out[cp.cells] = ball.gyromidpoint_pairs(pts, pts[cp.partner], cp.lam, 1.0 - cp.lam)
    return out


def apply_plan_vjp(embeddings, plan, pool, ball, gbar):
    """Gradient of apply_plan w.r.t. the input embeddings."""
    from hyperada.geometry import gyromidpoint_pairs_vjp

    ebar = gbar.copy()
    w = plan.weight
    for class_id, cp in plan.per_class.items():
        pts = embeddings[cp.cells]
        gcells = gbar[cp.cells]
        ebar[cp.cells] = 0.0
        if cp.route == "sampled":
            members = pool.samples[class_id][cp.assignment]
            wx = np.full(pts.shape[0], 1.0 - w)
            wy = np.full(pts.shape[0], w)
            xbar, _ = gyromidpoint_pairs_vjp(pts, members, wx, wy, gcells, ball.c)
            ebar[cp.cells] += xbar
        else:
            xbar, ybar = gyromidpoint_pairs_vjp(
                pts, pts[cp.partner], cp.lam, 1.0 - cp.lam, gcells, ball.c
            )
            ebar[cp.cells] += xbar
            np.add.at(ebar, cp.cells[cp.partner], ybar)
    return ebar


def augment_map(emb_map, pool, schedule, t_frac, rng, mixup=None, ball=None):
    """Plan + apply in one call; returns a new EmbeddingMap, labels unchanged."""
    ball = ball or Ball()
    plan = plan_augmentation(emb_map, pool, schedule, t_frac, rng, mixup=mixup)
    out = emb_map.copy()
    out.embeddings = apply_plan(emb_map.embeddings, plan, pool, ball)
    return out


# -- losses --------------------------------------------------------------------

def _check_probs(probs):
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")
    if np.any(probs < 0):
        raise ValueError("probabilities must be non-negative")


def focal_loss(probs, targets, gamma):
    """Mean over labeled cells of -(1 - p_t)^gamma * log(p_t)."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    _check_probs(probs)
    mask = targets != UNLABELED
    if not np.any(mask):
        raise ValueError("focal loss needs at least one labeled cell")
    pt = np.clip(probs[mask, targets[mask]], 1e-300, 1.0)
    return float(np.mean(-((1.0 - pt) ** gamma) * np.log(pt)))


def focal_loss_from_logits(logits, targets, gamma, cell_weights=None):
    """Focal loss plus its gradient w.r.t. the logits.

    The loss is a weighted mean over labeled cells; uniform weights by
    default, with ``cell_weights`` available for confidence-weighted
    supervision (e.g. pasted pseudo-labels)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    mask = targets != UNLABELED
    if not np.any(mask):
        return 0.0, np.zeros_like(logits)
    probs = softmax(logits[mask])
    tgt = targets[mask]
    idx = np.arange(tgt.shape[0])
    pt = np.clip(probs[idx, tgt], 1e-300, 1.0)
    one_minus = 1.0 - pt
    if cell_weights is None:
        w = np.ones(tgt.shape[0])
    else:
        w = np.asarray(cell_weights, dtype=np.float64)[mask]
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("cell weights must be non-negative with a positive sum")
    w_norm = w / w.sum()
    loss = float(np.sum(w_norm * -(one_minus ** gamma) * np.log(pt)))
    if gamma == 0.0:
        g = -1.0 / pt
    else:
        g = gamma * (one_minus ** (gamma - 1.0)) * np.log(pt) - (one_minus ** gamma) / pt
    zbar_rows = (w_norm * g * pt)[:, None] * (np.eye(probs.shape[1])[tgt] - probs)
    zbar = np.zeros_like(logits)
    zbar[mask] = zbar_rows
    return loss, zbar


@dataclass
class HfaLossReport:
    """Decomposed augmentation loss terms plus their weighted sum."""

    orig_cls: float
    aug_cls: float
    div: float
    proto_reg: float
    mean_var: float
    weighted_total: float

    def as_dict(self):
        return {
            "orig_cls": self.orig_cls,
            "aug_cls": self.aug_cls,
            "div": self.div,
            "proto_reg": self.proto_reg,
            "mean_var": self.mean_var,
            "weighted_total": self.weighted_total,
        }


def diversity_term(pool, ball):
    """Negated mean pairwise distance among each class's synthetic samples."""
    per_class = []
    for class_id in sorted(pool.samples):
        pts = pool.samples[class_id]
        k = pts.shape[0]
        if k < 2:
            continue
        acc, pairs = 0.0, 0
        for i in range(k - 1):
            rest = pts[i + 1:]
            acc += float(ball.distance(np.broadcast_to(pts[i], rest.shape), rest).sum())
            pairs += rest.shape[0]
        per_class.append(acc / pairs)
    if not per_class:
        return 0.0
    return -float(np.mean(per_class))


def prototype_term(emb_map, distributions, ball):
    dists = []
    for class_id in emb_map.classes_present():
        if class_id not in distributions:
            raise KeyError(f"no distribution for labeled class {class_id}")
        cells = emb_map.cells_of(class_id)
        mid = ball.gyromidpoint(emb_map.embeddings[cells])
        dists.append(ball.distance(distributions[class_id].mean, mid))
    return float(np.mean(dists)) if dists else 0.0


def mean_var_term(distributions, ball):
    terms = []
    for class_id in sorted(distributions):
        d = distributions[class_id]
        r = ball.radius(d.mean)
        radius_pen = max(0.0, r * r - RADIUS_SQ_CAP)
        var_pen = float(np.maximum(np.exp(d.log_diag_cov) - SIGMA_SQ_MAX, 0.0).sum())
        terms.append(radius_pen + var_pen)
    return float(np.mean(terms)) if terms else 0.0


def hfa_loss(original, augmented, distributions, head, cfg, pool, ball=None):
    """Classification terms on the original and augmented maps plus the
    diversity / prototype / distribution regularizers."""
    ball = ball or Ball()
    if original.shape != augmented.shape or not np.array_equal(
        original.labels, augmented.labels
    ):
        raise ValueError("original and augmented maps must share shape and labels")
    gamma = cfg.focal_gamma
    orig_cls, _ = focal_loss_from_logits(
        ball.mlr_logits(original.embeddings, head), original.labels, gamma
    )
    aug_cls, _ = focal_loss_from_logits(
        ball.mlr_logits(augmented.embeddings, head), augmented.labels, gamma
    )
    div = diversity_term(pool, ball)
    proto = prototype_term(original, distributions, ball)
    mean_var = mean_var_term(
        {k: v for k, v in distributions.items() if k in original.classes_present()}, ball
    )
    total = (
        orig_cls
        + aug_cls
        + cfg.lambda_div * div
        + cfg.lambda_proto_reg * proto
        + cfg.lambda_mean_var * mean_var
    )
    return HfaLossReport(
        orig_cls=float(orig_cls),
        aug_cls=float(aug_cls),
        div=float(div),
        proto_reg=float(proto),
        mean_var=float(mean_var),
        weighted_total=float(total),
    )
