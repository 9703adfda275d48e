"""Desk-scale training pipeline: tiny per-cell encoder into the ball, the
hyperbolic MLR head, the composite RGB / alternating LiDAR losses with
hand-written backward passes, the active-adaptation round loop, and mIoU
evaluation.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from hyperada import augmentation as aug
from hyperada import mixing
from hyperada.acquisition import (
    BudgetPolicy,
    ScoreMap,
    halo_score,
    halo_vcd_score,
    select_pixels,
    select_voxels,
    vcd,
    voxelize,
)
from hyperada.containers import UNLABELED, EmbeddingMap
from hyperada.distributions import (
    FlowNetwork,
    OdeSolverConfig,
    estimate_all,
    flow_input_dim,
    meta_update,
)
from hyperada.geometry import (
    Ball,
    MlrHead,
    dist_vjp,
    expmap0_vjp,
    gyromidpoint_vjp,
    mlr_logits_vjp,
    softmax,
)

RGB_STRATEGIES = ("halo", "random")
LIDAR_STRATEGIES = ("halo", "vcd", "halo_vcd", "random")

# Smooth cap on the encoder's tangent norm: keeps embeddings away from the
# ball boundary where the conformal factors would blow the gradients up.
TANGENT_CAP = 1.5
_SQUASH_C = 1.0 / (TANGENT_CAP * TANGENT_CAP)


def _squash(t):
    """Norm-bounded tangent: |out| < TANGENT_CAP, identity near zero.

    This is exactly the exponential map at the origin of a ball with
    curvature 1/cap^2, so its VJP reuses expmap0_vjp.
    """
    from hyperada.backend import kernels

    return kernels.expmap0(np.ascontiguousarray(t), _SQUASH_C, 0.0)


@dataclass
class TinyEncoder:
    """Two-layer tanh MLP from per-cell features to a norm-capped tangent."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def create(cls, rng, in_dim, hidden=16, dim=8, scale=0.5):
        return cls(
            w1=rng.normal(size=(in_dim, hidden)) * scale / np.sqrt(in_dim),
            b1=np.zeros(hidden),
            w2=rng.normal(size=(hidden, dim)) * scale / np.sqrt(hidden),
            b2=np.zeros(dim),
        )

    def tangent(self, feats):
        h1 = np.tanh(feats @ self.w1 + self.b1)
        raw = h1 @ self.w2 + self.b2
        return _squash(raw), h1, raw

    def copy(self):
        return TinyEncoder(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass
class ModelState:
    encoder: TinyEncoder
    head: MlrHead
    ball: Ball

    def copy(self):
        return ModelState(self.encoder.copy(), self.head.copy(), self.ball)

    def params(self):
        return {
            "encoder.w1": self.encoder.w1,
            "encoder.b1": self.encoder.b1,
            "encoder.w2": self.encoder.w2,
            "encoder.b2": self.encoder.b2,
            "head.offsets": self.head.offsets,
            "head.normals": self.head.normals,
        }


def init_state(rng, in_dim, n_classes, cfg):
    encoder = TinyEncoder.create(rng, in_dim, hidden=cfg.hidden_dim, dim=cfg.embed_dim)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    offsets = np.zeros((n_classes, cfg.embed_dim))
    offsets[:, 0] = 0.1 * np.cos(angles)
    offsets[:, 1] = 0.1 * np.sin(angles)
    normals = rng.normal(size=(n_classes, cfg.embed_dim)) * 0.5
    normals[:, 0] += np.cos(angles)
    normals[:, 1] += np.sin(angles)
    return ModelState(encoder=encoder, head=MlrHead(offsets, normals), ball=Ball())


@dataclass(frozen=True)
class TrainingConfig:
    """Knobs for the desk-scale loops; component toggles drive the ablations."""

    modality: str = "rgb"
    seed: int = 0
    embed_dim: int = 8
    hidden_dim: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    pretrain_steps: int = 150
    steps_per_round: int = 40
    meta_steps: int = 8
    lambda_hfa: float = 0.1
    focal_gamma: float = 2.0
    use_focal: bool = True
    use_hfa: bool = True
    use_mixup: bool = True
    use_mixing: bool = True
    target_only_phase_start: float = 0.8
    tau_percentile: float = 60.0
    voxel_size: float = 0.25
    schedule_w0: float = 0.1
    schedule_w1: float = 0.5

    def __post_init__(self):
        if self.modality not in ("rgb", "lidar"):
            raise ValueError(f"unknown modality {self.modality!r}")

    @property
    def gamma(self):
        return self.focal_gamma if self.use_focal else 0.0

    def hfa_config(self):
        return aug.HfaLossConfig(focal_gamma=self.gamma, lambda_hfa=self.lambda_hfa)


@dataclass
class LossReport:
    """Decomposed step loss; total always recombines from the parts."""

    l_src: float
    l_tgt: float
    l_hfa: float
    l_mix: float
    lambda_hfa: float
    hfa_terms: aug.HfaLossReport | None = None

    @property
    def total(self):
        return self.l_src + self.l_tgt + self.lambda_hfa * self.l_hfa + self.l_mix

    def as_dict(self):
        out = {
            "l_src": self.l_src,
            "l_tgt": self.l_tgt,
            "l_hfa": self.l_hfa,
            "l_mix": self.l_mix,
            "total": self.total,
        }
        if self.hfa_terms is not None:
            out["hfa_terms"] = self.hfa_terms.as_dict()
        return out


# -- featurization ---------------------------------------------------------------

def image_features(image):
    """3x3 edge-padded patch of channels per pixel, flattened."""
    padded = np.pad(image.channels, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w, c = image.channels.shape
    patches = np.empty((h, w, 9 * c))
    k = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            patches[:, :, k * c:(k + 1) * c] = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            k += 1
    return patches.reshape(h * w, 9 * c)


def image_feature_dim(n_channels=3):
    return 9 * n_channels


def cloud_features(cloud, voxel_size):
    """Per-point xyz (scaled), intensity, and voxel-local point count."""
    grid = voxelize(cloud.points, voxel_size)
    counts = np.zeros(cloud.n_points)
    for v in range(grid.n_voxels):
        counts[grid.point_lists[v]] = grid.point_lists[v].shape[0]
    return np.column_stack([
        cloud.points[:, 0] / 12.0,
        cloud.points[:, 1] / 12.0,
        cloud.points[:, 2] / 3.0,
        cloud.points[:, 3],
        np.log1p(counts) / 3.0,
    ])


CLOUD_FEATURE_DIM = 5


# -- forward / backward ------------------------------------------------------------

def forward(state, feats):
    """Embeddings inside the ball plus per-cell class probabilities."""
    v, h1, raw = state.encoder.tangent(feats)
    x = state.ball.expmap(v)
    z = state.ball.mlr_logits(x, state.head)
    return x, softmax(z), {"v": v, "h1": h1, "raw": raw, "z": z, "feats": feats}


def _zero_grads(state):
    return {name: np.zeros_like(p) for name, p in state.params().items()}


def _backward_from_embedding(state, cache, xbar, grads):
    """Chain an embedding gradient through expmap0, the tangent squash, and
    the encoder MLP."""
    vbar = expmap0_vjp(cache["v"], xbar, state.ball.c)
    rawbar = expmap0_vjp(cache["raw"], vbar, _SQUASH_C)
    grads["encoder.w2"] += cache["h1"].T @ rawbar
    grads["encoder.b2"] += rawbar.sum(axis=0)
    h1bar = rawbar @ state.encoder.w2.T
    a1bar = h1bar * (1.0 - cache["h1"] ** 2)
    grads["encoder.w1"] += cache["feats"].T @ a1bar
    grads["encoder.b1"] += a1bar.sum(axis=0)


def _classification_pass(state, feats, labels, gamma, grads, cell_weights=None):
    """Focal loss through the MLR head; accumulates all parameter grads."""
    x, probs, cache = forward(state, feats)
    loss, zbar = aug.focal_loss_from_logits(cache["z"], labels, gamma, cell_weights)
    if loss == 0.0 and not np.any(zbar):
        return loss
    xbar, pbar, abar = mlr_logits_vjp(x, state.head, zbar, state.ball.c)
    grads["head.offsets"] += pbar
    grads["head.normals"] += abar
    _backward_from_embedding(state, cache, xbar, grads)
    return loss


def _hfa_pass(state, feats, labels, plan, pool, dists, cfg, grads):
    """HFA loss on one map: classification on original and augmented
    embeddings plus the three regularizers; full gradient accumulation."""
    ball = state.ball
    gamma = cfg.gamma
    hfa_cfg = cfg.hfa_config()
    x, probs, cache = forward(state, feats)
    z = cache["z"]

    orig_cls, zbar_orig = aug.focal_loss_from_logits(z, labels, gamma)
    xbar_total, pbar, abar = mlr_logits_vjp(x, state.head, zbar_orig, ball.c)

    x_aug = aug.apply_plan(x, plan, pool, ball)
    z_aug = ball.mlr_logits(x_aug, state.head)
    aug_cls, zbar_aug = aug.focal_loss_from_logits(z_aug, labels, gamma)
    xaug_bar, pbar2, abar2 = mlr_logits_vjp(x_aug, state.head, zbar_aug, ball.c)
    pbar += pbar2
    abar += abar2
    xbar_total += aug.apply_plan_vjp(x, plan, pool, ball, xaug_bar)

    emap = EmbeddingMap(x, labels, (labels.shape[0],))
    div = aug.diversity_term(pool, ball)
    mean_var = aug.mean_var_term(
        {k: v for k, v in dists.items() if k in emap.classes_present()}, ball
    )

    # prototype regularizer and its gradient through the class gyromidpoints
    proto_terms = []
    classes = emap.classes_present()
    for class_id in classes:
        if class_id not in dists:
            raise KeyError(f"no distribution for labeled class {class_id}")
    if classes:
        coef = hfa_cfg.lambda_proto_reg / len(classes)
        for class_id in classes:
            cells = emap.cells_of(class_id)
            pts = x[cells]
            w = np.ones(cells.shape[0])
            mid = ball.gyromidpoint(pts, w)
            mu = dists[class_id].mean
            proto_terms.append(float(ball.distance(mu, mid)))
            _, midbar = dist_vjp(mu[None, :], mid[None, :], np.array([coef]), ball.c)
            xbar_total[cells] += gyromidpoint_vjp(pts, w, midbar[0], ball.c)
    proto = float(np.mean(proto_terms)) if proto_terms else 0.0

    grads["head.offsets"] += pbar
    grads["head.normals"] += abar
    _backward_from_embedding(state, cache, xbar_total, grads)

    total = (
        orig_cls + aug_cls + hfa_cfg.lambda_div * div
        + hfa_cfg.lambda_proto_reg * proto + hfa_cfg.lambda_mean_var * mean_var
    )
    report = aug.HfaLossReport(
        orig_cls=float(orig_cls), aug_cls=float(aug_cls), div=float(div),
        proto_reg=proto, mean_var=float(mean_var), weighted_total=float(total),
    )
    return report


# NOTE: gradient scale — the hfa pass accumulates raw parameter gradients of
# its weighted total; the step scales them by lambda_hfa before the update.


@dataclass
class SgdOptimizer:
    lr: float
    momentum: float = 0.9
    max_grad_norm: float = 5.0
    velocity: dict = field(default_factory=dict)

    def step(self, state, grads, scale=1.0):
        params = state.params()
        total_sq = sum(float((grads[name] ** 2).sum()) for name in params)
        clip = 1.0
        if self.max_grad_norm and total_sq > self.max_grad_norm ** 2:
            clip = self.max_grad_norm / np.sqrt(total_sq)
        for name, p in params.items():
            g = grads[name] * (scale * clip)
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p -= self.lr * v
        state.head.offsets[:] = state.ball.project(state.head.offsets)


# -- step plans -------------------------------------------------------------------

@dataclass
class StepPlan:
    """All inputs of one optimizer step, with every random draw frozen so the
    loss is a pure, finite-difference-checkable function of the parameters."""

    src_feats: np.ndarray
    src_labels: np.ndarray
    tgt_feats: np.ndarray
    tgt_labels: np.ndarray
    mix_feats: np.ndarray = None
    mix_labels: np.ndarray = None
    mix_weights: np.ndarray = None
    pool: aug.AugmentationPool = None
    aug_plan: aug.AugmentationPlan = None
    dists: dict = None
    apply_hfa: bool = True
    apply_mix: bool = True


def step_loss_and_grads(state, plan, cfg):
    """Composite loss of one step plus gradients for every parameter group."""
    grads = _zero_grads(state)
    gamma = cfg.gamma
    l_src = _classification_pass(state, plan.src_feats, plan.src_labels, gamma, grads) \
        if plan.src_feats is not None else 0.0
    l_tgt = _classification_pass(state, plan.tgt_feats, plan.tgt_labels, gamma, grads) \
        if plan.tgt_feats is not None else 0.0

    hfa_terms = None
    l_hfa = 0.0
    if plan.apply_hfa and plan.pool is not None and plan.aug_plan is not None:
        hfa_grads = _zero_grads(state)
        hfa_terms = _hfa_pass(state, plan.src_feats, plan.src_labels, plan.aug_plan,
                              plan.pool, plan.dists, cfg, hfa_grads)
        l_hfa = hfa_terms.weighted_total
        for name in grads:
            grads[name] += cfg.lambda_hfa * hfa_grads[name]

    l_mix = 0.0
    if plan.apply_mix and plan.mix_feats is not None and np.any(plan.mix_labels != UNLABELED):
        l_mix = _classification_pass(state, plan.mix_feats, plan.mix_labels, gamma,
                                     grads, cell_weights=plan.mix_weights)

    report = LossReport(l_src=float(l_src), l_tgt=float(l_tgt), l_hfa=float(l_hfa),
                        l_mix=float(l_mix), lambda_hfa=cfg.lambda_hfa,
                        hfa_terms=hfa_terms)
    return report, grads


def step_loss_only(state, plan, cfg):
    """Pure forward recomputation of the step loss (finite-difference oracle)."""
    gamma = cfg.gamma
    total = 0.0
    for feats, labels in ((plan.src_feats, plan.src_labels),
                          (plan.tgt_feats, plan.tgt_labels)):
        if feats is None:
            continue
        _, _, cache = forward(state, feats)
        loss, _ = aug.focal_loss_from_logits(cache["z"], labels, gamma)
        total += loss
    if plan.apply_hfa and plan.pool is not None and plan.aug_plan is not None:
        ball = state.ball
        hfa_cfg = cfg.hfa_config()
        x, _, cache = forward(state, plan.src_feats)
        orig_cls, _ = aug.focal_loss_from_logits(cache["z"], plan.src_labels, gamma)
        x_aug = aug.apply_plan(x, plan.aug_plan, plan.pool, ball)
        aug_cls, _ = aug.focal_loss_from_logits(
            ball.mlr_logits(x_aug, state.head), plan.src_labels, gamma
        )
        emap = EmbeddingMap(x, plan.src_labels, (plan.src_labels.shape[0],))
        proto = aug.prototype_term(emap, plan.dists, ball)
        div = aug.diversity_term(plan.pool, ball)
        mean_var = aug.mean_var_term(
            {k: v for k, v in plan.dists.items() if k in emap.classes_present()}, ball
        )
        total += cfg.lambda_hfa * (
            orig_cls + aug_cls + hfa_cfg.lambda_div * div
            + hfa_cfg.lambda_proto_reg * proto + hfa_cfg.lambda_mean_var * mean_var
        )
    if plan.apply_mix and plan.mix_feats is not None and np.any(plan.mix_labels != UNLABELED):
        _, _, cache = forward(state, plan.mix_feats)
        loss, _ = aug.focal_loss_from_logits(cache["z"], plan.mix_labels, gamma,
                                             plan.mix_weights)
        total += loss
    return float(total)


def train_step_rgb(state, optimizer, plan, cfg):
    """One combined-loss RGB step: source + acquired-target + HFA + mixing."""
    report, grads = step_loss_and_grads(state, plan, cfg)
    optimizer.step(state, grads)
    return report


def train_step_lidar(state, optimizer, plan, cfg, step_index, total_steps):
    """Alternating LiDAR step: even steps apply the feature augmentation,
    odd steps apply cloud mixing; past the phase switch only the target
    term trains."""
    t_frac = step_index / max(total_steps, 1)
    plan = replace(plan)
    if t_frac >= cfg.target_only_phase_start:
        plan.src_feats = None
        plan.apply_hfa = False
        plan.apply_mix = False
    elif step_index % 2 == 0:
        plan.apply_mix = False
    else:
        plan.apply_hfa = False
    report, grads = step_loss_and_grads(state, plan, cfg)
    optimizer.step(state, grads)
    return report


# -- evaluation --------------------------------------------------------------------

@dataclass
class MiouResult:
    per_class: np.ndarray
    miou: float
    confusion: np.ndarray

    def as_dict(self, class_names=None):
        names = class_names or [str(i) for i in range(self.per_class.shape[0])]
        return {
            "miou": self.miou,
            "per_class": {
                str(names[i]): (None if np.isnan(self.per_class[i]) else float(self.per_class[i]))
                for i in range(self.per_class.shape[0])
            },
            "confusion": self.confusion.tolist(),
        }


def evaluate_miou(predictions, ground_truth, n_classes, class_subset=None):
    """IoU per class from the confusion matrix; classes absent from both
    prediction and truth are excluded from the mean."""
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    gt = np.asarray(ground_truth, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    keep = gt != UNLABELED
    if not np.any(keep):
        raise ValueError("ground truth has no labeled cells")
    pred, gt = pred[keep], gt[keep]
    confusion = np.bincount(
        gt * n_classes + pred, minlength=n_classes * n_classes
    ).reshape(n_classes, n_classes)
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    per_class = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    classes = np.arange(n_classes) if class_subset is None else np.asarray(class_subset)
    vals = per_class[classes]
    miou = float(np.nanmean(vals)) if np.any(~np.isnan(vals)) else 0.0
    return MiouResult(per_class=per_class, miou=miou, confusion=confusion)


# -- the active adaptation loop ------------------------------------------------

@dataclass
class LoopResult:
    state: ModelState
    round_logs: list
    miou: MiouResult
    trace: list
    revealed_total: int


def _check_strategy(cfg, strategy):
    valid = RGB_STRATEGIES if cfg.modality == "rgb" else LIDAR_STRATEGIES
    if strategy not in valid:
        raise ValueError(
            f"strategy {strategy!r} is not valid for modality {cfg.modality!r} "
            f"(choose from {valid})"
        )


def _source_embedding_map(state, feats_list, labels_list):
    xs, ys = [], []
    for feats, labels in zip(feats_list, labels_list):
        x, _, _ = forward(state, feats)
        xs.append(x)
        ys.append(labels)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    return EmbeddingMap(x, y, (y.shape[0],))


def _meta_train_flow(state, cfg, feats_list, labels_list, rng):
    """Short meta-training run of the flow network on a source split."""
    half = max(1, len(feats_list) // 2)
    train_map = _source_embedding_map(state, feats_list[:half], labels_list[:half])
    val_map = _source_embedding_map(state, feats_list[half:] or feats_list[:half],
                                    labels_list[half:] or labels_list[:half])
    solver = _solver_for(cfg)
    net = FlowNetwork.create(flow_input_dim(cfg.embed_dim), 2 * cfg.embed_dim, rng)
    for _ in range(cfg.meta_steps):
        res = meta_update(net, train_map, val_map, solver, head=state.head,
                          ball=state.ball, mode=cfg.modality,
                          hfa_config=cfg.hfa_config(), rng=rng)
        net = res.net
    return net


def _solver_for(cfg):
    if cfg.modality == "rgb":
        return OdeSolverConfig(mode="adaptive_rk4")
    return OdeSolverConfig(mode="fixed_euler", dt=0.5, steps=2)


def _rgb_plan(state, teacher, cfg, src_img, src_feats, src_labels, tgt_img,
              tgt_feats, acq_labels, dists, schedule, t_frac, rng,
              mixing_active=True):
    plan = StepPlan(src_feats=src_feats, src_labels=src_labels,
                    tgt_feats=tgt_feats, tgt_labels=acq_labels,
                    apply_hfa=False, apply_mix=False)
    if cfg.use_hfa and dists:
        present = sorted(set(np.unique(src_labels[src_labels != UNLABELED])) & set(dists))
        if present:
            pool = aug.build_pool(dists, "rgb", rng, classes=present)
            label_map = EmbeddingMap(
                np.zeros((src_labels.shape[0], cfg.embed_dim)), src_labels,
                (src_labels.shape[0],),
            )
            mix_cfg = aug.MixupConfig() if cfg.use_mixup else None
            plan.pool = pool
            plan.aug_plan = aug.plan_augmentation(label_map, pool, schedule, t_frac,
                                                  rng, mixup=mix_cfg)
            plan.dists = dists
            plan.apply_hfa = True
    if cfg.use_mixing and mixing_active:
        # pseudo-labels come from the round's frozen teacher so the student
        # cannot self-reinforce drifting predictions within a round
        h, w = tgt_img.labels.shape
        x_t, probs_t, _ = forward(teacher, tgt_feats)
        scores_t = halo_score(x_t, probs_t, teacher.ball)
        # pool the uncertainty over each predicted-class segment so the
        # percentile cut pastes contiguous regions, not scattered pixels
        predicted = probs_t.argmax(axis=1)
        pooled = np.empty_like(scores_t)
        for k in np.unique(predicted):
            cells = predicted == k
            pooled[cells] = scores_t[cells].mean()
        pseudo, conf = mixing.pseudo_label(
            probs_t.reshape(h, w, -1), pooled, cfg.tau_percentile
        )
        hybrid, paste = mixing.dacs_mix(src_img, tgt_img.channels, (pseudo, conf))
        if paste.any():
            labels = hybrid.labels.copy()
            labels[_provenance_boundary(paste)] = UNLABELED
            # pasted pixels are weighted by the teacher's confidence
            weights = np.ones((h, w))
            weights[paste] = probs_t.max(axis=1).reshape(h, w)[paste]
            plan.mix_feats = image_features(hybrid)
            plan.mix_labels = labels.ravel()
            plan.mix_weights = weights.ravel()
            plan.apply_mix = True
    return plan


def _provenance_boundary(paste):
    """Pixels whose 3x3 neighborhood mixes source and target provenance;
    their patch features are chimeras, so the hybrid loss skips them."""
    padded_t = np.pad(paste, 1, mode="edge")
    padded_s = np.pad(~paste, 1, mode="edge")
    near_t = np.zeros_like(paste)
    near_s = np.zeros_like(paste)
    h, w = paste.shape
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            near_t |= padded_t[dy:dy + h, dx:dx + w]
            near_s |= padded_s[dy:dy + h, dx:dx + w]
    return near_t & near_s


def _rgb_loop(cfg, world, policy, strategy):
    rng = np.random.default_rng(cfg.seed)
    n_classes = len(world.class_names)
    src_feats = [image_features(img) for img in world.source]
    src_labels = [img.labels.ravel() for img in world.source]
    tgt_feats = [image_features(img) for img in world.target]
    tgt_gt = [img.labels.ravel() for img in world.target]
    n_pix = tgt_gt[0].shape[0]

    state = init_state(rng, src_feats[0].shape[1], n_classes, cfg)
    opt = SgdOptimizer(cfg.lr, cfg.momentum)

    pretrain_feats = np.concatenate(src_feats)
    pretrain_labels = np.concatenate(src_labels)
    for step in range(cfg.pretrain_steps):
        plan = StepPlan(src_feats=pretrain_feats, src_labels=pretrain_labels,
                        tgt_feats=None, tgt_labels=None,
                        apply_hfa=False, apply_mix=False)
        _, grads = step_loss_and_grads(state, plan, cfg)
        opt.step(state, grads)

    flow_net = None
    if cfg.use_hfa:
        flow_net = _meta_train_flow(state, cfg, src_feats, src_labels, rng)

    labeled = np.zeros(n_pix * len(tgt_feats), dtype=bool)
    acq_labels = [np.full(n_pix, UNLABELED, dtype=np.int64) for _ in tgt_feats]
    all_src_feats = np.concatenate(src_feats)
    all_src_labels = np.concatenate(src_labels)
    all_tgt_feats = np.concatenate(tgt_feats)
    schedule = aug.InterpolationSchedule(cfg.schedule_w0, cfg.schedule_w1)
    total_steps = policy.rounds * cfg.steps_per_round
    round_logs, trace = [], []
    global_step = 0
    revealed = 0

    for r in range(policy.rounds):
        scores_all = []
        for feats in tgt_feats:
            if strategy == "halo":
                x, probs, _ = forward(state, feats)
                scores_all.append(halo_score(x, probs, state.ball))
            else:
                scores_all.append(rng.uniform(size=n_pix))
        smap = ScoreMap(np.concatenate(scores_all), labeled=labeled)
        ids = select_pixels(smap, policy, r)
        labeled = smap.labeled
        for cell in ids:
            j, p = divmod(int(cell), n_pix)
            acq_labels[j][p] = tgt_gt[j][p]
        revealed += len(ids)
        round_logs.append({
            "round": r,
            "selected": sorted(int(i) for i in ids),
            "scores": [float(smap.scores[i]) for i in sorted(ids.tolist())],
        })

        dists = None
        if cfg.use_hfa:
            emb_map = _source_embedding_map(state, src_feats, src_labels)
            dists = estimate_all(emb_map, flow_net, _solver_for(cfg), state.ball)

        teacher = state.copy()
        opt.lr = cfg.lr * (0.4 if r >= policy.rounds - 2 else 1.0)
        for _ in range(cfg.steps_per_round):
            i = global_step % len(src_feats)
            j = global_step % len(tgt_feats)
            plan = _rgb_plan(state, teacher, cfg, world.source[i],
                             all_src_feats, all_src_labels,
                             world.target[j], tgt_feats[j],
                             np.concatenate(acq_labels), dists,
                             schedule, global_step / max(total_steps, 1), rng,
                             mixing_active=r >= 1)
            plan.tgt_feats = all_tgt_feats
            trace.append(train_step_rgb(state, opt, plan, cfg))
            global_step += 1

    preds, gts = [], []
    for img in world.target_eval:
        feats = image_features(img)
        _, probs, _ = forward(state, feats)
        preds.append(probs.argmax(axis=1))
        gts.append(img.labels.ravel())
    miou = evaluate_miou(np.concatenate(preds), np.concatenate(gts), n_classes)
    return LoopResult(state=state, round_logs=round_logs, miou=miou, trace=trace,
                      revealed_total=revealed)


def _rare_classes(labels_list, n_classes):
    counts = np.zeros(n_classes, dtype=np.int64)
    for labels in labels_list:
        counts += np.bincount(labels[labels != UNLABELED], minlength=n_classes)
    order = np.argsort(counts, kind="stable")
    k = max(1, n_classes // 3)
    return set(int(c) for c in order[:k])


def _lidar_scores(state, cfg, strategy, cloud, feats, grid, rng):
    if strategy == "random":
        return rng.uniform(size=grid.n_voxels)
    x, probs, _ = forward(state, feats)
    if strategy == "vcd":
        return vcd(grid, probs.argmax(axis=1))
    if strategy == "halo":
        per_point = halo_score(x, probs, state.ball)
        return np.array([
            per_point[grid.point_lists[v]].mean() for v in range(grid.n_voxels)
        ])
    return halo_vcd_score(grid, x, probs, state.ball)


def _lidar_plan(state, teacher, cfg, src_cloud, src_feats, src_labels, tgt_cloud,
                tgt_feats, acq_labels, dists, schedule, t_frac, rare, rng):
    plan = StepPlan(src_feats=src_feats, src_labels=src_labels,
                    tgt_feats=tgt_feats, tgt_labels=acq_labels,
                    apply_hfa=False, apply_mix=False)
    if cfg.use_hfa and dists:
        present = sorted(set(np.unique(src_labels[src_labels != UNLABELED])) & set(dists))
        if present:
            pool = aug.build_pool(dists, "lidar", rng, classes=present)
            label_map = EmbeddingMap(
                np.zeros((src_labels.shape[0], cfg.embed_dim)), src_labels,
                (src_labels.shape[0],),
            )
            plan.pool = pool
            plan.aug_plan = aug.plan_augmentation(label_map, pool, schedule, t_frac,
                                                  rng, mixup=None)
            plan.dists = dists
            plan.apply_hfa = True
    if cfg.use_mixing:
        _, probs_t, _ = forward(teacher, tgt_feats)
        pseudo_cloud = tgt_cloud.copy()
        pseudo_cloud.labels = probs_t.argmax(axis=1)
        theta0 = float(rng.uniform(0.0, 2 * np.pi))
        mixed = mixing.polarmix_sector_swap(src_cloud, pseudo_cloud, theta0=theta0)
        rotations = rng.uniform(0.0, 2 * np.pi, size=2).tolist()
        mixed = mixing.polarmix_instance_paste(mixed, pseudo_cloud, rare, rotations)
        plan.mix_feats = cloud_features(mixed, cfg.voxel_size)
        plan.mix_labels = mixed.labels
        plan.apply_mix = True
    return plan


def _lidar_loop(cfg, world, policy, strategy):
    rng = np.random.default_rng(cfg.seed)
    n_classes = len(world.class_names)
    src_feats = [cloud_features(c, cfg.voxel_size) for c in world.source]
    src_labels = [c.labels for c in world.source]
    tgt_feats = [cloud_features(c, cfg.voxel_size) for c in world.target]
    tgt_gt = [c.labels for c in world.target]
    grids = [voxelize(c.points, cfg.voxel_size) for c in world.target]

    state = init_state(rng, CLOUD_FEATURE_DIM, n_classes, cfg)
    opt = SgdOptimizer(cfg.lr, cfg.momentum)

    pretrain_feats = np.concatenate(src_feats)
    pretrain_labels = np.concatenate(src_labels)
    for step in range(cfg.pretrain_steps):
        plan = StepPlan(src_feats=pretrain_feats, src_labels=pretrain_labels,
                        tgt_feats=None, tgt_labels=None,
                        apply_hfa=False, apply_mix=False)
        _, grads = step_loss_and_grads(state, plan, cfg)
        opt.step(state, grads)

    flow_net = None
    if cfg.use_hfa:
        flow_net = _meta_train_flow(state, cfg, src_feats, src_labels, rng)

    acq_labels = [np.full(c.n_points, UNLABELED, dtype=np.int64) for c in world.target]
    rare = _rare_classes(src_labels, n_classes)
    schedule = aug.InterpolationSchedule(cfg.schedule_w0, cfg.schedule_w1)
    total_steps = policy.rounds * cfg.steps_per_round
    round_logs, trace = [], []
    global_step = 0
    revealed = 0

    for r in range(policy.rounds):
        log = {"round": r, "per_scan": []}
        for j, grid in enumerate(grids):
            scores = _lidar_scores(state, cfg, strategy, world.target[j],
                                   tgt_feats[j], grid, rng)
            chosen = select_voxels(grid, scores, policy, r)
            for v in chosen:
                pts = grid.point_lists[int(v)]
                acq_labels[j][pts] = tgt_gt[j][pts]
            revealed += len(chosen)
            log["per_scan"].append({
                "scan": j,
                "selected": sorted(int(v) for v in chosen),
                "scores": [float(scores[int(v)]) for v in sorted(chosen.tolist())],
            })
        round_logs.append(log)

        dists = None
        if cfg.use_hfa:
            emb_map = _source_embedding_map(state, src_feats, src_labels)
            dists = estimate_all(emb_map, flow_net, _solver_for(cfg), state.ball)

        all_src_feats = np.concatenate(src_feats)
        all_src_labels = np.concatenate(src_labels)
        all_tgt_feats = np.concatenate(tgt_feats)
        all_acq = np.concatenate(acq_labels)
        teacher = state.copy()
        opt.lr = cfg.lr * (0.4 if r >= policy.rounds - 2 else 1.0)
        for _ in range(cfg.steps_per_round):
            i = global_step % len(src_feats)
            j = global_step % len(tgt_feats)
            plan = _lidar_plan(state, teacher, cfg, world.source[i],
                               all_src_feats, all_src_labels,
                               world.target[j], tgt_feats[j],
                               all_acq, dists,
                               schedule, global_step / max(total_steps, 1), rare, rng)
            plan.tgt_feats = all_tgt_feats
            trace.append(train_step_lidar(state, opt, plan, cfg, global_step, total_steps))
            global_step += 1

    preds, gts = [], []
    for cloud in world.target_eval:
        feats = cloud_features(cloud, cfg.voxel_size)
        _, probs, _ = forward(state, feats)
        preds.append(probs.argmax(axis=1))
        gts.append(cloud.labels)
    miou = evaluate_miou(np.concatenate(preds), np.concatenate(gts), n_classes)
    return LoopResult(state=state, round_logs=round_logs, miou=miou, trace=trace,
                      revealed_total=revealed)


def active_da_loop(cfg, world, policy, strategy):
    """Pretrain on source, then alternate acquisition rounds with training;
    returns the final model, per-round selection logs, and the target mIoU."""
    _check_strategy(cfg, strategy)
    if policy.modality != cfg.modality:
        raise ValueError(
            f"budget policy modality {policy.modality!r} does not match "
            f"training modality {cfg.modality!r}"
        )
    if cfg.modality == "rgb":
        return _rgb_loop(cfg, world, policy, strategy)
    return _lidar_loop(cfg, world, policy, strategy)
