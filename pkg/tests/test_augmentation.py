"""Pool construction, interpolation, mixup, reintegration, and loss oracles."""

import math

import numpy as np
import pytest

from hyperada.augmentation import (
    AugmentationPool,
    HfaLossConfig,
    InterpolationSchedule,
    MixupConfig,
    apply_plan,
    apply_plan_vjp,
    augment_map,
    build_pool,
    diversity_term,
    focal_loss,
    focal_loss_from_logits,
    hfa_loss,
    hyperbolic_mixup,
    interpolate,
    plan_augmentation,
    reintegrate,
)
from hyperada.containers import UNLABELED, EmbeddingMap
from hyperada.distributions import ClassDistribution
from hyperada.geometry import Ball, MlrHead, softmax

BALL = Ball()


def make_dists(d=2, classes=(0, 1, 2)):
    rng = np.random.default_rng(0)
    out = {}
    for k in classes:
        mean = rng.normal(size=d)
        mean = 0.3 * mean / np.linalg.norm(mean)
        out[k] = ClassDistribution(k, mean, np.log(np.full(d, 0.05)))
    return out


def make_map(rng, d=2, n_per_class=6, classes=(0, 1, 2), unlabeled=2):
    pts, labels = [], []
    for k in classes:
        v = rng.normal(size=(n_per_class, d)) * 0.3
        pts.append(BALL.expmap(v))
        labels.append(np.full(n_per_class, k))
    pts.append(BALL.expmap(rng.normal(size=(unlabeled, d)) * 0.3))
    labels.append(np.full(unlabeled, UNLABELED))
    pts = np.concatenate(pts)
    labels = np.concatenate(labels)
    return EmbeddingMap(pts, labels, (labels.shape[0],))


class TestBuildPool:
    def test_rgb_pool_sizes(self):
        pool = build_pool(make_dists(), "rgb", np.random.default_rng(1))
        assert {k: v.shape[0] for k, v in pool.samples.items()} == {0: 5, 1: 5, 2: 5}

    def test_lidar_pool_sizes(self):
        pool = build_pool(make_dists(), "lidar", np.random.default_rng(1))
        assert {k: v.shape[0] for k, v in pool.samples.items()} == {0: 2, 1: 2, 2: 2}

    def test_absent_class_not_pooled(self):
        pool = build_pool(make_dists(), "rgb", np.random.default_rng(1), classes=[0, 2])
        assert sorted(pool.samples) == [0, 2]

    def test_missing_distribution_error(self):
        with pytest.raises(KeyError):
            build_pool(make_dists(classes=(0, 1)), "rgb", np.random.default_rng(1),
                       classes=[0, 1, 2])

    def test_deterministic(self):
        a = build_pool(make_dists(), "rgb", np.random.default_rng(3))
        b = build_pool(make_dists(), "rgb", np.random.default_rng(3))
        for k in a.samples:
            np.testing.assert_array_equal(a.samples[k], b.samples[k])


class TestInterpolate:
    def setup_method(self):
        self.real = {0: np.array([[0.3, 0.0], [0.1, 0.2]])}
        self.pool = AugmentationPool("rgb", {0: np.array([[0.6, 0.0]])})

    def test_weight_zero_identity(self):
        sched = InterpolationSchedule(w0=0.0, w1=1.0)
        out = interpolate(self.real, self.pool, sched, 0.0, np.random.default_rng(0))
        np.testing.assert_allclose(out[0], self.real[0], rtol=1e-12)

    def test_weight_one_collapses_to_pool(self):
        sched = InterpolationSchedule(w0=0.0, w1=1.0)
        out = interpolate(self.real, self.pool, sched, 1.0, np.random.default_rng(0))
        np.testing.assert_allclose(out[0], np.tile([0.6, 0.0], (2, 1)), rtol=1e-12)

    def test_half_weight_collinear_oracle(self):
        real = {0: np.array([[0.3, 0.0]])}
        sched = InterpolationSchedule(w0=0.5, w1=0.5)
        out = interpolate(real, self.pool, sched, 0.0, np.random.default_rng(0))
        expected = math.tanh((math.atanh(0.3) + math.atanh(0.6)) / 2)
        np.testing.assert_allclose(out[0], [[expected, 0.0]], rtol=1e-9)

    def test_distance_monotone_in_weight(self):
        real = {0: np.array([[0.25, -0.1]])}
        prev = -1.0
        for w in (0.0, 0.25, 0.5, 0.75, 1.0):
            sched = InterpolationSchedule(w0=w, w1=w)
            out = interpolate(real, self.pool, sched, 0.0, np.random.default_rng(0))
            d = BALL.distance(real[0][0], out[0][0])
            assert d >= prev - 1e-12
            prev = d

    def test_schedule_monotone_required(self):
        with pytest.raises(ValueError):
            InterpolationSchedule(w0=0.8, w1=0.2)


class TestMixup:
    def test_weight_collapse_identity(self):
        # lambda = 1 puts all weight on the first point
        pts = np.array([[0.3, 0.1], [-0.2, 0.4]])
        out = BALL.gyromidpoint_pairs(pts, pts[::-1], np.ones(2), np.zeros(2))
        np.testing.assert_allclose(out, pts, rtol=1e-12)

    def test_symmetric_midpoint_is_origin(self):
        out = BALL.gyromidpoint_pairs(
            np.array([[0.2, 0.0]]), np.array([[-0.2, 0.0]]), np.array([0.5]), np.array([0.5])
        )
        np.testing.assert_allclose(out, [[0.0, 0.0]], atol=1e-15)

    def test_beta_one_is_uniform(self):
        rng = np.random.default_rng(8)
        lam = rng.beta(1.0, 1.0, size=100_000)
        assert abs(lam.mean() - 0.5) < 0.01

    def test_single_member_class_skipped(self):
        real = {0: np.array([[0.1, 0.1]]), 1: np.array([[0.1, 0.0], [0.2, 0.0]])}
        mixed, skipped = hyperbolic_mixup(real, MixupConfig(), np.random.default_rng(0))
        assert skipped == [0]
        assert sorted(mixed) == [1]

    def test_outputs_inside_ball(self):
        rng = np.random.default_rng(9)
        real = {0: BALL.expmap(rng.normal(size=(30, 3)))}
        mixed, _ = hyperbolic_mixup(real, MixupConfig(beta_alpha=0.4), rng)
        sq = np.einsum("nd,nd->n", mixed[0], mixed[0])
        assert np.all(sq <= 1 - BALL.eps + 1e-12)


class TestReintegrate:
    def test_empty_pools_unchanged(self):
        rng = np.random.default_rng(1)
        fmap = make_map(rng)
        out = reintegrate(fmap, {}, rng)
        np.testing.assert_array_equal(out.embeddings, fmap.embeddings)
        np.testing.assert_array_equal(out.labels, fmap.labels)

    def test_labels_preserved(self):
        rng = np.random.default_rng(2)
        fmap = make_map(rng)
        pool = build_pool(make_dists(), "rgb", rng)
        out = augment_map(fmap, pool, InterpolationSchedule(), 0.5, rng,
                          mixup=MixupConfig())
        np.testing.assert_array_equal(out.labels, fmap.labels)

    def test_unlabeled_cells_untouched(self):
        rng = np.random.default_rng(3)
        fmap = make_map(rng, unlabeled=4)
        pool = build_pool(make_dists(), "rgb", rng)
        out = augment_map(fmap, pool, InterpolationSchedule(), 0.5, rng)
        unl = fmap.cells_of(UNLABELED)
        np.testing.assert_array_equal(out.embeddings[unl], fmap.embeddings[unl])

    def test_deterministic_given_seed(self):
        fmap = make_map(np.random.default_rng(4))
        pool = build_pool(make_dists(), "rgb", np.random.default_rng(5))
        outs = []
        for _ in range(2):
            outs.append(
                augment_map(fmap, pool, InterpolationSchedule(), 0.7,
                            np.random.default_rng(6), mixup=MixupConfig())
            )
        np.testing.assert_array_equal(outs[0].embeddings, outs[1].embeddings)

    def test_mismatched_replacement_rejected(self):
        rng = np.random.default_rng(7)
        fmap = make_map(rng)
        with pytest.raises(ValueError):
            reintegrate(fmap, {0: {"sampled": np.zeros((1, 2)), "mixed": None}}, rng)


class TestFocalLoss:
    def test_gamma_zero_is_cross_entropy(self):
        rng = np.random.default_rng(5)
        probs = rng.dirichlet(np.ones(4), size=10)
        targets = rng.integers(0, 4, size=10)
        ce = -np.log(probs[np.arange(10), targets]).mean()
        assert abs(focal_loss(probs, targets, 0.0) - ce) < 1e-12

    def test_scalar_oracle(self):
        probs = np.array([[0.9, 0.1]])
        expected = -((0.1) ** 2) * math.log(0.9)
        assert focal_loss(probs, np.array([0]), 2.0) == pytest.approx(expected, rel=1e-12)

    def test_perfect_prediction_zero(self):
        assert focal_loss(np.array([[1.0, 0.0]]), np.array([0]), 2.0) == 0.0

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            focal_loss(np.array([[0.6, 0.6]]), np.array([0]), 2.0)

    def test_unlabeled_only_rejected(self):
        with pytest.raises(ValueError):
            focal_loss(np.array([[0.5, 0.5]]), np.array([UNLABELED]), 2.0)

    @pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
    def test_logit_gradient_vs_fd(self, gamma):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(6, 4))
        targets = rng.integers(0, 4, size=6)
        targets[2] = UNLABELED
        loss, zbar = focal_loss_from_logits(logits, targets, gamma)
        h = 1e-6
        num = np.zeros_like(logits)
        for i in range(6):
            for j in range(4):
                lp = logits.copy()
                lp[i, j] += h
                lm = logits.copy()
                lm[i, j] -= h
                num[i, j] = (
                    focal_loss_from_logits(lp, targets, gamma)[0]
                    - focal_loss_from_logits(lm, targets, gamma)[0]
                ) / (2 * h)
        np.testing.assert_allclose(zbar, num, rtol=1e-4, atol=1e-10)


class TestHfaLoss:
    def setup(self, seed=0):
        rng = np.random.default_rng(seed)
        fmap = make_map(rng)
        dists = make_dists()
        pool = build_pool(dists, "rgb", rng)
        aug = augment_map(fmap, pool, InterpolationSchedule(), 0.5, rng)
        head = MlrHead(np.zeros((3, 2)), np.eye(3, 2) + 0.1)
        return fmap, aug, dists, pool, head, rng

    def test_zero_weights_collapse(self):
        fmap, aug, dists, pool, head, _ = self.setup()
        cfg = HfaLossConfig(lambda_div=0.0, lambda_proto_reg=0.0, lambda_mean_var=0.0)
        rep = hfa_loss(fmap, aug, dists, head, cfg, pool)
        assert rep.weighted_total == rep.orig_cls + rep.aug_cls

    def test_identical_maps_equal_terms(self):
        fmap, _, dists, pool, head, _ = self.setup()
        rep = hfa_loss(fmap, fmap.copy(), dists, head, HfaLossConfig(), pool)
        assert rep.aug_cls == pytest.approx(rep.orig_cls, rel=1e-12)

    def test_identical_synthetic_samples_zero_diversity(self):
        pool = AugmentationPool("rgb", {0: np.tile([0.2, 0.1], (2, 1))})
        assert diversity_term(pool, BALL) == pytest.approx(0.0, abs=1e-12)

    def test_diversity_negative_for_spread_pool(self):
        pool = AugmentationPool("rgb", {0: np.array([[0.2, 0.0], [-0.2, 0.0]])})
        assert diversity_term(pool, BALL) < 0.0

    def test_missing_distribution_error(self):
        fmap, aug, dists, pool, head, _ = self.setup()
        del dists[1]
        with pytest.raises(KeyError):
            hfa_loss(fmap, aug, dists, head, HfaLossConfig(), pool)

    def test_terms_finite_and_signed(self):
        fmap, aug, dists, pool, head, _ = self.setup()
        rep = hfa_loss(fmap, aug, dists, head, HfaLossConfig(), pool)
        for name in ("orig_cls", "aug_cls", "proto_reg", "mean_var"):
            val = getattr(rep, name)
            assert np.isfinite(val) and val >= 0.0
        assert np.isfinite(rep.div) and rep.div <= 0.0

    def test_weighted_sum_bookkeeping(self):
        fmap, aug, dists, pool, head, _ = self.setup()
        cfg = HfaLossConfig(lambda_div=0.02, lambda_proto_reg=0.03, lambda_mean_var=0.05)
        rep = hfa_loss(fmap, aug, dists, head, cfg, pool)
        recomputed = (
            rep.orig_cls + rep.aug_cls + 0.02 * rep.div
            + 0.03 * rep.proto_reg + 0.05 * rep.mean_var
        )
        assert abs(rep.weighted_total - recomputed) < 1e-12

    def test_mismatched_labels_rejected(self):
        fmap, aug, dists, pool, head, _ = self.setup()
        bad = aug.copy()
        bad.labels[0] = 1 - bad.labels[0]
        with pytest.raises(ValueError):
            hfa_loss(fmap, bad, dists, head, HfaLossConfig(), pool)


class TestPlanVjp:
    def test_apply_plan_gradient_vs_fd(self):
        rng = np.random.default_rng(17)
        fmap = make_map(rng, n_per_class=4)
        pool = build_pool(make_dists(), "rgb", rng)
        plan = plan_augmentation(fmap, pool, InterpolationSchedule(), 0.6, rng,
                                 mixup=MixupConfig())
        x = fmap.embeddings
        gbar = rng.normal(size=x.shape)
        analytic = apply_plan_vjp(x, plan, pool, BALL, gbar)
        h = 1e-6
        num = np.zeros_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                xp = x.copy()
                xp[i, j] += h
                xm = x.copy()
                xm[i, j] -= h
                num[i, j] = np.sum(
                    gbar * (apply_plan(xp, plan, pool, BALL) - apply_plan(xm, plan, pool, BALL))
                ) / (2 * h)
        np.testing.assert_allclose(analytic, num, rtol=1e-4, atol=1e-8)
