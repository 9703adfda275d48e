"""Mixing audits: pixel provenance, sector membership, rotation oracles."""

import math

import numpy as np
import pytest

from hyperada.containers import UNLABELED, LabeledCloud, LabeledImage
from hyperada.mixing import (
    ConfidenceMask,
    dacs_mix,
    polarmix_instance_paste,
    polarmix_sector_swap,
    pseudo_label,
    rotate_z,
)


def cloud_at_azimuths(degrees, radius=1.0, label_start=0):
    az = np.deg2rad(np.asarray(degrees, dtype=float))
    pts = np.column_stack([radius * np.cos(az), radius * np.sin(az),
                           np.zeros_like(az), np.zeros_like(az)])
    labels = np.arange(label_start, label_start + len(degrees))
    return LabeledCloud(pts, labels)


def random_cloud(rng, n=60):
    pts = np.column_stack([
        rng.uniform(-5, 5, size=(n, 2)),
        rng.uniform(-1, 1, size=(n, 1)),
        rng.uniform(0, 1, size=(n, 1)),
    ])
    return LabeledCloud(pts, rng.integers(0, 4, size=n))


class TestPseudoLabel:
    def test_full_mask_at_100(self):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(3), size=(4, 5))
        scores = rng.uniform(size=20)
        labels, conf = pseudo_label(probs, scores, 100.0)
        assert conf.mask.all()
        np.testing.assert_array_equal(labels, probs.argmax(axis=2))

    def test_constant_scores_at_0_full_mask(self):
        # documented edge: ties at the exact percentile are included
        probs = np.full((2, 2, 3), 1 / 3)
        labels, conf = pseudo_label(probs, np.zeros(4), 0.0)
        assert conf.mask.all()

    def test_distinct_scores_at_0_keeps_only_minimum(self):
        probs = np.full((2, 2, 3), 1 / 3)
        labels, conf = pseudo_label(probs, np.array([3.0, 1.0, 2.0, 0.5]), 0.0)
        np.testing.assert_array_equal(conf.mask.ravel(), [False, False, False, True])

    def test_median_percentile_brute_force(self):
        probs = np.full((2, 2, 3), 1 / 3)
        labels, conf = pseudo_label(probs, np.array([0.0, 1.0, 2.0, 3.0]), 50.0)
        np.testing.assert_array_equal(conf.mask.ravel(), [True, True, False, False])
        assert (labels.ravel() == UNLABELED).tolist() == [False, False, True, True]

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError):
            pseudo_label(np.zeros((0, 2, 3)), np.zeros(0), 50.0)


class TestDacsMix:
    def make_pair(self, rng, h=6, w=8, c=3):
        source = LabeledImage(rng.uniform(size=(h, w, c)), rng.integers(0, 4, size=(h, w)))
        target = rng.uniform(size=(h, w, c))
        pseudo = rng.integers(0, 4, size=(h, w))
        return source, target, pseudo

    def test_empty_mask_returns_source(self):
        rng = np.random.default_rng(1)
        source, target, pseudo = self.make_pair(rng)
        conf = ConfidenceMask(np.zeros((6, 8), dtype=bool), 0.0, 0.0)
        out, paste = dacs_mix(source, target, (pseudo, conf))
        np.testing.assert_array_equal(out.channels, source.channels)
        np.testing.assert_array_equal(out.labels, source.labels)
        assert not paste.any()

    def test_full_mask_returns_target(self):
        rng = np.random.default_rng(2)
        source, target, pseudo = self.make_pair(rng)
        conf = ConfidenceMask(np.ones((6, 8), dtype=bool), 100.0, 1.0)
        out, paste = dacs_mix(source, target, (pseudo, conf))
        np.testing.assert_array_equal(out.channels, target)
        np.testing.assert_array_equal(out.labels, pseudo)
        assert paste.all()

    def test_checkerboard_pixel_audit(self):
        rng = np.random.default_rng(3)
        source, target, pseudo = self.make_pair(rng)
        mask = np.indices((6, 8)).sum(axis=0) % 2 == 0
        conf = ConfidenceMask(mask, 50.0, 0.0)
        out, paste = dacs_mix(source, target, (pseudo, conf))
        np.testing.assert_array_equal(paste, mask)
        for i in range(6):
            for j in range(8):
                if mask[i, j]:
                    assert np.array_equal(out.channels[i, j], target[i, j])
                    assert out.labels[i, j] == pseudo[i, j]
                else:
                    assert np.array_equal(out.channels[i, j], source.channels[i, j])
                    assert out.labels[i, j] == source.labels[i, j]

    def test_sentinel_only_when_source_unlabeled_and_unmasked(self):
        rng = np.random.default_rng(4)
        source, target, pseudo = self.make_pair(rng)
        source.labels[0, 0] = UNLABELED
        source.labels[0, 1] = UNLABELED
        mask = np.zeros((6, 8), dtype=bool)
        mask[0, 1] = True  # unlabeled source pixel gets a confident pseudo label
        out, _ = dacs_mix(source, target, (pseudo, ConfidenceMask(mask, 0, 0)))
        sentinel = out.labels == UNLABELED
        expected = (source.labels == UNLABELED) & ~mask
        np.testing.assert_array_equal(sentinel, expected)

    def test_unconfident_pseudo_never_pasted(self):
        rng = np.random.default_rng(5)
        source, target, pseudo = self.make_pair(rng)
        pseudo[2, 2] = UNLABELED
        mask = np.ones((6, 8), dtype=bool)
        out, paste = dacs_mix(source, target, (pseudo, ConfidenceMask(mask, 100, 9.0)))
        assert not paste[2, 2]
        assert out.labels[2, 2] == source.labels[2, 2]

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        source, target, pseudo = self.make_pair(rng)
        with pytest.raises(ValueError):
            dacs_mix(source, target[:, :4], (pseudo, ConfidenceMask(np.zeros((6, 8), bool), 0, 0)))

    def test_classic_direction_flag(self):
        rng = np.random.default_rng(7)
        source, target, pseudo = self.make_pair(rng)
        conf = ConfidenceMask(np.ones((6, 8), dtype=bool), 100.0, 1.0)
        out, paste = dacs_mix(source, target, (pseudo, conf), rng=rng, classic=True)
        assert paste.any() and not paste.all()
        np.testing.assert_array_equal(out.labels[paste], source.labels[paste])
        np.testing.assert_array_equal(out.labels[~paste], pseudo[~paste])


class TestSectorSwap:
    def test_definition_example(self):
        a = cloud_at_azimuths([10, 100, 200])
        b = cloud_at_azimuths([20, 110, 210], label_start=10)
        out = polarmix_sector_swap(a, b, theta0=0.0, sigma=math.pi / 2)
        got = sorted(np.rad2deg(out.azimuths()).round().astype(int).tolist())
        assert got == [20, 100, 200]
        assert sorted(out.labels.tolist()) == [1, 2, 10]

    def test_full_sector_returns_b(self):
        rng = np.random.default_rng(8)
        cloud = random_cloud(rng)
        out = polarmix_sector_swap(cloud, cloud, theta0=0.3, sigma=2 * math.pi - 1e-9)
        assert out.n_points == cloud.n_points
        # same multiset of rows
        key = lambda c: np.lexsort(c.points.T)
        np.testing.assert_allclose(out.points[key(out)], cloud.points[key(cloud)])

    def test_counts_fuzz_100_pairs(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            a, b = random_cloud(rng), random_cloud(rng)
            theta0 = rng.uniform(0, 2 * math.pi)
            sigma = rng.uniform(0.1, 2 * math.pi - 0.1)
            out = polarmix_sector_swap(a, b, theta0=theta0, sigma=sigma)
            inside = lambda c: ((c.azimuths() - theta0) % (2 * math.pi)) < sigma
            assert out.n_points == (~inside(a)).sum() + inside(b).sum()
            # membership audit: kept a-points outside, inserted b-points inside
            n_keep = int((~inside(a)).sum())
            assert not inside(out).all() or n_keep == 0
            assert np.all(~inside(out)[:n_keep])
            assert np.all(inside(out)[n_keep:])

    def test_sigma_bounds(self):
        a = cloud_at_azimuths([10])
        with pytest.raises(ValueError):
            polarmix_sector_swap(a, a, theta0=0.0, sigma=0.0)
        with pytest.raises(ValueError):
            polarmix_sector_swap(a, a, theta0=0.0, sigma=2 * math.pi)


class TestInstancePaste:
    def test_absent_classes_identity(self):
        rng = np.random.default_rng(10)
        a, b = random_cloud(rng), random_cloud(rng)
        out = polarmix_instance_paste(a, b, classes={99}, rotations=[0.0])
        np.testing.assert_array_equal(out.points, a.points)
        np.testing.assert_array_equal(out.labels, a.labels)

    def test_identity_rotation_union(self):
        rng = np.random.default_rng(11)
        a, b = random_cloud(rng), random_cloud(rng)
        out = polarmix_instance_paste(a, b, classes={2}, rotations=[0.0])
        chunk = b.points[b.labels == 2]
        np.testing.assert_array_equal(out.points[: a.n_points], a.points)
        np.testing.assert_array_equal(out.points[a.n_points:], chunk)
        np.testing.assert_array_equal(out.labels[a.n_points:], b.labels[b.labels == 2])

    def test_pi_rotation_oracle(self):
        a = LabeledCloud(np.zeros((0, 4)), np.zeros(0, dtype=int))
        b = LabeledCloud(np.array([[1.0, 0.0, 0.5, 0.9]]), np.array([1]))
        out = polarmix_instance_paste(a, b, classes={1}, rotations=[math.pi])
        np.testing.assert_allclose(out.points[0, :3], [-1.0, 0.0, 0.5], atol=1e-12)
        assert out.points[0, 3] == 0.9

    def test_rotation_preserves_z_and_radius(self):
        rng = np.random.default_rng(12)
        pts = rng.uniform(-3, 3, size=(50, 4))
        for angle in rng.uniform(0, 2 * math.pi, size=8):
            rot = rotate_z(pts, angle)
            np.testing.assert_allclose(rot[:, 2], pts[:, 2], atol=1e-12)
            np.testing.assert_allclose(
                np.hypot(rot[:, 0], rot[:, 1]), np.hypot(pts[:, 0], pts[:, 1]), atol=1e-12
            )

    def test_empty_rotation_list_rejected(self):
        rng = np.random.default_rng(13)
        a, b = random_cloud(rng), random_cloud(rng)
        with pytest.raises(ValueError):
            polarmix_instance_paste(a, b, classes={1}, rotations=[])

    def test_multiple_rotations_counts(self):
        rng = np.random.default_rng(14)
        a, b = random_cloud(rng), random_cloud(rng)
        n_inst = int((b.labels == 3).sum())
        out = polarmix_instance_paste(a, b, classes={3}, rotations=[0.5, 1.5, 2.5])
        assert out.n_points == a.n_points + 3 * n_inst
