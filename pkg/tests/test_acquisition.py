"""Score oracles and exact budget arithmetic."""

import math

import numpy as np
import pytest

from hyperada.acquisition import (
    BudgetError,
    BudgetPolicy,
    entropy,
    halo_score,
    halo_vcd_score,
    select,
    select_pixels,
    select_voxels,
    vcd,
    voxelize,
)
from hyperada.containers import ScoreMap
from hyperada.geometry import Ball

BALL = Ball()


class TestEntropy:
    def test_one_hot(self):
        assert entropy(np.array([0.0, 1.0, 0.0])) == 0.0

    def test_uniform_four(self):
        assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), rel=1e-12)

    def test_half_half(self):
        assert entropy(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(math.log(2), rel=1e-12)

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            entropy(np.array([0.5, 0.6]))


class TestHaloScore:
    def test_origin_embedding(self):
        assert halo_score(np.zeros(3), np.full(4, 0.25)) == 0.0

    def test_one_hot_probs(self):
        assert halo_score(np.array([0.5, 0.0]), np.array([1.0, 0.0])) == 0.0

    def test_product_oracle(self):
        got = halo_score(np.array([0.5, 0.0]), np.full(4, 0.25))
        assert got == pytest.approx(2 * math.atanh(0.5) * math.log(4), rel=1e-12)

    def test_nonnegative_and_zero_iff(self):
        rng = np.random.default_rng(0)
        emb = rng.normal(size=(50, 3)) * 0.2
        probs = rng.dirichlet(np.ones(4), size=50)
        scores = halo_score(emb, probs)
        assert np.all(scores >= 0)
        radii = BALL.radius(emb)
        ents = entropy(probs)
        np.testing.assert_array_equal(scores == 0, (radii == 0) | (ents == 0))


class TestVcd:
    def grid_for(self, labels):
        pts = np.zeros((len(labels), 4))
        pts[:, 0] = 0.1  # everything in one voxel
        return voxelize(pts, 0.25)

    def test_single_class(self):
        grid = self.grid_for([3, 3, 3])
        assert vcd(grid, np.array([3, 3, 3]))[0] == 0.0

    def test_two_balanced_classes(self):
        grid = self.grid_for([1, 1, 2, 2])
        assert vcd(grid, np.array([1, 1, 2, 2]))[0] == pytest.approx(math.log(2), rel=1e-12)

    def test_skewed_oracle(self):
        grid = self.grid_for([1, 1, 1, 2])
        expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        assert vcd(grid, np.array([1, 1, 1, 2]))[0] == pytest.approx(expected, rel=1e-12)

    def test_every_point_in_one_voxel(self):
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.uniform(-2, 2, size=(200, 3)), np.zeros(200)])
        grid = voxelize(pts, 0.25)
        counts = np.zeros(200, dtype=int)
        for v in range(grid.n_voxels):
            counts[grid.point_lists[v]] += 1
        assert np.all(counts == 1)


class TestHaloVcd:
    def build_scan(self):
        # three voxels along x: mixed labels far out, pure near origin, pure far
        pts = np.zeros((9, 4))
        pts[:3, 0] = 0.1   # voxel A: single class, embeddings at origin
        pts[3:6, 0] = 1.1  # voxel B: two classes
        pts[6:, 0] = 2.1   # voxel C: single class, large radius
        labels = np.array([0, 0, 0, 0, 1, 1, 2, 2, 2])
        probs = np.zeros((9, 3))
        probs[np.arange(9), labels] = 1.0
        # entropy-0 rows for A; genuinely mixed argmax for B; soft rows for C
        probs[3:6] = [[0.6, 0.4, 0.0], [0.4, 0.6, 0.0], [0.4, 0.6, 0.0]]
        probs[6:] = [[0.1, 0.1, 0.8]] * 3
        emb = np.zeros((9, 2))
        emb[3:6, 0] = 0.3
        emb[6:, 0] = 0.7
        grid = voxelize(pts, 1.0)
        return grid, emb, probs

    def test_degenerate_voxel_scores_zero(self):
        grid, emb, probs = self.build_scan()
        scores = halo_vcd_score(grid, emb, probs)
        assert scores[0] == 0.0  # single class + origin embeddings: both minima

    def test_monotone_in_radius(self):
        pts = np.zeros((4, 4))
        pts[2:, 0] = 1.1
        labels = np.array([0, 0, 0, 0])
        probs = np.full((4, 3), 1 / 3)
        emb = np.zeros((4, 2))
        emb[:2, 0] = 0.2  # voxel A small radius
        emb[2:, 0] = 0.6  # voxel B larger radius
        grid = voxelize(pts, 1.0)
        scores = halo_vcd_score(grid, emb, probs)
        assert scores[1] > scores[0]

    def test_minmax_normalization_brute_force(self):
        grid, emb, probs = self.build_scan()
        scores = halo_vcd_score(grid, emb, probs)
        predicted = probs.argmax(axis=1)
        raw_vcd = vcd(grid, predicted)
        per_point = halo_score(emb, probs)
        raw_halo = np.array([per_point[grid.point_lists[v]].mean() for v in range(3)])

        def norm(v):
            return (v - v.min()) / (v.max() - v.min())

        np.testing.assert_allclose(scores, norm(raw_vcd) + norm(raw_halo), rtol=1e-12)
        for term in (norm(raw_vcd), norm(raw_halo)):
            assert term.min() == 0.0 and term.max() == 1.0


class TestBudget:
    @pytest.mark.parametrize("n", [97, 1000, 12345])
    def test_cumulative_exactness(self, n):
        policy = BudgetPolicy(modality="rgb")
        rng = np.random.default_rng(n)
        smap = ScoreMap(rng.uniform(size=n))
        total = 0
        seen = set()
        for r in range(policy.rounds):
            ids = select_pixels(smap, policy, r)
            assert not (set(ids.tolist()) & seen), "reselection"
            seen.update(ids.tolist())
            total += len(ids)
        assert total == math.ceil(0.05 * n)

    def test_thousand_pixel_quota(self):
        policy = BudgetPolicy(modality="rgb")
        assert policy.pixel_quotas(1000) == [10, 10, 10, 10, 10]

    def test_lidar_five_voxels_per_scan(self):
        policy = BudgetPolicy(modality="lidar")
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(-3, 3, size=(300, 3)), np.zeros(300)])
        grid = voxelize(pts, 0.5)
        for r in range(policy.rounds):
            scores = rng.uniform(size=grid.n_voxels)
            ids = select_voxels(grid, scores, policy, r)
            assert len(ids) == 1
        assert int(grid.labeled.sum()) == 5

    def test_tie_break_lowest_index(self):
        policy = BudgetPolicy(modality="rgb", fraction=0.05, rounds=5)
        smap = ScoreMap(np.ones(100))
        ids = select_pixels(smap, policy, 0)
        np.testing.assert_array_equal(np.sort(ids), np.arange(len(ids)))

    def test_monotone_transform_equivariance(self):
        policy = BudgetPolicy(modality="rgb")
        rng = np.random.default_rng(3)
        scores = rng.uniform(size=500)
        a = ScoreMap(scores.copy())
        b = ScoreMap(np.exp(3 * scores) + 7)  # strictly increasing transform
        ids_a = select_pixels(a, policy, 0)
        ids_b = select_pixels(b, policy, 0)
        np.testing.assert_array_equal(ids_a, ids_b)

    def test_round_out_of_budget(self):
        policy = BudgetPolicy(modality="rgb")
        with pytest.raises(BudgetError):
            select_pixels(ScoreMap(np.ones(10)), policy, 5)

    def test_all_labeled_rejected(self):
        policy = BudgetPolicy(modality="rgb")
        smap = ScoreMap(np.ones(10), labeled=np.ones(10, dtype=bool))
        with pytest.raises(BudgetError):
            select_pixels(smap, policy, 0)

    def test_dispatcher(self):
        policy = BudgetPolicy(modality="rgb")
        smap = ScoreMap(np.arange(40, dtype=float))
        ids = select(smap, policy, 0)
        assert ids.tolist() == [39]  # ceil(0.05*40/5) = 1, highest score
        with pytest.raises(TypeError):
            select(np.ones(5), policy, 0)
