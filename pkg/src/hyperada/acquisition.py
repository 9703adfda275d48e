"""Active-labeling machinery: radius-times-entropy pixel scores, voxel
confusion, the hybrid voxel score, and exact budget accounting."""

from dataclasses import dataclass, field

import numpy as np

from hyperada.backend import kernels
from hyperada.containers import ScoreMap
from hyperada.geometry import Ball


class BudgetError(RuntimeError):
    """Selection requested outside the configured annotation budget."""


def entropy(probs):
    """Shannon entropy of a probability vector or of each row of a matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    rows = probs[None, :] if single else probs
    sums = rows.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(rows < 0):
        raise ValueError("entropy input rows must be probabilities summing to 1 within 1e-6")
    out = kernels.entropy_rows(np.ascontiguousarray(rows))
    return float(out[0]) if single else out


def halo_score(embeddings, probs, ball=None):
    """Hyperbolic radius times prediction entropy, per cell."""
    ball = ball or Ball()
    emb = np.ascontiguousarray(embeddings, dtype=np.float64)
    single = emb.ndim == 1
    if single:
        emb = emb[None, :]
        probs = np.asarray(probs)[None, :]
    out = kernels.radius(emb, ball.c) * entropy(probs)
    return float(out[0]) if single else out


@dataclass
class VoxelGrid:
    """Partition of a cloud into cubic voxels with labeled/unlabeled flags."""

    voxel_size: float
    keys: np.ndarray                 # (V, 3) integer voxel coordinates
    point_lists: list                # per voxel, indices into the cloud
    labeled: np.ndarray = None

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        if self.labeled is None:
            self.labeled = np.zeros(len(self.point_lists), dtype=bool)

    @property
    def n_voxels(self):
        return len(self.point_lists)

    def points_of(self, voxel_index):
        return self.point_lists[voxel_index]


def voxelize(points, voxel_size=0.25):
    """Assign every point to exactly one voxel; voxels are ordered by their
    integer coordinates so grids are deterministic."""
    if voxel_size <= 0:
        raise ValueError("voxel size must be positive")
    pts = np.asarray(points, dtype=np.float64)
    keys = np.floor(pts[:, :3] / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(uniq.shape[0] + 1))
    point_lists = [order[bounds[v]:bounds[v + 1]] for v in range(uniq.shape[0])]
    return VoxelGrid(voxel_size=voxel_size, keys=uniq, point_lists=point_lists)


def vcd(grid, predicted_labels):
    """Voxel confusion: entropy of the predicted-class histogram per voxel."""
    labels = np.asarray(predicted_labels, dtype=np.int64)
    out = np.empty(grid.n_voxels, dtype=np.float64)
    for v in range(grid.n_voxels):
        member = labels[grid.point_lists[v]]
        counts = np.bincount(member - member.min())
        p = counts[counts > 0] / member.shape[0]
        out[v] = float(-(p * np.log(p)).sum())
    return out


def _minmax(values):
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def halo_vcd_score(grid, embeddings, probs, ball=None):
    """Hybrid voxel score: per-scan min-max normalized VCD plus normalized
    mean radius-times-entropy over each voxel's member points."""
    ball = ball or Ball()
    predicted = np.asarray(probs).argmax(axis=1)
    confusion = vcd(grid, predicted)
    per_point = halo_score(embeddings, probs, ball)
    mean_halo = np.array([
        per_point[grid.point_lists[v]].mean() for v in range(grid.n_voxels)
    ])
    return _minmax(confusion) + _minmax(mean_halo)


@dataclass(frozen=True)
class BudgetPolicy:
    """Annotation budget: 5% of pixels over 5 rounds (RGB) or top-1 voxel per
    scan per round, 5 rounds (LiDAR)."""

    modality: str = "rgb"
    fraction: float = 0.05
    rounds: int = 5
    voxels_per_scan: int = 1

    def __post_init__(self):
        if self.modality not in ("rgb", "lidar"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError("budget fraction must be in (0, 1]")
        if self.rounds < 1 or self.voxels_per_scan < 1:
            raise ValueError("round and per-scan counts must be >= 1")

    def total_pixels(self, n_total):
        return int(np.ceil(self.fraction * n_total))

    def pixel_quotas(self, n_total):
        """Per-round pixel quotas; the last round absorbs rounding so the
        cumulative selection is exactly ceil(fraction * N)."""
        total = self.total_pixels(n_total)
        base = int(np.ceil(self.fraction * n_total / self.rounds))
        quotas, remaining = [], total
        for r in range(self.rounds):
            take = remaining if r == self.rounds - 1 else min(base, remaining)
            quotas.append(take)
            remaining -= take
        return quotas


def _top_unlabeled(scores, labeled, k):
    """Indices of the k highest-scoring unlabeled cells, ties by lowest index."""
    candidates = np.flatnonzero(~labeled)
    if candidates.size == 0:
        raise BudgetError("selecting from an all-labeled map")
    ranks = np.argsort(-scores[candidates], kind="stable")
    return candidates[ranks[:k]]


def select_pixels(score_map, policy, round_index):
    """Pick this round's pixel quota from the unlabeled cells, flagging them."""
    if round_index >= policy.rounds:
        raise BudgetError(f"round {round_index} outside the {policy.rounds}-round budget")
    quota = policy.pixel_quotas(score_map.n_cells)[round_index]
    chosen = _top_unlabeled(score_map.scores, score_map.labeled, quota)
    score_map.labeled[chosen] = True
    return chosen


def select_voxels(grid, voxel_scores, policy, round_index):
    """Pick the top-k unlabeled voxels of one scan, flagging them."""
    if round_index >= policy.rounds:
        raise BudgetError(f"round {round_index} outside the {policy.rounds}-round budget")
    scores = np.asarray(voxel_scores, dtype=np.float64)
    if scores.shape[0] != grid.n_voxels:
        raise ValueError("voxel score vector does not match the grid")
    chosen = _top_unlabeled(scores, grid.labeled, policy.voxels_per_scan)
    grid.labeled[chosen] = True
    return chosen


def select(scores, policy, round_index, grid=None):
    """Dispatch to the modality's selector."""
    if policy.modality == "rgb":
        if not isinstance(scores, ScoreMap):
            raise TypeError("rgb selection needs a ScoreMap")
        return select_pixels(scores, policy, round_index)
    if grid is None:
        raise TypeError("lidar selection needs a VoxelGrid")
    return select_voxels(grid, scores, policy, round_index)
