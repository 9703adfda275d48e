"""Shared data containers: dense embedding maps, labeled inputs, score maps.

Cells are stored flat; ``shape`` remembers the spatial layout ((H, W) for
images, (N,) for clouds).  Labels use UNLABELED = -1 as the sentinel.
"""

from dataclasses import dataclass, field

import numpy as np

UNLABELED = -1


@dataclass
class EmbeddingMap:
    """Per-cell ball embeddings plus a per-cell class label."""

    embeddings: np.ndarray
    labels: np.ndarray
    shape: tuple

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.shape = tuple(self.shape)
        n = int(np.prod(self.shape))
        if self.embeddings.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError(
                f"embedding map of shape {self.shape} needs {n} cells, got "
                f"{self.embeddings.shape[0]} embeddings / {self.labels.shape[0]} labels"
            )

    @property
    def n_cells(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def classes_present(self):
        labeled = self.labels[self.labels != UNLABELED]
        return sorted(int(k) for k in np.unique(labeled))

    def cells_of(self, class_id):
        return np.flatnonzero(self.labels == class_id)

    def copy(self):
        return EmbeddingMap(self.embeddings.copy(), self.labels.copy(), self.shape)


@dataclass
class LabeledImage:
    """Dense image: channels (H, W, C) and an integer label map (H, W)."""

    channels: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.channels.ndim != 3 or self.channels.shape[:2] != self.labels.shape:
            raise ValueError(
                f"channel shape {self.channels.shape} does not match "
                f"label shape {self.labels.shape}"
            )

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def copy(self):
        return LabeledImage(self.channels.copy(), self.labels.copy())


@dataclass
class LabeledCloud:
    """Point cloud: (N, 4) xyz + intensity rows, labels, optional instances."""

    points: np.ndarray
    labels: np.ndarray
    instance_ids: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise ValueError(f"points must have shape (N, 4), got {self.points.shape}")
        if self.labels.shape != (self.points.shape[0],):
            raise ValueError(
                f"{self.points.shape[0]} points but {self.labels.shape[0]} labels"
            )
        if self.instance_ids is not None:
            self.instance_ids = np.ascontiguousarray(self.instance_ids, dtype=np.int64)
            if self.instance_ids.shape != self.labels.shape:
                raise ValueError("instance ids must match the point count")

    @property
    def n_points(self):
        return self.points.shape[0]

    def azimuths(self):
        """Azimuth in [0, 2pi); points on the z-axis get 0 by convention."""
        az = np.arctan2(self.points[:, 1], self.points[:, 0])
        az = np.where(az < 0, az + 2 * np.pi, az)
        on_axis = (self.points[:, 0] == 0) & (self.points[:, 1] == 0)
        return np.where(on_axis, 0.0, az)

    def copy(self):
        inst = None if self.instance_ids is None else self.instance_ids.copy()
        return LabeledCloud(self.points.copy(), self.labels.copy(), inst)


@dataclass
class ScoreMap:
    """Per-cell acquisition scores plus labeled/unlabeled bookkeeping."""

    scores: np.ndarray
    labeled: np.ndarray = None

    def __post_init__(self):
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ValueError("scores must be a flat vector")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if self.labeled is None:
            self.labeled = np.zeros(self.scores.shape[0], dtype=bool)
        else:
            self.labeled = np.ascontiguousarray(self.labeled, dtype=bool)
            if self.labeled.shape != self.scores.shape:
                raise ValueError("labeled flags must match the score vector")

    @property
    def n_cells(self):
        return self.scores.shape[0]

    @property
    def n_unlabeled(self):
        return int((~self.labeled).sum())
