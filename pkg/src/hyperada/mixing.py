"""Input-space domain mixing: confidence-gated cut-and-paste for images and
polar sector swap / instance rotate-paste for point clouds.

Ordering contracts (the CLI derives provenance from them): sector swap emits
kept points of ``a`` first, then inserted points of ``b``; instance paste
emits all of ``a`` first, then one rotated copy per angle.
"""

from dataclasses import dataclass

import numpy as np

from hyperada.containers import UNLABELED, LabeledCloud, LabeledImage

TWO_PI = 2.0 * np.pi


@dataclass
class ConfidenceMask:
    """Pixels whose acquisition score sits at or below the percentile cut."""

    mask: np.ndarray
    tau_percentile: float
    tau_value: float

    def __post_init__(self):
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)


def pseudo_label(probs, scores, tau_percentile):
    """Argmax labels for low-uncertainty pixels, sentinel elsewhere.

    ``scores`` are per-pixel halo scores (flat or (H, W)); the mask keeps
    pixels with score <= the tau-th percentile.  Ties at the exact percentile
    are included, so a constant score map yields a full mask.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] == 0 or probs.shape[1] == 0:
        raise ValueError("pseudo_label needs a non-empty (H, W, C) probability map")
    if not 0 <= tau_percentile <= 100:
        raise ValueError("tau_percentile must lie in [0, 100]")
    h, w, _ = probs.shape
    flat = np.asarray(scores, dtype=np.float64).reshape(h * w)
    tau_value = float(np.percentile(flat, tau_percentile))
    mask = (flat <= tau_value).reshape(h, w)
    labels = np.full((h, w), UNLABELED, dtype=np.int64)
    labels[mask] = probs.argmax(axis=2)[mask]
    return labels, ConfidenceMask(mask=mask, tau_percentile=tau_percentile, tau_value=tau_value)


def dacs_mix(source, target_channels, target_pseudo, rng=None, classic=False):
    """Cut-and-paste mixing of a source image with confident target regions.

    The stated direction pastes confident target pixels (channels and pseudo
    labels) onto the source image; ``classic=True`` instead pastes a random
    half of the source classes onto the target (the original scheme, kept for
    ablation).  Returns the hybrid image plus the paste mask.
    """
    target_channels = np.asarray(target_channels, dtype=np.float64)
    pseudo_labels, conf = target_pseudo
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    if source.channels.shape != target_channels.shape:
        raise ValueError(
            f"source {source.channels.shape} and target {target_channels.shape} shapes differ"
        )
    if pseudo_labels.shape != source.labels.shape or conf.mask.shape != source.labels.shape:
        raise ValueError("pseudo labels / mask must match the image shape")

    if classic:
        if rng is None:
            raise ValueError("classic DACS needs an rng to pick the pasted classes")
        present = np.unique(source.labels[source.labels != UNLABELED])
        take = rng.permutation(present)[: max(1, present.size // 2)]
        paste = np.isin(source.labels, take)
        channels = np.where(paste[:, :, None], source.channels, target_channels)
        labels = np.where(paste, source.labels, pseudo_labels)
        return LabeledImage(channels, labels), paste

    paste = conf.mask & (pseudo_labels != UNLABELED)
    channels = np.where(paste[:, :, None], target_channels, source.channels)
    labels = np.where(paste, pseudo_labels, source.labels)
    return LabeledImage(channels, labels), paste


def _in_sector(azimuths, theta0, sigma):
    return (azimuths - theta0) % TWO_PI < sigma


def polarmix_sector_swap(a, b, theta0=None, sigma=np.pi, rng=None):
    """Replace an azimuth sector of cloud ``a`` with the same sector of ``b``."""
    if not 0 < sigma < TWO_PI:
        raise ValueError("sector width sigma must lie in (0, 2*pi)")
    if theta0 is None:
        if rng is None:
            raise ValueError("either pass theta0 or an rng to draw it")
        theta0 = float(rng.uniform(0.0, TWO_PI))
    keep = ~_in_sector(a.azimuths(), theta0, sigma)
    insert = _in_sector(b.azimuths(), theta0, sigma)
    points = np.concatenate([a.points[keep], b.points[insert]])
    labels = np.concatenate([a.labels[keep], b.labels[insert]])
    inst = None
    if a.instance_ids is not None and b.instance_ids is not None:
        inst = np.concatenate([a.instance_ids[keep], b.instance_ids[insert]])
    return LabeledCloud(points, labels, inst)


def rotate_z(points, angle):
    """Rotate xyz rows about the z-axis; intensity column is untouched."""
    out = points.copy()
    cos, sin = np.cos(angle), np.sin(angle)
    out[:, 0] = points[:, 0] * cos - points[:, 1] * sin
    out[:, 1] = points[:, 0] * sin + points[:, 1] * cos
    return out


def polarmix_instance_paste(a, b, classes, rotations, rng=None):
    """Append rotated copies of ``b``'s points of the chosen classes to ``a``.

    Labels (ground truth or pseudo) travel with the pasted points; an empty
    rotation list is an error (identity paste is rotations=[0]).
    """
    rotations = list(rotations)
    if not rotations:
        raise ValueError("rotation list must not be empty; use [0] for an identity paste")
    take = np.isin(b.labels, list(classes))
    if not np.any(take):
        return a.copy()
    chunk_points = b.points[take]
    chunk_labels = b.labels[take]
    chunk_inst = None if b.instance_ids is None else b.instance_ids[take]
    points = [a.points]
    labels = [a.labels]
    insts = [a.instance_ids] if a.instance_ids is not None else None
    for angle in rotations:
        points.append(rotate_z(chunk_points, angle))
        labels.append(chunk_labels)
        if insts is not None and chunk_inst is not None:
            insts.append(chunk_inst)
    inst = None
    if insts is not None and len(insts) == len(points):
        inst = np.concatenate(insts)
    return LabeledCloud(np.concatenate(points), np.concatenate(labels), inst)
