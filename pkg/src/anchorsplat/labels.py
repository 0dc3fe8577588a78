"""Per-face labels: projection from Gaussians, small-component cleanup, layer splitting."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .anchor import ClassTable, GaussianLayer
from .geometry import FaceAdjacency

__all__ = [
    "FaceLabeling",
    "default_threshold",
    "project_labels_to_faces",
    "refine",
    "project_labels_to_gaussians",
    "split_layers",
    "label_components",
    "small_components",
    "error_components",
]

DEFAULT_AREA_FRACTION = 0.02
SATURATION = 10.0


@dataclass
class FaceLabeling:
    labels: np.ndarray
    area_threshold: float

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1).copy()
        if not self.area_threshold > 0:
            raise ValueError("area threshold must be positive")

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return (
            isinstance(other, FaceLabeling)
            and np.array_equal(self.labels, other.labels)
            and self.area_threshold == other.area_threshold
        )


def default_threshold(face_areas, fraction: float = DEFAULT_AREA_FRACTION) -> float:
    return float(fraction * np.sum(face_areas))


def project_labels_to_faces(seg: GaussianLayer, num_faces: int, area_threshold: float) -> FaceLabeling:
    """Each face takes the argmax label of its single bound Gaussian."""
    counts = np.bincount(seg.face_id, minlength=num_faces)
    if len(counts) > num_faces:
        raise ValueError("segmentation layer references faces beyond the mesh")
    if np.any(counts == 0):
        raise ValueError(f"face {int(np.argmin(counts))} has no bound Gaussian")
    if np.any(counts > 1):
        raise ValueError(f"face {int(np.argmax(counts > 1))} has more than one bound Gaussian")
    labels = np.empty(num_faces, dtype=np.int64)
    labels[seg.face_id] = seg.labels
    return FaceLabeling(labels, area_threshold)


def label_components(labels, adjacency: FaceAdjacency):
    """Connected components of the same-label face graph: (count, component id per face)."""
    labels = np.asarray(labels)
    n = len(labels)
    i, j = adjacency.pairs[:, 0], adjacency.pairs[:, 1]
    same = labels[i] == labels[j]
    g = coo_matrix((np.ones(same.sum()), (i[same], j[same])), shape=(n, n))
    return connected_components(g, directed=False)


def _boundary(members: np.ndarray, adjacency: FaceAdjacency, inside: np.ndarray) -> np.ndarray:
    nb = np.unique(np.concatenate([adjacency.neighbors[f] for f in members]))
    return nb[~inside[nb]]


def _vote(labels, areas, boundary) -> int:
    """Most frequent neighbor label; ties by larger neighbor area, then smaller id."""
    cand = labels[boundary]
    ids = np.unique(cand)
    count = np.array([(cand == c).sum() for c in ids])
    area = np.array([areas[boundary][cand == c].sum() for c in ids])
    best = np.lexsort((ids, -area, -count))[0]
    return int(ids[best])


def refine(labeling: FaceLabeling, adjacency: FaceAdjacency, max_passes: Optional[int] = None) -> FaceLabeling:
    """Relabel every same-label component smaller than the area threshold to its neighbors' majority.

    Components are recomputed from scratch at the start of each pass and
    visited in order of their smallest face id; a relabel is visible to the
    components visited after it. Passes repeat until nothing changes.
    """
    labels = labeling.labels.copy()
    if len(labels) != adjacency.num_faces:
        raise ValueError("labeling and adjacency disagree on the face count")
    areas = adjacency.face_areas
    tau = labeling.area_threshold
    limit = len(labels) + 1 if max_passes is None else max_passes
    warned = set()
    for _ in range(limit):
        ncomp, comp = label_components(labels, adjacency)
        comp_area = np.bincount(comp, weights=areas, minlength=ncomp)
        first = np.full(ncomp, len(labels))
        np.minimum.at(first, comp, np.arange(len(labels)))
        changed = False
        for c in np.argsort(first, kind="stable"):
            if comp_area[c] >= tau:
                continue
            inside = comp == c
            members = np.flatnonzero(inside)
            boundary = _boundary(members, adjacency, inside)
            if len(boundary) == 0:
                if int(first[c]) not in warned:
                    warnings.warn(
                        f"component starting at face {int(first[c])} is below the area threshold "
                        "but has no neighbors; left unchanged",
                        stacklevel=2,
                    )
                    warned.add(int(first[c]))
                continue
            new = _vote(labels, areas, boundary)
            if new != labels[members[0]]:
                labels[members] = new
                changed = True
        if not changed:
            return FaceLabeling(labels, tau)
    raise RuntimeError("label refinement did not converge")


def small_components(labeling: FaceLabeling, adjacency: FaceAdjacency) -> list:
    """Sub-threshold same-label components that touch a differently labeled face."""
    labels = labeling.labels
    ncomp, comp = label_components(labels, adjacency)
    comp_area = np.bincount(comp, weights=adjacency.face_areas, minlength=ncomp)
    out = []
    for c in range(ncomp):
        if comp_area[c] >= labeling.area_threshold:
            continue
        inside = comp == c
        members = np.flatnonzero(inside)
        if len(_boundary(members, adjacency, inside)):
            out.append(members)
    return out


def error_components(predicted, truth, adjacency: FaceAdjacency) -> int:
    """Number of connected regions of mislabeled faces."""
    wrong = np.asarray(predicted) != np.asarray(truth)
    if not wrong.any():
        return 0
    n = len(wrong)
    i, j = adjacency.pairs[:, 0], adjacency.pairs[:, 1]
    both = wrong[i] & wrong[j]
    g = coo_matrix((np.ones(both.sum()), (i[both], j[both])), shape=(n, n))
    _, comp = connected_components(g, directed=False)
    return len(np.unique(comp[wrong]))


def project_labels_to_gaussians(labeling: FaceLabeling, seg: GaussianLayer, saturation: float = SATURATION) -> GaussianLayer:
    """Overwrite each Gaussian's label logits with a saturated one-hot of its face label."""
    lab = labeling.labels[seg.face_id]
    if lab.max(initial=0) >= seg.num_classes:
        raise ValueError("labeling uses a class id beyond the layer's label logits")
    logits = np.zeros_like(seg.label_logits)
    logits[np.arange(len(seg)), lab] = saturation
    return seg.copy(label_logits=logits)


def split_layers(seg: GaussianLayer, labeling: FaceLabeling, classes: ClassTable) -> list:
    """One layer per class present, ordered by class id, named after the class."""
    lab = labeling.labels[seg.face_id]
    classes.check(lab)
    return [seg.subset(np.flatnonzero(lab == c), name=classes.names[c]) for c in np.unique(lab)]
