"""Gaussians anchored to mesh faces by barycentric coordinates and a positive normal offset.

A Gaussian bound to face ``f`` with vertices ``v_k`` and vertex normals ``n_k``
has mean ``sum_k b_k v_k + delta * sum_k b_k n_k``. The barycentric triple is
stored as three logits (softmax keeps it on the simplex) and the offset as
``log(delta)``, so any unconstrained update leaves the Gaussian valid.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .geometry import (
    IDENTITY_QUAT,
    SkinnedMesh,
    face_normals,
    matrix_to_quat,
    quat_compose,
    quat_normalize,
    quat_to_matrix,
)

__all__ = [
    "ClassTable",
    "DEFAULT_CLASSES",
    "REFERENCE_COVERAGE",
    "AnchoredGaussian",
    "GaussianLayer",
    "ReferenceGaussians",
    "Splats",
    "softmax",
    "realize_mean",
    "realize_means",
    "realize_orientation",
    "realize_orientations",
    "ReferenceGaussian",
    "reference_from_mesh",
    "init_seg_layer",
    "reparam_to_free",
    "reparam_from_free",
    "check_invariants",
    "face_frames",
    "layer_splats",
    "reference_splats",
    "stratified_bary",
    "duplicate_layer",
]


@dataclass(frozen=True)
class ClassTable:
    """Semantic classes. Label images use -1 for background and the index here otherwise."""

    names: tuple
    colors: tuple
    garment: tuple

    def __post_init__(self):
        if not (len(self.names) == len(self.colors) == len(self.garment)):
            raise ValueError("class table fields must have equal length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate class names")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None

    def color_array(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.float64)

    def check(self, ids) -> None:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise KeyError(f"class id out of range for a table of {len(self)} classes")

    @property
    def garment_ids(self) -> list:
        return [i for i, g in enumerate(self.garment) if g]

    def to_dict(self):
        return {"names": list(self.names), "colors": [list(c) for c in self.colors], "garment": list(self.garment)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["names"]), tuple(tuple(float(x) for x in c) for c in d["colors"]), tuple(bool(g) for g in d["garment"]))


DEFAULT_CLASSES = ClassTable(
    names=("skin", "hair", "upper", "lower", "outer", "shoes"),
    colors=(
        (1.0, 0.8, 0.6),
        (0.4, 0.2, 0.0),
        (1.0, 0.0, 0.0),
        (0.0, 0.0, 1.0),
        (0.0, 1.0, 0.0),
        (1.0, 0.0, 1.0),
    ),
    garment=(False, False, True, True, True, True),
)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class AnchoredGaussian:
    """One anchored Gaussian with its constrained parameters."""

    face_id: int
    bary: np.ndarray
    offset: float
    rel_rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    scale: np.ndarray = field(default_factory=lambda: np.array([0.01, 0.01]))
    opacity: float = 1.0
    color: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 0.5]))
    label_logits: np.ndarray = field(default_factory=lambda: np.zeros(1))


@dataclass
class GaussianLayer:
    """A named set of anchored Gaussians, stored in their free parameterization.

    ``bary_logits`` and ``log_offset`` are the optimization variables for the
    mean; ``bary`` and ``offset`` give the constrained values.
    """

    name: str
    face_id: np.ndarray
    bary_logits: np.ndarray
    log_offset: np.ndarray
    rel_rotation: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    label_logits: np.ndarray
    order_rank: int = 0

    def __post_init__(self):
        self.face_id = np.asarray(self.face_id, dtype=np.int64).reshape(-1)
        n = len(self.face_id)
        self.bary_logits = np.asarray(self.bary_logits, dtype=np.float64).reshape(n, 3)
        self.log_offset = np.asarray(self.log_offset, dtype=np.float64).reshape(n)
        self.rel_rotation = np.asarray(self.rel_rotation, dtype=np.float64).reshape(n, 4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(n, 2)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        logits = np.asarray(self.label_logits, dtype=np.float64)
        self.label_logits = logits.reshape(n, logits.shape[-1] if logits.ndim == 2 else -1)

    def __len__(self):
        return len(self.face_id)

    @property
    def bary(self) -> np.ndarray:
        return softmax(self.bary_logits)

    @property
    def offset(self) -> np.ndarray:
        return np.exp(self.log_offset)

    @property
    def label_probs(self) -> np.ndarray:
        return softmax(self.label_logits)

    @property
    def labels(self) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lowest class id
        return np.argmax(self.label_logits, axis=1)

    @property
    def num_classes(self) -> int:
        return self.label_logits.shape[1]

    def record(self, i: int) -> AnchoredGaussian:
        return AnchoredGaussian(
            face_id=int(self.face_id[i]),
            bary=self.bary[i],
            offset=float(self.offset[i]),
            rel_rotation=self.rel_rotation[i].copy(),
            scale=self.scale[i].copy(),
            opacity=float(self.opacity[i]),
            color=self.color[i].copy(),
            label_logits=self.label_logits[i].copy(),
        )

    def subset(self, idx, name: Optional[str] = None) -> "GaussianLayer":
        idx = np.asarray(idx)
        return GaussianLayer(
            name=self.name if name is None else name,
            face_id=self.face_id[idx],
            bary_logits=self.bary_logits[idx],
            log_offset=self.log_offset[idx],
            rel_rotation=self.rel_rotation[idx],
            scale=self.scale[idx],
            opacity=self.opacity[idx],
            color=self.color[idx],
            label_logits=self.label_logits[idx],
            order_rank=self.order_rank,
        )

    def copy(self, **changes) -> "GaussianLayer":
        out = self.subset(np.arange(len(self)))
        return replace(out, **changes) if changes else out

    @classmethod
    def concatenate(cls, layers: Sequence["GaussianLayer"], name: str) -> "GaussianLayer":
        def cat(attr):
            return np.concatenate([getattr(l, attr) for l in layers])

        return cls(
            name=name,
            face_id=cat("face_id"),
            bary_logits=cat("bary_logits"),
            log_offset=cat("log_offset"),
            rel_rotation=cat("rel_rotation"),
            scale=cat("scale"),
            opacity=cat("opacity"),
            color=cat("color"),
            label_logits=cat("label_logits"),
            order_rank=layers[0].order_rank if layers else 0,
        )

    @classmethod
    def from_records(cls, records: Sequence[AnchoredGaussian], name: str, order_rank: int = 0) -> "GaussianLayer":
        bary = np.array([r.bary for r in records], dtype=np.float64).reshape(-1, 3)
        return cls(
            name=name,
            face_id=[r.face_id for r in records],
            bary_logits=np.log(np.maximum(bary, 1e-300)),
            log_offset=np.log([r.offset for r in records]),
            rel_rotation=[r.rel_rotation for r in records],
            scale=[r.scale for r in records],
            opacity=[r.opacity for r in records],
            color=[r.color for r in records],
            label_logits=np.array([r.label_logits for r in records]).reshape(len(records), -1),
            order_rank=order_rank,
        )


@dataclass
class ReferenceGaussians:
    """One surface-aligned Gaussian per mesh face: the fixed body reference."""

    center: np.ndarray
    orientation: np.ndarray
    scale: np.ndarray
    color: np.ndarray
    opacity: np.ndarray

    def __len__(self):
        return len(self.center)

    @property
    def face_id(self) -> np.ndarray:
        return np.arange(len(self))

    def record(self, i: int) -> "ReferenceGaussian":
        return ReferenceGaussian(
            face_id=int(i),
            center=self.center[i].copy(),
            orientation=self.orientation[i].copy(),
            scale=self.scale[i].copy(),
            color=self.color[i].copy(),
            opacity=float(self.opacity[i]),
        )


@dataclass
class ReferenceGaussian:
    face_id: int
    center: np.ndarray
    orientation: np.ndarray
    scale: np.ndarray
    color: np.ndarray
    opacity: float = 1.0


def face_frames(mesh: SkinnedMesh):
    """Per-face rotation (longest edge, normal x edge, normal) and local vertex coords.

    Returns the (F, 3, 3) frame matrices (columns are the axes) and the (F, 3, 2)
    in-plane coordinates of the three vertices relative to the centroid.
    """
    v = mesh.vertices[mesh.faces]
    n = face_normals(mesh.vertices, mesh.faces)
    edges = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], axis=1)
    lengths = np.linalg.norm(edges, axis=2)
    k = np.argmax(lengths, axis=1)
    e1 = edges[np.arange(len(v)), k] / lengths[np.arange(len(v)), k][:, None]
    e2 = np.cross(n, e1)
    frame = np.stack([e1, e2, n], axis=2)
    rel = v - v.mean(axis=1, keepdims=True)
    local = np.einsum("fkd,fda->fka", rel, frame[:, :, :2])
    return frame, local


def _circumscribing_scales(local: np.ndarray) -> np.ndarray:
    """Axis-aligned, centroid-centred ellipse of least area containing each triangle.

    With A = 1/s1^2 and B = 1/s2^2 the containment constraints are linear,
    x_k^2 A + y_k^2 B <= 1, and the area is maximized by maximizing A*B. The
    optimum touches one constraint (A x^2 = B y^2 = 1/2) or two of them.
    """
    out = np.empty((len(local), 2))
    for f, pts in enumerate(local):
        x2, y2 = pts[:, 0] ** 2, pts[:, 1] ** 2
        best, best_ab = None, -1.0
        cands = []
        for k in range(3):
            if x2[k] > 0 and y2[k] > 0:
                cands.append((0.5 / x2[k], 0.5 / y2[k]))
        for k in range(3):
            for l in range(k + 1, 3):
                det = x2[k] * y2[l] - x2[l] * y2[k]
                if abs(det) > 1e-30:
                    a = (y2[l] - y2[k]) / det
                    b = (x2[k] - x2[l]) / det
                    cands.append((a, b))
        for a, b in cands:
            if a <= 0 or b <= 0:
                continue
            if np.all(x2 * a + y2 * b <= 1 + 1e-9) and a * b > best_ab:
                best, best_ab = (a, b), a * b
        out[f] = 1.0 / np.sqrt(best)
    return out


# Fraction of the circumscribing size given to reference splats. Full-size
# splats reach well into neighbouring faces, and under a per-splat depth sort
# they draw over thin layers there.
REFERENCE_COVERAGE = 0.6


def reference_from_mesh(mesh: SkinnedMesh, skin_color=(0.8, 0.6, 0.5), coverage: float = REFERENCE_COVERAGE) -> ReferenceGaussians:
    """Build the per-face reference Gaussians of ``mesh``.

    The centre is the face centroid, the frame follows the longest edge and
    the face normal, and the in-plane scales are the semi-axes of the smallest
    axis-aligned ellipse through which the 1-sigma contour encloses the
    triangle, multiplied by ``coverage``.
    """
    frame, local = face_frames(mesh)
    scales = coverage * _circumscribing_scales(local)
    nf = mesh.num_faces
    return ReferenceGaussians(
        center=mesh.centroids(),
        orientation=matrix_to_quat(frame),
        scale=scales,
        color=np.tile(np.asarray(skin_color, dtype=np.float64), (nf, 1)),
        opacity=np.ones(nf),
    )


def realize_means(face_id, bary, offset, mesh: SkinnedMesh, return_inplane: bool = False):
    """Vectorized mean realization; ``offset`` may include a stacking shift."""
    face_id = np.asarray(face_id, dtype=np.int64)
    bary = np.asarray(bary, dtype=np.float64).reshape(len(face_id), 3)
    tri = mesh.faces[face_id]
    p = np.einsum("nk,nkd->nd", bary, mesh.vertices[tri])
    nrm = np.einsum("nk,nkd->nd", bary, mesh.vertex_normals[tri])
    mu = p + np.asarray(offset, dtype=np.float64).reshape(-1, 1) * nrm
    if return_inplane:
        return mu, p, nrm
    return mu


def realize_mean(g: AnchoredGaussian, mesh: SkinnedMesh) -> np.ndarray:
    return realize_means([g.face_id], [g.bary], [g.offset], mesh)[0]


def realize_orientation(g: AnchoredGaussian, ref: "ReferenceGaussian") -> np.ndarray:
    """Orientation of ``g``: its face's reference orientation composed with ``g.rel_rotation``."""
    if g.face_id != ref.face_id:
        raise ValueError(f"Gaussian bound to face {g.face_id} composed with the reference of face {ref.face_id}")
    return quat_compose(ref.orientation, quat_normalize(g.rel_rotation))


def realize_orientations(layer: GaussianLayer, refs: ReferenceGaussians) -> np.ndarray:
    return quat_compose(refs.orientation[layer.face_id], quat_normalize(layer.rel_rotation))


def init_seg_layer(
    mesh: SkinnedMesh,
    refs: ReferenceGaussians,
    num_classes: int,
    skin_class: int = 0,
    init_offset: float = 1e-4,
    label_logit: float = 1.0,
    name: str = "seg",
) -> GaussianLayer:
    """One Gaussian per face at the centroid, lifted by ``init_offset``, labelled skin."""
    nf = mesh.num_faces
    logits = np.zeros((nf, num_classes))
    logits[:, skin_class] = label_logit
    return GaussianLayer(
        name=name,
        face_id=np.arange(nf),
        bary_logits=np.zeros((nf, 3)),
        log_offset=np.full(nf, np.log(init_offset)),
        rel_rotation=np.tile(IDENTITY_QUAT, (nf, 1)),
        scale=refs.scale.copy(),
        opacity=np.ones(nf),
        color=refs.color.copy(),
        label_logits=logits,
    )


# free vector layout: bary logits (3), log offset, quaternion (4), log scales (2), color (3), label logits
FREE_SLICES = {
    "bary_logits": slice(0, 3),
    "log_offset": slice(3, 4),
    "rel_rotation": slice(4, 8),
    "log_scale": slice(8, 10),
    "color": slice(10, 13),
    "label_logits": slice(13, None),
}


LOG_LIMIT = 700.0


def reparam_to_free(g: AnchoredGaussian) -> np.ndarray:
    bary = np.maximum(np.asarray(g.bary, dtype=np.float64), 1e-300)
    logits = np.log(bary)
    logits -= logits.mean()
    return np.concatenate(
        [
            logits,
            [np.log(g.offset)],
            np.asarray(g.rel_rotation, dtype=np.float64),
            np.log(np.asarray(g.scale, dtype=np.float64)),
            np.asarray(g.color, dtype=np.float64),
            np.asarray(g.label_logits, dtype=np.float64),
        ]
    )


def reparam_from_free(vec, face_id: int, opacity: float = 1.0) -> AnchoredGaussian:
    """Map any finite free vector to a valid AnchoredGaussian."""
    vec = np.asarray(vec, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise ValueError("free parameter vector contains non-finite values")
    q = vec[FREE_SLICES["rel_rotation"]]
    nq = np.linalg.norm(q)
    q = IDENTITY_QUAT.copy() if nq < 1e-12 else q / nq
    # exponents are clamped so that huge entries still give finite values
    offset = float(np.exp(np.clip(vec[3], -LOG_LIMIT, LOG_LIMIT)))
    if offset <= 0.0:
        offset = np.nextafter(0.0, 1.0)
    return AnchoredGaussian(
        face_id=int(face_id),
        bary=softmax(vec[FREE_SLICES["bary_logits"]]),
        offset=offset,
        rel_rotation=q,
        scale=np.exp(np.clip(vec[FREE_SLICES["log_scale"]], -LOG_LIMIT, LOG_LIMIT)),
        opacity=float(opacity),
        color=np.clip(vec[FREE_SLICES["color"]], 0.0, 1.0),
        label_logits=vec[FREE_SLICES["label_logits"]].copy(),
    )


def check_invariants(layer: GaussianLayer, mesh: Optional[SkinnedMesh] = None, tol: float = 1e-6) -> list:
    """Return a list of violated invariants (empty when the layer is valid)."""
    problems = []
    b = layer.bary
    if np.any(b < 0) or np.any(np.abs(b.sum(axis=1) - 1) > tol):
        problems.append("barycentric coordinates off the simplex")
    if np.any(~(layer.offset > 0) | ~np.isfinite(layer.offset)):
        problems.append("non-positive normal offset")
    if np.any(np.abs(np.linalg.norm(layer.rel_rotation, axis=1) - 1) > tol):
        problems.append("relative rotation not unit norm")
    if np.any(~(layer.scale > 0) | ~np.isfinite(layer.scale)):
        problems.append("non-positive scale")
    if np.any((layer.opacity < 0) | (layer.opacity > 1)):
        problems.append("opacity outside [0, 1]")
    if np.any((layer.color < 0) | (layer.color > 1)):
        problems.append("color outside [0, 1]")
    if mesh is not None and len(layer) and (layer.face_id.min() < 0 or layer.face_id.max() >= mesh.num_faces):
        problems.append("face id out of range")
    return problems


# ---------------------------------------------------------------------------
# world-space splats for the renderer
# ---------------------------------------------------------------------------

@dataclass
class Splats:
    """World-space 2D Gaussian disks as torch tensors.

    ``rotations`` columns are the two tangent axes and the disk normal;
    ``features`` is any per-splat vector composited by the renderer (RGB, label
    colors, layer masks, ...).
    """

    means: torch.Tensor
    rotations: torch.Tensor
    scales: torch.Tensor
    opacities: torch.Tensor
    features: torch.Tensor

    def __len__(self):
        return self.means.shape[0]

    @classmethod
    def from_numpy(cls, means, quats, scales, opacities, features) -> "Splats":
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
        return cls(t(means), t(quat_to_matrix(quats)).reshape(-1, 3, 3), t(scales), t(opacities), t(features).reshape(len(means), -1))

    def with_features(self, features) -> "Splats":
        features = torch.as_tensor(features, dtype=self.means.dtype)
        return Splats(self.means, self.rotations, self.scales, self.opacities, features.reshape(len(self), -1))

    def detach(self) -> "Splats":
        return Splats(*(x.detach() for x in (self.means, self.rotations, self.scales, self.opacities, self.features)))

    @staticmethod
    def cat(items: Sequence["Splats"]) -> "Splats":
        items = [s for s in items if s is not None and len(s)]
        if not items:
            raise ValueError("nothing to concatenate")
        return Splats(*(torch.cat([getattr(s, a) for s in items]) for a in ("means", "rotations", "scales", "opacities", "features")))


def layer_splats(
    layer: GaussianLayer,
    mesh: SkinnedMesh,
    refs: ReferenceGaussians,
    features=None,
    extra_offset=None,
) -> Splats:
    """Realize a layer on ``mesh`` (no gradients). ``features`` defaults to color."""
    offset = layer.offset if extra_offset is None else layer.offset + extra_offset
    mu = realize_means(layer.face_id, layer.bary, offset, mesh)
    q = realize_orientations(layer, refs)
    f = layer.color if features is None else features
    return Splats.from_numpy(mu, q, layer.scale, layer.opacity, f)


def reference_splats(refs: ReferenceGaussians, features=None, faces=None) -> Splats:
    idx = np.arange(len(refs)) if faces is None else np.asarray(faces, dtype=np.int64)
    f = refs.color[idx] if features is None else features
    return Splats.from_numpy(refs.center[idx], refs.orientation[idx], refs.scale[idx], refs.opacity[idx], f)


def _subtriangles(levels: int) -> np.ndarray:
    """Corner barycentrics of the 4**levels midpoint-subdivision children of a triangle."""
    tris = np.eye(3)[None]
    for _ in range(levels):
        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        tris = np.stack(
            [np.stack(t, 1) for t in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))], 1
        ).reshape(-1, 3, 3)
    return tris


def stratified_bary(count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` random barycentric points, one per cell of a midpoint subdivision."""
    if count < 1:
        raise ValueError("need at least one point")
    levels = int(np.ceil(np.log(count) / np.log(4))) if count > 1 else 0
    cells = _subtriangles(levels)
    pick = np.floor(np.arange(count) * len(cells) / count).astype(int)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    w = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], 1)
    return np.einsum("nk,nkd->nd", w, cells[pick])


def duplicate_layer(layer: GaussianLayer, count: int, rng: np.random.Generator, refs: Optional[ReferenceGaussians] = None, color=None) -> GaussianLayer:
    """Replace each Gaussian by ``count`` copies at stratified positions on its face.

    Copies keep offset, rotation and labels. Scales become isotropic at the
    geometric mean of the source scales (or of the reference scales when
    ``refs`` is given) divided by sqrt(count).
    """
    n = len(layer)
    idx = np.repeat(np.arange(n), count)
    bary = np.concatenate([stratified_bary(count, rng) for _ in range(n)]) if n else np.zeros((0, 3))
    base = refs.scale[layer.face_id] if refs is not None else layer.scale
    iso = np.sqrt(base[:, 0] * base[:, 1]) / np.sqrt(count)
    out = layer.subset(idx)
    out.bary_logits = np.log(np.maximum(bary, 1e-12))
    out.scale = np.repeat(np.stack([iso, iso], 1), count, axis=0)
    if color is not None:
        out.color = np.tile(np.clip(np.asarray(color, dtype=np.float64), 0, 1), (len(out), 1))
    return out
