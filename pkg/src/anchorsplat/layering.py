"""Layered avatars: stacking order, offset-based collision resolution, posing, transfer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .anchor import (
    DEFAULT_CLASSES,
    ClassTable,
    GaussianLayer,
    ReferenceGaussians,
    Splats,
    realize_means,
    realize_orientations,
    reference_from_mesh,
)
from .geometry import FaceAdjacency, Pose, SkinnedMesh, build_adjacency, pose_mesh
from .labels import FaceLabeling

__all__ = [
    "LayeredAvatar",
    "stacking_offsets",
    "resolve_stacking",
    "realize_layer",
    "animate",
    "transfer_layer",
    "reorder",
    "check_same_topology",
]


@dataclass
class LayeredAvatar:
    """Anchor mesh, its layers (any order; ``order_rank`` decides stacking) and the body reference.

    ``body_ref_faces`` selects the reference Gaussians that stay visible (faces
    not covered by a garment).
    """

    anchor_mesh: SkinnedMesh
    layers: list
    body_refs: ReferenceGaussians
    face_labels: FaceLabeling
    classes: ClassTable = DEFAULT_CLASSES
    body_ref_faces: Optional[np.ndarray] = None
    skin_color: tuple = (0.8, 0.6, 0.5)
    dilation: int = 1
    _adjacency: Optional[FaceAdjacency] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ranks = sorted(l.order_rank for l in self.layers)
        if ranks != list(range(len(self.layers))):
            raise ValueError(f"layer order ranks must be a permutation of 0..{len(self.layers) - 1}, got {ranks}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        nf = self.anchor_mesh.num_faces
        for l in self.layers:
            if len(l) and l.face_id.max() >= nf:
                raise ValueError(f"layer {l.name} references faces beyond the anchor mesh")
        if self.body_ref_faces is None:
            self.body_ref_faces = np.arange(nf)
        self.body_ref_faces = np.asarray(self.body_ref_faces, dtype=np.int64)

    @property
    def adjacency(self) -> FaceAdjacency:
        if self._adjacency is None:
            self._adjacency = build_adjacency(self.anchor_mesh)
        return self._adjacency

    def ordered(self) -> list:
        """Layers innermost first."""
        return sorted(self.layers, key=lambda l: l.order_rank)

    def layer(self, name: str) -> GaussianLayer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(f"no layer named {name!r}; have {[l.name for l in self.layers]}")

    def replace_layer(self, new: GaussianLayer) -> "LayeredAvatar":
        layers = [new if l.name == new.name else l for l in self.layers]
        return self.with_layers(layers)

    def with_layers(self, layers, **changes) -> "LayeredAvatar":
        kw = dict(
            anchor_mesh=self.anchor_mesh,
            layers=list(layers),
            body_refs=self.body_refs,
            face_labels=self.face_labels,
            classes=self.classes,
            body_ref_faces=self.body_ref_faces,
            skin_color=self.skin_color,
            dilation=self.dilation,
            _adjacency=self._adjacency,
        )
        kw.update(changes)
        return LayeredAvatar(**kw)


def _dilate(per_face: np.ndarray, adjacency: FaceAdjacency, rings: int) -> np.ndarray:
    out = per_face
    for _ in range(rings):
        nxt = out.copy()
        p = adjacency.pairs
        np.maximum.at(nxt, p[:, 0], out[p[:, 1]])
        np.maximum.at(nxt, p[:, 1], out[p[:, 0]])
        out = nxt
    return out


def stacking_offsets(
    layers: Sequence[GaussianLayer], num_faces: int, adjacency: Optional[FaceAdjacency] = None, dilation: int = 0
) -> dict:
    """Extra normal offset per Gaussian from the layers stacked below it.

    Layers are processed innermost first. A Gaussian's extra offset is the
    largest *effective* offset (own plus extra) among lower-layer Gaussians
    bound to the same face, optionally dilated over ``dilation`` face rings;
    0 where no lower layer is bound.
    """
    if dilation and adjacency is None:
        raise ValueError("dilation needs the face adjacency")
    below = np.zeros(num_faces)
    out = {}
    for layer in sorted(layers, key=lambda l: l.order_rank):
        lifted = _dilate(below, adjacency, dilation) if dilation else below
        extra = lifted[layer.face_id]
        out[layer.name] = extra
        np.maximum.at(below, layer.face_id, layer.offset + extra)
    return out


def resolve_stacking(avatar: LayeredAvatar) -> dict:
    """Per-layer extra offsets for ``avatar`` (see ``stacking_offsets``)."""
    adj = avatar.adjacency if avatar.dilation else None
    return stacking_offsets(avatar.layers, avatar.anchor_mesh.num_faces, adj, avatar.dilation)


def realize_layer(layer: GaussianLayer, mesh: SkinnedMesh, refs: ReferenceGaussians, extra=None, features=None) -> Splats:
    offset = layer.offset if extra is None else layer.offset + extra
    mu = realize_means(layer.face_id, layer.bary, offset, mesh)
    q = realize_orientations(layer, refs)
    return Splats.from_numpy(mu, q, layer.scale, layer.opacity, layer.color if features is None else features)


def animate(avatar: LayeredAvatar, pose: Optional[Pose] = None) -> dict:
    """Realized world splats per layer name (plus ``"body"`` for visible reference Gaussians).

    The anchor mesh is posed by skinning, normals and reference frames are
    recomputed on the posed mesh, and every Gaussian is realized there with its
    stacking offset. Parameters are not modified.
    """
    mesh = avatar.anchor_mesh if pose is None else pose_mesh(avatar.anchor_mesh, pose)
    refs = reference_from_mesh(mesh, skin_color=avatar.skin_color)
    extra = resolve_stacking(avatar)
    out = {}
    for layer in avatar.ordered():
        if len(layer):
            out[layer.name] = realize_layer(layer, mesh, refs, extra[layer.name])
    faces = avatar.body_ref_faces
    if len(faces):
        out["body"] = Splats.from_numpy(
            refs.center[faces], refs.orientation[faces], refs.scale[faces], refs.opacity[faces], refs.color[faces]
        )
    return out


def check_same_topology(a: SkinnedMesh, b: SkinnedMesh) -> None:
    if a.faces.shape != b.faces.shape or not np.array_equal(a.faces, b.faces) or a.vertices.shape != b.vertices.shape:
        raise ValueError("source and target anchor meshes do not share face topology")


def transfer_layer(
    source: LayeredAvatar, name: str, target: LayeredAvatar, order_rank: Optional[int] = None
) -> LayeredAvatar:
    """Copy layer ``name`` verbatim onto ``target`` at ``order_rank`` (default: outermost)."""
    check_same_topology(source.anchor_mesh, target.anchor_mesh)
    moved = source.layer(name)
    rank = len(target.layers) if order_rank is None else int(order_rank)
    if not 0 <= rank <= len(target.layers):
        raise ValueError(f"order rank {rank} out of range")
    layers = []
    for l in target.layers:
        if l.name == name:
            raise ValueError(f"target already has a layer named {name!r}")
        layers.append(l if l.order_rank < rank else l.copy(order_rank=l.order_rank + 1))
    layers.append(moved.copy(order_rank=rank))
    keep = target.body_ref_faces[~np.isin(target.body_ref_faces, moved.face_id)]
    return target.with_layers(layers, body_ref_faces=keep)


def reorder(avatar: LayeredAvatar, permutation) -> LayeredAvatar:
    """Give the layer at rank ``r`` the new rank ``permutation[r]``."""
    perm = np.asarray(permutation, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(len(avatar.layers))):
        raise ValueError("permutation must be a rearrangement of the layer ranks")
    return avatar.with_layers([l.copy(order_rank=int(perm[l.order_rank])) for l in avatar.layers])
