"""Torch leaf tensors for a layer's free parameters, and differentiable realization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import torch

from . import tquat
from .anchor import GaussianLayer, ReferenceGaussians, Splats
from .geometry import SkinnedMesh

__all__ = ["MeshTensors", "FreeLayer", "PARAM_GROUPS"]

PARAM_GROUPS = ("bary_logits", "log_offset", "rel_rotation", "log_scale", "color", "label_logits")


@dataclass
class MeshTensors:
    vertices: torch.Tensor
    normals: torch.Tensor
    faces: torch.Tensor
    ref_quats: torch.Tensor
    centroids: torch.Tensor

    @classmethod
    def build(cls, mesh: SkinnedMesh, refs: ReferenceGaussians) -> "MeshTensors":
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
        return cls(
            vertices=t(mesh.vertices),
            normals=t(mesh.vertex_normals),
            faces=torch.as_tensor(mesh.faces, dtype=torch.int64),
            ref_quats=t(refs.orientation),
            centroids=t(refs.center),
        )


class FreeLayer:
    """Optimizable view of a GaussianLayer.

    Only the groups named in ``trainable`` get ``requires_grad``; ``to_layer``
    copies untouched groups from the source layer byte for byte.
    """

    def __init__(self, layer: GaussianLayer, trainable: Iterable[str] = PARAM_GROUPS):
        self.source = layer
        self.trainable = tuple(trainable)
        unknown = set(self.trainable) - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        self.face_id = torch.as_tensor(layer.face_id)
        values = {
            "bary_logits": layer.bary_logits,
            "log_offset": layer.log_offset,
            "rel_rotation": layer.rel_rotation,
            "log_scale": np.log(layer.scale),
            "color": layer.color,
            "label_logits": layer.label_logits,
        }
        self.tensors = {}
        for name, v in values.items():
            t = torch.tensor(np.array(v, dtype=np.float64))
            self.tensors[name] = t.requires_grad_(name in self.trainable)
        self.opacity = torch.as_tensor(layer.opacity.copy())

    def __len__(self):
        return len(self.face_id)

    def __getitem__(self, name) -> torch.Tensor:
        return self.tensors[name]

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.tensors["log_scale"])

    def parameters(self, lrs: dict) -> list:
        """Adam parameter groups for the trainable tensors with their step sizes."""
        return [{"params": [self.tensors[n]], "lr": float(lrs[n]), "name": n} for n in self.trainable if len(self)]

    def realize(self, mt: MeshTensors, extra_offset: Optional[torch.Tensor] = None):
        """Means, rotation matrices and quaternions on the mesh in ``mt``."""
        b = torch.softmax(self.tensors["bary_logits"], dim=-1)
        delta = torch.exp(self.tensors["log_offset"])
        if extra_offset is not None:
            delta = delta + extra_offset
        tri = mt.faces[self.face_id]
        p = torch.einsum("nk,nkd->nd", b, mt.vertices[tri])
        n = torch.einsum("nk,nkd->nd", b, mt.normals[tri])
        mu = p + delta[:, None] * n
        q = tquat.quat_mul(mt.ref_quats[self.face_id], tquat.normalize(self.tensors["rel_rotation"]))
        return mu, tquat.quat_to_matrix(q), q

    def splats(self, mt: MeshTensors, features: Optional[torch.Tensor] = None, extra_offset=None) -> Splats:
        mu, rot, _ = self.realize(mt, extra_offset)
        f = self.tensors["color"] if features is None else features
        return Splats(mu, rot, self.scales, self.opacity, f)

    @torch.no_grad()
    def project_(self):
        """Restore the stored-value constraints after an optimizer step."""
        if "color" in self.trainable:
            self.tensors["color"].clamp_(0.0, 1.0)
        if "rel_rotation" in self.trainable:
            q = self.tensors["rel_rotation"]
            q /= q.norm(dim=1, keepdim=True)

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors.values())

    def to_layer(self) -> GaussianLayer:
        src = self.source
        get = lambda n: self.tensors[n].detach().numpy().copy()
        return GaussianLayer(
            name=src.name,
            face_id=src.face_id.copy(),
            bary_logits=get("bary_logits") if "bary_logits" in self.trainable else src.bary_logits.copy(),
            log_offset=get("log_offset") if "log_offset" in self.trainable else src.log_offset.copy(),
            rel_rotation=get("rel_rotation") if "rel_rotation" in self.trainable else src.rel_rotation.copy(),
            scale=np.exp(get("log_scale")) if "log_scale" in self.trainable else src.scale.copy(),
            opacity=src.opacity.copy(),
            color=get("color") if "color" in self.trainable else src.color.copy(),
            label_logits=get("label_logits") if "label_logits" in self.trainable else src.label_logits.copy(),
            order_rank=src.order_rank,
        )
