"""Scalar training losses; all take and return torch tensors."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .geometry import FaceAdjacency

__all__ = [
    "LossWeights",
    "GaussianNeighbors",
    "gaussian_neighbors",
    "loss_color",
    "loss_scale",
    "loss_normal",
    "loss_label_smooth",
    "loss_mask",
    "loss_aniso",
    "loss_canon_dist",
    "loss_canon_rot",
    "seg_total",
    "app_total",
    "SEG_TERMS",
    "APP_TERMS",
]

KL_FLOOR = 1e-8
SEG_TERMS = ("color", "scale", "normal", "label_smooth")
APP_TERMS = ("color", "mask", "aniso", "normal", "canon_dist", "canon_rot")


@dataclass
class LossWeights:
    color: float = 1.0
    scale: float = 10.0
    normal: float = 0.1
    label_smooth: float = 0.1
    mask: float = 1.0
    aniso: float = 100.0
    canon_dist: float = 1.0
    canon_rot: float = 100.0
    aniso_ratio: float = 4.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {f.name} must be finite and nonnegative, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


def _as(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(like.dtype)
    return torch.as_tensor(np.asarray(x), dtype=like.dtype)


def _mean_or_zero(x: torch.Tensor) -> torch.Tensor:
    return x.mean() if x.numel() else x.sum()


def loss_color(rendered: torch.Tensor, target, mask=None) -> torch.Tensor:
    """Mean absolute error over the pixels selected by ``mask`` (all when None)."""
    target = _as(target, rendered)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    diff = (rendered - target).abs()
    if mask is None:
        return diff.mean()
    mask = torch.as_tensor(mask).bool()
    if mask.shape != rendered.shape[:2]:
        raise ValueError("mask must match the image resolution")
    return _mean_or_zero(diff[mask])


def loss_scale(scales: torch.Tensor, ref_scales) -> torch.Tensor:
    ref = _as(ref_scales, scales)
    return _mean_or_zero((scales - ref).abs().sum(dim=1))


def loss_normal(normal: torch.Tensor, depth_normal: torch.Tensor, valid) -> torch.Tensor:
    """Mean of ``1 - n.n_depth`` over valid pixels; ``normal`` is renormalized first."""
    valid = torch.as_tensor(valid).bool()
    n = normal[valid]
    d = depth_normal[valid]
    norm = n.norm(dim=-1, keepdim=True)
    n = n / torch.where(norm > 0, norm, torch.ones_like(norm))
    return _mean_or_zero(1.0 - (n * d).sum(-1))


@dataclass
class GaussianNeighbors:
    """Directed (i, j) neighbor pairs with per-pair weight 1/|N(i)|."""

    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    count: int


def gaussian_neighbors(face_id, adjacency: FaceAdjacency) -> GaussianNeighbors:
    """Neighbors of each Gaussian: all Gaussians bound to edge-adjacent faces."""
    face_id = np.asarray(face_id, dtype=np.int64)
    order = np.argsort(face_id, kind="stable")
    nf = len(adjacency.neighbors)
    starts = np.searchsorted(face_id[order], np.arange(nf + 1))
    src, dst = [], []
    for f in range(nf):
        mine = order[starts[f] : starts[f + 1]]
        if not len(mine):
            continue
        other = np.concatenate([order[starts[g] : starts[g + 1]] for g in adjacency.neighbors[f]] or [np.zeros(0, np.int64)])
        if not len(other):
            continue
        src.append(np.repeat(mine, len(other)))
        dst.append(np.tile(other, len(mine)))
    src = np.concatenate(src) if src else np.zeros(0, np.int64)
    dst = np.concatenate(dst) if dst else np.zeros(0, np.int64)
    deg = np.bincount(src, minlength=len(face_id))
    weight = 1.0 / np.maximum(deg[src], 1)
    return GaussianNeighbors(src=src, dst=dst, weight=weight, count=len(face_id))


def loss_label_smooth(label_logits: torch.Tensor, neighbors: GaussianNeighbors) -> torch.Tensor:
    """(1/N) sum_i mean_{j in N(i)} KL(p_i || p_j), probabilities floored at 1e-8 inside the log."""
    if neighbors.count != label_logits.shape[0]:
        raise ValueError("neighbor lists were built for a different Gaussian count")
    if len(neighbors.src) == 0:
        return label_logits.sum() * 0.0
    p = torch.softmax(label_logits, dim=-1)
    logp = torch.log(p.clamp_min(KL_FLOOR))
    src = torch.as_tensor(neighbors.src)
    dst = torch.as_tensor(neighbors.dst)
    kl = (p[src] * (logp[src] - logp[dst])).sum(-1)
    w = torch.as_tensor(neighbors.weight, dtype=kl.dtype)
    return (kl * w).sum() / neighbors.count


def loss_mask(rendered: torch.Tensor, target) -> torch.Tensor:
    return loss_color(rendered, target)


def loss_aniso(scales: torch.Tensor, ratio: float = 4.0) -> torch.Tensor:
    """Penalty on splats whose largest/smallest scale ratio exceeds ``ratio``."""
    smax = scales.max(dim=1).values
    smin = scales.min(dim=1).values
    return _mean_or_zero(torch.relu(smax / smin - ratio))


def loss_canon_dist(means: torch.Tensor, centroids) -> torch.Tensor:
    c = _as(centroids, means)
    return _mean_or_zero((means - c).norm(dim=1))


def loss_canon_rot(quats: torch.Tensor, ref_quats) -> torch.Tensor:
    """Mean of ``1 - |<q, q_ref>|``; the absolute value makes q and -q equivalent."""
    r = _as(ref_quats, quats)
    q = quats / quats.norm(dim=1, keepdim=True)
    r = r / r.norm(dim=1, keepdim=True)
    return _mean_or_zero(1.0 - (q * r).sum(1).abs())


def _weighted(terms: dict, weights: LossWeights, names) -> torch.Tensor:
    total = None
    for name in names:
        if name not in terms:
            continue
        part = getattr(weights, name) * terms[name]
        total = part if total is None else total + part
    if total is None:
        raise ValueError("no loss terms given")
    return total


def seg_total(terms: dict, weights: LossWeights) -> torch.Tensor:
    """Segmentation objective: color, scale, normal and label-smoothness terms.

    Missing terms are treated as switched off (e.g. before label smoothing starts).
    """
    return _weighted(terms, weights, SEG_TERMS)


def app_total(terms: dict, weights: LossWeights) -> torch.Tensor:
    """Per-layer appearance objective: color, mask, anisotropy, normal and canonical terms."""
    return _weighted(terms, weights, APP_TERMS)
