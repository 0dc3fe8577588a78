"""Garment mesh extraction and evaluation metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .anchor import realize_means
from .geometry import SkinnedMesh, compute_vertex_normals
from .layering import LayeredAvatar, resolve_stacking

__all__ = [
    "GarmentMesh",
    "MetricsReport",
    "Penetration",
    "extract_mesh",
    "laplacian_smooth",
    "chamfer",
    "penetration",
    "seg_scores",
    "psnr",
    "PSNR_CAP",
]

PSNR_CAP = 100.0


@dataclass
class GarmentMesh:
    vertices: np.ndarray
    faces: np.ndarray
    provenance: np.ndarray  # anchor vertex id of every garment vertex
    anchor_faces: np.ndarray  # anchor face id of every garment face

    def vertex_normals(self) -> np.ndarray:
        return compute_vertex_normals(self.vertices, self.faces)


def laplacian_smooth(vertices, faces, iterations: int = 3, lam: float = 0.5) -> np.ndarray:
    """Uniform umbrella smoothing: ``v += lam * (mean(neighbors) - v)``."""
    v = np.array(vertices, dtype=np.float64)
    if iterations <= 0:
        return v
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    i = np.concatenate([e[:, 0], e[:, 1]])
    j = np.concatenate([e[:, 1], e[:, 0]])
    deg = np.bincount(i, minlength=len(v)).astype(np.float64)
    for _ in range(iterations):
        acc = np.zeros_like(v)
        np.add.at(acc, i, v[j])
        has = deg > 0
        v[has] += lam * (acc[has] / deg[has, None] - v[has])
    return v


def extract_mesh(avatar: LayeredAvatar, layer_name: str, smoothing_iterations: int = 3, lam: float = 0.5, mesh: Optional[SkinnedMesh] = None) -> GarmentMesh:
    """Garment surface reusing the anchor connectivity on the faces labeled with the layer's class.

    Each garment vertex is the average realized mean of the layer's Gaussians
    bound to its incident garment faces. A vertex without such Gaussians sits
    on the anchor vertex lifted along its normal by the average offset of the
    layer's Gaussians on its one-ring faces (or of the whole layer).
    """
    mesh = avatar.anchor_mesh if mesh is None else mesh
    layer = avatar.layer(layer_name)
    if len(layer) == 0:
        raise ValueError(f"layer {layer_name!r} is empty")
    cid = avatar.classes.index(layer_name)
    gfaces = np.flatnonzero(avatar.face_labels.labels == cid)
    if len(gfaces) == 0:
        raise ValueError(f"no anchor faces are labeled {layer_name!r}")

    extra = resolve_stacking(avatar)[layer_name]
    eff = layer.offset + extra
    mu = realize_means(layer.face_id, layer.bary, eff, mesh)

    nf, nv = mesh.num_faces, len(mesh.vertices)
    face_sum = np.zeros((nf, 3))
    face_cnt = np.zeros(nf)
    face_off = np.zeros(nf)
    np.add.at(face_sum, layer.face_id, mu)
    np.add.at(face_cnt, layer.face_id, 1.0)
    np.add.at(face_off, layer.face_id, eff)

    tri = mesh.faces[gfaces]
    vsum = np.zeros((nv, 3))
    vcnt = np.zeros(nv)
    for k in range(3):
        np.add.at(vsum, tri[:, k], face_sum[gfaces])
        np.add.at(vcnt, tri[:, k], face_cnt[gfaces])

    # fallback offsets: average over Gaussians on any face incident to the vertex
    all_tri = mesh.faces
    osum = np.zeros(nv)
    ocnt = np.zeros(nv)
    for k in range(3):
        np.add.at(osum, all_tri[:, k], face_off)
        np.add.at(ocnt, all_tri[:, k], face_cnt)
    ring = np.where(ocnt > 0, osum / np.maximum(ocnt, 1), eff.mean())

    used = np.unique(tri)
    pos = np.where(
        (vcnt[used] > 0)[:, None],
        vsum[used] / np.maximum(vcnt[used], 1)[:, None],
        mesh.vertices[used] + ring[used, None] * mesh.vertex_normals[used],
    )
    remap = np.full(nv, -1)
    remap[used] = np.arange(len(used))
    faces = remap[tri]
    pos = laplacian_smooth(pos, faces, smoothing_iterations, lam)
    return GarmentMesh(vertices=pos, faces=faces, provenance=used, anchor_faces=gfaces)


def chamfer(a, b) -> float:
    """Mean nearest distance a->b plus b->a, points in meters, result in millimeters."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return 1000.0 * (dab.mean() + dba.mean())


@dataclass
class Penetration:
    rate_percent: float
    depth_mm: float
    count: int
    total: int
    signed: np.ndarray = field(repr=False)


def penetration(points, body: SkinnedMesh, mode: str = "nearest", chunk: int = 4096) -> Penetration:
    """Signed offset of each point from the body along a body vertex normal.

    ``nearest``: projection onto the normal of the nearest body vertex.
    ``literal``: minimum of that projection over every body vertex.
    A point penetrates when its value is negative; depth averages the
    magnitudes of penetrating points and is 0 when none penetrate.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    v, n = body.vertices, body.vertex_normals
    if mode == "nearest":
        _, k = cKDTree(v).query(pts)
        d = np.einsum("ij,ij->i", pts - v[k], n[k])
    elif mode == "literal":
        vn = np.einsum("ij,ij->i", v, n)
        d = np.empty(len(pts))
        for s in range(0, len(pts), chunk):
            d[s : s + chunk] = (pts[s : s + chunk] @ n.T - vn[None, :]).min(axis=1)
    else:
        raise ValueError(f"unknown penetration mode {mode!r}")
    neg = d < 0
    count = int(neg.sum())
    total = len(pts)
    rate = 100.0 * count / total if total else 0.0
    depth = 1000.0 * float(-d[neg].mean()) if count else 0.0
    return Penetration(rate_percent=rate, depth_mm=depth, count=count, total=total, signed=d)


def seg_scores(predicted, target, num_classes: Optional[int] = None):
    """Macro accuracy, IoU and F1 over the classes present in ``target``.

    Inputs are integer label images (any shape, or lists of images); every
    distinct id, background included, is a class.
    """
    p = np.concatenate([np.asarray(x).ravel() for x in (predicted if isinstance(predicted, (list, tuple)) else [predicted])])
    t = np.concatenate([np.asarray(x).ravel() for x in (target if isinstance(target, (list, tuple)) else [target])])
    if p.shape != t.shape:
        raise ValueError("predicted and target masks differ in size")
    accs, ious, f1s = [], [], []
    for c in np.unique(t):
        tp = np.sum((p == c) & (t == c))
        fp = np.sum((p == c) & (t != c))
        fn = np.sum((p != c) & (t == c))
        accs.append(tp / (tp + fn))
        ious.append(tp / (tp + fp + fn))
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(accs)), float(np.mean(ious)), float(np.mean(f1s))


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give ``cap``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images differ in shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


@dataclass
class MetricsReport:
    chamfer_mm: float = float("nan")
    pen_rate_percent: float = float("nan")
    pen_depth_mm: float = float("nan")
    pen_count: int = 0
    macc: float = float("nan")
    miou: float = float("nan")
    mf1: float = float("nan")
    psnr: float = float("nan")
    pen_mode: str = "nearest"

    def __post_init__(self):
        if not np.isnan(self.pen_rate_percent) and not 0 <= self.pen_rate_percent <= 100:
            raise ValueError("penetration rate must lie in [0, 100]")
        if not np.isnan(self.miou) and not 0 <= self.miou <= 1:
            raise ValueError("mIoU must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def table_row(self) -> str:
        return (
            f"CD (mm) {self.chamfer_mm:.2f} | Rate (%) {self.pen_rate_percent:.3f} | Depth (mm) {self.pen_depth_mm:.3f}"
            f" | mAcc {self.macc:.4f} | mIoU {self.miou:.4f} | mF1 {self.mf1:.4f} | PSNR {self.psnr:.2f}"
        )
