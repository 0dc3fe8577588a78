"""Synthetic multi-view scenes with known layered Gaussians and face labels.

Every image is rendered by this package's renderer from a ground-truth
layered avatar, so the supervision is exactly realizable by the model.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import shapes
from .anchor import DEFAULT_CLASSES, ClassTable, GaussianLayer, Splats, duplicate_layer, reference_from_mesh
from .geometry import SkinnedMesh, build_adjacency
from .labels import FaceLabeling, default_threshold
from .layering import LayeredAvatar, animate
from .render import Camera, render, render_layer_mask

__all__ = [
    "BandSpec",
    "SpeckleSpec",
    "ViewRing",
    "SceneSpec",
    "View",
    "SceneData",
    "build_body",
    "view_ring",
    "band_labels",
    "generate_scene",
    "write_scene",
    "load_scene",
    "load_views",
    "label_color_image",
]


@dataclass
class BandSpec:
    """A garment covering faces whose centroid height lies in ``z_range``."""

    name: str
    z_range: tuple
    color: tuple = (0.8, 0.1, 0.1)
    offset: float = 0.005
    order_rank: Optional[int] = None
    texture: str = "flat"  # flat | stripes
    stripe_color: tuple = (0.1, 0.1, 0.8)
    stripes: int = 6


@dataclass
class SpeckleSpec:
    """Label noise: consistent patches of a wrong class, plus per-view 2D blobs."""

    patches: int = 0
    patch_rings: int = 3  # patch = a face and its edge-neighbor rings
    patch_class: str = "outer"
    blobs_per_view: int = 0
    blob_radius: float = 3.0
    blob_class: str = "outer"


@dataclass
class ViewRing:
    count: int = 8
    radius: float = 3.0
    elevation_deg: float = 0.0
    resolution: int = 256
    focal_factor: float = 1.2  # focal length in units of the image width
    target_z: float = 0.0


@dataclass
class SceneSpec:
    body: str = "capsule"
    bands: list = field(default_factory=list)
    views: ViewRing = field(default_factory=ViewRing)
    speckle: SpeckleSpec = field(default_factory=SpeckleSpec)
    skin_color: tuple = (0.8, 0.6, 0.5)
    skin_offset: float = 0.002
    gaussians_per_face: int = 4
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    body_options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bands = [b if isinstance(b, BandSpec) else BandSpec(**b) for b in self.bands]
        if isinstance(self.views, dict):
            self.views = ViewRing(**self.views)
        if isinstance(self.speckle, dict):
            self.speckle = SpeckleSpec(**self.speckle)
        if self.views.count < 1:
            raise ValueError("a scene needs at least one view")
        self.skin_color, self.background = tuple(self.skin_color), tuple(self.background)
        for b in self.bands:
            b.z_range, b.color, b.stripe_color = tuple(b.z_range), tuple(b.color), tuple(b.stripe_color)
            if b.offset <= 0:
                raise ValueError(f"band {b.name} needs a positive offset")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "SceneSpec":
        return cls(**d)

    @classmethod
    def capsule_two_bands(cls, **kw) -> "SceneSpec":
        bands = [
            BandSpec("upper", (0.0, 0.42), color=(0.85, 0.15, 0.15), offset=0.006),
            BandSpec("lower", (-0.42, 0.0), color=(0.15, 0.2, 0.8), offset=0.004),
        ]
        kw.setdefault("body_options", {"body_rings": 24})
        return cls(bands=bands, **kw)


@dataclass
class View:
    cam: Camera
    rgb: np.ndarray  # (H, W, 3)
    labels: np.ndarray  # (H, W) class id, -1 background
    masks: dict  # layer name -> (H, W) in [0, 1]
    depth: Optional[np.ndarray] = None


@dataclass
class SceneData:
    spec: SceneSpec
    mesh: SkinnedMesh
    classes: ClassTable
    views: list
    gt_labels: FaceLabeling
    gt_avatar: LayeredAvatar
    supervision_labels: np.ndarray  # per-face labels including consistent speckles


def build_body(name: str, **options) -> SkinnedMesh:
    builders = {
        "capsule": shapes.capsule,
        "cylinder": shapes.cylinder,
        "icosphere-person": shapes.ellipsoid_person,
    }
    if name not in builders:
        raise ValueError(f"unknown body preset {name!r}; choose from {sorted(builders)}")
    return builders[name](**options)


def view_ring(ring: ViewRing) -> list:
    elev = np.deg2rad(ring.elevation_deg)
    target = np.array([0.0, 0.0, ring.target_z])
    cams = []
    for k in range(ring.count):
        az = 2 * np.pi * k / ring.count
        eye = target + ring.radius * np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)])
        f = ring.focal_factor * ring.resolution
        cams.append(Camera.look_at(eye, target, up=(0, 0, 1), fx=f, width=ring.resolution, height=ring.resolution))
    return cams


def band_labels(mesh: SkinnedMesh, bands, classes: ClassTable) -> tuple:
    """Per-face class ids (outermost band wins) and the band membership of every face."""
    z = mesh.centroids()[:, 2]
    members = {}
    for b in bands:
        classes.index(b.name)
        members[b.name] = np.flatnonzero((z >= b.z_range[0]) & (z < b.z_range[1]))
    names = [b.name for b in bands]
    for i, a in enumerate(bands):
        for c in bands[i + 1 :]:
            if np.intersect1d(members[a.name], members[c.name]).size and (a.order_rank is None or c.order_rank is None):
                raise ValueError(f"bands {a.name} and {c.name} overlap without an explicit order")
    labels = np.zeros(mesh.num_faces, dtype=np.int64)
    ranked = sorted(bands, key=lambda b: (b.order_rank if b.order_rank is not None else names.index(b.name)))
    for b in ranked:
        labels[members[b.name]] = classes.index(b.name)
    return labels, members


def _band_colors(mesh, layer: GaussianLayer, band: BandSpec) -> np.ndarray:
    if band.texture == "flat":
        return np.tile(np.asarray(band.color, dtype=np.float64), (len(layer), 1))
    if band.texture != "stripes":
        raise ValueError(f"unknown texture {band.texture!r}")
    tri = mesh.vertices[mesh.faces[layer.face_id]]
    p = np.einsum("nk,nkd->nd", layer.bary, tri)
    theta = np.arctan2(p[:, 1], p[:, 0])
    on = np.sin(band.stripes * theta) > 0
    return np.where(on[:, None], np.asarray(band.color), np.asarray(band.stripe_color))


def _gt_layer(mesh, refs, faces, name, rank, offset, count, rng, classes, color_fn) -> GaussianLayer:
    n = len(faces)
    base = GaussianLayer(
        name=name,
        face_id=faces,
        bary_logits=np.zeros((n, 3)),
        log_offset=np.full(n, np.log(offset)),
        rel_rotation=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        scale=refs.scale[faces],
        opacity=np.ones(n),
        color=np.zeros((n, 3)),
        label_logits=np.zeros((n, len(classes))),
        order_rank=rank,
    )
    layer = duplicate_layer(base, count, rng, refs=refs)
    layer.color = color_fn(layer)
    return layer


def _patches(adj, candidates, count, rng, rings=1):
    """Small face patches (a face and ``rings`` edge-neighbor rings) inside ``candidates``."""
    chosen = []
    pool = np.array(sorted(candidates))
    if not len(pool):
        return chosen
    taken = set()
    for f in rng.permutation(pool):
        patch = [int(f)]
        for _ in range(rings):
            patch += [int(g) for h in patch for g in adj.neighbors[h] if g in candidates and g not in patch]
            patch = list(dict.fromkeys(patch))
        ring = set(patch)
        for g in patch:
            ring.update(int(h) for h in adj.neighbors[g])
        if ring & taken:
            continue
        chosen.append(np.array(patch))
        taken.update(ring)
        if len(chosen) == count:
            break
    return chosen


def label_color_image(labels, classes: ClassTable, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    table = np.vstack([classes.color_array(), np.asarray(background, dtype=np.float64)[None]])
    return table[np.asarray(labels)]  # -1 picks the background row


def generate_scene(spec: SceneSpec, classes: ClassTable = DEFAULT_CLASSES) -> SceneData:
    rng = np.random.default_rng(spec.seed)
    mesh = build_body(spec.body, **spec.body_options)
    refs = reference_from_mesh(mesh, skin_color=spec.skin_color)
    adj = build_adjacency(mesh)
    labels, members = band_labels(mesh, spec.bands, classes)
    tau = default_threshold(adj.face_areas)

    garment = np.zeros(mesh.num_faces, dtype=bool)
    for b in spec.bands:
        garment[members[b.name]] = True
    skin_faces = np.flatnonzero(~garment)
    layers = []
    ranks = sorted(spec.bands, key=lambda b: (b.order_rank if b.order_rank is not None else 0))
    skin_rank_offset = 1 if len(skin_faces) else 0
    if len(skin_faces):
        layers.append(
            _gt_layer(mesh, refs, skin_faces, "skin", 0, spec.skin_offset, spec.gaussians_per_face, rng, classes,
                      lambda l: np.tile(np.asarray(spec.skin_color, dtype=np.float64), (len(l), 1)))
        )
    for r, b in enumerate(ranks):
        layers.append(
            _gt_layer(mesh, refs, members[b.name], b.name, r + skin_rank_offset, b.offset, spec.gaussians_per_face, rng,
                      classes, lambda l, b=b: _band_colors(mesh, l, b))
        )
    gt_labeling = FaceLabeling(labels, tau)
    avatar = LayeredAvatar(
        anchor_mesh=mesh,
        layers=layers,
        body_refs=refs,
        face_labels=gt_labeling,
        classes=classes,
        body_ref_faces=skin_faces,
        skin_color=tuple(spec.skin_color),
    )

    # supervision labels: ground truth plus consistent wrong-class patches
    sup = labels.copy()
    sp = spec.speckle
    if sp.patches:
        cid = classes.index(sp.patch_class)
        cand = set(np.flatnonzero(garment & (labels != cid)).tolist())
        for patch in _patches(adj, cand, sp.patches, rng, sp.patch_rings):
            sup[patch] = cid

    splats = animate(avatar)
    order = [l.name for l in avatar.ordered() if l.name in splats] + (["body"] if "body" in splats else [])
    parts = [splats[k] for k in order]
    full = Splats.cat(parts)
    face_of = np.concatenate(
        [avatar.layer(k).face_id if k != "body" else avatar.body_ref_faces for k in order]
    )
    onehot = np.zeros((len(face_of), len(classes)))
    onehot[np.arange(len(face_of)), sup[face_of]] = 1.0

    views = []
    for cam in view_ring(spec.views):
        with torch.no_grad():
            out = render(full, cam, background=spec.background)
            lab = render(full.with_features(onehot), cam)
            masks = {}
            for i, k in enumerate(order):
                if k != "body":
                    masks[k] = render_layer_mask(parts, i, cam).numpy()
        alpha = out.alpha.numpy()
        lab_img = np.argmax(lab.color.numpy(), axis=2)
        lab_img = np.where(alpha >= 0.5, lab_img, -1)
        if sp.blobs_per_view:
            lab_img = _blobs(lab_img, sp, classes, rng)
        views.append(View(cam=cam, rgb=out.color.numpy(), labels=lab_img, masks=masks, depth=out.depth.numpy()))
    return SceneData(spec, mesh, classes, views, gt_labeling, avatar, sup)


def _blobs(lab, sp: SpeckleSpec, classes, rng) -> np.ndarray:
    out = lab.copy()
    fg = np.argwhere(lab >= 0)
    if not len(fg):
        return out
    cid = classes.index(sp.blob_class)
    h, w = lab.shape
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(sp.blobs_per_view):
        cy, cx = fg[rng.integers(len(fg))]
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= sp.blob_radius ** 2
        out[disk & (lab >= 0)] = cid
    return out


def write_scene(data: SceneData, directory) -> Path:
    from . import io

    d = Path(directory)
    (d / "views").mkdir(parents=True, exist_ok=True)
    (d / "scene.json").write_text(json.dumps({"spec": data.spec.to_dict(), "classes": data.classes.to_dict()}, indent=1))
    io.save_mesh(data.mesh, d / "anchor")
    io.save_labeling(d / "gt_labels.txt", data.gt_labels, data.classes)
    io.save_avatar(d / "gt_avatar", data.gt_avatar)
    for i, v in enumerate(data.views):
        io.write_camera(d / "views" / f"cam_{i:03d}.txt", v.cam)
        io.save_rgb(d / "views" / f"rgb_{i:03d}.png", v.rgb)
        io.save_label_image(d / "views" / f"label_{i:03d}.png", v.labels)
        for name, m in v.masks.items():
            io.save_mask(d / "views" / f"mask_{name}_{i:03d}.png", m)
        if v.depth is not None:
            io.save_depth(d / "views" / f"depth_{i:03d}.png", v.depth)
    return d


def load_views(directory, classes: Optional[ClassTable] = None) -> list:
    """Cameras and images from a ``views`` directory written by ``write_scene``."""
    from . import io

    d = Path(directory)
    views = []
    for cam_path in sorted(d.glob("cam_*.txt")):
        i = cam_path.stem.split("_")[1]
        masks = {}
        for m in sorted(d.glob(f"mask_*_{i}.png")):
            masks[m.stem[len("mask_") : -len(i) - 1]] = io.load_mask(m)
        depth_path = d / f"depth_{i}.png"
        views.append(
            View(
                cam=io.read_camera(cam_path),
                rgb=io.load_rgb(d / f"rgb_{i}.png"),
                labels=io.load_label_image(d / f"label_{i}.png"),
                masks=masks,
                depth=io.load_depth(depth_path) if depth_path.exists() else None,
            )
        )
    if not views:
        raise FileNotFoundError(f"no views found in {d}")
    return views


def load_scene(directory) -> SceneData:
    from . import io

    d = Path(directory)
    doc = json.loads((d / "scene.json").read_text())
    spec = SceneSpec.from_dict(doc["spec"])
    classes = ClassTable.from_dict(doc["classes"])
    mesh = io.load_mesh(d / "anchor.obj", d / "anchor.skin", d / "anchor.joints")
    gt, _ = io.load_labeling(d / "gt_labels.txt")
    avatar = io.load_avatar(d / "gt_avatar")
    return SceneData(spec, mesh, classes, load_views(d / "views", classes), gt, avatar, gt.labels.copy())
