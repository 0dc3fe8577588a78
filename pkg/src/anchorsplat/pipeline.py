"""End-to-end stages shared by the command line and the demos."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .anchor import ClassTable, GaussianLayer, Splats, init_seg_layer, reference_from_mesh
from .config import RunConfig
from .geometry import SkinnedMesh, build_adjacency
from .labels import FaceLabeling, default_threshold, project_labels_to_faces, project_labels_to_gaussians, refine, split_layers
from .layering import LayeredAvatar, animate
from .metrics import MetricsReport, chamfer, extract_mesh, penetration, psnr, seg_scores
from .optim import FitLog, assemble_avatar, fit_joint_refine, fit_stage1, fit_stage3_layer
from .render import Camera, render

log = logging.getLogger(__name__)

__all__ = [
    "StageLogs",
    "lift",
    "area_threshold",
    "refine_labels",
    "fit_layers",
    "run_pipeline",
    "avatar_splats",
    "render_avatar",
    "render_avatar_labels",
    "evaluate",
]


@dataclass
class StageLogs:
    stage1: FitLog = field(default_factory=FitLog)
    stage3: dict = field(default_factory=dict)
    joint: FitLog = field(default_factory=FitLog)


def area_threshold(mesh: SkinnedMesh, cfg: RunConfig) -> float:
    if cfg["area_threshold"] is not None:
        return float(cfg["area_threshold"])
    return default_threshold(build_adjacency(mesh).face_areas, cfg["area_fraction"])


def lift(mesh: SkinnedMesh, views, cfg: RunConfig, fit_log: Optional[FitLog] = None, checkpoint_dir=None) -> GaussianLayer:
    """Stage 1: segmentation layer fitted to the views' label images."""
    classes = cfg.classes
    refs = reference_from_mesh(mesh, skin_color=cfg["skin_color"])
    seg = init_seg_layer(mesh, refs, len(classes), skin_class=0, init_offset=cfg["init_offset"])
    return fit_stage1(seg, refs, mesh, views, cfg.weights, cfg.schedule("stage1"), classes,
                      fit_log=fit_log, checkpoint_dir=checkpoint_dir)


def refine_labels(seg: GaussianLayer, mesh: SkinnedMesh, cfg: RunConfig, enabled: bool = True):
    """Face labels from the fitted layer, before and after component cleanup."""
    raw = project_labels_to_faces(seg, mesh.num_faces, area_threshold(mesh, cfg))
    return raw, (refine(raw, build_adjacency(mesh)) if enabled else raw)


def fit_layers(
    seg: GaussianLayer, labeling: FaceLabeling, mesh: SkinnedMesh, views, cfg: RunConfig,
    logs: Optional[StageLogs] = None, checkpoint_dir=None, joint: bool = True,
) -> LayeredAvatar:
    """Stage 3: split by face label, fit each layer, assemble, then refine means jointly."""
    classes = cfg.classes
    logs = logs or StageLogs()
    refs = reference_from_mesh(mesh, skin_color=cfg["skin_color"])
    labeled = project_labels_to_gaussians(labeling, seg)
    fitted = []
    for i, layer in enumerate(split_layers(labeled, labeling, classes)):
        flog = logs.stage3.setdefault(layer.name, FitLog())
        log.info("stage 3: fitting layer %s (%d faces)", layer.name, len(layer))
        fitted.append(
            fit_stage3_layer(layer, refs, mesh, views, cfg.weights, cfg.schedule("stage3", seed_offset=1 + i),
                             classes, duplication=cfg["duplication"], fit_log=flog, checkpoint_dir=checkpoint_dir)
        )
    avatar = assemble_avatar(mesh, refs, fitted, labeling, classes, skin_color=cfg["skin_color"], dilation=cfg["dilation"])
    if joint:
        avatar = fit_joint_refine(avatar, views, cfg.weights, cfg.schedule("joint", seed_offset=100), fit_log=logs.joint)
    return avatar


def run_pipeline(mesh: SkinnedMesh, views, cfg: RunConfig, logs: Optional[StageLogs] = None, refine_enabled: bool = True):
    """Lift, refine labels, fit layers. Returns ``(seg, raw labels, refined labels, avatar)``."""
    logs = logs or StageLogs()
    seg = lift(mesh, views, cfg, logs.stage1)
    raw, refined = refine_labels(seg, mesh, cfg, refine_enabled)
    avatar = fit_layers(seg, refined, mesh, views, cfg, logs)
    return seg, raw, refined, avatar


def avatar_splats(avatar: LayeredAvatar, pose=None, features: str = "color") -> Splats:
    """All splats of an avatar, layers then visible reference Gaussians.

    ``features="labels"`` replaces colors by one-hot class vectors (reference
    Gaussians count as the first class).
    """
    parts = animate(avatar, pose)
    names = [l.name for l in avatar.ordered() if l.name in parts] + (["body"] if "body" in parts else [])
    sp = Splats.cat([parts[k] for k in names])
    if features == "labels":
        k = len(avatar.classes)
        ids = np.concatenate([np.full(len(parts[n]), avatar.classes.index(n) if n != "body" else 0) for n in names])
        sp = sp.with_features(np.eye(k)[ids])
    return sp


def render_avatar(avatar: LayeredAvatar, cams: Sequence[Camera], pose=None, background=(0.0, 0.0, 0.0)) -> list:
    sp = avatar_splats(avatar, pose)
    with torch.no_grad():
        return [render(sp, cam, background=background).color.numpy() for cam in cams]


def render_avatar_labels(avatar: LayeredAvatar, cams: Sequence[Camera], alpha_min: float = 0.5) -> list:
    """Label images: argmax of composited one-hot classes, -1 where alpha is below ``alpha_min``."""
    sp = avatar_splats(avatar, features="labels")
    out = []
    with torch.no_grad():
        for cam in cams:
            r = render(sp, cam)
            lab = np.argmax(r.color.numpy(), axis=2)
            out.append(np.where(r.alpha.numpy() >= alpha_min, lab, -1))
    return out


def evaluate(
    avatar: LayeredAvatar,
    views,
    gt_avatar: Optional[LayeredAvatar] = None,
    mode: str = "nearest",
    smoothing_iterations: int = 3,
) -> MetricsReport:
    """Chamfer and penetration of extracted garment meshes, segmentation scores and PSNR.

    Chamfer compares each garment present in both avatars (mean over
    garments); penetration pools every garment mesh against the anchor mesh.
    """
    classes = avatar.classes
    garments = [l.name for l in avatar.layers if len(l) and classes.garment[classes.index(l.name)]]
    meshes = {}
    for g in garments:
        try:
            meshes[g] = extract_mesh(avatar, g, smoothing_iterations)
        except ValueError as e:
            log.warning("skipping %s: %s", g, e)
    rep = MetricsReport(pen_mode=mode)
    if meshes:
        pts = np.concatenate([m.vertices for m in meshes.values()])
        pen = penetration(pts, avatar.anchor_mesh, mode=mode)
        rep.pen_rate_percent, rep.pen_depth_mm, rep.pen_count = pen.rate_percent, pen.depth_mm, pen.count
    if gt_avatar is not None:
        cds = []
        for g, m in meshes.items():
            if g in [l.name for l in gt_avatar.layers]:
                try:
                    ref = extract_mesh(gt_avatar, g, smoothing_iterations)
                except ValueError:
                    continue
                cds.append(chamfer(m.vertices, ref.vertices))
        if cds:
            rep.chamfer_mm = float(np.mean(cds))
    cams = [v.cam for v in views]
    pred_labels = render_avatar_labels(avatar, cams)
    rep.macc, rep.miou, rep.mf1 = seg_scores(pred_labels, [v.labels for v in views])
    rgbs = render_avatar(avatar, cams)
    rep.psnr = float(np.mean([psnr(np.clip(r, 0, 1), v.rgb) for r, v in zip(rgbs, views)]))
    return rep
