"""Multi-view fitting: segmentation lifting, per-layer appearance, joint mean refinement.

All fits use Adam with one step size per parameter group, decayed
exponentially to ``final_lr_fraction`` of the initial value, run on CPU in
float64 and are deterministic for a fixed ``rng_seed``.  Render plans (the
per-view list of contributing splat/pixel pairs and their depth order) are
cached and rebuilt every ``replan_every`` iterations; between rebuilds the
pair set is fixed while all values stay differentiable.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .anchor import DEFAULT_CLASSES, ClassTable, GaussianLayer, ReferenceGaussians, Splats, duplicate_layer, reference_splats
from .geometry import FaceAdjacency, SkinnedMesh, build_adjacency
from .labels import FaceLabeling
from .layering import LayeredAvatar, stacking_offsets
from .losses import (
    LossWeights,
    app_total,
    gaussian_neighbors,
    loss_aniso,
    loss_canon_dist,
    loss_canon_rot,
    loss_color,
    loss_label_smooth,
    loss_mask,
    loss_normal,
    loss_scale,
    seg_total,
)
from .params import FreeLayer, MeshTensors
from .render import Camera, label_features, render
from .synth import label_color_image

log = logging.getLogger(__name__)

__all__ = [
    "FitSchedule",
    "FitLog",
    "FitDivergence",
    "DEFAULT_LEARNING_RATES",
    "fit_stage1",
    "fit_stage3_layer",
    "fit_joint_refine",
    "compose_body",
    "assemble_avatar",
    "refine_transferred",
    "layer_mask",
    "masked_mean_color",
    "masked_l1",
    "standalone_targets",
]

DEFAULT_LEARNING_RATES = {
    "bary_logits": 0.05,
    "log_offset": 0.01,
    "rel_rotation": 0.01,
    "log_scale": 0.01,
    "color": 0.0025,
    "label_logits": 0.1,
}


@dataclass
class FitSchedule:
    iterations: int
    learning_rates: dict = field(default_factory=lambda: dict(DEFAULT_LEARNING_RATES))
    smooth_loss_start: Optional[int] = None  # None: halfway
    views_per_step: int = 1
    rng_seed: int = 0
    replan_every: int = 40
    checkpoint_every: int = 0
    final_lr_fraction: float = 0.1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iteration count must be nonnegative")
        if self.smooth_loss_start is None:
            self.smooth_loss_start = self.iterations // 2
        if not 0 <= self.smooth_loss_start <= self.iterations:
            raise ValueError("smooth_loss_start must lie in [0, iterations]")
        if self.views_per_step < 1 or self.replan_every < 1:
            raise ValueError("views_per_step and replan_every must be positive")
        if not 0 < self.final_lr_fraction <= 1:
            raise ValueError("final_lr_fraction must lie in (0, 1]")
        lrs = dict(DEFAULT_LEARNING_RATES)
        lrs.update(self.learning_rates)
        for k, v in lrs.items():
            if not v >= 0:
                raise ValueError(f"learning rate for {k} must be nonnegative")
        self.learning_rates = lrs

    @classmethod
    def stage1(cls, **kw) -> "FitSchedule":
        kw.setdefault("iterations", 1500)
        return cls(**kw)

    @classmethod
    def stage3(cls, **kw) -> "FitSchedule":
        kw.setdefault("iterations", 500)
        return cls(**kw)

    @classmethod
    def joint(cls, **kw) -> "FitSchedule":
        kw.setdefault("iterations", 500)
        return cls(**kw)


def _adam(params, schedule: FitSchedule):
    opt = torch.optim.Adam(params)
    n = max(schedule.iterations, 1)
    decay = torch.optim.lr_scheduler.LambdaLR(opt, lambda it: schedule.final_lr_fraction ** (it / n))
    return opt, decay


class FitDivergence(RuntimeError):
    """Non-finite loss; carries the iteration, view index and term values."""

    def __init__(self, stage, iteration, view, terms, dump=None):
        self.stage, self.iteration, self.view, self.terms, self.dump = stage, iteration, view, terms, dump
        msg = f"{stage}: non-finite loss at iteration {iteration} on view {view}: {terms}"
        if dump is not None:
            msg += f" (dump written to {dump})"
        super().__init__(msg)


@dataclass
class FitLog:
    """One row per iteration: loss terms and weighted total."""

    rows: list = field(default_factory=list)

    def append(self, iteration: int, terms: dict, total: float):
        row = {"iteration": iteration}
        row.update({k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()})
        row["total"] = float(total)
        self.rows.append(row)

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.rows])

    def smoothed(self, window: int = 50) -> np.ndarray:
        """Exponential moving average with span ``window``."""
        x = self.totals()
        if not len(x):
            return x
        a = 2.0 / (window + 1)
        out = np.empty_like(x)
        out[0] = x[0]
        for i in range(1, len(x)):
            out[i] = a * x[i] + (1 - a) * out[i - 1]
        return out

    def write_csv(self, path) -> None:
        keys = ["iteration"]
        for r in self.rows:
            keys += [k for k in r if k not in keys]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, restval="")
            w.writeheader()
            w.writerows(self.rows)


class _ViewCycler:
    """Shuffled passes over the views, ``per_step`` at a time."""

    def __init__(self, count: int, per_step: int, rng: np.random.Generator):
        self.count, self.per_step, self.rng = count, min(per_step, count), rng
        self.queue: list = []

    def next(self) -> list:
        out = []
        while len(out) < self.per_step:
            if not self.queue:
                self.queue = self.rng.permutation(self.count).tolist()
            v = self.queue.pop(0)
            if v not in out:
                out.append(v)
        return out


class _PlanCache:
    def __init__(self, every: int):
        self.every = every
        self.plans: dict = {}

    def get(self, view: int, iteration: int):
        hit = self.plans.get(view)
        if hit is None or iteration - hit[1] >= self.every:
            return None
        return hit[0]

    def put(self, view: int, iteration: int, plan):
        if view not in self.plans or self.plans[view][0] is not plan:
            self.plans[view] = (plan, iteration)


def _as_tensor(x):
    return torch.tensor(np.array(x, dtype=np.float64))


def _cams(views) -> list:
    return [v if isinstance(v, Camera) else v.cam for v in views]


def _check_finite(stage, it, view, terms, total, dump_dir, dump_fn):
    if torch.isfinite(total):
        return
    vals = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}
    dump = None
    if dump_dir is not None:
        dump = Path(dump_dir) / f"{stage}_diverged_iter{it:06d}_view{view:03d}.npz"
        dump.parent.mkdir(parents=True, exist_ok=True)
        np.savez(dump, **dump_fn())
    raise FitDivergence(stage, it, view, vals, dump)


def _checkpoint(dir_, stage, it, layer, mesh, classes):
    from . import io

    d = Path(dir_)
    d.mkdir(parents=True, exist_ok=True)
    io.save_layer(d / f"{stage}_{layer.name}_iter{it:06d}.gsl", layer, mesh.topology_hash(), classes)


def layer_mask(view, name: str, classes: ClassTable) -> np.ndarray:
    """Binary supervision mask of a layer: pixels whose segmentation label is the layer's class."""
    return (np.asarray(view.labels) == classes.index(name)).astype(np.float64)


def masked_mean_color(views, name: str, classes: ClassTable) -> Optional[np.ndarray]:
    total, count = np.zeros(3), 0
    for v in views:
        m = layer_mask(v, name, classes) > 0
        total += np.asarray(v.rgb)[m].sum(0)
        count += int(m.sum())
    return total / count if count else None


def masked_l1(rendered, target, mask) -> float:
    """Mean absolute RGB error over masked pixels (nan when the mask is empty)."""
    m = np.asarray(mask) > 0.5
    if not m.any():
        return float("nan")
    return float(np.abs(np.asarray(rendered)[m] - np.asarray(target)[m]).mean())


# ---------------------------------------------------------------------------
# Stage 1


def fit_stage1(
    seg: GaussianLayer,
    refs: ReferenceGaussians,
    mesh: SkinnedMesh,
    views: Sequence,
    weights: LossWeights,
    schedule: FitSchedule,
    classes: ClassTable = DEFAULT_CLASSES,
    adjacency: Optional[FaceAdjacency] = None,
    fit_log: Optional[FitLog] = None,
    checkpoint_dir=None,
) -> GaussianLayer:
    """Lift 2D label images onto the segmentation layer.

    Each view's label image becomes a class-color image; the layer renders its
    expected class color (softmax-weighted) over the reference Gaussians, whose
    colors are redrawn uniformly in [0, 1] every iteration and receive no
    gradient. Label smoothness joins the objective at
    ``schedule.smooth_loss_start``; setting ``weights.label_smooth = 0`` is the
    ablation without it.
    """
    adjacency = adjacency or build_adjacency(mesh)
    rng = np.random.default_rng(schedule.rng_seed)
    mt = MeshTensors.build(mesh, refs)
    fl = FreeLayer(seg, trainable=("bary_logits", "log_offset", "rel_rotation", "log_scale", "label_logits"))
    neighbors = gaussian_neighbors(seg.face_id, adjacency)
    ref_scale = _as_tensor(refs.scale[seg.face_id])
    targets = [_as_tensor(label_color_image(v.labels, classes)) for v in views]
    cams = _cams(views)
    backdrop = reference_splats(refs)
    opt, decay = _adam(fl.parameters(schedule.learning_rates), schedule)
    cycler = _ViewCycler(len(views), schedule.views_per_step, rng)
    plans = _PlanCache(schedule.replan_every)

    for it in range(schedule.iterations):
        batch = cycler.next()
        bd = backdrop.with_features(rng.random((len(refs), 3)))
        opt.zero_grad()
        splats = fl.splats(mt, features=label_features(fl["label_logits"], classes))
        color = normal = 0.0
        for vi in batch:
            out = render(splats, cams[vi], backdrop=bd, plan=plans.get(vi, it))
            plans.put(vi, it, out.plan)
            color = color + loss_color(out.color, targets[vi])
            normal = normal + loss_normal(out.normal, out.normal_from_depth, out.normal_valid)
        terms = {
            "color": color / len(batch),
            "scale": loss_scale(fl.scales, ref_scale),
            "normal": normal / len(batch),
        }
        if it >= schedule.smooth_loss_start and weights.label_smooth > 0:
            terms["label_smooth"] = loss_label_smooth(fl["label_logits"], neighbors)
        total = seg_total(terms, weights)
        _check_finite("stage1", it, batch[0], terms, total, checkpoint_dir,
                      lambda: {"labels": np.asarray(views[batch[0]].labels), **{k: t.detach().numpy() for k, t in fl.tensors.items()}})
        total.backward()
        opt.step()
        decay.step()
        fl.project_()
        if fit_log is not None:
            fit_log.append(it, terms, total.item())
        if schedule.checkpoint_every and checkpoint_dir is not None and (it + 1) % schedule.checkpoint_every == 0:
            _checkpoint(checkpoint_dir, "stage1", it + 1, fl.to_layer(), mesh, classes)
        if it % 100 == 0:
            log.debug("stage1 it %d total %.5f", it, total.item())
    return fl.to_layer()


# ---------------------------------------------------------------------------
# Stage 3


def _app_terms(fl: FreeLayer, mt: MeshTensors, renders, weights, ref_quats, centroids):
    mu, _, q = fl.realize(mt)
    terms = dict(renders)
    terms["aniso"] = loss_aniso(fl.scales, weights.aniso_ratio)
    terms["canon_dist"] = loss_canon_dist(mu, centroids)
    terms["canon_rot"] = loss_canon_rot(q, ref_quats)
    return terms


def fit_stage3_layer(
    layer: GaussianLayer,
    refs: ReferenceGaussians,
    mesh: SkinnedMesh,
    views: Sequence,
    weights: LossWeights,
    schedule: FitSchedule,
    classes: ClassTable = DEFAULT_CLASSES,
    duplication: int = 4,
    fit_log: Optional[FitLog] = None,
    checkpoint_dir=None,
) -> GaussianLayer:
    """Appearance fit of one layer against its masked RGB images.

    The layer is first duplicated ``duplication`` times per Gaussian with
    small isotropic scales and the masked mean color. Each iteration renders
    the layer over the randomly colored reference Gaussians with an extra
    channel that is 1 on the layer and 0 on the backdrop, giving the color
    and mask predictions from one pass.
    """
    if len(layer) == 0:
        warnings.warn(f"layer {layer.name!r} is empty; nothing to fit", stacklevel=2)
        return layer
    rng = np.random.default_rng(schedule.rng_seed)
    color0 = masked_mean_color(views, layer.name, classes)
    work = duplicate_layer(layer, duplication, rng, refs=refs, color=color0)
    work.opacity = np.ones(len(work))
    mt = MeshTensors.build(mesh, refs)
    fl = FreeLayer(work, trainable=("bary_logits", "log_offset", "rel_rotation", "log_scale", "color"))
    masks = [_as_tensor(layer_mask(v, layer.name, classes)) for v in views]
    rgbs = [_as_tensor(v.rgb) for v in views]
    cams = _cams(views)
    ref_quats = mt.ref_quats[fl.face_id]
    centroids = mt.centroids[fl.face_id]
    backdrop = reference_splats(refs)
    opt, decay = _adam(fl.parameters(schedule.learning_rates), schedule)
    cycler = _ViewCycler(len(views), schedule.views_per_step, rng)
    plans = _PlanCache(schedule.replan_every)
    ones = torch.ones(len(fl), 1, dtype=torch.float64)

    for it in range(schedule.iterations):
        batch = cycler.next()
        bd = backdrop.with_features(np.concatenate([rng.random((len(refs), 3)), np.zeros((len(refs), 1))], 1))
        opt.zero_grad()
        splats = fl.splats(mt, features=torch.cat([fl["color"], ones], 1))
        color = mask = normal = 0.0
        for vi in batch:
            out = render(splats, cams[vi], backdrop=bd, plan=plans.get(vi, it))
            plans.put(vi, it, out.plan)
            color = color + loss_color(out.color[..., :3], rgbs[vi], masks[vi])
            mask = mask + loss_mask(out.color[..., 3], masks[vi])
            normal = normal + loss_normal(out.normal, out.normal_from_depth, out.normal_valid)
        n = len(batch)
        terms = _app_terms(fl, mt, {"color": color / n, "mask": mask / n, "normal": normal / n}, weights, ref_quats, centroids)
        total = app_total(terms, weights)
        _check_finite("stage3", it, batch[0], terms, total, checkpoint_dir,
                      lambda: {"rgb": np.asarray(views[batch[0]].rgb), **{k: t.detach().numpy() for k, t in fl.tensors.items()}})
        total.backward()
        opt.step()
        decay.step()
        fl.project_()
        if fit_log is not None:
            fit_log.append(it, terms, total.item())
        if schedule.checkpoint_every and checkpoint_dir is not None and (it + 1) % schedule.checkpoint_every == 0:
            _checkpoint(checkpoint_dir, "stage3", it + 1, fl.to_layer(), mesh, classes)
    return fl.to_layer()


# ---------------------------------------------------------------------------
# body composition and assembly


def compose_body(layers: Sequence[GaussianLayer], face_labels: FaceLabeling, classes: ClassTable = DEFAULT_CLASSES):
    """Body part of an avatar: the non-garment layers and the reference faces not labeled as garment.

    Returns ``(body_layers, reference_face_ids)``.
    """
    garment = np.asarray(classes.garment, dtype=bool)
    body_layers = [l for l in layers if not garment[classes.index(l.name)]]
    ref_faces = np.flatnonzero(~garment[face_labels.labels])
    return body_layers, ref_faces


def assemble_avatar(
    mesh: SkinnedMesh,
    refs: ReferenceGaussians,
    layers: Sequence[GaussianLayer],
    face_labels: FaceLabeling,
    classes: ClassTable = DEFAULT_CLASSES,
    skin_color=(0.8, 0.6, 0.5),
    dilation: int = 1,
) -> LayeredAvatar:
    """Layered avatar with body layers innermost, then garments in class-id order."""
    body_layers, ref_faces = compose_body(layers, face_labels, classes)
    body_names = {l.name for l in body_layers}
    garments = [l for l in layers if l.name not in body_names]
    ordered = sorted(body_layers, key=lambda l: classes.index(l.name)) + sorted(garments, key=lambda l: classes.index(l.name))
    ranked = [l.copy(order_rank=r) for r, l in enumerate(ordered)]
    return LayeredAvatar(
        anchor_mesh=mesh,
        layers=ranked,
        body_refs=refs,
        face_labels=face_labels,
        classes=classes,
        body_ref_faces=ref_faces,
        skin_color=tuple(skin_color),
        dilation=dilation,
    )


# ---------------------------------------------------------------------------
# mean-only refinement


def _mean_refine(
    stage: str,
    avatar: LayeredAvatar,
    trainable_names: Sequence[str],
    cams: Sequence[Camera],
    color_targets,
    mask_targets,
    color_masks,
    mask_channel_layer: Optional[str],
    weights: LossWeights,
    schedule: FitSchedule,
    fit_log: Optional[FitLog],
    extra_shift: Optional[dict] = None,
) -> LayeredAvatar:
    """Optimize only bary logits and log-offsets of the named layers.

    Everything else (other layers, the visible reference Gaussians) renders
    with its stored colors and no gradient. Stacking offsets are recomputed
    from the current offsets at every iteration and treated as constants.
    ``mask_channel_layer`` selects the layer drawn white in the mask channel
    (None: every layer, i.e. the avatar's foreground).
    """
    mesh = avatar.anchor_mesh
    refs = avatar.body_refs
    mt = MeshTensors.build(mesh, refs)
    rng = np.random.default_rng(schedule.rng_seed)
    ordered = avatar.ordered()
    free = {l.name: FreeLayer(l, trainable=("bary_logits", "log_offset")) for l in ordered if l.name in trainable_names}
    params = [g for fl in free.values() for g in fl.parameters(schedule.learning_rates)]
    if not params:
        return avatar
    opt, decay = _adam(params, schedule)
    body = None
    if len(avatar.body_ref_faces):
        f = avatar.body_ref_faces
        body_white = 1.0 if mask_channel_layer is None else 0.0
        body = Splats.from_numpy(refs.center[f], refs.orientation[f], refs.scale[f], refs.opacity[f],
                                 np.concatenate([refs.color[f], np.full((len(f), 1), body_white)], 1))
    cycler = _ViewCycler(len(cams), schedule.views_per_step, rng)
    plans = _PlanCache(schedule.replan_every)
    nf = mesh.num_faces
    adj = avatar.adjacency if avatar.dilation else None

    def current_layers():
        return [free[l.name].to_layer() if l.name in free else l for l in ordered]

    for it in range(schedule.iterations):
        batch = cycler.next()
        extras = stacking_offsets(current_layers(), nf, adj, avatar.dilation)
        parts = []
        for l in ordered:
            ex = extras[l.name] + (extra_shift or {}).get(l.name, 0.0)
            ex_t = _as_tensor(np.broadcast_to(ex, (len(l),)))
            white = 1.0 if (mask_channel_layer is None or l.name == mask_channel_layer) else 0.0
            if l.name in free:
                fl = free[l.name]
                feats = torch.cat([_as_tensor(l.color), torch.full((len(l), 1), white, dtype=torch.float64)], 1)
                parts.append(fl.splats(mt, features=feats, extra_offset=ex_t))
            elif len(l):
                fl = FreeLayer(l, trainable=())
                feats = np.concatenate([l.color, np.full((len(l), 1), white)], 1)
                parts.append(fl.splats(mt, features=_as_tensor(feats), extra_offset=ex_t).detach())
        splats = Splats.cat(parts)
        opt.zero_grad()
        color = mask = 0.0
        for vi in batch:
            out = render(splats, cams[vi], backdrop=body, plan=plans.get(vi, it))
            plans.put(vi, it, out.plan)
            color = color + loss_color(out.color[..., :3], color_targets[vi], color_masks[vi] if color_masks else None)
            mask = mask + loss_mask(out.color[..., 3], mask_targets[vi])
        n = len(batch)
        terms = {"color": color / n, "mask": mask / n}
        total = app_total(terms, weights)
        _check_finite(stage, it, batch[0], terms, total, None, dict)
        total.backward()
        opt.step()
        decay.step()
        if fit_log is not None:
            fit_log.append(it, terms, total.item())
    return avatar.with_layers(current_layers())


def fit_joint_refine(
    avatar: LayeredAvatar,
    views: Sequence,
    weights: LossWeights,
    schedule: FitSchedule,
    fit_log: Optional[FitLog] = None,
) -> LayeredAvatar:
    """Refine the means of every layer jointly against the full RGB images and foreground masks.

    Colors, scales and rotations are never touched, so they come back
    byte-identical.
    """
    names = [l.name for l in avatar.layers if len(l)]
    cams = _cams(views)
    rgbs = [_as_tensor(v.rgb) for v in views]
    fg = [_as_tensor((np.asarray(v.labels) >= 0).astype(np.float64)) for v in views]
    return _mean_refine("joint", avatar, names, cams, rgbs, fg, None, None, weights, schedule, fit_log)


def standalone_targets(layer: GaussianLayer, mesh: SkinnedMesh, refs: ReferenceGaussians, cams: Sequence[Camera]):
    """RGB and alpha of ``layer`` rendered alone on ``mesh`` with its own offsets."""
    fl = FreeLayer(layer, trainable=())
    mt = MeshTensors.build(mesh, refs)
    rgb, alpha = [], []
    with torch.no_grad():
        sp = fl.splats(mt)
        for cam in cams:
            out = render(sp, cam)
            rgb.append(out.color)
            alpha.append(out.alpha)
    return rgb, alpha


def refine_transferred(
    avatar: LayeredAvatar,
    name: str,
    views: Sequence,
    weights: LossWeights,
    schedule: FitSchedule,
    fit_log: Optional[FitLog] = None,
    extra_shift: float = 0.0,
) -> LayeredAvatar:
    """Re-fit the means of a transferred layer so the stacked result matches its standalone look.

    Targets are the layer rendered alone (its own offsets, no stacking) in each
    camera. The stacked avatar is then rendered with the transferred layer
    white and all others black in a mask channel; only that layer's bary
    logits and log-offsets move. ``extra_shift`` adds a uniform offset on top
    of the stacking offsets (used to probe recovery).
    """
    layer = avatar.layer(name)
    cams = _cams(views)
    rgb, alpha = standalone_targets(layer, avatar.anchor_mesh, avatar.body_refs, cams)
    cmask = [a >= 0.5 for a in alpha]
    shift = {name: extra_shift} if extra_shift else None
    return _mean_refine("transfer", avatar, [name], cams, rgb, alpha, cmask, name, weights, schedule, fit_log, shift)
