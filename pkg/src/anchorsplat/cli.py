"""Command line: ``anchorsplat <verb> [options] [--config.key value ...]``.

Verbs
  synth    write a synthetic scene (mesh, cameras, images, ground truth)
  lift     fit the segmentation layer to the label images
  refine   project labels to faces and clean up small components
  fit      fit one layer per label, assemble and refine the avatar
  animate  pose an avatar and write the posed splats (and optional renders)
  stack    transfer a layer between avatars or change the layer order
  extract  write a garment mesh as OBJ
  eval     metrics against a synthetic scene's ground truth
  render   render an avatar into a set of cameras

Any config key can be set as ``--a.b value``. Errors are reported on stderr
as one JSON object and a nonzero exit status. ``ANCHORSPLAT_LOG`` sets the log
level (default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig

log = logging.getLogger("anchorsplat")


class MissingArtifact(FileNotFoundError):
    pass


def _need(path, producer: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{p} not found; produce it with `anchorsplat {producer}`")
    return p


def _split_overrides(extra):
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 1
        out.append((key, value))
        i += 1
    return out


def _config(args, extra) -> RunConfig:
    overrides = _split_overrides(extra)
    if getattr(args, "seed", None) is not None:
        overrides.append(("seed", str(args.seed)))
    scene = getattr(args, "scene", None)
    if scene:
        overrides = [("paths.mesh", str(Path(scene) / "anchor.obj")), ("paths.views", str(Path(scene) / "views"))] + overrides
    out = getattr(args, "out", None)
    if out:
        overrides.append(("paths.output", out))
    return RunConfig.load(getattr(args, "config", None), overrides)


def _mesh(cfg: RunConfig):
    cfg.require_paths("mesh")
    obj = Path(cfg["paths.mesh"])
    skin = cfg["paths.skinning"] or obj.with_suffix(".skin")
    joints = obj.with_suffix(".joints")
    return io.load_mesh(obj, skin if Path(skin).exists() else None, joints if joints.exists() else None)


def _views(cfg: RunConfig):
    from .synth import load_views

    cfg.require_paths("views")
    return load_views(cfg["paths.views"], cfg.classes)


def _outdir(cfg: RunConfig) -> Path:
    d = Path(cfg["paths.output"])
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------


def cmd_synth(args, extra):
    from .synth import BandSpec, SceneSpec, generate_scene, write_scene

    if extra:
        raise ConfigError(f"synth takes no config overrides, got {extra}")
    if args.spec:
        spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text()))
    elif args.preset == "capsule-two-bands":
        spec = SceneSpec.capsule_two_bands()
    elif args.preset == "capsule-one-band":
        spec = SceneSpec(bands=[BandSpec("upper", (0.0, 0.42), color=(0.85, 0.15, 0.15), offset=0.006)])
    else:
        spec = SceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    if args.views is not None:
        spec.views.count = args.views
    if args.resolution is not None:
        spec.views.resolution = args.resolution
    if args.speckle_patches is not None:
        spec.speckle.patches = args.speckle_patches
    data = generate_scene(spec)
    write_scene(data, args.out)
    print(f"wrote {len(data.views)} views, {data.mesh.num_faces} faces, layers {[l.name for l in data.gt_avatar.ordered()]} to {args.out}")


def cmd_lift(args, extra):
    from .pipeline import lift
    from .optim import FitLog

    cfg = _config(args, extra)
    mesh, views = _mesh(cfg), _views(cfg)
    out = _outdir(cfg)
    cfg.save(out / "config.json")
    flog = FitLog()
    seg = lift(mesh, views, cfg, flog, checkpoint_dir=out / "checkpoints")
    io.save_layer(out / "seg.gsl", seg, mesh.topology_hash(), cfg.classes)
    flog.write_csv(out / "stage1_log.csv")
    print(f"wrote {out / 'seg.gsl'}")


def cmd_refine(args, extra):
    from .labels import FaceLabeling, refine
    from .geometry import build_adjacency
    from .pipeline import area_threshold, refine_labels

    cfg = _config(args, extra)
    mesh = _mesh(cfg)
    out = _outdir(cfg)
    if args.labels:
        labeling, _ = io.load_labeling(args.labels)
        labeling = FaceLabeling(labeling.labels, area_threshold(mesh, cfg))
        refined = refine(labeling, build_adjacency(mesh))
        raw = labeling
    else:
        seg, _, _ = io.load_layer(_need(out / "seg.gsl", "lift"), expect_mesh_hash=mesh.topology_hash())
        raw, refined = refine_labels(seg, mesh, cfg)
    io.save_labeling(out / "labels_raw.txt", raw, cfg.classes)
    io.save_labeling(out / "labels.txt", refined, cfg.classes)
    changed = int(np.sum(raw.labels != refined.labels))
    print(f"wrote {out / 'labels.txt'} ({changed} faces relabeled)")


def cmd_fit(args, extra):
    from .pipeline import StageLogs, fit_layers

    cfg = _config(args, extra)
    mesh, views = _mesh(cfg), _views(cfg)
    out = _outdir(cfg)
    seg, _, _ = io.load_layer(_need(out / "seg.gsl", "lift"), expect_mesh_hash=mesh.topology_hash())
    labeling, _ = io.load_labeling(_need(out / "labels.txt", "refine"))
    logs = StageLogs()
    avatar = fit_layers(seg, labeling, mesh, views, cfg, logs, checkpoint_dir=out / "checkpoints")
    io.save_avatar(out / "avatar", avatar)
    for name, flog in logs.stage3.items():
        flog.write_csv(out / f"stage3_{name}_log.csv")
    logs.joint.write_csv(out / "joint_log.csv")
    print(f"wrote {out / 'avatar'}")


def _load_avatar(path, producer="fit"):
    return io.load_avatar(_need(path, producer))


def cmd_animate(args, extra):
    from .geometry import Pose
    from .layering import animate
    from .pipeline import render_avatar

    cfg = _config(args, extra)
    out = _outdir(cfg)
    avatar = _load_avatar(args.avatar or out / "avatar")
    nj = avatar.anchor_mesh.num_joints
    if args.pose:
        doc = json.loads(Path(args.pose).read_text())
        pose = Pose(np.asarray(doc["rotations"], dtype=np.float64), np.asarray(doc.get("root_translation", [0, 0, 0]), dtype=np.float64))
    else:
        pose = Pose.identity(nj)
    parts = animate(avatar, pose)
    arrays = {}
    for name, sp in parts.items():
        for attr in ("means", "rotations", "scales", "features"):
            arrays[f"{name}/{attr}"] = getattr(sp, attr).detach().numpy()
    np.savez(out / "posed_splats.npz", **arrays)
    if cfg["paths.views"]:
        views = _views(cfg)
        for i, img in enumerate(render_avatar(avatar, [v.cam for v in views], pose)):
            io.save_rgb(out / f"posed_{i:03d}.png", img)
    print(f"wrote {out / 'posed_splats.npz'}")


def cmd_stack(args, extra):
    from .layering import reorder, transfer_layer
    from .optim import refine_transferred

    cfg = _config(args, extra)
    out = _outdir(cfg)
    target = _load_avatar(args.target or out / "avatar")
    if args.layer:
        if not args.source:
            raise ConfigError("--layer needs --source")
        source = _load_avatar(args.source)
        target = transfer_layer(source, args.layer, target, args.rank)
        if args.refine:
            views = _views(cfg)
            target = refine_transferred(target, args.layer, views, cfg.weights, cfg.schedule("joint", seed_offset=200))
    if args.order:
        names = args.order.split(",")
        if sorted(names) != sorted(l.name for l in target.layers):
            raise ConfigError(f"--order must list every layer exactly once: {[l.name for l in target.layers]}")
        perm = [0] * len(names)
        for l in target.layers:
            perm[l.order_rank] = names.index(l.name)
        target = reorder(target, perm)
    dest = Path(args.dest) if args.dest else out / "avatar_stacked"
    io.save_avatar(dest, target)
    print(f"wrote {dest} with order {[l.name for l in target.ordered()]}")


def cmd_extract(args, extra):
    from .metrics import extract_mesh

    cfg = _config(args, extra)
    out = _outdir(cfg)
    avatar = _load_avatar(args.avatar or out / "avatar")
    gm = extract_mesh(avatar, args.layer, cfg["metrics.smoothing_iterations"])
    path = out / f"{args.layer}.obj"
    io.write_obj(path, gm.vertices, gm.faces)
    print(f"wrote {path} ({len(gm.vertices)} vertices, {len(gm.faces)} faces)")


def cmd_eval(args, extra):
    from .pipeline import evaluate

    cfg = _config(args, extra)
    out = _outdir(cfg)
    avatar = _load_avatar(args.avatar or out / "avatar")
    views = _views(cfg)
    gt = io.load_avatar(args.gt) if args.gt else None
    mode = "literal" if args.literal else cfg["metrics.penetration_mode"]
    rep = evaluate(avatar, views, gt, mode=mode, smoothing_iterations=cfg["metrics.smoothing_iterations"])
    d = rep.to_dict()
    with open(out / "metrics.csv", "w") as fh:
        fh.write(",".join(d) + "\n")
        fh.write(",".join(str(v) for v in d.values()) + "\n")
    (out / "metrics.json").write_text(json.dumps(d, indent=2))
    print(rep.table_row())


def cmd_render(args, extra):
    from .pipeline import render_avatar, render_avatar_labels
    from .synth import label_color_image

    cfg = _config(args, extra)
    out = _outdir(cfg)
    avatar = _load_avatar(args.avatar or out / "avatar")
    cfg.require_paths("views")
    cams = [io.read_camera(p) for p in sorted(Path(cfg["paths.views"]).glob("cam_*.txt"))]
    if not cams:
        raise MissingArtifact(f"no cameras in {cfg['paths.views']}; produce them with `anchorsplat synth`")
    dest = out / "renders"
    dest.mkdir(exist_ok=True)
    for i, img in enumerate(render_avatar(avatar, cams)):
        io.save_rgb(dest / f"rgb_{i:03d}.png", img)
    if args.labels:
        for i, lab in enumerate(render_avatar_labels(avatar, cams)):
            io.save_label_image(dest / f"label_{i:03d}.png", lab)
    print(f"wrote {len(cams)} renders to {dest}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anchorsplat", description="Layered Gaussian avatars anchored to a mesh.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, stochastic=False):
        sp.add_argument("--config", help="run configuration (JSON)")
        sp.add_argument("--scene", help="synthetic scene directory (sets paths.mesh and paths.views)")
        sp.add_argument("--out", help="output directory (sets paths.output)")
        if stochastic:
            sp.add_argument("--seed", type=int, help="random seed (sets seed)")
        return sp

    s = sub.add_parser("synth", help="write a synthetic scene")
    s.add_argument("--out", required=True)
    s.add_argument("--spec", help="scene spec JSON")
    s.add_argument("--preset", default="capsule-two-bands", choices=["capsule-two-bands", "capsule-one-band", "body-only"])
    s.add_argument("--seed", type=int)
    s.add_argument("--views", type=int)
    s.add_argument("--resolution", type=int)
    s.add_argument("--speckle-patches", type=int)
    s.set_defaults(func=cmd_synth)

    common(sub.add_parser("lift", help="fit the segmentation layer"), True).set_defaults(func=cmd_lift)
    r = common(sub.add_parser("refine", help="face labels and component cleanup"))
    r.add_argument("--labels", help="refine this labeling file instead of the lifted layer")
    r.set_defaults(func=cmd_refine)
    common(sub.add_parser("fit", help="per-layer appearance and joint refinement"), True).set_defaults(func=cmd_fit)

    a = common(sub.add_parser("animate", help="pose an avatar"))
    a.add_argument("--avatar")
    a.add_argument("--pose", help="JSON with 'rotations' (J x 4 quaternions, w first) and 'root_translation'")
    a.set_defaults(func=cmd_animate)

    st = common(sub.add_parser("stack", help="transfer or reorder layers"), True)
    st.add_argument("--target", help="avatar receiving the layer (default: <out>/avatar)")
    st.add_argument("--source", help="avatar providing the layer")
    st.add_argument("--layer", help="layer name to transfer")
    st.add_argument("--rank", type=int, help="stacking rank of the transferred layer (default outermost)")
    st.add_argument("--refine", action="store_true", help="refine the transferred layer's means afterwards")
    st.add_argument("--order", help="comma-separated layer names, innermost first")
    st.add_argument("--dest", help="output avatar directory")
    st.set_defaults(func=cmd_stack)

    e = common(sub.add_parser("extract", help="garment mesh as OBJ"))
    e.add_argument("--avatar")
    e.add_argument("--layer", required=True)
    e.set_defaults(func=cmd_extract)

    ev = common(sub.add_parser("eval", help="metrics"))
    ev.add_argument("--avatar")
    ev.add_argument("--gt", help="ground-truth avatar directory (enables chamfer)")
    ev.add_argument("--literal", action="store_true", help="penetration as the minimum over all body vertices")
    ev.set_defaults(func=cmd_eval)

    rd = common(sub.add_parser("render", help="render an avatar"))
    rd.add_argument("--avatar")
    rd.add_argument("--labels", action="store_true", help="also write label images")
    rd.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ANCHORSPLAT_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        args.func(args, extra)
        return 0
    except Exception as e:  # reported as a machine-readable record
        record = {"command": args.verb, "error": type(e).__name__, "message": str(e)}
        log.debug("%s", traceback.format_exc())
        print(json.dumps(record), file=sys.stderr)
        return 2 if isinstance(e, (ConfigError, MissingArtifact)) else 1


if __name__ == "__main__":
    sys.exit(main())
