"""On-disk formats.

Mesh           OBJ with ``v``, ``vn`` and ``f a//a b//b c//c`` lines (1-based).
Skinning       one line per vertex: ``joint:weight`` pairs separated by spaces.
Joints         one line per joint: parent index then the 16 row-major entries
               of its rest transform.
Camera         ``W H`` line, three intrinsic rows, four world-to-camera rows.
Layer          text header ending in ``end`` then little-endian fixed records:
               face id (i8), bary logits (3 f8), log offset (f8), relative
               rotation (4 f8), scales (2 f8), opacity (f8), color (3 f8),
               label logits (C f8). ``.json`` mirrors it losslessly.
Labeling       ``# classes <json>``, ``# threshold <float>``, then
               ``face_id class_id`` lines.
Avatar         manifest of ``key value`` lines pointing at the files above.
Images         PNG; label images store class id + 1 (0 is background); depth
               is 16-bit with the meters-per-unit factor in a ``depth_scale``
               text chunk.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, PngImagePlugin

from .anchor import DEFAULT_CLASSES, ClassTable, GaussianLayer, ReferenceGaussians, reference_from_mesh
from .geometry import SkinnedMesh
from .labels import FaceLabeling
from .layering import LayeredAvatar
from .render import Camera

__all__ = [
    "FormatError",
    "write_obj",
    "read_obj",
    "write_skinning",
    "read_skinning",
    "write_joints",
    "read_joints",
    "save_mesh",
    "load_mesh",
    "write_camera",
    "read_camera",
    "save_layer",
    "load_layer",
    "save_layer_json",
    "load_layer_json",
    "save_labeling",
    "load_labeling",
    "save_avatar",
    "load_avatar",
    "save_rgb",
    "load_rgb",
    "save_mask",
    "load_mask",
    "save_label_image",
    "load_label_image",
    "save_depth",
    "load_depth",
]

LAYER_MAGIC = "ANCHORSPLAT-LAYER"
AVATAR_MAGIC = "ANCHORSPLAT-AVATAR"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _fmt(x) -> str:
    return repr(float(x))


# --- meshes -----------------------------------------------------------------

def write_obj(path, vertices, faces, normals=None) -> None:
    lines = [f"v {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in np.asarray(vertices)]
    if normals is not None:
        lines += [f"vn {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in np.asarray(normals)]
        lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in np.asarray(faces)]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Vertices, triangle faces (0-based) and normals (None when absent)."""
    v, vn, f = [], [], []
    for no, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] in ("v", "vn") and len(parts) < 4:
                raise FormatError(f"{path}:{no}: expected three coordinates")
            if parts[0] == "v":
                v.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                vn.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise FormatError(f"{path}:{no}: only triangles are supported")
                f.append([i - 1 if i > 0 else len(v) + i for i in idx])
        except (ValueError, IndexError) as e:
            raise FormatError(f"{path}:{no}: {e}") from None
    if not v or not f:
        raise FormatError(f"{path}: no vertices or faces")
    normals = np.array(vn) if len(vn) == len(v) else None
    return np.array(v, dtype=np.float64), np.array(f, dtype=np.int64), normals


def write_skinning(path, weights) -> None:
    lines = []
    for row in np.asarray(weights):
        nz = np.flatnonzero(row)
        lines.append(" ".join(f"{j}:{_fmt(row[j])}" for j in nz))
    Path(path).write_text("\n".join(lines) + "\n")


def read_skinning(path, num_vertices: int, num_joints: int) -> np.ndarray:
    rows = Path(path).read_text().splitlines()
    if len(rows) != num_vertices:
        raise FormatError(f"{path}: expected {num_vertices} weight lines, found {len(rows)}")
    w = np.zeros((num_vertices, num_joints))
    for i, line in enumerate(rows):
        for item in line.split():
            j, val = item.split(":")
            j = int(j)
            if not 0 <= j < num_joints:
                raise FormatError(f"{path}:{i + 1}: joint {j} out of range")
            w[i, j] = float(val)
    return w


def write_joints(path, joints, parents) -> None:
    lines = [" ".join([str(int(p))] + [_fmt(x) for x in np.asarray(m).ravel()]) for m, p in zip(joints, parents)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_joints(path):
    mats, parents = [], []
    for no, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 17:
            raise FormatError(f"{path}:{no}: expected parent and 16 matrix entries")
        parents.append(int(parts[0]))
        mats.append(np.array([float(x) for x in parts[1:]]).reshape(4, 4))
    return np.array(mats), np.array(parents, dtype=np.int64)


def save_mesh(mesh: SkinnedMesh, stem) -> dict:
    """Write ``stem.obj``, ``stem.skin`` and ``stem.joints``; returns the paths."""
    stem = str(stem)
    paths = {"mesh": stem + ".obj", "skinning": stem + ".skin", "joints": stem + ".joints"}
    write_obj(paths["mesh"], mesh.vertices, mesh.faces, mesh.vertex_normals)
    write_skinning(paths["skinning"], mesh.skin_weights)
    write_joints(paths["joints"], mesh.joints, mesh.joint_parents)
    return paths


def load_mesh(obj_path, skinning_path=None, joints_path=None) -> SkinnedMesh:
    v, f, _ = read_obj(obj_path)
    if joints_path is not None and os.path.exists(joints_path):
        joints, parents = read_joints(joints_path)
    else:
        joints, parents = np.eye(4)[None], np.array([-1])
    w = read_skinning(skinning_path, len(v), len(joints)) if skinning_path is not None and os.path.exists(skinning_path) else None
    # normals are always recomputed so that they match the loaded vertices
    return SkinnedMesh(v, f, joints=joints, joint_parents=parents, skin_weights=w)


# --- cameras ----------------------------------------------------------------

def write_camera(path, cam: Camera) -> None:
    rows = [f"{cam.width} {cam.height}"]
    rows += [" ".join(_fmt(x) for x in r) for r in cam.K]
    rows += [" ".join(_fmt(x) for x in r) for r in cam.world_to_cam]
    Path(path).write_text("\n".join(rows) + "\n")


def read_camera(path) -> Camera:
    rows = [r.split() for r in Path(path).read_text().splitlines() if r.strip()]
    if len(rows) != 8:
        raise FormatError(f"{path}: expected 8 lines (resolution, 3 intrinsic rows, 4 extrinsic rows)")
    w, h = int(rows[0][0]), int(rows[0][1])
    k = np.array([[float(x) for x in r] for r in rows[1:4]])
    m = np.array([[float(x) for x in r] for r in rows[4:8]])
    return Camera(fx=k[0, 0], fy=k[1, 1], cx=k[0, 2], cy=k[1, 2], world_to_cam=m, width=w, height=h)


# --- layers -----------------------------------------------------------------

def _record_dtype(num_classes: int) -> np.dtype:
    return np.dtype(
        [
            ("face_id", "<i8"),
            ("bary_logits", "<f8", (3,)),
            ("log_offset", "<f8"),
            ("rel_rotation", "<f8", (4,)),
            ("scale", "<f8", (2,)),
            ("opacity", "<f8"),
            ("color", "<f8", (3,)),
            ("label_logits", "<f8", (num_classes,)),
        ]
    )


def _layer_records(layer: GaussianLayer) -> np.ndarray:
    rec = np.zeros(len(layer), dtype=_record_dtype(layer.num_classes))
    for name in rec.dtype.names:
        rec[name] = getattr(layer, name)
    return rec


def _layer_from_records(rec, name: str, rank: int) -> GaussianLayer:
    return GaussianLayer(
        name=name,
        face_id=rec["face_id"].astype(np.int64),
        bary_logits=rec["bary_logits"].astype(np.float64),
        log_offset=rec["log_offset"].astype(np.float64),
        rel_rotation=rec["rel_rotation"].astype(np.float64),
        scale=rec["scale"].astype(np.float64),
        opacity=rec["opacity"].astype(np.float64),
        color=rec["color"].astype(np.float64),
        label_logits=rec["label_logits"].astype(np.float64).reshape(len(rec), *rec.dtype["label_logits"].shape),
        order_rank=rank,
    )


def save_layer(path, layer: GaussianLayer, mesh_hash: str = "", classes: ClassTable = DEFAULT_CLASSES) -> None:
    header = [
        LAYER_MAGIC,
        f"version {FORMAT_VERSION}",
        f"classes {json.dumps(classes.to_dict(), separators=(',', ':'))}",
        f"mesh {mesh_hash or '-'}",
        f"name {layer.name}",
        f"rank {layer.order_rank}",
        f"count {len(layer)}",
        f"labels {layer.num_classes}",
        "end",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        fh.write(_layer_records(layer).tobytes())


def _read_header(fh, magic: str) -> dict:
    first = fh.readline().decode("utf-8").strip()
    if first != magic:
        raise FormatError(f"bad magic {first!r}, expected {magic}")
    out = {}
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("truncated header")
        line = line.decode("utf-8").rstrip("\n")
        if line == "end":
            return out
        key, _, value = line.partition(" ")
        out[key] = value


def load_layer(path, expect_mesh_hash: Optional[str] = None):
    """Returns (layer, class table, mesh hash)."""
    with open(path, "rb") as fh:
        h = _read_header(fh, LAYER_MAGIC)
        if int(h.get("version", -1)) != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {h.get('version')}")
        count, ncls = int(h["count"]), int(h["labels"])
        dt = _record_dtype(ncls)
        data = fh.read()
    if len(data) != count * dt.itemsize:
        raise FormatError(f"{path}: expected {count} records of {dt.itemsize} bytes, got {len(data)} bytes")
    mesh_hash = "" if h["mesh"] == "-" else h["mesh"]
    if expect_mesh_hash and mesh_hash and mesh_hash != expect_mesh_hash:
        raise FormatError(f"{path}: layer was fitted on mesh {mesh_hash}, not {expect_mesh_hash}")
    rec = np.frombuffer(data, dtype=dt)
    classes = ClassTable.from_dict(json.loads(h["classes"]))
    return _layer_from_records(rec, h["name"], int(h["rank"])), classes, mesh_hash


def save_layer_json(path, layer: GaussianLayer, mesh_hash: str = "", classes: ClassTable = DEFAULT_CLASSES) -> None:
    doc = {
        "format": LAYER_MAGIC,
        "version": FORMAT_VERSION,
        "classes": classes.to_dict(),
        "mesh": mesh_hash,
        "name": layer.name,
        "rank": int(layer.order_rank),
        "gaussians": [
            {name: np.asarray(r[name]).tolist() for name in r.dtype.names} for r in _layer_records(layer)
        ],
    }
    # json writes floats with repr, which round-trips float64 exactly
    Path(path).write_text(json.dumps(doc, indent=1))


def load_layer_json(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != LAYER_MAGIC:
        raise FormatError(f"{path}: not a layer document")
    g = doc["gaussians"]
    ncls = len(g[0]["label_logits"]) if g else 0
    rec = np.zeros(len(g), dtype=_record_dtype(ncls))
    for i, item in enumerate(g):
        for name in rec.dtype.names:
            rec[i][name] = item[name]
    return _layer_from_records(rec, doc["name"], doc["rank"]), ClassTable.from_dict(doc["classes"]), doc["mesh"]


# --- labelings --------------------------------------------------------------

def save_labeling(path, labeling: FaceLabeling, classes: ClassTable = DEFAULT_CLASSES) -> None:
    lines = [
        f"# classes {json.dumps(classes.to_dict(), separators=(',', ':'))}",
        f"# threshold {_fmt(labeling.area_threshold)}",
    ]
    lines += [f"{i} {int(c)}" for i, c in enumerate(labeling.labels)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_labeling(path):
    classes, tau, pairs = DEFAULT_CLASSES, None, []
    for no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.startswith("# classes "):
            classes = ClassTable.from_dict(json.loads(line[len("# classes "):]))
        elif line.startswith("# threshold "):
            tau = float(line.split()[2])
        elif line.strip() and not line.startswith("#"):
            a, b = line.split()
            pairs.append((int(a), int(b)))
    if tau is None:
        raise FormatError(f"{path}: missing threshold header")
    pairs.sort()
    ids = [a for a, _ in pairs]
    if ids != list(range(len(ids))):
        raise FormatError(f"{path}: face ids must cover 0..F-1 exactly once")
    labels = np.array([b for _, b in pairs], dtype=np.int64)
    try:
        classes.check(labels)
    except KeyError as e:
        raise FormatError(f"{path}: {e.args[0]}") from None
    return FaceLabeling(labels, tau), classes


# --- avatars ----------------------------------------------------------------

def save_avatar(directory, avatar: LayeredAvatar) -> Path:
    """Write the anchor mesh, labeling, layers and a ``avatar.txt`` manifest into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_mesh(avatar.anchor_mesh, d / "anchor")
    save_labeling(d / "labels.txt", avatar.face_labels, avatar.classes)
    np.savetxt(d / "body_faces.txt", avatar.body_ref_faces, fmt="%d")
    h = avatar.anchor_mesh.topology_hash()
    lines = [
        f"{AVATAR_MAGIC} {FORMAT_VERSION}",
        "mesh anchor.obj",
        "skinning anchor.skin",
        "joints anchor.joints",
        f"classes {json.dumps(avatar.classes.to_dict(), separators=(',', ':'))}",
        "labels labels.txt",
        "body_faces body_faces.txt",
        f"skin_color {' '.join(_fmt(c) for c in avatar.skin_color)}",
        f"dilation {avatar.dilation}",
    ]
    for layer in avatar.ordered():
        fname = f"layer_{layer.order_rank:02d}_{layer.name}.gsl"
        save_layer(d / fname, layer, h, avatar.classes)
        lines.append(f"layer {layer.order_rank} {layer.name} {fname}")
    path = d / "avatar.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def load_avatar(path) -> LayeredAvatar:
    path = Path(path)
    if path.is_dir():
        path = path / "avatar.txt"
    d = path.parent
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(AVATAR_MAGIC):
        raise FormatError(f"{path}: not an avatar manifest")
    kv, layers = {}, []
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        if key == "layer":
            rank, name, fname = value.split()
            layers.append((int(rank), name, fname))
        elif key:
            kv[key] = value
    mesh = load_mesh(d / kv["mesh"], d / kv["skinning"], d / kv["joints"])
    classes = ClassTable.from_dict(json.loads(kv["classes"]))
    labeling, _ = load_labeling(d / kv["labels"])
    body_faces = np.atleast_1d(np.loadtxt(d / kv["body_faces"], dtype=np.int64)) if (d / kv["body_faces"]).stat().st_size else np.zeros(0, np.int64)
    skin = tuple(float(x) for x in kv.get("skin_color", "0.8 0.6 0.5").split())
    out = []
    for rank, name, fname in layers:
        layer, _, _ = load_layer(d / fname, expect_mesh_hash=mesh.topology_hash())
        if layer.order_rank != rank or layer.name != name:
            raise FormatError(f"{fname}: header disagrees with the manifest")
        out.append(layer)
    return LayeredAvatar(
        anchor_mesh=mesh,
        layers=out,
        body_refs=reference_from_mesh(mesh, skin_color=skin),
        face_labels=labeling,
        classes=classes,
        body_ref_faces=body_faces,
        skin_color=skin,
        dilation=int(kv.get("dilation", 1)),
    )


# --- images -----------------------------------------------------------------

def _to8(x) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(path, img) -> None:
    Image.fromarray(_to8(img)).save(path)


def load_rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_mask(path, mask) -> None:
    Image.fromarray(_to8(mask)).save(path)


def load_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def save_label_image(path, labels) -> None:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.min(initial=0) < -1 or lab.max(initial=0) > 254:
        raise ValueError("label ids must lie in [-1, 254]")
    Image.fromarray((lab + 1).astype(np.uint8)).save(path)


def load_label_image(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64) - 1


def save_depth(path, depth, scale: Optional[float] = None) -> float:
    """16-bit depth PNG; returns the meters-per-unit scale stored in the file."""
    depth = np.asarray(depth, dtype=np.float64)
    if scale is None:
        top = float(depth.max(initial=0.0))
        scale = top / 65535.0 if top > 0 else 1e-4
    q = np.clip(np.round(depth / scale), 0, 65535).astype(np.uint16)
    info = PngImagePlugin.PngInfo()
    info.add_text("depth_scale", _fmt(scale))
    Image.fromarray(q).save(path, pnginfo=info)
    return scale


def load_depth(path) -> np.ndarray:
    im = Image.open(path)
    scale = float(im.text["depth_scale"])
    return np.asarray(im, dtype=np.float64) * scale
