"""Triangle meshes, face adjacency, quaternions and linear blend skinning."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

__all__ = [
    "MeshError",
    "SkinnedMesh",
    "Pose",
    "FaceAdjacency",
    "face_normals",
    "face_areas",
    "compute_vertex_normals",
    "build_adjacency",
    "pose_mesh",
    "skinning_transforms",
    "transform_mesh",
    "subdivide_midpoint",
    "quat_mul",
    "quat_compose",
    "quat_normalize",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_from_axis_angle",
    "IDENTITY_QUAT",
]

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class MeshError(ValueError):
    """Raised when a mesh fails validation."""


# ---------------------------------------------------------------------------
# quaternions, (w, x, y, z) Hamilton convention
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    """Hamilton product, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_compose(a, b):
    """Rotation ``a`` applied after ``b``; the product is renormalized."""
    return quat_normalize(quat_mul(a, b))


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_to_matrix(q):
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Rotation matrix to unit quaternion with non-negative w."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, r in enumerate(flat):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    return quat_normalize(out).reshape(m.shape[:-2] + (4,))


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

def _face_cross(vertices, faces):
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    return np.cross(v1 - v0, v2 - v0)


def face_areas(vertices, faces):
    return 0.5 * np.linalg.norm(_face_cross(vertices, faces), axis=1)


def face_normals(vertices, faces):
    c = _face_cross(vertices, faces)
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def compute_vertex_normals(vertices, faces):
    """Area-weighted vertex normals.

    Summing raw face cross products weights each face by twice its area. When
    the weighted sum cancels, the normal of the largest incident face is used.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    nv = len(vertices)
    cross = _face_cross(vertices, faces)
    acc = np.zeros((nv, 3))
    for k in range(3):
        np.add.at(acc, faces[:, k], cross)
    counts = np.bincount(faces.ravel(), minlength=nv)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0)
        raise MeshError(f"vertices without incident faces: {missing[:10].tolist()}")
    norm = np.linalg.norm(acc, axis=1)
    bad = norm < 1e-14
    if np.any(bad):
        areas = np.linalg.norm(cross, axis=1)
        best = np.full(nv, -1.0)
        best_face = np.zeros(nv, dtype=np.int64)
        for k in range(3):
            for f, v in enumerate(faces[:, k]):
                if areas[f] > best[v]:
                    best[v] = areas[f]
                    best_face[v] = f
        acc[bad] = cross[best_face[bad]]
        norm = np.linalg.norm(acc, axis=1)
    return acc / norm[:, None]


@dataclass
class SkinnedMesh:
    """A triangle mesh carrying a skeleton and per-vertex skinning weights.

    ``joints`` holds the rest-pose world transforms (J, 4, 4) and
    ``joint_parents`` the parent index of each joint (-1 for the root).
    Vertex normals are computed when not given.
    """

    vertices: np.ndarray
    faces: np.ndarray
    joints: np.ndarray = field(default_factory=lambda: np.eye(4)[None])
    joint_parents: np.ndarray = field(default_factory=lambda: np.array([-1]))
    skin_weights: Optional[np.ndarray] = None
    face_labels: Optional[np.ndarray] = None
    vertex_normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.joint_parents = np.asarray(self.joint_parents, dtype=np.int64)
        if self.skin_weights is None:
            self.skin_weights = np.zeros((len(self.vertices), len(self.joints)))
            self.skin_weights[:, 0] = 1.0
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        if self.face_labels is not None:
            self.face_labels = np.asarray(self.face_labels, dtype=np.int64)
        self.validate()
        if self.vertex_normals is None:
            self.vertex_normals = compute_vertex_normals(self.vertices, self.faces)
        else:
            self.vertex_normals = np.asarray(self.vertex_normals, dtype=np.float64)

    def validate(self):
        v, f = self.vertices, self.faces
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError("vertices must have shape (V, 3)")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError("faces must have shape (F, 3)")
        if len(f) == 0:
            raise MeshError("mesh has no faces")
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError("face index out of range")
        areas = face_areas(v, f)
        if np.any(areas <= 1e-16):
            raise MeshError(f"degenerate faces: {np.flatnonzero(areas <= 1e-16)[:10].tolist()}")
        if self.joints.ndim != 3 or self.joints.shape[1:] != (4, 4):
            raise MeshError("joints must have shape (J, 4, 4)")
        if len(self.joint_parents) != len(self.joints):
            raise MeshError("joint_parents length must match joint count")
        for j, p in enumerate(self.joint_parents):
            if p >= j:
                raise MeshError("joints must be topologically ordered (parent index < child index)")
        w = self.skin_weights
        if w.shape != (len(v), len(self.joints)):
            raise MeshError(f"skin_weights must have shape {(len(v), len(self.joints))}, got {w.shape}")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
            raise MeshError("skin weight rows must be non-negative and sum to 1")
        if self.face_labels is not None and self.face_labels.shape != (len(f),):
            raise MeshError("face_labels must have one entry per face")

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def face_areas(self):
        return face_areas(self.vertices, self.faces)

    def face_normals(self):
        return face_normals(self.vertices, self.faces)

    def centroids(self):
        return self.vertices[self.faces].mean(axis=1)

    def with_vertices(self, vertices) -> "SkinnedMesh":
        """Same topology and skinning, new vertex positions; normals recomputed."""
        return replace(self, vertices=np.asarray(vertices, dtype=np.float64), vertex_normals=None)

    def topology_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.faces, dtype="<i8").tobytes()).hexdigest()[:16]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.faces, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass
class Pose:
    """Per-joint local rotations (J, 4) as unit quaternions plus a root translation."""

    joint_rotations: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.joint_rotations = np.atleast_2d(np.asarray(self.joint_rotations, dtype=np.float64))
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        norms = np.linalg.norm(self.joint_rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("pose quaternions must have unit norm")

    @classmethod
    def identity(cls, num_joints: int) -> "Pose":
        return cls(np.tile(IDENTITY_QUAT, (num_joints, 1)), np.zeros(3))


def skinning_transforms(mesh: SkinnedMesh, pose: Pose) -> np.ndarray:
    """Per-joint 4x4 matrices mapping rest-pose points to posed points."""
    if len(pose.joint_rotations) != mesh.num_joints:
        raise ValueError(
            f"pose has {len(pose.joint_rotations)} joints, mesh skeleton has {mesh.num_joints}"
        )
    rest = mesh.joints
    rot = np.tile(np.eye(4), (mesh.num_joints, 1, 1))
    rot[:, :3, :3] = quat_to_matrix(pose.joint_rotations)
    posed = np.empty_like(rest)
    for j, p in enumerate(mesh.joint_parents):
        if p < 0:
            t = np.eye(4)
            t[:3, 3] = pose.root_translation
            posed[j] = t @ rest[j] @ rot[j]
        else:
            local = np.linalg.solve(rest[p], rest[j])
            posed[j] = posed[p] @ local @ rot[j]
    return posed @ np.linalg.inv(rest)


def pose_mesh(mesh: SkinnedMesh, pose: Pose) -> SkinnedMesh:
    """Deform ``mesh`` with linear blend skinning; topology is unchanged."""
    a = skinning_transforms(mesh, pose)
    blended = np.einsum("vj,jab->vab", mesh.skin_weights, a)
    v = np.einsum("vab,vb->va", blended[:, :3, :3], mesh.vertices) + blended[:, :3, 3]
    return mesh.with_vertices(v)


def transform_mesh(mesh: SkinnedMesh, m) -> SkinnedMesh:
    """Apply a rigid 4x4 transform to vertices and rest joints."""
    m = np.asarray(m, dtype=np.float64)
    v = mesh.vertices @ m[:3, :3].T + m[:3, 3]
    return replace(mesh, vertices=v, joints=m @ mesh.joints, vertex_normals=None)


@dataclass
class FaceAdjacency:
    """Edge adjacency between faces plus per-face areas."""

    neighbors: list
    face_areas: np.ndarray
    pairs: np.ndarray  # (E, 2), each unordered adjacent pair once, i < j

    @property
    def num_faces(self) -> int:
        return len(self.neighbors)

    def csr(self):
        """Directed neighbor lists as flat (source, target) arrays."""
        src = np.concatenate([self.pairs[:, 0], self.pairs[:, 1]])
        dst = np.concatenate([self.pairs[:, 1], self.pairs[:, 0]])
        order = np.lexsort((dst, src))
        return src[order], dst[order]


def _edge_table(faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fid = np.tile(np.arange(len(faces)), 3)
    e = np.sort(e, axis=1)
    return e, fid


def build_adjacency(mesh_or_faces, vertices=None) -> FaceAdjacency:
    """Faces are adjacent when they share an edge; non-manifold edges raise."""
    if isinstance(mesh_or_faces, SkinnedMesh):
        faces, vertices = mesh_or_faces.faces, mesh_or_faces.vertices
    else:
        faces = np.asarray(mesh_or_faces, dtype=np.int64)
    e, fid = _edge_table(faces)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, fid = e[order], fid[order]
    same = np.all(e[1:] == e[:-1], axis=1)
    # runs of identical edges
    starts = np.flatnonzero(np.concatenate([[True], ~same]))
    lengths = np.diff(np.concatenate([starts, [len(e)]]))
    if np.any(lengths > 2):
        bad = e[starts[lengths > 2][0]]
        raise MeshError(f"non-manifold edge ({bad[0]}, {bad[1]}) shared by more than two faces")
    two = starts[lengths == 2]
    pairs = np.stack([fid[two], fid[two + 1]], axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.sort(pairs, axis=1)
    pairs = np.unique(pairs, axis=0)
    nf = len(faces)
    neighbors = [[] for _ in range(nf)]
    for i, j in pairs:
        neighbors[i].append(j)
        neighbors[j].append(i)
    neighbors = [np.array(sorted(n), dtype=np.int64) for n in neighbors]
    areas = face_areas(vertices, faces) if vertices is not None else np.ones(nf)
    return FaceAdjacency(neighbors=neighbors, face_areas=areas, pairs=pairs.reshape(-1, 2))


def subdivide_midpoint(mesh: SkinnedMesh, levels: int = 1) -> SkinnedMesh:
    """Uniform 1-to-4 midpoint subdivision; new vertices stay on the old faces.

    Skin weights of edge midpoints average their endpoints, face labels are
    inherited by the four children of each face.
    """
    for _ in range(levels):
        v, f, w = mesh.vertices, mesh.faces, mesh.skin_weights
        e, _ = _edge_table(f)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        nv = len(v)
        mids = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
        mw = 0.5 * (w[uniq[:, 0]] + w[uniq[:, 1]])
        nf = len(f)
        m01, m12, m20 = (nv + inv[k * nf:(k + 1) * nf] for k in range(3))
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        new_faces = np.concatenate(
            [
                np.stack([a, m01, m20], 1),
                np.stack([m01, b, m12], 1),
                np.stack([m20, m12, c], 1),
                np.stack([m01, m12, m20], 1),
            ]
        )
        # keep the four children of face i contiguous at 4i..4i+3
        new_faces = new_faces.reshape(4, nf, 3).transpose(1, 0, 2).reshape(-1, 3)
        labels = None if mesh.face_labels is None else np.repeat(mesh.face_labels, 4)
        mesh = SkinnedMesh(
            vertices=np.concatenate([v, mids]),
            faces=new_faces,
            joints=mesh.joints,
            joint_parents=mesh.joint_parents,
            skin_weights=np.concatenate([w, mw]),
            face_labels=labels,
        )
    return mesh
