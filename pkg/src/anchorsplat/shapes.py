"""Built-in synthetic bodies: planar patches, platonic solids, capsules, tubes."""
from __future__ import annotations

import numpy as np

from .geometry import SkinnedMesh

__all__ = ["square", "flat_grid", "octahedron", "icosphere", "capsule", "cylinder", "ellipsoid_person"]


def _translate(z: float) -> np.ndarray:
    m = np.eye(4)
    m[2, 3] = z
    return m


def square(size: float = 1.0) -> SkinnedMesh:
    """Two triangles spanning [0, size]^2 in the z=0 plane, normals +z."""
    v = np.array([[0, 0, 0], [size, 0, 0], [size, size, 0], [0, size, 0]], dtype=np.float64)
    f = np.array([[0, 1, 2], [0, 2, 3]])
    return SkinnedMesh(v, f)


def flat_grid(nx: int = 4, ny: int = 4, spacing: float = 0.1) -> SkinnedMesh:
    xs, ys = np.meshgrid(np.arange(nx + 1) * spacing, np.arange(ny + 1) * spacing, indexing="xy")
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1)
    faces = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 2, a + nx + 1
            faces += [[a, b, c], [a, c, d]]
    return SkinnedMesh(v, np.array(faces))


def octahedron(radius: float = 1.0) -> SkinnedMesh:
    v = radius * np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64
    )
    f = np.array(
        [[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]]
    )
    return SkinnedMesh(v, f)


def _icosahedron():
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> SkinnedMesh:
    v, f = _icosahedron()
    for _ in range(subdivisions):
        cache = {}
        verts = list(v)

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v, f = np.array(verts), np.array(nf)
    return SkinnedMesh(v * radius + np.asarray(center, dtype=np.float64), f)


def _chain_weights(z: np.ndarray, joint_z, blend: float) -> np.ndarray:
    """Smooth weights over a vertical joint chain; joint k owns z above joint_z[k]."""
    nj = len(joint_z)
    w = np.zeros((len(z), nj))
    w[:, 0] = 1.0
    for k in range(1, nj):
        s = np.clip((z - joint_z[k] + blend) / (2 * blend), 0.0, 1.0)
        s = s * s * (3 - 2 * s)
        w[:, :k] *= (1 - s)[:, None]
        w[:, k] = s
    return w / w.sum(axis=1, keepdims=True)


def _rings_mesh(radii, heights, segments):
    """Surface of revolution around z from ring radii/heights (first/last may be poles)."""
    verts, faces, ring_start = [], [], []
    theta = 2 * np.pi * np.arange(segments) / segments
    for r, z in zip(radii, heights):
        ring_start.append(len(verts))
        if r == 0.0:
            verts.append([0.0, 0.0, z])
        else:
            for t in theta:
                verts.append([r * np.cos(t), r * np.sin(t), z])
    n = len(radii)
    for i in range(n - 1):
        a0, b0 = ring_start[i], ring_start[i + 1]
        pole_a, pole_b = radii[i] == 0.0, radii[i + 1] == 0.0
        for s in range(segments):
            s1 = (s + 1) % segments
            if pole_a:
                faces.append([a0, b0 + s1, b0 + s])
            elif pole_b:
                faces.append([a0 + s, a0 + s1, b0])
            else:
                p, q, r_, t_ = a0 + s, a0 + s1, b0 + s1, b0 + s
                faces += [[p, q, r_], [p, r_, t_]]
    return np.array(verts, dtype=np.float64), np.array(faces)


def capsule(
    radius: float = 0.15,
    height: float = 1.0,
    segments: int = 24,
    body_rings: int = 12,
    cap_rings: int = 5,
    joints: int = 2,
    blend: float = 0.1,
) -> SkinnedMesh:
    """Closed convex capsule along z, centred at the origin.

    ``height`` is the length of the cylindrical part. The skeleton is a
    vertical chain of ``joints`` joints spread along the cylinder.
    """
    radii, heights = [0.0], [-radius]
    for k in range(1, cap_rings + 1):
        phi = -np.pi / 2 + k * (np.pi / 2) / cap_rings
        radii.append(radius * np.cos(phi))
        heights.append(radius * np.sin(phi))
    for i in range(1, body_rings + 1):
        radii.append(radius)
        heights.append(i * height / body_rings)
    for k in range(1, cap_rings):
        phi = k * (np.pi / 2) / cap_rings
        radii.append(radius * np.cos(phi))
        heights.append(height + radius * np.sin(phi))
    radii.append(0.0)
    heights.append(height + radius)
    v, f = _rings_mesh(radii, heights, segments)
    v[:, 2] -= height / 2
    joint_z = [-height / 2 + k * height / joints for k in range(joints)]
    rest = np.stack([_translate(z) for z in joint_z])
    parents = np.arange(joints) - 1
    w = _chain_weights(v[:, 2], joint_z, blend)
    return SkinnedMesh(v, f, joints=rest, joint_parents=parents, skin_weights=w)


def cylinder(
    radius: float = 0.1,
    height: float = 1.0,
    segments: int = 16,
    rings: int = 16,
    blend: float = 0.15,
) -> SkinnedMesh:
    """Open tube along z from -height/2 to height/2 with a two-joint chain (root, mid)."""
    radii = [radius] * (rings + 1)
    heights = list(np.linspace(-height / 2, height / 2, rings + 1))
    v, f = _rings_mesh(radii, heights, segments)
    joint_z = [-height / 2, 0.0]
    rest = np.stack([_translate(z) for z in joint_z])
    w = _chain_weights(v[:, 2], joint_z, blend)
    return SkinnedMesh(v, f, joints=rest, joint_parents=np.array([-1, 0]), skin_weights=w)


def ellipsoid_person(subdivisions: int = 3, radii=(0.2, 0.15, 0.8), joints: int = 3) -> SkinnedMesh:
    """Icosphere stretched into a convex person-sized ellipsoid with a vertical joint chain."""
    base = icosphere(subdivisions)
    v = base.vertices * np.asarray(radii, dtype=np.float64)
    joint_z = list(np.linspace(-radii[2], radii[2], joints + 1)[:-1])
    rest = np.stack([_translate(z) for z in joint_z])
    w = _chain_weights(v[:, 2], joint_z, 0.1)
    return SkinnedMesh(v, base.faces, joints=rest, joint_parents=np.arange(joints) - 1, skin_weights=w)
