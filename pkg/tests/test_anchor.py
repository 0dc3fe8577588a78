import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anchorsplat import shapes
from anchorsplat.anchor import (
    DEFAULT_CLASSES,
    FREE_SLICES,
    AnchoredGaussian,
    GaussianLayer,
    check_invariants,
    duplicate_layer,
    face_frames,
    init_seg_layer,
    realize_mean,
    realize_means,
    realize_orientation,
    reference_from_mesh,
    reparam_from_free,
    reparam_to_free,
    stratified_bary,
)
from anchorsplat.geometry import IDENTITY_QUAT, SkinnedMesh, quat_compose, quat_from_axis_angle, quat_to_matrix, transform_mesh

RIGHT_TRIANGLE = SkinnedMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), [[0, 1, 2]])


def test_realize_mean_direct_arithmetic():
    g = AnchoredGaussian(face_id=0, bary=np.array([0.2, 0.3, 0.5]), offset=0.1)
    np.testing.assert_allclose(realize_mean(g, RIGHT_TRIANGLE), [0.3, 0.5, 0.1], atol=1e-15)


def test_centroid_limit():
    g = AnchoredGaussian(face_id=0, bary=np.full(3, 1 / 3), offset=1e-12)
    np.testing.assert_allclose(realize_mean(g, RIGHT_TRIANGLE), [1 / 3, 1 / 3, 0], atol=1e-11)


def test_displacement_is_positive_multiple_of_interpolated_normal():
    rng = np.random.default_rng(0)
    mesh = shapes.icosphere(2)
    for _ in range(200):
        f = int(rng.integers(mesh.num_faces))
        b = rng.dirichlet(np.ones(3))
        d = float(np.exp(rng.uniform(-8, 0)))
        mu = realize_mean(AnchoredGaussian(face_id=f, bary=b, offset=d), mesh)
        tri = mesh.faces[f]
        p = b @ mesh.vertices[tri]
        n = b @ mesh.vertex_normals[tri]
        assert np.dot(mu - p, n) == pytest.approx(d * np.dot(n, n), rel=1e-6)
        assert np.dot(mu - p, n) > 0


def test_realize_orientation_identity_and_axis():
    mesh = shapes.icosphere(1)
    refs = reference_from_mesh(mesh)
    g = AnchoredGaussian(face_id=3, bary=np.full(3, 1 / 3), offset=0.01)
    np.testing.assert_allclose(realize_orientation(g, refs.record(3)), refs.orientation[3])
    ref = refs.record(0)
    ref.orientation = IDENTITY_QUAT.copy()
    g0 = AnchoredGaussian(face_id=0, bary=np.full(3, 1 / 3), offset=0.01, rel_rotation=quat_from_axis_angle([1, 0, 0], np.pi / 2))
    np.testing.assert_allclose(realize_orientation(g0, ref), quat_from_axis_angle([1, 0, 0], np.pi / 2), atol=1e-15)


def test_realize_orientation_matches_compose():
    rng = np.random.default_rng(1)
    mesh = shapes.icosphere(1)
    refs = reference_from_mesh(mesh)
    for f in range(10):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        g = AnchoredGaussian(face_id=f, bary=np.full(3, 1 / 3), offset=0.01, rel_rotation=q)
        np.testing.assert_allclose(realize_orientation(g, refs.record(f)), quat_compose(refs.orientation[f], q), atol=1e-12)


def test_realize_orientation_face_mismatch():
    refs = reference_from_mesh(shapes.icosphere(1))
    g = AnchoredGaussian(face_id=1, bary=np.full(3, 1 / 3), offset=0.01)
    with pytest.raises(ValueError):
        realize_orientation(g, refs.record(2))


def test_reference_right_triangle():
    refs = reference_from_mesh(RIGHT_TRIANGLE)
    np.testing.assert_allclose(refs.center[0], [1 / 3, 1 / 3, 0])
    np.testing.assert_allclose(quat_to_matrix(refs.orientation[0])[:, 2], [0, 0, 1], atol=1e-12)
    # first axis follows the longest edge (the hypotenuse)
    axis = quat_to_matrix(refs.orientation[0])[:, 0]
    assert abs(abs(axis @ np.array([-1, 1, 0]) / np.sqrt(2)) - 1) < 1e-12


def test_equilateral_scales_equal():
    s = 0.3
    v = np.array([[0, 0, 0], [s, 0, 0], [s / 2, s * np.sqrt(3) / 2, 0]])
    refs = reference_from_mesh(SkinnedMesh(v, [[0, 1, 2]]), coverage=1.0)
    assert refs.scale[0, 0] == pytest.approx(refs.scale[0, 1], rel=1e-9)


def test_unit_ellipse_circumscribes_every_face():
    mesh = shapes.ellipsoid_person(2)
    refs = reference_from_mesh(mesh, coverage=1.0)
    frame, local = face_frames(mesh)
    inside = ((local / refs.scale[:, None, :]) ** 2).sum(-1)
    assert inside.max() <= 1 + 1e-9
    # at least one vertex touches the ellipse (smallest such ellipse)
    np.testing.assert_allclose(inside.max(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(quat_to_matrix(refs.orientation)[:, :, 2], mesh.face_normals(), atol=1e-6)


def test_coverage_multiplier_scales_linearly():
    mesh = shapes.icosphere(1)
    np.testing.assert_allclose(reference_from_mesh(mesh, coverage=0.5).scale, 0.5 * reference_from_mesh(mesh, coverage=1.0).scale)


def test_init_seg_layer():
    mesh = shapes.capsule(segments=8, body_rings=3, cap_rings=2)
    refs = reference_from_mesh(mesh)
    seg = init_seg_layer(mesh, refs, len(DEFAULT_CLASSES))
    assert len(seg) == mesh.num_faces
    mu = realize_means(seg.face_id, seg.bary, seg.offset, mesh)
    assert np.linalg.norm(mu - mesh.centroids(), axis=1).max() <= 1e-4 + 1e-12
    assert np.all(seg.labels == DEFAULT_CLASSES.index("skin"))
    np.testing.assert_array_equal(seg.scale, refs.scale)
    assert np.all(seg.opacity == 1)


def test_reparam_examples():
    g = reparam_from_free(np.zeros(13 + 3), face_id=0)
    np.testing.assert_allclose(g.bary, np.full(3, 1 / 3))
    assert g.offset == 1.0


def test_reparam_rejects_non_finite():
    v = np.zeros(16)
    v[3] = np.nan
    with pytest.raises(ValueError):
        reparam_from_free(v, 0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-30, 30)))
def test_reparam_any_free_vector_is_valid_and_round_trips(vec):
    g = reparam_from_free(vec, face_id=0)
    assert np.all(g.bary >= 0) and abs(g.bary.sum() - 1) < 1e-12
    assert g.offset > 0
    assert abs(np.linalg.norm(g.rel_rotation) - 1) < 1e-12
    back = reparam_from_free(reparam_to_free(g), face_id=0)
    np.testing.assert_allclose(back.bary, g.bary, atol=1e-9)
    assert back.offset == pytest.approx(g.offset, rel=1e-9)
    np.testing.assert_allclose(back.scale, g.scale, rtol=1e-9)


def test_free_slices_cover_the_record():
    assert FREE_SLICES["label_logits"].start == 13


def test_rigid_equivariance_of_means():
    rng = np.random.default_rng(2)
    mesh = shapes.icosphere(2, radius=0.4)
    n = 100
    f = rng.integers(mesh.num_faces, size=n)
    b = rng.dirichlet(np.ones(3), size=n)
    d = rng.uniform(1e-4, 0.05, n)
    r = quat_to_matrix(quat_from_axis_angle([0.3, -1, 2], 1.1))
    m = np.eye(4)
    m[:3, :3], m[:3, 3] = r, [0.5, -0.2, 1.0]
    moved = transform_mesh(mesh, m)
    np.testing.assert_allclose(realize_means(f, b, d, moved), realize_means(f, b, d, mesh) @ r.T + m[:3, 3], atol=1e-9)


def test_check_invariants_flags_problems():
    mesh = shapes.icosphere(1)
    seg = init_seg_layer(mesh, reference_from_mesh(mesh), 3)
    assert check_invariants(seg, mesh) == []
    bad = seg.copy()
    bad.color = bad.color + 2
    assert "color outside [0, 1]" in check_invariants(bad)


def test_stratified_bary_on_simplex():
    b = stratified_bary(16, np.random.default_rng(0))
    assert b.shape == (16, 3)
    assert np.all(b >= 0)
    np.testing.assert_allclose(b.sum(1), 1)
    # one point per subdivision cell: the 16 points are distinct
    assert len(np.unique(b.round(12), axis=0)) == 16


def test_duplicate_layer_preserves_binding():
    mesh = shapes.icosphere(1)
    refs = reference_from_mesh(mesh)
    seg = init_seg_layer(mesh, refs, 3)
    dup = duplicate_layer(seg, 4, np.random.default_rng(0), refs=refs, color=[0.2, 0.4, 0.6])
    assert len(dup) == 4 * len(seg)
    np.testing.assert_array_equal(dup.face_id, np.repeat(seg.face_id, 4))
    np.testing.assert_array_equal(dup.offset, np.repeat(seg.offset, 4))
    np.testing.assert_allclose(dup.scale[:, 0], dup.scale[:, 1])
    np.testing.assert_allclose(dup.color, np.tile([0.2, 0.4, 0.6], (len(dup), 1)))


def test_layer_from_records_round_trip():
    mesh = shapes.icosphere(1)
    seg = init_seg_layer(mesh, reference_from_mesh(mesh), 3)
    again = GaussianLayer.from_records([seg.record(i) for i in range(len(seg))], name="seg")
    np.testing.assert_allclose(again.bary, seg.bary, atol=1e-15)
    np.testing.assert_allclose(again.offset, seg.offset)
