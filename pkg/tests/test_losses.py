import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsplat import shapes
from anchorsplat.anchor import DEFAULT_CLASSES
from anchorsplat.geometry import build_adjacency, quat_from_axis_angle
from anchorsplat.gradcheck import check_gradients
from anchorsplat.losses import (
    GaussianNeighbors,
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
from anchorsplat.params import FreeLayer
from anchorsplat.render import render

from scenes import random_layer_instance

T = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))


# --- photometric ----------------------------------------------------------------

def test_color_identical_and_black_white():
    img = np.random.default_rng(0).uniform(size=(4, 5, 3))
    assert loss_color(T(img), img).item() == 0
    assert loss_color(torch.zeros(3, 3, 3, dtype=torch.float64), np.ones((3, 3, 3))).item() == 1


def test_color_matches_loop_oracle_with_mask():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(6, 7, 3)), rng.uniform(size=(6, 7, 3))
    mask = rng.uniform(size=(6, 7)) > 0.4
    total, count = 0.0, 0
    for y in range(6):
        for x in range(7):
            if mask[y, x]:
                for c in range(3):
                    total += abs(a[y, x, c] - b[y, x, c])
                    count += 1
    assert loss_color(T(a), b, mask).item() == pytest.approx(total / count, abs=1e-12)


def test_color_shape_mismatch():
    with pytest.raises(ValueError):
        loss_color(torch.zeros(4, 4, 3, dtype=torch.float64), np.zeros((4, 5, 3)))


def test_empty_mask_gives_zero():
    assert loss_color(torch.ones(2, 2, 3, dtype=torch.float64), np.zeros((2, 2, 3)), np.zeros((2, 2), bool)).item() == 0


def test_mask_loss_examples():
    m = (np.random.default_rng(2).uniform(size=(8, 8)) > 0.5).astype(float)
    assert loss_mask(T(m), m).item() == 0
    assert loss_mask(T(m), 1 - m).item() == 1


# --- scale ----------------------------------------------------------------------

def test_scale_loss_examples():
    ref = np.full((5, 2), 0.2)
    assert loss_scale(T(ref), ref).item() == 0
    s = ref.copy()
    s[3, 0] += 0.1
    assert loss_scale(T(s), ref).item() == pytest.approx(0.1 / 5)


def test_scale_loss_loop_oracle():
    rng = np.random.default_rng(3)
    s, r = rng.uniform(size=(20, 2)), rng.uniform(size=(20, 2))
    expected = sum(abs(s[i, 0] - r[i, 0]) + abs(s[i, 1] - r[i, 1]) for i in range(20)) / 20
    assert loss_scale(T(s), r).item() == pytest.approx(expected, abs=1e-12)


# --- normals --------------------------------------------------------------------

def test_normal_loss_aligned_and_orthogonal():
    n = np.tile([0, 0, -1.0], (4, 4, 1))
    valid = np.ones((4, 4), bool)
    assert loss_normal(T(n), T(n), valid).item() == pytest.approx(0, abs=1e-12)
    assert loss_normal(T(n), T(np.tile([1.0, 0, 0], (4, 4, 1))), valid).item() == pytest.approx(1)


def test_normal_loss_renormalizes_composited_normal():
    n = np.tile([0, 0, -0.3], (2, 2, 1))  # partially covered pixel
    assert loss_normal(T(n), T(np.tile([0, 0, -1.0], (2, 2, 1))), np.ones((2, 2), bool)).item() == pytest.approx(0, abs=1e-12)


def test_normal_loss_single_front_facing_disk():
    from test_render import facing_splats, front_camera

    cam = front_camera(16)
    sp = facing_splats([[0, 0, 2.0]], [[1.0, 1.0]], [1.0], [[1.0]])
    out = render(sp, cam)
    assert loss_normal(out.normal, out.normal_from_depth, out.normal_valid).item() < 1e-3


def test_normal_loss_tilted_plane_analytic():
    angle = 0.3
    tilted = np.array([np.sin(angle), 0, -np.cos(angle)])
    n = np.tile([0, 0, -1.0], (5, 5, 1))
    got = loss_normal(T(n), T(np.tile(tilted, (5, 5, 1))), np.ones((5, 5), bool)).item()
    assert got == pytest.approx(1 - np.cos(angle), abs=1e-12)


# --- label smoothness -------------------------------------------------------------

def two_neighbors():
    return GaussianNeighbors(src=np.array([0, 1]), dst=np.array([1, 0]), weight=np.ones(2), count=2)


def test_label_smooth_identical_is_zero():
    logits = T(np.tile([0.3, -1.0, 2.0], (2, 1)))
    assert loss_label_smooth(logits, two_neighbors()).item() == pytest.approx(0, abs=1e-15)


def test_label_smooth_one_hot_vs_uniform_is_log2():
    # large logit gap makes the first distribution one-hot to double precision
    logits = T([[0.0, -1000.0], [0.0, 0.0]])
    nb = GaussianNeighbors(src=np.array([0]), dst=np.array([1]), weight=np.ones(1), count=1)
    nb.count = 2
    # only the one-hot side contributes: KL((1,0) || (0.5,0.5)) = log 2, averaged over N = 2
    assert loss_label_smooth(logits, nb).item() == pytest.approx(math.log(2) / 2, rel=1e-12)


def kl_loop_oracle(logits, face_id, adj):
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    total = 0.0
    for i in range(len(face_id)):
        nbrs = [j for j in range(len(face_id)) if face_id[j] in adj.neighbors[face_id[i]]]
        if not nbrs:
            continue
        acc = 0.0
        for j in nbrs:
            acc += sum(p[i, c] * (math.log(max(p[i, c], 1e-8)) - math.log(max(p[j, c], 1e-8))) for c in range(p.shape[1]))
        total += acc / len(nbrs)
    return total / len(face_id)


def test_label_smooth_matches_loop_oracle():
    s = random_layer_instance(0)
    layer = s["layer"]
    got = loss_label_smooth(T(layer.label_logits), s["neighbors"]).item()
    assert got == pytest.approx(kl_loop_oracle(layer.label_logits, layer.face_id, s["adj"]), abs=1e-9)


def test_neighbors_are_gaussians_on_edge_adjacent_faces():
    adj = build_adjacency(shapes.icosphere(1))
    face_id = np.array([0, 0, adj.neighbors[0][0], 5, adj.neighbors[0][1]])
    nb = gaussian_neighbors(face_id, adj)
    pairs = set(zip(nb.src.tolist(), nb.dst.tolist()))
    for i in range(5):
        for j in range(5):
            assert ((i, j) in pairs) == (face_id[j] in adj.neighbors[face_id[i]])


def test_isolated_gaussian_contributes_zero():
    adj = build_adjacency(shapes.icosphere(1))
    nb = gaussian_neighbors(np.array([0]), adj)
    assert loss_label_smooth(T([[1.0, 2.0, 3.0]]), nb).item() == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_label_smooth_shift_invariant(seed, shift):
    s = random_layer_instance(seed % 7)
    logits = np.random.default_rng(seed).normal(size=s["layer"].label_logits.shape)
    shifted = logits.copy()
    shifted[seed % len(logits)] += shift
    a = loss_label_smooth(T(logits), s["neighbors"]).item()
    b = loss_label_smooth(T(shifted), s["neighbors"]).item()
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_label_smooth_nonnegative():
    for seed in range(5):
        s = random_layer_instance(seed)
        assert loss_label_smooth(T(s["layer"].label_logits), s["neighbors"]).item() >= 0


# --- anisotropy and canonical terms -----------------------------------------------

def test_aniso_examples():
    assert loss_aniso(T([[0.1, 0.1]])).item() == 0
    assert loss_aniso(T([[0.4, 0.1]])).item() == pytest.approx(0, abs=1e-12)
    assert loss_aniso(T([[0.8, 0.1]]), ratio=4.0).item() == pytest.approx(4.0)
    assert loss_aniso(T([[0.1, 0.8], [0.1, 0.1]])).item() == pytest.approx(2.0)


def test_canon_dist_examples():
    flat = shapes.square()
    c = flat.centroids()
    assert loss_canon_dist(T(c + [0, 0, 1e-9]), c).item() == pytest.approx(0, abs=1e-8)
    assert loss_canon_dist(T(c + [0, 0, 0.05]), c).item() == pytest.approx(0.05)


def test_canon_dist_loop_oracle():
    rng = np.random.default_rng(4)
    m, c = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    expected = sum(np.sqrt(sum((m[i, k] - c[i, k]) ** 2 for k in range(3))) for i in range(20)) / 20
    assert loss_canon_dist(T(m), c).item() == pytest.approx(expected, abs=1e-12)


def test_canon_rot_examples():
    q = quat_from_axis_angle([0.2, 1, -0.4], 0.8)
    assert loss_canon_rot(T([q]), [q]).item() == pytest.approx(0, abs=1e-15)
    assert loss_canon_rot(T([-q]), [q]).item() == pytest.approx(0, abs=1e-15)
    # 90 degrees about the face normal: quaternion dot is cos(45 degrees)
    ref = np.array([1.0, 0, 0, 0])
    turned = quat_from_axis_angle([0, 0, 1], np.pi / 2)
    assert loss_canon_rot(T([turned]), [ref]).item() == pytest.approx(1 - np.cos(np.pi / 4))


# --- totals -----------------------------------------------------------------------

def test_weights_reject_negative_and_nan():
    with pytest.raises(ValueError):
        LossWeights(scale=-1)
    with pytest.raises(ValueError):
        LossWeights(color=float("nan"))


def test_totals_examples():
    w = LossWeights()
    one = torch.tensor(1.0, dtype=torch.float64)
    zero = torch.tensor(0.0, dtype=torch.float64)
    assert seg_total({k: zero for k in ("color", "scale", "normal", "label_smooth")}, w).item() == 0
    assert seg_total({k: one for k in ("color", "scale", "normal", "label_smooth")}, w).item() == pytest.approx(11.2)
    assert app_total({k: one for k in ("color", "mask", "aniso", "normal", "canon_dist", "canon_rot")}, w).item() == pytest.approx(
        1 + 1 + 100 + 0.1 + 1 + 100
    )


def test_totals_random_weighted_sum():
    rng = np.random.default_rng(5)
    w = LossWeights(**{k: float(rng.uniform(0, 5)) for k in ("color", "scale", "normal", "label_smooth", "mask", "aniso", "canon_dist", "canon_rot")})
    terms = {k: T(rng.uniform()) for k in ("color", "scale", "normal", "label_smooth")}
    expected = sum(getattr(w, k) * terms[k].item() for k in terms)
    assert seg_total(terms, w).item() == pytest.approx(expected, rel=1e-12)


def test_totals_skip_switched_off_terms():
    w = LossWeights()
    t = torch.tensor(2.0, dtype=torch.float64)
    assert seg_total({"color": t}, w).item() == 2.0
    with pytest.raises(ValueError):
        seg_total({}, w)


# --- gradients against the free parameters ----------------------------------------

def free_instance(seed):
    s = random_layer_instance(seed)
    free = FreeLayer(s["layer"])
    out = render(free.splats(s["mt"]), s["cam"])
    return s, free, out.frozen_plan(), out


def margin_target(img, rng, margin=0.05):
    """Target kept at least ``margin`` away from ``img`` so L1 kinks are not crossed."""
    sign = np.where(rng.uniform(size=img.shape) > 0.5, 1.0, -1.0)
    return img + sign * rng.uniform(margin, 3 * margin, img.shape)


GRAD_TOL = 1e-3


@pytest.mark.parametrize("seed", range(2))
def test_color_loss_gradients(seed):
    s, free, plan, out = free_instance(seed)
    target = margin_target(out.color.detach().numpy(), s["rng"])
    fn = lambda: loss_color(render(free.splats(s["mt"]), s["cam"], plan=plan).color, target)
    errs = check_gradients(fn, [free[n] for n in ("bary_logits", "log_offset", "rel_rotation", "log_scale", "color")])
    assert max(errs) < GRAD_TOL, errs


@pytest.mark.parametrize("seed", range(2))
def test_mask_loss_gradients(seed):
    s, free, plan, out = free_instance(seed)
    target = margin_target(out.alpha.detach().numpy(), s["rng"])
    fn = lambda: loss_mask(render(free.splats(s["mt"]), s["cam"], plan=plan).alpha, target)
    errs = check_gradients(fn, [free[n] for n in ("bary_logits", "log_offset", "log_scale")])
    assert max(errs) < GRAD_TOL, errs


@pytest.mark.parametrize("seed", range(2))
def test_normal_loss_gradients(seed):
    s, free, plan, _ = free_instance(seed)

    def fn():
        o = render(free.splats(s["mt"]), s["cam"], plan=plan)
        return loss_normal(o.normal, o.normal_from_depth, o.normal_valid)

    errs = check_gradients(fn, [free[n] for n in ("bary_logits", "log_offset", "rel_rotation", "log_scale")])
    assert max(errs) < GRAD_TOL, errs


def test_scale_and_aniso_gradients():
    s = random_layer_instance(3)
    free = FreeLayer(s["layer"])
    ref = s["refs"].scale[s["layer"].face_id]
    target = ref + np.where(np.random.default_rng(0).uniform(size=ref.shape) > 0.5, 0.01, -0.01) + (free.scales.detach().numpy() - ref)
    errs = check_gradients(lambda: loss_scale(free.scales, target) + loss_aniso(free.scales), [free["log_scale"]])
    assert max(errs) < GRAD_TOL, errs


def test_label_smooth_gradients():
    s = random_layer_instance(4)
    free = FreeLayer(s["layer"])
    errs = check_gradients(lambda: loss_label_smooth(free["label_logits"], s["neighbors"]), [free["label_logits"]])
    assert max(errs) < GRAD_TOL, errs


def test_canonical_gradients():
    s = random_layer_instance(5)
    free = FreeLayer(s["layer"])
    mt = s["mt"]
    cent = mt.centroids[free.face_id]
    ref_q = mt.ref_quats[free.face_id]

    def fn():
        mu, _, q = free.realize(mt)
        return loss_canon_dist(mu, cent) + loss_canon_rot(q, ref_q)

    errs = check_gradients(fn, [free[n] for n in ("bary_logits", "log_offset", "rel_rotation")])
    assert max(errs) < GRAD_TOL, errs


def test_all_losses_nonnegative_on_random_instances():
    for seed in range(3):
        s, free, plan, out = free_instance(seed)
        rng = s["rng"]
        vals = [
            loss_color(out.color, rng.uniform(size=out.color.shape)),
            loss_mask(out.alpha, rng.uniform(size=out.alpha.shape)),
            loss_normal(out.normal, out.normal_from_depth, out.normal_valid),
            loss_scale(free.scales, s["refs"].scale[s["layer"].face_id]),
            loss_label_smooth(free["label_logits"], s["neighbors"]),
            loss_aniso(free.scales),
        ]
        assert all(v.item() >= 0 for v in vals)
