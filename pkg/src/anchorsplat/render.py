"""Software rasterizer for 2D Gaussian disks.

Each pixel ray is intersected with the plane of every disk whose screen-space
3-sigma box covers the pixel; the falloff ``exp(-(u^2 + v^2) / 2)`` is evaluated
in the disk's own frame at the hit point. Disks are sorted front to back by
the camera depth of their means (ties by index) and composited with

    C = sum_i c_i a_i prod_{j<i} (1 - a_j),   a_i = opacity_i * falloff_i.

Pairs with ``a_i < 1e-4`` are skipped, as are pairs whose accumulated
transmittance has already fallen below 1e-4. Everything after the pair
selection is written in torch so gradients reach means, rotations, scales,
opacities and features.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .anchor import ClassTable, Splats

__all__ = [
    "Camera",
    "RenderPlan",
    "RenderOutput",
    "render",
    "plan_render",
    "normals_from_depth",
    "render_label",
    "render_layer_mask",
    "WEIGHT_CUTOFF",
    "BOUND_SIGMA",
]

WEIGHT_CUTOFF = 1e-4
BOUND_SIGMA = 3.0
NEAR = 1e-3
DEPTH_ALPHA_MIN = 1e-8


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        r = self.world_to_cam[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8):
            raise ValueError("extrinsic rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fx=256.0, fy=None, width=256, height=256, cx=None, cy=None):
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        m = np.eye(4)
        m[:3, :3] = np.stack([x, y, z])
        m[:3, 3] = -m[:3, :3] @ eye
        return cls(
            fx=float(fx),
            fy=float(fx if fy is None else fy),
            cx=width / 2 if cx is None else float(cx),
            cy=height / 2 if cy is None else float(cy),
            world_to_cam=m,
            width=int(width),
            height=int(height),
        )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        r, t = self.world_to_cam[:3, :3], self.world_to_cam[:3, 3]
        return -r.T @ t

    def pixel_rays(self) -> np.ndarray:
        """Camera-space ray directions with z = 1 through pixel centres, (H*W, 3)."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack(
            [(xs.ravel() + 0.5 - self.cx) / self.fx, (ys.ravel() + 0.5 - self.cy) / self.fy, np.ones(xs.size)],
            axis=1,
        )

    def project(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) @ self.world_to_cam[:3, :3].T + self.world_to_cam[:3, 3]
        return np.stack([self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy, p[:, 2]], 1)


@dataclass
class RenderPlan:
    """Active (pixel, splat) pairs in front-to-back order for one camera."""

    pix: np.ndarray
    sid: np.ndarray
    slot: np.ndarray
    row: np.ndarray
    upix: np.ndarray
    depth_k: int
    n_splats: int
    normal_valid: Optional[np.ndarray] = None  # pinned depth-normal validity, (H, W) bool


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, F) composited features plus background
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W), alpha-normalized
    normal: torch.Tensor  # (H, W, 3) composited camera-facing splat normals, camera frame
    normal_from_depth: torch.Tensor  # (H, W, 3)
    normal_valid: torch.Tensor  # (H, W) bool
    plan: RenderPlan

    def frozen_plan(self) -> RenderPlan:
        """This render's pairs, order and depth-normal validity, for exact re-evaluation."""
        return replace(self.plan, normal_valid=self.normal_valid.numpy().copy())

    def numpy(self) -> dict:
        return {
            k: getattr(self, k).detach().cpu().numpy()
            for k in ("color", "alpha", "depth", "normal", "normal_from_depth", "normal_valid")
        }


def _camera_space(splats: Splats, cam: Camera):
    r = torch.as_tensor(cam.world_to_cam[:3, :3], dtype=splats.means.dtype)
    t = torch.as_tensor(cam.world_to_cam[:3, 3], dtype=splats.means.dtype)
    mc = splats.means @ r.T + t
    axes = torch.einsum("ij,njk->nik", r, splats.rotations)
    return mc, axes


def _splat_terms(mc, axes, scales, opacities, xp):
    """Per-splat quantities so each (pixel, splat) pair costs a few scalar ops.

    Columns: normal (3), mean.normal, u-axis / su (3), mean.u-axis / su,
    v-axis / sv (3), mean.v-axis / sv, opacity.
    """
    n = axes[:, :, 2]
    au = axes[:, :, 0] / scales[:, 0:1]
    av = axes[:, :, 1] / scales[:, 1:2]
    cols = [n, (mc * n).sum(1)[:, None], au, (mc * au).sum(1)[:, None], av, (mc * av).sum(1)[:, None], opacities[:, None]]
    return xp.concatenate(cols, 1) if xp is np else torch.cat(cols, 1)


def _pair_weights(terms, dx, dy, sid, xp):
    """Hit depth, alpha and ray/plane denominator; rays are (dx, dy, 1)."""
    g = terms[sid]
    g = g.T if xp is np else g.unbind(1)
    denom = dx * g[0] + dy * g[1] + g[2]
    safe = xp.where(xp.abs(denom) > 1e-12, denom, xp.ones_like(denom))
    t = g[3] / safe
    u = t * (dx * g[4] + dy * g[5] + g[6]) - g[7]
    v = t * (dx * g[8] + dy * g[9] + g[10]) - g[11]
    return t, g[12] * xp.exp(-0.5 * (u * u + v * v)), denom


class _Composite(torch.autograd.Function):
    """Per-pair falloff, front-to-back compositing and per-pixel accumulation in one node.

    Pairs arrive grouped by pixel in front-to-back order. Transmittance is a
    segmented cumulative sum of ``log(1 - a)``. Output columns per pixel:
    alpha, weighted hit depth, then the composited per-splat ``values``. The
    backward pass is written out by hand and matches the autograd graph of the
    padded formulation (``render(fused=False)``).
    """

    @staticmethod
    def forward(ctx, terms, values, sid, pix, row, first, last, dx, dy, P):
        S = terms.shape[0]
        tT = terms.T.contiguous()
        g = [tT[k].index_select(0, sid) for k in range(13)]
        denom = dx * g[0] + dy * g[1] + g[2]
        ok = denom.abs() > 1e-12
        safe = torch.where(ok, denom, torch.ones_like(denom))
        t = g[3] / safe
        pu = dx * g[4] + dy * g[5] + g[6]
        pv = dx * g[8] + dy * g[9] + g[10]
        u = t * pu - g[7]
        v = t * pv - g[11]
        G = torch.exp(-0.5 * (u * u + v * v))
        a = g[12] * G
        logkeep = torch.log1p(-a).clamp_min(-700.0)
        excl = torch.cumsum(logkeep, 0) - logkeep
        trans = torch.exp(excl - excl.index_select(0, first).index_select(0, row))
        w = a * trans
        vT = values.T.contiguous()
        vals = [c.index_select(0, sid) for c in vT]
        acc = torch.zeros(2 + len(vals), P, dtype=a.dtype)
        acc[0].index_add_(0, pix, w)
        acc[1].index_add_(0, pix, w * t)
        for i, c in enumerate(vals):
            acc[2 + i].index_add_(0, pix, w * c)
        ctx.save_for_backward(sid, pix, row, last, dx, dy, ok, safe, t, pu, pv, u, v, G, a, trans, w, g[12], *vals)
        ctx.n_splats = S
        return acc.T

    @staticmethod
    def backward(ctx, grad):
        sid, pix, row, last, dx, dy, ok, safe, t, pu, pv, u, v, G, a, trans, w, opac, *vals = ctx.saved_tensors
        S = ctx.n_splats
        gT = grad.T.contiguous()
        gp = [c.index_select(0, pix) for c in gT]
        s = gp[0] + gp[1] * t
        for gc, vc in zip(gp[2:], vals):
            s = s + gc * vc
        # d/da_k of sum_j w_j s_j: T_k s_k minus the pairs behind k, scaled by 1 / (1 - a_k)
        ws = w * s
        incl = torch.cumsum(ws, 0)
        behind = incl.index_select(0, last).index_select(0, row) - incl
        da = trans * s - behind / (1.0 - a).clamp_min(1e-12)
        dt = w * gp[1]
        dG = da * opac
        dq = -dG * G  # gradient of the halved squared radius
        du = dq * u
        dv = dq * v
        dt = dt + du * pu + dv * pv
        tu, tv = du * t, dv * t
        dden = torch.where(ok, -dt * t / safe, torch.zeros_like(dt))
        gterms = gvalues = None
        if ctx.needs_input_grad[0]:
            dg = [dden * dx, dden * dy, dden, dt / safe, tu * dx, tu * dy, tu, -du, tv * dx, tv * dy, tv, -dv, da * G]
            gterms = torch.zeros(13, S, dtype=a.dtype)
            for i, d in enumerate(dg):
                gterms[i].index_add_(0, sid, d)
            gterms = gterms.T
        if ctx.needs_input_grad[1]:
            gvalues = torch.zeros(len(gp) - 2, S, dtype=a.dtype)
            for i, gc in enumerate(gp[2:]):
                gvalues[i].index_add_(0, sid, w * gc)
            gvalues = gvalues.T
        return gterms, gvalues, None, None, None, None, None, None, None, None


def _ray_xy(pix, cam: Camera):
    return (pix % cam.width + 0.5 - cam.cx) / cam.fx, (pix // cam.width + 0.5 - cam.cy) / cam.fy


def plan_render(splats: Splats, cam: Camera, cutoff: float = WEIGHT_CUTOFF, bound_sigma: float = BOUND_SIGMA) -> RenderPlan:
    """Select the (pixel, splat) pairs that contribute and order them per pixel."""
    with torch.no_grad():
        mc, axes = _camera_space(splats, cam)
    mc, axes = mc.cpu().numpy(), axes.cpu().numpy()
    scales = splats.scales.detach().cpu().numpy()
    opac = splats.opacities.detach().cpu().numpy()
    n = len(mc)
    W, H = cam.width, cam.height
    empty = RenderPlan(*(np.zeros(0, dtype=np.int64) for _ in range(5)), depth_k=1, n_splats=n)
    if n == 0:
        return empty

    z = mc[:, 2]
    front = z > NEAR
    k = bound_sigma
    tu = axes[:, :, 0] * (k * scales[:, 0:1])
    tv = axes[:, :, 1] * (k * scales[:, 1:2])
    corners = np.stack([mc + tu + tv, mc + tu - tv, mc - tu + tv, mc - tu - tv], axis=1)
    cz = corners[:, :, 2]
    ok = np.all(cz > NEAR, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        px = cam.fx * corners[:, :, 0] / cz + cam.cx
        py = cam.fy * corners[:, :, 1] / cz + cam.cy
    x0 = np.where(ok, np.ceil(np.nanmin(np.where(ok[:, None], px, 0), axis=1) - 0.5), 0)
    x1 = np.where(ok, np.floor(np.nanmax(np.where(ok[:, None], px, 0), axis=1) - 0.5), W - 1)
    y0 = np.where(ok, np.ceil(np.nanmin(np.where(ok[:, None], py, 0), axis=1) - 0.5), 0)
    y1 = np.where(ok, np.floor(np.nanmax(np.where(ok[:, None], py, 0), axis=1) - 0.5), H - 1)
    x0, x1 = np.clip(x0, 0, W).astype(np.int64), np.clip(x1, -1, W - 1).astype(np.int64)
    y0, y1 = np.clip(y0, 0, H).astype(np.int64), np.clip(y1, -1, H - 1).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    counts = np.where(front, bw * bh, 0)
    total = int(counts.sum())
    if total == 0:
        return empty

    sid = np.repeat(np.arange(n), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    off = np.arange(total) - start
    bws = bw[sid]
    pxi = x0[sid] + off % bws
    pyi = y0[sid] + off // bws
    pix = pyi * W + pxi

    # selection only, so single precision is enough here
    dx, dy = (r.astype(np.float32) for r in _ray_xy(pix, cam))
    terms = _splat_terms(mc, axes, scales, opac, np).astype(np.float32)
    t, a, denom = _pair_weights(terms, dx, dy, sid, np)
    a = a.astype(np.float64)
    active = (np.abs(denom) > 1e-12) & (t > NEAR) & (a >= cutoff)
    sid, pix = sid[active], pix[active]
    if len(sid) == 0:
        return empty

    rank = np.empty(n, dtype=np.int64)
    rank[np.argsort(z, kind="stable")] = np.arange(n)
    order = np.lexsort((rank[sid], pix))
    sid, pix, a = sid[order], pix[order], a[active][order]

    # a pair whose exclusive transmittance is below the cutoff can only
    # contribute less than the cutoff; drop it and everything behind it
    upix, first, row = np.unique(pix, return_index=True, return_inverse=True)
    logkeep = np.log(np.clip(1.0 - a, 1e-300, 1.0))
    csum = np.cumsum(logkeep)
    excl = csum - logkeep - (csum[first] - logkeep[first])[row]
    visible = excl >= np.log(cutoff)
    if not visible.all():
        sid, pix = sid[visible], pix[visible]
        upix, first, row = np.unique(pix, return_index=True, return_inverse=True)
    slot = np.arange(len(pix)) - first[row]
    return RenderPlan(
        pix=pix, sid=sid, slot=slot, row=row.reshape(-1), upix=upix, depth_k=int(slot.max()) + 1, n_splats=n
    )


def render(
    splats: Splats,
    cam: Camera,
    backdrop: Optional[Splats] = None,
    background=None,
    plan: Optional[RenderPlan] = None,
    cutoff: float = WEIGHT_CUTOFF,
    alpha_min: float = 0.5,
    fused: bool = True,
) -> RenderOutput:
    """Composite ``splats`` (and gradient-frozen ``backdrop`` splats) into ``cam``.

    ``plan`` fixes the contributing pairs and their order, e.g. to evaluate
    finite differences on one smooth piece of the renderer. ``fused=False``
    builds the plain autograd graph instead of the hand-written backward.
    """
    if backdrop is not None and len(backdrop):
        if backdrop.features.shape[1] != splats.features.shape[1]:
            raise ValueError("backdrop features must match splat features")
        allsp = Splats.cat([splats, backdrop.detach()]) if len(splats) else backdrop.detach()
    else:
        allsp = splats
    dtype = allsp.means.dtype
    nfeat = allsp.features.shape[1]
    H, W = cam.height, cam.width
    P = H * W
    if plan is None:
        plan = plan_render(allsp, cam, cutoff=cutoff)
    elif plan.n_splats != len(allsp):
        raise ValueError("render plan was built for a different splat count")

    bg = torch.zeros(nfeat, dtype=dtype) if background is None else torch.as_tensor(background, dtype=dtype).reshape(-1)
    if len(plan.pix) == 0:
        zero = torch.zeros(P, dtype=dtype)
        color = (bg[None, :].expand(P, nfeat)).clone()
        alpha = zero
        depth = zero
        normal = torch.zeros(P, 3, dtype=dtype)
    else:
        mc, axes = _camera_space(allsp, cam)
        sid = torch.as_tensor(plan.sid)
        pix = torch.as_tensor(plan.pix)
        dx, dy = (torch.as_tensor(r, dtype=dtype) for r in _ray_xy(plan.pix, cam))
        terms = _splat_terms(mc, axes, allsp.scales, allsp.opacities, torch)
        U, K = len(plan.upix), plan.depth_k
        flat = torch.as_tensor(plan.row * K + plan.slot)

        n_cam = axes[:, :, 2]
        flip = torch.where((mc * n_cam).sum(1) > 0, -1.0, 1.0).to(dtype).detach()
        n_face = n_cam * flip[:, None]

        if fused:
            first = np.flatnonzero(plan.slot == 0)
            last = np.append(first[1:], len(plan.slot)) - 1
            acc = _Composite.apply(
                terms, torch.cat([allsp.features, n_face], 1), sid, pix, torch.as_tensor(plan.row),
                torch.as_tensor(first), torch.as_tensor(last), dx, dy, P,
            )
            alpha, dsum = acc[:, 0], acc[:, 1]
            color, normal = acc[:, 2 : 2 + nfeat], acc[:, 2 + nfeat :]
        else:
            t, a, _ = _pair_weights(terms, dx, dy, sid, torch)
            keep = torch.ones(U * K, dtype=dtype).index_put((flat,), 1.0 - a)
            trans = torch.cumprod(keep.reshape(U, K), dim=1)
            excl = torch.cat([torch.ones(U, 1, dtype=dtype), trans[:, :-1]], dim=1).reshape(-1)
            wgt = a * excl[flat]
            alpha = torch.zeros(P, dtype=dtype).index_add(0, pix, wgt)
            color = torch.zeros(P, nfeat, dtype=dtype).index_add(0, pix, wgt[:, None] * allsp.features[sid])
            dsum = torch.zeros(P, dtype=dtype).index_add(0, pix, wgt * t)
            normal = torch.zeros(P, 3, dtype=dtype).index_add(0, pix, wgt[:, None] * n_face[sid])
        color = color + (1.0 - alpha)[:, None] * bg[None, :]
        # depth is undefined where nothing was hit; a floor keeps the quotient's gradient finite
        hit = alpha > DEPTH_ALPHA_MIN
        depth = torch.where(hit, dsum / torch.where(hit, alpha, torch.ones_like(alpha)), torch.zeros_like(alpha))

    alpha_img = alpha.reshape(H, W)
    depth_img = depth.reshape(H, W)
    nd, valid = normals_from_depth(depth_img, cam, alpha_img, alpha_min=alpha_min, valid=plan.normal_valid)
    return RenderOutput(
        color=color.reshape(H, W, nfeat),
        alpha=alpha_img,
        depth=depth_img,
        normal=normal.reshape(H, W, 3),
        normal_from_depth=nd,
        normal_valid=valid,
        plan=plan,
    )


def normals_from_depth(depth, cam: Camera, alpha=None, alpha_min: float = 0.5, valid=None):
    """Camera-frame normals from central differences of back-projected depth.

    Normals face the camera (negative z for a fronto-parallel plane). A pixel
    is valid when it and its four neighbours have alpha >= ``alpha_min`` and it
    is not on the image border; invalid pixels get a zero vector. Passing
    ``valid`` pins the validity mask instead of deriving it from alpha.
    """
    depth = torch.as_tensor(depth, dtype=torch.float64) if not torch.is_tensor(depth) else depth
    H, W = depth.shape
    dtype = depth.dtype
    ys, xs = torch.meshgrid(torch.arange(H, dtype=dtype), torch.arange(W, dtype=dtype), indexing="ij")
    X = (xs + 0.5 - cam.cx) / cam.fx * depth
    Y = (ys + 0.5 - cam.cy) / cam.fy * depth
    pts = torch.stack([X, Y, depth], dim=-1)
    out = torch.zeros(H, W, 3, dtype=dtype)
    mask = torch.zeros(H, W, dtype=torch.bool)
    if H < 3 or W < 3:
        return out, mask
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    c = torch.cross(dy, dx, dim=-1)
    norm = c.norm(dim=-1)
    if alpha is None:
        ok = depth > 0
    else:
        alpha = torch.as_tensor(alpha, dtype=dtype) if not torch.is_tensor(alpha) else alpha
        ok = alpha.detach() >= alpha_min
    if valid is None:
        inner = ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2] & ok[2:, 1:-1] & ok[:-2, 1:-1] & (norm.detach() > 0)
    else:
        inner = torch.as_tensor(np.asarray(valid, dtype=bool))[1:-1, 1:-1] & (norm.detach() > 0)
    safe = torch.where(inner, norm, torch.ones_like(norm))
    n = torch.where(inner[..., None], c / safe[..., None], torch.zeros_like(c))
    out = torch.nn.functional.pad(n.permute(2, 0, 1), (1, 1, 1, 1)).permute(1, 2, 0)
    mask[1:-1, 1:-1] = inner
    return out, mask


def label_features(label_logits, classes: ClassTable, soft: bool = True) -> torch.Tensor:
    """Per-splat label color: expected class color (soft) or argmax class color."""
    colors = torch.as_tensor(classes.color_array())
    logits = torch.as_tensor(label_logits, dtype=torch.float64) if not torch.is_tensor(label_logits) else label_logits
    if logits.shape[-1] != len(classes):
        raise KeyError(f"label logits have {logits.shape[-1]} classes, table has {len(classes)}")
    if soft:
        return torch.softmax(logits, dim=-1) @ colors.to(logits.dtype)
    return colors[torch.argmax(logits.detach(), dim=-1)]


def render_label(
    splats: Splats,
    labels,
    classes: ClassTable,
    cam: Camera,
    backdrop: Optional[Splats] = None,
    soft: bool = False,
    **kwargs,
) -> RenderOutput:
    """Render class colors. ``labels`` are integer class ids or (N, C) logits."""
    labels_t = labels if torch.is_tensor(labels) else torch.as_tensor(np.asarray(labels))
    if labels_t.dim() == 1:
        classes.check(labels_t.numpy())
        feats = torch.as_tensor(classes.color_array())[labels_t.long()]
    else:
        feats = label_features(labels_t, classes, soft=soft)
    sp = splats.with_features(feats) if not torch.is_tensor(labels) else Splats(
        splats.means, splats.rotations, splats.scales, splats.opacities, feats
    )
    return render(sp, cam, backdrop=backdrop, **kwargs)


def render_layer_mask(
    layers: Sequence[Splats],
    target: int,
    cam: Camera,
    backdrop: Optional[Splats] = None,
    **kwargs,
) -> torch.Tensor:
    """Composite with layer ``target`` white and every other layer (and backdrop) black."""
    parts = []
    for i, sp in enumerate(layers):
        if len(sp) == 0:
            continue
        val = torch.full((len(sp), 1), 1.0 if i == target else 0.0, dtype=sp.means.dtype)
        parts.append(Splats(sp.means, sp.rotations, sp.scales, sp.opacities, val))
    if backdrop is not None and len(backdrop):
        parts.append(backdrop.detach().with_features(torch.zeros(len(backdrop), 1, dtype=backdrop.means.dtype)))
    if not parts:
        return torch.zeros(cam.height, cam.width, dtype=torch.float64)
    return render(Splats.cat(parts), cam, **kwargs).color[..., 0]
