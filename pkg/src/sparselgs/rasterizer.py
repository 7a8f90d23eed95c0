"""Software rasterizer for Gaussian clouds with analytic gradients.

Forward pass: perspective-project every Gaussian (EWA-style 2D covariance
J W Sigma W^T J^T plus a low-pass diagonal floor), sort globally by depth,
then composite color, per-granularity semantic codes and alpha front to back
over each Gaussian's screen bounding box — equivalent to per-tile traversal
in the same global order, while staying exact.

Backward pass: replays the composite in reverse with per-pixel suffix sums
of downstream contributions, then chains pixel-space gradients through the
conic, the projection Jacobian and the covariance factorization to every
Gaussian field and, on request, to a camera pose tangent.

The per-pixel loops run as numba kernels when available (see _kernels); a
pure-numpy fallback implements the identical flat-buffer protocol and is
kept as a cross-check (SLGS_DISABLE_NUMBA=1 forces it).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .scene import Camera, GaussianCloud, Granularity, so3_exp

DEFAULT_ALPHA_CLAMP = 0.99
DEFAULT_T_FLOOR = 1e-4
DEFAULT_CUTOFF_SIGMA = 3.0
DEFAULT_COV2D_FLOOR = 0.3

if os.environ.get("SLGS_DISABLE_NUMBA"):
    _kernels = None
else:
    try:
        from . import _kernels
    except ImportError:  # pragma: no cover - numba is normally present
        _kernels = None


@dataclass
class Projected2D:
    """A Gaussian splatted onto the image plane."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    parent: int


@dataclass
class RenderOutput:
    color: np.ndarray  # H x W x 3
    features: dict  # Granularity -> H x W x d
    alpha: np.ndarray  # H x W
    contributors: np.ndarray  # H x W, number of composited Gaussians


@dataclass
class Gradients:
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    sem_codes: dict
    pose: np.ndarray | None = None
    # screen-space positional gradient per Gaussian, for densification
    mean2d_norm: np.ndarray | None = None


@dataclass
class RenderContext:
    """Intermediate state a backward pass needs; tied to one forward pass."""

    cloud: GaussianCloud
    cloud_version: int
    cam: Camera
    granularities: tuple
    order: np.ndarray  # indices into the cloud, ascending depth
    t_cam: np.ndarray  # (K,3) camera-space means
    mean2d: np.ndarray  # (K,2)
    conic: np.ndarray  # (K,3) = (a, b, c) of the inverse 2D covariance
    M: np.ndarray  # (K,3,3) world-rotated covariances W Sigma W^T
    W: np.ndarray  # (3,3) effective camera rotation
    opacities: np.ndarray  # (K,)
    feats: np.ndarray  # (K, F) concatenated semantic codes in render order
    bboxes: tuple  # (x0s, x1s, y0s, y1s) int64 arrays
    offsets: np.ndarray  # (K,) exclusive prefix sums of bbox areas
    alpha_buf: np.ndarray  # flat effective alphas
    t_buf: np.ndarray  # flat arrival transmittances
    alpha_clamp: float = DEFAULT_ALPHA_CLAMP


def _effective_pose(cam: Camera, pose_delta):
    if pose_delta is None:
        return cam.rotation, cam.translation
    xi = np.asarray(pose_delta, dtype=np.float64).reshape(6)
    E = so3_exp(xi[:3])
    return E @ cam.rotation, E @ cam.translation + xi[3:]


def _project_arrays(cloud: GaussianCloud, cam: Camera, pose_delta=None, cov2d_floor=DEFAULT_COV2D_FLOOR):
    """Cull, project and depth-sort the cloud.  Returns arrays in depth order."""
    W, trans = _effective_pose(cam, pose_delta)
    t = cloud.means @ W.T + trans
    keep = t[:, 2] > cam.near
    idx = np.nonzero(keep)[0]
    t = t[keep]
    order_local = np.argsort(t[:, 2], kind="stable")
    idx = idx[order_local]
    t = t[order_local]

    z = t[:, 2]
    mean2d = np.stack([cam.fx * t[:, 0] / z + cam.cx, cam.fy * t[:, 1] / z + cam.cy], axis=1)

    Sigma = cloud.covariances()[idx]
    M = np.einsum("ij,njk,lk->nil", W, Sigma, W)
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * t[:, 0] / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * t[:, 1] / (z * z)
    cov2d = np.einsum("nij,njk,nlk->nil", J, M, J)
    cov2d[:, 0, 0] += cov2d_floor
    cov2d[:, 1, 1] += cov2d_floor

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.stack(
        [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1
    )
    return idx, t, mean2d, cov2d, conic, M, J, W


def project(cloud: GaussianCloud, cam: Camera, pose_delta=None, cov2d_floor=DEFAULT_COV2D_FLOOR):
    """Project to a depth-sorted list of Projected2D (culled at the near plane)."""
    idx, t, mean2d, cov2d, _, _, _, _ = _project_arrays(cloud, cam, pose_delta, cov2d_floor)
    return [
        Projected2D(mean2d=mean2d[k].copy(), cov2d=cov2d[k].copy(), depth=float(t[k, 2]), parent=int(idx[k]))
        for k in range(len(idx))
    ]


def _bounding_boxes(mean2d, cov2d, cutoff_sigma, width, height):
    K = len(mean2d)
    if cutoff_sigma is None:
        x0 = np.zeros(K, dtype=np.int64)
        y0 = np.zeros(K, dtype=np.int64)
        x1 = np.full(K, width, dtype=np.int64)
        y1 = np.full(K, height, dtype=np.int64)
        return x0, x1, y0, y1
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(mid * mid - (cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2), 0.0))
    radius = np.ceil(cutoff_sigma * np.sqrt(mid + disc)) + 1.0
    x0 = np.clip(np.floor(mean2d[:, 0] - radius), 0, width).astype(np.int64)
    x1 = np.clip(np.ceil(mean2d[:, 0] + radius) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.floor(mean2d[:, 1] - radius), 0, height).astype(np.int64)
    y1 = np.clip(np.ceil(mean2d[:, 1] + radius) + 1, 0, height).astype(np.int64)
    return x0, x1, y0, y1


def _composite_forward_numpy(
    K, x0s, x1s, y0s, y1s, mean2d, conic, opac, colors, feats,
    alpha_clamp, t_floor, color_img, feat_img, T_img, contrib,
    offsets, alpha_buf, t_buf, save_state,
):
    F = feats.shape[1]
    for k in range(K):
        x0, x1, y0, y1 = x0s[k], x1s[k], y0s[k], y1s[k]
        if x0 >= x1 or y0 >= y1:
            continue
        box = (slice(y0, y1), slice(x0, x1))
        area = (y1 - y0) * (x1 - x0)
        Tb = T_img[box].copy()
        live = Tb > t_floor
        dx = np.arange(x0, x1, dtype=np.float64)[None, :] - mean2d[k, 0]
        dy = np.arange(y0, y1, dtype=np.float64)[:, None] - mean2d[k, 1]
        a, b, c = conic[k]
        sig = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
        alpha = np.where(live, np.minimum(opac[k] * np.exp(-sig), alpha_clamp), 0.0)
        if save_state:
            alpha_buf[offsets[k] : offsets[k] + area] = alpha.ravel()
            t_buf[offsets[k] : offsets[k] + area] = Tb.ravel()
        w = alpha * Tb
        color_img[box] += w[:, :, None] * colors[k]
        if F:
            feat_img[box] += w[:, :, None] * feats[k]
        contrib[box] += w > 0
        T_img[box] = Tb * (1.0 - alpha)


def _composite_backward_numpy(
    K, x0s, x1s, y0s, y1s, mean2d, conic, opac, colors, feats,
    alpha_clamp, grad_color, grad_feat, grad_alpha, use_color, use_feat, use_alpha,
    offsets, alpha_buf, t_buf, g_mean2d, g_conic, g_opac, g_color, g_feat, suffix,
):
    for k in range(K - 1, -1, -1):
        x0, x1, y0, y1 = x0s[k], x1s[k], y0s[k], y1s[k]
        if x0 >= x1 or y0 >= y1:
            continue
        box = (slice(y0, y1), slice(x0, x1))
        shape = (y1 - y0, x1 - x0)
        area = shape[0] * shape[1]
        alpha = alpha_buf[offsets[k] : offsets[k] + area].reshape(shape)
        Tb = t_buf[offsets[k] : offsets[k] + area].reshape(shape)
        D = np.zeros(shape)
        if use_color:
            D += grad_color[box] @ colors[k]
        if use_feat:
            D += grad_feat[box] @ feats[k]
        if use_alpha:
            D += grad_alpha[box]
        w = alpha * Tb
        active = alpha > 0
        one_minus = np.where(active, 1.0 - alpha, 1.0)
        g_a = np.where(active, Tb * D - suffix[box] / one_minus, 0.0)
        suffix[box] += D * w
        if use_color:
            g_color[k] = np.einsum("yx,yxc->c", w, grad_color[box])
        if use_feat:
            g_feat[k] = np.einsum("yx,yxc->c", w, grad_feat[box])
        dx = np.arange(x0, x1, dtype=np.float64)[None, :] - mean2d[k, 0]
        dy = np.arange(y0, y1, dtype=np.float64)[:, None] - mean2d[k, 1]
        a, b, c = conic[k]
        sig = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
        G = np.exp(-sig)
        m = active & (opac[k] * G < alpha_clamp)
        g_a = np.where(m, g_a, 0.0)
        g_opac[k] = np.sum(g_a * G)
        g_sig = -g_a * opac[k] * G
        g_mean2d[k, 0] = -np.sum(g_sig * (a * dx + b * dy))
        g_mean2d[k, 1] = -np.sum(g_sig * (b * dx + c * dy))
        g_conic[k, 0] = 0.5 * np.sum(g_sig * dx * dx)
        g_conic[k, 1] = 0.5 * np.sum(g_sig * dx * dy)
        g_conic[k, 2] = 0.5 * np.sum(g_sig * dy * dy)


def render(
    cloud: GaussianCloud,
    cam: Camera,
    granularities=(),
    *,
    pose_delta=None,
    alpha_clamp=DEFAULT_ALPHA_CLAMP,
    transmittance_floor=DEFAULT_T_FLOOR,
    cutoff_sigma=DEFAULT_CUTOFF_SIGMA,
    cov2d_floor=DEFAULT_COV2D_FLOOR,
    want_context=False,
):
    """Composite the cloud into color / semantic-feature / alpha images.

    ``cutoff_sigma=None`` rasterizes every Gaussian over the full frame and
    ``transmittance_floor=0`` disables early termination; together they make
    the forward map smooth, which the finite-difference gradient checks rely
    on.  Defaults favor speed and match common splatting practice.
    """
    granularities = tuple(sorted(Granularity(g) for g in granularities))
    for g in granularities:
        if g not in cloud.sem_codes:
            raise ValueError(f"cloud carries no codes for granularity {g.name}")
    H, W = cam.height, cam.width
    d = cloud.semantic_dim or 0
    F = d * len(granularities)

    idx, t, mean2d, cov2d, conic, M, _, Wrot = _project_arrays(cloud, cam, pose_delta, cov2d_floor)
    K = len(idx)
    opac = cloud.opacities()[idx]
    feats = (
        np.concatenate([cloud.sem_codes[g][idx] for g in granularities], axis=1)
        if granularities
        else np.zeros((K, 0))
    )
    x0s, x1s, y0s, y1s = _bounding_boxes(mean2d, cov2d, cutoff_sigma, W, H)
    areas = np.maximum(x1s - x0s, 0) * np.maximum(y1s - y0s, 0)
    offsets = np.zeros(K, dtype=np.int64)
    if K:
        offsets[1:] = np.cumsum(areas)[:-1]
    total = int(areas.sum())

    color_img = np.zeros((H, W, 3))
    feat_img = np.zeros((H, W, F))
    T_img = np.ones((H, W))
    contrib = np.zeros((H, W), dtype=np.int32)
    if want_context:
        alpha_buf = np.zeros(total)
        t_buf = np.zeros(total)
    else:
        alpha_buf = np.zeros(1)
        t_buf = np.zeros(1)

    if _kernels is not None:
        _kernels.composite_forward(
            K, x0s, x1s, y0s, y1s, mean2d, conic, opac,
            np.ascontiguousarray(cloud.colors[idx]), np.ascontiguousarray(feats),
            float(alpha_clamp), float(transmittance_floor),
            color_img, feat_img, T_img, contrib,
            offsets, alpha_buf, t_buf, bool(want_context),
        )
    else:
        _composite_forward_numpy(
            K, x0s, x1s, y0s, y1s, mean2d, conic, opac, cloud.colors[idx], feats,
            alpha_clamp, transmittance_floor, color_img, feat_img, T_img, contrib,
            offsets, alpha_buf, t_buf, want_context,
        )

    features = {
        g: feat_img[:, :, i * d : (i + 1) * d] for i, g in enumerate(granularities)
    }
    out = RenderOutput(color=color_img, features=features, alpha=1.0 - T_img, contributors=contrib)
    if not want_context:
        return out
    ctx = RenderContext(
        cloud=cloud,
        cloud_version=cloud.version,
        cam=cam,
        granularities=granularities,
        order=idx,
        t_cam=t,
        mean2d=mean2d,
        conic=conic,
        M=M,
        W=Wrot,
        opacities=opac,
        feats=feats,
        bboxes=(x0s, x1s, y0s, y1s),
        offsets=offsets,
        alpha_buf=alpha_buf,
        t_buf=t_buf,
        alpha_clamp=alpha_clamp,
    )
    return out, ctx


def render_backward(
    ctx: RenderContext,
    grad_color=None,
    grad_features=None,
    grad_alpha=None,
    *,
    want_pose=False,
) -> Gradients:
    """Backpropagate upstream image gradients to every Gaussian parameter.

    ``grad_color`` is dLoss/dColor (H,W,3); ``grad_features`` maps
    granularity -> dLoss/dFeature (H,W,d); ``grad_alpha`` is optional
    (H,W).  The context must come from a forward pass over the same,
    unmodified cloud.
    """
    cloud = ctx.cloud
    if ctx.cloud_version != cloud.version:
        raise ValueError("forward/backward mismatch: cloud changed since the forward pass")
    cam = ctx.cam
    H, W = cam.height, cam.width
    n = len(cloud)
    d = cloud.semantic_dim or 0
    grad_features = {Granularity(g): v for g, v in (grad_features or {}).items()}
    for g in grad_features:
        if g not in ctx.granularities:
            raise ValueError("forward/backward mismatch: granularity not rendered")

    K = len(ctx.order)
    F = ctx.feats.shape[1]
    use_color = grad_color is not None
    use_feat = bool(grad_features)
    use_alpha = grad_alpha is not None
    gf_img = np.zeros((H, W, F))
    if use_feat:
        for i, g in enumerate(ctx.granularities):
            if g in grad_features:
                gf_img[:, :, i * d : (i + 1) * d] = grad_features[g]

    g_mean2d = np.zeros((K, 2))
    g_conic = np.zeros((K, 3))
    g_opac = np.zeros(K)
    g_color_sorted = np.zeros((K, 3))
    g_feat_sorted = np.zeros((K, F))
    suffix = np.zeros((H, W))
    gc_img = grad_color if use_color else np.zeros((1, 1, 3))
    ga_img = grad_alpha if use_alpha else np.zeros((1, 1))

    x0s, x1s, y0s, y1s = ctx.bboxes
    if _kernels is not None:
        _kernels.composite_backward(
            K, x0s, x1s, y0s, y1s, ctx.mean2d, ctx.conic, ctx.opacities,
            np.ascontiguousarray(cloud.colors[ctx.order]), np.ascontiguousarray(ctx.feats),
            float(ctx.alpha_clamp),
            np.ascontiguousarray(gc_img), np.ascontiguousarray(gf_img), np.ascontiguousarray(ga_img),
            use_color, use_feat, use_alpha,
            ctx.offsets, ctx.alpha_buf, ctx.t_buf,
            g_mean2d, g_conic, g_opac, g_color_sorted, g_feat_sorted, suffix,
        )
    else:
        _composite_backward_numpy(
            K, x0s, x1s, y0s, y1s, ctx.mean2d, ctx.conic, ctx.opacities,
            cloud.colors[ctx.order], ctx.feats, ctx.alpha_clamp,
            gc_img, gf_img, ga_img, use_color, use_feat, use_alpha,
            ctx.offsets, ctx.alpha_buf, ctx.t_buf,
            g_mean2d, g_conic, g_opac, g_color_sorted, g_feat_sorted, suffix,
        )

    # conic triple -> 2D covariance gradient, through the matrix inverse
    A = np.zeros((K, 2, 2))
    A[:, 0, 0] = ctx.conic[:, 0]
    A[:, 0, 1] = A[:, 1, 0] = ctx.conic[:, 1]
    A[:, 1, 1] = ctx.conic[:, 2]
    GA = np.zeros((K, 2, 2))
    GA[:, 0, 0] = g_conic[:, 0]
    GA[:, 0, 1] = GA[:, 1, 0] = g_conic[:, 1]
    GA[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -np.einsum("nij,njk,nkl->nil", A, GA, A)

    grads = _chain_to_parameters(ctx, g_mean2d, g_cov2d, g_opac, want_pose)
    if use_color:
        np.add.at(grads.colors, ctx.order, g_color_sorted)
    grads.sem_codes = {}
    for i, g in enumerate(ctx.granularities):
        if g in grad_features:
            arr = np.zeros((n, d))
            np.add.at(arr, ctx.order, g_feat_sorted[:, i * d : (i + 1) * d])
            grads.sem_codes[g] = arr
    return grads


def _quat_rot_jacobians(q: np.ndarray):
    """d(rotation matrix)/d(quaternion components) for normalized q=(w,x,y,z)."""
    w, x, y, z = q
    dRw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0.0]])
    dRx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dRy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]])
    dRz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0.0]])
    return dRw, dRx, dRy, dRz


def _chain_to_parameters(ctx: RenderContext, g_mean2d, g_cov2d, g_opac, want_pose):
    cloud = ctx.cloud
    cam = ctx.cam
    n = len(cloud)
    idx = ctx.order
    K = len(idx)
    t = ctx.t_cam
    Wrot = ctx.W
    fx, fy = cam.fx, cam.fy

    g_means = np.zeros((n, 3))
    g_log_scales = np.zeros((n, 3))
    g_rotations = np.zeros((n, 4))
    g_opacity_logits = np.zeros(n)
    pose_grad = np.zeros(6) if want_pose else None
    mean2d_norm = np.zeros(n)

    if K:
        z = t[:, 2]
        # opacity chain: o = sigmoid(logit)
        o = ctx.opacities
        np.add.at(g_opacity_logits, idx, g_opac * o * (1.0 - o))
        mean2d_norm[idx] = np.linalg.norm(g_mean2d, axis=1)

        # projection Jacobian and its t-dependence
        J = np.zeros((K, 2, 3))
        J[:, 0, 0] = fx / z
        J[:, 0, 2] = -fx * t[:, 0] / (z * z)
        J[:, 1, 1] = fy / z
        J[:, 1, 2] = -fy * t[:, 1] / (z * z)

        g_cov2d_sym = 0.5 * (g_cov2d + np.transpose(g_cov2d, (0, 2, 1)))
        M = ctx.M
        g_J = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d_sym, J, M)
        g_M = np.einsum("nji,njk,nkl->nil", J, g_cov2d_sym, J)

        # g_t: through the pixel projection and through J(t)
        g_t = np.einsum("nji,nj->ni", J, g_mean2d)
        z2 = z * z
        z3 = z2 * z
        g_t[:, 0] += g_J[:, 0, 2] * (-fx / z2)
        g_t[:, 1] += g_J[:, 1, 2] * (-fy / z2)
        g_t[:, 2] += (
            g_J[:, 0, 0] * (-fx / z2)
            + g_J[:, 1, 1] * (-fy / z2)
            + g_J[:, 0, 2] * (2 * fx * t[:, 0] / z3)
            + g_J[:, 1, 2] * (2 * fy * t[:, 1] / z3)
        )

        np.add.at(g_means, idx, g_t @ Wrot)

        # covariance chain: M = W Sigma W^T, Sigma = L L^T, L = R diag(s)
        g_Sigma = np.einsum("ji,njk,kl->nil", Wrot, g_M, Wrot)
        g_Sigma = g_Sigma + np.transpose(g_Sigma, (0, 2, 1))  # 2 sym(g_Sigma)
        R = cloud.rotation_matrices()[idx]
        s = cloud.scales()[idx]
        L = R * s[:, None, :]
        g_L = np.einsum("nij,njk->nik", g_Sigma, L)
        g_s = np.einsum("nji,njk->nik", R, g_L)
        np.add.at(g_log_scales, idx, np.einsum("nii->ni", g_s) * s)
        g_R = g_L * s[:, None, :]

        q = cloud.rotations[idx]
        nrm = np.linalg.norm(q, axis=1, keepdims=True)
        qn = q / nrm
        w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
        G = g_R
        raw = np.stack(
            [
                2 * (z * (G[:, 1, 0] - G[:, 0, 1]) + y * (G[:, 0, 2] - G[:, 2, 0]) + x * (G[:, 2, 1] - G[:, 1, 2])),
                2 * (y * (G[:, 0, 1] + G[:, 1, 0]) + z * (G[:, 0, 2] + G[:, 2, 0]) + w * (G[:, 2, 1] - G[:, 1, 2]) - 2 * x * (G[:, 1, 1] + G[:, 2, 2])),
                2 * (x * (G[:, 0, 1] + G[:, 1, 0]) + w * (G[:, 0, 2] - G[:, 2, 0]) + z * (G[:, 1, 2] + G[:, 2, 1]) - 2 * y * (G[:, 0, 0] + G[:, 2, 2])),
                2 * (w * (G[:, 1, 0] - G[:, 0, 1]) + x * (G[:, 0, 2] + G[:, 2, 0]) + y * (G[:, 1, 2] + G[:, 2, 1]) - 2 * z * (G[:, 0, 0] + G[:, 1, 1])),
            ],
            axis=1,
        )
        # through the normalization q -> q/|q|
        g_q = (raw - qn * np.einsum("ni,ni->n", raw, qn)[:, None]) / nrm
        np.add.at(g_rotations, idx, g_q)

        if want_pose:
            pose_grad[3:] = g_t.sum(axis=0)
            E = [
                np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0.0]]),
                np.array([[0, 0, 1], [0, 0, 0], [-1, 0, 0.0]]),
                np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0.0]]),
            ]
            for a_idx, Ek in enumerate(E):
                pose_grad[a_idx] += np.einsum("ni,ij,nj->", g_t, Ek, t)
                EM = np.einsum("ij,njk->nik", Ek, M)
                pose_grad[a_idx] += np.sum(g_M * (EM + np.transpose(EM, (0, 2, 1))))

    return Gradients(
        means=g_means,
        log_scales=g_log_scales,
        rotations=g_rotations,
        opacity_logits=g_opacity_logits,
        colors=np.zeros((n, 3)),
        sem_codes={},
        pose=pose_grad,
        mean2d_norm=mean2d_norm,
    )
