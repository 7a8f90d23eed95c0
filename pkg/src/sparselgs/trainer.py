"""Two-stage scene optimization.

Stage A fits geometry and appearance against RGB targets (L1 + structural
term) with periodic densify/prune and optional camera pose refinement.
Stage B freezes the cloud's structure and trains per-granularity semantic
codes under a joint image + semantic objective; geometry keeps receiving
gradients from both terms while the codes see only the semantic term.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ssim
from .rasterizer import render, render_backward
from .scene import Camera, GaussianCloud, Granularity, PipelineConfig, sigmoid

log = logging.getLogger(__name__)


# -- losses ---------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.clip(a, 0, 1) - np.clip(b, 0, 1)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * np.log10(mse)


def loss_image(rendered: np.ndarray, target: np.ndarray, l1_weight: float = 0.8, need_grad: bool = False):
    """l1_weight * MAE + (1 - l1_weight) * (1 - SSIM); optionally d/d rendered."""
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {target.shape}")
    if need_grad and np.array_equal(rendered, target):
        return 0.0, np.zeros_like(rendered)  # exact fixed point
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    if l1_weight >= 1.0:
        s, g_s = 1.0, None
    else:
        s, g_s = ssim.ssim_and_grad(rendered, target, need_grad=need_grad)
    value = l1_weight * l1 + (1.0 - l1_weight) * (1.0 - s)
    if not need_grad:
        return value
    grad = l1_weight * np.sign(diff) / diff.size
    if g_s is not None:
        grad = grad - (1.0 - l1_weight) * g_s
    return value, grad


def loss_semantic(rendered: np.ndarray, target: np.ndarray, valid: np.ndarray, need_grad: bool = False):
    """Mean over valid pixels of the per-pixel L1 code distance."""
    n = max(int(valid.sum()), 1)
    diff = (rendered - target) * valid[:, :, None]
    value = float(np.abs(diff).sum()) / n
    if not need_grad:
        return value
    return value, np.sign(diff) / n


# -- Adam -------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-group first/second moments; shapes track the parameters."""

    lrs: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, name, shape):
        if name not in self.m or self.m[name].shape != shape:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)

    def select(self, name, keep):
        """Prune optimizer rows alongside a parameter prune."""
        if name in self.m:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]

    def append_zeros(self, name, count):
        if name in self.m and count > 0:
            pad = np.zeros((count,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])


def adam_step(state: AdamState, params: dict, grads: dict):
    """One Adam update over named parameter arrays, in place."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        state.ensure(name, p.shape)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= state.lrs[name] * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# -- semantic targets --------------------------------------------------------------


@dataclass
class SemanticTargetMap:
    """Per view and granularity: the code image the render should match."""

    view: int
    granularity: Granularity
    codes: np.ndarray  # H x W x d
    valid: np.ndarray  # H x W


def build_semantic_targets(masksets: dict, graphs: dict, codecs: dict, store, shape) -> dict:
    """Paint every aligned mask with its group's canonical code.

    Returns (view, granularity) -> SemanticTargetMap.  Every painted code
    exists in the corresponding codec's table by construction.
    """
    out = {}
    for (view, gran), ms in masksets.items():
        codec = codecs[gran]
        graph = graphs[gran]
        codes = np.zeros(shape + (codec.code_dim,))
        valid = np.zeros(shape, dtype=bool)
        for m in ms.masks:
            ref = graph.canonical_feature((view, m.mask_id))
            code = codec.encode(store[ref])
            codes[m.bitmap] = code
            valid |= m.bitmap
        out[(view, gran)] = SemanticTargetMap(view, gran, codes, valid)
    return out


# -- training loops -----------------------------------------------------------------


@dataclass
class TrainLogEntry:
    step: int
    loss: float
    loss_image: float
    loss_semantic: float
    psnr: float


def write_training_log(path, entries):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "loss_image", "loss_semantic", "psnr"])
        for e in entries:
            w.writerow([e.step, f"{e.loss:.6f}", f"{e.loss_image:.6f}", f"{e.loss_semantic:.6f}", f"{e.psnr:.3f}"])


def _scene_extent(cloud: GaussianCloud) -> float:
    if len(cloud) == 0:
        return 1.0
    centered = cloud.means - cloud.means.mean(axis=0)
    return max(float(np.linalg.norm(centered, axis=1).max()), 1e-6)


def _render_kwargs(cfg: PipelineConfig) -> dict:
    return dict(
        alpha_clamp=cfg.alpha_clamp,
        transmittance_floor=cfg.transmittance_floor,
        cutoff_sigma=cfg.cutoff_sigma,
        cov2d_floor=cfg.cov2d_floor,
    )


def _check_finite(value, step, context):
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite loss at step {step}: {context}")


@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def observe(self, mean2d_norm, ndc_scale):
        seen = mean2d_norm > 0
        self.grad_accum[seen] += mean2d_norm[seen] * ndc_scale
        self.count[seen] += 1


def _densify_and_prune(cloud, opt, stats, cfg, extent):
    """Clone small high-gradient Gaussians, split large ones, prune faint ones."""
    avg = np.where(stats.count > 0, stats.grad_accum / np.maximum(stats.count, 1), 0.0)
    high = avg > cfg.densify_grad_threshold
    max_scale = cloud.scales().max(axis=1)
    big = max_scale > cfg.split_scale_fraction * extent
    room = cfg.max_gaussians - len(cloud)

    clone = high & ~big
    split = high & big
    new = []
    if room > 0 and clone.any():
        idx = np.flatnonzero(clone)[:room]
        new.append(
            (
                cloud.means[idx],
                cloud.log_scales[idx],
                cloud.rotations[idx],
                cloud.opacity_logits[idx],
                cloud.colors[idx],
                {g: c[idx] for g, c in cloud.sem_codes.items()},
            )
        )
        room -= len(idx)
    if room > 0 and split.any():
        idx = np.flatnonzero(split)[:room]
        # the split replaces one Gaussian by two smaller ones sampled inside it
        rng = np.random.default_rng(cfg.seed + opt.step_count)
        R = cloud.rotation_matrices()[idx]
        s = cloud.scales()[idx]
        offsets = rng.standard_normal((len(idx), 3)) * s
        world_off = np.einsum("nij,nj->ni", R, offsets)
        shrink = np.log(1.6)
        new.append(
            (
                cloud.means[idx] + world_off,
                cloud.log_scales[idx] - shrink,
                cloud.rotations[idx],
                cloud.opacity_logits[idx],
                cloud.colors[idx],
                {g: c[idx] for g, c in cloud.sem_codes.items()},
            )
        )
        cloud.means[idx] -= world_off
        cloud.log_scales[idx] -= shrink

    for means, log_scales, rots, logits, colors, sems in new:
        count = len(means)
        cloud.means = np.concatenate([cloud.means, means])
        cloud.log_scales = np.concatenate([cloud.log_scales, log_scales])
        cloud.rotations = np.concatenate([cloud.rotations, rots])
        cloud.opacity_logits = np.concatenate([cloud.opacity_logits, logits])
        cloud.colors = np.concatenate([cloud.colors, colors])
        for g in cloud.sem_codes:
            cloud.sem_codes[g] = np.concatenate([cloud.sem_codes[g], sems[g]])
        for name in ("means", "log_scales", "rotations", "opacity_logits", "colors"):
            opt.append_zeros(name, count)

    keep = cloud.opacities() > cfg.prune_opacity
    if not keep.all():
        cloud.means = cloud.means[keep]
        cloud.log_scales = cloud.log_scales[keep]
        cloud.rotations = cloud.rotations[keep]
        cloud.opacity_logits = cloud.opacity_logits[keep]
        cloud.colors = cloud.colors[keep]
        for g in cloud.sem_codes:
            cloud.sem_codes[g] = cloud.sem_codes[g][keep]
        for name in ("means", "log_scales", "rotations", "opacity_logits", "colors"):
            opt.select(name, keep)
    cloud.bump_version()
    return DensifyStats.zeros(len(cloud))


def _geometry_params(cloud: GaussianCloud) -> dict:
    return {
        "means": cloud.means,
        "log_scales": cloud.log_scales,
        "rotations": cloud.rotations,
        "opacity_logits": cloud.opacity_logits,
        "colors": cloud.colors,
    }


def _geometry_grads(grads) -> dict:
    return {
        "means": grads.means,
        "log_scales": grads.log_scales,
        "rotations": grads.rotations,
        "opacity_logits": grads.opacity_logits,
        "colors": grads.colors,
    }


def _post_step(cloud: GaussianCloud):
    cloud.rotations /= np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)
    cloud.bump_version()


def stage_a(cloud: GaussianCloud, cameras: dict, images: dict, cfg: PipelineConfig, log_entries=None):
    """RGB-only fit; returns (cloud, refined cameras).

    Cameras are refined through per-view pose tangents when
    ``cfg.pose_optimization`` is set; otherwise they come back untouched.
    """
    views = sorted(cameras)
    extent = _scene_extent(cloud)
    lrs = {
        "means": cfg.lr_means * extent,
        "log_scales": cfg.lr_log_scales,
        "rotations": cfg.lr_rotations,
        "opacity_logits": cfg.lr_opacity_logits,
        "colors": cfg.lr_colors,
    }
    opt = AdamState(lrs=lrs)
    pose_opt = AdamState(lrs={f"pose_{v}": cfg.lr_pose for v in views})
    pose_deltas = {v: np.zeros(6) for v in views}
    stats = DensifyStats.zeros(len(cloud))
    ndc_scale = max(cameras[views[0]].width, cameras[views[0]].height) / 2.0

    for step in range(cfg.stage_a_iterations):
        v = views[step % len(views)]
        cam = cameras[v]
        pose_on = cfg.pose_optimization and step >= cfg.pose_start_iteration
        delta = pose_deltas[v] if cfg.pose_optimization else None
        out, ctx = render(cloud, cam, pose_delta=delta, want_context=True, **_render_kwargs(cfg))
        value, grad_img = loss_image(out.color, images[v], cfg.l1_weight, need_grad=True)
        _check_finite(value, step, f"stage A view {v}, {len(cloud)} gaussians")
        grads = render_backward(ctx, grad_img, {}, want_pose=pose_on)
        adam_step(opt, _geometry_params(cloud), _geometry_grads(grads))
        if pose_on:
            adam_step(pose_opt, {f"pose_{v}": pose_deltas[v]}, {f"pose_{v}": grads.pose})
        _post_step(cloud)
        stats.observe(grads.mean2d_norm, ndc_scale)

        in_window = cfg.densify_start <= step <= cfg.densify_end
        if in_window and step > 0 and step % cfg.densify_interval == 0:
            stats = _densify_and_prune(cloud, opt, stats, cfg, extent)
        if log_entries is not None and (step % 50 == 0 or step == cfg.stage_a_iterations - 1):
            log_entries.append(TrainLogEntry(step, value, value, 0.0, psnr(out.color, images[v])))

    refined = {
        v: (cameras[v].with_pose_delta(pose_deltas[v]) if cfg.pose_optimization else cameras[v])
        for v in views
    }
    return cloud, refined


def stage_b(
    cloud: GaussianCloud,
    cameras: dict,
    images: dict,
    targets: dict,
    cfg: PipelineConfig,
    granularities=None,
    log_entries=None,
):
    """Semantic training: per granularity, optimize codes plus a gentle
    geometry fine-tune under image_weight * L_img + (1 - weight) * L_sem.

    No densify/prune runs here.  Rendered color and codes come from one
    fused rasterizer pass per iteration.
    """
    views = sorted(cameras)
    grans = sorted(Granularity(g) for g in (granularities or {g for _, g in targets}))
    for g in grans:
        for v in views:
            if (v, g) not in targets:
                raise ValueError(f"missing semantic targets for view {v} granularity {g.name}")
    d = targets[(views[0], grans[0])].codes.shape[2]
    for g in grans:
        cloud.ensure_sem_codes(g, d)
    extent = _scene_extent(cloud)
    lam = cfg.image_weight_stage_b

    gscale = cfg.lr_geometry_scale_stage_b
    for gran in grans:
        lrs = {
            "means": cfg.lr_means * extent * gscale,
            "log_scales": cfg.lr_log_scales * gscale,
            "rotations": cfg.lr_rotations * gscale,
            "opacity_logits": cfg.lr_opacity_logits * gscale,
            "colors": cfg.lr_colors * gscale,
            "sem": cfg.lr_sem_codes,
        }
        opt = AdamState(lrs=lrs)
        for step in range(cfg.stage_b_iterations):
            v = views[step % len(views)]
            cam = cameras[v]
            out, ctx = render(cloud, cam, [gran], want_context=True, **_render_kwargs(cfg))
            tgt = targets[(v, gran)]
            if lam > 0:
                l_img, grad_img = loss_image(out.color, images[v], cfg.l1_weight, need_grad=True)
            else:
                l_img, grad_img = 0.0, None
            l_sem, grad_sem = loss_semantic(out.features[gran], tgt.codes, tgt.valid, need_grad=True)
            value = lam * l_img + (1.0 - lam) * l_sem
            _check_finite(value, step, f"stage B {Granularity(gran).name} view {v}")
            grads = render_backward(
                ctx,
                None if grad_img is None else lam * grad_img,
                {gran: (1.0 - lam) * grad_sem},
            )
            params = _geometry_params(cloud)
            params["sem"] = cloud.sem_codes[gran]
            gdict = _geometry_grads(grads)
            gdict["sem"] = grads.sem_codes[gran]
            adam_step(opt, params, gdict)
            _post_step(cloud)
            if log_entries is not None and (step % 50 == 0 or step == cfg.stage_b_iterations - 1):
                log_entries.append(
                    TrainLogEntry(step, value, l_img, l_sem, psnr(out.color, images[v]))
                )
    return cloud
