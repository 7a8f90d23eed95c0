"""Scene manifests, input validation, stereo-seed ingestion and the synthetic
fixture generator.

The manifest is the contract between pipeline stages: a JSON file listing
views (image, camera, per-granularity masks and features, per-pixel points),
match fields per ordered view pair, the initial point cloud and the full
configuration.  The synthetic generator fabricates complete scenes with exact
geometry so that every downstream stage can be verified against construction
ground truth instead of pretrained-model outputs.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import formats
from .alignment import FeatureStore, MaskSet, PixelMatchField
from .rasterizer import render
from .scene import Camera, GaussianCloud, Granularity, PipelineConfig, inverse_sigmoid

GRAN_NAMES = {g.name: g for g in Granularity}


def worker_count() -> int:
    env = os.environ.get("SLGS_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def parallel_map(fn, items):
    items = list(items)
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- manifest ------------------------------------------------------------------


@dataclass
class ViewEntry:
    view: int
    image: str
    camera: Camera
    masks: dict  # Granularity -> relpath
    features: dict  # Granularity -> relpath
    points: str

    def to_json(self):
        return {
            "view": self.view,
            "image": self.image,
            "camera": self.camera.to_json(),
            "masks": {g.name: p for g, p in sorted(self.masks.items())},
            "features": {g.name: p for g, p in sorted(self.features.items())},
            "points": self.points,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            view=int(d["view"]),
            image=d["image"],
            camera=Camera.from_json(d["camera"]),
            masks={GRAN_NAMES[k]: v for k, v in d["masks"].items()},
            features={GRAN_NAMES[k]: v for k, v in d["features"].items()},
            points=d["points"],
        )


@dataclass
class SceneManifest:
    root: Path
    views: list
    point_cloud: str
    match_fields: dict  # (i, j) -> relpath
    config: PipelineConfig
    eval_views: list = field(default_factory=list)  # held-out ViewEntry list
    queries: str | None = None
    outputs: dict = field(default_factory=dict)

    def resolve(self, rel) -> Path:
        return (self.root / rel).resolve()

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    def view_ids(self):
        return [v.view for v in self.views]

    def save(self):
        d = {
            "views": [v.to_json() for v in self.views],
            "eval_views": [v.to_json() for v in self.eval_views],
            "point_cloud": self.point_cloud,
            "match_fields": {f"{i}->{j}": p for (i, j), p in sorted(self.match_fields.items())},
            "config": self.config.to_json(),
            "queries": self.queries,
            "outputs": self.outputs,
        }
        self.path.write_text(json.dumps(d, indent=2))
        return self.path

    @classmethod
    def load(cls, path) -> "SceneManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        fields_ = {}
        for key, rel in d.get("match_fields", {}).items():
            i, j = key.split("->")
            fields_[(int(i), int(j))] = rel
        return cls(
            root=path.parent,
            views=[ViewEntry.from_json(v) for v in d["views"]],
            eval_views=[ViewEntry.from_json(v) for v in d.get("eval_views", [])],
            point_cloud=d["point_cloud"],
            match_fields=fields_,
            config=PipelineConfig.from_json(d["config"]),
            queries=d.get("queries"),
            outputs=d.get("outputs", {}),
        )


# -- validation ----------------------------------------------------------------


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def error(self, where, message):
        self.errors.append({"where": str(where), "message": message})

    def warn(self, where, message):
        self.warnings.append({"where": str(where), "message": message})

    @property
    def passed(self) -> bool:
        return not self.errors

    def summary(self) -> str:
        lines = [f"{len(self.errors)} error(s), {len(self.warnings)} warning(s)"]
        for e in self.errors:
            lines.append(f"  ERROR {e['where']}: {e['message']}")
        for w in self.warnings:
            lines.append(f"  WARN  {w['where']}: {w['message']}")
        return "\n".join(lines)


def validate(manifest: SceneManifest) -> ValidationReport:
    """Schema and consistency checks over every file the manifest references."""
    rep = ValidationReport()
    if len(manifest.views) < 2:
        rep.error("manifest", f"need at least 2 views, found {len(manifest.views)}")
    try:
        manifest.config.validate()
    except ValueError as e:
        rep.error("config", str(e))

    feature_dim = None
    for entry in manifest.views:
        cam = entry.camera
        where = f"view {entry.view}"
        img_path = manifest.resolve(entry.image)
        if not img_path.exists():
            rep.error(where, f"missing image {entry.image}")
            continue
        img = formats.read_image(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            rep.error(where, f"image size {img.shape[:2]} != camera {(cam.height, cam.width)}")
        if set(entry.masks) != set(entry.features):
            rep.error(where, "mask and feature granularities disagree")
        for gran, rel in sorted(entry.masks.items()):
            mwhere = f"{where} {gran.name}"
            mpath = manifest.resolve(rel)
            if not mpath.exists():
                rep.error(mwhere, f"missing mask file {rel}")
                continue
            masks = formats.read_masks(mpath)
            occupancy = np.zeros((cam.height, cam.width), dtype=bool)
            bad_shape = False
            for mid, bm in masks:
                if bm.shape != (cam.height, cam.width):
                    rep.error(mwhere, f"mask {mid} shape {bm.shape} mismatched")
                    bad_shape = True
                    break
                if not bm.any():
                    rep.error(mwhere, f"mask {mid} is empty")
                if (occupancy & bm).any():
                    rep.error(mwhere, f"mask {mid} overlaps an earlier mask")
                occupancy |= bm
            if bad_shape:
                continue
            n_regions = max((mid for mid, _ in masks), default=0)
            present = {mid for mid, _ in masks}
            fpath = manifest.resolve(entry.features[gran])
            if not fpath.exists():
                rep.error(mwhere, f"missing feature file {entry.features[gran]}")
                continue
            feats = formats.read_tensor(fpath)[:, :, 0]
            if feats.shape[0] < n_regions:
                rep.error(mwhere, f"{feats.shape[0]} feature rows < {n_regions} labels")
            if feature_dim is None:
                feature_dim = feats.shape[1]
            elif feats.shape[1] != feature_dim:
                rep.error(mwhere, f"feature dim {feats.shape[1]} != {feature_dim}")
            norms = np.linalg.norm(feats, axis=1)
            rows = sorted(int(l) - 1 for l in present)
            for r in rows:
                if norms[r] == 0:
                    rep.error(mwhere, f"feature row {r} has zero norm")
                elif abs(norms[r] - 1.0) > FeatureStore.NORM_TOL:
                    rep.warn(mwhere, f"feature row {r} norm {norms[r]:.4f}, normalized at ingest")
        ppath = manifest.resolve(entry.points)
        if not ppath.exists():
            rep.error(where, f"missing point map {entry.points}")
        else:
            pts, valid = formats.read_point_map(ppath)
            if pts.shape[:2] != (cam.height, cam.width) or pts.shape[2] != 3:
                rep.error(where, f"point map shape {pts.shape} mismatched")

    ids = manifest.view_ids()
    cams = {v.view: v.camera for v in manifest.views}
    for i in ids:
        for j in ids:
            if i == j:
                continue
            where = f"match {i}->{j}"
            rel = manifest.match_fields.get((i, j))
            if rel is None:
                rep.error(where, "missing match field")
                continue
            mpath = manifest.resolve(rel)
            if not mpath.exists():
                rep.error(where, f"missing file {rel}")
                continue
            targets, valid = formats.read_match_field(mpath)
            cam_i, cam_j = cams[i], cams[j]
            if targets.shape[:2] != (cam_i.height, cam_i.width):
                rep.error(where, f"field shape {targets.shape[:2]} mismatched")
                continue
            x = np.rint(targets[..., 0])
            y = np.rint(targets[..., 1])
            bad = valid & ((x < 0) | (x >= cam_j.width) | (y < 0) | (y >= cam_j.height))
            if bad.any():
                rep.error(where, f"{int(bad.sum())} valid targets outside view {j}")

    cpath = manifest.resolve(manifest.point_cloud)
    if not cpath.exists():
        rep.error("point_cloud", f"missing {manifest.point_cloud}")
    else:
        try:
            pts, _ = formats.read_ply(cpath)
            if len(pts) == 0:
                rep.error("point_cloud", "empty point cloud")
        except ValueError as e:
            rep.error("point_cloud", str(e))
    return rep


# -- scene ingestion -------------------------------------------------------------


@dataclass
class SceneInputs:
    manifest: SceneManifest
    images: dict  # view -> HxWx3
    cameras: dict  # view -> Camera
    masksets: dict  # (view, Granularity) -> MaskSet
    store: FeatureStore
    match_fields: dict  # (i, j) -> PixelMatchField
    points: dict  # view -> (HxWx3, HxW valid)
    cloud_points: np.ndarray
    cloud_colors: np.ndarray


def load_scene_inputs(manifest: SceneManifest) -> SceneInputs:
    """Read every input file; feature ids are assigned in deterministic order."""
    store = FeatureStore()
    images, cameras, masksets, points = {}, {}, {}, {}
    for entry in sorted(manifest.views, key=lambda e: e.view):
        cameras[entry.view] = entry.camera
        images[entry.view] = formats.read_image(manifest.resolve(entry.image))
        pts, valid = formats.read_point_map(manifest.resolve(entry.points))
        points[entry.view] = (pts, valid)
        for gran in sorted(entry.masks):
            mask_list = formats.read_masks(manifest.resolve(entry.masks[gran]))
            feats = formats.read_tensor(manifest.resolve(entry.features[gran]))[:, :, 0]
            from .alignment import Mask

            masks = [
                Mask(mid, bm, store.add(feats[mid - 1].astype(np.float64)))
                for mid, bm in mask_list
            ]
            masksets[(entry.view, gran)] = MaskSet(entry.view, gran, masks)
    match_fields = {}
    for (i, j), rel in sorted(manifest.match_fields.items()):
        targets, valid = formats.read_match_field(manifest.resolve(rel))
        cam_j = cameras[j]
        match_fields[(i, j)] = PixelMatchField(i, j, targets, valid).clip_to_bounds(
            cam_j.width, cam_j.height
        )
    cloud_points, cloud_colors = formats.read_ply(manifest.resolve(manifest.point_cloud))
    return SceneInputs(
        manifest=manifest,
        images=images,
        cameras=cameras,
        masksets=masksets,
        store=store,
        match_fields=match_fields,
        points=points,
        cloud_points=cloud_points,
        cloud_colors=cloud_colors,
    )


def voxel_downsample(points: np.ndarray, colors: np.ndarray, voxel: float):
    """Average points and colors per voxel cell; deterministic order."""
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    n = len(counts)
    pts = np.zeros((n, 3))
    cols = np.zeros((n, 3))
    np.add.at(pts, inverse, points)
    np.add.at(cols, inverse, colors)
    return pts / counts[:, None], cols / counts[:, None]


def ingest_stereo_init(points: np.ndarray, colors: np.ndarray, voxel: float | None = None) -> GaussianCloud:
    """Seed one Gaussian per (optionally downsampled) point.

    Scales come from the mean distance to the 3 nearest neighbors; opacity
    starts at 0.1 and rotations at identity.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty point cloud")
    if voxel is not None:
        points, colors = voxel_downsample(points, colors, voxel)
    n = len(points)
    if n > 1:
        tree = cKDTree(points)
        k = min(4, n)
        dist, _ = tree.query(points, k=k)
        mean_nn = dist[:, 1:].mean(axis=1)
        mean_nn = np.maximum(mean_nn, 1e-7)
    else:
        mean_nn = np.full(1, 0.1)
    log_scales = np.repeat(np.log(mean_nn)[:, None], 3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    logits = np.full(n, inverse_sigmoid(0.1))
    return GaussianCloud(points, log_scales, rotations, logits, np.clip(colors, 0.0, 1.0), {})


# -- synthetic scenes -------------------------------------------------------------


def synthetic_default_config(seed: int = 0) -> PipelineConfig:
    """Fixture defaults: mild smoothing (maps are clean) and a Gaussian
    budget sized for desk-scale images."""
    return PipelineConfig(seed=seed, smoothing_kernel=3, max_gaussians=2600)


@dataclass
class SyntheticScene:
    config: PipelineConfig
    cameras: dict  # view -> Camera (train)
    eval_cameras: dict  # view -> Camera (held out)
    images: dict  # view -> HxWx3 (train + eval)
    labels: dict  # (view, Granularity) -> HxW uint16  (train views)
    eval_labels: dict  # (view, Granularity) -> HxW uint16
    region_features: dict  # Granularity -> (n_regions, D)
    points: dict  # view -> (HxWx3, valid)
    match_fields: dict  # (i, j) -> PixelMatchField
    gt_pairs: dict  # Granularity -> set of ((vi, mask), (vj, mask))
    gt_groups: dict  # Granularity -> {mask_id: [(view, mask_id), ...]}
    gt_cloud: GaussianCloud
    cloud_points: np.ndarray
    cloud_colors: np.ndarray
    embed_dim: int
    region_floor: int = 1  # min pixels for a region to enter the GT pair set
    perturbations: list = field(default_factory=list)
    per_view_features: dict | None = None  # Granularity -> {view: feature table}

    def eligible(self, view: int, gran: Granularity, region: int) -> bool:
        """True when the region is visible enough to count as correspondence GT."""
        labels = self.labels.get((view, gran))
        if labels is None:
            return False
        return int((labels == region).sum()) >= self.region_floor

    def maskset(self, view, gran, store: FeatureStore) -> MaskSet:
        labels = self.labels.get((view, gran))
        if labels is None:
            labels = self.eval_labels[(view, gran)]
        refs = {}
        feats = self.region_features[gran]
        for label in sorted(int(v) for v in np.unique(labels) if v != 0):
            refs[label] = store.add(feats[label - 1])
        return MaskSet.from_label_map(view, gran, labels, refs)


def _synthetic_cameras(rng, n_views, n_eval, size):
    f = 1.1 * size
    c = (size - 1) / 2.0
    total = n_views + n_eval
    spread = np.deg2rad(24.0)
    angles = np.linspace(-spread / 2, spread / 2, total)
    cams = []
    for k, ang in enumerate(angles):
        radius = 4.0 + 0.08 * rng.standard_normal()
        eye = np.array(
            [radius * np.sin(ang), 0.25 * rng.standard_normal(), -radius * np.cos(ang)]
        )
        target = np.array([0.0, 0.0, 0.0]) + 0.03 * rng.standard_normal(3)
        cams.append(Camera.look_at(eye, target, [0, 1, 0], f, f, c, c, size, size))
    # interleave: hold out a middle camera for evaluation
    order = rng.permutation(total)
    train = [cams[i] for i in sorted(order[:n_views])]
    evals = [cams[i] for i in sorted(order[n_views:])]
    return train, evals


def _unit_features(rng, count, dim, max_cos=0.6, tries=200):
    feats = []
    for _ in range(count):
        for _ in range(tries):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if all(abs(v @ f) < max_cos for f in feats):
                feats.append(v)
                break
        else:
            raise RuntimeError("could not sample well-separated features")
    return np.stack(feats)


def _dominant_labels(cloud, cam, n_objects):
    """Per-pixel index (1-based) of the Gaussian with the largest blend weight."""
    out, ctx = render(cloud, cam, want_context=True)
    H, W = cam.height, cam.width
    best_w = np.zeros((H, W))
    best_id = np.zeros((H, W), dtype=np.uint16)
    x0s, x1s, y0s, y1s = ctx.bboxes
    for k in range(len(ctx.order)):
        x0, x1, y0, y1 = x0s[k], x1s[k], y0s[k], y1s[k]
        if x0 >= x1 or y0 >= y1:
            continue
        box = (slice(y0, y1), slice(x0, x1))
        area = (y1 - y0) * (x1 - x0)
        start = ctx.offsets[k]
        shape = (y1 - y0, x1 - x0)
        w = (ctx.alpha_buf[start : start + area] * ctx.t_buf[start : start + area]).reshape(shape)
        better = w > best_w[box]
        best_w[box][better] = w[better]
        sub = best_id[box]
        sub[better] = ctx.order[k] + 1
    return out, best_id


def _ray_grid(cam: Camera):
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    dirs_cam = np.stack(
        [(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs, dtype=float)], axis=-1
    )
    dirs_world = dirs_cam @ cam.rotation  # R^T applied row-wise
    origin = -cam.rotation.T @ cam.translation
    return origin, dirs_world


def _surface_points(cloud: GaussianCloud, cam: Camera, dominant: np.ndarray):
    """Max-density point along each pixel ray of its dominant Gaussian."""
    origin, dirs = _ray_grid(cam)
    H, W = dominant.shape
    pts = np.zeros((H, W, 3))
    inv_covs = np.linalg.inv(cloud.covariances())
    for gid in np.unique(dominant):
        if gid == 0:
            continue
        sel = dominant == gid
        A = inv_covs[gid - 1]
        mu = cloud.means[gid - 1]
        d = dirs[sel]
        om = mu - origin
        t = (d @ A @ om) / np.einsum("nd,dk,nk->n", d, A, d)
        pts[sel] = origin + t[:, None] * d
    return pts


def _split_axes(cameras: dict):
    """Two world axes spanning the mean image plane of the camera rig.

    Splitting along these keeps half/quarter labels stable across views:
    each plane is near-parallel to every viewing ray, so the visible
    surface of a blob lands on a consistent side from every camera.
    """
    right = np.mean([c.rotation[0] for c in cameras.values()], axis=0)
    down = np.mean([c.rotation[1] for c in cameras.values()], axis=0)
    right /= np.linalg.norm(right)
    down -= (down @ right) * right
    down /= np.linalg.norm(down)
    return right, down


def _refine_labels(cloud, whole: np.ndarray, points: np.ndarray, level: Granularity, axes):
    """Split each whole region into halves (subpart) or quarters (part).

    Split planes pass through the owning Gaussian's center with shared
    world-space normals, so labels agree across views by construction.
    """
    n_splits = 2 if level == Granularity.subpart else 4
    right, down = axes
    out = np.zeros_like(whole)
    for gid in np.unique(whole):
        if gid == 0:
            continue
        sel = whole == gid
        rel = points[sel] - cloud.means[gid - 1]
        sub = (rel @ right >= 0).astype(np.uint16)
        if n_splits == 4:
            sub = sub * 2 + (rel @ down >= 0).astype(np.uint16)
        out[sel] = (gid - 1) * n_splits + sub + 1
    return out


def generate_synthetic(
    seed: int,
    n_views: int = 3,
    n_objects: int = 10,
    image_size: int = 64,
    embed_dim: int = 512,
    n_eval_views: int = 1,
    config: PipelineConfig | None = None,
    min_mask_pixels: int = 20,
    min_region_pixels: int = 12,
    max_retries: int = 200,
) -> SyntheticScene:
    """Deterministic synthetic scene: colored ellipsoid blobs over a backdrop.

    Ground truth covers everything the real pipeline would ingest from
    pretrained models: images, exact cameras and per-pixel 3D points, masks
    at three granularities, region embeddings, exact match fields, and the
    cross-view correspondence sets.
    """
    if n_views < 2:
        raise ValueError("need at least 2 views")
    if n_objects < 1:
        raise ValueError("need at least 1 object")
    rng = np.random.default_rng(seed)
    cfg = config or synthetic_default_config(seed)
    train_cams, eval_cams = _synthetic_cameras(rng, n_views, n_eval_views, image_size)
    cameras = {i: c for i, c in enumerate(train_cams)}
    eval_cameras = {n_views + i: c for i, c in enumerate(eval_cams)}

    for attempt in range(max_retries):
        scene = _try_build_scene(
            rng, cfg, cameras, eval_cameras, n_objects, image_size, embed_dim,
            min_mask_pixels, min_region_pixels,
        )
        if scene is not None:
            return scene
    raise RuntimeError(f"could not place {n_objects} visible objects in {max_retries} attempts")


def _project_circle(cam: Camera, center, radius):
    uv, z = cam.project(center[None, :])
    return uv[0], cam.fx * radius / z[0]


def _try_build_scene(rng, cfg, cameras, eval_cameras, n_objects, size, embed_dim, min_px, region_floor):
    # object layout: ellipsoids that neither collide in 3D nor occlude each
    # other in any training view, and stay fully inside every frame; this is
    # what makes construction-time correspondence ground truth unambiguous.
    # Radii shrink with the object count so crowded scenes remain placeable.
    scale = (10.0 / n_objects) ** 0.45
    margin = 2.0
    centers, radii = [], []
    projected = {v: [] for v in cameras}
    for _ in range(n_objects):
        for _ in range(400):
            c = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-0.8, 0.8), rng.uniform(-0.45, 0.45)])
            r = rng.uniform(0.19, 0.29) * scale
            if not all(np.linalg.norm(c - c2) > 1.05 * (r + r2) for c2, r2 in zip(centers, radii)):
                continue
            circles = {}
            ok = True
            for v, cam in cameras.items():
                uv, pr = _project_circle(cam, c, r)
                pr *= 1.25  # soft halo: blobs bleed past their nominal radius
                if not (
                    margin + pr <= uv[0] <= cam.width - 1 - margin - pr
                    and margin + pr <= uv[1] <= cam.height - 1 - margin - pr
                ):
                    ok = False
                    break
                if any(np.linalg.norm(uv - uv2) < 0.85 * (pr + pr2) for uv2, pr2 in projected[v]):
                    ok = False
                    break
                circles[v] = (uv, pr)
            if not ok:
                continue
            centers.append(c)
            radii.append(r)
            for v in cameras:
                projected[v].append(circles[v])
            break
        else:
            return None
    hues = rng.permutation(n_objects + 1) / (n_objects + 1)
    colors = np.stack([_hsv(h, 0.75, 0.95) for h in hues])
    means, log_scales, rots, logits = [], [], [], []
    for c, r in zip(centers, radii):
        means.append(c)
        log_scales.append(np.log(r * rng.uniform(0.7, 1.0, 3)))
        q = rng.standard_normal(4)
        rots.append(q / np.linalg.norm(q))
        logits.append(inverse_sigmoid(0.985))
    # backdrop pancake behind the objects, facing the cameras
    means.append(np.array([0.0, 0.0, 1.8]))
    log_scales.append(np.log(np.array([8.0, 8.0, 0.05])))
    rots.append(np.array([1.0, 0.0, 0.0, 0.0]))
    logits.append(inverse_sigmoid(0.995))
    gt_cloud = GaussianCloud(np.stack(means), np.stack(log_scales), np.stack(rots), np.array(logits), colors, {})

    all_cams = dict(cameras)
    all_cams.update(eval_cameras)
    images, whole, points_by_view = {}, {}, {}
    for v, cam in sorted(all_cams.items()):
        out, dominant = _dominant_labels(gt_cloud, cam, n_objects)
        if (dominant == 0).any():  # backdrop must close the frame
            return None
        images[v] = out.color
        whole[v] = dominant
        points_by_view[v] = _surface_points(gt_cloud, cam, dominant)

    # visibility floor applies to the training views
    for v in cameras:
        counts = np.bincount(whole[v].ravel(), minlength=n_objects + 2)
        if (counts[1 : n_objects + 1] < min_px).any():
            return None

    axes = _split_axes(cameras)
    labels, eval_labels = {}, {}
    for v in sorted(all_cams):
        tgt = labels if v in cameras else eval_labels
        tgt[(v, Granularity.whole)] = whole[v]
        tgt[(v, Granularity.subpart)] = _refine_labels(gt_cloud, whole[v], points_by_view[v], Granularity.subpart, axes)
        tgt[(v, Granularity.part)] = _refine_labels(gt_cloud, whole[v], points_by_view[v], Granularity.part, axes)

    n_regions = {Granularity.whole: n_objects + 1, Granularity.subpart: 2 * (n_objects + 1), Granularity.part: 4 * (n_objects + 1)}
    region_features = {g: _unit_features(rng, n, embed_dim) for g, n in n_regions.items()}

    # exact match fields between training views; validity drops out-of-bounds
    # targets, occluded correspondences and pixels at surface discontinuities
    match_fields = {}
    for i in sorted(cameras):
        for j in sorted(cameras):
            if i == j:
                continue
            cam_j = cameras[j]
            uv, z = cam_j.project(points_by_view[i].reshape(-1, 3))
            targets = uv.reshape(points_by_view[i].shape[:2] + (2,))
            x = np.rint(targets[..., 0]).astype(np.int64)
            y = np.rint(targets[..., 1]).astype(np.int64)
            inside = (
                (x >= 0) & (x < cam_j.width) & (y >= 0) & (y < cam_j.height)
                & (z.reshape(x.shape) > cam_j.near)
            )
            xi = np.clip(x, 0, cam_j.width - 1)
            yi = np.clip(y, 0, cam_j.height - 1)
            consistent = whole[j][yi, xi] == whole[i]
            coherent = _target_coherence(targets, max_jump=3.0)
            match_fields[(i, j)] = PixelMatchField(i, j, targets, inside & consistent & coherent)

    # correspondence GT covers regions that clear the visibility floor; a
    # sliver of a few pixels is not a recoverable correspondence
    gt_pairs, gt_groups = {}, {}
    for gran in Granularity:
        pairs = set()
        groups = {}
        for rid in range(1, n_regions[gran] + 1):
            members = [
                (v, rid)
                for v in sorted(cameras)
                if (labels[(v, gran)] == rid).sum() >= region_floor
            ]
            if members:
                groups[rid] = members
            for a in range(len(members)):
                for b in range(len(members)):
                    if a != b:
                        pairs.add((members[a], members[b]))
        gt_pairs[gran] = pairs
        gt_groups[gran] = groups

    # stereo stand-in: subsampled surface points with image colors
    pts, cols = [], []
    for v in sorted(cameras):
        stride = 3
        pts.append(points_by_view[v][::stride, ::stride].reshape(-1, 3))
        cols.append(images[v][::stride, ::stride].reshape(-1, 3))
    cloud_points = np.concatenate(pts)
    cloud_colors = np.concatenate(cols)

    points = {v: (points_by_view[v], np.ones(whole[v].shape, dtype=bool)) for v in sorted(all_cams)}
    return SyntheticScene(
        config=cfg,
        cameras=cameras,
        eval_cameras=eval_cameras,
        images=images,
        labels=labels,
        eval_labels=eval_labels,
        region_features=region_features,
        points=points,
        match_fields=match_fields,
        gt_pairs=gt_pairs,
        gt_groups=gt_groups,
        gt_cloud=gt_cloud,
        cloud_points=cloud_points,
        cloud_colors=cloud_colors,
        embed_dim=embed_dim,
        region_floor=region_floor,
    )


def _target_coherence(targets: np.ndarray, max_jump: float) -> np.ndarray:
    """Flag pixels whose target moves smoothly with their neighborhood."""
    ok = np.ones(targets.shape[:2], dtype=bool)
    shifts = [(0, 1), (1, 0), (1, 1), (1, -1)]
    for dy, dx in shifts:
        h, w = targets.shape[:2]
        ys = slice(0, h - dy)
        ys2 = slice(dy, h)
        if dx >= 0:
            xs, xs2 = slice(0, w - dx), slice(dx, w)
        else:
            xs, xs2 = slice(-dx, w), slice(0, w + dx)
        diff = targets[ys2, xs2] - targets[ys, xs]
        jump = np.hypot(diff[..., 0], diff[..., 1]) > max_jump
        ok[ys2, xs2] &= ~jump
        ok[ys, xs] &= ~jump
    return ok


def sample_field_bilinear(field: PixelMatchField, xy: np.ndarray) -> np.ndarray:
    """Sub-pixel target lookup; used to verify field composition."""
    h, w = field.valid.shape
    x = np.clip(xy[..., 0], 0, w - 1 - 1e-9)
    y = np.clip(xy[..., 1], 0, h - 1 - 1e-9)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    t = field.targets
    top = t[y0, x0] * (1 - fx) + t[y0, x1] * fx
    bot = t[y1, x0] * (1 - fx) + t[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _hsv(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [
        (v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q),
    ][i]


def perturb_scene(scene: SyntheticScene, seed: int, swap_fraction: float = 0.2, noise_px: float = 2.0) -> SyntheticScene:
    """Inject feature swaps and match-field jitter, recording every injection."""
    rng = np.random.default_rng(seed)
    feats = {g: f.copy() for g, f in scene.region_features.items()}
    perturbations = list(scene.perturbations)

    # feature swaps are simulated per granularity by swapping region rows
    swapped_feats = {}
    for g in feats:
        views = sorted(scene.cameras)
        table = {v: feats[g].copy() for v in views}
        n = len(feats[g])
        n_swaps = max(1, int(round(swap_fraction * n / 2)))
        for v in views[1:]:  # keep one reference view clean
            rows = rng.permutation(n)[: 2 * n_swaps]
            for a, b in zip(rows[::2], rows[1::2]):
                table[v][[a, b]] = table[v][[b, a]]
                perturbations.append({"kind": "feature_swap", "view": int(v), "granularity": int(g), "regions": [int(a + 1), int(b + 1)]})
        swapped_feats[g] = table

    match_fields = {}
    for (i, j), f in scene.match_fields.items():
        jitter = rng.normal(scale=noise_px / np.sqrt(2.0), size=f.targets.shape)
        match_fields[(i, j)] = PixelMatchField(i, j, f.targets + jitter, f.valid.copy()).clip_to_bounds(
            scene.cameras[j].width, scene.cameras[j].height
        )
        perturbations.append({"kind": "match_noise", "pair": [int(i), int(j)], "sigma_px": noise_px})

    return SyntheticScene(
        config=scene.config,
        cameras=scene.cameras,
        eval_cameras=scene.eval_cameras,
        images=scene.images,
        labels=scene.labels,
        eval_labels=scene.eval_labels,
        region_features=scene.region_features,
        points=scene.points,
        match_fields=match_fields,
        gt_pairs=scene.gt_pairs,
        gt_groups=scene.gt_groups,
        gt_cloud=scene.gt_cloud,
        cloud_points=scene.cloud_points,
        cloud_colors=scene.cloud_colors,
        embed_dim=scene.embed_dim,
        perturbations=perturbations,
        per_view_features=swapped_feats,
    )


def scene_masksets(scene: SyntheticScene, store: FeatureStore, views=None):
    """Build MaskSets for the scene's training views (honoring feature swaps)."""
    views = sorted(scene.cameras) if views is None else views
    table = scene.per_view_features
    out = {}
    for v in views:
        for g in Granularity:
            labels = scene.labels[(v, g)]
            feats = table[g][v] if table else scene.region_features[g]
            refs = {}
            for label in sorted(int(x) for x in np.unique(labels) if x != 0):
                refs[label] = store.add(feats[label - 1])
            out[(v, g)] = MaskSet.from_label_map(v, g, labels, refs)
    return out


def write_scene(scene: SyntheticScene, out_dir) -> SceneManifest:
    """Materialize a synthetic scene as a manifest directory on disk."""
    root = Path(out_dir)
    for sub in ("images", "masks", "features", "matches", "points", "queries", "gt", "eval"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    table = scene.per_view_features
    views = []
    for v in sorted(scene.cameras):
        img_rel = f"images/view{v}.png"
        formats.write_image(root / img_rel, scene.images[v])
        masks, features = {}, {}
        for g in Granularity:
            mask_rel = f"masks/view{v}_{g.name}.png"
            formats.write_label_map(root / mask_rel, scene.labels[(v, g)])
            masks[g] = mask_rel
            feats = table[g][v] if table else scene.region_features[g]
            feat_rel = f"features/view{v}_{g.name}.bin"
            formats.write_tensor(root / feat_rel, feats.astype(np.float32)[:, :, None])
            features[g] = feat_rel
        pts_rel = f"points/view{v}.bin"
        pts, valid = scene.points[v]
        formats.write_point_map(root / pts_rel, pts.astype(np.float32), valid.astype(np.uint8))
        views.append(ViewEntry(v, img_rel, scene.cameras[v], masks, features, pts_rel))

    eval_views = []
    for v in sorted(scene.eval_cameras):
        img_rel = f"eval/view{v}.png"
        formats.write_image(root / img_rel, scene.images[v])
        masks = {}
        for g in Granularity:
            mask_rel = f"eval/view{v}_{g.name}.png"
            formats.write_label_map(root / mask_rel, scene.eval_labels[(v, g)])
            masks[g] = mask_rel
        pts_rel = f"eval/points{v}.bin"
        pts, valid = scene.points[v]
        formats.write_point_map(root / pts_rel, pts.astype(np.float32), valid.astype(np.uint8))
        eval_views.append(
            ViewEntry(v, img_rel, scene.eval_cameras[v], masks, {}, pts_rel)
        )

    match_rel = {}
    for (i, j), f in sorted(scene.match_fields.items()):
        rel = f"matches/m_{i}_{j}.bin"
        formats.write_match_field(root / rel, f.targets.astype(np.float32), f.valid.astype(np.uint8))
        match_rel[(i, j)] = rel

    formats.write_ply(root / "cloud.ply", scene.cloud_points, scene.cloud_colors)

    queries_rel = _write_queries(scene, root)
    _write_gt(scene, root)

    manifest = SceneManifest(
        root=root,
        views=views,
        eval_views=eval_views,
        point_cloud="cloud.ply",
        match_fields=match_rel,
        config=scene.config,
        queries=queries_rel,
    )
    manifest.save()
    return manifest


def _write_queries(scene: SyntheticScene, root: Path) -> str:
    """Whole-level region features become the query set; canon is random."""
    rng = np.random.default_rng(10_000 + scene.config.seed)
    canon = _unit_features(rng, 4, scene.embed_dim)
    formats.write_tensor(root / "queries/canonical.bin", canon.astype(np.float32)[:, :, None])
    entries = []
    whole = scene.region_features[Granularity.whole]
    for rid in range(1, len(whole) + 1):
        emb_rel = f"queries/region{rid}.bin"
        formats.write_tensor(root / emb_rel, whole[rid - 1 : rid].astype(np.float32)[:, :, None])
        for v in sorted(scene.cameras):
            mask = scene.labels[(v, Granularity.whole)] == rid
            if not mask.any():
                continue
            gt_rel = f"queries/gt_r{rid}_v{v}.png"
            formats.write_label_map(root / gt_rel, mask.astype(np.uint16))
            entries.append({"text": f"region-{rid}", "embedding": emb_rel, "view": v, "gt_mask": gt_rel})
    spec = {"mode": "lerf", "canonical": "queries/canonical.bin", "queries": entries}
    (root / "queries/queries.json").write_text(json.dumps(spec, indent=2))
    return "queries/queries.json"


def _write_gt(scene: SyntheticScene, root: Path):
    gt = {
        "pairs": {
            str(int(g)): sorted([list(a), list(b)] for a, b in pairs)
            for g, pairs in scene.gt_pairs.items()
        },
        "groups": {
            str(int(g)): {str(r): members for r, members in groups.items()}
            for g, groups in scene.gt_groups.items()
        },
        "perturbations": scene.perturbations,
    }
    (root / "gt/correspondence.json").write_text(json.dumps(gt, indent=2))
