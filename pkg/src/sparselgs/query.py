"""Open-vocabulary querying over rendered semantic fields.

Rendered code images are decoded back to full embeddings through the codec
table, scored against a query embedding with a pairwise softmax over
canonical phrases, smoothed, and turned into localization points or
segmentation masks.  Evaluation reports mean IoU over query masks and the
fraction of localization hits inside ground-truth boxes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import formats
from .featcodec import FeatureCodec
from .rasterizer import render
from .scene import Granularity, PipelineConfig

LERF_MODE = "lerf"
OVS_MODE = "3d-ovs"
DEFAULT_CANON_TEXTS = ("object", "things", "stuff", "texture")


@dataclass
class QuerySpec:
    """One text query: its embedding, the canonical set, mode and thresholds."""

    query_embedding: np.ndarray  # unit D-vector
    canonical_embeddings: np.ndarray  # (C, D), unit rows
    mode: str = LERF_MODE
    threshold_lerf: float = 0.6
    threshold_ovs: float = 0.8
    area_threshold: int = 2000
    text: str = ""

    def __post_init__(self):
        self.query_embedding = np.asarray(self.query_embedding, dtype=np.float64).reshape(-1)
        self.canonical_embeddings = np.atleast_2d(
            np.asarray(self.canonical_embeddings, dtype=np.float64)
        )
        if len(self.canonical_embeddings) == 0:
            raise ValueError("canonical set must not be empty")
        for v in (self.query_embedding, *self.canonical_embeddings):
            n = np.linalg.norm(v)
            if abs(n - 1.0) > 1e-5:
                raise ValueError(f"embeddings must be unit norm (got {n:.4f})")


@dataclass
class RelevancyMap:
    values: np.ndarray  # H x W in [0, 1]
    granularity: Granularity
    text: str = ""


def relevancy(sem_map: np.ndarray, spec: QuerySpec, granularity=Granularity.whole) -> RelevancyMap:
    """Pairwise-softmax relevancy, minimized over the canonical phrases."""
    H, W, D = sem_map.shape
    flat = sem_map.reshape(-1, D)
    dot_q = flat @ spec.query_embedding
    dots_c = flat @ spec.canonical_embeddings.T  # (N, C)
    eq = np.exp(dot_q)[:, None]
    scores = eq / (np.exp(dots_c) + eq)
    vals = scores.min(axis=1).reshape(H, W)
    return RelevancyMap(vals, Granularity(granularity), spec.text)


def smooth(rmap: RelevancyMap, kernel: int) -> RelevancyMap:
    """Box mean filter with edge replication; kernel must be odd."""
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError("smoothing kernel must be odd and positive")
    if kernel == 1:
        return RelevancyMap(rmap.values.copy(), rmap.granularity, rmap.text)
    r = kernel // 2
    padded = np.pad(rmap.values, r, mode="edge")
    # separable box filter via cumulative sums
    csum = np.cumsum(padded, axis=0)
    csum = np.vstack([np.zeros((1, padded.shape[1])), csum])
    rows = csum[kernel:, :] - csum[:-kernel, :]
    csum = np.cumsum(rows, axis=1)
    csum = np.hstack([np.zeros((rows.shape[0], 1)), csum])
    out = (csum[:, kernel:] - csum[:, :-kernel]) / (kernel * kernel)
    return RelevancyMap(out, rmap.granularity, rmap.text)


def localize(maps) -> tuple:
    """Global argmax over granularities; ties favor the coarser level, then
    the first pixel in row-major order.  Returns (granularity, (y, x), score)."""
    maps = list(maps)
    if not maps:
        raise ValueError("need at least one relevancy map")
    best = None
    for m in sorted(maps, key=lambda m: int(m.granularity)):
        peak = float(m.values.max())
        if best is None or peak > best[2]:
            y, x = np.unravel_index(int(np.argmax(m.values)), m.values.shape)
            best = (m.granularity, (int(y), int(x)), peak)
    return best


def segment(maps, spec: QuerySpec) -> np.ndarray:
    """Query segmentation mask under the spec's mode.

    LERF mode thresholds the best granularity's map at the preset value.
    The 3D-OVS mode thresholds each granularity, then among candidates
    larger than the area floor picks the one with the highest mean
    relevancy inside the mask (largest area if none clears the floor).
    """
    maps = sorted(maps, key=lambda m: int(m.granularity))
    if spec.mode == LERF_MODE:
        best = max(maps, key=lambda m: (float(m.values.max()), -int(m.granularity)))
        return best.values > spec.threshold_lerf
    if spec.mode != OVS_MODE:
        raise ValueError(f"unknown query mode {spec.mode!r}")
    candidates = []
    for m in maps:
        mask = m.values > spec.threshold_ovs
        area = int(mask.sum())
        mean_rel = float(m.values[mask].mean()) if area else 0.0
        candidates.append((mask, area, mean_rel))
    over = [c for c in candidates if c[1] > spec.area_threshold]
    if over:
        return max(over, key=lambda c: c[2])[0]
    return max(candidates, key=lambda c: c[1])[0]


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def bbox_of(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max())


def point_in_bbox(point, bbox) -> bool:
    if bbox is None:
        return False
    y, x = point
    y0, x0, y1, x1 = bbox
    return y0 <= y <= y1 and x0 <= x <= x1


def metrics(pred_masks, gt_masks, pred_points=None, gt_boxes=None):
    """Mean IoU over matched mask lists; localization accuracy over boxes."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("prediction/ground-truth lists differ in length")
    ious = [mask_iou(p, g) for p, g in zip(pred_masks, gt_masks)]
    miou = float(np.mean(ious)) if ious else 0.0
    macc = None
    if pred_points is not None:
        if gt_boxes is None or len(pred_points) != len(gt_boxes):
            raise ValueError("prediction/ground-truth lists differ in length")
        hits = [point_in_bbox(p, b) for p, b in zip(pred_points, gt_boxes)]
        macc = float(np.mean(hits)) if hits else 0.0
    return miou, macc


# -- query execution over a trained cloud ------------------------------------------


def decode_feature_map(code_image: np.ndarray, codec: FeatureCodec):
    """Rendered code image -> (unit embedding image, match distances)."""
    return codec.decode_batch(code_image)


def relevancy_maps_for_view(cloud, cam, codecs: dict, spec: QuerySpec, cfg: PipelineConfig, renders=None):
    """Smoothed relevancy maps of one view, one per trained granularity."""
    grans = sorted(codecs)
    if renders is None:
        renders = render(
            cloud, cam, grans,
            alpha_clamp=cfg.alpha_clamp, transmittance_floor=cfg.transmittance_floor,
            cutoff_sigma=cfg.cutoff_sigma, cov2d_floor=cfg.cov2d_floor,
        )
    maps = []
    for g in grans:
        decoded, _ = decode_feature_map(renders.features[g], codecs[g])
        rmap = relevancy(decoded, spec, g)
        maps.append(smooth(rmap, cfg.smoothing_kernel))
    return maps, renders


@dataclass
class QueryResult:
    text: str
    view: int
    granularity: int
    point: tuple
    score: float
    iou: float | None = None
    hit: bool | None = None


def run_queries(cloud, cameras: dict, codecs: dict, query_file, cfg: PipelineConfig, out_dir=None, root=None):
    """Execute a query-set file against a trained cloud; returns the report.

    The file lists canonical embeddings, per-query embeddings, target views
    and optional ground-truth masks.  When ground truth is present the
    report carries per-query IoU / localization hits and their means.
    """
    query_file = Path(query_file)
    root = Path(root) if root else query_file.parent.parent
    spec_doc = json.loads(query_file.read_text())
    canon = formats.read_tensor(root / spec_doc["canonical"])[:, :, 0].astype(np.float64)
    mode = spec_doc.get("mode", LERF_MODE)

    results = []
    pred_masks, gt_masks, points, boxes = [], [], [], []
    render_cache = {}
    for q in spec_doc["queries"]:
        emb = formats.read_tensor(root / q["embedding"])[:, :, 0].astype(np.float64)[0]
        spec = QuerySpec(
            emb, canon, mode=mode,
            threshold_lerf=cfg.relevancy_threshold_lerf,
            threshold_ovs=cfg.relevancy_threshold_ovs,
            area_threshold=cfg.area_threshold,
            text=q.get("text", ""),
        )
        view = int(q["view"])
        cached = render_cache.get(view)
        maps, renders = relevancy_maps_for_view(
            cloud, cameras[view], codecs, spec, cfg, renders=cached
        )
        render_cache[view] = renders
        gran, point, score = localize(maps)
        mask = segment(maps, spec)
        result = QueryResult(spec.text, view, int(gran), point, score)
        if "gt_mask" in q and q["gt_mask"]:
            gt = formats.read_label_map(root / q["gt_mask"]) > 0
            result.iou = mask_iou(mask, gt)
            bbox = q.get("gt_bbox") or bbox_of(gt)
            result.hit = point_in_bbox(point, tuple(bbox) if bbox else None)
            pred_masks.append(mask)
            gt_masks.append(gt)
            points.append(point)
            boxes.append(tuple(bbox) if bbox else None)
        results.append(result)
        if out_dir is not None:
            _write_overlay(Path(out_dir), renders.color, mask, point, spec.text, view)

    report = {
        "mode": mode,
        "queries": [
            {
                "text": r.text, "view": r.view, "granularity": r.granularity,
                "point": list(r.point), "score": r.score,
                **({"iou": r.iou, "hit": r.hit} if r.iou is not None else {}),
            }
            for r in results
        ],
    }
    if gt_masks:
        miou, macc = metrics(pred_masks, gt_masks, points, boxes)
        report["miou"] = miou
        report["macc"] = macc
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report.json").write_text(json.dumps(report, indent=2))
    return report


def _write_overlay(out_dir: Path, color: np.ndarray, mask: np.ndarray, point, text: str, view: int):
    out_dir.mkdir(parents=True, exist_ok=True)
    img = (np.clip(color, 0, 1) * 255).astype(np.uint8)
    overlay = img.copy()
    overlay[mask] = (0.45 * img[mask] + 0.55 * np.array([255, 40, 40])).astype(np.uint8)
    pil = Image.fromarray(overlay)
    draw = ImageDraw.Draw(pil)
    y, x = point
    draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=(255, 0, 0), outline=(255, 255, 255))
    safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in text) or "query"
    pil.save(out_dir / f"{safe}_v{view}.png")
