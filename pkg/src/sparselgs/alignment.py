"""Cross-view alignment of segmentation regions in three steps.

Step 1 votes each source mask onto a target-view mask through a dense pixel
match field, scores the pair by a blend of area overlap and feature cosine,
and keeps it above a confidence threshold.  Step 2 fuses masks of one view
that agree on the same target mask (coarse granularity only).  Step 3
re-scores pairs geometrically by reprojecting per-pixel 3D points and keeps
only bilaterally consistent pairs, then groups the survivors with union-find
and picks one canonical feature per group.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .scene import Camera, Granularity, PipelineConfig

log = logging.getLogger(__name__)


# -- mask containers ---------------------------------------------------------


def rle_encode(bitmap: np.ndarray) -> list:
    """Run-length encode a boolean bitmap (row-major [start, length] pairs)."""
    flat = np.asarray(bitmap, dtype=bool).ravel()
    if not flat.any():
        return []
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = edges[::2], edges[1::2]
    out = []
    for s, e in zip(starts, ends):
        out.extend([int(s), int(e - s)])
    return out


def rle_decode(runs: list, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    for s, n in zip(runs[::2], runs[1::2]):
        flat[s : s + n] = True
    return flat.reshape(shape)


@dataclass
class Mask:
    mask_id: int
    bitmap: np.ndarray  # H x W bool
    feature_ref: int  # id into a FeatureStore

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())


@dataclass
class MaskSet:
    """All masks of one (view, granularity); pairwise disjoint, each non-empty."""

    view: int
    granularity: Granularity
    masks: list

    def __post_init__(self):
        self.granularity = Granularity(self.granularity)
        occupancy = None
        for m in self.masks:
            if m.area < 1:
                raise ValueError(f"mask {m.mask_id} in view {self.view} is empty")
            if occupancy is None:
                occupancy = m.bitmap.copy()
            else:
                if (occupancy & m.bitmap).any():
                    raise ValueError(f"masks overlap in view {self.view} at granularity {self.granularity.name}")
                occupancy |= m.bitmap

    def label_map(self) -> np.ndarray:
        """uint16 label image, 0 = unlabeled."""
        first = self.masks[0].bitmap if self.masks else None
        shape = first.shape if first is not None else (0, 0)
        labels = np.zeros(shape, dtype=np.uint16)
        for m in self.masks:
            labels[m.bitmap] = m.mask_id
        return labels

    def by_id(self) -> dict:
        return {m.mask_id: m for m in self.masks}

    @classmethod
    def from_label_map(cls, view, granularity, labels: np.ndarray, feature_refs: dict) -> "MaskSet":
        masks = []
        for mid in sorted(int(v) for v in np.unique(labels) if v != 0):
            masks.append(Mask(mid, labels == mid, feature_refs[mid]))
        return cls(view, granularity, masks)


class FeatureStore:
    """Unit-norm embeddings addressed by integer id."""

    NORM_TOL = 1e-6

    def __init__(self):
        self._vectors = {}

    def add(self, vector: np.ndarray, feature_id=None) -> int:
        v = np.asarray(vector, dtype=np.float64).copy()
        nrm = np.linalg.norm(v)
        if nrm == 0:
            raise ValueError("zero feature vector")
        if abs(nrm - 1.0) > self.NORM_TOL:
            v /= nrm
        fid = len(self._vectors) if feature_id is None else int(feature_id)
        self._vectors[fid] = v
        return fid

    def __getitem__(self, fid: int) -> np.ndarray:
        return self._vectors[fid]

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, fid: int) -> bool:
        return fid in self._vectors

    def ids(self):
        return sorted(self._vectors)

    def cosine(self, a: int, b: int) -> float:
        return float(self._vectors[a] @ self._vectors[b])


@dataclass
class PixelMatchField:
    """Dense pixel correspondence from view i to view j (sub-pixel targets)."""

    view_i: int
    view_j: int
    targets: np.ndarray  # H x W x 2, (x, y) in view j
    valid: np.ndarray  # H x W bool

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)

    def clip_to_bounds(self, width: int, height: int) -> "PixelMatchField":
        """Invalidate entries whose rounded target falls outside view j."""
        x = np.rint(self.targets[..., 0])
        y = np.rint(self.targets[..., 1])
        inside = (x >= 0) & (x < width) & (y >= 0) & (y < height)
        return replace(self, valid=self.valid & inside)

    def lookup(self, bitmap: np.ndarray):
        """Rounded integer targets for a mask's valid pixels -> (xs, ys)."""
        sel = bitmap & self.valid
        t = self.targets[sel]
        return np.rint(t[:, 0]).astype(np.int64), np.rint(t[:, 1]).astype(np.int64)


# -- scoring -----------------------------------------------------------------


@dataclass
class CandidatePair:
    view_i: int
    view_j: int
    granularity: Granularity
    mask_i: int
    mask_j: int
    s_area: float
    s_lang: float
    s_match: float
    accepted: bool


def lang_score(store: FeatureStore, ref_a: int, ref_b: int) -> float:
    """Feature cosine clamped to [0, 1]."""
    return float(np.clip(store.cosine(ref_a, ref_b), 0.0, 1.0))


def match_score(s_lang: float, s_area: float, lang_weight: float) -> float:
    return lang_weight * s_lang + (1.0 - lang_weight) * s_area


def _vote(xs, ys, label_map, store, src_ref, target_set):
    """Majority target label; ties break by larger cosine, then smaller id."""
    if len(xs) == 0:
        return None, 0
    labels = label_map[ys, xs]
    labels = labels[labels != 0]
    if len(labels) == 0:
        return None, 0
    counts = np.bincount(labels)
    top = counts.max()
    tied = [int(l) for l in np.flatnonzero(counts == top)]
    if len(tied) > 1:
        by_id = target_set.by_id()
        tied.sort(key=lambda mid: (-lang_score(store, src_ref, by_id[mid].feature_ref), mid))
    return tied[0], int(top)


def step1_pixel_vote(masks_i: MaskSet, masks_j: MaskSet, match_field: PixelMatchField, store: FeatureStore, cfg: PipelineConfig):
    """Vote every mask of view i onto view j and score the winning pair."""
    if masks_i.granularity != masks_j.granularity:
        raise ValueError("mask sets must share a granularity")
    if (match_field.view_i, match_field.view_j) != (masks_i.view, masks_j.view):
        raise ValueError("match field does not cover this view pair")
    labels_j = masks_j.label_map()
    by_id_j = masks_j.by_id()
    out = []
    for m in sorted(masks_i.masks, key=lambda m: m.mask_id):
        xs, ys = match_field.lookup(m.bitmap)
        target, hits = _vote(xs, ys, labels_j, store, m.feature_ref, masks_j)
        if target is None:
            continue
        s_area = min(hits / by_id_j[target].area, 1.0)
        s_lang = lang_score(store, m.feature_ref, by_id_j[target].feature_ref)
        s = match_score(s_lang, s_area, cfg.lang_weight)
        out.append(
            CandidatePair(
                masks_i.view, masks_j.view, masks_i.granularity, m.mask_id, target,
                s_area, s_lang, s, accepted=s > cfg.vote_threshold,
            )
        )
    return out


def step2_fuse(masks_i: MaskSet, masks_j: MaskSet, pairs_to_j: list, cfg: PipelineConfig):
    """Merge masks of view i that were accepted against the same target mask.

    Only runs at fusion-enabled granularities (the coarse level by default);
    finer levels pass through untouched.  The fused mask keeps the smallest
    member id and takes on the target's feature.  Returns the updated mask
    set together with the re-pointed pair list.
    """
    if int(masks_i.granularity) not in tuple(cfg.fusion_levels):
        return masks_i, pairs_to_j
    subset = [
        p
        for p in pairs_to_j
        if p.view_i == masks_i.view and p.view_j == masks_j.view and p.granularity == masks_i.granularity
    ]
    target_refs = {m.mask_id: m.feature_ref for m in masks_j.masks}
    return _fuse_with_refs(masks_i, subset, target_refs)


@dataclass
class MatchGraph:
    """Union-find grouping of masks across views for one granularity."""

    granularity: Granularity
    pairs: list = field(default_factory=list)
    parent: dict = field(default_factory=dict)
    canonical: dict = field(default_factory=dict)  # root -> feature id

    def _find(self, node):
        root = node
        while self.parent.get(root, root) != root:
            root = self.parent[root]
        while self.parent.get(node, node) != node:
            self.parent[node], node = root, self.parent[node]
        return root

    def add_node(self, node):
        self.parent.setdefault(node, node)

    def union(self, a, b):
        self.add_node(a)
        self.add_node(b)
        ra, rb = self._find(a), self._find(b)
        if ra == rb:
            return
        # deterministic: smaller (view, mask) tuple becomes the root
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra

    def group_of(self, node):
        return self._find(node)

    def groups(self) -> dict:
        out = {}
        for node in self.parent:
            out.setdefault(self._find(node), []).append(node)
        return {root: sorted(members) for root, members in sorted(out.items())}

    def canonical_feature(self, node) -> int:
        return self.canonical[self._find(node)]

    def to_json(self) -> dict:
        return {
            "granularity": int(self.granularity),
            "groups": [
                {
                    "members": [[int(v), int(m)] for v, m in members],
                    "canonical_feature": int(self.canonical[root]),
                }
                for root, members in self.groups().items()
            ],
            "pairs": [
                {
                    "view_i": p.view_i, "view_j": p.view_j,
                    "mask_i": p.mask_i, "mask_j": p.mask_j,
                    "s_area": p.s_area, "s_lang": p.s_lang, "s_match": p.s_match,
                }
                for p in self.pairs
            ],
        }


def _project_mask_points(points, valid, bitmap, cam_j: Camera):
    """Reproject a mask's per-pixel 3D points into view j -> integer pixels."""
    sel = bitmap & valid
    pts = points[sel]
    if len(pts) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), 0
    uv, z = cam_j.project(pts)
    ok = z > cam_j.near
    x = np.rint(uv[ok, 0]).astype(np.int64)
    y = np.rint(uv[ok, 1]).astype(np.int64)
    inside = (x >= 0) & (x < cam_j.width) & (y >= 0) & (y < cam_j.height)
    return x[inside], y[inside], int(len(pts))


def step3_reproject_refine(masksets: dict, points: dict, cameras: dict, store: FeatureStore, cfg: PipelineConfig, prior_pairs=None) -> MatchGraph:
    """Geometric re-scoring: keep pairs that reproject onto each other.

    ``masksets`` maps view -> MaskSet (one granularity), ``points`` maps
    view -> ((H,W,3) array, (H,W) validity).  Pairs whose masks have too few
    projectable points keep their prior verdict; everything else is decided
    by the bilateral-consistency rule.  Every mask enters the graph, matched
    or not, so downstream code can always resolve a canonical feature.
    """
    views = sorted(masksets)
    gran = masksets[views[0]].granularity
    graph = MatchGraph(granularity=gran)
    verdicts = {}
    if prior_pairs:
        for p in prior_pairs:
            if p.accepted:
                verdicts[(p.view_i, p.mask_i, p.view_j, p.mask_j)] = p

    for vi in views:
        for m in masksets[vi].masks:
            graph.add_node((vi, m.mask_id))

    for vi in views:
        set_i = masksets[vi]
        pts_i, val_i = points[vi]
        for vj in views:
            if vj == vi:
                continue
            set_j = masksets[vj]
            labels_j = set_j.label_map()
            labels_i = set_i.label_map()
            by_id_j = set_j.by_id()
            pts_j, val_j = points[vj]
            for m in sorted(set_i.masks, key=lambda m: m.mask_id):
                xs, ys, n_proj = _project_mask_points(pts_i, val_i, m.bitmap, cameras[vj])
                if n_proj < cfg.min_reproject_points:
                    log.info(
                        "view %d mask %d (%s): %d projectable points < %d, pair skipped",
                        vi, m.mask_id, gran.name, n_proj, cfg.min_reproject_points,
                    )
                    continue  # prior verdicts for this source stand
                target, hits = _vote(xs, ys, labels_j, store, m.feature_ref, set_j)
                # prior verdicts for this source are superseded by the re-derivation
                stale = [k for k in verdicts if k[:2] == (vi, m.mask_id) and k[2] == vj]
                if target is None:
                    for k in stale:
                        del verdicts[k]
                    continue
                tmask = by_id_j[target]
                bx, by_, n2 = _project_mask_points(pts_j, val_j, tmask.bitmap, cameras[vi])
                if n2 < cfg.min_reproject_points:
                    log.info(
                        "view %d mask %d (%s): back-projection has %d points < %d, pair skipped",
                        vj, target, gran.name, n2, cfg.min_reproject_points,
                    )
                    continue
                back, _ = _vote(bx, by_, labels_i, store, tmask.feature_ref, set_i)
                s_area = min(hits / tmask.area, 1.0)
                s_lang = lang_score(store, m.feature_ref, tmask.feature_ref)
                s = match_score(s_lang, s_area, cfg.lang_weight)
                ok = back == m.mask_id and s > cfg.reproject_threshold
                for k in stale:
                    if k != (vi, m.mask_id, vj, target):
                        del verdicts[k]
                pair = CandidatePair(vi, vj, gran, m.mask_id, target, s_area, s_lang, s, ok)
                if ok:
                    verdicts[(vi, m.mask_id, vj, target)] = pair
                else:
                    verdicts.pop((vi, m.mask_id, vj, target), None)

    for key in sorted(verdicts):
        p = verdicts[key]
        graph.pairs.append(p)
        graph.union((p.view_i, p.mask_i), (p.view_j, p.mask_j))

    _assign_canonical_features(graph, masksets)
    return graph


def _assign_canonical_features(graph: MatchGraph, masksets: dict):
    """Canonical group feature = feature of the largest-area member mask."""
    areas = {}
    refs = {}
    for view, ms in masksets.items():
        for m in ms.masks:
            areas[(view, m.mask_id)] = m.area
            refs[(view, m.mask_id)] = m.feature_ref
    for root, members in graph.groups().items():
        best = max(members, key=lambda node: (areas[node], (-node[0], -node[1])))
        graph.canonical[root] = refs[best]


def align_scene(masksets: dict, match_fields: dict, points: dict, cameras: dict, store: FeatureStore, cfg: PipelineConfig):
    """Run the full three-step alignment per granularity.

    ``masksets`` maps (view, granularity) -> MaskSet; ``match_fields`` maps
    (view_i, view_j) -> PixelMatchField.  Returns (granularity -> MatchGraph,
    updated masksets) where fusion may have replaced coarse-level masks.
    """
    views = sorted({v for v, _ in masksets})
    grans = sorted({g for _, g in masksets})
    masksets = dict(masksets)
    graphs = {}
    for gran in grans:
        pairs = []
        for vi in views:
            for vj in views:
                if vi == vj:
                    continue
                pairs.extend(
                    step1_pixel_vote(
                        masksets[(vi, gran)], masksets[(vj, gran)], match_fields[(vi, vj)], store, cfg
                    )
                )
        if int(gran) in tuple(cfg.fusion_levels):
            for vi in views:
                for vj in views:
                    if vi == vj:
                        continue
                    subset = [p for p in pairs if p.view_i == vi and p.view_j == vj]
                    rest = [p for p in pairs if not (p.view_i == vi and p.view_j == vj)]
                    target_refs = {m.mask_id: m.feature_ref for m in masksets[(vj, gran)].masks}
                    fused, remapped = _fuse_with_refs(masksets[(vi, gran)], subset, target_refs)
                    masksets[(vi, gran)] = fused
                    removed = {p.mask_i for p in subset} - {m.mask_id for m in fused.masks}
                    pairs = _repoint_targets(rest + remapped, vi, removed, fused)
        per_view = {v: masksets[(v, gran)] for v in views}
        graphs[gran] = step3_reproject_refine(per_view, points, cameras, store, cfg, prior_pairs=pairs)
    return graphs, masksets


def _fuse_with_refs(masks_i: MaskSet, pairs_to_j: list, target_refs: dict):
    """Fusion core shared by step2_fuse and the pipeline orchestrator."""
    groups = {}
    for p in pairs_to_j:
        if p.accepted:
            groups.setdefault(p.mask_j, []).append(p)
    by_id = masks_i.by_id()
    merged_into = {}
    new_masks = dict(by_id)
    for target in sorted(groups):
        sources = sorted({merged_into.get(p.mask_i, p.mask_i) for p in groups[target]})
        if len(sources) < 2:
            continue
        keep = sources[0]
        union = new_masks[keep].bitmap.copy()
        for s in sources[1:]:
            union |= new_masks[s].bitmap
            del new_masks[s]
            merged_into[s] = keep
        for old, tgt in list(merged_into.items()):
            if tgt in sources[1:]:
                merged_into[old] = keep
        new_masks[keep] = Mask(keep, union, target_refs[target])
    fused = MaskSet(masks_i.view, masks_i.granularity, [new_masks[k] for k in sorted(new_masks)])
    seen = {}
    for p in pairs_to_j:
        src = merged_into.get(p.mask_i, p.mask_i)
        q = replace(p, mask_i=src)
        key = (src, p.mask_j)
        if key not in seen or q.s_match > seen[key].s_match:
            seen[key] = q
    return fused, [seen[k] for k in sorted(seen)]


def _repoint_targets(pairs, view, removed_ids, fused: MaskSet):
    """After fusion in ``view``, retarget pairs that pointed at removed masks."""
    id_map = {}
    for m in fused.masks:
        id_map[m.mask_id] = m.mask_id
    # removed ids were merged into the smallest member id; find it by bitmap overlap
    out = []
    seen = {}
    for p in pairs:
        if p.view_j == view and p.mask_j in removed_ids:
            continue  # target vanished into a fused mask; step 3 will re-derive it
        key = (p.view_i, p.mask_i, p.view_j, p.mask_j)
        if key not in seen or p.s_match > seen[key].s_match:
            seen[key] = p
    return [seen[k] for k in sorted(seen)]
