/**
 * Self-contained extraction backend used when no pretrained models are
 * available.  Segmentation comes from seeded k-means over color+position
 * with connected-component cleanup at three cluster counts; region
 * embeddings are fixed random projections of color histograms (so the same
 * surface yields similar vectors across views); cameras, per-pixel points
 * and match fields come from a quasi-planar scene assumption over an arc
 * rig whose median baseline is normalized to one.
 *
 * This backend exists to exercise the full pipeline on real captures with
 * schema-correct files; replacing it with neural adapters raises quality
 * but not the interface.
 */
import type { CameraJson, GranularityName, LoadedImage } from "./formats.js";
import { GRANULARITIES } from "./formats.js";

export interface Region {
  id: number;
  pixels: number;
  embedding: Float64Array; // unit norm, EMBED_DIM
}

export interface Segmentation {
  labels: Uint16Array; // 1..m, 0 never used here (full coverage)
  regions: Region[];
}

export const EMBED_DIM = 512;
const CLUSTERS: Record<GranularityName, number> = { whole: 5, subpart: 9, part: 14 };
const MIN_REGION_PX = 24;
const HIST_BINS = 4; // per channel -> 64-bin color histogram
const DESC_DIM = HIST_BINS * HIST_BINS * HIST_BINS + 5; // + mean color, area, aspect

/** Deterministic xorshift PRNG so extraction is reproducible run to run. */
export function makeRng(seed: number): () => number {
  let s = (seed >>> 0) || 0x9e3779b9;
  return () => {
    s ^= s << 13;
    s >>>= 0;
    s ^= s >> 17;
    s ^= s << 5;
    s >>>= 0;
    return s / 0xffffffff;
  };
}

function gaussianPair(rng: () => number): [number, number] {
  const u = Math.max(rng(), 1e-12);
  const v = rng();
  const r = Math.sqrt(-2 * Math.log(u));
  return [r * Math.cos(2 * Math.PI * v), r * Math.sin(2 * Math.PI * v)];
}

/** Fixed random projection shared by every view and granularity. */
let projection: Float64Array | null = null;
function descriptorProjection(): Float64Array {
  if (!projection) {
    const rng = makeRng(1234567);
    projection = new Float64Array(EMBED_DIM * DESC_DIM);
    for (let i = 0; i < projection.length; i += 2) {
      const [a, b] = gaussianPair(rng);
      projection[i] = a;
      if (i + 1 < projection.length) projection[i + 1] = b;
    }
  }
  return projection;
}

function kmeans(features: Float64Array, n: number, dim: number, k: number, seed: number, iters = 12): Int32Array {
  const rng = makeRng(seed);
  const centers = new Float64Array(k * dim);
  for (let c = 0; c < k; c++) {
    const pick = Math.floor(rng() * n);
    centers.set(features.subarray(pick * dim, (pick + 1) * dim), c * dim);
  }
  const assign = new Int32Array(n);
  const counts = new Float64Array(k);
  const sums = new Float64Array(k * dim);
  for (let it = 0; it < iters; it++) {
    for (let i = 0; i < n; i++) {
      let best = 0;
      let bestD = Infinity;
      for (let c = 0; c < k; c++) {
        let d = 0;
        for (let j = 0; j < dim; j++) {
          const diff = features[i * dim + j] - centers[c * dim + j];
          d += diff * diff;
        }
        if (d < bestD) {
          bestD = d;
          best = c;
        }
      }
      assign[i] = best;
    }
    sums.fill(0);
    counts.fill(0);
    for (let i = 0; i < n; i++) {
      counts[assign[i]]++;
      for (let j = 0; j < dim; j++) sums[assign[i] * dim + j] += features[i * dim + j];
    }
    for (let c = 0; c < k; c++) {
      if (counts[c] > 0) {
        for (let j = 0; j < dim; j++) centers[c * dim + j] = sums[c * dim + j] / counts[c];
      }
    }
  }
  return assign;
}

/** Connected components over a cluster assignment, 4-neighborhood. */
function components(assign: Int32Array, width: number, height: number): Int32Array {
  const comp = new Int32Array(width * height).fill(-1);
  const stack = new Int32Array(width * height);
  let next = 0;
  for (let start = 0; start < comp.length; start++) {
    if (comp[start] >= 0) continue;
    const cluster = assign[start];
    let top = 0;
    stack[top++] = start;
    comp[start] = next;
    while (top > 0) {
      const p = stack[--top];
      const y = Math.floor(p / width);
      const x = p - y * width;
      if (x > 0 && comp[p - 1] < 0 && assign[p - 1] === cluster) { comp[p - 1] = next; stack[top++] = p - 1; }
      if (x + 1 < width && comp[p + 1] < 0 && assign[p + 1] === cluster) { comp[p + 1] = next; stack[top++] = p + 1; }
      if (y > 0 && comp[p - width] < 0 && assign[p - width] === cluster) { comp[p - width] = next; stack[top++] = p - width; }
      if (y + 1 < height && comp[p + width] < 0 && assign[p + width] === cluster) { comp[p + width] = next; stack[top++] = p + width; }
    }
    next++;
  }
  return comp;
}

/** Merge regions below the pixel floor into their largest touching neighbor. */
function absorbSmall(comp: Int32Array, width: number, height: number, minPx: number): Uint16Array {
  let nComp = 0;
  for (let i = 0; i < comp.length; i++) if (comp[i] >= nComp) nComp = comp[i] + 1;
  for (let round = 0; round < 8; round++) {
    const sizes = new Int32Array(nComp);
    for (let i = 0; i < comp.length; i++) sizes[comp[i]]++;
    let changed = false;
    for (let small = 0; small < nComp; small++) {
      if (sizes[small] === 0 || sizes[small] >= minPx) continue;
      const border = new Map<number, number>();
      for (let p = 0; p < comp.length; p++) {
        if (comp[p] !== small) continue;
        const y = Math.floor(p / width);
        const x = p - y * width;
        for (const q of [x > 0 ? p - 1 : -1, x + 1 < width ? p + 1 : -1, y > 0 ? p - width : -1, y + 1 < height ? p + width : -1]) {
          if (q >= 0 && comp[q] !== small) border.set(comp[q], (border.get(comp[q]) ?? 0) + 1);
        }
      }
      let bestNb = -1;
      let bestCount = -1;
      for (const [nb, cnt] of border) {
        if (cnt > bestCount || (cnt === bestCount && nb < bestNb)) { bestNb = nb; bestCount = cnt; }
      }
      if (bestNb >= 0) {
        for (let p = 0; p < comp.length; p++) if (comp[p] === small) comp[p] = bestNb;
        changed = true;
      }
    }
    if (!changed) break;
  }
  // dense relabel 1..m in first-appearance order
  const remap = new Map<number, number>();
  const labels = new Uint16Array(comp.length);
  for (let p = 0; p < comp.length; p++) {
    let id = remap.get(comp[p]);
    if (id === undefined) {
      id = remap.size + 1;
      remap.set(comp[p], id);
    }
    labels[p] = id;
  }
  return labels;
}

function regionDescriptor(img: LoadedImage, labels: Uint16Array, id: number): Float64Array {
  const { width, height, rgb } = img;
  const desc = new Float64Array(DESC_DIM);
  let count = 0;
  let minX = width, maxX = 0, minY = height, maxY = 0;
  for (let p = 0; p < labels.length; p++) {
    if (labels[p] !== id) continue;
    count++;
    const r = rgb[p * 3], g = rgb[p * 3 + 1], b = rgb[p * 3 + 2];
    const bin =
      Math.min(HIST_BINS - 1, Math.floor(r * HIST_BINS)) * HIST_BINS * HIST_BINS +
      Math.min(HIST_BINS - 1, Math.floor(g * HIST_BINS)) * HIST_BINS +
      Math.min(HIST_BINS - 1, Math.floor(b * HIST_BINS));
    desc[bin]++;
    const base = HIST_BINS * HIST_BINS * HIST_BINS;
    desc[base] += r;
    desc[base + 1] += g;
    desc[base + 2] += b;
    const y = Math.floor(p / width), x = p - y * width;
    if (x < minX) minX = x;
    if (x > maxX) maxX = x;
    if (y < minY) minY = y;
    if (y > maxY) maxY = y;
  }
  for (let i = 0; i < DESC_DIM; i++) desc[i] /= count;
  const base = HIST_BINS * HIST_BINS * HIST_BINS;
  desc[base + 3] = count / (width * height);
  desc[base + 4] = (maxX - minX + 1) / (maxY - minY + 1);
  return desc;
}

function embed(desc: Float64Array): Float64Array {
  const P = descriptorProjection();
  const out = new Float64Array(EMBED_DIM);
  for (let i = 0; i < EMBED_DIM; i++) {
    let acc = 0;
    for (let j = 0; j < DESC_DIM; j++) acc += P[i * DESC_DIM + j] * desc[j];
    out[i] = acc;
  }
  let norm = Math.hypot(...out);
  if (norm === 0) {
    out[0] = 1;
    norm = 1;
  }
  for (let i = 0; i < EMBED_DIM; i++) out[i] /= norm;
  return out;
}

export function segmentView(img: LoadedImage, granularity: GranularityName, seed: number): Segmentation {
  const { width, height, rgb } = img;
  const n = width * height;
  const dim = 5;
  const feats = new Float64Array(n * dim);
  const spatialWeight = 0.35;
  for (let p = 0; p < n; p++) {
    const y = Math.floor(p / width), x = p - y * width;
    feats[p * dim] = rgb[p * 3];
    feats[p * dim + 1] = rgb[p * 3 + 1];
    feats[p * dim + 2] = rgb[p * 3 + 2];
    feats[p * dim + 3] = (x / width) * spatialWeight;
    feats[p * dim + 4] = (y / height) * spatialWeight;
  }
  const k = Math.min(CLUSTERS[granularity], n);
  const assign = kmeans(feats, n, dim, k, seed);
  const comp = components(assign, width, height);
  const minPx = granularity === "whole" ? MIN_REGION_PX * 2 : MIN_REGION_PX;
  const labels = absorbSmall(comp, width, height, Math.min(minPx, Math.floor(n / 8)));
  let m = 0;
  for (const l of labels) if (l > m) m = l;
  const regions: Region[] = [];
  for (let id = 1; id <= m; id++) {
    let pixels = 0;
    for (const l of labels) if (l === id) pixels++;
    regions.push({ id, pixels, embedding: embed(regionDescriptor(img, labels, id)) });
  }
  return { labels, regions };
}

// -- quasi-planar rig geometry ------------------------------------------------

export interface RigView {
  camera: CameraJson;
  /** per-pixel world points on the assumed scene plane (h*w*3) */
  points: Float64Array;
}

function lookAt(eye: number[], target: number[], fx: number, cx: number, cy: number, width: number, height: number): CameraJson {
  const fwd = [target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]];
  const fn = Math.hypot(...fwd);
  for (let i = 0; i < 3; i++) fwd[i] /= fn;
  const up = [0, 1, 0];
  const right = [
    fwd[1] * up[2] - fwd[2] * up[1],
    fwd[2] * up[0] - fwd[0] * up[2],
    fwd[0] * up[1] - fwd[1] * up[0],
  ];
  const rn = Math.hypot(...right);
  for (let i = 0; i < 3; i++) right[i] /= rn;
  const down = [
    fwd[1] * right[2] - fwd[2] * right[1],
    fwd[2] * right[0] - fwd[0] * right[2],
    fwd[0] * right[1] - fwd[1] * right[0],
  ];
  const R = [right, down, fwd];
  const t = [0, 1, 2].map((i) => -(R[i][0] * eye[0] + R[i][1] * eye[1] + R[i][2] * eye[2]));
  return { fx, fy: fx, cx, cy, width, height, rotation: R, translation: t, near: 0.05 };
}

/**
 * Arc of cameras looking at the origin with the scene modeled as the z=0
 * plane; the arc radius is chosen so the median pairwise baseline is 1
 * (monocular scale is arbitrary, so a convention pins it).
 */
export function planarRig(nViews: number, width: number, height: number): RigView[] {
  const spreadDeg = 16;
  const f = 1.1 * Math.max(width, height);
  const cx = (width - 1) / 2;
  const cy = (height - 1) / 2;
  let radius = 4.0;
  const angles = Array.from({ length: nViews }, (_, i) =>
    ((i / Math.max(nViews - 1, 1)) - 0.5) * (spreadDeg * Math.PI / 180),
  );
  const eye = (ang: number, r: number) => [r * Math.sin(ang), 0, -r * Math.cos(ang)];
  // normalize the median pairwise baseline to 1
  const base: number[] = [];
  for (let i = 0; i < nViews; i++) {
    for (let j = i + 1; j < nViews; j++) {
      const a = eye(angles[i], radius);
      const b = eye(angles[j], radius);
      base.push(Math.hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]));
    }
  }
  base.sort((a, b) => a - b);
  const median = base.length ? base[Math.floor(base.length / 2)] : 1;
  radius /= median;

  const views: RigView[] = [];
  for (const ang of angles) {
    const cam = lookAt(eye(ang, radius), [0, 0, 0], f, cx, cy, width, height);
    const points = new Float64Array(width * height * 3);
    const R = cam.rotation;
    const origin = eye(ang, radius);
    for (let y = 0; y < height; y++) {
      for (let x = 0; x < width; x++) {
        // ray through the pixel in world space: d = R^T [ (x-cx)/f, (y-cy)/f, 1 ]
        const dc = [(x - cx) / f, (y - cy) / f, 1];
        const d = [0, 1, 2].map((i) => R[0][i] * dc[0] + R[1][i] * dc[1] + R[2][i] * dc[2]);
        const t = (0 - origin[2]) / d[2]; // intersect z=0 plane
        const p = (y * width + x) * 3;
        points[p] = origin[0] + t * d[0];
        points[p + 1] = origin[1] + t * d[1];
        points[p + 2] = origin[2] + t * d[2];
      }
    }
    views.push({ camera: cam, points });
  }
  return views;
}

/** Project world points with a camera; returns [u, v, z] triples. */
export function projectPoints(cam: CameraJson, points: Float64Array): Float64Array {
  const n = points.length / 3;
  const out = new Float64Array(n * 3);
  const R = cam.rotation;
  const t = cam.translation;
  for (let i = 0; i < n; i++) {
    const X = points[i * 3], Y = points[i * 3 + 1], Z = points[i * 3 + 2];
    const x = R[0][0] * X + R[0][1] * Y + R[0][2] * Z + t[0];
    const y = R[1][0] * X + R[1][1] * Y + R[1][2] * Z + t[1];
    const z = R[2][0] * X + R[2][1] * Y + R[2][2] * Z + t[2];
    out[i * 3] = cam.fx * (x / z) + cam.cx;
    out[i * 3 + 1] = cam.fy * (y / z) + cam.cy;
    out[i * 3 + 2] = z;
  }
  return out;
}
