/**
 * Writers for the pipeline interchange formats: flat binary tensors behind a
 * 16-byte header, match fields and per-pixel point maps as paired tensor
 * blocks, binary little-endian PLY point clouds, PNG images/label maps, and
 * the scene manifest JSON.  Layouts match the consuming pipeline bit for bit.
 */
import * as fs from "node:fs";
import * as path from "node:path";
import { decodeImage, encodeGray16, encodeRgb8 } from "./png.js";

export const TENSOR_MAGIC = "SLGS";
export const DTYPE_F32 = 0;
export const DTYPE_U8 = 1;

export interface Tensor {
  height: number;
  width: number;
  channels: number;
  dtype: typeof DTYPE_F32 | typeof DTYPE_U8;
  data: Float32Array | Uint8Array;
}

/** Header: magic "SLGS", dtype u8, version u8, channels u16, height u32, width u32. */
export function tensorBytes(t: Tensor): Buffer {
  const header = Buffer.alloc(16);
  header.write(TENSOR_MAGIC, 0, "ascii");
  header.writeUInt8(t.dtype, 4);
  header.writeUInt8(1, 5);
  header.writeUInt16LE(t.channels, 6);
  header.writeUInt32LE(t.height, 8);
  header.writeUInt32LE(t.width, 12);
  const body = Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength);
  return Buffer.concat([header, body]);
}

export function writeTensor(file: string, t: Tensor): void {
  fs.writeFileSync(file, tensorBytes(t));
}

export function f32Tensor(height: number, width: number, channels: number, data: Float32Array): Tensor {
  if (data.length !== height * width * channels) throw new Error("tensor size mismatch");
  return { height, width, channels, dtype: DTYPE_F32, data };
}

export function u8Tensor(height: number, width: number, channels: number, data: Uint8Array): Tensor {
  if (data.length !== height * width * channels) throw new Error("tensor size mismatch");
  return { height, width, channels, dtype: DTYPE_U8, data };
}

/** Match field file: f32 HxWx2 targets then u8 HxW validity, back to back. */
export function writeMatchField(file: string, height: number, width: number, targets: Float32Array, valid: Uint8Array): void {
  const blob = Buffer.concat([
    tensorBytes(f32Tensor(height, width, 2, targets)),
    tensorBytes(u8Tensor(height, width, 1, valid)),
  ]);
  fs.writeFileSync(file, blob);
}

/** Per-pixel 3D points: f32 HxWx3 then u8 HxW validity. */
export function writePointMap(file: string, height: number, width: number, points: Float32Array, valid: Uint8Array): void {
  const blob = Buffer.concat([
    tensorBytes(f32Tensor(height, width, 3, points)),
    tensorBytes(u8Tensor(height, width, 1, valid)),
  ]);
  fs.writeFileSync(file, blob);
}

export function writeLabelMap(file: string, height: number, width: number, labels: Uint16Array): void {
  fs.writeFileSync(file, encodeGray16(width, height, labels));
}

/** rgb in [0,1], length h*w*3. */
export function writeImage(file: string, height: number, width: number, rgb: Float64Array | Float32Array): void {
  const bytes = new Uint8Array(height * width * 3);
  for (let i = 0; i < bytes.length; i++) {
    const v = Math.min(Math.max(rgb[i], 0), 1);
    bytes[i] = Math.round(v * 255);
  }
  fs.writeFileSync(file, encodeRgb8(width, height, bytes));
}

/** Binary little-endian PLY with float32 x/y/z and uint8 r/g/b. */
export function writePly(file: string, points: Float64Array, colors: Float64Array): void {
  const n = points.length / 3;
  const header =
    "ply\nformat binary_little_endian 1.0\n" +
    `element vertex ${n}\n` +
    "property float x\nproperty float y\nproperty float z\n" +
    "property uchar red\nproperty uchar green\nproperty uchar blue\n" +
    "end_header\n";
  const body = Buffer.alloc(n * 15);
  for (let i = 0; i < n; i++) {
    const off = i * 15;
    body.writeFloatLE(points[i * 3], off);
    body.writeFloatLE(points[i * 3 + 1], off + 4);
    body.writeFloatLE(points[i * 3 + 2], off + 8);
    for (let c = 0; c < 3; c++) {
      const v = Math.min(Math.max(colors[i * 3 + c], 0), 1);
      body.writeUInt8(Math.round(v * 255), off + 12 + c);
    }
  }
  fs.writeFileSync(file, Buffer.concat([Buffer.from(header, "ascii"), body]));
}

// -- image loading ------------------------------------------------------------

export interface LoadedImage {
  width: number;
  height: number;
  rgb: Float64Array; // [0,1]
}

function decodePpm(buf: Buffer): LoadedImage {
  // P6 binary PPM with maxval 255
  const text = buf.toString("latin1", 0, Math.min(buf.length, 64));
  const m = /^P6\s+(#[^\n]*\n\s*)?(\d+)\s+(\d+)\s+(\d+)\s/.exec(text);
  if (!m) throw new Error("unsupported PPM header");
  const width = parseInt(m[2], 10);
  const height = parseInt(m[3], 10);
  if (parseInt(m[4], 10) !== 255) throw new Error("PPM maxval must be 255");
  const offset = m[0].length;
  const rgb = new Float64Array(width * height * 3);
  for (let i = 0; i < rgb.length; i++) rgb[i] = buf[offset + i] / 255;
  return { width, height, rgb };
}

export function loadImage(file: string): LoadedImage {
  const buf = fs.readFileSync(file);
  if (file.toLowerCase().endsWith(".ppm")) return decodePpm(buf);
  const img = decodeImage(buf);
  return { width: img.width, height: img.height, rgb: img.rgb };
}

export function listImages(dir: string): string[] {
  const exts = new Set([".png", ".ppm"]);
  return fs
    .readdirSync(dir)
    .filter((f) => exts.has(path.extname(f).toLowerCase()))
    .sort()
    .map((f) => path.join(dir, f));
}

// -- cameras and manifest -------------------------------------------------------

export interface CameraJson {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
  rotation: number[][];
  translation: number[];
  near: number;
}

export const GRANULARITIES = ["whole", "subpart", "part"] as const;
export type GranularityName = (typeof GRANULARITIES)[number];

export interface ViewFiles {
  view: number;
  image: string;
  camera: CameraJson;
  masks: Record<GranularityName, string>;
  features: Record<GranularityName, string>;
  points: string;
}

/** Pipeline configuration defaults, materialized into every manifest. */
export function defaultConfig(): Record<string, unknown> {
  return {
    semantic_dim: 3,
    lang_weight: 0.3,
    vote_threshold: 0.5,
    reproject_threshold: 0.5,
    fusion_levels: [1],
    min_reproject_points: 8,
    l1_weight: 0.8,
    image_weight_stage_b: 0.3,
    stage_a_iterations: 2000,
    stage_b_iterations: 1000,
    lr_means: 1.6e-4,
    lr_log_scales: 5e-3,
    lr_rotations: 1e-3,
    lr_opacity_logits: 5e-2,
    lr_colors: 2.5e-3,
    lr_sem_codes: 2.5e-3,
    lr_geometry_scale_stage_b: 0.05,
    lr_pose: 1e-3,
    pose_optimization: true,
    pose_start_iteration: 150,
    densify_start: 500,
    densify_end: 2000,
    densify_interval: 100,
    densify_grad_threshold: 2e-4,
    split_scale_fraction: 0.05,
    prune_opacity: 0.005,
    max_gaussians: 50000,
    relevancy_threshold_lerf: 0.6,
    relevancy_threshold_ovs: 0.8,
    smoothing_kernel: 11,
    area_threshold: 2000,
    tile_size: 16,
    alpha_clamp: 0.99,
    transmittance_floor: 1e-4,
    cutoff_sigma: 3.0,
    cov2d_floor: 0.3,
    seed: 0,
  };
}

export interface ManifestDoc {
  views: ViewFiles[];
  eval_views: ViewFiles[];
  point_cloud: string;
  match_fields: Record<string, string>;
  config: Record<string, unknown>;
  queries: string | null;
  outputs: Record<string, unknown>;
}

export function writeManifest(root: string, doc: ManifestDoc): string {
  const file = path.join(root, "manifest.json");
  fs.writeFileSync(file, JSON.stringify(doc, null, 2));
  return file;
}
