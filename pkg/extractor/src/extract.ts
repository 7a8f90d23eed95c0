#!/usr/bin/env node
/**
 * CLI: turn a directory of 3-4 capture images into a pipeline-ready scene.
 *
 *   slgs-extract --images DIR --out SCENE_DIR [--models builtin] [--device cpu]
 *
 * The builtin backend needs no downloads; `clip`/`sam` request neural
 * adapters via @xenova/transformers when that package and its weights are
 * available locally (see adapters.ts).  Dense matching and stereo priors
 * have no in-process neural runtime here, so geometry always comes from the
 * quasi-planar rig model.
 */
import * as fs from "node:fs";
import * as path from "node:path";
import {
  GRANULARITIES,
  ManifestDoc,
  ViewFiles,
  defaultConfig,
  f32Tensor,
  listImages,
  loadImage,
  writeImage,
  writeLabelMap,
  writeManifest,
  writeMatchField,
  writePly,
  writePointMap,
  writeTensor,
} from "./formats.js";
import { EMBED_DIM, planarRig, projectPoints, segmentView } from "./builtin.js";
import { neuralAdapters } from "./adapters.js";

interface Args {
  images: string;
  out: string;
  models: string[];
  device: string;
  seed: number;
}

function parseArgs(argv: string[]): Args {
  const args: Args = { images: "", out: "", models: ["builtin"], device: "cpu", seed: 0 };
  for (let i = 0; i < argv.length; i++) {
    const a = argv[i];
    const next = () => {
      if (i + 1 >= argv.length) throw new Error(`missing value for ${a}`);
      return argv[++i];
    };
    if (a === "--images") args.images = next();
    else if (a === "--out") args.out = next();
    else if (a === "--models") args.models = next().split(",").map((s) => s.trim());
    else if (a === "--device") args.device = next();
    else if (a === "--seed") args.seed = parseInt(next(), 10);
    else if (a === "--help" || a === "-h") {
      console.log("usage: slgs-extract --images DIR --out DIR [--models builtin|clip,sam] [--device cpu] [--seed N]");
      process.exit(0);
    } else throw new Error(`unknown argument ${a}`);
  }
  if (!args.images || !args.out) throw new Error("--images and --out are required");
  return args;
}

export async function extract(args: Args): Promise<string> {
  const files = listImages(args.images);
  if (files.length < 2) throw new Error(`need at least 2 images, found ${files.length} in ${args.images}`);
  const images = files.map(loadImage);
  const { width, height } = images[0];
  for (const img of images) {
    if (img.width !== width || img.height !== height) {
      throw new Error("all images must share one resolution");
    }
  }

  const useNeural = args.models.some((m) => m !== "builtin");
  const adapters = useNeural ? await neuralAdapters(args.models, args.device) : null;

  const root = args.out;
  for (const sub of ["images", "masks", "features", "matches", "points"]) {
    fs.mkdirSync(path.join(root, sub), { recursive: true });
  }

  const rig = planarRig(images.length, width, height);
  const views: ViewFiles[] = [];
  for (let v = 0; v < images.length; v++) {
    const imgRel = `images/view${v}.png`;
    writeImage(path.join(root, imgRel), height, width, images[v].rgb);
    const masks: Record<string, string> = {};
    const feats: Record<string, string> = {};
    for (const gran of GRANULARITIES) {
      const seg = adapters?.segment
        ? await adapters.segment(images[v], gran, args.seed + v)
        : segmentView(images[v], gran, args.seed * 101 + v * 13 + GRANULARITIES.indexOf(gran));
      const maskRel = `masks/view${v}_${gran}.png`;
      writeLabelMap(path.join(root, maskRel), height, width, seg.labels);
      masks[gran] = maskRel;
      const featRel = `features/view${v}_${gran}.bin`;
      const table = new Float32Array(seg.regions.length * EMBED_DIM);
      for (const region of seg.regions) {
        const emb = adapters?.embedRegion
          ? await adapters.embedRegion(images[v], seg.labels, region.id)
          : region.embedding;
        table.set(Float32Array.from(emb), (region.id - 1) * EMBED_DIM);
      }
      writeTensor(path.join(root, featRel), f32Tensor(seg.regions.length, EMBED_DIM, 1, table));
      feats[gran] = featRel;
    }
    const ptsRel = `points/view${v}.bin`;
    writePointMap(
      path.join(root, ptsRel), height, width,
      Float32Array.from(rig[v].points), new Uint8Array(width * height).fill(1),
    );
    views.push({
      view: v,
      image: imgRel,
      camera: rig[v].camera,
      masks: masks as ViewFiles["masks"],
      features: feats as ViewFiles["features"],
      points: ptsRel,
    });
  }

  // dense match fields from the shared plane model; validity = in-bounds
  const matchFields: Record<string, string> = {};
  for (let i = 0; i < images.length; i++) {
    for (let j = 0; j < images.length; j++) {
      if (i === j) continue;
      const proj = projectPoints(rig[j].camera, rig[i].points);
      const targets = new Float32Array(width * height * 2);
      const valid = new Uint8Array(width * height);
      for (let p = 0; p < width * height; p++) {
        const u = proj[p * 3];
        const v2 = proj[p * 3 + 1];
        const z = proj[p * 3 + 2];
        targets[p * 2] = u;
        targets[p * 2 + 1] = v2;
        const ur = Math.round(u);
        const vr = Math.round(v2);
        valid[p] = z > 0.05 && ur >= 0 && ur < width && vr >= 0 && vr < height ? 1 : 0;
      }
      const rel = `matches/m_${i}_${j}.bin`;
      writeMatchField(path.join(root, rel), height, width, targets, valid);
      matchFields[`${i}->${j}`] = rel;
    }
  }

  // colored point cloud from subsampled plane points
  const stride = 3;
  const pts: number[] = [];
  const cols: number[] = [];
  for (let v = 0; v < images.length; v++) {
    for (let y = 0; y < height; y += stride) {
      for (let x = 0; x < width; x += stride) {
        const p = y * width + x;
        pts.push(rig[v].points[p * 3], rig[v].points[p * 3 + 1], rig[v].points[p * 3 + 2]);
        cols.push(images[v].rgb[p * 3], images[v].rgb[p * 3 + 1], images[v].rgb[p * 3 + 2]);
      }
    }
  }
  writePly(path.join(root, "cloud.ply"), Float64Array.from(pts), Float64Array.from(cols));

  const doc: ManifestDoc = {
    views,
    eval_views: [],
    point_cloud: "cloud.ply",
    match_fields: matchFields,
    config: { ...defaultConfig(), seed: args.seed },
    queries: null,
    outputs: {},
  };
  return writeManifest(root, doc);
}

const isMain = process.argv[1] && import.meta.url.endsWith(path.basename(process.argv[1]));
if (isMain) {
  extract(parseArgs(process.argv.slice(2)))
    .then((manifest) => {
      console.log(`manifest written to ${manifest}`);
    })
    .catch((err) => {
      console.error(`error: ${err.message}`);
      process.exit(1);
    });
}
