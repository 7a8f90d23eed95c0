/**
 * Optional neural adapters loaded on demand.
 *
 * The CLIP adapter embeds masked region crops with a pretrained
 * vision-language model via @xenova/transformers (install it and have the
 * weights cached locally); SAM-style promptable segmentation can be wired
 * the same way.  Dense matching (RoMa-class) and two-view stereo
 * (MASt3R-class) have no in-process JS runtime, so geometry stays on the
 * builtin planar rig either way; swap in externally computed files if you
 * have them.
 */
import type { GranularityName, LoadedImage } from "./formats.js";
import { EMBED_DIM, Segmentation } from "./builtin.js";

export interface NeuralAdapters {
  segment?: (img: LoadedImage, gran: GranularityName, seed: number) => Promise<Segmentation>;
  embedRegion?: (img: LoadedImage, labels: Uint16Array, id: number) => Promise<Float64Array>;
}

const CLIP_MODEL = "Xenova/clip-vit-base-patch16";

export async function neuralAdapters(models: string[], device: string): Promise<NeuralAdapters> {
  const wanted = models.filter((m) => m !== "builtin");
  const unsupported = wanted.filter((m) => !["clip", "sam"].includes(m));
  if (unsupported.length) {
    throw new Error(
      `no in-process runtime for: ${unsupported.join(", ")} ` +
        "(dense matching and stereo priors must come from external tools)",
    );
  }
  let transformers: any;
  try {
    transformers = await import("@xenova/transformers" as string);
  } catch {
    throw new Error(
      "neural adapters need @xenova/transformers installed with cached weights; " +
        "run with --models builtin instead",
    );
  }
  const adapters: NeuralAdapters = {};
  if (wanted.includes("clip")) {
    const processor = await transformers.AutoProcessor.from_pretrained(CLIP_MODEL);
    const model = await transformers.CLIPVisionModelWithProjection.from_pretrained(CLIP_MODEL, { device });
    adapters.embedRegion = async (img, labels, id) => {
      const crop = maskedCrop(img, labels, id);
      const raw = new transformers.RawImage(crop.data, crop.width, crop.height, 3);
      const inputs = await processor(raw);
      const { image_embeds } = await model(inputs);
      const vec = Array.from(image_embeds.data as Float32Array);
      const out = new Float64Array(EMBED_DIM);
      for (let i = 0; i < Math.min(vec.length, EMBED_DIM); i++) out[i] = vec[i];
      const norm = Math.hypot(...out) || 1;
      for (let i = 0; i < EMBED_DIM; i++) out[i] /= norm;
      return out;
    };
  }
  if (wanted.includes("sam")) {
    throw new Error(
      "promptable segmentation via transformers.js is not wired in this build; " +
        "use --models builtin (or builtin,clip) instead",
    );
  }
  return adapters;
}

function maskedCrop(img: LoadedImage, labels: Uint16Array, id: number) {
  let minX = img.width, maxX = 0, minY = img.height, maxY = 0;
  for (let p = 0; p < labels.length; p++) {
    if (labels[p] !== id) continue;
    const y = Math.floor(p / img.width);
    const x = p - y * img.width;
    if (x < minX) minX = x;
    if (x > maxX) maxX = x;
    if (y < minY) minY = y;
    if (y > maxY) maxY = y;
  }
  const w = maxX - minX + 1;
  const h = maxY - minY + 1;
  const data = new Uint8ClampedArray(w * h * 3);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const src = (y + minY) * img.width + (x + minX);
      const dst = y * w + x;
      const keep = labels[src] === id;
      for (let c = 0; c < 3; c++) {
        data[dst * 3 + c] = keep ? Math.round(img.rgb[src * 3 + c] * 255) : 0;
      }
    }
  }
  return { data, width: w, height: h };
}
