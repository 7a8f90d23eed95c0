/**
 * Minimal PNG codec covering exactly what the interchange formats need:
 * encoding 8-bit RGB images and 16-bit grayscale label maps, and decoding
 * non-interlaced 8-bit RGB/RGBA/gray plus 16-bit gray files.
 */
import * as zlib from "node:zlib";

const SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(buf: Buffer): number {
  let c = 0xffffffff;
  for (let i = 0; i < buf.length; i++) c = CRC_TABLE[(c ^ buf[i]) & 0xff] ^ (c >>> 8);
  return (c ^ 0xffffffff) >>> 0;
}

function chunk(type: string, data: Buffer): Buffer {
  const head = Buffer.alloc(8);
  head.writeUInt32BE(data.length, 0);
  head.write(type, 4, "ascii");
  const crcBuf = Buffer.alloc(4);
  crcBuf.writeUInt32BE(crc32(Buffer.concat([head.subarray(4), data])), 0);
  return Buffer.concat([head, data, crcBuf]);
}

function encode(width: number, height: number, bitDepth: number, colorType: number, raw: Buffer): Buffer {
  const ihdr = Buffer.alloc(13);
  ihdr.writeUInt32BE(width, 0);
  ihdr.writeUInt32BE(height, 4);
  ihdr.writeUInt8(bitDepth, 8);
  ihdr.writeUInt8(colorType, 9);
  const idat = zlib.deflateSync(raw, { level: 6 });
  return Buffer.concat([
    SIGNATURE,
    chunk("IHDR", ihdr),
    chunk("IDAT", idat),
    chunk("IEND", Buffer.alloc(0)),
  ]);
}

/** rgb: Uint8Array of length width*height*3, row-major. */
export function encodeRgb8(width: number, height: number, rgb: Uint8Array): Buffer {
  const stride = width * 3;
  const raw = Buffer.alloc(height * (stride + 1));
  for (let y = 0; y < height; y++) {
    raw[y * (stride + 1)] = 0; // filter: none
    raw.set(rgb.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1);
  }
  return encode(width, height, 8, 2, raw);
}

/** labels: Uint16Array of length width*height; PNG stores 16-bit big-endian. */
export function encodeGray16(width: number, height: number, labels: Uint16Array): Buffer {
  const stride = width * 2;
  const raw = Buffer.alloc(height * (stride + 1));
  for (let y = 0; y < height; y++) {
    const off = y * (stride + 1);
    raw[off] = 0;
    for (let x = 0; x < width; x++) {
      raw.writeUInt16BE(labels[y * width + x], off + 1 + x * 2);
    }
  }
  return encode(width, height, 16, 0, raw);
}

export interface DecodedImage {
  width: number;
  height: number;
  /** per-pixel RGB in [0,1] */
  rgb: Float64Array;
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

function unfilter(raw: Buffer, width: number, height: number, bpp: number, stride: number): Buffer {
  const out = Buffer.alloc(height * stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const cur = out.subarray(y * stride, (y + 1) * stride);
    const prev = y > 0 ? out.subarray((y - 1) * stride, y * stride) : null;
    for (let i = 0; i < stride; i++) {
      const a = i >= bpp ? cur[i - bpp] : 0;
      const b = prev ? prev[i] : 0;
      const c = prev && i >= bpp ? prev[i - bpp] : 0;
      let v = row[i];
      switch (filter) {
        case 0: break;
        case 1: v = (v + a) & 0xff; break;
        case 2: v = (v + b) & 0xff; break;
        case 3: v = (v + ((a + b) >> 1)) & 0xff; break;
        case 4: v = (v + paeth(a, b, c)) & 0xff; break;
        default: throw new Error(`unsupported PNG filter ${filter}`);
      }
      cur[i] = v;
    }
  }
  return out;
}

interface Parsed {
  width: number;
  height: number;
  bitDepth: number;
  colorType: number;
  data: Buffer;
}

function parse(buf: Buffer): Parsed {
  if (!buf.subarray(0, 8).equals(SIGNATURE)) throw new Error("not a PNG file");
  let off = 8;
  let width = 0, height = 0, bitDepth = 0, colorType = 0;
  const idat: Buffer[] = [];
  while (off < buf.length) {
    const len = buf.readUInt32BE(off);
    const type = buf.toString("ascii", off + 4, off + 8);
    const data = buf.subarray(off + 8, off + 8 + len);
    if (type === "IHDR") {
      width = data.readUInt32BE(0);
      height = data.readUInt32BE(4);
      bitDepth = data.readUInt8(8);
      colorType = data.readUInt8(9);
      if (data.readUInt8(12) !== 0) throw new Error("interlaced PNG unsupported");
    } else if (type === "IDAT") {
      idat.push(data);
    } else if (type === "IEND") {
      break;
    }
    off += 12 + len;
  }
  return { width, height, bitDepth, colorType, data: zlib.inflateSync(Buffer.concat(idat)) };
}

/** Decode to RGB floats; supports gray8/16, RGB8/16 and RGBA8 (alpha dropped). */
export function decodeImage(buf: Buffer): DecodedImage {
  const { width, height, bitDepth, colorType, data } = parse(buf);
  const channels = colorType === 2 ? 3 : colorType === 6 ? 4 : colorType === 0 ? 1 : -1;
  if (channels < 0) throw new Error(`unsupported PNG color type ${colorType}`);
  const bytes = bitDepth / 8;
  const bpp = channels * bytes;
  const stride = width * bpp;
  const px = unfilter(data, width, height, bpp, stride);
  const rgb = new Float64Array(width * height * 3);
  const max = bitDepth === 16 ? 65535 : 255;
  for (let i = 0; i < width * height; i++) {
    for (let ch = 0; ch < 3; ch++) {
      const src = channels === 1 ? 0 : ch;
      const o = i * bpp + src * bytes;
      const v = bitDepth === 16 ? px.readUInt16BE(o) : px[o];
      rgb[i * 3 + ch] = v / max;
    }
  }
  return { width, height, rgb };
}

/** Decode a 16-bit grayscale label map. */
export function decodeGray16(buf: Buffer): { width: number; height: number; labels: Uint16Array } {
  const { width, height, bitDepth, colorType, data } = parse(buf);
  if (colorType !== 0 || bitDepth !== 16) throw new Error("expected 16-bit grayscale PNG");
  const stride = width * 2;
  const px = unfilter(data, width, height, 2, stride);
  const labels = new Uint16Array(width * height);
  for (let i = 0; i < labels.length; i++) labels[i] = px.readUInt16BE(i * 2);
  return { width, height, labels };
}
