/**
 * Minimal PNG codec for the two formats the depth toolkit exchanges:
 * 8-bit RGB (color type 2) and 16-bit grayscale (color type 0).
 *
 * Encoding always writes filter 0 scanlines; decoding reconstructs all five
 * scanline filters, so images written by any conforming encoder (including
 * adaptive-filter ones) read back exactly. Interlaced images are rejected.
 */

import * as zlib from "node:zlib";

const SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(...parts: Buffer[]): number {
  let c = 0xffffffff;
  for (const part of parts) {
    for (let i = 0; i < part.length; i++) {
      c = CRC_TABLE[(c ^ part[i]) & 0xff] ^ (c >>> 8);
    }
  }
  return (c ^ 0xffffffff) >>> 0;
}

function chunk(type: string, data: Buffer): Buffer {
  const header = Buffer.alloc(4);
  header.writeUInt32BE(data.length);
  const typeBuf = Buffer.from(type, "ascii");
  const crc = Buffer.alloc(4);
  crc.writeUInt32BE(crc32(typeBuf, data));
  return Buffer.concat([header, typeBuf, data, crc]);
}

function ihdr(width: number, height: number, bitDepth: number, colorType: number): Buffer {
  const data = Buffer.alloc(13);
  data.writeUInt32BE(width, 0);
  data.writeUInt32BE(height, 4);
  data[8] = bitDepth;
  data[9] = colorType;
  // compression 0, filter 0, interlace 0
  return chunk("IHDR", data);
}

/** Encode H*W*3 row-major bytes as an 8-bit RGB PNG. */
export function encodeRgb8(rgb: Uint8Array, width: number, height: number): Buffer {
  if (rgb.length !== width * height * 3) {
    throw new RangeError(`rgb length ${rgb.length} != ${width}x${height}x3`);
  }
  const stride = width * 3;
  const raw = Buffer.alloc((stride + 1) * height);
  for (let y = 0; y < height; y++) {
    raw[y * (stride + 1)] = 0; // filter: none
    raw.set(rgb.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1);
  }
  return Buffer.concat([
    SIGNATURE,
    ihdr(width, height, 8, 2),
    chunk("IDAT", zlib.deflateSync(raw)),
    chunk("IEND", Buffer.alloc(0)),
  ]);
}

/** Encode H*W uint16 samples as a 16-bit grayscale PNG (big-endian). */
export function encodeGray16(gray: Uint16Array, width: number, height: number): Buffer {
  if (gray.length !== width * height) {
    throw new RangeError(`gray length ${gray.length} != ${width}x${height}`);
  }
  const stride = width * 2;
  const raw = Buffer.alloc((stride + 1) * height);
  for (let y = 0; y < height; y++) {
    const rowStart = y * (stride + 1);
    raw[rowStart] = 0;
    for (let x = 0; x < width; x++) {
      raw.writeUInt16BE(gray[y * width + x], rowStart + 1 + x * 2);
    }
  }
  return Buffer.concat([
    SIGNATURE,
    ihdr(width, height, 16, 0),
    chunk("IDAT", zlib.deflateSync(raw)),
    chunk("IEND", Buffer.alloc(0)),
  ]);
}

interface RawImage {
  width: number;
  height: number;
  bitDepth: number;
  colorType: number;
  pixels: Buffer; // unfiltered scanline bytes, stride = width * bytesPerPixel
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

function parsePng(buf: Buffer): RawImage {
  if (!buf.subarray(0, 8).equals(SIGNATURE)) {
    throw new Error("not a PNG file");
  }
  let offset = 8;
  let width = 0;
  let height = 0;
  let bitDepth = 0;
  let colorType = 0;
  const idat: Buffer[] = [];
  while (offset < buf.length) {
    const length = buf.readUInt32BE(offset);
    const type = buf.toString("ascii", offset + 4, offset + 8);
    const data = buf.subarray(offset + 8, offset + 8 + length);
    if (type === "IHDR") {
      width = data.readUInt32BE(0);
      height = data.readUInt32BE(4);
      bitDepth = data[8];
      colorType = data[9];
      if (data[12] !== 0) throw new Error("interlaced PNG not supported");
    } else if (type === "IDAT") {
      idat.push(Buffer.from(data));
    } else if (type === "IEND") {
      break;
    }
    offset += 12 + length;
  }
  const bpp = colorType === 2 ? (bitDepth / 8) * 3 : bitDepth / 8;
  const stride = width * bpp;
  const raw = zlib.inflateSync(Buffer.concat(idat));
  if (raw.length !== (stride + 1) * height) {
    throw new Error(`unexpected scanline payload: ${raw.length}`);
  }
  const pixels = Buffer.alloc(stride * height);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const out = pixels.subarray(y * stride, (y + 1) * stride);
    const prev = y > 0 ? pixels.subarray((y - 1) * stride, y * stride) : null;
    for (let x = 0; x < stride; x++) {
      const a = x >= bpp ? out[x - bpp] : 0;
      const b = prev ? prev[x] : 0;
      const c = prev && x >= bpp ? prev[x - bpp] : 0;
      let value = row[x];
      switch (filter) {
        case 0: break;
        case 1: value = (value + a) & 0xff; break;
        case 2: value = (value + b) & 0xff; break;
        case 3: value = (value + ((a + b) >> 1)) & 0xff; break;
        case 4: value = (value + paeth(a, b, c)) & 0xff; break;
        default: throw new Error(`unknown scanline filter ${filter}`);
      }
      out[x] = value;
    }
  }
  return { width, height, bitDepth, colorType, pixels };
}

export interface Rgb8Image {
  width: number;
  height: number;
  rgb: Uint8Array; // H*W*3 row-major
}

export function decodeRgb8(buf: Buffer): Rgb8Image {
  const img = parsePng(buf);
  if (img.colorType !== 2 || img.bitDepth !== 8) {
    throw new Error(`expected 8-bit RGB, got depth ${img.bitDepth} color ${img.colorType}`);
  }
  return { width: img.width, height: img.height, rgb: new Uint8Array(img.pixels) };
}

export interface Gray16Image {
  width: number;
  height: number;
  gray: Uint16Array; // H*W row-major
}

export function decodeGray16(buf: Buffer): Gray16Image {
  const img = parsePng(buf);
  if (img.colorType !== 0 || img.bitDepth !== 16) {
    throw new Error(`expected 16-bit grayscale, got depth ${img.bitDepth} color ${img.colorType}`);
  }
  const gray = new Uint16Array(img.width * img.height);
  for (let i = 0; i < gray.length; i++) {
    gray[i] = img.pixels.readUInt16BE(i * 2);
  }
  return { width: img.width, height: img.height, gray };
}
