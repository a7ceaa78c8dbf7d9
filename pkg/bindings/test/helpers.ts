/** Shared test utilities: seeded PRNG and random sample construction. */

import { RgbdBuffers } from "../src/index.js";

/** mulberry32: small deterministic PRNG, plenty for test data. */
export function prng(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function randomSample(seed: number, height = 12, width = 16): RgbdBuffers {
  const rand = prng(seed);
  const n = height * width;
  const rgb = new Uint8Array(n * 3);
  for (let i = 0; i < rgb.length; i++) {
    rgb[i] = Math.floor(rand() * 256);
  }
  const depthRaw = new Uint16Array(n);
  for (let i = 0; i < n; i++) {
    // a few invalid (zero) pixels, the rest 0.5 .. 6 m at mm scale
    depthRaw[i] = rand() < 0.05 ? 0 : 500 + Math.floor(rand() * 5500);
  }
  return {
    height,
    width,
    rgb,
    depthRaw,
    depthScale: 1000.0,
    intrinsics: {
      fx: 40 + rand() * 20,
      fy: 40 + rand() * 20,
      cx: (width - 1) / 2,
      cy: (height - 1) / 2,
    },
    sourceId: `ts_${seed}`,
  };
}

export function cloneSample(s: RgbdBuffers): RgbdBuffers {
  return {
    ...s,
    rgb: new Uint8Array(s.rgb),
    depthRaw: new Uint16Array(s.depthRaw),
    intrinsics: { ...s.intrinsics },
  };
}
