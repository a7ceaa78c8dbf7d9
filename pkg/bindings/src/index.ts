/**
 * Typed-array surface over the focaldepth toolkit.
 *
 * Buffers cross the boundary through lossless containers: 8/16-bit image
 * data round-trips bitwise through PNG, and float64 values round-trip
 * exactly through shortest-repr JSON. Every call leaves its input buffers
 * untouched and returns fresh arrays.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { runCli, withTempDir } from "./bridge.js";
import {
  AugmentationTag,
  CameraIntrinsics,
  ManifestRecord,
  readManifest,
  writeManifest,
} from "./manifest.js";
import { decodeGray16, decodeRgb8, encodeGray16, encodeRgb8 } from "./png.js";

export { CameraIntrinsics, AugmentationTag, ManifestRecord } from "./manifest.js";
export {
  decodeGray16,
  decodeRgb8,
  encodeGray16,
  encodeRgb8,
  Gray16Image,
  Rgb8Image,
} from "./png.js";
export { pythonExecutable, runCli } from "./bridge.js";

export type AugmentMode = "focal_change" | "depth_rescale";

/** An RGB-D pair as flat buffers: rgb is H*W*3, depthRaw is H*W uint16 in
 * depthScale units per meter with 0 marking invalid pixels. */
export interface RgbdBuffers {
  height: number;
  width: number;
  rgb: Uint8Array;
  depthRaw: Uint16Array;
  depthScale: number;
  intrinsics: CameraIntrinsics;
  sourceId: string;
}

export interface AugmentedBuffers extends RgbdBuffers {
  tag: AugmentationTag;
}

function checkSample(sample: RgbdBuffers): void {
  const { height, width, rgb, depthRaw } = sample;
  if (rgb.length !== height * width * 3) {
    throw new RangeError(`rgb length ${rgb.length} != ${height}x${width}x3`);
  }
  if (depthRaw.length !== height * width) {
    throw new RangeError(`depthRaw length ${depthRaw.length} != ${height}x${width}`);
  }
  if (!(sample.depthScale > 0)) {
    throw new RangeError(`depthScale must be positive, got ${sample.depthScale}`);
  }
}

function writeSampleFiles(dir: string, sample: RgbdBuffers): void {
  fs.writeFileSync(
    path.join(dir, `${sample.sourceId}_rgb.png`),
    encodeRgb8(sample.rgb, sample.width, sample.height),
  );
  fs.writeFileSync(
    path.join(dir, `${sample.sourceId}_depth.png`),
    encodeGray16(sample.depthRaw, sample.width, sample.height),
  );
  const record: ManifestRecord = {
    rgb_path: `${sample.sourceId}_rgb.png`,
    depth_path: `${sample.sourceId}_depth.png`,
    fx: sample.intrinsics.fx,
    fy: sample.intrinsics.fy,
    cx: sample.intrinsics.cx,
    cy: sample.intrinsics.cy,
    depth_scale: sample.depthScale,
    source_id: sample.sourceId,
  };
  writeManifest(path.join(dir, "manifest.jsonl"), [record]);
}

function readSampleFiles(dir: string, record: ManifestRecord): AugmentedBuffers {
  const rgbImage = decodeRgb8(fs.readFileSync(path.join(dir, record.rgb_path)));
  const depthImage = decodeGray16(fs.readFileSync(path.join(dir, record.depth_path)));
  if (rgbImage.width !== depthImage.width || rgbImage.height !== depthImage.height) {
    throw new Error(`rgb/depth size mismatch for ${record.source_id}`);
  }
  return {
    height: rgbImage.height,
    width: rgbImage.width,
    rgb: rgbImage.rgb,
    depthRaw: depthImage.gray,
    depthScale: record.depth_scale,
    intrinsics: { fx: record.fx, fy: record.fy, cx: record.cx, cy: record.cy },
    sourceId: record.source_id,
    tag: record.augmentation ?? { mode: "original" },
  };
}

/**
 * Augment one sample: center crop by k, nearest-neighbor upsample, and
 * either reinterpret the focal length (focal_change) or rescale the depth
 * values by k (depth_rescale). Matches the toolkit's augment subcommand
 * exactly; the input buffers are not modified.
 */
export function boundAugment(
  sample: RgbdBuffers,
  k: number,
  mode: AugmentMode,
): AugmentedBuffers {
  if (!(k > 0 && k <= 1)) {
    throw new RangeError(`k must be in (0, 1], got ${k}`);
  }
  if (mode !== "focal_change" && mode !== "depth_rescale") {
    throw new RangeError(`mode must be focal_change or depth_rescale, got ${mode}`);
  }
  checkSample(sample);
  return withTempDir((dir) => {
    const inDir = path.join(dir, "in");
    const outDir = path.join(dir, "out");
    fs.mkdirSync(inDir);
    writeSampleFiles(inDir, sample);
    runCli([
      "augment",
      "--manifest", path.join(inDir, "manifest.jsonl"),
      "--out", outDir,
      "--ratio", mode === "focal_change" ? "1:0" : "0:1",
      "--k-min", String(k),
      "--k-max", String(k),
      "--seed", "0",
    ]);
    const records = readManifest(path.join(outDir, "manifest.jsonl"));
    return readSampleFiles(outDir, records[0]);
  });
}

export interface EvaluationReport {
  delta1: number;
  delta2: number;
  delta3: number;
  absRel: number;
  rmse: number;
  log10Err: number;
  silog: number;
  validPixels: number;
  depthCap: [number, number];
}

/**
 * Evaluate a predicted depth buffer against ground truth over masked-in
 * pixels whose true depth lies in (capMin, capMax]. Buffers are uint16 raw
 * depth at depthScale units per meter; mask entries are 0 or 1.
 */
export function boundEvaluate(
  pred: Uint16Array,
  gt: Uint16Array,
  mask: Uint8Array,
  height: number,
  width: number,
  depthScale: number,
  cap: [number, number] = [0.001, 10.0],
): EvaluationReport {
  const n = height * width;
  if (pred.length !== n || gt.length !== n || mask.length !== n) {
    throw new RangeError(
      `buffer lengths ${pred.length}/${gt.length}/${mask.length} != ${height}x${width}`,
    );
  }
  // The toolkit derives the validity mask from nonzero ground-truth raw
  // values, so the explicit mask is applied by zeroing masked-out gt pixels.
  const gtMasked = new Uint16Array(n);
  for (let i = 0; i < n; i++) {
    gtMasked[i] = mask[i] ? gt[i] : 0;
  }
  return withTempDir((dir) => {
    const predDir = path.join(dir, "pred");
    const gtDir = path.join(dir, "gt");
    fs.mkdirSync(predDir);
    fs.mkdirSync(gtDir);
    const intr = { fx: 50, fy: 50, cx: (width - 1) / 2, cy: (height - 1) / 2 };
    const common = {
      height, width, depthScale, intrinsics: intr, sourceId: "pair",
    };
    writeSampleFiles(predDir, { ...common, rgb: new Uint8Array(n * 3), depthRaw: pred });
    writeSampleFiles(gtDir, { ...common, rgb: new Uint8Array(n * 3), depthRaw: gtMasked });
    const reportPath = path.join(dir, "report.json");
    runCli([
      "eval",
      "--pred-manifest", path.join(predDir, "manifest.jsonl"),
      "--gt-manifest", path.join(gtDir, "manifest.jsonl"),
      "--cap", `${cap[0]}:${cap[1]}`,
      "--json-out", reportPath,
    ]);
    const doc = JSON.parse(fs.readFileSync(reportPath, "utf8"));
    const overall = doc.overall;
    return {
      delta1: overall.delta1,
      delta2: overall.delta2,
      delta3: overall.delta3,
      absRel: overall.abs_rel,
      rmse: overall.rmse,
      log10Err: overall.log10_err,
      silog: overall.silog,
      validPixels: overall.valid_pixels,
      depthCap: [overall.depth_cap[0], overall.depth_cap[1]],
    };
  });
}

/**
 * Batch augmentation over an existing on-disk manifest; returns the path of
 * the augmented manifest. ratio is focal-change : depth-rescale.
 */
export function augmentDataset(
  manifestPath: string,
  outDir: string,
  options: { ratio?: [number, number]; kMin?: number; kMax?: number; seed?: number } = {},
): string {
  const ratio = options.ratio ?? [0.6, 0.4];
  runCli([
    "augment",
    "--manifest", manifestPath,
    "--out", outDir,
    "--ratio", `${ratio[0]}:${ratio[1]}`,
    "--k-min", String(options.kMin ?? 0.7),
    "--k-max", String(options.kMax ?? 1.0),
    "--seed", String(options.seed ?? 0),
  ]);
  return path.join(outDir, "manifest.jsonl");
}

export interface PyramidLevel {
  height: number;
  width: number;
  data: Float64Array; // row-major, single channel
}

/**
 * Multi-scale focal features for a focal length f at a target resolution:
 * five single-channel levels at 1/2 ... 1/32 scale. The encoding grid comes
 * from a model checkpoint when given, otherwise from a fresh seeded init.
 */
export function focalPyramid(
  f: number,
  height: number,
  width: number,
  options: { seed?: number; checkpoint?: string } = {},
): PyramidLevel[] {
  if (!(f > 0)) {
    throw new RangeError(`f must be positive, got ${f}`);
  }
  return withTempDir((dir) => {
    const out = path.join(dir, "pyramid.json");
    const args = [
      "focal-pyramid",
      "--f", String(f),
      "--height", String(height),
      "--width", String(width),
      "--out", out,
    ];
    if (options.checkpoint !== undefined) {
      args.push("--checkpoint", options.checkpoint);
    } else {
      args.push("--seed", String(options.seed ?? 0));
    }
    runCli(args);
    const doc = JSON.parse(fs.readFileSync(out, "utf8"));
    return doc.levels.map((level: { height: number; width: number; data: number[] }) => ({
      height: level.height,
      width: level.width,
      data: Float64Array.from(level.data),
    }));
  });
}
