/** JSON Lines manifest records, mirroring the toolkit's on-disk schema. */

import * as fs from "node:fs";

export interface CameraIntrinsics {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
}

export interface AugmentationTag {
  mode: "original" | "focal_change" | "depth_rescale";
  k?: number;
}

export interface ManifestRecord {
  rgb_path: string;
  depth_path: string;
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  depth_scale: number;
  source_id: string;
  augmentation?: AugmentationTag;
}

export function writeManifest(path: string, records: ManifestRecord[]): void {
  fs.writeFileSync(path, records.map((r) => JSON.stringify(r)).join("\n") + "\n");
}

export function readManifest(path: string): ManifestRecord[] {
  return fs
    .readFileSync(path, "utf8")
    .split("\n")
    .filter((line) => line.trim().length > 0)
    .map((line) => JSON.parse(line) as ManifestRecord);
}
