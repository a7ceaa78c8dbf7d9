/**
 * Subprocess bridge to the focaldepth CLI.
 *
 * The toolkit is reached exclusively through its documented interfaces:
 * command-line flags, JSON Lines manifests, PNG pairs, and JSON reports.
 * Set FOCALDEPTH_PYTHON to pick the interpreter that has the package
 * installed (default: python3).
 */

import { execFileSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

export function pythonExecutable(): string {
  return process.env.FOCALDEPTH_PYTHON ?? "python3";
}

/** Run a focaldepth subcommand; returns stdout. Throws with stderr attached. */
export function runCli(args: string[]): string {
  try {
    return execFileSync(pythonExecutable(), ["-m", "focaldepth", ...args], {
      encoding: "utf8",
      stdio: ["ignore", "pipe", "pipe"],
    });
  } catch (err) {
    const e = err as { status?: number; stderr?: string | Buffer };
    const stderr = e.stderr ? e.stderr.toString().trim() : "";
    throw new Error(
      `focaldepth ${args[0]} failed (exit ${e.status ?? "?"}): ${stderr}`,
    );
  }
}

/** Create a scratch directory and hand it to fn; always cleans up. */
export function withTempDir<T>(fn: (dir: string) => T): T {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "focaldepth-"));
  try {
    return fn(dir);
  } finally {
    fs.rmSync(dir, { recursive: true, force: true });
  }
}
