// Shared plumbing for the fixture contract tests: technique loading, script
// execution with the target-directory working-directory convention, a
// literal-byte scanner, and host capability probes.

import { execFileSync, spawnSync } from "node:child_process";
import { existsSync, mkdtempSync, readdirSync, readFileSync, statSync } from "node:fs";
import { randomBytes } from "node:crypto";
import { tmpdir } from "node:os";
import { delimiter, dirname, join, resolve } from "node:path";
import { fileURLToPath } from "node:url";

const here = dirname(fileURLToPath(import.meta.url));

export const FIXTURES_ROOT = resolve(here, "..");
export const TECHNIQUES_DIR = join(FIXTURES_ROOT, "techniques");
export const TOOLS_DIR = join(FIXTURES_ROOT, "tools");

export interface TechniqueMeta {
  id: string;
  family?: string;
  dependencies: string[];
  backend: "local-ok" | "container-only";
  capabilities?: string[];
  notes?: string;
}

export interface Technique {
  meta: TechniqueMeta;
  plant: string;
  recovery: string;
  dir: string;
}

export function loadTechniques(): Technique[] {
  return readdirSync(TECHNIQUES_DIR)
    .sort()
    .filter((name) => existsSync(join(TECHNIQUES_DIR, name, "meta.json")))
    .map((name) => {
      const dir = join(TECHNIQUES_DIR, name);
      return {
        meta: JSON.parse(readFileSync(join(dir, "meta.json"), "utf8")),
        plant: readFileSync(join(dir, "plant.sh"), "utf8"),
        recovery: readFileSync(join(dir, "recovery.sh"), "utf8"),
        dir,
      };
    });
}

export function shimmedPath(): string {
  return `${TOOLS_DIR}${delimiter}${process.env.PATH ?? ""}`;
}

export function which(tool: string): boolean {
  const result = spawnSync("bash", ["-c", `command -v ${tool}`], {
    env: { ...process.env, PATH: shimmedPath() },
  });
  return result.status === 0;
}

/** Fresh flag matching the grammar: 8-16 random bytes, lowercase hex. */
export function freshFlag(): string {
  const length = 8 + Math.floor(Math.random() * 9);
  return `flag{${randomBytes(length).toString("hex")}}`;
}

let cachedXattrDir: string | null | undefined;

/** A directory whose filesystem accepts user.* xattrs, or null. */
export function xattrCapableDir(): string | null {
  if (cachedXattrDir !== undefined) return cachedXattrDir;
  const probeScript =
    "import os, sys, tempfile\n" +
    "with tempfile.NamedTemporaryFile(dir=sys.argv[1]) as probe:\n" +
    "    os.setxattr(probe.name, 'user.fixture_probe', b'1')\n";
  for (const candidate of [tmpdir(), "/dev/shm"]) {
    const result = spawnSync("python3", ["-c", probeScript, candidate]);
    if (result.status === 0) {
      cachedXattrDir = candidate;
      return candidate;
    }
  }
  cachedXattrDir = null;
  return null;
}

export function runnableLocally(technique: Technique): { ok: boolean; reason?: string } {
  for (const tool of technique.meta.dependencies) {
    if (!which(tool)) return { ok: false, reason: `missing tool: ${tool}` };
  }
  const capabilities = technique.meta.capabilities ?? [];
  if (capabilities.includes("user-xattr") && xattrCapableDir() === null) {
    return { ok: false, reason: "no xattr-capable filesystem" };
  }
  return { ok: true };
}

/** Working directory parent honoring the technique's capability needs. */
export function targetParent(technique: Technique): string {
  const capabilities = technique.meta.capabilities ?? [];
  if (capabilities.includes("user-xattr")) {
    const dir = xattrCapableDir();
    if (dir !== null) return dir;
  }
  return tmpdir();
}

export function makeTargetDir(technique: Technique): string {
  return mkdtempSync(join(targetParent(technique), "fixture-"));
}

export interface RunResult {
  status: number;
  stdout: string;
  stderr: string;
}

/** Run a script body with bash; cwd is the target directory by convention. */
export function runScript(script: string, args: string[], cwd: string): RunResult {
  const result = spawnSync("bash", ["-s", "--", ...args], {
    input: script,
    cwd,
    env: { ...process.env, PATH: shimmedPath() },
    encoding: "utf8",
    timeout: 60_000,
  });
  return {
    status: result.status ?? -1,
    stdout: result.stdout ?? "",
    stderr: result.stderr ?? "",
  };
}

function countOccurrences(haystack: Buffer, needle: Buffer): number {
  let count = 0;
  let index = haystack.indexOf(needle);
  while (index !== -1) {
    count += 1;
    index = haystack.indexOf(needle, index + needle.length);
  }
  return count;
}

/** Literal byte-sequence scan over file contents and entry names. */
export function scanTree(root: string, needle: string): number {
  const needleBytes = Buffer.from(needle);
  let occurrences = 0;
  const stack = [root];
  while (stack.length > 0) {
    const current = stack.pop()!;
    for (const entry of readdirSync(current)) {
      occurrences += countOccurrences(Buffer.from(entry), needleBytes);
      const full = join(current, entry);
      const info = statSync(full, { throwIfNoEntry: false });
      if (info === undefined) continue;
      if (info.isDirectory()) {
        stack.push(full);
      } else if (info.isFile()) {
        occurrences += countOccurrences(readFileSync(full), needleBytes);
      }
    }
  }
  return occurrences;
}

export function bashAvailable(): boolean {
  try {
    execFileSync("bash", ["--version"], { stdio: "ignore" });
    return true;
  } catch {
    return false;
  }
}
