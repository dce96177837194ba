/** Viewer bundle manifest: plane files, depths, and the reference camera. */

export const SUPPORTED_VERSION = 1;

export interface CameraJson {
  intrinsics: number[]; // 3x3 row-major K
  rotation: number[]; // 3x3 row-major world-to-camera R
  translation: number[]; // 3-vector t
  width: number;
  height: number;
}

export interface PlaneEntry {
  file: string;
  depth: number;
}

export interface Manifest {
  version: number;
  width: number;
  height: number;
  planes: PlaneEntry[]; // index 0 is the farthest plane; depths strictly decrease
  camera: CameraJson;
}

export class ManifestError extends Error {}

function isRecord(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

function asPositiveInt(value: unknown, name: string): number {
  if (typeof value !== "number" || !Number.isInteger(value) || value <= 0) {
    throw new ManifestError(`${name} must be a positive integer`);
  }
  return value;
}

function asNumberArray(value: unknown, length: number, name: string): number[] {
  if (
    !Array.isArray(value) ||
    value.length !== length ||
    !value.every((x) => typeof x === "number" && Number.isFinite(x))
  ) {
    throw new ManifestError(`${name} must be ${length} finite numbers`);
  }
  return value as number[];
}

function validateCamera(value: unknown, name: string): CameraJson {
  if (!isRecord(value)) {
    throw new ManifestError(`${name} must be an object`);
  }
  return {
    intrinsics: asNumberArray(value.intrinsics, 9, `${name}.intrinsics`),
    rotation: asNumberArray(value.rotation, 9, `${name}.rotation`),
    translation: asNumberArray(value.translation, 3, `${name}.translation`),
    width: asPositiveInt(value.width, `${name}.width`),
    height: asPositiveInt(value.height, `${name}.height`),
  };
}

/** Parse and validate a manifest document; throws ManifestError on any defect. */
export function validateManifest(doc: unknown): Manifest {
  if (!isRecord(doc)) {
    throw new ManifestError("manifest must be a JSON object");
  }
  if (doc.version !== SUPPORTED_VERSION) {
    throw new ManifestError(
      `unsupported manifest version ${String(doc.version)} (expected ${SUPPORTED_VERSION})`
    );
  }
  const width = asPositiveInt(doc.width, "width");
  const height = asPositiveInt(doc.height, "height");
  if (!Array.isArray(doc.planes) || doc.planes.length === 0) {
    throw new ManifestError("planes must be a non-empty array");
  }
  const planes: PlaneEntry[] = doc.planes.map((entry, i) => {
    if (!isRecord(entry) || typeof entry.file !== "string" || entry.file.length === 0) {
      throw new ManifestError(`planes[${i}].file must be a non-empty string`);
    }
    if (typeof entry.depth !== "number" || !Number.isFinite(entry.depth) || entry.depth <= 0) {
      throw new ManifestError(`planes[${i}].depth must be a positive number`);
    }
    return { file: entry.file, depth: entry.depth };
  });
  for (let i = 1; i < planes.length; i++) {
    if (!(planes[i].depth < planes[i - 1].depth)) {
      throw new ManifestError("plane depths must strictly decrease (far to near)");
    }
  }
  const camera = validateCamera(doc.camera, "camera");
  if (camera.width !== width || camera.height !== height) {
    throw new ManifestError("camera size must match the manifest size");
  }
  return { version: SUPPORTED_VERSION, width, height, planes, camera };
}
