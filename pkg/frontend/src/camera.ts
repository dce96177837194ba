/** Pinhole camera math: 3x3 linear algebra, plane homographies, and the
 * clamped orbit state the viewer steers. Conventions match the exporter:
 * x_cam = R x_world + t, pixel centers at integer coordinates. */

import type { CameraJson } from "./manifest.js";

export type Mat3 = Float64Array; // row-major 3x3
export type Vec3 = Float64Array;

export interface Camera {
  intrinsics: Mat3;
  rotation: Mat3;
  translation: Vec3;
  width: number;
  height: number;
}

export function mat3(values: ArrayLike<number>): Mat3 {
  if (values.length !== 9) {
    throw new Error("mat3 needs 9 entries");
  }
  return Float64Array.from(values);
}

export function vec3(values: ArrayLike<number>): Vec3 {
  if (values.length !== 3) {
    throw new Error("vec3 needs 3 entries");
  }
  return Float64Array.from(values);
}

export function identity3(): Mat3 {
  return mat3([1, 0, 0, 0, 1, 0, 0, 0, 1]);
}

export function matMul(a: Mat3, b: Mat3): Mat3 {
  const out = new Float64Array(9);
  for (let r = 0; r < 3; r++) {
    for (let c = 0; c < 3; c++) {
      out[3 * r + c] =
        a[3 * r] * b[c] + a[3 * r + 1] * b[3 + c] + a[3 * r + 2] * b[6 + c];
    }
  }
  return out;
}

export function matVec(a: Mat3, v: Vec3): Vec3 {
  const out = new Float64Array(3);
  for (let r = 0; r < 3; r++) {
    out[r] = a[3 * r] * v[0] + a[3 * r + 1] * v[1] + a[3 * r + 2] * v[2];
  }
  return out;
}

export function transpose(a: Mat3): Mat3 {
  return mat3([a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]);
}

export function det3(a: Mat3): number {
  return (
    a[0] * (a[4] * a[8] - a[5] * a[7]) -
    a[1] * (a[3] * a[8] - a[5] * a[6]) +
    a[2] * (a[3] * a[7] - a[4] * a[6])
  );
}

export function inverse3(a: Mat3): Mat3 {
  const d = det3(a);
  if (Math.abs(d) < 1e-12) {
    throw new Error(`singular 3x3 matrix (det=${d})`);
  }
  const inv = new Float64Array(9);
  inv[0] = (a[4] * a[8] - a[5] * a[7]) / d;
  inv[1] = (a[2] * a[7] - a[1] * a[8]) / d;
  inv[2] = (a[1] * a[5] - a[2] * a[4]) / d;
  inv[3] = (a[5] * a[6] - a[3] * a[8]) / d;
  inv[4] = (a[0] * a[8] - a[2] * a[6]) / d;
  inv[5] = (a[2] * a[3] - a[0] * a[5]) / d;
  inv[6] = (a[3] * a[7] - a[4] * a[6]) / d;
  inv[7] = (a[1] * a[6] - a[0] * a[7]) / d;
  inv[8] = (a[0] * a[4] - a[1] * a[3]) / d;
  return inv;
}

export function cameraFromJson(json: CameraJson): Camera {
  return {
    intrinsics: mat3(json.intrinsics),
    rotation: mat3(json.rotation),
    translation: vec3(json.translation),
    width: json.width,
    height: json.height,
  };
}

export function cameraToJson(cam: Camera): CameraJson {
  return {
    intrinsics: Array.from(cam.intrinsics),
    rotation: Array.from(cam.rotation),
    translation: Array.from(cam.translation),
    width: cam.width,
    height: cam.height,
  };
}

export function cameraCenter(cam: Camera): Vec3 {
  const c = matVec(transpose(cam.rotation), cam.translation);
  return vec3([-c[0], -c[1], -c[2]]);
}

export function samePose(a: Camera, b: Camera): boolean {
  for (let i = 0; i < 9; i++) {
    if (a.rotation[i] !== b.rotation[i]) return false;
  }
  for (let i = 0; i < 3; i++) {
    if (a.translation[i] !== b.translation[i]) return false;
  }
  return true;
}

/** Homography mapping reference pixels to target pixels at plane depth d:
 * H = K_t R_t (I + (R_t^-1 t_t - R_r^-1 t_r) n^T R_r / d) R_r^-1 K_r^-1. */
export function referenceToTargetHomography(ref: Camera, target: Camera, depth: number): Mat3 {
  if (!(depth > 0)) {
    throw new Error(`plane depth must be positive, got ${depth}`);
  }
  if (samePose(ref, target)) {
    return identity3();
  }
  const deltaT = matVec(transpose(target.rotation), target.translation);
  const deltaR = matVec(transpose(ref.rotation), ref.translation);
  const delta = vec3([deltaT[0] - deltaR[0], deltaT[1] - deltaR[1], deltaT[2] - deltaR[2]]);
  // plane normal is +z in the reference frame, so n^T R_r is R_r's third row
  const nRow = vec3([ref.rotation[6], ref.rotation[7], ref.rotation[8]]);
  const mid = identity3();
  for (let r = 0; r < 3; r++) {
    for (let c = 0; c < 3; c++) {
      mid[3 * r + c] += (delta[r] * nRow[c]) / depth;
    }
  }
  let h = matMul(target.intrinsics, target.rotation);
  h = matMul(h, mid);
  h = matMul(h, transpose(ref.rotation));
  return matMul(h, inverse3(ref.intrinsics));
}

/** Homography for destination-driven warping: target pixels back to
 * reference pixels at plane depth d. */
export function targetToReferenceHomography(ref: Camera, target: Camera, depth: number): Mat3 {
  const h = referenceToTargetHomography(ref, target, depth);
  if (samePose(ref, target)) {
    return h;
  }
  return inverse3(h);
}

/** Valid viewing range around the reference pose: the representation is
 * only trustworthy forward-facing near the reference camera. */
export interface ClampBox {
  lateral: number; // max |x|, |y| offset of the camera center, world units
  axial: number; // max |z| offset, world units
  rotationDeg: number; // max |yaw|, |pitch|
}

export function clampBox(nearDepth: number): ClampBox {
  return { lateral: 0.1 * nearDepth, axial: 0.05 * nearDepth, rotationDeg: 10 };
}

/** Pose state steered by the controls, relative to the reference camera. */
export interface PoseState {
  dx: number;
  dy: number;
  dz: number;
  yawDeg: number;
  pitchDeg: number;
}

export function clampPose(state: PoseState, box: ClampBox): PoseState {
  const clamp = (v: number, lim: number) => Math.min(lim, Math.max(-lim, v));
  return {
    dx: clamp(state.dx, box.lateral),
    dy: clamp(state.dy, box.lateral),
    dz: clamp(state.dz, box.axial),
    yawDeg: clamp(state.yawDeg, box.rotationDeg),
    pitchDeg: clamp(state.pitchDeg, box.rotationDeg),
  };
}

function rotationYX(yawDeg: number, pitchDeg: number): Mat3 {
  const y = (yawDeg * Math.PI) / 180;
  const x = (pitchDeg * Math.PI) / 180;
  const ry = mat3([Math.cos(y), 0, Math.sin(y), 0, 1, 0, -Math.sin(y), 0, Math.cos(y)]);
  const rx = mat3([1, 0, 0, 0, Math.cos(x), -Math.sin(x), 0, Math.sin(x), Math.cos(x)]);
  return matMul(ry, rx);
}

/** Realize a pose state as a full camera sharing the reference intrinsics. */
export function poseToCamera(ref: Camera, state: PoseState): Camera {
  const rotation = matMul(rotationYX(state.yawDeg, state.pitchDeg), ref.rotation);
  const center = cameraCenter(ref);
  const moved = vec3([center[0] + state.dx, center[1] + state.dy, center[2] + state.dz]);
  const rc = matVec(rotation, moved);
  return {
    intrinsics: mat3(ref.intrinsics),
    rotation,
    translation: vec3([-rc[0], -rc[1], -rc[2]]),
    width: ref.width,
    height: ref.height,
  };
}
