/** Software renderer: warp each plane into the target view by its depth
 * homography and composite back to front with straight (non-premultiplied)
 * source-over blending,
 *
 *     out = c_d * a_d + out * (1 - a_d)   for d = far ... near,
 *
 * which equals sum_d c_d a_d prod_{i>d}(1 - a_i). This is the reference
 * implementation the WebGL path must agree with, and the one the parity
 * tests exercise against the exporter's renders. */

import { targetToReferenceHomography, type Camera } from "./camera.js";

export interface PlaneImage {
  /** straight-alpha RGBA bytes, row-major, length width*height*4 */
  rgba: Uint8Array | Uint8ClampedArray;
  width: number;
  height: number;
}

export interface MpiPlanes {
  planes: PlaneImage[]; // index 0 farthest
  depths: number[]; // strictly decreasing
  camera: Camera; // reference camera the planes live in
}

/** Composite at the target pose into an RGB float buffer (height*width*3,
 * values in [0, 1], black background). */
export function renderView(mpi: MpiPlanes, target: Camera): Float64Array {
  if (target.width !== mpi.camera.width || target.height !== mpi.camera.height) {
    throw new Error("target view must share the reference image size");
  }
  const { width, height } = target;
  const out = new Float64Array(width * height * 3);
  for (let d = 0; d < mpi.planes.length; d++) {
    const plane = mpi.planes[d];
    // maps destination (target) pixels to source (reference-plane) pixels
    const h = targetToReferenceHomography(mpi.camera, target, mpi.depths[d]);
    compositePlane(out, plane, h, width, height);
  }
  return out;
}

/** Bilinear sample with zero outside the image, then source-over blend. */
function compositePlane(
  out: Float64Array,
  plane: PlaneImage,
  h: Float64Array,
  width: number,
  height: number
): void {
  const { rgba, width: sw, height: sh } = plane;
  for (let v = 0; v < height; v++) {
    for (let u = 0; u < width; u++) {
      const pw = h[6] * u + h[7] * v + h[8];
      let x: number;
      let y: number;
      if (Math.abs(pw) < 1e-12) {
        x = -1e9;
        y = -1e9;
      } else {
        x = (h[0] * u + h[1] * v + h[2]) / pw;
        y = (h[3] * u + h[4] * v + h[5]) / pw;
      }
      const x0 = Math.floor(x);
      const y0 = Math.floor(y);
      const fx = x - x0;
      const fy = y - y0;
      let r = 0;
      let g = 0;
      let b = 0;
      let a = 0;
      for (let t = 0; t < 4; t++) {
        const xi = x0 + (t & 1);
        const yi = y0 + (t >> 1);
        if (xi < 0 || xi >= sw || yi < 0 || yi >= sh) {
          continue;
        }
        const w = ((t & 1) ? fx : 1 - fx) * ((t >> 1) ? fy : 1 - fy);
        const idx = 4 * (yi * sw + xi);
        r += (rgba[idx] / 255) * w;
        g += (rgba[idx + 1] / 255) * w;
        b += (rgba[idx + 2] / 255) * w;
        a += (rgba[idx + 3] / 255) * w;
      }
      const o = 3 * (v * width + u);
      out[o] = r * a + out[o] * (1 - a);
      out[o + 1] = g * a + out[o + 1] * (1 - a);
      out[o + 2] = b * a + out[o + 2] * (1 - a);
    }
  }
}

/** Quantize a float RGB buffer to 8-bit the same way the exporter does. */
export function toBytes(rgb: Float64Array): Uint8ClampedArray {
  const out = new Uint8ClampedArray(rgb.length);
  for (let i = 0; i < rgb.length; i++) {
    out[i] = Math.round(Math.min(1, Math.max(0, rgb[i])) * 255);
  }
  return out;
}
