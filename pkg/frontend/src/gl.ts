/** WebGL renderer: each plane is a static textured quad spanning the
 * reference frustum at its depth, drawn strictly far to near with straight
 * source-over blending (blendFuncSeparate(SRC_ALPHA, ONE_MINUS_SRC_ALPHA,
 * ONE, ONE_MINUS_SRC_ALPHA)) so the hardware blend equals the software
 * compositor's out = c*a + out*(1-a) per channel. */

import { inverse3, matVec, vec3, type Camera, type Vec3 } from "./camera.js";

const VERTEX_SHADER = `
attribute vec3 aPosition;
attribute vec2 aTexCoord;
uniform mat3 uRotation;
uniform vec3 uTranslation;
uniform vec3 uProjection; // fx, fy, near guard
uniform vec2 uPrincipal;
uniform vec2 uViewport;
varying vec2 vTexCoord;
void main() {
  vec3 cam = uRotation * aPosition + uTranslation;
  float z = max(cam.z, uProjection.z);
  vec2 pixel = vec2(
    uProjection.x * cam.x / z + uPrincipal.x,
    uProjection.y * cam.y / z + uPrincipal.y
  );
  // pixel coordinates to clip space; y flips because pixel rows grow down
  vec2 ndc = vec2(
    2.0 * (pixel.x + 0.5) / uViewport.x - 1.0,
    1.0 - 2.0 * (pixel.y + 0.5) / uViewport.y
  );
  gl_Position = vec4(ndc * z, 0.0, z);
  vTexCoord = aTexCoord;
}
`;

const FRAGMENT_SHADER = `
precision mediump float;
uniform sampler2D uTexture;
varying vec2 vTexCoord;
void main() {
  gl_FragColor = texture2D(uTexture, vTexCoord);
}
`;

interface PlaneMesh {
  buffer: WebGLBuffer;
  texture: WebGLTexture;
}

function compile(gl: WebGLRenderingContext, type: number, source: string): WebGLShader {
  const shader = gl.createShader(type);
  if (!shader) {
    throw new Error("failed to create shader");
  }
  gl.shaderSource(shader, source);
  gl.compileShader(shader);
  if (!gl.getShaderParameter(shader, gl.COMPILE_STATUS)) {
    throw new Error(`shader compile failed: ${gl.getShaderInfoLog(shader)}`);
  }
  return shader;
}

/** World-space corners of the quad that exactly fills the reference frustum
 * at the given depth: the camera rays through the image corners. */
export function planeCorners(ref: Camera, depth: number): Vec3[] {
  const kInv = inverse3(ref.intrinsics);
  const rInv = new Float64Array([
    ref.rotation[0], ref.rotation[3], ref.rotation[6],
    ref.rotation[1], ref.rotation[4], ref.rotation[7],
    ref.rotation[2], ref.rotation[5], ref.rotation[8],
  ]);
  const corners: Vec3[] = [];
  // pixel centers span [0, W-1] x [0, H-1]; the quad covers the full texture
  for (const [u, v] of [
    [-0.5, -0.5],
    [ref.width - 0.5, -0.5],
    [-0.5, ref.height - 0.5],
    [ref.width - 0.5, ref.height - 0.5],
  ]) {
    const ray = matVec(kInv, vec3([u, v, 1]));
    const cam = vec3([ray[0] * depth, ray[1] * depth, ray[2] * depth]);
    const shifted = vec3([
      cam[0] - ref.translation[0],
      cam[1] - ref.translation[1],
      cam[2] - ref.translation[2],
    ]);
    corners.push(matVec(rInv, shifted));
  }
  return corners;
}

export class GlRenderer {
  private gl: WebGLRenderingContext;
  private program: WebGLProgram;
  private meshes: PlaneMesh[] = [];
  private ref: Camera;

  constructor(canvas: HTMLCanvasElement, ref: Camera) {
    const gl = canvas.getContext("webgl", { premultipliedAlpha: false, alpha: false });
    if (!gl) {
      throw new Error("WebGL is not available");
    }
    this.gl = gl;
    this.ref = ref;
    const program = gl.createProgram();
    if (!program) {
      throw new Error("failed to create program");
    }
    gl.attachShader(program, compile(gl, gl.VERTEX_SHADER, VERTEX_SHADER));
    gl.attachShader(program, compile(gl, gl.FRAGMENT_SHADER, FRAGMENT_SHADER));
    gl.linkProgram(program);
    if (!gl.getProgramParameter(program, gl.LINK_STATUS)) {
      throw new Error(`program link failed: ${gl.getProgramInfoLog(program)}`);
    }
    this.program = program;
    gl.disable(gl.DEPTH_TEST);
    gl.enable(gl.BLEND);
    gl.blendFuncSeparate(gl.SRC_ALPHA, gl.ONE_MINUS_SRC_ALPHA, gl.ONE, gl.ONE_MINUS_SRC_ALPHA);
  }

  /** Upload plane textures and quad geometry; planes arrive far to near. */
  setPlanes(planes: ImageBitmap[], depths: number[]): void {
    const gl = this.gl;
    this.meshes = planes.map((bitmap, i) => {
      const corners = planeCorners(this.ref, depths[i]);
      // two triangles, interleaved xyz + uv
      const quad = [
        [corners[0], 0, 0],
        [corners[1], 1, 0],
        [corners[2], 0, 1],
        [corners[1], 1, 0],
        [corners[3], 1, 1],
        [corners[2], 0, 1],
      ] as const;
      const data = new Float32Array(quad.length * 5);
      quad.forEach(([p, s, t], j) => {
        data.set([p[0], p[1], p[2], s, t], j * 5);
      });
      const buffer = gl.createBuffer();
      const texture = gl.createTexture();
      if (!buffer || !texture) {
        throw new Error("failed to allocate GL resources");
      }
      gl.bindBuffer(gl.ARRAY_BUFFER, buffer);
      gl.bufferData(gl.ARRAY_BUFFER, data, gl.STATIC_DRAW);
      gl.bindTexture(gl.TEXTURE_2D, texture);
      gl.pixelStorei(gl.UNPACK_PREMULTIPLY_ALPHA_WEBGL, false);
      gl.texImage2D(gl.TEXTURE_2D, 0, gl.RGBA, gl.RGBA, gl.UNSIGNED_BYTE, bitmap);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MIN_FILTER, gl.LINEAR);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MAG_FILTER, gl.LINEAR);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_S, gl.CLAMP_TO_EDGE);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_T, gl.CLAMP_TO_EDGE);
      return { buffer, texture };
    });
  }

  render(target: Camera): void {
    const gl = this.gl;
    gl.viewport(0, 0, target.width, target.height);
    gl.clearColor(0, 0, 0, 1);
    gl.clear(gl.COLOR_BUFFER_BIT);
    gl.useProgram(this.program);
    const aPosition = gl.getAttribLocation(this.program, "aPosition");
    const aTexCoord = gl.getAttribLocation(this.program, "aTexCoord");
    gl.uniformMatrix3fv(
      gl.getUniformLocation(this.program, "uRotation"),
      // GLSL mat3 is column-major; transpose must be false in WebGL 1
      false,
      new Float32Array([
        target.rotation[0], target.rotation[3], target.rotation[6],
        target.rotation[1], target.rotation[4], target.rotation[7],
        target.rotation[2], target.rotation[5], target.rotation[8],
      ])
    );
    gl.uniform3f(
      gl.getUniformLocation(this.program, "uTranslation"),
      target.translation[0],
      target.translation[1],
      target.translation[2]
    );
    gl.uniform3f(
      gl.getUniformLocation(this.program, "uProjection"),
      target.intrinsics[0],
      target.intrinsics[4],
      1e-4
    );
    gl.uniform2f(
      gl.getUniformLocation(this.program, "uPrincipal"),
      target.intrinsics[2],
      target.intrinsics[5]
    );
    gl.uniform2f(gl.getUniformLocation(this.program, "uViewport"), target.width, target.height);
    // draw order is fixed far to near; meshes were uploaded in that order
    for (const mesh of this.meshes) {
      gl.bindBuffer(gl.ARRAY_BUFFER, mesh.buffer);
      gl.enableVertexAttribArray(aPosition);
      gl.vertexAttribPointer(aPosition, 3, gl.FLOAT, false, 20, 0);
      gl.enableVertexAttribArray(aTexCoord);
      gl.vertexAttribPointer(aTexCoord, 2, gl.FLOAT, false, 20, 12);
      gl.bindTexture(gl.TEXTURE_2D, mesh.texture);
      gl.drawArrays(gl.TRIANGLES, 0, 6);
    }
  }
}
