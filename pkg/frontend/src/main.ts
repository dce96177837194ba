/** Viewer entry point: load a bundle, steer the camera with the pointer and
 * keyboard, draw with WebGL (software-compositor fallback), and export the
 * current pose in the single-camera JSON form the CLI renderer accepts. */

import {
  cameraFromJson,
  cameraToJson,
  clampBox,
  clampPose,
  poseToCamera,
  type Camera,
  type PoseState,
} from "./camera.js";
import { renderView, toBytes, type MpiPlanes, type PlaneImage } from "./compositor.js";
import { GlRenderer } from "./gl.js";
import { validateManifest, type Manifest } from "./manifest.js";

const POSE_ZERO: PoseState = { dx: 0, dy: 0, dz: 0, yawDeg: 0, pitchDeg: 0 };

interface LoadedBundle {
  manifest: Manifest;
  reference: Camera;
  bitmaps: ImageBitmap[];
  planes: PlaneImage[];
  depths: number[];
}

async function loadBundle(baseUrl: string): Promise<LoadedBundle> {
  const response = await fetch(new URL("manifest.json", baseUrl));
  if (!response.ok) {
    throw new Error(`manifest.json: HTTP ${response.status}`);
  }
  const manifest = validateManifest(await response.json());
  const bitmaps = await Promise.all(
    manifest.planes.map(async (plane) => {
      const r = await fetch(new URL(plane.file, baseUrl));
      if (!r.ok) {
        throw new Error(`${plane.file}: HTTP ${r.status}`);
      }
      return createImageBitmap(await r.blob(), { premultiplyAlpha: "none" });
    })
  );
  const planes = bitmaps.map((bitmap) => {
    const canvas = document.createElement("canvas");
    canvas.width = bitmap.width;
    canvas.height = bitmap.height;
    const ctx = canvas.getContext("2d", { willReadFrequently: true });
    if (!ctx) {
      throw new Error("2d canvas is not available");
    }
    ctx.drawImage(bitmap, 0, 0);
    const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
    return { rgba: data.data, width: bitmap.width, height: bitmap.height };
  });
  return {
    manifest,
    reference: cameraFromJson(manifest.camera),
    bitmaps,
    planes,
    depths: manifest.planes.map((p) => p.depth),
  };
}

function setStatus(text: string, isError = false): void {
  const node = document.getElementById("status");
  if (node) {
    node.textContent = text;
    node.className = isError ? "error" : "";
  }
}

function downloadPose(camera: Camera): void {
  const blob = new Blob([JSON.stringify(cameraToJson(camera), null, 2)], {
    type: "application/json",
  });
  const link = document.createElement("a");
  link.href = URL.createObjectURL(blob);
  link.download = "pose.json";
  link.click();
  URL.revokeObjectURL(link.href);
}

export async function start(): Promise<void> {
  const canvas = document.getElementById("view") as HTMLCanvasElement | null;
  if (!canvas) {
    throw new Error("missing #view canvas");
  }
  setStatus("loading bundle…");
  let bundle: LoadedBundle;
  try {
    bundle = await loadBundle(new URL("bundle/", window.location.href).toString());
  } catch (err) {
    setStatus(`failed to load bundle: ${(err as Error).message}`, true);
    return;
  }
  const { reference, depths } = bundle;
  canvas.width = reference.width;
  canvas.height = reference.height;

  const nearDepth = depths[depths.length - 1];
  const box = clampBox(nearDepth);
  let pose = POSE_ZERO;

  let drawGl: ((cam: Camera) => void) | null = null;
  try {
    const renderer = new GlRenderer(canvas, reference);
    renderer.setPlanes(bundle.bitmaps, depths);
    drawGl = (cam) => renderer.render(cam);
  } catch {
    // headless or WebGL-less environments fall back to the CPU compositor
  }
  const ctx2d = drawGl ? null : canvas.getContext("2d");
  const softMpi: MpiPlanes = { planes: bundle.planes, depths, camera: reference };

  const frameTimes: number[] = [];
  let needsRedraw = true;

  function draw(now: number): void {
    if (needsRedraw) {
      const camera = poseToCamera(reference, pose);
      if (drawGl) {
        drawGl(camera);
      } else if (ctx2d) {
        const bytes = toBytes(renderView(softMpi, camera));
        const image = ctx2d.createImageData(reference.width, reference.height);
        for (let i = 0, j = 0; i < bytes.length; i += 3, j += 4) {
          image.data[j] = bytes[i];
          image.data[j + 1] = bytes[i + 1];
          image.data[j + 2] = bytes[i + 2];
          image.data[j + 3] = 255;
        }
        ctx2d.putImageData(image, 0, 0);
      }
      needsRedraw = false;
      frameTimes.push(now);
      while (frameTimes.length > 0 && frameTimes[0] < now - 2000) {
        frameTimes.shift();
      }
      const fps = frameTimes.length / 2;
      setStatus(
        `pose dx=${pose.dx.toFixed(3)} dy=${pose.dy.toFixed(3)} dz=${pose.dz.toFixed(3)} ` +
          `yaw=${pose.yawDeg.toFixed(1)}° pitch=${pose.pitchDeg.toFixed(1)}° | ` +
          `${bundle.manifest.planes.length} planes | ${fps.toFixed(0)} fps (${
            drawGl ? "webgl" : "software"
          })`
      );
    }
    requestAnimationFrame(draw);
  }

  function nudge(update: Partial<PoseState>): void {
    pose = clampPose({ ...pose, ...update }, box);
    needsRedraw = true;
  }

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("pointerdown", (e) => {
    dragging = true;
    lastX = e.clientX;
    lastY = e.clientY;
    canvas.setPointerCapture(e.pointerId);
  });
  canvas.addEventListener("pointerup", () => {
    dragging = false;
  });
  canvas.addEventListener("pointermove", (e) => {
    if (!dragging) {
      return;
    }
    const du = e.clientX - lastX;
    const dv = e.clientY - lastY;
    lastX = e.clientX;
    lastY = e.clientY;
    if (e.shiftKey) {
      // pan laterally
      nudge({ dx: pose.dx + du * 0.002 * nearDepth, dy: pose.dy + dv * 0.002 * nearDepth });
    } else {
      // orbit
      nudge({ yawDeg: pose.yawDeg + du * 0.15, pitchDeg: pose.pitchDeg + dv * 0.15 });
    }
  });
  canvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    // dolly along the view axis
    nudge({ dz: pose.dz + Math.sign(e.deltaY) * 0.005 * nearDepth });
  });
  window.addEventListener("keydown", (e) => {
    const step = 0.01 * nearDepth;
    if (e.key === "ArrowLeft") nudge({ dx: pose.dx - step });
    else if (e.key === "ArrowRight") nudge({ dx: pose.dx + step });
    else if (e.key === "ArrowUp") nudge({ dy: pose.dy - step });
    else if (e.key === "ArrowDown") nudge({ dy: pose.dy + step });
    else if (e.key === "r") nudge({ ...POSE_ZERO });
  });
  document.getElementById("export-pose")?.addEventListener("click", () => {
    downloadPose(poseToCamera(reference, pose));
  });

  requestAnimationFrame(draw);
}

start();
