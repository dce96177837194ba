"""On-disk formats: scene bundles, MPI bundles, viewer manifests, and the
flat key/value config files used by the training command.

8-bit image files are mapped linearly to [0, 1] in both directions with NO
gamma linearization; load and save treat values identically, so metrics
computed on round-tripped images are self-consistent. All writes are
atomic (write to a temporary file, then rename).
"""

import json
import logging
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import CameraModel, ParameterError
from .mpi_core import Mpi

FORMAT_VERSION = 1
ROLES = ("reference", "source", "target")

log = logging.getLogger("lfield")


def configure_logging():
    """Log verbosity from the LFIELD_LOG env var (debug|info|warning|quiet)."""
    level = os.environ.get("LFIELD_LOG", "warning").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO, "warning": logging.WARNING,
              "quiet": logging.ERROR}
    if level not in levels:
        raise ParameterError(f"LFIELD_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def atomic_write_bytes(path, data: bytes):
    path = str(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_image(path, image: np.ndarray):
    """Quantize [0,1] floats to 8-bit and write a PNG (no gamma applied)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise ParameterError("image values must lie in [0, 1]")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    import io

    buf = io.BytesIO()
    Image.fromarray(data).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_image(path) -> np.ndarray:
    """Read an 8-bit image to [0,1] floats (no gamma removed)."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    return arr.astype(np.float64) / 255.0


def _camera_to_json(cam: CameraModel) -> dict:
    h, w = cam.image_size
    return {
        "intrinsics": [float(x) for x in cam.intrinsics.ravel()],
        "rotation": [float(x) for x in cam.rotation.ravel()],
        "translation": [float(x) for x in cam.translation.ravel()],
        "width": int(w),
        "height": int(h),
    }


def _camera_from_json(entry: dict, context: str) -> CameraModel:
    try:
        k = np.array(entry["intrinsics"], dtype=np.float64).reshape(3, 3)
        r = np.array(entry["rotation"], dtype=np.float64).reshape(3, 3)
        t = np.array(entry["translation"], dtype=np.float64).reshape(3)
        size = (int(entry["height"]), int(entry["width"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise ParameterError(f"{context}: malformed camera entry ({exc})") from exc
    return CameraModel(k, r, t, size)


# --- scene bundles ------------------------------------------------------------


@dataclass(frozen=True)
class SceneData:
    """A loaded scene bundle: per-view images, cameras, and roles, plus the
    scene depth bounds."""

    images: tuple
    cameras: tuple
    roles: tuple
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "roles", tuple(self.roles))
        if not len(self.images) == len(self.cameras) == len(self.roles):
            raise ParameterError("images, cameras, and roles must align")
        if any(r not in ROLES for r in self.roles):
            raise ParameterError(f"roles must be among {ROLES}")
        if self.roles.count("reference") != 1:
            raise ParameterError("a scene needs exactly one reference view")
        if not 0 < self.near <= self.far:
            raise ParameterError("need 0 < near <= far")

    def _by_role(self, role):
        return tuple(
            (img, cam) for img, cam, r in zip(self.images, self.cameras, self.roles) if r == role
        )

    @property
    def reference(self):
        return self._by_role("reference")[0]

    @property
    def sources(self):
        return self._by_role("source")

    @property
    def targets(self):
        return self._by_role("target")

    def build_views(self):
        """(images, cameras) of the reconstruction inputs: reference + sources."""
        pairs = [self.reference, *self.sources]
        return [p[0] for p in pairs], [p[1] for p in pairs]


def save_scene(path, images, cameras, roles, near, far):
    """Write a scene bundle: images/NNN.png plus cameras.json."""
    data = SceneData(images, cameras, roles, near, far)  # validates
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    views = []
    for i, (img, cam, role) in enumerate(zip(data.images, data.cameras, data.roles)):
        name = f"{i:03d}.png"
        save_image(os.path.join(path, "images", name), img)
        entry = _camera_to_json(cam)
        entry["role"] = role
        entry["file"] = f"images/{name}"
        views.append(entry)
    doc = {"version": FORMAT_VERSION, "near": float(near), "far": float(far), "views": views}
    atomic_write_text(os.path.join(path, "cameras.json"), json.dumps(doc, indent=2))
    log.info("wrote scene bundle with %d views to %s", len(views), path)


def load_scene(path) -> SceneData:
    cam_path = os.path.join(path, "cameras.json")
    if not os.path.exists(cam_path):
        raise ParameterError(f"{cam_path}: missing cameras.json")
    with open(cam_path) as fh:
        doc = json.load(fh)
    if doc.get("version") != FORMAT_VERSION:
        raise ParameterError(f"{cam_path}: unsupported scene format version {doc.get('version')}")
    for key in ("near", "far", "views"):
        if key not in doc:
            raise ParameterError(f"{cam_path}: missing field {key!r}")
    images, cameras, roles = [], [], []
    for i, entry in enumerate(doc["views"]):
        context = f"{cam_path} view {i}"
        if "role" not in entry or "file" not in entry:
            raise ParameterError(f"{context}: missing role or file")
        img_path = os.path.join(path, entry["file"])
        if not os.path.exists(img_path):
            raise ParameterError(f"{context}: image file {entry['file']} not found")
        img = load_image(img_path)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ParameterError(f"{context}: expected an RGB image, got shape {img.shape}")
        cam = _camera_from_json(entry, context)
        if cam.image_size != img.shape[:2]:
            raise ParameterError(f"{context}: camera size disagrees with the image")
        images.append(img)
        cameras.append(cam)
        roles.append(entry["role"])
    return SceneData(images, cameras, roles, float(doc["near"]), float(doc["far"]))


# --- MPI bundles ---------------------------------------------------------------


def save_mpi(path, m: Mpi):
    """Write an MPI bundle: metadata.json plus plane_NNN.png RGBA files."""
    os.makedirs(path, exist_ok=True)
    h, w = m.color.shape[1:3]
    for d in range(m.num_planes):
        rgba = np.concatenate([m.color[d], m.alpha[d]], axis=-1)
        save_image(os.path.join(path, f"plane_{d:03d}.png"), rgba)
    doc = {
        "version": FORMAT_VERSION,
        "width": int(w),
        "height": int(h),
        "planes": int(m.num_planes),
        "depths": [float(x) for x in m.depths],
        "camera": _camera_to_json(m.ref_camera),
    }
    atomic_write_text(os.path.join(path, "metadata.json"), json.dumps(doc, indent=2))
    log.info("wrote %d-plane MPI bundle to %s", m.num_planes, path)


def load_mpi(path) -> Mpi:
    meta_path = os.path.join(path, "metadata.json")
    if not os.path.exists(meta_path):
        raise ParameterError(f"{meta_path}: missing metadata.json")
    with open(meta_path) as fh:
        doc = json.load(fh)
    if doc.get("version") != FORMAT_VERSION:
        raise ParameterError(f"{meta_path}: unsupported MPI format version {doc.get('version')}")
    for key in ("width", "height", "planes", "depths", "camera"):
        if key not in doc:
            raise ParameterError(f"{meta_path}: missing field {key!r}")
    d = int(doc["planes"])
    depths = np.array(doc["depths"], dtype=np.float64)
    if depths.shape != (d,):
        raise ParameterError(f"{meta_path}: {d} planes but {depths.size} depths")
    colors, alphas = [], []
    for i in range(d):
        plane_path = os.path.join(path, f"plane_{i:03d}.png")
        if not os.path.exists(plane_path):
            raise ParameterError(f"{path}: missing plane file plane_{i:03d}.png")
        rgba = load_image(plane_path)
        if rgba.ndim != 3 or rgba.shape[2] != 4:
            raise ParameterError(f"{plane_path}: expected an RGBA image")
        if rgba.shape[:2] != (doc["height"], doc["width"]):
            raise ParameterError(f"{plane_path}: plane size disagrees with metadata")
        colors.append(rgba[..., :3])
        alphas.append(rgba[..., 3:])
    cam = _camera_from_json(doc["camera"], meta_path)
    return Mpi(np.stack(colors), np.stack(alphas), depths, cam)


def load_pose(path) -> CameraModel:
    """A single camera pose as a JSON file with the camera fields."""
    with open(path) as fh:
        doc = json.load(fh)
    return _camera_from_json(doc, str(path))


def save_pose(path, cam: CameraModel):
    atomic_write_text(path, json.dumps(_camera_to_json(cam), indent=2))


# --- viewer manifest -----------------------------------------------------------


def write_viewer_manifest(path, m: Mpi):
    """manifest.json consumed by the browser viewer; plane files are relative."""
    h, w = m.color.shape[1:3]
    doc = {
        "version": FORMAT_VERSION,
        "width": int(w),
        "height": int(h),
        "planes": [
            {"file": f"plane_{d:03d}.png", "depth": float(m.depths[d])}
            for d in range(m.num_planes)
        ],
        "camera": _camera_to_json(m.ref_camera),
    }
    atomic_write_text(path, json.dumps(doc, indent=2))


# --- flat key/value config files ------------------------------------------------


def parse_config(text: str) -> dict:
    """`key = value` lines; '#' starts a comment; keys must be unique."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or key in out:
            raise ParameterError(f"config line {lineno}: empty or duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict:
    with open(path) as fh:
        return parse_config(fh.read())
