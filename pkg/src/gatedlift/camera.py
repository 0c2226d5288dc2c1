"""Pinhole camera: projection, its Jacobian, masked reprojection error."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CAMERA_FORMAT = "gatedlift.camera"
CAMERA_VERSION = 1


class BehindCameraError(ValueError):
    """A point that must be projected has Z <= 0."""


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    cx: float
    cy: float
    width: int = 1000
    height: int = 1000

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        """Pixels -> normalized image coordinates ((u - cx)/f, (v - cy)/f)."""
        uv = np.asarray(uv, dtype=np.float64)
        return (uv - np.array([self.cx, self.cy])) / self.f


def project(p, cam: CameraIntrinsics) -> np.ndarray:
    """Project (..., 3) camera-frame points (mm) to (..., 2) pixels."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("cannot project a point with Z <= 0")
    return np.stack([cam.f * p[..., 0] / z + cam.cx, cam.f * p[..., 1] / z + cam.cy], axis=-1)


def project_jacobian(p, cam: CameraIntrinsics) -> np.ndarray:
    """d(u, v)/d(X, Y, Z), shape (..., 2, 3)."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("Jacobian undefined for Z <= 0")
    fz = cam.f / z
    zero = np.zeros_like(z)
    return np.stack([
        np.stack([fz, zero, -fz * x / z], axis=-1),
        np.stack([zero, fz, -fz * y / z], axis=-1),
    ], axis=-2)


def frame_projection_error(x_rel, root, obs_2d, mask_t, cam: CameraIntrinsics) -> float:
    """Sum over visible joints of squared pixel residual for one frame.

    ``mask_t`` is per joint, 1 = occluded. Occluded joints are never projected.
    """
    x_rel = np.asarray(x_rel, dtype=np.float64)
    vis = np.asarray(mask_t) == 0
    if not vis.any():
        return 0.0
    pts = x_rel[vis] + np.asarray(root, dtype=np.float64)
    r = project(pts, cam) - np.asarray(obs_2d, dtype=np.float64)[vis]
    return float((r * r).sum())


def save_camera(path, cam: CameraIntrinsics) -> None:
    doc = {"format": CAMERA_FORMAT, "version": CAMERA_VERSION, **asdict(cam)}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_camera(path) -> CameraIntrinsics:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CAMERA_FORMAT:
        raise ValueError(f"{path}: not a camera file")
    if doc.get("version") != CAMERA_VERSION:
        raise ValueError(f"{path}: unsupported camera version {doc.get('version')}")
    return CameraIntrinsics(
        f=float(doc["f"]), cx=float(doc["cx"]), cy=float(doc["cy"]),
        width=int(doc.get("width", 1000)), height=int(doc.get("height", 1000)),
    )
