"""Pinhole camera model and its text file format."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Camera", "parse_camera", "format_camera"]


@dataclass
class Camera:
    """Intrinsics K (3x3) and a world-from-camera rigid transform (4x4).

    Camera space looks down +z; pixel (x, y) rays pass through the pixel
    center (x + 0.5, y + 0.5).
    """

    intrinsics: np.ndarray
    cam_to_world: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64).reshape(4, 4)

    @classmethod
    def look_at(cls, eye, target, up, focal: float, width: int, height: int) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, fwd, eye
        k = np.array([[focal, 0, width / 2.0], [0, focal, height / 2.0], [0, 0, 1.0]])
        return cls(k, c2w, width, height)

    def rays(self, px: np.ndarray, py: np.ndarray):
        """Origins and unit directions (N, 3) for integer pixel coordinates."""
        k_inv = np.linalg.inv(self.intrinsics)
        uv1 = np.stack([px + 0.5, py + 0.5, np.ones_like(px, dtype=np.float64)], axis=-1)
        d_cam = uv1 @ k_inv.T
        d_world = d_cam @ self.cam_to_world[:3, :3].T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.cam_to_world[:3, 3], d_world.shape).copy()
        return origins, d_world

    def all_rays(self):
        """Rays for every pixel in row-major order (pixel id = y * W + x)."""
        py, px = np.mgrid[0 : self.height, 0 : self.width]
        return self.rays(px.ravel().astype(np.float64), py.ravel().astype(np.float64))


def parse_camera(text: str, width: int | None = None, height: int | None = None) -> Camera:
    """3x3 intrinsics then 4x4 world-from-camera, row-major floats.

    An optional leading `size W H` line fixes the image size.
    """
    vals, size = [], (width, height)
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("size"):
            _, w, h = line.split()
            size = (int(w), int(h))
            continue
        vals.extend(float(v) for v in line.split())
    if len(vals) != 25:
        raise ValueError("camera file must contain 9 + 16 floats")
    if size[0] is None or size[1] is None:
        raise ValueError("camera size unknown: add a `size W H` line or pass explicit dimensions")
    return Camera(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:]).reshape(4, 4), size[0], size[1])


def format_camera(cam: Camera) -> str:
    lines = [f"size {cam.width} {cam.height}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in cam.intrinsics]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in cam.cam_to_world]
    return "\n".join(lines) + "\n"
