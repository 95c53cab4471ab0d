"""Planar homographies, rigid transforms, and pinhole projection.

Plain numpy, no autodiff: these are data-generation and evaluation tools.
Pixel convention: a pixel at row r, column c has coordinate (x=c, y=r),
so arrays index as image[y, x].
"""

from __future__ import annotations

import numpy as np

from .errors import GeometryError


# -- homographies ------------------------------------------------------


def homography_apply(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to (N, 2) points."""
    h = np.asarray(h, dtype=np.float64)
    p = np.asarray(pts, dtype=np.float64)
    ones = np.ones((len(p), 1))
    q = np.hstack([p, ones]) @ h.T
    w = q[:, 2:]
    if np.any(np.abs(w) < 1e-12):
        raise GeometryError("homography sends a point to infinity")
    return q[:, :2] / w


def random_homography(rng: np.random.Generator, size: int,
                      max_rotation_deg: float = 45.0,
                      max_translation: float = 8.0,
                      max_perspective: float = 0.1,
                      scale_range: tuple = (0.9, 1.1)) -> np.ndarray:
    """Rotation/scale/translation about the frame center plus mild perspective.

    Resamples until |det| >= 1e-6; with all ranges zero this is exactly the
    identity.
    """
    c = 0.5 * (size - 1)
    center = np.array([[1, 0, c], [0, 1, c], [0, 0, 1]], dtype=np.float64)
    uncenter = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1]], dtype=np.float64)
    for _ in range(64):
        ang = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg))
        s = rng.uniform(*scale_range)
        tx, ty = rng.uniform(-max_translation, max_translation, size=2)
        px, py = rng.uniform(-max_perspective, max_perspective, size=2) / size
        core = np.array([
            [s * np.cos(ang), -s * np.sin(ang), tx],
            [s * np.sin(ang), s * np.cos(ang), ty],
            [px, py, 1.0],
        ])
        h = center @ core @ uncenter
        if abs(np.linalg.det(h)) >= 1e-6:
            return h
    raise GeometryError("could not sample a non-degenerate homography")


# -- rigid transforms --------------------------------------------------


def rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n < 1e-12:
        raise GeometryError("zero rotation axis")
    x, y, z = a / n
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def random_rotation(rng: np.random.Generator, max_angle_deg: float = 45.0) -> np.ndarray:
    axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(0.0, max_angle_deg))
    return rotation_from_axis_angle(axis, angle)


def se3_compose(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = np.asarray(t, dtype=np.float64)
    return m


def se3_apply(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64)
    return p @ m[:3, :3].T + m[:3, 3]


def se3_inverse(m: np.ndarray) -> np.ndarray:
    r = m[:3, :3]
    return se3_compose(r.T, -r.T @ m[:3, 3])


# -- pinhole camera ----------------------------------------------------


def make_intrinsics(size: int, focal: float | None = None) -> np.ndarray:
    f = float(focal if focal is not None else size)
    c = 0.5 * (size - 1)
    return np.array([[f, 0, c], [0, f, c], [0, 0, 1]], dtype=np.float64)


def project_points(k: np.ndarray, world_to_cam: np.ndarray, pts_world: np.ndarray,
                   frame_size: int | None = None):
    """World points -> pixel coordinates, depths, and a visibility mask.

    Visibility requires positive depth; with ``frame_size`` the pixel must
    also land inside [0, size-1] on both axes.
    """
    cam = se3_apply(world_to_cam, pts_world)
    z = cam[:, 2]
    valid = z > 1e-9
    uv = np.full((len(cam), 2), np.nan)
    zs = np.where(valid, z, 1.0)
    uv[:, 0] = k[0, 0] * cam[:, 0] / zs + k[0, 2]
    uv[:, 1] = k[1, 1] * cam[:, 1] / zs + k[1, 2]
    uv[~valid] = np.nan
    if frame_size is not None:
        lim = frame_size - 1
        inside = valid & (uv[:, 0] >= 0) & (uv[:, 0] <= lim) \
            & (uv[:, 1] >= 0) & (uv[:, 1] <= lim)
        return uv, z, inside
    return uv, z, valid


def unproject_pixels(k: np.ndarray, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Pixels plus depths -> camera-frame 3D points."""
    u = np.asarray(uv, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (u[:, 0] - k[0, 2]) / k[0, 0]
    y = (u[:, 1] - k[1, 2]) / k[1, 1]
    return np.stack([x * z, y * z, z], axis=1)


def noise_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    """Uniform samples from the L2 ball: noise magnitude is hard-bounded.

    Draws the same rng stream for any radius, so changing only the noise
    level leaves the rest of a generated scene untouched.
    """
    d = rng.normal(size=(n, dim))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    r = rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / dim)
    return float(radius) * d * r
