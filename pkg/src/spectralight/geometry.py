"""Pinhole camera/projector models, epipolar geometry and triangulation.

The projector is modeled as an inverse camera: identical pinhole
parameterization, with rays leaving rather than entering the optics.
All distances are millimetres, all pixel coordinates are (x, y) with the
origin at the top-left corner of the sensor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate geometric configurations."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsic parameters (no lens distortion)."""

    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.image_width):
            raise ValueError("cx outside sensor")
        if not (0 <= self.cy < self.image_height):
            raise ValueError("cy outside sensor")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "image_width": self.image_width,
            "image_height": self.image_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(**d)


@dataclass(frozen=True)
class Pose:
    """World-to-device rigid transform: x_device = R @ x_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be proper (det = 1)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return (points - self.translation) @ self.rotation

    @property
    def center(self) -> np.ndarray:
        """Optical centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


@dataclass(frozen=True)
class Homography:
    """3x3 plane-to-plane projective map, defined up to scale."""

    matrix: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.matrix, dtype=float)
        if H.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if abs(np.linalg.det(H)) < 1e-14:
            raise GeometryError("singular homography")
        if abs(H[2, 2]) > 1e-12:
            H = H / H[2, 2]
        object.__setattr__(self, "matrix", H)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) or (2,) points through the homography."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        homog = np.hstack([pts, np.ones((len(pts), 1))]) @ self.matrix.T
        out = homog[:, :2] / homog[:, 2:3]
        return out[0] if np.asarray(points).ndim == 1 else out

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


@dataclass(frozen=True)
class Ray:
    """Half-line from ``origin`` along unit ``direction``."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-12:
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def point_at(self, distance: float) -> np.ndarray:
        return self.origin + distance * self.direction


@dataclass(frozen=True)
class Device:
    """An intrinsics + pose pair (camera, or projector as inverse camera)."""

    intrinsics: Intrinsics
    pose: Pose


@dataclass(frozen=True)
class CalibrationBundle:
    """Calibrated camera/projector pair in one shared world frame."""

    camera: Device
    projector: Device
    reference_plane_homography: Homography

    def to_json(self) -> str:
        doc = {
            "camera": {
                "intrinsics": self.camera.intrinsics.to_dict(),
                "pose": self.camera.pose.to_dict(),
            },
            "projector": {
                "intrinsics": self.projector.intrinsics.to_dict(),
                "pose": self.projector.pose.to_dict(),
            },
            "homography": self.reference_plane_homography.matrix.tolist(),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationBundle":
        doc = json.loads(text)
        return cls(
            camera=Device(
                Intrinsics.from_dict(doc["camera"]["intrinsics"]),
                Pose.from_dict(doc["camera"]["pose"]),
            ),
            projector=Device(
                Intrinsics.from_dict(doc["projector"]["intrinsics"]),
                Pose.from_dict(doc["projector"]["pose"]),
            ),
            reference_plane_homography=Homography(np.array(doc["homography"])),
        )


def project(intrinsics: Intrinsics, pose: Pose, point: np.ndarray) -> np.ndarray:
    """Project a 3D world point to pixel coordinates.

    Raises GeometryError if the point is at or behind the optical centre.
    """
    p_dev = pose.transform(np.asarray(point, dtype=float).reshape(3))
    if p_dev[2] <= 1e-12:
        raise GeometryError("degenerate projection: point at or behind optical centre")
    x = intrinsics.fx * p_dev[0] / p_dev[2] + intrinsics.cx
    y = intrinsics.fy * p_dev[1] / p_dev[2] + intrinsics.cy
    return np.array([x, y])


def project_many(intrinsics: Intrinsics, pose: Pose, points: np.ndarray):
    """Vectorized projection; returns (pixels, depths)."""
    p_dev = pose.transform(np.asarray(points, dtype=float).reshape(-1, 3))
    z = p_dev[:, 2]
    safe_z = np.where(np.abs(z) > 1e-12, z, 1.0)
    px = np.stack(
        [
            intrinsics.fx * p_dev[:, 0] / safe_z + intrinsics.cx,
            intrinsics.fy * p_dev[:, 1] / safe_z + intrinsics.cy,
        ],
        axis=1,
    )
    return px, z


def backproject(intrinsics: Intrinsics, pose: Pose, pixel: np.ndarray) -> Ray:
    """Back-project a pixel to a world-frame ray through the optical centre."""
    px = np.asarray(pixel, dtype=float).reshape(2)
    overshoot = 16.0  # tolerate subpixel centres slightly outside the sensor
    if not (-overshoot <= px[0] <= intrinsics.image_width + overshoot):
        raise GeometryError("pixel outside sensor bounds")
    if not (-overshoot <= px[1] <= intrinsics.image_height + overshoot):
        raise GeometryError("pixel outside sensor bounds")
    d_dev = np.array(
        [
            (px[0] - intrinsics.cx) / intrinsics.fx,
            (px[1] - intrinsics.cy) / intrinsics.fy,
            1.0,
        ]
    )
    d_world = pose.rotation.T @ d_dev
    return Ray(pose.center, d_world / np.linalg.norm(d_world))


def triangulate(
    bundle: CalibrationBundle,
    cam_pixel: np.ndarray,
    proj_pixel: np.ndarray,
):
    """Triangulate by the midpoint of the common perpendicular of two rays.

    Returns (point_mm, reprojection_residual_px) where the residual is the
    larger of the two view reprojection errors.
    """
    r1 = backproject(bundle.camera.intrinsics, bundle.camera.pose, cam_pixel)
    r2 = backproject(bundle.projector.intrinsics, bundle.projector.pose, proj_pixel)

    d1, d2 = r1.direction, r2.direction
    cross = np.cross(d1, d2)
    if np.linalg.norm(cross) < 1e-6:
        raise GeometryError("degenerate triangulation: rays (nearly) parallel")

    # Solve for closest points: o1 + s*d1 closest to o2 + t*d2.
    b = r2.origin - r1.origin
    d1d2 = d1 @ d2
    denom = 1.0 - d1d2**2
    s = (b @ d1 - (b @ d2) * d1d2) / denom
    t = (-(b @ d2) + (b @ d1) * d1d2) / denom
    if s <= 0 or t <= 0:
        raise GeometryError("behind camera: triangulated point has negative depth")
    point = 0.5 * (r1.point_at(s) + r2.point_at(t))

    cam_rep = project(bundle.camera.intrinsics, bundle.camera.pose, point)
    proj_rep = project(bundle.projector.intrinsics, bundle.projector.pose, point)
    residual = max(
        float(np.linalg.norm(cam_rep - np.asarray(cam_pixel, dtype=float))),
        float(np.linalg.norm(proj_rep - np.asarray(proj_pixel, dtype=float))),
    )
    return point, residual


def epipolar_line(bundle: CalibrationBundle, proj_pixel: np.ndarray) -> np.ndarray:
    """Epipolar line in the camera image of a projector pixel.

    Returned as (a, b, c) with a*x + b*y + c = 0 and a^2 + b^2 = 1.
    """
    ray = backproject(bundle.projector.intrinsics, bundle.projector.pose, proj_pixel)
    # Two points along the projector ray, projected into the camera, span the line.
    cam_int, cam_pose = bundle.camera.intrinsics, bundle.camera.pose
    p_a = project(cam_int, cam_pose, ray.point_at(50.0))
    p_b = project(cam_int, cam_pose, ray.point_at(500.0))
    line = np.cross([p_a[0], p_a[1], 1.0], [p_b[0], p_b[1], 1.0])
    norm = np.hypot(line[0], line[1])
    if norm < 1e-14:
        raise GeometryError("degenerate epipolar line")
    return line / norm


def point_line_distance(pixel: np.ndarray, line: np.ndarray) -> float:
    px = np.asarray(pixel, dtype=float)
    return abs(line[0] * px[0] + line[1] * px[1] + line[2])


def _normalization(points: np.ndarray) -> np.ndarray:
    """Isotropic similarity normalization for the DLT (mean 0, RMS sqrt(2))."""
    centroid = points.mean(axis=0)
    rms = np.sqrt(((points - centroid) ** 2).sum(axis=1).mean())
    scale = np.sqrt(2.0) / max(rms, 1e-12)
    T = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return T


def estimate_homography(pairs) -> Homography:
    """Least-squares homography from >= 4 point pairs via the normalized DLT."""
    src = np.array([p[0] for p in pairs], dtype=float)
    dst = np.array([p[1] for p in pairs], dtype=float)
    n = len(src)
    if n < 4:
        raise ValueError("need at least 4 point pairs")

    T_src = _normalization(src)
    T_dst = _normalization(dst)
    src_h = np.hstack([src, np.ones((n, 1))]) @ T_src.T
    dst_h = np.hstack([dst, np.ones((n, 1))]) @ T_dst.T

    A = np.zeros((2 * n, 9))
    for i in range(n):
        x, y, _ = src_h[i]
        u, v, _ = dst_h[i]
        A[2 * i] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        A[2 * i + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]

    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-10 * s[0]:
        raise GeometryError("rank-deficient homography: degenerate configuration")
    H_norm = vt[-1].reshape(3, 3)
    H = np.linalg.inv(T_dst) @ H_norm @ T_src
    if abs(np.linalg.det(H)) < 1e-12:
        raise GeometryError("rank-deficient homography: degenerate configuration")
    return Homography(H)


@dataclass
class ReferenceSpot:
    """A pattern spot mapped into the reference image."""

    index: int
    center: np.ndarray  # reference-image pixel
    projector_pixel: np.ndarray
    rgb: np.ndarray
    wavelength_nm: float
    in_bounds: bool = True


def generate_reference_image(pattern, bundle: CalibrationBundle, spot_sigma: float = 2.0):
    """Synthesize the reference view of the pattern on the calibration plane.

    Returns (image HxWx3 float in [0,1], list of ReferenceSpot). Spots mapping
    outside the image are flagged ``in_bounds=False`` but kept.
    """
    H = bundle.reference_plane_homography
    w = bundle.camera.intrinsics.image_width
    h = bundle.camera.intrinsics.image_height
    image = np.zeros((h, w, 3))
    spots = []
    for i, spot in enumerate(pattern.spots):
        center = H.apply(spot.projector_pixel)
        in_bounds = bool(0 <= center[0] < w and 0 <= center[1] < h)
        spots.append(
            ReferenceSpot(
                index=i,
                center=center,
                projector_pixel=np.asarray(spot.projector_pixel, dtype=float),
                rgb=np.asarray(spot.rgb, dtype=float),
                wavelength_nm=spot.wavelength_nm,
                in_bounds=in_bounds,
            )
        )
    image = _splat_gaussians(
        image,
        np.array([s.center for s in spots]),
        np.array([s.rgb for s in spots]),
        spot_sigma,
    )
    return image, spots


def _splat_gaussians(image, centers, colors, sigma):
    """Additively render isotropic Gaussian blobs; shared by reference & simulator."""
    h, w = image.shape[:2]
    half = int(np.ceil(4 * sigma))
    for c, rgb in zip(centers, colors):
        x0, y0 = c
        xi = int(round(x0))
        yi = int(round(y0))
        xs = np.arange(max(0, xi - half), min(w, xi + half + 1))
        ys = np.arange(max(0, yi - half), min(h, yi + half + 1))
        if len(xs) == 0 or len(ys) == 0:
            continue
        gx = np.exp(-((xs - x0) ** 2) / (2 * sigma**2))
        gy = np.exp(-((ys - y0) ** 2) / (2 * sigma**2))
        blob = np.outer(gy, gx)
        image[np.ix_(ys, xs)] += blob[:, :, None] * rgb[None, None, :]
    return np.clip(image, 0.0, 1.0)
