"""Synthetic probe + scene generator with exhaustive ground truth.

Stands in for the physical rig: it renders the projected spot pattern as
seen by the camera, produces hyperspectral sensor frames, and records the
true spot centres, correspondences and 3D points that a real system would
need manual annotation for.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import brentq

from . import geometry
from .geometry import (
    CalibrationBundle,
    Device,
    GeometryError,
    Intrinsics,
    Pose,
    backproject,
    estimate_homography,
    project_many,
    _splat_gaussians,
)

MAX_FIBERS = 171
WAVELENGTH_MIN_NM = 450.0
WAVELENGTH_MAX_NM = 720.0


def wavelength_to_rgb(wavelength_nm: float) -> np.ndarray:
    """Crude visible-spectrum colour approximation, values in [0, 1]."""
    w = float(wavelength_nm)
    if w < 440:
        r, g, b = (440 - w) / 60.0, 0.0, 1.0
    elif w < 490:
        r, g, b = 0.0, (w - 440) / 50.0, 1.0
    elif w < 510:
        r, g, b = 0.0, 1.0, (510 - w) / 20.0
    elif w < 580:
        r, g, b = (w - 510) / 70.0, 1.0, 0.0
    elif w < 645:
        r, g, b = 1.0, (645 - w) / 65.0, 0.0
    else:
        r, g, b = 1.0, 0.0, 0.0
    return np.clip([r, g, b], 0.0, 1.0)


@dataclass(frozen=True)
class Spot:
    projector_pixel: np.ndarray
    wavelength_nm: float
    rgb: np.ndarray


@dataclass(frozen=True)
class SpotPatternSpec:
    """Projector-side spot layout with per-spot wavelength encoding."""

    spots: tuple
    projector_size: tuple  # (width, height) px

    def __post_init__(self):
        if len(self.spots) > MAX_FIBERS:
            raise ValueError(f"at most {MAX_FIBERS} spots supported")
        wavelengths = [s.wavelength_nm for s in self.spots]
        if len(set(wavelengths)) != len(wavelengths):
            raise ValueError("spot wavelengths must be pairwise distinct")
        w, h = self.projector_size
        for s in self.spots:
            x, y = s.projector_pixel
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError("spot outside projector bounds")

    @property
    def count(self) -> int:
        return len(self.spots)


def generate_pattern(count: int, seed: int, projector_size=(128, 128)) -> SpotPatternSpec:
    """Jittered-grid pattern with a shuffled wavelength ramp.

    Fibre ``i`` of the (proximal) linear array carries wavelength ``ramp[i]``;
    the incoherent bundle scrambles which pattern position each fibre ends
    up at, modeled by a seeded permutation.
    """
    if not (1 <= count <= MAX_FIBERS):
        raise ValueError(f"count must be in [1, {MAX_FIBERS}]")
    rng = np.random.default_rng(seed)
    w, h = projector_size

    if count == 1:
        centers = np.array([[w / 2.0, h / 2.0]])
    else:
        cols = int(np.ceil(np.sqrt(count * w / h)))
        rows = int(np.ceil(count / cols))
        margin = 0.09
        xs = np.linspace(margin * w, (1 - margin) * w, cols)
        ys = np.linspace(margin * h, (1 - margin) * h, rows)
        grid = np.array([(x, y) for y in ys for x in xs])[:count]
        pitch = min(xs[1] - xs[0], ys[1] - ys[0]) if cols > 1 and rows > 1 else 10.0
        jitter = rng.uniform(-0.15, 0.15, size=grid.shape) * pitch
        centers = np.clip(grid + jitter, 0, [w - 1e-6, h - 1e-6])

    # Dispersed ramp across the linear array, shuffled into the bundle.
    ramp = np.linspace(WAVELENGTH_MIN_NM, WAVELENGTH_MAX_NM, count)
    perm = rng.permutation(count)
    spots = tuple(
        Spot(
            projector_pixel=centers[j],
            wavelength_nm=float(ramp[perm[j]]),
            rgb=wavelength_to_rgb(ramp[perm[j]]),
        )
        for j in range(count)
    )
    return SpotPatternSpec(spots=spots, projector_size=tuple(projector_size))


def pattern_fiber_permutation(pattern: SpotPatternSpec) -> np.ndarray:
    """Permutation p with p[spot_index] = proximal fibre (sensor band) index.

    Recoverable because the proximal ramp is monotone in fibre index: the
    spot carrying the k-th smallest wavelength sits on fibre k.
    """
    order = np.argsort([s.wavelength_nm for s in pattern.spots])
    perm = np.empty(pattern.count, dtype=int)
    perm[order] = np.arange(pattern.count)
    return perm


# ---------------------------------------------------------------------------
# Scenes


@dataclass
class NoiseModel:
    pixel_noise_sigma: float = 0.0
    illumination_gradient: tuple = (0.0, 0.0)  # multiplicative ramp per axis
    spot_dropout_fraction: float = 0.0
    spectral_noise_sigma: float = 0.0

    def __post_init__(self):
        if min(self.pixel_noise_sigma, self.spectral_noise_sigma) < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not (0.0 <= self.spot_dropout_fraction <= 1.0):
            raise ValueError("dropout fraction must be in [0, 1]")


class Scene:
    """A surface + albedo + per-fibre reflectance spectra.

    kind is one of "plane", "cylinder", "heightfield". The surface must be
    expressible as z = f(x, y) in the world frame (camera looks along +z).
    """

    def __init__(
        self,
        kind: str = "plane",
        depth_mm: float = 100.0,
        cylinder_radius_mm: float = 60.0,
        cylinder_axis: str = "y",
        heightfield: np.ndarray | None = None,
        heightfield_extent_mm: float = 80.0,
        albedo=None,
        reflectance_wavelengths: np.ndarray | None = None,
        reflectance: np.ndarray | None = None,
    ):
        if kind not in ("plane", "cylinder", "heightfield"):
            raise ValueError(f"unknown scene kind {kind!r}")
        self.kind = kind
        self.depth_mm = float(depth_mm)
        self.cylinder_radius_mm = float(cylinder_radius_mm)
        self.cylinder_axis = cylinder_axis
        self.heightfield_extent_mm = float(heightfield_extent_mm)
        self._albedo = albedo
        self.reflectance_wavelengths = reflectance_wavelengths
        self.reflectance = reflectance
        if kind == "heightfield":
            if heightfield is None:
                raise ValueError("heightfield scene needs a height grid")
            hgt = np.asarray(heightfield, dtype=float)
            e = self.heightfield_extent_mm / 2.0
            ys = np.linspace(-e, e, hgt.shape[0])
            xs = np.linspace(-e, e, hgt.shape[1])
            self._height_interp = RegularGridInterpolator(
                (ys, xs), hgt, bounds_error=False, fill_value=0.0
            )

    # -- surface ------------------------------------------------------------

    def height(self, x, y):
        """Surface depth z at lateral position (x, y), mm."""
        if self.kind == "plane":
            return np.broadcast_to(self.depth_mm, np.shape(x)).astype(float) if np.ndim(x) else self.depth_mm
        if self.kind == "cylinder":
            # Axis parallel to y (or x) at depth_mm + radius; front face at depth_mm.
            r = self.cylinder_radius_mm
            lateral = np.asarray(x if self.cylinder_axis == "y" else y, dtype=float)
            inside = np.clip(r**2 - lateral**2, 0.0, None)
            return self.depth_mm + r - np.sqrt(inside)
        pts = np.stack(np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(x, dtype=float)), axis=-1)
        z = self.depth_mm + self._height_interp(pts)
        return float(np.ravel(z)[0]) if np.ndim(x) == 0 and np.ndim(y) == 0 else z

    def intersect(self, ray: geometry.Ray) -> np.ndarray:
        """First intersection of a ray with the surface (z = f(x, y))."""
        if self.kind == "plane":
            if abs(ray.direction[2]) < 1e-12:
                raise GeometryError("ray parallel to scene plane")
            t = (self.depth_mm - ray.origin[2]) / ray.direction[2]
            if t <= 0:
                raise GeometryError("surface behind ray origin")
            return ray.point_at(t)
        if self.kind == "cylinder":
            r = self.cylinder_radius_mm
            cz = self.depth_mm + r
            # Components perpendicular to the cylinder axis.
            i = 0 if self.cylinder_axis == "y" else 1
            o = np.array([ray.origin[i], ray.origin[2] - cz])
            d = np.array([ray.direction[i], ray.direction[2]])
            a = d @ d
            b = 2 * o @ d
            c = o @ o - r**2
            disc = b * b - 4 * a * c
            if disc <= 0:
                raise GeometryError("ray misses cylinder")
            t = (-b - np.sqrt(disc)) / (2 * a)  # near intersection
            if t <= 0:
                raise GeometryError("surface behind ray origin")
            return ray.point_at(t)
        # Heightfield: bracket and bisect g(t) = z(t) - f(x(t), y(t)).
        def g(t):
            p = ray.point_at(t)
            return p[2] - self.height(p[0], p[1])

        t_lo, t_hi = 1.0, 400.0
        if g(t_lo) >= 0 or g(t_hi) <= 0:
            raise GeometryError("ray does not cross heightfield surface")
        t = brentq(g, t_lo, t_hi, xtol=1e-10)
        return ray.point_at(t)

    # -- appearance ---------------------------------------------------------

    def albedo(self, point: np.ndarray) -> np.ndarray:
        """RGB albedo at a world point, in [0, 1]."""
        if self._albedo is None:
            return np.ones(3)
        if callable(self._albedo):
            return np.clip(np.asarray(self._albedo(point), dtype=float), 0.0, 1.0)
        return np.clip(np.asarray(self._albedo, dtype=float), 0.0, 1.0)

    def fiber_reflectance(self, n_fibers: int) -> tuple:
        """(wavelength grid, per-fibre reflectance matrix), defaulting to flat 0.8."""
        if self.reflectance is not None:
            refl = np.asarray(self.reflectance, dtype=float)
            if refl.shape[0] < n_fibers:
                raise ValueError("scene reflectance covers fewer fibres than requested")
            return np.asarray(self.reflectance_wavelengths, dtype=float), refl[:n_fibers]
        wl = np.linspace(WAVELENGTH_MIN_NM, WAVELENGTH_MAX_NM, 28)
        return wl, np.full((n_fibers, wl.size), 0.8)


def heightfield_from_bumps(shape=(33, 33), amplitude_mm=4.0, n_bumps=6, seed=0):
    """Smooth random bump grid for phantom-tissue style scenes."""
    rng = np.random.default_rng(seed)
    ny, nx = shape
    yy, xx = np.mgrid[0:ny, 0:nx]
    hgt = np.zeros(shape)
    for _ in range(n_bumps):
        cx, cy = rng.uniform(0.2, 0.8, 2) * [nx, ny]
        s = rng.uniform(0.1, 0.25) * nx
        a = rng.uniform(-1, 1) * amplitude_mm
        hgt += a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s**2))
    return hgt


def load_heightfield(path) -> np.ndarray:
    """Read a height grid from a CSV (comma floats) or ASCII PGM file."""
    path = str(path)
    if path.endswith(".csv"):
        return np.loadtxt(path, delimiter=",")
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P2":
            raise ValueError("only ASCII PGM (P2) heightfields supported")
        tokens = []
        for line in f:
            line = line.split(b"#")[0]
            tokens.extend(line.split())
        w, h, maxval = int(tokens[0]), int(tokens[1]), int(tokens[2])
        data = np.array(tokens[3:], dtype=float).reshape(h, w)
        return data / maxval


def default_bundle(
    camera_size=(256, 256),
    camera_focal=300.0,
    projector_size=(128, 128),
    projector_focal=200.0,
    baseline_mm=30.0,
    target=(8.0, 0.0, 100.0),
    reference_depth_mm=100.0,
) -> CalibrationBundle:
    """Camera at the origin looking down +z; projector offset and toed in.

    The reference-plane homography maps projector pixels onto the camera
    view of the plane z = reference_depth_mm (the calibration plane).
    """
    cam = Device(
        Intrinsics(
            camera_focal, camera_focal, camera_size[0] / 2.0, camera_size[1] / 2.0,
            camera_size[0], camera_size[1],
        ),
        Pose.identity(),
    )
    center = np.array([baseline_mm, 0.0, 0.0])
    forward = np.asarray(target, dtype=float) - center
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])  # world -> projector axes
    proj = Device(
        Intrinsics(
            projector_focal, projector_focal,
            projector_size[0] / 2.0, projector_size[1] / 2.0,
            projector_size[0], projector_size[1],
        ),
        Pose(R, -R @ center),
    )

    # Sample the exact projector->plane->camera map; the DLT recovers it exactly.
    plane = Scene("plane", depth_mm=reference_depth_mm)
    pairs = []
    w, h = projector_size
    for px in np.linspace(4, w - 4, 4):
        for py in np.linspace(4, h - 4, 4):
            ray = backproject(proj.intrinsics, proj.pose, (px, py))
            point = plane.intersect(ray)
            cam_px = geometry.project(cam.intrinsics, cam.pose, point)
            pairs.append(((px, py), cam_px))
    H = estimate_homography(pairs)
    return CalibrationBundle(camera=cam, projector=proj, reference_plane_homography=H)


# ---------------------------------------------------------------------------
# Rendering


@dataclass
class SpotTruth:
    index: int
    cam_center: np.ndarray | None
    projector_pixel: np.ndarray
    point_mm: np.ndarray | None
    visible: bool
    dropped: bool = False


@dataclass
class RenderedFrame:
    image: np.ndarray  # HxWx3 in [0,1]
    truth: list  # SpotTruth per pattern spot
    fiber_permutation: np.ndarray
    seed: int = 0
    spot_sigma: float = 2.0

    def visible_truth(self):
        return [t for t in self.truth if t.visible]

    def truth_to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "spot_sigma": self.spot_sigma,
            "fiber_permutation": self.fiber_permutation.tolist(),
            "spots": [
                {
                    "index": t.index,
                    "cam_center": None if t.cam_center is None else t.cam_center.tolist(),
                    "projector_pixel": t.projector_pixel.tolist(),
                    "point_mm": None if t.point_mm is None else t.point_mm.tolist(),
                    "visible": t.visible,
                    "dropped": t.dropped,
                }
                for t in self.truth
            ],
        }
        return json.dumps(doc, indent=2)


def render_frame(
    pattern: SpotPatternSpec,
    scene: Scene,
    bundle: CalibrationBundle,
    noise: NoiseModel | None = None,
    seed: int = 0,
    spot_sigma: float = 2.0,
) -> RenderedFrame:
    """Render the camera view of the projected pattern, with full ground truth.

    Every pattern spot gets a truth entry; occluded/out-of-frame/dropped
    spots are flagged invisible rather than omitted.
    """
    noise = noise or NoiseModel()
    rng = np.random.default_rng(seed)
    cam = bundle.camera
    w, h = cam.intrinsics.image_width, cam.intrinsics.image_height

    n = pattern.count
    dropped = rng.random(n) < noise.spot_dropout_fraction

    truth = []
    centers, colors = [], []
    for j, spot in enumerate(pattern.spots):
        try:
            ray = backproject(bundle.projector.intrinsics, bundle.projector.pose, spot.projector_pixel)
            point = scene.intersect(ray)
            cam_px = geometry.project(cam.intrinsics, cam.pose, point)
            in_frame = bool(0 <= cam_px[0] < w and 0 <= cam_px[1] < h)
        except GeometryError:
            point, cam_px, in_frame = None, None, False
        visible = in_frame and not dropped[j]
        truth.append(
            SpotTruth(
                index=j,
                cam_center=cam_px,
                projector_pixel=np.asarray(spot.projector_pixel, dtype=float),
                point_mm=point,
                visible=visible,
                dropped=bool(dropped[j]),
            )
        )
        if visible:
            centers.append(cam_px)
            colors.append(spot.rgb * scene.albedo(point))

    image = np.zeros((h, w, 3))
    if centers:
        image = _splat_gaussians(image, np.array(centers), np.array(colors), spot_sigma)

    gx, gy = noise.illumination_gradient
    if gx or gy:
        xs = np.linspace(-0.5, 0.5, w)
        ys = np.linspace(-0.5, 0.5, h)
        ramp = 1.0 + gx * xs[None, :] + gy * ys[:, None]
        image = image * np.clip(ramp, 0.0, None)[:, :, None]
    if noise.pixel_noise_sigma > 0:
        image = image + rng.normal(0.0, noise.pixel_noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0)

    return RenderedFrame(
        image=image,
        truth=truth,
        fiber_permutation=pattern_fiber_permutation(pattern),
        seed=seed,
        spot_sigma=spot_sigma,
    )


# ---------------------------------------------------------------------------
# Hyperspectral sensor frames


def default_white_reference(n_fibers: int, rows: np.ndarray) -> np.ndarray:
    """System spectral response per fibre: smooth lamp curve x fibre throughput."""
    lam = rows  # wavelength per sensor row, nm
    lamp = 0.6 + 0.4 * np.exp(-((lam - 580.0) ** 2) / (2 * 90.0**2))
    throughput = 0.9 + 0.1 * np.cos(np.arange(n_fibers) * 0.37)[:, None]
    return throughput * lamp[None, :]


def synth_hyperspectral_frame(
    scene: Scene,
    permutation: np.ndarray,
    calib,
    white_reference: np.ndarray,
    noise: NoiseModel | None = None,
    seed: int = 0,
    band_width: int = 3,
):
    """Simulate the spectrograph sensor image.

    Rows follow ``calib`` (linear wavelength/row map); fibre band ``p``
    carries the reflectance of the scene location probed by distal spot
    ``j`` with ``permutation[j] = p``, multiplied by the white-reference
    response of fibre ``p``.
    """
    from .spectra import SpectralFrame  # local import to avoid a cycle

    noise = noise or NoiseModel()
    permutation = np.asarray(permutation, dtype=int)
    n = permutation.size
    if sorted(permutation.tolist()) != list(range(n)):
        raise ValueError("permutation must be a bijection on fibre indices")
    rng = np.random.default_rng(seed)

    n_rows = white_reference.shape[1]
    rows_nm = calib.intercept + calib.slope * np.arange(n_rows)
    wl, refl = scene.fiber_reflectance(n)

    sensor = np.zeros((n_rows, n * band_width))
    bands = {}
    for j in range(n):
        p = int(permutation[j])
        r = np.interp(rows_nm, wl, refl[j])
        signal = r * white_reference[p]
        c0 = p * band_width
        sensor[:, c0 : c0 + band_width] = signal[:, None]
        bands[p] = (c0, c0 + band_width)
    if noise.spectral_noise_sigma > 0:
        sensor = sensor + rng.normal(0.0, noise.spectral_noise_sigma, sensor.shape)
    return SpectralFrame(sensor=np.clip(sensor, 0.0, None), bands=bands)


def white_reference_frame(calib, white_reference: np.ndarray, band_width: int = 3):
    """Sensor frame of the white reference target (reflectance 1 everywhere)."""
    from .spectra import SpectralFrame

    n = white_reference.shape[0]
    n_rows = white_reference.shape[1]
    sensor = np.zeros((n_rows, n * band_width))
    bands = {}
    for p in range(n):
        c0 = p * band_width
        sensor[:, c0 : c0 + band_width] = white_reference[p][:, None]
        bands[p] = (c0, c0 + band_width)
    return SpectralFrame(sensor=sensor, bands=bands)


# ---------------------------------------------------------------------------
# Training data


def _mask_from_centers(shape, centers, radius):
    mask = np.zeros(shape, dtype=np.uint8)
    if len(centers) == 0:
        return mask
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    for cx, cy in centers:
        mask |= ((xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2).astype(np.uint8)
    return mask


def _snap16(v: int) -> int:
    return max(16, int(round(v / 16.0)) * 16)


def make_training_set(
    n_base: int = 17,
    augmentations: int = 8,
    seed: int = 0,
    image_size: int = 64,
    spots_per_image: int = 12,
    spot_sigma: float = 2.0,
    label_radius: float = 3.0,
    noise_sigma: float = 0.01,
):
    """Render base frames and augment them (resize, flips, rotations).

    Returns a list of (image HxWx3, mask HxW) pairs of length
    n_base * (1 + augmentations). Sizes stay multiples of 16 so frames feed
    the detector without padding.
    """
    from scipy import ndimage

    if n_base < 1:
        raise ValueError("n_base must be >= 1")
    rng = np.random.default_rng(seed)
    bundle = default_bundle(
        camera_size=(image_size, image_size),
        camera_focal=image_size * 1.2,
        projector_size=(64, 64),
        projector_focal=100.0,
    )
    pairs = []
    for b in range(n_base):
        pattern = generate_pattern(spots_per_image, seed=seed * 1000 + b, projector_size=(64, 64))
        scene = Scene("plane", depth_mm=100.0 + rng.uniform(-8, 8))
        frame = render_frame(
            pattern, scene, bundle,
            NoiseModel(pixel_noise_sigma=noise_sigma, illumination_gradient=(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3))),
            seed=int(rng.integers(1 << 31)),
            spot_sigma=spot_sigma,
        )
        centers = [t.cam_center for t in frame.visible_truth()]
        mask = _mask_from_centers(frame.image.shape[:2], centers, label_radius)
        pairs.append((frame.image, mask))

        ops = ["resize_up", "resize_down", "hflip", "vflip", "rot90", "rot180", "rot270", "free_rot"]
        for a in range(augmentations):
            op = ops[a % len(ops)]
            img, m = frame.image, mask.astype(float)
            if op == "hflip":
                img, m = img[:, ::-1].copy(), m[:, ::-1].copy()
            elif op == "vflip":
                img, m = img[::-1].copy(), m[::-1].copy()
            elif op in ("rot90", "rot180", "rot270"):
                k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
                img, m = np.rot90(img, k).copy(), np.rot90(m, k).copy()
            elif op in ("resize_up", "resize_down"):
                factor = 1.25 if op == "resize_up" else 0.75
                target = _snap16(int(image_size * factor))
                zoom = target / image_size
                img = ndimage.zoom(img, (zoom, zoom, 1), order=1)
                m = ndimage.zoom(m, (zoom, zoom), order=0)
            else:  # free-angle rotation with mask co-rotation
                angle = float(rng.uniform(-40, 40))
                img = ndimage.rotate(img, angle, reshape=False, order=1, mode="reflect")
                m = ndimage.rotate(m, angle, reshape=False, order=0, mode="constant")
            pairs.append((np.clip(img, 0, 1), (m > 0.5).astype(np.uint8)))
    return pairs
