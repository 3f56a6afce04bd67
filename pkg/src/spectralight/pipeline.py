"""End-to-end orchestration: scene setup, per-frame matching, hybrid fusion.

These helpers wire the individual modules the way the command-line tool
and the benchmark suite use them; everything stays overridable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry, hybrid, simulator, spectra, spotdetect, spotmatch
from .spotmatch import MatchConfig


def region_reflectance(region: str, wavelengths: np.ndarray) -> np.ndarray:
    """Smooth reflectance curve dominated by one colour band."""
    lam = np.asarray(wavelengths, dtype=float)
    if region == "red":
        curve = 1.0 / (1.0 + np.exp(-(lam - 590.0) / 15.0))
    elif region == "green":
        curve = np.exp(-((lam - 540.0) ** 2) / (2 * 40.0**2))
    elif region == "blue":
        curve = np.exp(-((lam - 470.0) ** 2) / (2 * 35.0**2))
    else:
        raise ValueError(f"unknown region {region!r}")
    return 0.05 + 0.85 * curve


def _three_band_region(y_mm: float) -> str:
    if y_mm < -8.0:
        return "red"
    if y_mm < 8.0:
        return "green"
    return "blue"


@dataclass
class DemoSetup:
    """Everything needed to render and decode frames of one scene class."""

    bundle: geometry.CalibrationBundle
    pattern: simulator.SpotPatternSpec
    scene: simulator.Scene
    reference_image: np.ndarray
    reference_spots: list
    reference: spotmatch.ReferenceData
    spot_sigma: float
    spot_points: list = field(default_factory=list)  # true 3D point per spot
    spot_regions: list = field(default_factory=list)


def make_scene(kind: str, seed: int = 0, colored: bool = False) -> simulator.Scene:
    if kind == "plane":
        return simulator.Scene("plane", depth_mm=100.0)
    if kind == "cylinder":
        albedo = None
        if colored:
            def albedo(point):
                return {
                    "red": (0.9, 0.2, 0.2),
                    "green": (0.2, 0.9, 0.2),
                    "blue": (0.2, 0.2, 0.9),
                }[_three_band_region(point[1])]
        return simulator.Scene("cylinder", depth_mm=95.0, cylinder_radius_mm=60.0, albedo=albedo)
    if kind == "heightfield":
        hgt = simulator.heightfield_from_bumps(seed=seed)
        return simulator.Scene("heightfield", depth_mm=100.0, heightfield=hgt,
                               heightfield_extent_mm=120.0)
    raise ValueError(f"unknown scene kind {kind!r}")


def make_setup(
    scene_kind: str = "plane",
    n_spots: int = 171,
    seed: int = 7,
    spot_sigma: float = 3.2,
    colored: bool = False,
    descriptor_alpha: float = 0.5,
) -> DemoSetup:
    """Build bundle + pattern + reference data for one scene class.

    Also records each spot's true surface point (and colour region when the
    scene is the three-band target) so hyperspectral truth can be derived.
    """
    bundle = simulator.default_bundle()
    pattern = simulator.generate_pattern(n_spots, seed=seed,
                                         projector_size=(bundle.projector.intrinsics.image_width,
                                                         bundle.projector.intrinsics.image_height))
    scene = make_scene(scene_kind, seed=seed, colored=colored)
    ref_image, ref_spots = geometry.generate_reference_image(pattern, bundle, spot_sigma=spot_sigma)
    reference = spotmatch.prepare_reference(ref_image, ref_spots, bundle, alpha=descriptor_alpha)

    points, regions = [], []
    for spot in pattern.spots:
        ray = geometry.backproject(bundle.projector.intrinsics, bundle.projector.pose,
                                   spot.projector_pixel)
        try:
            p = scene.intersect(ray)
        except geometry.GeometryError:
            p = None
        points.append(p)
        regions.append(_three_band_region(p[1]) if (colored and p is not None) else None)

    if colored:
        wl = np.linspace(simulator.WAVELENGTH_MIN_NM, simulator.WAVELENGTH_MAX_NM, 55)
        refl = np.stack([
            region_reflectance(r or "green", wl) for r in regions
        ])
        scene.reflectance_wavelengths = wl
        scene.reflectance = refl

    return DemoSetup(
        bundle=bundle,
        pattern=pattern,
        scene=scene,
        reference_image=ref_image,
        reference_spots=ref_spots,
        reference=reference,
        spot_sigma=spot_sigma,
        spot_points=points,
        spot_regions=regions,
    )


def detect(image: np.ndarray, detector: str = "baseline", model=None,
           nms_radius: float = 4.0, threshold: float | None = None):
    if detector == "baseline":
        return spotdetect.baseline_detect(image, threshold=threshold if threshold is not None else 0.02,
                                          nms_radius=nms_radius)
    if detector == "fcn":
        if model is None:
            raise ValueError("fcn detector requires a trained model")
        return spotdetect.fcn_detect(model, image, threshold=threshold if threshold is not None else 0.0,
                                     nms_radius=nms_radius)
    raise ValueError(f"unknown detector {detector!r}")


def match_frame(
    image: np.ndarray,
    setup: DemoSetup,
    config: MatchConfig | None = None,
    detector: str = "baseline",
    model=None,
    timer: hybrid.StageTimer | None = None,
):
    """Detect spots and match them to the reference. Returns (detections, matches)."""
    config = config or MatchConfig()
    timer = timer or hybrid.StageTimer()
    detections = timer.time("detect", detect, image, detector=detector, model=model)

    def _match():
        if len(detections) < 3:
            return spotmatch.MatchSet()
        graph = spotmatch.build_graph(detections.centers)
        descriptors = [
            spotmatch.build_descriptor(image, detections.centers[i], graph.radius[i])
            for i in range(len(detections))
        ]
        matches = spotmatch.initial_match(detections.centers, descriptors, setup.reference, config)
        spotmatch.prune(matches, graph, setup.reference.graph, beta=config.prune_beta)
        spotmatch.propagate(matches, detections.centers, descriptors, graph,
                            setup.reference, config)
        return matches

    matches = timer.time("match", _match)
    return detections, matches


def hyperspectral_products(setup: DemoSetup, noise=None, seed: int = 0):
    """Simulate + process one hyperspectral exposure for the setup's scene.

    Returns (spectra_per_band, sto2_per_band, rgb_per_band, fiber_map).
    """
    n = setup.pattern.count
    calib = spectra.WavelengthCalibration(slope=1.0, intercept=simulator.WAVELENGTH_MIN_NM)
    n_rows = int(simulator.WAVELENGTH_MAX_NM - simulator.WAVELENGTH_MIN_NM) + 1
    white = simulator.default_white_reference(n, calib.wavelengths(n_rows))
    perm = simulator.pattern_fiber_permutation(setup.pattern)

    frame = simulator.synth_hyperspectral_frame(setup.scene, perm, calib, white,
                                                noise=noise, seed=seed)
    white_frame = simulator.white_reference_frame(calib, white)
    refl = spectra.reflectance_spectra(frame, white_frame, calib)

    fiber_map = spectra.map_fibers(
        [s.wavelength_nm for s in setup.pattern.spots],
        [simulator.WAVELENGTH_MIN_NM + (simulator.WAVELENGTH_MAX_NM - simulator.WAVELENGTH_MIN_NM)
         * b / max(n - 1, 1) for b in range(n)],
    )

    basis = spectra.load_hemoglobin_basis()
    sto2 = {}
    rgb = {}
    for band, spectrum in refl.items():
        rgb[band] = spectra.rgb_from_spectrum(spectrum)
        try:
            sto2[band] = spectra.fit_sto2(spectra.absorbance(spectrum), basis)
        except spectra.SpectraError:
            pass
    return refl, sto2, rgb, fiber_map


def run_hybrid_frame(
    setup: DemoSetup,
    noise: simulator.NoiseModel | None = None,
    seed: int = 0,
    config: MatchConfig | None = None,
    detector: str = "baseline",
    model=None,
    with_spectra: bool = True,
):
    """Full path: render -> detect -> match -> triangulate -> spectra -> fuse."""
    timer = hybrid.StageTimer()
    frame = simulator.render_frame(setup.pattern, setup.scene, setup.bundle,
                                   noise=noise, seed=seed, spot_sigma=setup.spot_sigma)
    detections, matches = match_frame(frame.image, setup, config=config,
                                      detector=detector, model=model, timer=timer)
    surface = timer.time("triangulate", hybrid.reconstruct, matches, detections,
                         setup.reference_spots, setup.bundle)
    if with_spectra and not surface.empty:
        refl, sto2, rgb, fiber_map = timer.time("spectra", hyperspectral_products,
                                                setup, noise=noise, seed=seed)
        out = hybrid.attach_spectra(surface, fiber_map, refl, sto2, rgb)
    else:
        out = hybrid.HybridFrame(surface=surface)
    out.timing_ms = dict(timer.ms)
    return frame, detections, matches, out, timer
