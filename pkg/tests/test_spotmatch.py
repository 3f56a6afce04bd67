import numpy as np
import pytest

from spectralight.geometry import GeometryError, _splat_gaussians
from spectralight.pipeline import make_setup, match_frame
from spectralight.simulator import NoiseModel, render_frame
from spectralight import spotmatch
from spectralight.spotmatch import (
    N_DIRECTIONS,
    Match,
    MatchConfig,
    MatchSet,
    ReferenceDescriptorSet,
    auto_threshold,
    build_descriptor,
    build_graph,
    descriptor_distance,
    evaluate_matching,
    initial_match,
    prune,
    truth_correspondences,
    _resolve_conflicts,
)


def exhaustive_shift_distance(captured, base):
    """Independent oracle: try all 32 shifts explicitly."""
    best = (np.inf, -1)
    for k in range(N_DIRECTIONS):
        shifted = np.array([base[(i + k) % N_DIRECTIONS] for i in range(N_DIRECTIONS)])
        d = np.sqrt(((shifted - captured) ** 2).sum() / (N_DIRECTIONS * 3))
        if d < best[0]:
            best = (d, k)
    return best


class TestGraph:
    def test_edges_symmetric_and_radius_positive(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 100, size=(40, 2))
        g = build_graph(pts)
        for i, j in g.edges:
            assert i < j
            assert j in g.neighbors[i] and i in g.neighbors[j]
        assert (g.radius > 0).all()

    def test_delaunay_empty_circumcircle_property(self):
        # Brute-force check of the defining property on a small point set.
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 50, size=(15, 2))
        from scipy.spatial import Delaunay

        tri = Delaunay(pts)
        for simplex in tri.simplices:
            a, b, c = pts[simplex]
            # circumcenter from perpendicular-bisector equations
            A = 2 * np.array([b - a, c - a])
            rhs = np.array([b @ b - a @ a, c @ c - a @ a])
            center = np.linalg.solve(A, rhs)
            r = np.linalg.norm(a - center)
            others = np.delete(np.arange(len(pts)), simplex)
            dists = np.linalg.norm(pts[others] - center, axis=1)
            assert (dists >= r - 1e-9).all()

    def test_radius_is_alpha_times_median_edge(self):
        # Regular grid: all incident edges that survive the length filter have
        # equal length (the pitch), so radius == alpha * pitch exactly.
        xs, ys = np.meshgrid(np.arange(5) * 10.0, np.arange(5) * 10.0)
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
        g = build_graph(pts, alpha=0.5)
        center_vertex = 12  # middle of the 5x5 grid
        assert g.radius[center_vertex] == pytest.approx(5.0)

    def test_two_hop_matches_bfs(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 100, size=(30, 2))
        g = build_graph(pts)
        for v in range(len(pts)):
            expected = set()
            for u in g.neighbors[v]:
                expected.add(u)
                expected.update(g.neighbors[u])
            expected.discard(v)
            assert g.two_hop(v) == expected

    def test_too_few_points(self):
        with pytest.raises(GeometryError):
            build_graph([(0.0, 0.0), (1.0, 1.0)])

    def test_collinear_points(self):
        pts = [(float(i), 0.0) for i in range(6)]
        with pytest.raises(GeometryError):
            build_graph(pts)


class TestDescriptor:
    def test_constant_image(self):
        image = np.full((32, 32, 3), 0.25)
        d = build_descriptor(image, (16.0, 16.0), 5.0)
        assert d.shape == (N_DIRECTIONS, 3)
        assert np.allclose(d, 0.25)

    def test_bilinear_exact_on_linear_ramp(self):
        # Bilinear interpolation reproduces any bilinear function exactly.
        h = w = 40
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        image = np.stack([0.01 * xx, 0.02 * yy, 0.005 * xx * yy / 40.0], axis=2)
        center, radius = (20.0, 20.0), 6.3
        d = build_descriptor(image, center, radius)
        for i in range(N_DIRECTIONS):
            t = 2 * np.pi * i / N_DIRECTIONS
            x, y = center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)
            assert np.allclose(d[i], [0.01 * x, 0.02 * y, 0.005 * x * y / 40.0], atol=1e-12)

    def test_border_samples_clamped(self):
        image = np.zeros((16, 16, 3))
        image[:, :, 0] = 1.0
        d = build_descriptor(image, (1.0, 8.0), 6.0)  # circle leaves the image
        assert np.isfinite(d).all()
        assert np.allclose(d[:, 0], 1.0)


class TestDescriptorDistance:
    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            base = rng.uniform(0, 1, size=(N_DIRECTIONS, 3))
            cap = rng.uniform(0, 1, size=(N_DIRECTIONS, 3))
            got = descriptor_distance(cap, ReferenceDescriptorSet(base))
            want = exhaustive_shift_distance(cap, base)
            assert got[0] == pytest.approx(want[0], abs=1e-12)
            assert got[1] == want[1]

    def test_self_distance_zero(self):
        rng = np.random.default_rng(4)
        base = rng.uniform(0, 1, size=(N_DIRECTIONS, 3))
        d, k = descriptor_distance(base, ReferenceDescriptorSet(base))
        assert d == pytest.approx(0.0, abs=1e-14)
        assert k == 0

    @pytest.mark.parametrize("k", [1, 7, 16, 31])
    def test_recovers_known_shift(self, k):
        rng = np.random.default_rng(5)
        base = rng.uniform(0, 1, size=(N_DIRECTIONS, 3))
        cap = np.array([base[(i + k) % N_DIRECTIONS] for i in range(N_DIRECTIONS)])
        d, got = descriptor_distance(cap, ReferenceDescriptorSet(base))
        assert d == pytest.approx(0.0, abs=1e-14)
        assert got == k

    def test_normalization_bounds(self):
        # All-ones vs all-zeros: distance is exactly 1 regardless of shape.
        d, _ = descriptor_distance(np.zeros((N_DIRECTIONS, 3)),
                                   ReferenceDescriptorSet(np.ones((N_DIRECTIONS, 3))))
        assert d == pytest.approx(1.0)

    def test_rotation_of_rendered_pattern(self):
        # Render a blob constellation, then the same constellation rotated by
        # an exact multiple of the angular step; the descriptor must match
        # through a circular shift.
        rng = np.random.default_rng(6)
        h = w = 96
        center = np.array([48.0, 48.0])
        offsets = rng.uniform(-18, 18, size=(7, 2))
        colors = rng.uniform(0.3, 1.0, size=(7, 3))
        k = 5
        ang = 2 * np.pi * k / N_DIRECTIONS
        R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        img_a = _splat_gaussians(np.zeros((h, w, 3)), center + offsets, colors, 3.0)
        img_b = _splat_gaussians(np.zeros((h, w, 3)), center + offsets @ R.T, colors, 3.0)
        da = build_descriptor(img_a, center, 10.0)
        db = build_descriptor(img_b, center, 10.0)
        d, shift = descriptor_distance(db, ReferenceDescriptorSet(da))
        # Rotating the image content by +k steps means row i of the new
        # descriptor equals row (i - k) of the old one, i.e. shift N - k.
        assert shift == (N_DIRECTIONS - k) % N_DIRECTIONS
        assert d < 5e-3  # residual is bilinear resampling error only


class TestMatchSet:
    def test_one_to_one_enforced(self):
        ms = MatchSet(matches=[Match(0, 1, 0.1), Match(2, 1, 0.2)])
        with pytest.raises(ValueError):
            ms.check_one_to_one()
        ms2 = MatchSet(matches=[Match(0, 1, 0.1), Match(2, 3, 0.2)])
        ms2.check_one_to_one()

    def test_pruned_matches_ignored(self):
        ms = MatchSet(matches=[Match(0, 1, 0.1, flag="pruned"), Match(2, 1, 0.2)])
        ms.check_one_to_one()
        assert len(ms.active()) == 1

    def test_csv_round_trip(self, tmp_path):
        ms = MatchSet(matches=[Match(0, 5, 0.123456789, "initial"),
                               Match(3, 7, 0.5, "propagated"),
                               Match(9, 2, 0.9, "pruned")])
        path = tmp_path / "matches.csv"
        ms.to_csv(path)
        back = MatchSet.from_csv(path)
        assert [(m.captured, m.reference, m.flag) for m in back.matches] == \
               [(m.captured, m.reference, m.flag) for m in ms.matches]
        assert back.matches[0].distance == pytest.approx(0.123456789)

    def test_resolve_conflicts_greedy(self):
        cands = [(0.3, 0, 1), (0.1, 0, 2), (0.2, 3, 2), (0.4, 3, 4)]
        out = _resolve_conflicts(cands, "initial")
        pairs = {(m.captured, m.reference) for m in out}
        assert pairs == {(0, 2), (3, 4)}


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            MatchConfig(epipolar_band_halfwidth=0.0)
        with pytest.raises(ValueError):
            MatchConfig(distance_threshold=-1.0)


class TestAutoThreshold:
    def test_positive_and_scales_with_fraction(self):
        setup = make_setup("plane", n_spots=60)
        t1 = auto_threshold(setup.reference, fraction=0.5)
        t2 = auto_threshold(setup.reference, fraction=0.25)
        assert t1 > 0
        assert t2 == pytest.approx(t1 / 2)


class TestEvaluation:
    def test_arithmetic(self):
        ms = MatchSet(matches=[Match(0, 10, 0.1), Match(1, 11, 0.1), Match(2, 99, 0.1)])
        truth_map = {0: 10, 1: 11, 2: 12}
        r = evaluate_matching(ms, truth_map, annotated=4)
        assert r["true_positive"] == 2
        assert r["sensitivity"] == pytest.approx(0.5)
        assert r["precision"] == pytest.approx(2 / 3)
        assert not r["degenerate"]

    def test_degenerate_flag(self):
        r = evaluate_matching(MatchSet(), {}, annotated=0)
        assert r["degenerate"]
        assert r["sensitivity"] == 0.0 and r["precision"] == 0.0

    def test_truth_correspondences_tolerance(self):
        setup = make_setup("plane", n_spots=40)
        frame = render_frame(setup.pattern, setup.scene, setup.bundle, seed=0,
                             spot_sigma=setup.spot_sigma)
        centers = np.array([t.cam_center for t in frame.visible_truth()])
        mapping, annotated = truth_correspondences(centers, frame)
        assert annotated == len(centers)
        assert len(mapping) == len(centers)
        far = centers + 10.0
        mapping2, _ = truth_correspondences(far, frame)
        assert len(mapping2) < len(centers) * 0.5


class TestEndToEndMatching:
    @pytest.mark.parametrize("kind", ["plane", "cylinder", "heightfield"])
    def test_zero_noise_exact(self, kind):
        # Full-density pattern: sparser patterns enlarge the descriptor radii
        # and the flat-reference assumption breaks down on curved scenes.
        setup = make_setup(kind)
        frame = render_frame(setup.pattern, setup.scene, setup.bundle, noise=None,
                             seed=1, spot_sigma=setup.spot_sigma)
        detections, matches = match_frame(frame.image, setup)
        truth_map, annotated = truth_correspondences(detections.centers, frame)
        r = evaluate_matching(matches, truth_map, annotated)
        assert r["sensitivity"] == 1.0
        assert r["precision"] == 1.0

    def test_epipolar_band_respected(self):
        setup = make_setup("plane", n_spots=80)
        frame = render_frame(setup.pattern, setup.scene, setup.bundle, seed=2,
                             spot_sigma=setup.spot_sigma)
        config = MatchConfig()
        detections, matches = match_frame(frame.image, setup, config=config)
        lines = setup.reference.epilines
        for m in matches.active():
            c = detections.centers[m.captured]
            line = lines[m.reference]
            assert abs(line[0] * c[0] + line[1] * c[1] + line[2]) <= \
                config.epipolar_band_halfwidth + 1e-9

    def test_prune_removes_planted_outlier(self):
        setup = make_setup("plane", n_spots=80)
        frame = render_frame(setup.pattern, setup.scene, setup.bundle, seed=3,
                             spot_sigma=setup.spot_sigma)
        detections, matches = match_frame(frame.image, setup)
        truth_map, _ = truth_correspondences(detections.centers, frame)
        # Replant one correct match onto a far-away reference spot.
        victim = matches.active()[0]
        centers = setup.reference.centers
        far_ref = int(np.argmax(np.linalg.norm(centers - centers[victim.reference], axis=1)))
        used = {m.reference for m in matches.active()}
        if far_ref in used:  # keep one-to-one: drop its current owner
            for m in matches.matches:
                if m.reference == far_ref:
                    m.flag = "pruned"
        victim.reference = far_ref
        matches.check_one_to_one()
        prune(matches, build_graph(detections.centers), setup.reference.graph)
        assert (victim.captured, far_ref) not in matches.active_pairs()

    def test_propagation_grows_matches(self):
        setup = make_setup("cylinder", n_spots=80)
        frame = render_frame(setup.pattern, setup.scene, setup.bundle, seed=4,
                             spot_sigma=setup.spot_sigma)
        detections, matches = match_frame(frame.image, setup)
        assert matches.converged
        assert matches.count_history[-1] >= matches.count_history[0]
        flags = {m.flag for m in matches.matches}
        assert "initial" in flags

    def test_initial_match_one_to_one(self):
        setup = make_setup("plane", n_spots=60)
        frame = render_frame(setup.pattern, setup.scene, setup.bundle, seed=5,
                             spot_sigma=setup.spot_sigma)
        from spectralight.pipeline import detect

        detections = detect(frame.image)
        graph = build_graph(detections.centers)
        descs = [build_descriptor(frame.image, detections.centers[i], graph.radius[i])
                 for i in range(len(detections))]
        ms = initial_match(detections.centers, descs, setup.reference, MatchConfig())
        ms.check_one_to_one()
        assert len(ms.active()) > 0
