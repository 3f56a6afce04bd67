"""Captured-to-reference spot correspondence.

Pipeline: Delaunay neighbourhood graphs -> 32-direction boundary colour
descriptors (rotation handled by circular shifts on the reference side)
-> epipolar-constrained initial matching -> neighbourhood-consistency
pruning -> iterative propagation to unmatched neighbours.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from .geometry import CalibrationBundle, GeometryError, epipolar_line

N_DIRECTIONS = 32


@dataclass
class NeighborGraph:
    centers: np.ndarray  # (N, 2)
    edges: set  # frozenset of (i, j) tuples, i < j
    neighbors: list  # adjacency lists
    radius: np.ndarray  # per-vertex neighbourhood radius, px

    def two_hop(self, v: int) -> set:
        out = set(self.neighbors[v])
        for u in self.neighbors[v]:
            out.update(self.neighbors[u])
        out.discard(v)
        return out


def build_graph(centers, alpha: float = 0.5) -> NeighborGraph:
    """Delaunay triangulation with per-vertex neighbourhood radii.

    radius[v] = alpha * median length of edges incident to v, after
    discarding edges longer than twice the shortest incident edge (long
    convex-hull edges otherwise make the median unstable between the
    captured and reference triangulations).
    """
    centers = np.asarray(centers, dtype=float)
    if len(centers) < 3:
        raise GeometryError("degenerate triangulation: need >= 3 centers")
    try:
        tri = Delaunay(centers)
    except Exception as exc:
        raise GeometryError(f"degenerate triangulation: {exc}") from exc
    if tri.simplices.size == 0:
        raise GeometryError("degenerate triangulation: all points collinear")

    edges = set()
    for simplex in tri.simplices:
        for a in range(3):
            i, j = int(simplex[a]), int(simplex[(a + 1) % 3])
            edges.add((min(i, j), max(i, j)))
    neighbors = [[] for _ in range(len(centers))]
    for i, j in edges:
        neighbors[i].append(j)
        neighbors[j].append(i)

    radius = np.zeros(len(centers))
    for v in range(len(centers)):
        if neighbors[v]:
            lengths = np.array([np.linalg.norm(centers[v] - centers[u]) for u in neighbors[v]])
            lengths = lengths[lengths <= 2.0 * lengths.min()]
            radius[v] = alpha * float(np.median(lengths))
        else:
            radius[v] = alpha * 10.0
    return NeighborGraph(centers=centers, edges=edges, neighbors=neighbors, radius=radius)


def _bilinear(image: np.ndarray, x: float, y: float) -> np.ndarray:
    h, w = image.shape[:2]
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    fx, fy = x - x0, y - y0
    x0c, x1c = np.clip([x0, x0 + 1], 0, w - 1)
    y0c, y1c = np.clip([y0, y0 + 1], 0, h - 1)
    return (
        image[y0c, x0c] * (1 - fx) * (1 - fy)
        + image[y0c, x1c] * fx * (1 - fy)
        + image[y1c, x0c] * (1 - fx) * fy
        + image[y1c, x1c] * fx * fy
    )


def build_descriptor(image: np.ndarray, center, radius: float) -> np.ndarray:
    """32x3 matrix of boundary colours around a spot.

    Row i holds the bilinearly sampled RGB at angle i * (360/32) degrees on
    the circle of the given radius. Samples outside the image are clamped
    to the border.
    """
    cx, cy = float(center[0]), float(center[1])
    desc = np.zeros((N_DIRECTIONS, 3))
    for i in range(N_DIRECTIONS):
        theta = 2.0 * np.pi * i / N_DIRECTIONS
        desc[i] = _bilinear(image, cx + radius * np.cos(theta), cy + radius * np.sin(theta))
    return desc


@dataclass
class ReferenceDescriptorSet:
    """All 32 circular shifts of one reference spot's descriptor."""

    base: np.ndarray  # (32, 3)
    _stack: np.ndarray | None = field(default=None, repr=False, compare=False)

    def shifted(self, k: int) -> np.ndarray:
        # shifted(k)[i] == base[(i + k) % 32]
        return np.roll(self.base, -k, axis=0)

    def stack(self) -> np.ndarray:
        if self._stack is None:
            idx = (np.arange(N_DIRECTIONS)[None, :] + np.arange(N_DIRECTIONS)[:, None]) % N_DIRECTIONS
            self._stack = self.base[idx]  # (32 shifts, 32 rows, 3)
        return self._stack


def descriptor_distance(captured: np.ndarray, reference_set: ReferenceDescriptorSet):
    """Min over the 32 circular shifts of the normalized Frobenius distance."""
    diffs = reference_set.stack() - captured[None, :, :]
    dists = np.sqrt((diffs**2).sum(axis=(1, 2)) / (N_DIRECTIONS * 3))
    k = int(np.argmin(dists))
    return float(dists[k]), k


# ---------------------------------------------------------------------------
# Match bookkeeping

FLAG_INITIAL = "initial"
FLAG_PROPAGATED = "propagated"
FLAG_PRUNED = "pruned"


@dataclass
class Match:
    captured: int
    reference: int
    distance: float
    flag: str = FLAG_INITIAL


@dataclass
class MatchSet:
    matches: list = field(default_factory=list)
    converged: bool = True
    count_history: list = field(default_factory=list)

    def active(self):
        return [m for m in self.matches if m.flag != FLAG_PRUNED]

    def active_pairs(self):
        return {(m.captured, m.reference) for m in self.active()}

    def captured_to_reference(self):
        return {m.captured: m.reference for m in self.active()}

    def check_one_to_one(self):
        act = self.active()
        caps = [m.captured for m in act]
        refs = [m.reference for m in act]
        if len(set(caps)) != len(caps) or len(set(refs)) != len(refs):
            raise ValueError("MatchSet violates one-to-one invariant")

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["captured_idx", "reference_idx", "distance", "flag"])
            for m in self.matches:
                writer.writerow([m.captured, m.reference, f"{m.distance:.17g}", m.flag])

    @classmethod
    def from_csv(cls, path):
        ms = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                ms.matches.append(
                    Match(int(row["captured_idx"]), int(row["reference_idx"]),
                          float(row["distance"]), row["flag"])
                )
        return ms


@dataclass
class MatchConfig:
    distance_threshold: float | None = None  # None -> auto-calibrated
    epipolar_band_halfwidth: float = 0.75
    max_propagation_rounds: int = 20
    prune_beta: float = 0.5
    # Propagation candidates are already pinned down by the neighbourhood and
    # epipolar constraints, so surface deformation relative to the flat
    # reference is absorbed by a looser distance threshold there.
    propagation_threshold_multiplier: float = 8.0
    # Reject a candidate when the runner-up is closer than this fraction of
    # the base threshold: spots on a shared epipolar line are otherwise
    # indistinguishable when a neighbour dropped out.
    ambiguity_margin: float = 0.6

    def __post_init__(self):
        if self.epipolar_band_halfwidth <= 0 or self.max_propagation_rounds <= 0:
            raise ValueError("MatchConfig fields must be positive")
        if self.distance_threshold is not None and self.distance_threshold <= 0:
            raise ValueError("distance_threshold must be positive")


@dataclass
class ReferenceData:
    """Reference image spots prepared for matching."""

    centers: np.ndarray
    descriptor_sets: list  # ReferenceDescriptorSet per spot
    graph: NeighborGraph
    epilines: np.ndarray  # (N, 3) epipolar line of each spot in the camera image
    _auto_thresholds: dict = field(default_factory=dict, repr=False, compare=False)


def prepare_reference(image, reference_spots, bundle: CalibrationBundle, alpha: float = 0.5) -> ReferenceData:
    centers = np.array([s.center for s in reference_spots])
    graph = build_graph(centers, alpha=alpha)
    sets = [
        ReferenceDescriptorSet(build_descriptor(image, centers[i], graph.radius[i]))
        for i in range(len(centers))
    ]
    lines = np.array([epipolar_line(bundle, s.projector_pixel) for s in reference_spots])
    return ReferenceData(centers=centers, descriptor_sets=sets, graph=graph, epilines=lines)


def auto_threshold(reference: ReferenceData, fraction: float = 0.5) -> float:
    """Threshold below the typical distance between *different* reference spots.

    Self-match distances are identically zero by construction, so the scale
    is set from each spot's nearest non-self descriptor distance instead.
    The result depends only on the reference, so it is cached there.
    """
    if fraction in reference._auto_thresholds:
        return reference._auto_thresholds[fraction]
    # (N, 32, 32, 3): every spot's full shift stack, compared all-vs-all.
    stacks = np.stack([ds.stack() for ds in reference.descriptor_sets])
    bases = np.stack([ds.base for ds in reference.descriptor_sets])
    n = len(bases)
    nearest = np.full(n, np.inf)
    for j in range(n):
        diffs = stacks[j][None, :, :, :] - bases[:, None, :, :]
        dists = np.sqrt((diffs**2).sum(axis=(2, 3)) / (N_DIRECTIONS * 3)).min(axis=1)
        dists[j] = np.inf
        nearest = np.minimum(nearest, dists)
    value = fraction * float(np.median(nearest))
    reference._auto_thresholds[fraction] = value
    return value


def _line_distances(centers: np.ndarray, lines: np.ndarray) -> np.ndarray:
    """(n_captured, n_reference) point-to-epipolar-line distances."""
    return np.abs(
        centers[:, 0][:, None] * lines[:, 0][None, :]
        + centers[:, 1][:, None] * lines[:, 1][None, :]
        + lines[:, 2][None, :]
    )


def _resolve_conflicts(candidates, flag):
    """Greedy one-to-one assignment, smaller distance wins. candidates:
    list of (distance, captured, reference)."""
    out = []
    used_cap, used_ref = set(), set()
    for dist, cap, ref in sorted(candidates):
        if cap in used_cap or ref in used_ref:
            continue
        used_cap.add(cap)
        used_ref.add(ref)
        out.append(Match(cap, ref, dist, flag))
    return out


def _pick_best(scored, threshold, margin):
    """Best (distance, j) under the threshold, unless the runner-up is too close."""
    if not scored:
        return None
    scored = sorted(scored)
    if scored[0][0] > threshold:
        return None
    if len(scored) > 1 and scored[1][0] - scored[0][0] < margin:
        return None
    return scored[0]


def initial_match(
    captured_centers,
    captured_descriptors,
    reference: ReferenceData,
    config: MatchConfig,
) -> MatchSet:
    """Epipolar-constrained closest-descriptor matching, one-to-one."""
    captured_centers = np.asarray(captured_centers, dtype=float)
    threshold = config.distance_threshold
    if threshold is None:
        threshold = auto_threshold(reference)
    margin = config.ambiguity_margin * threshold

    dists_to_lines = _line_distances(captured_centers, reference.epilines)
    candidates = []
    for i in range(len(captured_centers)):
        in_band = np.nonzero(dists_to_lines[i] <= config.epipolar_band_halfwidth)[0]
        scored = [
            (descriptor_distance(captured_descriptors[i], reference.descriptor_sets[j])[0], int(j))
            for j in in_band
        ]
        best = _pick_best(scored, threshold, margin)
        if best is not None:
            candidates.append((best[0], i, best[1]))
    ms = MatchSet(matches=_resolve_conflicts(candidates, FLAG_INITIAL))
    ms.check_one_to_one()
    return ms


def prune(matches: MatchSet, captured_graph: NeighborGraph, reference_graph: NeighborGraph,
          beta: float = 0.5) -> MatchSet:
    """Remove matches inconsistent with their matched Delaunay neighbours.

    A match (i -> j) survives only if at least beta of i's matched captured
    neighbours map to spots within two hops of j in the reference graph.
    Matches with no matched neighbours are kept.
    """
    cap_to_ref = matches.captured_to_reference()
    to_prune = set()
    for m in matches.active():
        matched_nb = [u for u in captured_graph.neighbors[m.captured] if u in cap_to_ref]
        if not matched_nb:
            continue
        ref_hood = reference_graph.two_hop(m.reference)
        ok = sum(1 for u in matched_nb if cap_to_ref[u] in ref_hood)
        if ok < beta * len(matched_nb):
            to_prune.add((m.captured, m.reference))
    for m in matches.matches:
        if (m.captured, m.reference) in to_prune and m.flag != FLAG_PRUNED:
            m.flag = FLAG_PRUNED
    matches.check_one_to_one()
    return matches


def propagate(
    matches: MatchSet,
    captured_centers,
    captured_descriptors,
    captured_graph: NeighborGraph,
    reference: ReferenceData,
    config: MatchConfig,
) -> MatchSet:
    """Grow the match set through the Delaunay graphs until it stabilizes.

    Each round offers every unmatched captured spot adjacent to a match the
    reference neighbours (two hops) of that match's counterpart, subject to
    the epipolar band and distance threshold; the round ends with a prune.
    """
    captured_centers = np.asarray(captured_centers, dtype=float)
    base_threshold = config.distance_threshold
    if base_threshold is None:
        base_threshold = auto_threshold(reference)
    threshold = base_threshold * config.propagation_threshold_multiplier
    margin = config.ambiguity_margin * base_threshold
    dists_to_lines = _line_distances(captured_centers, reference.epilines)

    matches.count_history = [len(matches.active())]
    matches.converged = False
    for _ in range(config.max_propagation_rounds):
        cap_to_ref = matches.captured_to_reference()
        matched_refs = set(cap_to_ref.values())

        candidates = []
        for i in range(len(captured_centers)):
            if i in cap_to_ref:
                continue
            # Reference candidates: 2-hop neighbourhoods of matched neighbours.
            cand_refs = set()
            for u in captured_graph.neighbors[i]:
                if u in cap_to_ref:
                    cand_refs.update(reference.graph.two_hop(cap_to_ref[u]))
                    cand_refs.add(cap_to_ref[u])
            cand_refs -= matched_refs
            scored = [
                (descriptor_distance(captured_descriptors[i], reference.descriptor_sets[j])[0], j)
                for j in cand_refs
                if dists_to_lines[i, j] <= config.epipolar_band_halfwidth
            ]
            best = _pick_best(scored, threshold, margin)
            if best is not None:
                candidates.append((best[0], i, best[1]))

        for m in _resolve_conflicts(candidates, FLAG_PROPAGATED):
            matches.matches.append(m)
        matches.check_one_to_one()
        prune(matches, captured_graph, reference.graph, beta=config.prune_beta)

        count = len(matches.active())
        matches.count_history.append(count)
        if count == matches.count_history[-2]:
            matches.converged = True
            break
    return matches


# ---------------------------------------------------------------------------
# Evaluation (Table-1 style)


def truth_correspondences(detected_centers, frame, tolerance_px: float = 2.0):
    """Assign each detection its ground-truth pattern index, if any.

    Returns (mapping detection_idx -> pattern idx, annotated count) where
    annotated counts the visible ground-truth spots.
    """
    visible = frame.visible_truth()
    annotated = len(visible)
    mapping = {}
    if annotated == 0:
        return mapping, 0
    truth_centers = np.array([t.cam_center for t in visible])
    truth_idx = [t.index for t in visible]
    for i, c in enumerate(np.asarray(detected_centers, dtype=float)):
        d = np.linalg.norm(truth_centers - c, axis=1)
        k = int(np.argmin(d))
        if d[k] <= tolerance_px:
            mapping[i] = truth_idx[k]
    return mapping, annotated


def evaluate_matching(predicted: MatchSet, truth_map: dict, annotated: int):
    """Sensitivity/precision against ground-truth correspondences.

    Returns dict with annotated, true_positive, predicted, sensitivity,
    precision, and a 'degenerate' flag when a ratio is undefined (reported
    as 0.0).
    """
    active = predicted.active()
    n_pred = len(active)
    tp = sum(1 for m in active if truth_map.get(m.captured) == m.reference)
    degenerate = n_pred == 0 or annotated == 0
    sensitivity = tp / annotated if annotated > 0 else 0.0
    precision = tp / n_pred if n_pred > 0 else 0.0
    return {
        "annotated": annotated,
        "true_positive": tp,
        "predicted": n_pred,
        "sensitivity": sensitivity,
        "precision": precision,
        "degenerate": degenerate,
    }


def evaluation_report_json(rows) -> str:
    """Aggregate per-frame evaluation dicts into a Table-1 style report."""
    sens = np.array([r["sensitivity"] for r in rows])
    prec = np.array([r["precision"] for r in rows])
    ann = np.array([r["annotated"] for r in rows], dtype=float)
    tp = np.array([r["true_positive"] for r in rows], dtype=float)
    doc = {
        "frames": len(rows),
        "annotated_matches": {"mean": ann.mean(), "sd": ann.std(ddof=1) if len(rows) > 1 else 0.0},
        "true_positive": {"mean": tp.mean(), "sd": tp.std(ddof=1) if len(rows) > 1 else 0.0},
        "sensitivity": {"mean": sens.mean(), "sd": sens.std(ddof=1) if len(rows) > 1 else 0.0},
        "precision": {"mean": prec.mean(), "sd": prec.std(ddof=1) if len(rows) > 1 else 0.0},
        "per_frame": rows,
    }
    return json.dumps(doc, indent=2)
