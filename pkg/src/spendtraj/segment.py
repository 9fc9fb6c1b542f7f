"""Micro-segmentation of hidden-state trajectories.

Smoothness (mean turning angle), pairwise 2-D projections, the dominance-prefix
segment tree, silhouette separation with permutation baselines, prefix
stability of nearest-centroid assignments, and SVG emission.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial.distance import cdist

from ._io import atomic_write_text
from .errors import MetricError, SchemaError
from .personality import TRAIT_LETTERS, TRAITS

PAIR_AXES = ((0, 1), (0, 2), (1, 2))
# one colour per trait, trait order O, C, E, A, N
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd")
MAX_PLOT_TRAJECTORIES = 10_000
_EPS_SEGMENT = 1e-12


@dataclass(frozen=True, eq=False)
class Trajectory:
    customer_id: str
    points: np.ndarray  # (T, h)
    personality: Optional[np.ndarray] = None
    dominance: Optional[tuple] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise SchemaError(f"trajectory needs T >= 2 points of equal length, got {pts.shape}")
        object.__setattr__(self, "points", pts)

    def to_dict(self) -> dict:
        return {
            "customer_id": self.customer_id,
            "states": self.points.tolist(),
            "personality": None if self.personality is None else np.asarray(self.personality).tolist(),
            "dominance": None if self.dominance is None else [int(i) for i in self.dominance],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        dom = d.get("dominance")
        pers = d.get("personality")
        return cls(
            str(d["customer_id"]),
            np.asarray(d["states"], dtype=np.float64),
            None if pers is None else np.asarray(pers, dtype=np.float64),
            None if dom is None else tuple(int(i) for i in dom),
        )


def build_trajectories(customer_ids, states, personality) -> list:
    """One :class:`Trajectory` per customer, ranked by the given 5-trait personality."""
    states = np.asarray(states, dtype=np.float64)
    pers = np.asarray(personality, dtype=np.float64)
    ranks = np.argsort(-np.abs(pers), axis=-1, kind="stable")
    return [
        Trajectory(cid, states[k], pers[k], tuple(int(i) for i in ranks[k]))
        for k, cid in enumerate(customer_ids)
    ]


def save_trajectories(trajectories, path):
    text = "\n".join(json.dumps(t.to_dict()) for t in trajectories) + "\n"
    return atomic_write_text(path, text)


def load_trajectories(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Trajectory.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{path}: line {lineno}: bad trajectory record ({exc})") from exc
    return out


def stack_points(trajectories) -> np.ndarray:
    return np.stack([t.points for t in trajectories])


# ---------------------------------------------------------------------------
# smoothness


class TurningAngle(NamedTuple):
    mean: float
    degenerate: bool


def turning_angles(points) -> np.ndarray:
    """Angles between consecutive non-degenerate difference vectors."""
    pts = np.asarray(points, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    norms = np.linalg.norm(seg, axis=1)
    keep = norms >= _EPS_SEGMENT
    seg, norms = seg[keep], norms[keep]
    if len(seg) < 2:
        return np.zeros(0)
    unit = seg / norms[:, None]
    # 2 atan2(|u - v|, |u + v|) stays accurate near 0 and pi, unlike arccos of the dot product
    diff = np.linalg.norm(unit[1:] - unit[:-1], axis=1)
    total = np.linalg.norm(unit[1:] + unit[:-1], axis=1)
    return 2.0 * np.arctan2(diff, total)


def mean_turning_angle(points) -> TurningAngle:
    """Mean change of direction along a trajectory, in radians."""
    pts = points.points if isinstance(points, Trajectory) else np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise MetricError(f"turning angle needs at least 3 points, got {pts.shape[0] if pts.ndim else 0}")
    angles = turning_angles(pts)
    if angles.size == 0:
        return TurningAngle(0.0, True)
    return TurningAngle(float(angles.mean()), False)


def mean_turning_angles(stacked) -> np.ndarray:
    """Per-trajectory mean turning angle for an ``(n, T, h)`` stack."""
    return np.array([mean_turning_angle(p).mean for p in np.asarray(stacked)])


def principal_projection(rows, k: int = 3):
    """Mean and top-``k`` principal directions ``(k, d)`` of a set of row vectors."""
    rows = np.asarray(rows, dtype=np.float64)
    mean = rows.mean(axis=0)
    _, _, vt = np.linalg.svd(rows - mean, full_matrices=False)
    return mean, vt[:k]


def project_raw_sequences(sequences, k: int = 3) -> np.ndarray:
    """Project ``(n, T, m)`` input sequences onto the top-``k`` principal directions of all rows."""
    seq = np.asarray(sequences, dtype=np.float64)
    n, T, m = seq.shape
    mean, comps = principal_projection(seq.reshape(n * T, m), k)
    return (seq - mean) @ comps.T


def project_pairs(points) -> list:
    """The three coordinate-pair projections (0,1), (0,2), (1,2) of a 3-D trajectory."""
    pts = points.points if isinstance(points, Trajectory) else np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise MetricError(f"pairwise projection needs a 3-D state space, got {pts.shape[-1]}-D")
    return [pts[..., list(axes)].copy() for axes in PAIR_AXES]


# ---------------------------------------------------------------------------
# segment tree


@dataclass
class SegmentNode:
    trait: Optional[int]
    members: list
    children: dict = field(default_factory=dict)

    def leaves(self):
        if not self.children:
            yield self
        for child in self.children.values():
            yield from child.leaves()

    def to_dict(self) -> dict:
        return {
            "trait": None if self.trait is None else TRAITS[self.trait],
            "members": list(self.members),
            "children": [c.to_dict() for _, c in sorted(self.children.items())],
        }


def build_segment_tree(customer_ids, rankings, depth: int = 2) -> SegmentNode:
    """Nest customers by the first ``depth`` entries of their dominance rankings."""
    if not 1 <= depth <= 4:
        raise MetricError(f"segment depth must lie in 1..4, got {depth}")
    ids = list(customer_ids)
    if rankings is None or len(rankings) != len(ids) or any(r is None for r in rankings):
        raise SchemaError("every customer needs a dominance ranking")
    root = SegmentNode(None, ids)
    for cid, rank in zip(ids, rankings):
        node = root
        for level in range(depth):
            key = int(rank[level])
            if key not in node.children:
                node.children[key] = SegmentNode(key, [])
            node = node.children[key]
            node.members.append(cid)
    return root


def tree_from_trajectories(trajectories, depth: int = 2) -> SegmentNode:
    return build_segment_tree([t.customer_id for t in trajectories],
                              [t.dominance for t in trajectories], depth)


# ---------------------------------------------------------------------------
# separation


def _silhouette_from_distances(dist, labels) -> float:
    labels = np.asarray(labels)
    uniq, codes = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise MetricError("separation needs at least 2 distinct labels")
    n = len(labels)
    onehot = np.zeros((n, len(uniq)))
    onehot[np.arange(n), codes] = 1.0
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot  # total distance from each point to each cluster
    own = sizes[codes]
    a = sums[np.arange(n), codes] / np.maximum(own - 1, 1)
    mean_to = sums / sizes
    mean_to[np.arange(n), codes] = np.inf
    b = mean_to.min(axis=1)
    s = (b - a) / np.maximum(a, b)
    s[own == 1] = 0.0
    s[~np.isfinite(s)] = 0.0
    return float(s.mean())


def trajectory_distances(stacked) -> np.ndarray:
    flat = np.asarray(stacked, dtype=np.float64)
    flat = flat.reshape(len(flat), -1)
    return cdist(flat, flat)


def separation_score(stacked, labels) -> float:
    """Mean silhouette of a labelling under Euclidean distance on flattened trajectories."""
    return _silhouette_from_distances(trajectory_distances(stacked), labels)


def permutation_baseline(stacked, labels, n_perm: int = 200, seed: int = 0) -> np.ndarray:
    """Silhouettes of ``n_perm`` random relabellings with the same label counts."""
    dist = trajectory_distances(stacked)
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    return np.array([_silhouette_from_distances(dist, rng.permutation(labels)) for _ in range(n_perm)])


def pole_labels(personality, rankings, level: int = 0) -> np.ndarray:
    """Signed trait label ``2 * trait + (score < 0)`` of each customer's ``level``-th ranked trait.

    A strongly negative trait is a pole of its own (low extraversion reads as
    introversion), so the two signs of a trait are kept apart.
    """
    pers = np.asarray(personality, dtype=np.float64)
    rank = np.asarray(rankings)
    trait = rank[:, level]
    value = pers[np.arange(len(pers)), trait]
    return 2 * trait + (value < 0).astype(int)


def pole_name(label: int) -> str:
    return f"{'-' if label % 2 else '+'}{TRAIT_LETTERS[label // 2]}"


@dataclass
class LevelScore:
    labels: str  # which labelling was scored
    members: int
    silhouette: float
    baseline_p975: float
    baseline_mean: float

    @property
    def passes(self) -> bool:
        return self.silhouette > 0 and self.silhouette > self.baseline_p975


def _level_score(name, stacked, labels, n_perm, seed) -> Optional[LevelScore]:
    if len(np.unique(labels)) < 2:
        return None
    sil = separation_score(stacked, labels)
    base = permutation_baseline(stacked, labels, n_perm, seed)
    return LevelScore(name, len(labels), sil, float(np.percentile(base, 97.5)), float(base.mean()))


def hierarchical_separation(stacked, personality, rankings, n_perm: int = 200, seed: int = 0) -> dict:
    """Silhouettes of the dominant-pole labelling and, inside the largest
    dominant segment, of the second-pole labelling, each with its permutation
    baseline. Unsigned trait labellings are scored alongside for reference.
    """
    stacked = np.asarray(stacked, dtype=np.float64)
    rank = np.asarray(rankings)
    first = pole_labels(personality, rank, 0)
    values, counts = np.unique(first, return_counts=True)
    largest = int(values[np.argmax(counts)])
    inside = first == largest
    second = pole_labels(personality, rank, 1)[inside]
    out = {
        "level1": _level_score("dominant pole", stacked, first, n_perm, seed),
        "level2": _level_score("second pole", stacked[inside], second, n_perm, seed + 1),
        "largest_segment": pole_name(largest),
    }
    plain_inside = rank[:, 0] == np.bincount(rank[:, 0]).argmax()
    out["level1_unsigned"] = _level_score("dominant trait", stacked, rank[:, 0], n_perm, seed)
    out["level2_unsigned"] = _level_score(
        "second trait", stacked[plain_inside], rank[plain_inside, 1], n_perm, seed + 1
    )
    return out


# ---------------------------------------------------------------------------
# temporal stability


def prefix_assignments(series, labels, t_from: int = 3) -> np.ndarray:
    """Nearest-centroid label of every customer using prefixes ``[0, t)`` for t = t_from..T.

    Centroids are the per-label means of the flattened prefixes. Returns an
    ``(n, T - t_from + 1)`` array of assigned labels.
    """
    s = np.asarray(series, dtype=np.float64)
    labels = np.asarray(labels)
    n, T = s.shape[:2]
    if not 1 <= t_from <= T:
        raise MetricError(f"prefix start {t_from} outside 1..{T}")
    uniq = np.unique(labels)
    out = np.empty((n, T - t_from + 1), dtype=labels.dtype)
    for k, t in enumerate(range(t_from, T + 1)):
        flat = s[:, :t].reshape(n, -1)
        centroids = np.stack([flat[labels == u].mean(axis=0) for u in uniq])
        out[:, k] = uniq[np.argmin(cdist(flat, centroids), axis=1)]
    return out


def prefix_stability(series, labels, t_from: int = 3) -> float:
    """Fraction of customers whose prefix nearest-centroid assignment never changes."""
    a = prefix_assignments(series, labels, t_from)
    return float(np.mean(np.all(a == a[:, :1], axis=1)))


# ---------------------------------------------------------------------------
# SVG


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(projections, labels, title: str = "") -> str:
    """Three side-by-side panels of 2-D trajectory projections, one polyline each.

    ``projections[i]`` holds the three ``(T, 2)`` projections of trajectory i;
    ``labels[i]`` is a trait index used for colour.
    """
    projections = list(projections)
    labels = [int(v) for v in labels]
    if len(projections) != len(labels):
        raise SchemaError("one label per trajectory is required")
    if len(projections) > MAX_PLOT_TRAJECTORIES:
        raise MetricError(f"refusing to plot more than {MAX_PLOT_TRAJECTORIES} trajectories")
    panel, pad, gap, top = 300.0, 30.0, 20.0, 40.0
    width = 3 * panel + 2 * gap + 2 * pad
    height = top + panel + 60.0
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" height="{_fmt(height)}" '
        f'viewBox="0 0 {_fmt(width)} {_fmt(height)}">',
        '<rect x="0" y="0" width="100%" height="100%" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{_fmt(pad)}" y="20" font-family="sans-serif" font-size="14">{_escape(title)}</text>')
    for p, (i, j) in enumerate(PAIR_AXES):
        x0 = pad + p * (panel + gap)
        pts = [proj[p] for proj in projections]
        if pts:
            allpts = np.concatenate(pts)
            lo, hi = allpts.min(axis=0), allpts.max(axis=0)
        else:
            lo, hi = np.zeros(2), np.ones(2)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        parts.append(f'<g id="panel-{i}{j}">')
        parts.append(
            f'<rect x="{_fmt(x0)}" y="{_fmt(top)}" width="{_fmt(panel)}" height="{_fmt(panel)}" '
            'fill="none" stroke="#444" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_fmt(x0 + panel / 2)}" y="{_fmt(top + panel + 18)}" font-family="sans-serif" '
            f'font-size="12" text-anchor="middle">node {i} vs node {j}</text>'
        )
        for traj, lab in zip(pts, labels):
            u = (traj - lo) / span
            xs = x0 + 5 + u[:, 0] * (panel - 10)
            ys = top + panel - 5 - u[:, 1] * (panel - 10)
            coords = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(xs, ys))
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{PALETTE[lab % 5]}" '
                'stroke-width="1" stroke-opacity="0.6"/>'
            )
        parts.append("</g>")
    ly = top + panel + 40
    parts.append('<g id="legend">')
    for k, letter in enumerate(TRAIT_LETTERS):
        lx = pad + k * 150
        parts.append(f'<rect x="{_fmt(lx)}" y="{_fmt(ly - 10)}" width="12" height="12" fill="{PALETTE[k]}"/>')
        parts.append(
            f'<text x="{_fmt(lx + 18)}" y="{_fmt(ly)}" font-family="sans-serif" font-size="12">'
            f"{letter}: {TRAITS[k]}</text>"
        )
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_plot(projections, labels, path, title: str = ""):
    return atomic_write_text(path, render_svg(projections, labels, title))
