import math
import xml.etree.ElementTree as ET
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation
from sklearn.metrics import silhouette_score

from oracles import angle_between, naive_silhouette
from spendtraj import segment
from spendtraj.errors import MetricError, SchemaError
from spendtraj.segment import Trajectory

SVG_NS = "{http://www.w3.org/2000/svg}"


# --- turning angle ------------------------------------------------------------


def test_straight_line_and_zigzag():
    assert segment.mean_turning_angle(np.array([[0, 0], [1, 1], [2, 2], [3, 3.0]])).mean == 0.0
    zig = segment.mean_turning_angle(np.array([[0, 0], [1, 0], [1, 1], [2, 1.0]]))
    assert abs(zig.mean - math.pi / 2) < 1e-12 and not zig.degenerate


def test_turning_angles_match_arccos_oracle(rng):
    pts = rng.normal(size=(6, 3))
    got = segment.turning_angles(pts)
    diffs = [pts[t + 1] - pts[t] for t in range(5)]
    expected = [angle_between(diffs[t], diffs[t + 1]) for t in range(4)]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)


def test_degenerate_and_short_trajectories():
    flat = segment.mean_turning_angle(np.zeros((5, 3)))
    assert flat == (0.0, True)
    repeated = np.array([[0, 0], [1, 0], [1, 0], [2, 0.0]])
    assert segment.mean_turning_angle(repeated).mean == 0.0
    with pytest.raises(MetricError):
        segment.mean_turning_angle(np.zeros((2, 3)))


@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_turning_angle_similarity_invariance(seed, scale):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(6, 3))
    rot = Rotation.random(random_state=seed).as_matrix()
    moved = scale * pts @ rot.T + r.normal(size=3) * 10
    a = segment.mean_turning_angle(pts).mean
    b = segment.mean_turning_angle(moved).mean
    assert abs(a - b) < 1e-9


# --- projections ---------------------------------------------------------------


def test_project_pairs():
    proj = segment.project_pairs(np.array([[1.0, 2.0, 3.0]]))
    assert [p.tolist() for p in proj] == [[[1, 2]], [[1, 3]], [[2, 3]]]
    zero = segment.project_pairs(np.zeros((6, 3)))
    assert all(p.shape == (6, 2) and np.all(p == 0) for p in zero)
    pts = np.arange(18.0).reshape(6, 3)
    assert np.array_equal(segment.project_pairs(pts)[2][:, 0], pts[:, 1])
    with pytest.raises(MetricError):
        segment.project_pairs(np.zeros((6, 4)))


def test_raw_pca_projection_shape(small_cube):
    proj = segment.project_raw_sequences(small_cube.spend, 3)
    assert proj.shape == (small_cube.n, 6, 3)
    flat = proj.reshape(-1, 3)
    assert np.all(np.abs(flat.mean(axis=0)) < 1e-12)
    var = flat.var(axis=0)
    assert var[0] >= var[1] >= var[2]


# --- segment tree -------------------------------------------------------------


def test_tree_example():
    O, C, E, A, N = range(5)
    ranks = [(O, E, C, A, N), (O, C, E, A, N), (E, A, O, C, N)]
    tree = segment.build_segment_tree(["x", "y", "z"], ranks, depth=2)
    doc = tree.to_dict()
    assert doc["trait"] is None and doc["members"] == ["x", "y", "z"]
    by_trait = {c["trait"]: c for c in doc["children"]}
    assert set(by_trait) == {"openness", "extraversion"}
    o_children = {c["trait"]: c["members"] for c in by_trait["openness"]["children"]}
    assert o_children == {"extraversion": ["x"], "conscientiousness": ["y"]}
    assert [c["members"] for c in by_trait["extraversion"]["children"]] == [["z"]]


def test_tree_depth_one_partition(rng):
    ranks = [tuple(rng.permutation(5)) for _ in range(50)]
    tree = segment.build_segment_tree([str(k) for k in range(50)], ranks, depth=1)
    assert len(tree.children) <= 5
    assert sum(len(c.members) for c in tree.children.values()) == 50


def test_tree_matches_group_by_oracle(rng):
    ids = [f"c{k}" for k in range(500)]
    ranks = [tuple(int(i) for i in np.argsort(-np.abs(rng.normal(size=5)), kind="stable")) for _ in ids]
    tree = segment.build_segment_tree(ids, ranks, depth=3)
    oracle = defaultdict(list)
    for cid, r in zip(ids, ranks):
        oracle[r[:3]].append(cid)

    def walk(node, prefix, out):
        if not node.children:
            out[prefix] = node.members
        for key, child in node.children.items():
            walk(child, prefix + (key,), out)
        return out

    leaves = walk(tree, (), {})
    assert leaves == dict(oracle)
    members = [m for leaf in tree.leaves() for m in leaf.members]
    assert sorted(members) == sorted(ids)


def test_tree_errors():
    with pytest.raises(SchemaError):
        segment.build_segment_tree(["a", "b"], [(0, 1, 2, 3, 4), None])
    with pytest.raises(MetricError):
        segment.build_segment_tree(["a"], [(0, 1, 2, 3, 4)], depth=5)


# --- silhouette -----------------------------------------------------------------


def test_silhouette_well_separated():
    stacked = np.concatenate([np.zeros((5, 6, 3)), np.full((5, 6, 3), 10.0)])
    assert segment.separation_score(stacked, [0] * 5 + [1] * 5) > 0.99


def test_silhouette_random_labels_near_zero(rng):
    cloud = rng.normal(size=(200, 6, 3))
    assert abs(segment.separation_score(cloud, rng.integers(0, 3, 200))) < 0.1


def test_silhouette_hand_computed():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [4.0, 0.0], [4.0, 3.0]])
    labels = [0, 0, 1, 1]
    # point 0: a = 1, b = mean(4, 5) = 4.5 -> 3.5/4.5
    # point 1: a = 1, b = mean(sqrt(17), sqrt(20)) ; point 2: a = 3, b = mean(4, sqrt(17))
    # point 3: a = 3, b = mean(5, sqrt(20))
    s17, s20 = math.sqrt(17), math.sqrt(20)
    parts = [
        (4.5 - 1) / 4.5,
        ((s17 + s20) / 2 - 1) / ((s17 + s20) / 2),
        ((4 + s17) / 2 - 3) / ((4 + s17) / 2),
        ((5 + s20) / 2 - 3) / ((5 + s20) / 2),
    ]
    got = segment.separation_score(pts[:, None, :], labels)
    assert abs(got - sum(parts) / 4) < 1e-9


def test_silhouette_matches_reference_implementations(rng):
    stacked = rng.normal(size=(60, 6, 3))
    labels = rng.integers(0, 4, 60)
    labels[0] = 9  # a singleton cluster scores 0 in both conventions
    flat = stacked.reshape(60, -1)
    got = segment.separation_score(stacked, labels)
    assert abs(got - silhouette_score(flat, labels)) < 1e-12
    assert abs(got - naive_silhouette(flat.tolist(), labels.tolist())) < 1e-12


@given(st.integers(0, 1000))
def test_silhouette_label_name_invariance(seed):
    r = np.random.default_rng(seed)
    stacked = r.normal(size=(30, 4, 2))
    labels = r.integers(0, 3, 30)
    if len(set(labels)) < 2:
        return
    renamed = np.array(["zz", "aa", "mm"])[labels]
    assert segment.separation_score(stacked, labels) == pytest.approx(
        segment.separation_score(stacked, renamed), abs=1e-12
    )


def test_single_label_is_error():
    with pytest.raises(MetricError):
        segment.separation_score(np.zeros((4, 2, 2)), [1, 1, 1, 1])


def test_permutation_baseline_preserves_counts(rng):
    stacked = rng.normal(size=(40, 3, 2))
    labels = np.repeat([0, 1, 2, 3], 10)
    base = segment.permutation_baseline(stacked, labels, n_perm=20, seed=1)
    assert base.shape == (20,)
    assert np.array_equal(base, segment.permutation_baseline(stacked, labels, n_perm=20, seed=1))


def test_pole_labels():
    pers = np.array([[0.1, -2.0, 0.5, 0.0, 0.0], [1.5, 0.0, -0.7, 0.0, 0.0]])
    ranks = np.argsort(-np.abs(pers), axis=1, kind="stable")
    assert segment.pole_labels(pers, ranks, 0).tolist() == [3, 0]
    assert segment.pole_labels(pers, ranks, 1).tolist() == [4, 5]
    assert segment.pole_name(3) == "-C" and segment.pole_name(0) == "+O"


def test_hierarchical_separation_on_planted_clusters(rng):
    centers = rng.normal(size=(10, 6, 3)) * 5
    pers = np.zeros((200, 5))
    stacked = np.empty((200, 6, 3))
    for k in range(200):
        trait, sign, second = k % 2, 1 if (k // 2) % 2 == 0 else -1, 2 + (k // 4) % 2
        pers[k, trait] = 3.0 * sign
        pers[k, second] = 1.0
        key = 4 * trait + 2 * (sign < 0) + (second - 2)
        stacked[k] = centers[key] + rng.normal(scale=0.3, size=(6, 3))
    ranks = np.argsort(-np.abs(pers), axis=1, kind="stable")
    out = segment.hierarchical_separation(stacked, pers, ranks, n_perm=30, seed=0)
    assert out["level1"].passes and out["level2"].passes
    assert out["level2"].members == 50


# --- prefix stability -------------------------------------------------------------


def test_prefix_stability_constant_series():
    series = np.repeat(np.array([[[0.0, 0.0]], [[10.0, 10.0]]]), 6, axis=1)
    series = np.concatenate([series, series + 0.1])
    labels = np.array([0, 1, 0, 1])
    assert segment.prefix_stability(series, labels) == 1.0
    assert segment.prefix_assignments(series, labels).shape == (4, 4)


def test_prefix_stability_detects_switch():
    series = np.zeros((20, 6, 1))
    series[10:] = 10.0
    series[0, 3:] = 20.0  # customer 0 drifts past the other group late in the window
    labels = np.repeat([0, 1], 10)
    a = segment.prefix_assignments(series, labels)
    # hand-checked squared distances: t=4 -> 361 vs 400, t=5 -> 722 vs 500
    assert a[0].tolist() == [0, 0, 1, 1]
    assert segment.prefix_stability(series, labels) == 0.95


# --- trajectories I/O and SVG ---------------------------------------------------------


def test_trajectory_round_trip(tmp_path, rng):
    states = rng.normal(size=(3, 6, 3))
    pers = rng.normal(size=(3, 5))
    trajs = segment.build_trajectories(["a", "b", "c"], states, pers)
    assert trajs[0].dominance == tuple(int(i) for i in np.argsort(-np.abs(pers[0]), kind="stable"))
    segment.save_trajectories(trajs, tmp_path / "t.jsonl")
    back = segment.load_trajectories(tmp_path / "t.jsonl")
    assert [t.customer_id for t in back] == ["a", "b", "c"]
    assert np.array_equal(back[1].points, states[1]) and back[1].dominance == trajs[1].dominance
    with pytest.raises(SchemaError):
        Trajectory("x", np.zeros((1, 3)))
    (tmp_path / "bad.jsonl").write_text('{"customer_id": "x"}\n')
    with pytest.raises(SchemaError, match="line 1"):
        segment.load_trajectories(tmp_path / "bad.jsonl")


def _polylines(svg_text):
    root = ET.fromstring(svg_text.encode())
    return root.findall(f".//{SVG_NS}polyline")


def test_svg_single_trajectory(tmp_path):
    proj = [segment.project_pairs(np.random.default_rng(0).normal(size=(6, 3)))]
    segment.emit_plot(proj, [2], tmp_path / "one.svg")
    text = (tmp_path / "one.svg").read_text()
    assert len(_polylines(text)) == 3
    assert 'id="legend"' in text


def test_svg_many_and_deterministic(tmp_path, rng):
    trajs = rng.normal(size=(100, 6, 3))
    proj = [segment.project_pairs(t) for t in trajs]
    labels = rng.integers(0, 5, 100)
    segment.emit_plot(proj, labels, tmp_path / "a.svg")
    segment.emit_plot(proj, labels, tmp_path / "b.svg")
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes()
    lines = _polylines(a.decode())
    assert len(lines) == 300
    colours = {pl.get("stroke") for pl in lines}
    assert colours <= set(segment.PALETTE)


def test_svg_limits(tmp_path):
    with pytest.raises(SchemaError):
        segment.render_svg([segment.project_pairs(np.zeros((3, 3)))], [])
    too_many = [segment.project_pairs(np.zeros((2, 3)))] * (segment.MAX_PLOT_TRAJECTORIES + 1)
    with pytest.raises(MetricError):
        segment.render_svg(too_many, [0] * len(too_many))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        segment.emit_plot([segment.project_pairs(np.zeros((3, 3)))], [0], blocker / "out.svg")
