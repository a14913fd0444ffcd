import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionlift.errors import DataError, MalformedRecordError, NonFiniteError, RangeError, ShapeError
from motionlift.skeleton import (INPUT2D, TARGET3D, JointTopology, PoseSequence, build_spatial_adjacency,
                                 build_temporal_adjacency, default_h36m_topology, generate_synthetic_dataset,
                                 load_topology, read_dataset, write_dataset)

from conftest import path_topology


def brute_norm(a_tilde):
    n = len(a_tilde)
    out = np.zeros((n, n))
    deg = [sum(a_tilde[i]) for i in range(n)]
    for i in range(n):
        for j in range(n):
            out[i, j] = a_tilde[i][j] / math.sqrt(deg[i] * deg[j])
    return out


def bfs_reach(n, edges, root):
    adj = {i: set() for i in range(n)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen, frontier = {root}, [root]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u] - seen:
                seen.add(v)
                nxt.append(v)
        frontier = nxt
    return seen


class TestTopology:
    def test_default_is_17_joint_tree(self):
        topo = default_h36m_topology()
        assert topo.joint_count == 17 and len(topo.edges) == 16 and topo.root == 0
        assert (2, 3) in topo.edges
        assert bfs_reach(17, topo.edges, 0) == set(range(17))
        assert topo.is_tree()

    @pytest.mark.parametrize("edges", [((0, 3),), ((1, 1),), ((0, 1), (1, 0)), ((-1, 0),)])
    def test_invalid_edges_rejected(self, edges):
        with pytest.raises(DataError):
            JointTopology(3, edges)

    def test_topology_file_round_trip(self, tmp_path):
        topo = path_topology(4)
        p = tmp_path / "topo.json"
        p.write_text(json.dumps(topo.to_dict()))
        assert load_topology(p) == topo


class TestAdjacency:
    def test_default_contains_known_entry(self):
        adj = build_spatial_adjacency(default_h36m_topology())
        assert adj.a_tilde[3, 2] == adj.a_tilde[2, 3] == 1.0

    def test_no_edges_is_identity(self):
        adj = build_spatial_adjacency(JointTopology(2, ()))
        np.testing.assert_array_equal(adj.a_tilde, np.eye(2))
        np.testing.assert_array_equal(adj.a_norm, np.eye(2))

    def test_path_graph_hand_values(self):
        adj = build_spatial_adjacency(path_topology(3))
        assert adj.a_norm[0, 1] == pytest.approx(1 / math.sqrt(6), abs=1e-15)
        assert adj.a_norm[1, 1] == pytest.approx(1 / 3, abs=1e-15)

    def test_temporal_single_frame(self):
        adj = build_temporal_adjacency(1)
        np.testing.assert_array_equal(adj.a_tilde, [[1.0]])
        np.testing.assert_array_equal(adj.a_norm, [[1.0]])

    def test_temporal_three_frames(self):
        adj = build_temporal_adjacency(3)
        nz = {tuple(ix) for ix in np.argwhere(adj.a_tilde != 0)}
        assert nz == {(0, 0), (1, 1), (2, 2), (1, 0), (0, 1), (2, 1), (1, 2)}
        assert adj.a_norm[0, 1] == pytest.approx(1 / math.sqrt(6), abs=1e-15)

    def test_temporal_rejects_zero_frames(self):
        with pytest.raises(ValueError):
            build_temporal_adjacency(0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40))
    def test_temporal_invariants(self, t):
        adj = build_temporal_adjacency(t)
        assert np.count_nonzero(adj.a_tilde) == 3 * t - 2
        np.testing.assert_allclose(adj.a_norm, brute_norm(adj.a_tilde.tolist()), atol=1e-12)
        np.testing.assert_array_equal(adj.a_norm, adj.a_norm.T)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 12), st.data())
    def test_spatial_invariants_random_tree(self, n, data):
        parents = [data.draw(st.integers(0, i - 1)) for i in range(1, n)]
        topo = JointTopology(n, tuple((p, i) for i, p in enumerate(parents, 1)))
        adj = build_spatial_adjacency(topo)
        np.testing.assert_array_equal(adj.a_tilde, adj.a_tilde.T)
        np.testing.assert_array_equal(np.diag(adj.a_tilde), 1.0)
        np.testing.assert_allclose(adj.a_norm, brute_norm(adj.a_tilde.tolist()), atol=1e-12)
        assert adj.a_norm.min() >= 0 and adj.a_norm.max() <= 1


class TestGenerator:
    def test_zero_noise_projection_and_confidence(self):
        for inp, tgt in generate_synthetic_dataset(3, 10, noise_std=0.0, seed=1):
            np.testing.assert_array_equal(inp.data[..., :2], tgt.data[..., :2])
            np.testing.assert_array_equal(inp.data[..., 2], 1.0)

    def test_deterministic(self):
        a = generate_synthetic_dataset(3, 12, noise_std=0.02, seed=5)
        b = generate_synthetic_dataset(3, 12, noise_std=0.02, seed=5)
        for (i1, t1), (i2, t2) in zip(a, b):
            assert np.array_equal(i1.data, i2.data) and np.array_equal(t1.data, t2.data)
            assert i1.action_label == i2.action_label

    def test_displacement_bound(self):
        data = generate_synthetic_dataset(8, 16, seed=0)
        for _, tgt in data:
            step = np.linalg.norm(np.diff(tgt.data, axis=0), axis=-1)
            assert step.max() < 0.2

    @pytest.mark.parametrize("seed", range(4))
    def test_bone_lengths_constant(self, seed):
        topo = default_h36m_topology()
        for _, tgt in generate_synthetic_dataset(4, 30, topo, seed=seed):
            for a, b in topo.edges:
                lengths = np.linalg.norm(tgt.data[:, a] - tgt.data[:, b], axis=-1)
                assert np.abs(lengths - lengths[0]).max() < 1e-9

    def test_labels_and_confidence_range(self):
        data = generate_synthetic_dataset(40, 8, noise_std=0.05, seed=2)
        labels = {inp.action_label for inp, _ in data}
        assert labels <= {0, 1, 2, 3} and len(labels) > 1
        for inp, _ in data:
            c = inp.data[..., 2]
            assert c.min() >= 0 and c.max() <= 1

    def test_custom_topology(self):
        data = generate_synthetic_dataset(2, 6, path_topology(5), seed=0)
        assert data[0][1].data.shape == (6, 5, 3)

    @pytest.mark.parametrize("args", [(0, 8), (2, 1), (2, 8, None, -0.1)])
    def test_preconditions(self, args):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(*args)


class TestDatasetIO:
    def test_round_trip_exact(self, tmp_path):
        data = generate_synthetic_dataset(2, 8, noise_std=0.01, seed=3)
        p = tmp_path / "d.jsonl"
        write_dataset(p, data)
        back = read_dataset(p)
        for (i1, t1), (i2, t2) in zip(data, back):
            assert np.array_equal(i1.data, i2.data) and np.array_equal(t1.data, t2.data)
            assert (i1.name, i1.action_label) == (i2.name, i2.action_label)

    def test_at_least_nine_significant_digits_preserved(self, tmp_path):
        x = np.full((2, 3, 3), 0.123456789123)
        x[..., 2] = 1.0
        p = tmp_path / "d.jsonl"
        write_dataset(p, [(PoseSequence(x, INPUT2D, None, "a"), PoseSequence(x, TARGET3D, None, "a"))])
        assert read_dataset(p)[0][0].data[0, 0, 0] == 0.123456789123

    def _write_record(self, tmp_path, **override):
        rec = {"id": "bad7", "frames": 2, "joints": 3, "pose2d": np.ones((2, 3, 3)).tolist(),
               "pose3d": np.zeros((2, 3, 3)).tolist(), "action": 1}
        rec.update(override)
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps(rec) + "\n")
        return p

    def test_shape_mismatch_names_record(self, tmp_path):
        p = self._write_record(tmp_path, pose2d=np.ones((2, 3, 2)).tolist())
        with pytest.raises(ShapeError, match="bad7"):
            read_dataset(p)

    def test_confidence_out_of_range(self, tmp_path):
        arr = np.ones((2, 3, 3))
        arr[1, 1, 2] = 1.5
        with pytest.raises(RangeError, match="bad7"):
            read_dataset(self._write_record(tmp_path, pose2d=arr.tolist()))

    def test_non_finite_rejected(self, tmp_path):
        p = tmp_path / "nan.jsonl"
        p.write_text('{"id": "n1", "frames": 1, "joints": 1, "pose2d": [[[NaN, 0, 1]]], '
                     '"pose3d": [[[0, 0, 0]]], "action": null}\n')
        with pytest.raises(NonFiniteError, match="n1"):
            read_dataset(p)

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"id": "m1", "frames": 1}\n')
        with pytest.raises(MalformedRecordError, match="m1"):
            read_dataset(p)
        p.write_text("not json\n")
        with pytest.raises(MalformedRecordError):
            read_dataset(p)

    def test_pose_sequence_invariants(self):
        with pytest.raises(NonFiniteError):
            PoseSequence(np.full((1, 1, 3), np.inf))
        with pytest.raises(ShapeError):
            PoseSequence(np.zeros((2, 3)))
