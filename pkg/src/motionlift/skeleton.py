"""Pose-sequence containers, skeleton topology, adjacency construction,
the synthetic motion generator and the JSON-lines dataset format."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DataError,
    MalformedRecordError,
    NonFiniteError,
    RangeError,
    ShapeError,
)

INPUT2D = "input2d"
TARGET3D = "target3d"

NUM_ACTION_BANDS = 4
# cycles per frame; together with the amplitude bounds below this keeps every
# per-frame joint displacement of the default skeleton under 0.13 units
FREQ_MIN, FREQ_MAX = 0.005, 0.04
ANGLE_AMP_RANGE = (0.1, 0.35)
ROOT_AMP_MAX = 0.1


@dataclass(frozen=True)
class JointTopology:
    joint_count: int
    edges: tuple
    root: int = 0

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(tuple(int(v) for v in e) for e in self.edges))
        self.validate()

    def validate(self):
        if self.joint_count < 1:
            raise DataError(f"joint_count must be positive, got {self.joint_count}")
        if not 0 <= self.root < self.joint_count:
            raise DataError(f"root {self.root} out of range [0, {self.joint_count})")
        seen = set()
        for e in self.edges:
            if len(e) != 2:
                raise DataError(f"edge {e} is not a pair")
            i, j = e
            if not (0 <= i < self.joint_count and 0 <= j < self.joint_count):
                raise DataError(f"edge {e} has an endpoint outside [0, {self.joint_count})")
            if i == j:
                raise DataError(f"self-edge {e}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise DataError(f"duplicate edge {e}")
            seen.add(key)

    def neighbors(self):
        adj = [[] for _ in range(self.joint_count)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def bfs_order(self):
        """(joint, parent) pairs in breadth-first order from the root."""
        adj = self.neighbors()
        order, parent = [], {self.root: -1}
        queue = deque([self.root])
        while queue:
            u = queue.popleft()
            order.append((u, parent[u]))
            for v in adj[u]:
                if v not in parent:
                    parent[v] = u
                    queue.append(v)
        return order

    def is_tree(self):
        return len(self.edges) == self.joint_count - 1 and len(self.bfs_order()) == self.joint_count

    def to_dict(self):
        return {"joint_count": self.joint_count, "root": self.root,
                "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, obj):
        try:
            return cls(int(obj["joint_count"]), tuple(obj["edges"]), int(obj.get("root", 0)))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed topology object: {exc}") from exc


def default_h36m_topology() -> JointTopology:
    """The conventional 17-joint Human3.6M tree rooted at the pelvis."""
    edges = ((0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6), (0, 7), (7, 8), (8, 9),
             (9, 10), (8, 11), (11, 12), (12, 13), (8, 14), (14, 15), (15, 16))
    return JointTopology(17, edges, 0)


def load_topology(path) -> JointTopology:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not a topology object: {exc}") from exc
    return JointTopology.from_dict(obj)


# child offsets from parent for the default skeleton, x right / y up / z depth
_H36M_REST = {
    1: (-0.13, 0.0, 0.0), 2: (0.0, -0.45, 0.0), 3: (0.0, -0.45, 0.0),
    4: (0.13, 0.0, 0.0), 5: (0.0, -0.45, 0.0), 6: (0.0, -0.45, 0.0),
    7: (0.0, 0.23, 0.0), 8: (0.0, 0.25, 0.0), 9: (0.0, 0.11, 0.0), 10: (0.0, 0.12, 0.0),
    11: (0.15, 0.0, 0.0), 12: (0.0, -0.28, 0.0), 13: (0.0, -0.25, 0.0),
    14: (-0.15, 0.0, 0.0), 15: (0.0, -0.28, 0.0), 16: (0.0, -0.25, 0.0),
}


@dataclass
class AdjacencyMatrix:
    size: int
    a_tilde: np.ndarray
    a_norm: np.ndarray


def _normalized(a_tilde):
    deg = a_tilde.sum(axis=1)
    d = 1.0 / np.sqrt(deg)
    return d[:, None] * a_tilde * d[None, :]


def build_spatial_adjacency(topology: JointTopology) -> AdjacencyMatrix:
    topology.validate()
    n = topology.joint_count
    a = np.eye(n)
    for i, j in topology.edges:
        a[i, j] = a[j, i] = 1.0
    return AdjacencyMatrix(n, a, _normalized(a))


def build_temporal_adjacency(frames: int) -> AdjacencyMatrix:
    """Self-loops plus links between consecutive frames, symmetrized."""
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    a = np.eye(frames)
    idx = np.arange(1, frames)
    a[idx, idx - 1] = 1.0
    a[idx - 1, idx] = 1.0
    return AdjacencyMatrix(frames, a, _normalized(a))


@dataclass
class PoseSequence:
    """A T x J x 3 pose track.

    For ``input2d`` the channels are (x, y, confidence); for ``target3d`` they
    are (x, y, z).
    """

    data: np.ndarray
    kind: str = TARGET3D
    action_label: Optional[int] = None
    name: str = ""
    frames: int = field(init=False)
    joints: int = field(init=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.kind not in (INPUT2D, TARGET3D):
            raise DataError(f"unknown sequence kind {self.kind!r}")
        if self.data.ndim != 3 or self.data.shape[2] != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"{self.name or 'sequence'}: expected T x J x 3 data, got shape {self.data.shape}")
        self.frames, self.joints = self.data.shape[:2]
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{self.name or 'sequence'}: non-finite values in {self.kind} data")
        if self.kind == INPUT2D:
            conf = self.data[..., 2]
            if conf.min() < 0.0 or conf.max() > 1.0:
                raise RangeError(f"{self.name or 'sequence'}: confidence outside [0, 1] "
                                 f"(min {conf.min():.6g}, max {conf.max():.6g})")


def _rotation(axis, angle):
    """Rodrigues rotation matrices for one axis and a vector of angles: (T, 3, 3)."""
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    s = np.sin(angle)[:, None, None]
    c = np.cos(angle)[:, None, None]
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def _rest_offsets(topology, rng):
    order = topology.bfs_order()
    if topology == default_h36m_topology():
        return {j: np.array(_H36M_REST[j]) for j, p in order if p >= 0}
    offsets = {}
    for j, p in order:
        if p >= 0:
            v = rng.normal(size=3)
            offsets[j] = 0.2 * v / np.linalg.norm(v)
    return offsets


def _generate_one(rng, frames, topology, noise_std):
    order = topology.bfs_order()
    if len(order) != topology.joint_count:
        raise DataError("synthetic generation needs a connected topology")
    offsets = _rest_offsets(topology, rng)
    yaw = rng.uniform(-math.pi, math.pi)
    yaw_rot = _rotation((0.0, 1.0, 0.0), np.array([yaw]))[0]

    f0 = rng.uniform(FREQ_MIN, FREQ_MAX)
    label = min(int((f0 - FREQ_MIN) / (FREQ_MAX - FREQ_MIN) * NUM_ACTION_BANDS), NUM_ACTION_BANDS - 1)
    t = np.arange(frames, dtype=np.float64)

    pose = np.zeros((frames, topology.joint_count, 3))
    root_amp = rng.uniform(0.0, ROOT_AMP_MAX, size=2)
    root_phase = rng.uniform(0.0, 2 * math.pi, size=2)
    root_base = rng.uniform(-0.2, 0.2, size=2)
    for c in range(2):
        pose[:, topology.root, c] = root_base[c] + root_amp[c] * np.sin(2 * math.pi * f0 * t + root_phase[c])

    for j, p in order:
        if p < 0:
            continue
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        amp = rng.uniform(*ANGLE_AMP_RANGE)
        freq = f0 * rng.uniform(0.75, 1.0)
        phase = rng.uniform(0.0, 2 * math.pi)
        rot = _rotation(axis, amp * np.sin(2 * math.pi * freq * t + phase))
        bone = rot @ (yaw_rot @ offsets[j])
        pose[:, j] = pose[:, p] + bone

    noise = rng.normal(0.0, 1.0, size=(frames, topology.joint_count, 2)) * noise_std
    inp = np.empty_like(pose)
    inp[..., :2] = pose[..., :2] + noise
    if noise_std > 0:
        sq = (noise * noise).sum(axis=-1)
        inp[..., 2] = np.clip(np.exp(-sq / (2.0 * noise_std ** 2)), 0.0, 1.0)
    else:
        inp[..., 2] = 1.0
    return inp, pose, label


def generate_synthetic_dataset(count, frames, topology=None, noise_std=0.0, seed=0):
    """Smooth skeletal motion with constant bone lengths and its noisy 2D view.

    Each bone swings sinusoidally about its own random axis; the root drifts
    in the image plane.  Sequence ``i`` draws from a sub-seed of ``(seed, i)``
    so results do not depend on generation order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if frames < 2:
        raise ValueError("frames must be >= 2")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    topology = topology or default_h36m_topology()
    children = np.random.SeedSequence(seed).spawn(count)
    out = []
    for i, ss in enumerate(children):
        inp, pose, label = _generate_one(np.random.default_rng(ss), frames, topology, noise_std)
        name = f"seq{i:05d}"
        out.append((PoseSequence(inp, INPUT2D, label, name), PoseSequence(pose, TARGET3D, label, name)))
    return out


# dataset file: one JSON object per line

def write_dataset(path, data):
    with open(path, "w") as fh:
        for inp, tgt in data:
            rec = {
                "id": inp.name or tgt.name,
                "frames": inp.frames,
                "joints": inp.joints,
                "pose2d": inp.data.tolist(),
                "pose3d": tgt.data.tolist(),
                "action": inp.action_label,
            }
            # float repr is the shortest string that round-trips exactly
            fh.write(json.dumps(rec, allow_nan=False) + "\n")


_FIELDS = ("id", "frames", "joints", "pose2d", "pose3d", "action")


def _parse_record(line, lineno):
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(f"line {lineno}: not a JSON object ({exc.msg})") from exc
    if not isinstance(rec, dict):
        raise MalformedRecordError(f"line {lineno}: record is not an object")
    rid = rec.get("id", f"<line {lineno}>")
    missing = [k for k in _FIELDS if k not in rec]
    if missing:
        raise MalformedRecordError(f"record {rid!r}: missing fields {missing}")
    try:
        t, j = int(rec["frames"]), int(rec["joints"])
    except (TypeError, ValueError) as exc:
        raise MalformedRecordError(f"record {rid!r}: frames/joints must be integers") from exc
    arrays = {}
    for key in ("pose2d", "pose3d"):
        try:
            arr = np.asarray(rec[key], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ShapeError(f"record {rid!r}: {key} is not a rectangular numeric array") from exc
        if arr.shape != (t, j, 3):
            raise ShapeError(f"record {rid!r}: {key} has shape {arr.shape}, declared ({t}, {j}, 3)")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"record {rid!r}: {key} contains non-finite values")
        arrays[key] = arr
    action = rec["action"]
    if action is not None and not isinstance(action, int):
        raise MalformedRecordError(f"record {rid!r}: action must be an integer or null")
    try:
        inp = PoseSequence(arrays["pose2d"], INPUT2D, action, str(rid))
    except RangeError as exc:
        raise RangeError(f"record {rid!r}: {exc}") from exc
    return inp, PoseSequence(arrays["pose3d"], TARGET3D, action, str(rid))


def read_dataset(path):
    path = Path(path)
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            if "NaN" in line or "Infinity" in line:
                # json accepts these literals; the format does not
                try:
                    rid = json.loads(line, parse_constant=lambda c: None).get("id", f"<line {lineno}>")
                except Exception:
                    rid = f"<line {lineno}>"
                raise NonFiniteError(f"record {rid!r}: non-finite literal in file")
            out.append(_parse_record(line, lineno))
    return out
