"""Binary checkpoint container.

Layout::

    b"MLFTCKP1"                 8-byte magic
    uint32 little-endian        header length in bytes
    header                      UTF-8 JSON, sorted keys, no whitespace
    payload                     little-endian float32 tensors, back to back

The header lists every tensor as ``{name, group, shape, offset, count}``
(offset and count in float32 elements) and carries a SHA-256 digest of the
payload that is verified on load.  Groups are ``param`` and ``buffer`` for
the model and ``teacher_param`` / ``teacher_buffer`` for the EMA teacher of
pre-training checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch, DataError
from .network import Model, NetworkConfig, is_head, parameter_shapes
from .skeleton import JointTopology

MAGIC = b"MLFTCKP1"
FORMAT_VERSION = 1
GROUPS = ("param", "buffer", "teacher_param", "teacher_buffer")


@dataclass
class Checkpoint:
    config: dict
    tensors: dict                      # group -> {name: float32 array}
    step: int = 0
    kind: str = "model"
    topology: dict = None
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def params(self):
        return self.tensors.get("param", {})

    @property
    def buffers(self):
        return self.tensors.get("buffer", {})

    @property
    def has_teacher(self):
        return bool(self.tensors.get("teacher_param"))

    def to_bytes(self):
        entries, chunks, offset = [], [], 0
        for group in GROUPS:
            for name in sorted(self.tensors.get(group, {})):
                arr = np.ascontiguousarray(self.tensors[group][name], dtype="<f4")
                entries.append({"name": name, "group": group, "shape": list(arr.shape),
                                "offset": offset, "count": int(arr.size)})
                chunks.append(arr.tobytes())
                offset += arr.size
        payload = b"".join(chunks)
        header = {
            "format_version": self.format_version,
            "kind": self.kind,
            "step": int(self.step),
            "config": self.config,
            "topology": self.topology,
            "meta": self.meta,
            "tensors": entries,
            "digest": "sha256:" + hashlib.sha256(payload).hexdigest(),
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<I", len(head)) + head + payload

    @classmethod
    def from_bytes(cls, blob, source="<bytes>"):
        if blob[:8] != MAGIC:
            raise DataError(f"{source}: not a checkpoint (bad magic)")
        if len(blob) < 12:
            raise DataError(f"{source}: truncated checkpoint header")
        (hlen,) = struct.unpack("<I", blob[8:12])
        try:
            header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{source}: unreadable checkpoint header") from exc
        payload = blob[12 + hlen:]
        digest = "sha256:" + hashlib.sha256(payload).hexdigest()
        if digest != header.get("digest"):
            raise DataError(f"{source}: payload digest mismatch")
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"{source}: unsupported format_version {header.get('format_version')}")
        flat = np.frombuffer(payload, dtype="<f4")
        tensors = {}
        for e in header["tensors"]:
            end = e["offset"] + e["count"]
            if end > flat.size or int(np.prod(e["shape"])) != e["count"]:
                raise DataError(f"{source}: tensor {e['name']!r} lies outside the payload")
            arr = flat[e["offset"]:end].reshape(e["shape"]).copy()
            tensors.setdefault(e["group"], {})[e["name"]] = arr
        return cls(header["config"], tensors, header["step"], header["kind"], header.get("topology"),
                   header.get("meta", {}), header["format_version"])


def _as_f32(arrays):
    return {n: np.asarray(a, dtype=np.float32) for n, a in arrays.items()}


def checkpoint_from_model(model: Model, config=None, step=0, kind="model", teacher=None):
    """Snapshot ``model`` (and optionally a pretrain TeacherState)."""
    config = dict(config) if config is not None else {"model": model.config.to_dict()}
    tensors = {
        "param": _as_f32({n: t.data for n, t in model.params.items()}),
        "buffer": _as_f32(model.buffers()),
    }
    meta = {}
    if teacher is not None:
        tensors["teacher_param"] = _as_f32({n: t.data for n, t in teacher.model.params.items()})
        tensors["teacher_buffer"] = _as_f32(teacher.model.buffers())
        meta = {"teacher_step": teacher.step, "tau_start": teacher.tau_start,
                "tau_end": teacher.tau_end, "total_steps": teacher.total_steps}
    return Checkpoint(config, tensors, step, kind, model.topology.to_dict(), meta)


def save_checkpoint(path, model: Model, config=None, step=0, kind="model", teacher=None):
    blob = checkpoint_from_model(model, config, step, kind, teacher).to_bytes()
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes(), str(path))


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    """Rebuild the full model (heads included) stored in ``ckpt``."""
    cfg = NetworkConfig(**ckpt.config["model"])
    topo = JointTopology.from_dict(ckpt.topology) if ckpt.topology else None
    expected = dict(parameter_shapes(cfg))
    bad = {n for n in set(expected) | set(ckpt.params)
           if n not in ckpt.params or n not in expected or tuple(ckpt.params[n].shape) != expected[n]}
    if bad:
        raise CheckpointMismatch(bad)
    model = Model(cfg, topo, params={n: ckpt.params[n].astype(np.float64) for n in expected})
    model.load_buffers(ckpt.buffers)
    return model


def load_backbone(model: Model, ckpt: Checkpoint):
    """Copy every non-head tensor and the batch-norm statistics into ``model``.

    Heads keep their current (fresh) values.  Any backbone tensor missing on
    either side or differing in shape is reported by name.
    """
    ours = {n: t for n, t in model.params.items() if not is_head(n)}
    theirs = {n: a for n, a in ckpt.params.items() if not is_head(n)}
    bad = {n for n in set(ours) | set(theirs)
           if n not in ours or n not in theirs or ours[n].shape != tuple(theirs[n].shape)}
    bufs = model.buffers()
    bad |= {n for n in bufs if n not in ckpt.buffers or bufs[n].shape != ckpt.buffers[n].shape}
    if bad:
        raise CheckpointMismatch(bad)
    for n, t in ours.items():
        t.data = theirs[n].astype(np.float64)
    model.load_buffers(ckpt.buffers)
    return model
