"""Transformer-GCN dual-stream lifting backbone.

Features live in a (B, T, J, d) layout.  Spatial sub-modules regroup them as
(B*T, J, d) so that tokens are joints of one frame; temporal sub-modules use
(B*J, T, d) so that tokens are frames of one joint.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .errors import ConfigError, NumericError, ShapeError
from .skeleton import (
    JointTopology,
    build_spatial_adjacency,
    build_temporal_adjacency,
    default_h36m_topology,
)

INIT_STD = 0.02
MODES = ("pose", "action", "features")


@dataclass
class NetworkConfig:
    layers: int = 16
    dim: int = 128
    heads: int = 8
    mlp_ratio: int = 4
    frames: int = 243
    joints: int = 17
    action_classes: Optional[int] = None

    def __post_init__(self):
        for name in ("layers", "dim", "heads", "mlp_ratio", "frames", "joints"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be a positive integer")
        if self.dim % self.heads:
            raise ConfigError(f"model.dim={self.dim} is not divisible by model.heads={self.heads}")
        if self.action_classes is not None and self.action_classes < 1:
            raise ConfigError("model.action_classes must be positive when given")

    @property
    def head_dim(self):
        return self.dim // self.heads

    def to_dict(self):
        return asdict(self)


@dataclass
class LayerRecord:
    fused: Tensor
    transformer: Tensor
    gcn: Tensor
    alpha_tr: Tensor
    alpha_g: Tensor


@dataclass
class LayerActivations:
    layers: list = field(default_factory=list)

    @property
    def final(self):
        return self.layers[-1].fused


def _trunc_normal(rng, shape, std=INIT_STD):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def parameter_shapes(config: NetworkConfig):
    """Ordered (name, shape) list of every trainable tensor."""
    d, r, J = config.dim, config.mlp_ratio, config.joints
    shapes = [("embed.weight", (3, d)), ("embed.bias", (d,)), ("spatial_pos", (1, J, d))]

    def mlp(prefix):
        return [(f"{prefix}.fc1.weight", (d, r * d)), (f"{prefix}.fc1.bias", (r * d,)),
                (f"{prefix}.fc2.weight", (r * d, d)), (f"{prefix}.fc2.bias", (d,))]

    for i in range(config.layers):
        for axis in ("spatial", "temporal"):
            p = f"blocks.{i}.tr.{axis}"
            shapes += [(f"{p}.norm1.gain", (d,)), (f"{p}.norm1.bias", (d,)),
                       (f"{p}.attn.wq", (d, d)), (f"{p}.attn.wk", (d, d)), (f"{p}.attn.wv", (d, d)),
                       (f"{p}.attn.proj.weight", (d, d)), (f"{p}.attn.proj.bias", (d,)),
                       (f"{p}.norm2.gain", (d,)), (f"{p}.norm2.bias", (d,))]
            shapes += mlp(f"{p}.mlp")
        for axis in ("spatial", "temporal"):
            p = f"blocks.{i}.gcn.{axis}"
            shapes += [(f"{p}.w1", (d, d)), (f"{p}.w2", (d, d)),
                       (f"{p}.bn.gain", (d,)), (f"{p}.bn.bias", (d,)),
                       (f"{p}.norm.gain", (d,)), (f"{p}.norm.bias", (d,))]
            shapes += mlp(f"{p}.mlp")
        shapes.append((f"blocks.{i}.fuse.weight", (2 * d, 2)))
    shapes += [("head.pose.weight", (d, 3)), ("head.pose.bias", (3,)),
               ("head.pretrain.weight", (d, d)), ("head.pretrain.bias", (d,))]
    if config.action_classes:
        shapes += [("head.action.weight", (d, config.action_classes)),
                   ("head.action.bias", (config.action_classes,))]
    return shapes


def bn_names(config: NetworkConfig):
    return [f"blocks.{i}.gcn.{axis}.bn" for i in range(config.layers) for axis in ("spatial", "temporal")]


def is_head(name):
    return name.startswith("head.")


def init_parameters(config: NetworkConfig, seed=0):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            params[name] = _trunc_normal(rng, shape)
    return params


# building blocks

def embed_input(x: Tensor, weight: Tensor, bias: Tensor, spatial_pos: Tensor) -> Tensor:
    """Per-joint linear lift 3 -> d plus the learned per-joint position vector."""
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected B x T x J x 3 input, got {x.shape}")
    if x.shape[2] != spatial_pos.shape[1]:
        raise ShapeError(f"input has {x.shape[2]} joints, model expects {spatial_pos.shape[1]}")
    return ag.linear(x, weight, bias) + spatial_pos


def multi_head_attention(x: Tensor, w: dict, heads: int, layer=None) -> Tensor:
    """Scaled dot-product self-attention within each group of ``x`` (G, n, d).

    ``w`` holds ``wq``, ``wk``, ``wv`` (d x d, head k owning columns
    k*d_h:(k+1)*d_h), and the output projection ``proj_w``/``proj_b``.
    Logits are scaled by 1/sqrt(d/h).
    """
    g, n, d = x.shape
    if d % heads:
        raise ShapeError(f"feature width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return t.reshape(g, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(ag.linear(x, w["wq"]))
    k = split(ag.linear(x, w["wk"]))
    v = split(ag.linear(x, w["wv"]))
    logits = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    if not np.all(np.isfinite(logits.data)):
        raise NumericError(f"non-finite attention logits in layer {layer}")
    attn = ag.softmax(logits, axis=-1)
    out = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(g, n, d)
    return ag.linear(out, w["proj_w"], w["proj_b"])


def mlp(x: Tensor, p: dict, prefix: str) -> Tensor:
    h = ag.gelu(ag.linear(x, p[f"{prefix}.fc1.weight"], p[f"{prefix}.fc1.bias"]))
    return ag.linear(h, p[f"{prefix}.fc2.weight"], p[f"{prefix}.fc2.bias"])


def _to_spatial(f):
    b, t, j, d = f.shape
    return f.reshape(b * t, j, d)


def _from_spatial(x, shape):
    return x.reshape(shape)


def _to_temporal(f):
    b, t, j, d = f.shape
    return f.transpose(0, 2, 1, 3).reshape(b * j, t, d)


def _from_temporal(x, shape):
    b, t, j, d = shape
    return x.reshape(b, j, t, d).transpose(0, 2, 1, 3)


def _attention_weights(p, prefix):
    return {"wq": p[f"{prefix}.attn.wq"], "wk": p[f"{prefix}.attn.wk"], "wv": p[f"{prefix}.attn.wv"],
            "proj_w": p[f"{prefix}.attn.proj.weight"], "proj_b": p[f"{prefix}.attn.proj.bias"]}


def _transformer_sublayer(x, p, prefix, heads, layer):
    x = x + multi_head_attention(
        ag.layer_norm(x, p[f"{prefix}.norm1.gain"], p[f"{prefix}.norm1.bias"]),
        _attention_weights(p, prefix), heads, layer)
    return x + mlp(ag.layer_norm(x, p[f"{prefix}.norm2.gain"], p[f"{prefix}.norm2.bias"]), p, f"{prefix}.mlp")


def transformer_stream_block(f: Tensor, p: dict, prefix: str, heads: int, layer=None) -> Tensor:
    """Spatial then temporal pre-norm attention sub-blocks over (B, T, J, d)."""
    shape = f.shape
    f = _from_spatial(_transformer_sublayer(_to_spatial(f), p, f"{prefix}.spatial", heads, layer), shape)
    return _from_temporal(_transformer_sublayer(_to_temporal(f), p, f"{prefix}.temporal", heads, layer), shape)


def gcn_layer(x: Tensor, a_norm, w1: Tensor, w2: Tensor, bn_gain: Tensor, bn_bias: Tensor,
              bn_state: BatchNormState, training: bool) -> Tensor:
    """ReLU(x + BN(A x W1 + x W2)) for every group of ``x`` (G, n, d)."""
    if a_norm.shape != (x.shape[1], x.shape[1]):
        raise ShapeError(f"adjacency {a_norm.shape} does not match group length {x.shape[1]}")
    h = ag.linear(ag.graph_mix(a_norm, x), w1) + ag.linear(x, w2)
    return ag.relu(x + ag.batch_norm(h, bn_gain, bn_bias, bn_state, training))


def _gcn_sublayer(x, p, prefix, a_norm, bn_state, training):
    x = gcn_layer(x, a_norm, p[f"{prefix}.w1"], p[f"{prefix}.w2"],
                  p[f"{prefix}.bn.gain"], p[f"{prefix}.bn.bias"], bn_state, training)
    return x + mlp(ag.layer_norm(x, p[f"{prefix}.norm.gain"], p[f"{prefix}.norm.bias"]), p, f"{prefix}.mlp")


def gcn_stream_block(f: Tensor, p: dict, prefix: str, adj_spatial, adj_temporal, bn: dict,
                     training: bool) -> Tensor:
    shape = f.shape
    x = _gcn_sublayer(_to_spatial(f), p, f"{prefix}.spatial", adj_spatial, bn[f"{prefix}.spatial.bn"], training)
    f = _from_spatial(x, shape)
    x = _gcn_sublayer(_to_temporal(f), p, f"{prefix}.temporal", adj_temporal, bn[f"{prefix}.temporal.bn"], training)
    return _from_temporal(x, shape)


def adaptive_fuse(f_tr: Tensor, f_g: Tensor, weight: Tensor):
    """Per-token softmax blend of the two stream outputs.

    Returns (fused, alpha_tr, alpha_g); the alphas have a trailing axis of 1.
    """
    if f_tr.shape != f_g.shape:
        raise ShapeError(f"stream shapes differ: {f_tr.shape} vs {f_g.shape}")
    alpha = ag.softmax(ag.linear(ag.concat([f_tr, f_g], axis=-1), weight), axis=-1)
    a_tr = alpha[..., 0:1]
    a_g = alpha[..., 1:2]
    return a_tr * f_tr + a_g * f_g, a_tr, a_g


class Model:
    """Parameters, batch-norm state and adjacency for one backbone instance."""

    def __init__(self, config: NetworkConfig, topology: JointTopology = None, seed=0, params=None):
        self.config = config
        self.topology = topology or default_h36m_topology()
        if self.topology.joint_count != config.joints:
            raise ConfigError(f"topology has {self.topology.joint_count} joints, "
                              f"model.joints={config.joints}")
        self.adj_spatial = build_spatial_adjacency(self.topology).a_norm
        self.adj_temporal = build_temporal_adjacency(config.frames).a_norm
        arrays = params if params is not None else init_parameters(config, seed)
        self.params = {name: Tensor(np.array(arrays[name], dtype=np.float64), requires_grad=True, name=name)
                       for name, _ in parameter_shapes(config)}
        self.bn = {name: BatchNormState(config.dim) for name in bn_names(config)}
        self._cached = None
        self.forward_calls = 0

    # bookkeeping

    def num_parameters(self):
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def gradients(self):
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.params.items()}

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def copy(self):
        other = Model(self.config, self.topology, params={n: t.data for n, t in self.params.items()})
        other.bn = copy.deepcopy(self.bn)
        return other

    def buffers(self):
        out = {}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_buffers(self, arrays):
        for name, st in self.bn.items():
            st.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float64)
            st.running_var = np.array(arrays[f"{name}.running_var"], dtype=np.float64)

    # computation

    def encode(self, x, training=False, feature_hook=None):
        """Embed and run all dual-stream layers; returns LayerActivations.

        ``feature_hook`` maps the embedded features F0 to the tensor fed to the
        first layer (used for replication and masking during pre-training).
        """
        self.forward_calls += 1
        cfg, p = self.config, self.params
        x = ag.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (cfg.frames, cfg.joints, 3):
            raise ShapeError(f"expected B x {cfg.frames} x {cfg.joints} x 3 input, got {x.shape}")
        f = embed_input(x, p["embed.weight"], p["embed.bias"], p["spatial_pos"])
        if feature_hook is not None:
            f = feature_hook(f)
        acts = LayerActivations()
        for i in range(cfg.layers):
            f_tr = transformer_stream_block(f, p, f"blocks.{i}.tr", cfg.heads, layer=i)
            f_g = gcn_stream_block(f, p, f"blocks.{i}.gcn", self.adj_spatial, self.adj_temporal,
                                   self.bn, training)
            f, a_tr, a_g = adaptive_fuse(f_tr, f_g, p[f"blocks.{i}.fuse.weight"])
            acts.layers.append(LayerRecord(f, f_tr, f_g, a_tr, a_g))
        return acts

    def pose_head(self, f):
        return ag.linear(f, self.params["head.pose.weight"], self.params["head.pose.bias"])

    def action_head(self, f):
        if not self.config.action_classes:
            raise ConfigError("action mode needs model.action_classes")
        pooled = f.mean(axis=(1, 2))
        return ag.linear(pooled, self.params["head.action.weight"], self.params["head.action.bias"])

    def pretrain_head(self, f):
        return ag.linear(f, self.params["head.pretrain.weight"], self.params["head.pretrain.bias"])

    def forward(self, x, mode="pose", training=False, feature_hook=None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "action" and not self.config.action_classes:
            raise ConfigError("action mode needs model.action_classes")
        acts = self.encode(x, training, feature_hook)
        if mode == "features":
            out = acts
        elif mode == "pose":
            out = self.pose_head(acts.final)
        else:
            out = self.action_head(acts.final)
        self._cached = out if isinstance(out, Tensor) and out.requires_grad else None
        return out

    def backward(self, grad_output):
        """Back-propagate ``grad_output`` from the last cached forward output."""
        if self._cached is None:
            raise RuntimeError("backward() called without a cached forward pass")
        self.zero_grad()
        self._cached.backward(grad_output)
        self._cached = None
        return self.gradients()

    def predict(self, x):
        """Eval-mode pose prediction as a plain array."""
        with ag.no_grad():
            return self.forward(np.asarray(x, dtype=np.float64), "pose", training=False).data

    def predict_action(self, x):
        with ag.no_grad():
            return self.forward(np.asarray(x, dtype=np.float64), "action", training=False).data


def forward(x, model: Model, mode="pose", training=False):
    return model.forward(x, mode, training)
