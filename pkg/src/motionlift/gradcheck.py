"""Central finite-difference check of every analytic backward in the network.

Each case builds a scalar from a block's output (a fixed random projection
for non-scalar outputs), back-propagates once, and compares against
(f(x+eps) - f(x-eps)) / 2eps coordinate by coordinate.  The relative error of
one tensor is ``|a - n| / max(|a|, |n|, floor)`` over the checked
coordinates; a block reports the max over its tensors and over seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .losses import loss_action, loss_mpjpe, loss_nmpjpe, loss_velocity
from .network import (Model, NetworkConfig, adaptive_fuse, embed_input, gcn_layer, gcn_stream_block,
                      multi_head_attention, transformer_stream_block)
from .pretrain import PretrainConfig, apply_mask, make_mask_plan, pretrain_loss, replicate_for_multimask
from .skeleton import JointTopology, build_spatial_adjacency, build_temporal_adjacency

EPS = 1e-5
TOLERANCE = 1e-4
NORM_FLOOR = 1e-6
DEFAULT_SEEDS = 10

# micro sizes: batch, frames, joints, width, heads, ratio, layers
B, T, J, D, H, R, N = 2, 4, 3, 8, 2, 2, 2


def micro_config(action_classes=3):
    return NetworkConfig(layers=N, dim=D, heads=H, mlp_ratio=R, frames=T, joints=J,
                         action_classes=action_classes)


def micro_topology():
    return JointTopology(J, ((0, 1), (1, 2)))


def relative_error(analytic, numeric, floor=NORM_FLOOR):
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def _scalarize(out, proj):
    if out.data.ndim == 0:
        return out
    return (out * proj).sum()


def check_function(fn, inputs, rng, coords=None, eps=EPS):
    """Compare analytic and numeric gradients of ``fn(**tensors)``.

    ``inputs`` maps names to float64 arrays; all become differentiable.
    ``coords`` optionally caps the number of sampled coordinates per tensor.
    Returns {name: relative error}.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in inputs.items()}
    out = fn(**tensors)
    proj = rng.standard_normal(out.data.shape) if out.data.ndim else None
    _scalarize(out, proj).backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}

    def value(arrays):
        with ag.no_grad():
            o = fn(**{k: Tensor(a) for k, a in arrays.items()})
            return float(o.data) if o.data.ndim == 0 else float((o.data * proj).sum())

    errors = {}
    for name, base in inputs.items():
        flat_idx = np.arange(base.size)
        if coords is not None and base.size > coords:
            flat_idx = rng.choice(base.size, size=coords, replace=False)
        numeric = np.empty(len(flat_idx))
        for k, i in enumerate(flat_idx):
            idx = np.unravel_index(i, base.shape)
            arrays = dict(inputs)
            plus = base.copy()
            plus[idx] += eps
            minus = base.copy()
            minus[idx] -= eps
            arrays[name] = plus
            f_plus = value(arrays)
            arrays[name] = minus
            f_minus = value(arrays)
            numeric[k] = (f_plus - f_minus) / (2 * eps)
        errors[name] = relative_error(analytic[name].ravel()[flat_idx], numeric)
    return errors


# cases: each takes an rng and returns (fn, inputs, coords)

def _w(rng, *shape, scale=0.5):
    return rng.normal(0.0, scale, size=shape)


def _case_embedding(rng):
    def fn(x, weight, bias, pos):
        return embed_input(x, weight, bias, pos)
    return fn, {"x": _w(rng, B, T, J, 3, scale=1.0), "weight": _w(rng, 3, D), "bias": _w(rng, D),
                "pos": _w(rng, 1, J, D)}, None


def _case_attention(rng):
    def fn(x, wq, wk, wv, proj_w, proj_b):
        return multi_head_attention(x, {"wq": wq, "wk": wk, "wv": wv, "proj_w": proj_w, "proj_b": proj_b}, H)
    return fn, {"x": _w(rng, 3, J, D, scale=1.0), "wq": _w(rng, D, D), "wk": _w(rng, D, D),
                "wv": _w(rng, D, D), "proj_w": _w(rng, D, D), "proj_b": _w(rng, D)}, None


def _stream_params(rng, prefix, kind):
    out = {}
    for axis in ("spatial", "temporal"):
        p = f"{prefix}.{axis}"
        if kind == "tr":
            names = {"norm1.gain": (D,), "norm1.bias": (D,), "attn.wq": (D, D), "attn.wk": (D, D),
                     "attn.wv": (D, D), "attn.proj.weight": (D, D), "attn.proj.bias": (D,),
                     "norm2.gain": (D,), "norm2.bias": (D,)}
        else:
            names = {"w1": (D, D), "w2": (D, D), "bn.gain": (D,), "bn.bias": (D,),
                     "norm.gain": (D,), "norm.bias": (D,)}
        names.update({"mlp.fc1.weight": (D, R * D), "mlp.fc1.bias": (R * D,),
                      "mlp.fc2.weight": (R * D, D), "mlp.fc2.bias": (D,)})
        for n, shape in names.items():
            arr = _w(rng, *shape)
            if n.endswith("gain"):
                arr = arr + 1.0
            out[f"{p}.{n}"] = arr
    return out


def _keyed(fn, names):
    """Adapt fn(f, params_dict) to keyword tensors with dotted names."""
    safe = {n: n.replace(".", "__") for n in names}

    def wrapped(f, **kw):
        return fn(f, {n: kw[s] for n, s in safe.items()})
    return wrapped, safe


def _case_transformer_block(rng):
    params = _stream_params(rng, "tr", "tr")
    fn, safe = _keyed(lambda f, p: transformer_stream_block(f, p, "tr", H), params)
    inputs = {"f": _w(rng, B, T, J, D, scale=1.0)}
    inputs.update({safe[n]: a for n, a in params.items()})
    return fn, inputs, None


def _gcn_layer_case(training):
    def case(rng):
        adj = build_spatial_adjacency(micro_topology()).a_norm
        state = BatchNormState(D)
        state.running_mean = _w(rng, D)
        state.running_var = rng.uniform(0.5, 2.0, D)

        def fn(x, w1, w2, gain, bias):
            st = BatchNormState(D)
            st.running_mean, st.running_var = state.running_mean.copy(), state.running_var.copy()
            return gcn_layer(x, adj, w1, w2, gain, bias, st, training)
        return fn, {"x": _w(rng, B * T, J, D, scale=1.0), "w1": _w(rng, D, D), "w2": _w(rng, D, D),
                    "gain": 1.0 + _w(rng, D), "bias": _w(rng, D)}, None
    return case


def _case_gcn_block(rng):
    params = _stream_params(rng, "gcn", "gcn")
    adj_s = build_spatial_adjacency(micro_topology()).a_norm
    adj_t = build_temporal_adjacency(T).a_norm

    def block(f, p):
        bn = {"gcn.spatial.bn": BatchNormState(D), "gcn.temporal.bn": BatchNormState(D)}
        return gcn_stream_block(f, p, "gcn", adj_s, adj_t, bn, training=True)
    fn, safe = _keyed(block, params)
    inputs = {"f": _w(rng, B, T, J, D, scale=1.0)}
    inputs.update({safe[n]: a for n, a in params.items()})
    return fn, inputs, None


def _case_fusion(rng):
    def fn(f_tr, f_g, weight):
        return adaptive_fuse(f_tr, f_g, weight)[0]
    return fn, {"f_tr": _w(rng, B, T, J, D, scale=1.0), "f_g": _w(rng, B, T, J, D, scale=1.0),
                "weight": _w(rng, 2 * D, 2)}, None


def _case_layer_norm(rng):
    def fn(x, gain, bias):
        return ag.layer_norm(x, gain, bias)
    return fn, {"x": _w(rng, 5, D, scale=1.0), "gain": 1.0 + _w(rng, D), "bias": _w(rng, D)}, None


def _batch_norm_case(training):
    def case(rng):
        mean, var = _w(rng, D), rng.uniform(0.5, 2.0, D)

        def fn(x, gain, bias):
            st = BatchNormState(D)
            st.running_mean, st.running_var = mean.copy(), var.copy()
            return ag.batch_norm(x, gain, bias, st, training)
        return fn, {"x": _w(rng, 6, D, scale=1.0), "gain": 1.0 + _w(rng, D), "bias": _w(rng, D)}, None
    return case


def _head_case(mode):
    def case(rng):
        model = Model(micro_config(), micro_topology(), seed=0)
        prefix = f"head.{mode}"
        shapes = {n: t.shape for n, t in model.params.items() if n.startswith(prefix + ".")}

        def fn(f, weight, bias):
            model.params[f"{prefix}.weight"] = weight
            model.params[f"{prefix}.bias"] = bias
            return getattr(model, f"{mode}_head")(f)
        return fn, {"f": _w(rng, B, T, J, D, scale=1.0), "weight": _w(rng, *shapes[f"{prefix}.weight"]),
                    "bias": _w(rng, *shapes[f"{prefix}.bias"])}, None
    return case


def _pose_pair(rng):
    gt = _w(rng, B, T, J, 3, scale=1.0)
    return gt + _w(rng, B, T, J, 3, scale=0.3), gt


def _case_loss_mpjpe(rng):
    pred, gt = _pose_pair(rng)
    return (lambda pred: loss_mpjpe(pred, gt)), {"pred": pred}, None


def _case_loss_nmpjpe(rng):
    pred, gt = _pose_pair(rng)
    return (lambda pred: loss_nmpjpe(pred, gt)), {"pred": pred}, None


def _case_loss_velocity(rng):
    pred, gt = _pose_pair(rng)
    return (lambda pred: loss_velocity(pred, gt)), {"pred": pred}, None


def _case_loss_action(rng):
    labels = rng.integers(0, 4, size=5)
    return (lambda logits: loss_action(logits, labels)), {"logits": _w(rng, 5, 4, scale=2.0)}, None


def _case_loss_pretrain(rng):
    cfg = PretrainConfig(mask_prob=0.5, replicas=3, target_layers=1)
    plan = make_mask_plan(B, T, cfg, int(rng.integers(2**31)), (J, D))
    target = _w(rng, B, T, J, D, scale=1.0)

    def fn(f0, weight, bias):
        masked = apply_mask(replicate_for_multimask(f0, cfg.replicas), plan)
        return pretrain_loss(ag.linear(masked, weight, bias), target, plan)
    return fn, {"f0": _w(rng, B, T, J, D, scale=1.0), "weight": _w(rng, D, D), "bias": _w(rng, D)}, None


def _case_full_model(rng, coords=2):
    cfg = micro_config()
    model = Model(cfg, micro_topology(), seed=0)
    names = list(model.params)
    safe = {n: n.replace(".", "__") for n in names}
    x = _w(rng, B, T, J, 3, scale=1.0)

    def fn(**kw):
        for n in names:
            model.params[n] = kw[safe[n]]
        for st in model.bn.values():
            st.running_mean, st.running_var = np.zeros(cfg.dim), np.ones(cfg.dim)
        acts = model.encode(kw["x"], training=True)
        pooled = model.action_head(acts.final).sum()
        return ag.concat([model.pose_head(acts.final).reshape(-1), model.pretrain_head(acts.final).reshape(-1),
                          pooled.reshape(1)], axis=0)
    inputs = {"x": x}
    for n in names:
        arr = _w(rng, *model.params[n].shape, scale=0.3)
        inputs[safe[n]] = arr + 1.0 if n.endswith(".gain") else arr
    return fn, inputs, coords


CASES = {
    "embedding": _case_embedding,
    "attention": _case_attention,
    "transformer_block": _case_transformer_block,
    "gcn_layer_train": _gcn_layer_case(True),
    "gcn_layer_eval": _gcn_layer_case(False),
    "gcn_block": _case_gcn_block,
    "fusion": _case_fusion,
    "layer_norm": _case_layer_norm,
    "batch_norm_train": _batch_norm_case(True),
    "batch_norm_eval": _batch_norm_case(False),
    "head_pose": _head_case("pose"),
    "head_action": _head_case("action"),
    "head_pretrain": _head_case("pretrain"),
    "loss_mpjpe": _case_loss_mpjpe,
    "loss_nmpjpe": _case_loss_nmpjpe,
    "loss_velocity": _case_loss_velocity,
    "loss_action": _case_loss_action,
    "loss_pretrain": _case_loss_pretrain,
    "full_model": _case_full_model,
}


@dataclass
class GradcheckReport:
    max_error: dict = field(default_factory=dict)   # block -> max relative error
    worst_tensor: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    tolerance: float = TOLERANCE
    seconds: float = 0.0

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.max_error.values())

    def failures(self):
        return sorted(b for b, e in self.max_error.items() if not e < self.tolerance)

    def lines(self):
        out = []
        for block, err in self.max_error.items():
            status = "ok" if err < self.tolerance else "FAIL"
            out.append(f"block={block} max_rel_err={err:.3e} worst={self.worst_tensor[block]} status={status}")
        out.append(f"seeds={len(self.seeds)} tolerance={self.tolerance:g} seconds={self.seconds:.1f} "
                   f"result={'pass' if self.passed else 'fail'}")
        return out


def run_gradcheck(seed=0, num_seeds=DEFAULT_SEEDS, blocks=None, tolerance=TOLERANCE):
    """Run every case (or ``blocks``) for seeds seed..seed+num_seeds-1."""
    start = time.perf_counter()
    report = GradcheckReport(tolerance=tolerance)
    names = list(blocks) if blocks is not None else list(CASES)
    unknown = [b for b in names if b not in CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck block(s): {', '.join(unknown)}")
    for block in names:
        report.max_error[block] = 0.0
        report.worst_tensor[block] = "-"
    for s in range(seed, seed + num_seeds):
        report.seeds.append(s)
        for i, block in enumerate(names):
            rng = np.random.default_rng([s, i])
            fn, inputs, coords = CASES[block](rng)
            for tensor, err in check_function(fn, inputs, rng, coords).items():
                if err > report.max_error[block] or not np.isfinite(err):
                    report.max_error[block] = err
                    report.worst_tensor[block] = tensor.replace("__", ".")
    report.seconds = time.perf_counter() - start
    return report
