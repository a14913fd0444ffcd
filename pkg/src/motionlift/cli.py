"""Command-line front end.

    motionlift gen-data  --out FILE --sequences S --frames T --joints J --noise-std s --seed n
    motionlift pretrain  --config CFG --data FILE --out CKPT [--loss-curve FILE]
    motionlift finetune  --config CFG --data FILE [--init CKPT] --out CKPT [--log FILE] [--loss-curve FILE]
    motionlift eval      --ckpt CKPT --data FILE --protocol {p1,p2,pck,auc,action} [--unit-scale k]
    motionlift infer     --ckpt CKPT --input FILE --output FILE
    motionlift gradcheck [--seed n] [--num-seeds k]

Failures print one ``error kind=<Type> code=<n> message=<json string>`` line
on stderr and exit with 2 (config), 3 (data), 4 (numeric) or 5 (gradcheck).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .config import load_run_config
from .errors import ConfigError, DataError, GradcheckError, MotionLiftError
from .finetune import finetune_loop
from .gradcheck import DEFAULT_SEEDS, run_gradcheck
from .metrics import PROTOCOLS, evaluate
from .network import Model
from .pretrain import pretrain_loop
from .skeleton import (TARGET3D, PoseSequence, default_h36m_topology, generate_synthetic_dataset,
                       load_topology, read_dataset, write_dataset)


def _topology_for(joints, path=None):
    topo = load_topology(path) if path else default_h36m_topology()
    if topo.joint_count != joints:
        raise ConfigError(f"topology has {topo.joint_count} joints but {joints} were requested; "
                          "pass --topology for non-default skeletons")
    return topo


def _read(path):
    try:
        return read_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from exc


def _write_curve(path, losses):
    if path:
        with open(path, "w") as fh:
            fh.write("step loss\n")
            for i, v in enumerate(losses, 1):
                fh.write(f"{i} {v!r}\n")


def _check_frames(data, cfg, path):
    for inp, _ in data:
        if inp.data.shape != (cfg.frames, cfg.joints, 3):
            raise DataError(f"{path}: record {inp.name!r} has shape {inp.data.shape}, "
                            f"config expects ({cfg.frames}, {cfg.joints}, 3)")


def cmd_gen_data(out, sequences, frames, joints, noise_std, seed, topology=None):
    topo = _topology_for(joints, topology)
    data = generate_synthetic_dataset(sequences, frames, topo, noise_std, seed)
    try:
        write_dataset(out, data)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc.strerror}") from exc
    print(f"wrote sequences={len(data)} frames={frames} joints={joints} path={out}")
    return 0


def cmd_pretrain(config, data, out, loss_curve=None):
    run = load_run_config(config)
    dataset = _read(data)
    _check_frames(dataset, run.model, data)
    topo = _topology_for(run.model.joints, run.paths.get("topology"))
    model = Model(run.model, topo, seed=run.seed)
    inputs = np.stack([inp.data for inp, _ in dataset])
    result = pretrain_loop(model, inputs, run.pretrain, seed=run.seed)
    save_checkpoint(out, model, run.to_dict(), step=result.steps, kind="pretrain", teacher=result.teacher)
    _write_curve(loss_curve, result.losses)
    print(f"pretrain steps={result.steps} first_loss={result.losses[0]!r} "
          f"final_loss={result.losses[-1]!r} checkpoint={out}")
    return 0


def cmd_finetune(config, data, init, out, log=None, loss_curve=None):
    run = load_run_config(config)
    if init:
        run.finetune.init_checkpoint = init
    dataset = _read(data)
    _check_frames(dataset, run.model, data)
    topo = _topology_for(run.model.joints, run.paths.get("topology"))
    model = Model(run.model, topo, seed=run.seed)
    log = log or f"{out}.log"
    result = finetune_loop(model, dataset, run.finetune, seed=run.seed, log_file=log)
    save_checkpoint(out, model, run.to_dict(), step=result.log[-1].step, kind="finetune")
    _write_curve(loss_curve, [r.train_loss for r in result.log])
    print(result.log[-1].to_line())
    print(f"checkpoint={out} log={log}")
    return 0


def cmd_eval(ckpt, data, protocol, unit_scale=1.0):
    model = model_from_checkpoint(load_checkpoint(ckpt))
    dataset = _read(data)
    _check_frames(dataset, model.config, data)
    print(evaluate(model, dataset, protocol, unit_scale).to_json())
    return 0


def cmd_infer(ckpt, input, output):
    model = model_from_checkpoint(load_checkpoint(ckpt))
    dataset = _read(input)
    _check_frames(dataset, model.config, input)
    out = []
    for inp, _ in dataset:
        pred = model.predict(inp.data[None])[0]
        out.append((inp, PoseSequence(pred, TARGET3D, inp.action_label, inp.name)))
    try:
        write_dataset(output, out)
    except OSError as exc:
        raise DataError(f"cannot write {output}: {exc.strerror}") from exc
    print(f"wrote sequences={len(out)} path={output}")
    return 0


def cmd_gradcheck(seed=0, num_seeds=DEFAULT_SEEDS):
    report = run_gradcheck(seed, num_seeds)
    for line in report.lines():
        print(line)
    if not report.passed:
        raise GradcheckError(f"relative error above {report.tolerance:g} in: {', '.join(report.failures())}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="motionlift", description="2D-to-3D pose lifting with masked pre-training")
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads (default 1, deterministic)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--sequences", type=int, default=8)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--joints", type=int, default=17)
    g.add_argument("--noise-std", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--topology", default=None, help="JSON topology file for non-default skeletons")

    pt = sub.add_parser("pretrain", help="masked self-distillation pre-training")
    pt.add_argument("--config", default=None)
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--loss-curve", default=None, help="write per-step losses as columns")

    ft = sub.add_parser("finetune", help="supervised fine-tuning")
    ft.add_argument("--config", default=None)
    ft.add_argument("--data", required=True)
    ft.add_argument("--init", default=None, help="pre-trained checkpoint for the backbone")
    ft.add_argument("--out", required=True)
    ft.add_argument("--log", default=None, help="metric log path (default OUT.log)")
    ft.add_argument("--loss-curve", default=None, help="write per-epoch losses as columns")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--protocol", choices=PROTOCOLS, default="p1")
    ev.add_argument("--unit-scale", type=float, default=1.0)

    inf = sub.add_parser("infer", help="predict 3D poses for a dataset file")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--input", required=True)
    inf.add_argument("--output", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--num-seeds", type=int, default=DEFAULT_SEEDS)
    return p


def _dispatch(args):
    c = args.command
    if c == "gen-data":
        return cmd_gen_data(args.out, args.sequences, args.frames, args.joints, args.noise_std, args.seed,
                            args.topology)
    if c == "pretrain":
        return cmd_pretrain(args.config, args.data, args.out, args.loss_curve)
    if c == "finetune":
        return cmd_finetune(args.config, args.data, args.init, args.out, args.log, args.loss_curve)
    if c == "eval":
        return cmd_eval(args.ckpt, args.data, args.protocol, args.unit_scale)
    if c == "infer":
        return cmd_infer(args.ckpt, args.input, args.output)
    return cmd_gradcheck(args.seed, args.num_seeds)


def _fail(exc, code):
    print(f"error kind={type(exc).__name__} code={code} message={json.dumps(str(exc))}", file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        return _fail(ConfigError("--threads must be >= 1"), 2)
    try:
        with threadpool_limits(limits=args.threads):
            return _dispatch(args)
    except MotionLiftError as exc:
        return _fail(exc, exc.exit_code)
    except FloatingPointError as exc:
        return _fail(exc, 4)
    except ValueError as exc:
        # remaining argument-validation errors from the library layer
        return _fail(exc, 2)
    except FileNotFoundError as exc:
        return _fail(exc, 3)


if __name__ == "__main__":
    sys.exit(main())
