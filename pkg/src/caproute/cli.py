"""Command-line entry points.

Subcommands: gen-data, train, eval, gradcheck, trace. Every command is
deterministic given its config, seed, and input files. Exit codes:
0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_ablation_spec, tiny_config
from .gradcheck import finite_diff_check
from .network import discretize_paths, forward_instance, init_model
from .synthetic import RULES, TaskSpec, TaskError, generate_split, load_manifest, load_split, write_dataset
from .training import TrainingAborted, evaluate, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2

GRADCHECK_TOL = 1e-4


def task_spec_from_config(cfg: RunConfig) -> TaskSpec:
    return TaskSpec(
        d_v=cfg.d_v,
        d=cfg.d,
        d_k=cfg.d_k,
        N=cfg.N,
        L=cfg.L,
        K=cfg.K,
        A=cfg.A,
        n_tags=cfg.n_tags,
        train=cfg.train,
        val=cfg.val,
        test=cfg.test,
        rule_mix=cfg.rule_mix,
        noise=cfg.noise,
        master_seed=cfg.data_seed,
    )


_DIM_TENSOR = {
    "d_v": "enc.W_proj",
    "d": "enc.W_Qhat",
    "d_k": "enc.W_k",
    "N": "R1.W_3",
    "A": "head.W_y",
    "L": "question matrix",
    "K": "knowledge matrix",
}


def check_dataset_dims(cfg: RunConfig, data_dir: str) -> dict:
    """Verify dataset dims against the config; names the offending tensor."""
    manifest = load_manifest(data_dir)
    task = manifest.get("task", {})
    for dim, tensor in _DIM_TENSOR.items():
        have = task.get(dim)
        want = getattr(cfg, dim)
        if have is not None and have != want:
            raise ConfigError(f"{tensor}: configured for {dim}={want} but dataset provides {dim}={have}")
    return manifest


def _load_cfg(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    return load_config(path)


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args.config)
    spec = task_spec_from_config(cfg)
    spec.validate()
    manifest = write_dataset(spec, args.out)
    for split, entry in manifest["splits"].items():
        print(f"{split}: {entry['count']} instances sha256={entry['sha256'][:16]}...")
    print(f"manifest: {os.path.join(args.out, 'manifest.json')}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    ablation = parse_ablation_spec(args.ablation) if args.ablation else cfg.ablation
    cfg.ablation = ablation
    cfg.validate()
    check_dataset_dims(cfg, args.data)
    train_set = load_split(args.data, "train")
    val_set = load_split(args.data, "val")
    result = train(train_set, val_set, cfg, ablation=ablation, out_dir=args.out)
    for entry in result.metrics:
        print(
            f"epoch {entry['epoch']:3d} lr={entry['lr']:.3e} "
            f"train_loss={entry['train_loss']:.4f} val_loss={entry['val_loss']:.4f} "
            f"val_acc={entry['val_acc']:.4f}"
        )
    print(f"best epoch {result.best_epoch} val_acc={result.best_val_acc:.4f}")
    print(f"checkpoint: {result.checkpoint_prefix}.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    check_dataset_dims(cfg, args.data)
    instances = load_split(args.data, args.split)
    metrics = evaluate(instances, model, cfg.T, cfg.ablation)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else tiny_config()
    cfg.validate()
    spec = task_spec_from_config(cfg)
    spec.train = max(spec.train, 2)
    spec.master_seed = args.seed
    instances = generate_split(spec, "train")[:2]
    model = init_model(cfg, seed=args.seed, dtype=np.float64)

    def loss_fn():
        total = None
        for inst in instances:
            term = forward_instance(inst, model, cfg.T, cfg.ablation).loss
            total = term if total is None else ad.add(total, term)
        return ad.affine(total, 1.0 / len(instances))

    # h = 1e-5: through the full T-step composition the 1e-4 step's
    # truncation term alone can breach the tolerance on correct gradients
    report = finite_diff_check(loss_fn, model.named_tensors(), h=1e-5, corrupt=args.corrupt_gradient)
    for name, t in model.named_tensors():
        err = report.per_param[name]
        status = "ok" if err <= GRADCHECK_TOL else "FAIL"
        print(f"{name:16s} shape={'x'.join(map(str, t.shape)):8s} max_rel_err={err:.3e} {status}")
    print(f"max relative error: {report.max_rel_err:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    if not report.ok(GRADCHECK_TOL):
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_trace(args) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {args.threshold}")
    model, cfg = load_checkpoint(args.checkpoint)
    check_dataset_dims(cfg, args.data)
    instances = load_split(args.data, args.split)
    os.makedirs(args.out, exist_ok=True)
    m = model.M
    traces_path = os.path.join(args.out, "traces.jsonl")
    masks_path = os.path.join(args.out, "masks.jsonl")
    csv_path = os.path.join(args.out, "path_vectors.csv")
    with open(traces_path, "w", encoding="utf-8") as tf, open(masks_path, "w", encoding="utf-8") as mf, open(
        csv_path, "w", encoding="utf-8"
    ) as cf:
        for inst in instances:
            res = forward_instance(inst, model, cfg.T, cfg.ablation)
            record = {
                "rule": res.rule,
                "iterations": [
                    {"G": s.G.tolist(), "c": s.c.tolist(), "b": s.b.tolist()} for s in res.trace.iterations
                ],
                "path_vector": res.trace.path_vector.tolist(),
                "prediction": int(np.argmax(res.probs)),
                "label": res.label,
            }
            tf.write(json.dumps(record) + "\n")
            mask = discretize_paths(res.trace, args.threshold)
            mf.write(json.dumps({"rule": res.rule, "mask": mask.astype(int).tolist()}) + "\n")
            fields = [str(RULES.index(res.rule))] + [repr(float(g)) for g in res.trace.path_vector]
            cf.write(",".join(fields) + "\n")
    n_fields = 1 + m * m * cfg.T
    print(f"wrote {len(instances)} traces; csv rows have {n_fields} fields")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caproute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset files")
    p.add_argument("--config", help="JSON run config (defaults to desk-scale defaults)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint + metrics")
    p.add_argument("--ablation", help="ablation spec, e.g. router=random,drop=R5,memory=off")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, help="checkpoint path prefix (without .json)")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients (64-bit)")
    p.add_argument("--config", help="JSON run config (defaults to the built-in tiny config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gradient", metavar="TENSOR", help="negative-control hook: corrupt one gradient")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("trace", help="export route traces, masks, and path vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--threshold", type=float, default=0.6)
    p.set_defaults(fn=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, TaskError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, TrainingAborted) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def entry() -> None:
    sys.exit(main())
