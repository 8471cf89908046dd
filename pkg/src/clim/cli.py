"""Command-line front end.

Exit codes: 0 success, 1 runtime/IO/numeric failure, 2 usage or config error.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys

from .config import ConfigError, load_run_config
from .core import ContractError
from .data import (FormatError, ShiftParams, attach_augmentation, load_paired_augmentation, parse_preset,
                   pool_from_examples, pool_to_examples, read_jsonl, synth_generate, write_jsonl)
from .evaluation import ablation_report, accuracy, margins_of, marginal_of
from .model import load_params, predict_proba, save_params
from .training import NumericalError, train

log = logging.getLogger("clim")

POOL_FILES = ("source_labeled", "source_unlabeled", "target_unlabeled", "target_test")
METRICS_HEADER = ["epoch", "step", "loss_total", "loss_con", "loss_sent", "loss_mi", "lr",
                  "dann_lambda", "dev_accuracy", "marginal_entropy", "mean_margin"]
ABLATION_HEADER = ["mi_loss", "cl_strategy", "accuracy"]


class UsageError(Exception):
    pass


def _num(v):
    if v is None:
        return ""
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    if isinstance(v, int):
        return str(v)
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def _parse_preset_pair(text):
    parts = text.split(":")
    if len(parts) != 2:
        raise UsageError(f"--preset expects SOURCE:TARGET, got {text!r}")
    try:
        return parse_preset(parts[0]), parse_preset(parts[1])
    except ContractError as exc:
        raise UsageError(str(exc)) from None


def _generate(preset_pair, shift, seed):
    src, tgt = _parse_preset_pair(preset_pair)
    return src, tgt, synth_generate(src, tgt, shift, seed)


def load_datasets(data_dir, dim=None, hash_seed=0):
    pools = {}
    for name in POOL_FILES:
        path = os.path.join(data_dir, f"{name}.jsonl")
        if not os.path.exists(path):
            if name == "target_test":
                continue
            raise FileNotFoundError(f"missing dataset file {path}")
        examples = read_jsonl(path)
        if not examples:
            raise ContractError(f"dataset file {path} is empty")
        pools[name] = pool_from_examples(examples, dim=dim, hash_seed=hash_seed,
                                         domain="source" if name.startswith("source") else "target")
    return pools


def _datasets_for(run):
    if run.data.dir is not None:
        dim = None if run.model is None else run.model.input_dim
        pools = load_datasets(run.data.dir, dim=dim, hash_seed=run.data.hash_seed)
    else:
        _, _, pools = _generate(run.data.preset, run.data.shift, run.data.seed)
    if run.paired_augmentation is not None:
        mapping = load_paired_augmentation(run.paired_augmentation)
        attach_augmentation(list(pools.values()), mapping)
    return pools


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _preset_dict(p):
    return {"name": p.name, "labeled": p.labeled, "unlabeled": p.unlabeled, "ratio": p.ratio}


def cmd_gen_data(args):
    try:
        shift = ShiftParams(rotation_deg=args.rotation, translation=args.translation, scale=args.scale,
                            separation=args.separation, sigma=args.sigma, dim=args.dim)
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    src, tgt, pools = _generate(args.preset, shift, args.seed)
    os.makedirs(args.out, exist_ok=True)
    counts = {}
    for name in POOL_FILES:
        pool = pools[name]
        write_jsonl(pool_to_examples(pool), os.path.join(args.out, f"{name}.jsonl"))
        labels = pool.labels if pool.labels is not None else pool.latent_labels
        counts[name] = {"total": len(pool), "positive": int(labels.sum()),
                        "negative": int(len(pool) - labels.sum())}
    manifest = {
        "seed": args.seed,
        "source_preset": _preset_dict(src),
        "target_preset": _preset_dict(tgt),
        "shift": {k: getattr(shift, k) for k in ShiftParams.__dataclass_fields__},
        "counts": counts,
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as f:
        f.write(json.dumps(manifest, indent=1) + "\n")
    print(json.dumps(counts))
    return 0


def write_metrics_csv(history, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in history:
            w.writerow([_num(getattr(r, k)) for k in METRICS_HEADER])


def cmd_train(args):
    run = load_run_config(args.config)
    pools = _datasets_for(run)
    try:
        params, history = train(run.train, pools, spec=run.model, log_steps=args.log_steps)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    save_params(params, os.path.join(args.out, "model.json"))
    write_metrics_csv(history, os.path.join(args.out, "metrics.csv"))
    final = [r for r in history if r.mean_margin is not None][-1]
    print(json.dumps({"epochs": final.epoch, "steps": final.step, "dev_accuracy": final.dev_accuracy,
                      "target_accuracy": final.target_accuracy}))
    return 0


def evaluate_report(params, examples, hash_seed=0):
    pool = pool_from_examples(examples, dim=params.spec.input_dim, hash_seed=hash_seed,
                              domain=examples[0].domain)
    p = predict_proba(params, pool.X)
    pbar, h = marginal_of(p)
    return {
        "accuracy": None if pool.labels is None else accuracy(params, pool),
        "marginal": [float(v) for v in pbar],
        "marginal_entropy": h,
        "mean_margin": float(margins_of(p).mean()) if p.shape[1] == 2 else None,
    }


def cmd_eval(args):
    params = load_params(args.model)
    examples = read_jsonl(args.data)
    if not examples:
        print(f"error: no examples in {args.data}", file=sys.stderr)
        return 1
    print(json.dumps(evaluate_report(params, examples, args.hash_seed)))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_suite

    if not 0 < args.eps <= 1e-2:
        raise UsageError("--eps must lie in (0, 1e-2]")
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    results = run_suite(seed=args.seed, eps=args.eps, instances=args.instances)
    failed = [k for k, v in results.items() if not v < TOLERANCE]
    for name, err in results.items():
        print(f"{name:16s} max_rel_err={err:.3e} {'FAIL' if name in failed else 'PASS'}")
    if failed:
        print(f"error: gradient check failed for {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args):
    run = load_run_config(args.config)
    pools = _datasets_for(run)
    rows = ablation_report(run.train, pools, spec=run.model, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r["mi_loss"], r["cl_strategy"], _num(r["accuracy"])])
    for r in rows:
        print(f"{r['mi_loss']:>3s}  {r['cl_strategy']:<12s} {r['accuracy']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="clim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic two-domain benchmark")
    g.add_argument("--preset", default="books:electronics",
                   help="SOURCE:TARGET preset names, or labeled,unlabeled,ratio triples")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--rotation", type=float, default=30.0, help="degrees")
    g.add_argument("--translation", type=float, default=0.5)
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--separation", type=float, default=2.0)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--dim", type=int, default=16)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one system from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log-steps", action="store_true", help="also write per-step rows")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model on a JSONL dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--hash-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--instances", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="MI on/off x contrastive strategy grid")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ContractError, FormatError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
