"""Command-line entry point: ``mphil {generate,train,eval,prototypes,export-embeddings,ablate}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import graphdata
from .evalcli import accuracy, evaluate
from .model import PRESETS, VARIANTS
from .protobank import nearest_samples
from .trainer import TrainConfig, infer, load_checkpoint, save_checkpoint, train, write_metrics_csv

log = logging.getLogger("mphil")

ABLATION_VARIANTS = [v for v in VARIANTS if v != "erm"] + ["erm"]


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--data", required=True, help="directory with train/val/test .jsonl files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=d.K, help="prototypes per class")
    p.add_argument("--beta", type=float, default=d.beta, help="weight of the prototype matching loss")
    p.add_argument("--alpha", type=float, default=d.alpha, help="EMA rate of prototype updates")
    p.add_argument("--tau", type=float, default=d.tau, help="softmax temperature")
    p.add_argument("--prune-n", type=int, default=d.prune_n, help="assignment weights kept per sample")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--preset", choices=sorted(PRESETS), default=d.preset, help="encoder depth/width")


def _config(args, variant: str | None = None, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        K=args.k,
        beta=args.beta,
        alpha=args.alpha,
        tau=args.tau,
        prune_n=args.prune_n,
        seed=args.seed if seed is None else seed,
        preset=args.preset,
        variant=variant or args.variant,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mphil", description="Multi-prototype hyperspherical invariant learning for graphs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic spurious-motif dataset as JSONL")
    g.add_argument("--task", choices=sorted(graphdata.TASKS), default="spmotif-binary")
    g.add_argument("--bias", type=float, default=0.9)
    g.add_argument("--shift", choices=["basis", "size"], default="basis")
    g.add_argument("--features", choices=graphdata.FEATURE_MODES, default="constant")
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-val", type=int, default=500)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model; writes checkpoint.json and metrics.csv")
    _add_train_flags(t)
    t.add_argument("--variant", choices=VARIANTS, default="full")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split; prints the report as JSON")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", help="write the JSON report here instead of stdout")

    pr = sub.add_parser("prototypes", help="most similar samples for every prototype, as CSV")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--split", default="test")
    pr.add_argument("--top-m", type=int, default=5)
    pr.add_argument("--out", required=True)

    x = sub.add_parser("export-embeddings", help="write graph embeddings with labels as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="test")
    x.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="train and test ablation variants over several seeds")
    _add_train_flags(a)
    a.add_argument("--variant", action="append", choices=ABLATION_VARIANTS, help="repeatable; default: all")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return parser


def cmd_generate(args) -> None:
    spec = graphdata.DatasetSpec(
        **graphdata.TASKS[args.task],
        bias=args.bias,
        shift=args.shift,
        features=args.features,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        seed=args.seed,
    )
    paths = graphdata.save_splits(args.out, graphdata.generate(spec))
    for name, path in paths.items():
        print(f"{name}: {path}")


def _load_dataset(data_dir) -> dict:
    return {s: graphdata.load_split(data_dir, s) for s in ("train", "val")}


def cmd_train(args) -> None:
    cfg = _config(args)
    result = train(cfg, _load_dataset(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", result.checkpoint)
    write_metrics_csv(out / "metrics.csv", result.log)
    print(f"best epoch {result.checkpoint.epoch}; wrote {out / 'checkpoint.json'} and {out / 'metrics.csv'}")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    graphs = graphdata.load_split(args.data, args.split)
    probs, Z = infer(ckpt, graphs, with_embeddings=True)
    report = evaluate(probs, Z, [g.y for g in graphs], args.split, seed=ckpt.config.seed)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_prototypes(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    if model.bank is None:
        raise ValueError("checkpoint has no prototype bank (ERM variant)")
    graphs = graphdata.load_split(args.data, args.split)
    _, Z = infer(ckpt, graphs, with_embeddings=True)
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    Z = Z / np.where(norms > 0, norms, 1.0)
    top = nearest_samples(model.bank, Z, args.top_m)
    M = model.bank.M
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "prototype", "rank", "sample_id", "similarity", "label", "motif", "base"])
        for (c, k), ids in top.items():
            for rank, i in enumerate(ids):
                g = graphs[i]
                w.writerow([c, k, rank, i, repr(float(Z[i] @ M[c, k])), g.y, g.meta.get("motif", ""), g.meta.get("base", "")])


def cmd_export(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    graphs = graphdata.load_split(args.data, args.split)
    _, Z = infer(ckpt, graphs, with_embeddings=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "env"] + [f"z{j}" for j in range(Z.shape[1])])
        for i, (g, z) in enumerate(zip(graphs, Z)):
            w.writerow([i, g.y, g.meta.get("env", "")] + [repr(float(v)) for v in z])


def cmd_ablate(args) -> None:
    variants = args.variant or ABLATION_VARIANTS
    data = _load_dataset(args.data)
    test = graphdata.load_split(args.data, "test")
    labels = np.array([g.y for g in test])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in variants:
        for seed in args.seeds:
            result = train(_config(args, variant, seed), data)
            acc = accuracy(infer(result.checkpoint, test).argmax(axis=1), labels)
            rows.append((variant, seed, result.checkpoint.epoch, acc))
            print(f"{variant} seed={seed} test_acc={acc:.4f}")
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "best_epoch", "test_accuracy"])
        for v, s, ep, acc in rows:
            w.writerow([v, s, ep, repr(acc)])
    for variant in variants:
        accs = [r[3] for r in rows if r[0] == variant]
        print(f"{variant}: median test accuracy {float(np.median(accs)):.4f}")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "prototypes": cmd_prototypes,
    "export-embeddings": cmd_export,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001
        print(f"mphil {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
