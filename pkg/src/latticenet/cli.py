"""Command-line front door: prepare / train / eval / compare.

Every command writes a manifest.json next to its outputs recording the
resolved flags, seed, and input digests, so any run can be reproduced from
its output directory alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .arch import (
    ArchSpec,
    Network,
    desk_spec,
    full_spec,
    load_checkpoint,
    parse_arch,
    save_checkpoint,
)
from .data import (
    StreamPairSet,
    load_cifar_batch,
    make_stream_pairs,
    read_container,
    write_container,
)
from .training import TrainConfig, evaluate, train, write_metrics_csv
from . import report

# Table-1 row order; model key -> (mode, stream selection, display name)
MODEL_ROWS = {
    "single-gray": ("single", "gray", "single-gray"),
    "single-edge": ("single", "edge", "single-edge"),
    "mcnn": ("mcnn", "both", "mcnn"),
    "xcnn": ("xcnn", "both", "xcnn-lite"),
    "lcnn": ("lcnn", "both", "lcnn"),
}

TRAIN_BATCHES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_BATCHES = ["test_batch.bin"]


class CliError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, flags, inputs):
    manifest = {
        "command": command,
        "flags": flags,
        "seed": flags.get("seed"),
        "input_digests": {os.path.basename(p): _sha256(p) for p in inputs},
        "version": __version__,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _build_spec(args, mode: str) -> ArchSpec:
    n_streams = 1 if mode == "single" else 2
    if args.arch_string:
        side = 224 if args.full_fidelity else 32
        policy = "valid" if args.full_fidelity else "same-for-3x3"
        return ArchSpec(parse_arch(args.arch_string), side, n_streams, mode, policy)
    if args.full_fidelity:
        return full_spec(mode, n_streams)
    return desk_spec(mode, n_streams)


def _load_pair_sets(args):
    data_dir = args.data
    train_path = os.path.join(data_dir, "train.lcds")
    test_path = os.path.join(data_dir, "test.lcds")
    for p in (train_path, test_path):
        if not os.path.exists(p):
            raise CliError(f"missing container file: {p}")
    train_pairs = read_container(train_path)
    test_pairs = read_container(test_path)
    if args.limit_train:
        train_pairs = _subset(train_pairs, args.limit_train)
    if args.limit_test:
        test_pairs = _subset(test_pairs, args.limit_test)
    return train_pairs, test_pairs, [train_path, test_path]


def _subset(pairs: StreamPairSet, n: int) -> StreamPairSet:
    n = min(n, len(pairs))
    return StreamPairSet(pairs.gray[:n], pairs.edge[:n], pairs.labels[:n], pairs.side)


def _train_one(args, model_key, train_pairs, test_pairs, seed, out_dir, progress=True):
    mode, stream, display = MODEL_ROWS[model_key]
    spec = _build_spec(args, mode)
    net = Network(spec, seed)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        momentum=args.momentum,
        seed=seed,
    )

    def report_progress(train_rec, test_rec):
        print(
            f"[{display} seed={seed}] epoch {train_rec.epoch:3d} "
            f"train loss {train_rec.loss:.4f} acc {train_rec.accuracy:.4f} | "
            f"test loss {test_rec.loss:.4f} acc {test_rec.accuracy:.4f}",
            flush=True,
        )

    records = train(
        net, train_pairs, test_pairs, config, stream=stream,
        progress=report_progress if progress else None,
    )
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(
        os.path.join(out_dir, "metrics.csv"),
        records,
        arch=spec.arch_string(),
        mode=mode,
        config=config,
    )
    report.plot_curves(records, os.path.join(out_dir, "curves.png"), title=display)
    save_checkpoint(net, os.path.join(out_dir, "checkpoint.lckp"))
    if records:
        final_loss, final_acc = records[-1].loss, records[-1].accuracy
    else:
        final_loss, final_acc = evaluate(net, test_pairs, stream)
    return net, records, (display, final_loss, final_acc), stream


def cmd_prepare(args):
    if not os.path.isdir(args.cifar_dir):
        raise CliError(f"CIFAR directory not found: {args.cifar_dir}")
    os.makedirs(args.out, exist_ok=True)
    inputs = []
    for names, out_name in ((TRAIN_BATCHES, "train.lcds"), (TEST_BATCHES, "test.lcds")):
        records = []
        for name in names:
            path = os.path.join(args.cifar_dir, name)
            if not os.path.exists(path):
                raise CliError(f"missing batch file: {path}")
            records.extend(load_cifar_batch(path))
            inputs.append(path)
        pairs = make_stream_pairs(
            records,
            out_side=args.size,
            sigma=args.canny_sigma,
            low=args.canny_low,
            high=args.canny_high,
        )
        write_container(os.path.join(args.out, out_name), pairs)
        print(f"wrote {out_name}: {len(pairs)} records at {args.size}x{args.size}")
    _write_manifest(args.out, "prepare", _flag_dict(args), inputs)


def cmd_train(args):
    train_pairs, test_pairs, inputs = _load_pair_sets(args)
    os.makedirs(args.out, exist_ok=True)
    _, records, (display, loss, acc), stream = _train_one(
        args, args.arch, train_pairs, test_pairs, args.seed, args.out
    )
    flags = _flag_dict(args)
    flags["stream"] = stream
    _write_manifest(args.out, "train", flags, inputs)
    print(f"{display}: final test loss {loss:.4f}, accuracy {acc:.4f}")


def cmd_eval(args):
    net = load_checkpoint(args.checkpoint)
    test_path = args.data if args.data.endswith(".lcds") else os.path.join(args.data, "test.lcds")
    if not os.path.exists(test_path):
        raise CliError(f"missing container file: {test_path}")
    pairs = read_container(test_path)
    if args.limit_test:
        pairs = _subset(pairs, args.limit_test)
    stream = args.stream or ("both" if net.spec.n_streams > 1 else "gray")
    loss, acc = evaluate(net, pairs, stream)
    print(f"loss {loss:.6f} accuracy {acc:.6f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        flags = _flag_dict(args)
        flags["stream"] = stream
        _write_manifest(args.out, "eval", flags, [args.checkpoint, test_path])


def cmd_compare(args):
    train_pairs, test_pairs, inputs = _load_pair_sets(args)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    per_model = {}
    for key in MODEL_ROWS:
        sub = os.path.join(args.out, key)
        if args.epochs > 0:
            _, records, row, _ = _train_one(
                args, key, train_pairs, test_pairs, args.seed, sub
            )
        else:
            mode, stream, display = MODEL_ROWS[key]
            net = Network(_build_spec(args, mode), args.seed)
            loss, acc = evaluate(net, test_pairs, stream)
            records, row = [], (display, loss, acc)
            os.makedirs(sub, exist_ok=True)
        rows.append(row)
        per_model[row[0]] = records
    header = f"{'Model':<14}{'Loss':>10}{'Accuracy':>10}"
    lines = [header, "-" * len(header)]
    for name, loss, acc in rows:
        lines.append(f"{name:<14}{loss:>10.4f}{acc:>10.4f}")
    table = "\n".join(lines)
    print(table)
    with open(os.path.join(args.out, "comparison.txt"), "w") as fh:
        fh.write(table + "\n")
    with open(os.path.join(args.out, "comparison.csv"), "w") as fh:
        fh.write("model,loss,accuracy\n")
        for name, loss, acc in rows:
            fh.write(f"{name},{loss:.6f},{acc:.6f}\n")
    report.plot_comparison(rows, os.path.join(args.out, "comparison.png"))
    if any(per_model.values()):
        report.plot_model_curves(per_model, os.path.join(args.out, "model_curves.png"))
    _write_manifest(args.out, "compare", _flag_dict(args), inputs)


def _flag_dict(args):
    skip = {"func", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _add_shared_train_flags(p):
    p.add_argument("--data", required=True, help="directory with train.lcds/test.lcds")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--arch-string", default=None, help="override the built-in architecture")
    p.add_argument(
        "--full-fidelity",
        action="store_true",
        help="use the full-scale architecture (expects 224x224 containers)",
    )
    p.add_argument(
        "--threads",
        type=int,
        default=1,
        help="recorded in the manifest; runs are single-threaded for reproducibility",
    )
    p.add_argument("--limit-train", type=int, default=0, help="use only the first N train records")
    p.add_argument("--limit-test", type=int, default=0, help="use only the first N test records")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="latticenet",
        description="Multistream CNN training with lattice cross-fusion",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build gray+edge stream containers from CIFAR-10 batches")
    p.add_argument("--cifar-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--canny-sigma", type=float, default=1.4)
    p.add_argument("--canny-low", type=float, default=0.1)
    p.add_argument("--canny-high", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--arch", required=True, choices=sorted(MODEL_ROWS))
    _add_shared_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="test.lcds file or its directory")
    p.add_argument("--stream", choices=["both", "gray", "edge"], default=None)
    p.add_argument("--limit-test", type=int, default=0)
    p.add_argument("--out", default=None, help="optional manifest output directory")
    p.add_argument("--seed", type=int, default=0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train all five model rows and tabulate")
    _add_shared_train_flags(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CliError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
