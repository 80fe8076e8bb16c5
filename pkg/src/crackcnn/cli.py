"""Command-line interface: ``crackcnn <command> [flags]``.

Data goes to stdout, diagnostics to stderr; the exit status is 0 on success
and 1 on any failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from crackcnn import data, gradcheck
from crackcnn.network import (
    Checkpoint,
    CheckpointError,
    build_network,
    file_digest,
    format_param_table,
    load_checkpoint,
    save_checkpoint,
)
from crackcnn.tensor import make_rng
from crackcnn.training import (
    Adam,
    TrainConfig,
    evaluate,
    steps_to_accuracy,
    train,
    transfer_train,
    write_metrics_csv,
)

log = logging.getLogger("crackcnn")


class CliError(Exception):
    pass


def _train_config(args, **overrides) -> TrainConfig:
    kw = dict(
        steps=args.steps,
        batch_size=args.batch,
        learning_rate=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        eps=args.adam_eps,
        eval_interval=args.eval_interval,
        seed=args.seed,
        freeze_conv=getattr(args, "freeze_conv", False),
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def _load_split(args, expected_classes: int, size: int):
    train_set, test_set = data.load_dataset(args.data, args.test_frac, args.seed, size=size, threads=args.threads)
    if train_set.num_classes != expected_classes:
        raise CliError(
            f"class count mismatch: --classes {expected_classes} but {args.data} has "
            f"{train_set.num_classes} class directories {train_set.class_labels}"
        )
    if len(test_set) == 0:
        raise CliError("test split is empty; raise --test-frac")
    return train_set, test_set


def _save(ckpt: Checkpoint, opt: Adam, args, metrics) -> None:
    save_checkpoint(ckpt, args.out)
    opt.save(str(args.out) + ".adam")
    if args.metrics:
        write_metrics_csv(metrics, args.metrics, record_time=args.record_time)


def cmd_train(args) -> int:
    train_set, test_set = _load_split(args, args.classes, data.IMAGE_SIZE)
    cfg = _train_config(args)
    net = build_network(args.classes, args.lrn == "on", make_rng(args.seed))
    opt = Adam(cfg)
    ckpt, metrics = train(net, train_set, test_set, cfg, optimizer=opt)
    _save(ckpt, opt, args, metrics)
    _, acc = evaluate(ckpt.network, test_set)
    print(f"final test accuracy {acc:.6f}")
    return 0


def cmd_transfer(args) -> int:
    base = load_checkpoint(args.base)
    size = base.network.config.input_shape[1]
    train_set, test_set = _load_split(args, args.classes, size)
    cfg = _train_config(args)
    opt = Adam(cfg)
    info = {"base_path": str(Path(args.base).name), "base_sha256": file_digest(args.base)}
    callback = None
    if args.compare_scratch:
        callback = _stop_at(args.target_acc)
    ckpt, metrics = transfer_train(base, args.classes, train_set, test_set, cfg, optimizer=opt, info=info, callback=callback)
    _save(ckpt, opt, args, metrics)
    _, acc = evaluate(ckpt.network, test_set)
    print(f"final test accuracy {acc:.6f}")
    if args.compare_scratch:
        scratch = build_network(args.classes, base.network.config.lrn_enabled, make_rng(args.seed))
        _, scratch_metrics = train(scratch, train_set, test_set, cfg, callback=_stop_at(args.target_acc))
        for label, m in (("transfer", metrics), ("scratch", scratch_metrics)):
            reached = steps_to_accuracy(m, args.target_acc)
            print(f"{label} steps_to_{args.target_acc:g} {reached if reached is not None else 'not-reached'}")
    return 0


def _stop_at(threshold):
    return lambda row: row.train_accuracy >= threshold


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.model)
    ds = data.load_folder(args.data, size=ckpt.network.config.input_shape[1], threads=args.threads)
    if ds.class_labels != ckpt.class_labels:
        raise CliError(f"dataset classes {ds.class_labels} do not match model classes {ckpt.class_labels}")
    loss, acc = evaluate(ckpt.network, ds)
    print(f"loss {loss:.6f}")
    print(f"accuracy {acc:.6f}")
    return 0


def format_prediction(labels: list[str], probs: np.ndarray) -> str:
    lines = [f"{label} {p:.6f}" for label, p in zip(labels, probs)]
    best = int(np.argmax(probs))
    lines.append(f"prediction: {labels[best]} {probs[best]:.6f}")
    return "\n".join(lines)


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.model)
    x = data.load_image(args.image, size=ckpt.network.config.input_shape[1])
    _, probs = ckpt.network.forward(x[None])
    print(format_prediction(ckpt.class_labels, probs[0]))
    return 0


def cmd_synth(args) -> int:
    out = data.generate_synthetic(args.task, args.n, args.seed, args.out)
    count = sum(1 for _ in out.glob("*/*.png"))
    print(f"wrote {count} images to {out}")
    return 0


def cmd_params(args) -> int:
    net_cfg = build_network(args.classes, args.lrn == "on", make_rng(0)).config
    print(format_param_table(net_cfg))
    return 0


def cmd_verify_grads(args) -> int:
    results = gradcheck.run_gradient_suite(args.seed)
    print(gradcheck.format_report(results))
    ok = all(r.passed for r in results)
    print("ALL PASS" if ok else "FAIL")
    return 0 if ok else 1


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset root with one subdirectory per class")
    p.add_argument("--classes", type=int, required=True, help="number of classes (softmax width)")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--adam-eps", type=float, default=1e-8)
    p.add_argument("--eval-interval", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-frac", type=float, default=0.2, help="test share of every class")
    p.add_argument("--out", required=True, help="checkpoint path (.ckpt); Adam state goes to <out>.adam")
    p.add_argument("--metrics", help="metrics CSV path")
    p.add_argument("--record-time", action="store_true", help="write real wall_seconds instead of 0 into the CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crackcnn", description="Lightweight crack-detection CNN")
    parser.add_argument("--threads", type=int, default=1, help="image decoding workers (results are unaffected)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from scratch")
    _add_training_flags(p)
    p.add_argument("--lrn", choices=("on", "off"), default="on")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="swap the head of a trained model and fine-tune")
    p.add_argument("--base", required=True, help="base checkpoint")
    _add_training_flags(p)
    p.add_argument("--freeze-conv", action="store_true", help="keep C1/C2 fixed")
    p.add_argument("--compare-scratch", action="store_true", help="also train from scratch and report steps to --target-acc")
    p.add_argument("--target-acc", type=float, default=0.97)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="loss and accuracy of a model on a dataset directory")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="class probabilities for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--task", choices=sorted(data.TASKS), required=True)
    p.add_argument("--n", type=int, required=True, help="images per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("params", help="print the layer/parameter table")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--lrn", choices=("on", "off"), default="on")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("verify-grads", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_grads)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        # single BLAS thread keeps reductions, and so every output, reproducible
        with threadpool_limits(limits=1):
            return args.func(args)
    except (CliError, CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
