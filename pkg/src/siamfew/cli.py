"""Command-line interface: train, eval, predict, gen-synthetic, gradcheck.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
failure. Flags override config-file values; config files are flat key=value
lines.
"""

import argparse
import os
import sys

import numpy as np

from . import __version__
from .data import SyntheticSpec, gen_synthetic, load_dataset, load_image, write_pgm
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    ShapeError,
)
from .gradsuite import THRESHOLD, run_gradient_suite
from .harness import TrainConfig, evaluate, load_config_file, load_trained, train
from .predictor import PredictorState, iterative_classify, trace_to_csv


def build_parser():
    parser = argparse.ArgumentParser(
        prog="siamfew",
        description="Few-shot image classification with an attention-based Siamese network.",
    )
    parser.add_argument("--version", action="version", version=f"siamfew {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model and write checkpoints plus metrics")
    tr.add_argument("--config", help="key=value config file; flags override it")
    tr.add_argument("--out", help="output directory for metrics.csv, best.ckpt, final.ckpt")
    tr.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    for flag, kind in (
        ("--mode", str),
        ("--backbone", str),
        ("--attention", str),
        ("--data", str),
        ("--seed", int),
        ("--length", int),
        ("--batch-size", int),
        ("--epochs", int),
        ("--lr", float),
        ("--image-size", int),
        ("--per-class", int),
        ("--test-per-class", int),
        ("--noise-sigma", float),
        ("--margin", float),
        ("--base-init", float),
        ("--max-iterations", int),
        ("--widths", str),
    ):
        tr.add_argument(flag, type=kind)

    ev = sub.add_parser("eval", help="score a checkpoint's test split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", help="override the data source stored in the checkpoint")
    ev.add_argument("--seed", type=int, help="override the evaluation seed")

    pr = sub.add_parser("predict", help="classify one image against a reference gallery")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True, help="PGM/PPM file to classify")
    pr.add_argument("--gallery", required=True, help="class-per-directory reference images")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--trace", help="write the probability trace CSV here")

    gs = sub.add_parser("gen-synthetic", help="write the synthetic dataset as PGM files")
    gs.add_argument("--out", required=True)
    gs.add_argument("--per-class", type=int, default=10)
    gs.add_argument("--image-size", type=int, default=32)
    gs.add_argument("--noise-sigma", type=float, default=0.05)
    gs.add_argument("--seed", type=int, default=0)

    gc = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    return parser


_TRAIN_KEYS = (
    "mode",
    "backbone",
    "attention",
    "data",
    "seed",
    "length",
    "batch_size",
    "epochs",
    "lr",
    "image_size",
    "per_class",
    "test_per_class",
    "noise_sigma",
    "margin",
    "base_init",
    "max_iterations",
    "widths",
)


def _train_config(args):
    mapping = load_config_file(args.config) if args.config else {}
    for key in _TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            mapping[key] = value
    return TrainConfig.from_mapping(mapping).validate()


def cmd_train(args):
    config = _train_config(args)
    progress = None if args.quiet else (
        lambda row: print(
            f"epoch {row.epoch:3d}  loss {row.loss:.4f}  "
            f"train_kappa {row.train_kappa:+.3f}  test_kappa {row.test_kappa:+.3f}"
        )
    )
    result = train(config, out_dir=args.out, progress=progress)
    print(f"best test kappa {result.best_test_kappa:+.4f} at epoch {result.best_epoch}")
    if args.out:
        print(f"wrote {os.path.join(args.out, 'metrics.csv')}, best.ckpt, final.ckpt")
    return 0


def cmd_eval(args):
    cm, value = evaluate(args.checkpoint, data=args.data, seed=args.seed)
    print("confusion matrix (rows true, cols predicted):")
    for row in cm.counts:
        print("  " + " ".join(f"{v:5d}" for v in row))
    print(f"accuracy {cm.accuracy():.4f}")
    print(f"kappa {value:+.4f}")
    return 0


def cmd_predict(args):
    config, model, logistic = load_trained(args.checkpoint)
    gallery, class_names = load_dataset(args.gallery, config.image_size)
    pixels = load_image(args.image, config.image_size)

    if config.mode == "siamese":
        if logistic is None:
            raise ConfigError("checkpoint has no logistic back-end")
        from .data import LabeledImage

        state = PredictorState.fresh(
            n_classes=config.classes,
            base_init=config.base_init,
            max_iterations=config.max_iterations,
        )
        winner, state, trace = iterative_classify(
            model,
            logistic,
            LabeledImage(pixels, 0, source=args.image),
            gallery,
            n_classes=config.classes,
            state=state,
            rng=args.seed,
        )
        if args.trace:
            with open(args.trace, "w", encoding="utf-8") as fh:
                fh.write(trace_to_csv(trace))
            print(f"wrote trace to {args.trace}")
        print(f"iterations: {state.iterations}")
    else:
        from .tensor import Tensor

        model.eval()
        probs = model.class_probs(Tensor(pixels[None, None, :, :])).data[0]
        winner = int(np.argmax(probs))
        print("probabilities: " + " ".join(f"{p:.3f}" for p in probs))
    print(f"predicted class: {winner} ({class_names[winner]})")
    return 0


def cmd_gen_synthetic(args):
    spec = SyntheticSpec(
        per_class=args.per_class,
        image_size=args.image_size,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    images = gen_synthetic(spec)
    for image in images:
        class_name = image.source.split(":")[1]
        class_dir = os.path.join(args.out, class_name)
        os.makedirs(class_dir, exist_ok=True)
        index = image.source.split(":")[2]
        write_pgm(os.path.join(class_dir, f"{index.zfill(4)}.pgm"), image.pixels)
    print(f"wrote {len(images)} images under {args.out}")
    return 0


def cmd_gradcheck(args):
    results = run_gradient_suite()
    failures = 0
    for name, err in results:
        ok = err < THRESHOLD
        failures += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:35s} max rel err {err:.3e}")
    if failures:
        print(f"{failures} gradient check(s) at or above {THRESHOLD}")
        return 3
    print(f"all {len(results)} gradient checks below {THRESHOLD}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {
        "train": cmd_train,
        "eval": cmd_eval,
        "predict": cmd_predict,
        "gen-synthetic": cmd_gen_synthetic,
        "gradcheck": cmd_gradcheck,
    }[args.command]
    try:
        return handler(args)
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
