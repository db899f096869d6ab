"""Command line entry point: ``fxnet <command> [flags]``.

Exit codes: 0 success, 1 invalid flags or inputs, 2 failure while running.
Every artifact written to ``--out`` gets a ``<out>.manifest.json`` sidecar
holding the resolved flags, the seed and library versions.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .aucorr import CorrelationError, correlate, export_report
from .augment import AugmentConfig, augment
from .data import (
    DataError,
    cross_validate,
    evaluate,
    load_au_labels,
    load_dataset,
    write_confusion_csv,
    write_metrics_csv,
)
from .layers import ShapePlanError
from .micro import (
    MicroConfig,
    SequenceError,
    detection_labels,
    load_manifest,
    loso_micro,
    train_micro,
    write_loso_csv,
)
from .model import HEADS, ModelFileError, NetworkSpec, TrainConfig, build, load, save, train, transfer_head
from .optim import LossSpec
from .pnm import PNMError, read_pgm, to_bytes, to_unit, write_pgm
from .tensor import RngStream
from .viz import METHODS, project_back, render, top_activations

log = logging.getLogger("fxnet")

FORMATS = """file formats:
  dataset CSV      emotion,pixels,usage[,id]; 2304 space-separated 0-255 pixels per row
  image directory  <root>/<label 0-7>/<id>.pgm (binary P5, resampled to 48x48)
  AU labels CSV    image_id,au_id,intensity (au_id 1..N, intensity 0-5)
  sequences CSV    subject,sequence_id,frame_path,frame_index,onset,apex,offset,label
  model file       FXM1 binary (.fxm)
"""


class UsageError(Exception):
    pass


# bad flags or unusable input files: exit 1
INPUT_ERRORS = (UsageError, DataError, KeyError, ModelFileError, PNMError, SequenceError,
                CorrelationError, ShapePlanError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative(text):
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return value


def _add_training(p, epochs=10):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch", type=_positive_int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--decay", type=_non_negative, default=1e-5)
    p.add_argument("--decay-mode", choices=["lr", "weight"], default="lr")
    p.add_argument("--lambda1", type=_non_negative, default=1e-4)
    p.add_argument("--lambda2", type=_non_negative, default=1e-4)
    p.add_argument("--augment", choices=["on", "off"], default="off")
    p.add_argument("--freeze", default="", help="comma-separated layers; 'conv' = all conv layers")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fxnet", description="Train, evaluate and inspect facial-expression CNNs.",
                     epilog=FORMATS, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a CNN from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--au-labels")
    p.add_argument("--aus", type=_positive_int, default=44, help="AU vector length")
    p.add_argument("--arch", default="default", help="'default' or a JSON network spec file")
    p.add_argument("--head", choices=sorted(HEADS), default="emotion8")
    _add_training(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score a model, or cross-validate with --folds")
    p.add_argument("--model")
    p.add_argument("--data", required=True)
    p.add_argument("--au-labels")
    p.add_argument("--aus", type=_positive_int, default=44)
    p.add_argument("--folds", type=_positive_int)
    p.add_argument("--arch", default="default")
    p.add_argument("--head", choices=sorted(HEADS), default="emotion8")
    _add_training(p)
    p.add_argument("--out", required=True, help="metrics CSV")

    p = sub.add_parser("visualize", help="back-project a filter onto an image")
    p.add_argument("--model", required=True)
    p.add_argument("--layer", default="conv3")
    p.add_argument("--filter", type=int, required=True)
    p.add_argument("--image", help="PGM image; otherwise the top images of --data are used")
    p.add_argument("--data")
    p.add_argument("--top-n", type=_positive_int, default=1)
    p.add_argument("--method", choices=sorted(METHODS), default="guided")
    p.add_argument("--start", choices=["onehot", "map"], default="onehot")
    p.add_argument("--out", required=True, help=".pgm for a gray map, .ppm for an overlay")

    p = sub.add_parser("correlate", help="correlate filters with Action Units")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--au-labels", required=True)
    p.add_argument("--aus", type=_positive_int, default=44)
    p.add_argument("--layer", default="conv3")
    p.add_argument("--top-n", type=_positive_int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("transfer", help="replace the head and fine-tune")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--au-labels")
    p.add_argument("--aus", type=_positive_int, default=44)
    p.add_argument("--head", choices=sorted(HEADS), default="au-binary")
    _add_training(p)
    p.set_defaults(freeze="conv")
    p.add_argument("--out", required=True)

    for name, helptext in (("micro-train", "train the LSTM sequence classifier"),
                           ("micro-eval", "leave-one-subject-out evaluation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True, help="trained CNN feature extractor")
        p.add_argument("--sequences", required=True)
        p.add_argument("--labeling", choices=["emotion", "detection"], default="emotion")
        p.add_argument("--hidden", type=_positive_int, default=128)
        p.add_argument("--fine-tune", action="store_true", help="train the CNN trunk jointly")
        p.add_argument("--loso", action="store_true", default=name == "micro-eval")
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--batch", type=_positive_int, default=32)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--decay", type=_non_negative, default=1e-5)
        p.add_argument("--out", required=True)

    p = sub.add_parser("augment-preview", help="write augmented copies of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top-n", type=_positive_int, default=1, help="number of previews")
    p.add_argument("--out", required=True)
    return parser


def _manifest(args, out, extra=None):
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    doc = {
        "command": args.command,
        "flags": flags,
        "seed": flags.get("seed"),
        "versions": {"fxnet": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    if extra:
        doc.update(extra)
    Path(f"{out}.manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _spec(args, head_units=None, head_activation=None) -> NetworkSpec:
    spec = NetworkSpec()
    if args.arch != "default":
        try:
            spec = NetworkSpec.from_dict(json.loads(Path(args.arch).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"--arch: cannot read network spec {args.arch}: {exc}") from exc
    units, act = HEADS[args.head]
    if args.head != "emotion8":
        units = args.aus
    return replace(spec, head_units=head_units or units, head_activation=head_activation or act)


def _train_config(args, head) -> TrainConfig:
    loss = LossSpec("cross_entropy") if head == "emotion8" else LossSpec("sparse_au", args.lambda1, args.lambda2)
    return TrainConfig(batch_size=args.batch, epochs=args.epochs, seed=args.seed, augment=args.augment == "on",
                       loss=loss, frozen=frozenset(f for f in args.freeze.split(",") if f), lr=args.lr,
                       decay=args.decay, decay_mode=args.decay_mode, eval_train=False)


def _dataset(args):
    ds = load_dataset(args.data)
    if getattr(args, "au_labels", None):
        ds = load_au_labels(args.au_labels, ds, args.aus)
    return ds


def _write_trace(trace, path):
    with open(path, "w") as fh:
        fh.write("epoch,steps,loss\n")
        for e in trace:
            fh.write(f"{e.epoch},{e.steps},{e.loss!r}\n")


def cmd_train(args):
    if args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    if args.head != "emotion8" and not args.au_labels:
        raise UsageError(f"--head {args.head} needs --au-labels")
    spec = _spec(args)
    config = _train_config(args, args.head)
    ds = _dataset(args)
    model = build(spec, RngStream(args.seed), meta={"class_names": ds.class_names if args.head == "emotion8"
                                                     else [f"AU{i + 1}" for i in range(spec.head_units)]})
    model.layer_groups(config.frozen)
    trace = train(model, ds.pixels, ds.targets(args.head), config)
    save(model, args.out)
    _write_trace(trace, f"{args.out}.trace.csv")
    _manifest(args, args.out)


def cmd_eval(args):
    if args.folds is None and not args.model:
        raise UsageError("eval needs --model, or --folds for cross-validation")
    ds = _dataset(args)
    if args.folds is not None:
        result = cross_validate(ds, _spec(args), _train_config(args, args.head), args.head, args.folds, args.seed)
        write_metrics_csv(result, args.out)
    else:
        model = load(args.model)
        metrics = evaluate(model, ds)
        write_metrics_csv(metrics, args.out)
        if "confusion" in metrics:
            write_confusion_csv(metrics["confusion"], model.class_names,
                                str(Path(args.out).with_suffix("")) + ".confusion.csv")
    _manifest(args, args.out)


def cmd_visualize(args):
    if not args.image and not args.data:
        raise UsageError("visualize needs --image or --data")
    model = load(args.model)
    _check_filter(model, args.layer, args.filter)
    style = "overlay" if args.out.lower().endswith(".ppm") else "gray"
    if args.image:
        targets = [(Path(args.image).stem, to_unit(read_pgm(args.image))[None])]
    else:
        ds = load_dataset(args.data)
        recs = top_activations(model, ds, args.layer, args.filter, args.top_n)
        targets = [(r.image_id, ds.pixels[ds.index_of(r.image_id)]) for r in recs]
    outs = []
    for k, (image_id, img) in enumerate(targets):
        sal = project_back(model, img, args.layer, args.filter, args.method, args.start, image_id)
        out = args.out if len(targets) == 1 else _numbered(args.out, k)
        render(sal, img[0], out, style)
        outs.append({"file": str(out), "image_id": image_id})
    _manifest(args, args.out, {"method": args.method, "start": args.start, "outputs": outs})


def _check_filter(model, layer, j):
    from .layers import Conv2D

    if not isinstance(model[layer], Conv2D):
        raise UsageError(f"--layer {layer} is not a convolutional layer")
    if not 0 <= j < model[layer].out_channels:
        raise UsageError(f"--filter {j} out of range; {layer} has {model[layer].out_channels} filters")


def _numbered(path, k):
    p = Path(path)
    return str(p.with_name(f"{p.stem}_{k}{p.suffix}"))


def cmd_correlate(args):
    model = load(args.model)
    _check_filter(model, args.layer, 0)
    ds = _dataset(args)
    report = correlate(model, ds, args.layer, args.top_n)
    export_report(report, args.out)
    _manifest(args, args.out, {"active": len(report.active), "dead": len(report.dead),
                               "kept": len(report.kept), "rejected": len(report.rejected)})


def cmd_transfer(args):
    if args.head != "emotion8" and not args.au_labels:
        raise UsageError(f"--head {args.head} needs --au-labels")
    source = load(args.model)
    ds = _dataset(args)
    units, act = HEADS[args.head]
    if args.head != "emotion8":
        units = args.aus
    names = ds.class_names if args.head == "emotion8" else [f"AU{i + 1}" for i in range(units)]
    model = transfer_head(source, units, act, RngStream(args.seed), names)
    config = _train_config(args, args.head)
    model.layer_groups(config.frozen)
    trace = train(model, ds.pixels, ds.targets(args.head), config)
    save(model, args.out)
    _write_trace(trace, f"{args.out}.trace.csv")
    _manifest(args, args.out)


def _micro_inputs(args):
    cnn = load(args.model)
    seqs = load_manifest(args.sequences)
    if args.labeling == "detection":
        seqs = detection_labels(seqs)
    config = MicroConfig(hidden=args.hidden, epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                         decay=args.decay, seed=args.seed, fine_tune_cnn=args.fine_tune)
    return cnn, seqs, config


def cmd_micro_train(args):
    cnn, seqs, config = _micro_inputs(args)
    micro = train_micro(cnn, seqs, config)
    micro.classifier.save(args.out, {"seed": args.seed, "epochs": args.epochs})
    if args.fine_tune:
        save(micro.cnn, f"{args.out}.cnn.fxm")
    if args.loso:
        write_loso_csv(loso_micro(cnn, seqs, config), f"{args.out}.loso.csv")
    _manifest(args, args.out)


def cmd_micro_eval(args):
    cnn, seqs, config = _micro_inputs(args)
    result = loso_micro(cnn, seqs, config)
    write_loso_csv(result, args.out)
    _manifest(args, args.out, {"mean_accuracy": result.mean})


def cmd_augment_preview(args):
    img = to_unit(read_pgm(args.image))[None]
    rng = RngStream(args.seed)
    for k in range(args.top_n):
        out = args.out if args.top_n == 1 else _numbered(args.out, k)
        write_pgm(out, to_bytes(augment(img, AugmentConfig(), rng)[0]))
    _manifest(args, args.out)


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "correlate": cmd_correlate,
    "transfer": cmd_transfer,
    "micro-train": cmd_micro_train,
    "micro-eval": cmd_micro_eval,
    "augment-preview": cmd_augment_preview,
}


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                         format="%(levelname)s %(name)s: %(message)s")
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "verbose"}
    print(json.dumps(resolved, sort_keys=True, default=str))
    try:
        COMMANDS[args.command](args)
    except INPUT_ERRORS as exc:
        print(f"fxnet {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"fxnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
