"""Command-line entry point.

Subcommands: corpus-stats, generate, train, eval, predict. A JSON config
file can supply the synth/unet/train/eval sections; any explicit flag
wins over the file, and the file wins over built-in defaults. Unknown
sections or keys are rejected rather than silently ignored. Exit codes:
0 success, 2 argument or validation error, 3 I/O error, 4 file-format
error, 5 numeric or generation failure.

Usage examples:
    overseg corpus-stats --csv letters.csv
    overseg generate --corpus letters.csv --out train.ovls --split train \
        --count 20000 --seed 7
    overseg train --train train.ovls --val val.ovls --out model.unet
    overseg eval --model model.unet --data test.ovls --report report.json
    overseg predict --model model.unet --image crop.pgm --out-prefix crop
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .corpus import parse_corpus_csv, assign_splits
from .errors import ContentError, FormatError, GenerationError, NumericError
from .evaluate import (EvalConfig, panel_filename, predict, render_panel,
                       report_to_json, histogram_to_csv, mask_max_fluxes,
                       minmax_scale, test_report)
from .nn import UNetConfig, load_model, save_model
from .pgm import read_pgm, write_pgm
from .synth import SynthConfig, generate_dataset, read_dataset, write_dataset
from .train import TrainConfig, evaluate_metrics, history_to_csv, train

_SECTIONS = {
    "synth": SynthConfig,
    "unet": UNetConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config file {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    for section, body in doc.items():
        if section not in _SECTIONS:
            raise ValueError(
                f"config file {path}: unknown section {section!r} "
                f"(expected one of {sorted(_SECTIONS)})")
        allowed = {f.name for f in dataclasses.fields(_SECTIONS[section])}
        if not isinstance(body, dict):
            raise ValueError(f"config section {section!r} must be an object")
        unknown = set(body) - allowed
        if unknown:
            raise ValueError(
                f"config section {section!r}: unknown keys {sorted(unknown)}")
    return doc


def _build_section(name, file_doc, overrides):
    kwargs = dict(file_doc.get(name, {}))
    for key, value in overrides.items():
        if value is not None:
            kwargs[key] = value
    for key in ("class_set", "canvas", "contrast_range"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    return _SECTIONS[name](**kwargs)


def _parse_ints(text):
    return tuple(int(part) for part in text.split(","))


def _parse_floats(text):
    return tuple(float(part) for part in text.split(","))


def _threads(value):
    if value is not None:
        return value
    env = os.environ.get("OVERSEG_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(
                f"OVERSEG_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _class_letter(c):
    return chr(ord("A") + c) if 0 <= c < 26 else str(c)


def cmd_corpus_stats(args):
    class_set = _parse_ints(args.classes)
    fractions = _parse_floats(args.fractions)
    corpus = parse_corpus_csv(args.csv, class_set=class_set,
                              threshold=args.threshold)
    corpus = assign_splits(corpus, fractions, args.split_seed)
    lo = min(float(inst.image.min())
             for c in class_set for inst in corpus.instances[c])
    hi = max(float(inst.image.max())
             for c in class_set for inst in corpus.instances[c])
    print(f"classes: {','.join(str(c) for c in class_set)}")
    for c in class_set:
        print(f"class {c} ({_class_letter(c)}): "
              f"{len(corpus.instances[c])} instances")
    print(f"pixel intensity range: [{lo:.6f}, {hi:.6f}]")
    sizes = corpus.pool_sizes()
    for split in ("train", "val", "test"):
        per_class = " ".join(
            f"{c}:{sizes[split][c]}" for c in class_set)
        print(f"pool {split}: {per_class}")
    return EXIT_OK


def cmd_generate(args):
    if args.count < 1:
        raise ValueError(f"--count must be >= 1, got {args.count}")
    doc = _load_config_file(args.config)
    contrast = _parse_floats(args.contrast_range) \
        if args.contrast_range is not None else None
    synth_config = _build_section("synth", doc, {
        "p_single": args.p_single,
        "noise_sigma": args.noise_sigma,
        "contrast_range": contrast,
        "offset_max": args.offset_max,
    })
    corpus = parse_corpus_csv(args.corpus, class_set=synth_config.class_set,
                              threshold=synth_config.mask_threshold)
    corpus = assign_splits(corpus, _parse_floats(args.fractions),
                           args.split_seed)
    pool = corpus.pool(args.split)
    dataset = generate_dataset(pool, synth_config, args.count, args.seed,
                               split=args.split,
                               workers=_threads(args.threads))
    n_bytes = write_dataset(dataset, args.out)
    print(f"wrote {len(dataset.samples)} samples ({n_bytes} bytes) "
          f"to {args.out}")
    return EXIT_OK


def cmd_train(args):
    doc = _load_config_file(args.config)
    unet_config = _build_section("unet", doc, {})
    shuffle_seed = args.shuffle_seed if args.shuffle_seed is not None \
        else args.seed
    train_config = _build_section("train", doc, {
        "epochs": args.epochs,
        "batch_size": args.batch,
        "learning_rate": args.lr,
        "shuffle_seed": shuffle_seed,
    })
    dataset_train = read_dataset(args.train)
    dataset_val = read_dataset(args.val)
    prefix = args.out[:-5] if args.out.endswith(".unet") else args.out
    history_path = args.history or prefix + ".history.csv"

    def progress(entry):
        val = entry["val"]
        print(f"epoch {entry['epoch']}/{train_config.epochs} "
              f"train_loss {entry['train_loss']:.6f} "
              f"val_loss {val.loss:.6f} acc {val.binary_accuracy:.4f} "
              f"prec {val.precision:.4f} rec {val.recall:.4f}", flush=True)

    params, history = train(dataset_train, dataset_val, unet_config,
                            train_config, args.seed,
                            checkpoint_prefix=prefix, progress=progress)
    save_model(params, unet_config, args.out)
    history_to_csv(history, history_path)
    print(f"wrote model to {args.out}, history to {history_path}")
    return EXIT_OK


def cmd_eval(args):
    doc = _load_config_file(args.config)
    eval_config = _build_section("eval", doc, {
        "detect_threshold": args.detect_threshold,
        "noise_threshold": args.noise_threshold,
        "histogram_bins": args.bins,
        "render_scale": args.render_scale,
    })
    params, unet_config = load_model(args.model)
    dataset = read_dataset(args.data)
    report = test_report(params, unet_config, dataset, eval_config)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report, eval_config))
        fh.write("\n")
    hist_path = (args.report[:-5] if args.report.endswith(".json")
                 else args.report) + ".histogram.csv"
    histogram_to_csv(report.histogram, hist_path)

    rendered = 0
    if args.render_count > 0:
        os.makedirs(args.render_dir, exist_ok=True)
        for record in report.records[:args.render_count]:
            sample = dataset.samples[record.index]
            predicted = predict(params, unet_config, sample.input)
            panel = render_panel(sample, predicted, eval_config)
            name = panel_filename(record.index, record.truth, record.category)
            write_pgm(os.path.join(args.render_dir, name), panel)
            rendered += 1

    m = report.metrics
    print(f"samples {report.n_samples} accuracy {m.binary_accuracy:.4f} "
          f"precision {m.precision:.4f} recall {m.recall:.4f}")
    counts = " ".join(f"{cat}:{report.outcome_counts[cat]}"
                      for cat in report.outcome_counts)
    print(f"outcomes {counts}")
    print(f"success_rate {report.success_rate:.4f}")
    print(f"wrote report to {args.report}, histogram to {hist_path}"
          + (f", {rendered} panels to {args.render_dir}" if rendered else ""))
    return EXIT_OK


def cmd_predict(args):
    params, unet_config = load_model(args.model)
    pixels = read_pgm(args.image)
    if pixels.shape != (unet_config.height, unet_config.width):
        raise ValueError(
            f"image is {pixels.shape[0]}x{pixels.shape[1]}, model expects "
            f"{unet_config.height}x{unet_config.width}")
    # PGM inputs use display polarity (dark ink on light ground); the
    # model consumes ink-positive intensities
    image = 1.0 - pixels.astype(np.float32) / 255.0
    probs = predict(params, unet_config, image)
    fluxes = mask_max_fluxes(probs)
    theta = args.detect_threshold
    detected = [c for c in range(len(fluxes)) if fluxes[c] >= theta]
    for c, flux in enumerate(fluxes):
        path = f"{args.out_prefix}_class{c}.pgm"
        display = np.floor((1.0 - minmax_scale(probs[c])) * 255.0
                           + 0.5).astype(np.uint8)
        write_pgm(path, display)
        print(f"class {c} ({_class_letter(c)}): max_flux {flux:.4f} "
              f"-> {path}")
    if detected:
        print("detected: " + ",".join(_class_letter(c) for c in detected))
    else:
        print("detected: (none)")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="overseg",
        description="Synthesize, train on, and evaluate overlapping-letter "
                    "segmentation datasets.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus-stats",
                       help="summarize a letter CSV and its split pools")
    p.add_argument("--csv", required=True, help="path to the letter CSV")
    p.add_argument("--classes", default="0,1,2,3,4",
                   help="comma-separated class ids (default 0,1,2,3,4)")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="mask binarization threshold (default 0.5)")
    p.add_argument("--fractions", default="0.8,0.1,0.1",
                   help="train,val,test fractions (default 0.8,0.1,0.1)")
    p.add_argument("--split-seed", type=int, default=0,
                   help="seed for split assignment (default 0)")
    p.set_defaults(func=cmd_corpus_stats)

    p = sub.add_parser("generate", help="synthesize an overlap dataset file")
    p.add_argument("--corpus", required=True, help="path to the letter CSV")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--split", choices=("train", "val", "test"),
                   default="train", help="glyph pool to draw from")
    p.add_argument("--count", type=int, required=True,
                   help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--p-single", type=float, dest="p_single",
                   help="probability of single-letter samples")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma",
                   help="Gaussian background noise sigma")
    p.add_argument("--contrast-range", dest="contrast_range",
                   help="under-letter contrast range as 'lo,hi'")
    p.add_argument("--offset-max", type=int, dest="offset_max",
                   help="maximum letter offset in pixels")
    p.add_argument("--fractions", default="0.8,0.1,0.1",
                   help="train,val,test fractions (default 0.8,0.1,0.1)")
    p.add_argument("--split-seed", type=int, default=0,
                   help="seed for split assignment (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="generation workers (default: OVERSEG_THREADS "
                        "or all cores); never changes the output bytes")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the segmentation model")
    p.add_argument("--train", required=True, help="training dataset path")
    p.add_argument("--val", required=True, help="validation dataset path")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--epochs", type=int, help="training epochs (default 15)")
    p.add_argument("--batch", type=int, help="batch size (default 64)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-3)")
    p.add_argument("--seed", type=int, default=0,
                   help="parameter initialization seed")
    p.add_argument("--shuffle-seed", type=int, dest="shuffle_seed",
                   help="epoch shuffle seed (default: --seed)")
    p.add_argument("--history", help="history CSV path "
                                     "(default <out>.history.csv)")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a dataset")
    p.add_argument("--model", required=True, help="model file path")
    p.add_argument("--data", required=True, help="dataset path")
    p.add_argument("--report", required=True, help="output report JSON path")
    p.add_argument("--render-dir", default="panels",
                   help="directory for rendered panels (default panels)")
    p.add_argument("--render-count", type=int, default=0,
                   help="how many samples to render (default 0)")
    p.add_argument("--detect-threshold", type=float, dest="detect_threshold",
                   help="min peak flux to declare a class present")
    p.add_argument("--noise-threshold", type=float, dest="noise_threshold",
                   help="max tolerable wrong-class flux")
    p.add_argument("--bins", type=int, help="histogram bins (default 20)")
    p.add_argument("--render-scale", type=int, dest="render_scale",
                   help="panel upscale factor (default 4)")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one PGM image")
    p.add_argument("--model", required=True, help="model file path")
    p.add_argument("--image", required=True,
                   help="input PGM (P5), dark ink on light ground")
    p.add_argument("--out-prefix", required=True, dest="out_prefix",
                   help="prefix for per-class output PGMs")
    p.add_argument("--detect-threshold", type=float, dest="detect_threshold",
                   default=0.5, help="detection threshold (default 0.5)")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FormatError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ContentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (GenerationError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
