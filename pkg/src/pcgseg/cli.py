"""Command-line entry point: ``pcgseg <subcommand> [options]``.

Exit status is 0 on success, 1 on a usage error and 2 when input data is
missing or malformed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .baselines import LEARNERS, cross_validate, save_pipeline
from .denoise import WAVELETS, denoise
from .features import (
    FeatureVector,
    apply_medians,
    read_feature_csv,
    write_feature_csv,
    write_medians_csv,
)
from .metrics import evaluate, write_metrics_json, write_roc_csv
from .neuralnet import PRESETS, Conv1D, FilterBank, load_network, save_network
from .pipeline import Prepared, cnn_track, feature_track, feature_vector, prepare_all, train_cnn
from .segmental import RecordingPredictions, TrainConfig, pad_segment, read_predictions_csv, write_predictions_csv, write_training_log
from .segmenter import default_emissions, load_emissions, read_cycles, save_emissions, write_cycles
from .signal_io import FormatError, Recording, load_csv_signal, load_labels, load_wav, prepare, write_csv_signal
from .synthgen import MODERATE, SpecRanges, generate_dataset, write_dataset

log = logging.getLogger("pcgseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_recordings(data_dir: Path, labels: Optional[Dict[str, int]]) -> List[Recording]:
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    paths = sorted(data_dir.glob("*.wav"))
    if not paths:
        raise FormatError(f"no .wav files in {data_dir}")
    recs = []
    for p in paths:
        rec = load_wav(p, p.stem)
        if labels is not None:
            if rec.id not in labels:
                raise FormatError(f"{p.name}: no label in the reference file")
            rec = Recording(rec.id, rec.samples, rec.sample_rate, labels[rec.id])
        recs.append(rec)
    return recs


def _labels_for(args) -> Optional[Dict[str, int]]:
    path = getattr(args, "labels", None)
    if path:
        return load_labels(path)
    default = Path(args.data) / "REFERENCE.csv"
    return load_labels(default) if default.exists() else None


def _prepare(args, labels_required: bool) -> List[Prepared]:
    labels = _labels_for(args)
    if labels_required and labels is None:
        raise FormatError("labels are required: pass --labels or put REFERENCE.csv in the data directory")
    recs = _read_recordings(Path(args.data), labels)
    cycles = read_cycles(args.cycles) if getattr(args, "cycles", None) else None
    emissions = load_emissions(args.emissions) if getattr(args, "emissions", None) else default_emissions()
    return prepare_all(recs, emissions, not getattr(args, "no_denoise", False), cycles)


def _parse_params(pairs: Sequence[str]) -> dict:
    params = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--param expects key=value, got {item!r}")
        params[key] = json.loads(value) if value[:1] in "[{" else _number(value)
    return params


def _number(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _read_signal(path: Path, rate: int) -> Recording:
    if path.suffix.lower() == ".wav":
        return load_wav(path, path.stem)
    return load_csv_signal(path, rate, path.stem)


def _write_matrix(path: Path, rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(rows):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> None:
    lo, hi = args.noise if args.noise else (None, None)
    ranges = MODERATE if args.moderate else SpecRanges()
    if lo is not None:
        ranges = SpecRanges(**{**ranges.__dict__, "noise_sd": (lo, hi)})
    records = generate_dataset(args.n, args.abnormal, ranges, args.seed, args.prefix)
    write_dataset(records, _out_dir(args))


def cmd_segment(args) -> None:
    out = _out_dir(args)
    if args.fit_emissions:
        save_emissions(out / "emissions.json", default_emissions(seed=args.seed))
    prepared = _prepare(args, labels_required=False)
    write_cycles(out / "cycles.csv", {p.id: p.cycles for p in prepared})


def cmd_features(args) -> None:
    prepared = _prepare(args, labels_required=False)
    write_feature_csv(_out_dir(args) / "features.csv", [feature_vector(p) for p in prepared])


def _labelled(vectors: List[FeatureVector], labels: Dict[str, int], what: str) -> List[int]:
    missing = [v.id for v in vectors if v.id not in labels]
    if missing:
        raise FormatError(f"{what}: no label for {', '.join(missing[:5])}")
    return [labels[v.id] for v in vectors]


def cmd_train_baseline(args) -> None:
    out = _out_dir(args)
    labels = load_labels(args.labels)
    train = read_feature_csv(args.features)
    ytr = _labelled(train, labels, "training features")
    test = read_feature_csv(args.test_features) if args.test_features else []
    test_labels = load_labels(args.test_labels) if args.test_labels else labels
    yte = _labelled(test, test_labels, "test features") if test else []
    params = _parse_params(args.param)
    outcome = feature_track(train, ytr, test or train, yte or ytr, args.learner, params, args.selection, args.seed)
    save_pipeline(out / "model.json", outcome.pipeline)
    write_medians_csv(out / "medians.csv", outcome.medians)
    with open(out / "selection.json", "w") as fh:
        json.dump({"method": args.selection, "lambda": outcome.lambda_star, "features": outcome.selected_names},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.cv:
        X = np.vstack([v.values for v in train])
        X = apply_medians(X, np.vstack([v.missing_mask for v in train]), outcome.medians)
        report = cross_validate(args.learner, X, ytr, {k: [v] for k, v in params.items()}, args.seed, outcome.subset)
        with open(out / "cv.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    if test:
        preds = RecordingPredictions([v.id for v in test], outcome.scores, outcome.predictions, yte)
        write_predictions_csv(out / "predictions.csv", preds)
        write_metrics_json(out / "metrics.json", outcome.metrics)
        write_roc_csv(out / "roc.csv", outcome.metrics.roc)


def cmd_train_cnn(args) -> None:
    out = _out_dir(args)
    hp = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, l2=args.l2, dropout=args.dropout,
                     class_weighting=not args.no_class_weighting, val_fraction=args.val_fraction)
    train = _prepare(args, labels_required=True)
    progress = (lambda e: log.info("epoch %d loss %.4f val %.3f", e.epoch, e.train_loss, e.val_accuracy)) if args.verbose else None
    if args.test_data:
        test_args = argparse.Namespace(**{**vars(args), "data": args.test_data, "labels": args.test_labels,
                                          "cycles": args.test_cycles})
        test = _prepare(test_args, labels_required=True)
        outcome = cnn_track(train, test, args.preset, hp, args.seed, progress)
        result, threshold = outcome.train, outcome.threshold
        write_predictions_csv(out / "predictions.csv", outcome.predictions)
        write_metrics_json(out / "metrics.json", outcome.metrics,
                           {k: v for k, v in outcome.summary().items() if k not in outcome.metrics.to_dict()})
        write_roc_csv(out / "roc.csv", outcome.metrics.roc)
    else:
        result, threshold = train_cnn(train, args.preset, hp, args.seed, progress)
    save_network(out / "network.json", result.network,
                 {k: v for k, v in result.checkpoint().items() if k not in ("params", "accumulators")} | {"threshold": threshold})
    write_training_log(out / "training_log.csv", result.log)


def cmd_evaluate(args) -> None:
    out = _out_dir(args)
    preds = read_predictions_csv(args.predictions)
    if not preds.ids:
        raise FormatError(f"{args.predictions}: no predictions")
    m = evaluate(preds.labels, preds.truth, preds.scores)
    write_metrics_json(out / "metrics.json", m)
    write_roc_csv(out / "roc.csv", m.roc)


def cmd_export_viz(args) -> None:
    out = _out_dir(args)
    net, _ = load_network(args.model)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, FilterBank):
            for conv, w in zip(layer.convs, layer.windows):
                _write_matrix(out / f"filters_layer{i}_w{w}.csv", conv.params["W"].reshape(-1, conv.params["W"].shape[2]))
        elif isinstance(layer, Conv1D):
            W = layer.params["W"]
            _write_matrix(out / f"filters_layer{i}_w{W.shape[2]}.csv", W.reshape(-1, W.shape[2]))
    if args.input is None:
        return
    seg = prepare(_read_signal(Path(args.input), args.rate)).samples
    if len(seg) > net.input_length:
        raise FormatError(f"input segment has {len(seg)} samples; the network accepts at most {net.input_length}")
    x = pad_segment(seg, net.input_length)
    for i, (layer, (_, act)) in enumerate(zip(net.layers, net.activations(x))):
        if isinstance(act, list):  # one map per filter-bank window
            named = [(f"_w{w}", m) for w, m in zip(layer.windows, act)]
        else:
            named = [("", act)]
        for suffix, m in named:
            _write_matrix(out / f"activations_layer{i}{suffix}.csv", np.clip(np.asarray(m)[0], 0.0, 1.0))


def cmd_denoise(args) -> None:
    rec = _read_signal(Path(args.input), args.rate)
    x = prepare(rec).samples
    clean, snr = denoise(x, args.wavelet, args.levels)
    out = _out_dir(args)
    write_csv_signal(out / f"{rec.id}_denoised.csv", clean)
    log.info("estimated SNR %.2f dB", snr)


# ---------------------------------------------------------------- parser


def _data_flags(p, cycles=True) -> None:
    p.add_argument("--data", required=True, help="directory of .wav recordings")
    p.add_argument("--labels", help="label CSV (default: REFERENCE.csv inside --data)")
    if cycles:
        p.add_argument("--cycles", help="cycle CSV to use instead of running the segmenter")
    p.add_argument("--emissions", help="emission parameters JSON (default: fitted on synthetic data)")
    p.add_argument("--no-denoise", action="store_true", help="skip wavelet denoising before feature extraction")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1)")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pcgseg", description="Heart sound segmentation and abnormality classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--abnormal", type=float, default=0.2, help="fraction of abnormal recordings")
    p.add_argument("--moderate", action="store_true", help="noisier recordings with fainter murmurs")
    p.add_argument("--noise", type=float, nargs=2, metavar=("LO", "HI"), help="noise SD range")
    p.add_argument("--prefix", default="s")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", parents=[common], help="write cycle boundaries for each recording")
    _data_flags(p, cycles=False)
    p.add_argument("--fit-emissions", action="store_true", help="also save the fitted emission parameters")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("features", parents=[common], help="write the 116-column feature CSV")
    _data_flags(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-baseline", parents=[common], help="feature selection and a classic classifier")
    p.add_argument("--features", required=True, help="training feature CSV")
    p.add_argument("--labels", required=True)
    p.add_argument("--test-features", help="held-out feature CSV; writes predictions and metrics")
    p.add_argument("--test-labels", help="labels of the held-out rows (default: --labels)")
    p.add_argument("--learner", choices=LEARNERS, default="logistic")
    p.add_argument("--selection", choices=("lasso", "forward", "backward", "none"), default="lasso")
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="learner hyperparameter (repeatable)")
    p.add_argument("--cv", action="store_true", help="also write a 10-fold CV report on the selected features")
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("train-cnn", parents=[common], help="train the segment-level CNN")
    _data_flags(p)
    p.add_argument("--preset", default="FCNN-Small", help=f"one of {', '.join(PRESETS)} or a configuration string")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--no-class-weighting", action="store_true")
    p.add_argument("--test-data", help="held-out recordings; writes predictions and metrics")
    p.add_argument("--test-labels")
    p.add_argument("--test-cycles")
    p.set_defaults(func=cmd_train_cnn)

    p = sub.add_parser("evaluate", parents=[common], help="metrics and ROC from a prediction CSV")
    p.add_argument("--predictions", required=True, help="CSV with columns id,score,label,truth")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-viz", parents=[common], help="filter weights and activations as CSV")
    p.add_argument("--model", required=True, help="network JSON written by train-cnn")
    p.add_argument("--input", help="segment as .wav or single-column .csv")
    p.add_argument("--rate", type=int, default=1000, help="sample rate of a .csv input")
    p.set_defaults(func=cmd_export_viz)

    p = sub.add_parser("denoise", parents=[common], help="wavelet-denoise one signal")
    p.add_argument("--input", required=True, help=".wav or single-column .csv")
    p.add_argument("--rate", type=int, default=1000, help="sample rate of a .csv input")
    p.add_argument("--wavelet", choices=sorted(WAVELETS), default="db4")
    p.add_argument("--levels", type=int, default=5)
    p.set_defaults(func=cmd_denoise)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            parser.error("--threads must be at least 1")
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except UsageError as exc:
        print(f"pcgseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ValueError, OSError, KeyError) as exc:
        print(f"pcgseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
