"""Seeded synthetic experiments: segmentation quality and the two classification tracks.

Run ``python3 -m pcgseg.experiment --out DIR`` to write ``segmentation.json``,
``cnn_metrics.json``, ``feature_metrics.json`` and ``timing.json`` into DIR.
Everything except the timing file is a pure function of the seeds.
"""
from __future__ import annotations

import argparse
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .pipeline import cnn_track, feature_track, feature_vector, prepare_all
from .segmental import TrainConfig
from .segmenter import default_emissions, segment_signal
from .signal_io import prepare
from .synthgen import MODERATE, SpecRanges, SyntheticRecord, generate_dataset


@dataclass(frozen=True)
class ExperimentSeeds:
    segmentation: int = 6
    train: int = 100
    test: int = 200
    model: int = 0


def true_onsets(rec: SyntheticRecord) -> Dict[str, np.ndarray]:
    """Every S1 and S2 onset the generator placed, including ones in partial cycles."""
    s = rec.spec
    period = 60.0 * 1000 / s.heart_rate_bpm
    ks = range(-1, int(len(rec.recording.samples) / period) + 2)
    return {
        "s1": np.array([round((k + s.phase) * period) for k in ks]),
        "s2": np.array([round((k + s.phase + s.systolic_fraction) * period) for k in ks]),
    }


def onset_errors(records: Sequence[SyntheticRecord], emissions=None) -> List[int]:
    """Distance in samples from each decoded S1/S2 onset to the nearest true onset of that sound."""
    em = emissions if emissions is not None else default_emissions()
    errors = []
    for rec in records:
        truth = true_onsets(rec)
        cycles, _ = segment_signal(prepare(rec.recording).samples, em)
        for c in cycles:
            errors.append(int(np.min(np.abs(truth["s1"] - c.s1_start))))
            errors.append(int(np.min(np.abs(truth["s2"] - c.s2_start))))
    return errors


def segmentation_quality(n: int = 50, noise_sd: float = 0.05, seed: int = 6, tolerance_ms: int = 20) -> dict:
    records = generate_dataset(n, 0.2, SpecRanges(noise_sd=(noise_sd, noise_sd)), seed, prefix="h")
    errors = np.array(onset_errors(records))
    return {
        "recordings": n,
        "decoded_onsets": int(errors.size),
        "within_tolerance": int(np.sum(errors <= tolerance_ms)),
        "fraction_within_tolerance": float(np.mean(errors <= tolerance_ms)) if errors.size else 0.0,
        "median_error_ms": float(np.median(errors)) if errors.size else None,
        "tolerance_ms": tolerance_ms,
    }


def classification_experiment(seeds: ExperimentSeeds = ExperimentSeeds(), ranges: SpecRanges = MODERATE,
                              epochs: int = 50, preset: str = "FCNN-Tiny", progress=None) -> dict:
    """Both tracks on 200 training recordings (17% abnormal) and a balanced 40-recording test set."""
    timing = {}
    t0 = time.perf_counter()
    train_recs = generate_dataset(200, 0.17, ranges, seeds.train, prefix="tr")
    test_recs = generate_dataset(40, 0.5, ranges, seeds.test, prefix="te")
    train = prepare_all([r.recording for r in train_recs])
    test = prepare_all([r.recording for r in test_recs])
    timing["prepare_s"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    feats = feature_track([feature_vector(p) for p in train], [p.label for p in train],
                          [feature_vector(p) for p in test], [p.label for p in test], seed=seeds.model)
    timing["feature_track_s"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    cnn = cnn_track(train, test, preset, TrainConfig(epochs=epochs), seeds.model, progress)
    timing["cnn_track_s"] = time.perf_counter() - t2
    timing["cnn_end_to_end_s"] = timing["prepare_s"] + timing["cnn_track_s"]

    cnn_summary = cnn.summary()
    cnn_summary["training_log"] = [[e.epoch, e.train_loss, e.val_accuracy] for e in cnn.train.log]
    return {"cnn": cnn_summary, "features": feats.summary(), "timing": timing}


def _dump(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run(out_dir, seeds: ExperimentSeeds = ExperimentSeeds(), epochs: int = 50, preset: str = "FCNN-Tiny",
        progress=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    seg = segmentation_quality(seed=seeds.segmentation)
    seg_time = time.perf_counter() - t0
    _dump(out / "segmentation.json", seg)
    result = classification_experiment(seeds, epochs=epochs, preset=preset, progress=progress)
    _dump(out / "cnn_metrics.json", result["cnn"])
    _dump(out / "feature_metrics.json", result["features"])
    _dump(out / "timing.json", {"segmentation_s": seg_time, **result["timing"]})
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    p = argparse.ArgumentParser(prog="python3 -m pcgseg.experiment", description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--preset", default="FCNN-Tiny")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    progress = (lambda e: print(f"epoch {e.epoch} loss {e.train_loss:.4f} val {e.val_accuracy:.3f}", flush=True)) if args.verbose else None
    with threadpool_limits(limits=args.threads):
        run(args.out, epochs=args.epochs, preset=args.preset, progress=progress)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
