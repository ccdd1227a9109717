"""End-to-end experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import FittedPipeline, fit_pipeline, lasso_select, stepwise_select
from .denoise import denoise
from .features import FEATURE_NAMES, N_FEATURES, FeatureVector, apply_medians, impute_median, recording_features
from .metrics import Metrics, evaluate
from .segmental import (
    RecordingPredictions,
    SegmentDataset,
    TrainConfig,
    TrainResult,
    abnormal_proportions,
    assert_disjoint,
    classify_segments,
    make_segment_dataset,
    predict_recordings,
    train_segmental_cnn,
    tune_threshold,
)
from .segmenter import CardiacCycle, default_emissions, segment_signal
from .signal_io import PROCESSING_RATE, Recording, prepare

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    id: str
    signal: np.ndarray  # 1000 Hz, normalized
    label: Optional[int]
    cycles: List[CardiacCycle]
    denoised: np.ndarray
    snr_db: float


def prepare_recording(rec: Recording, emissions=None, cycles: Optional[List[CardiacCycle]] = None,
                      use_denoise: bool = True) -> Prepared:
    """Resample, normalize, denoise and (unless ``cycles`` are given) segment one recording."""
    r = prepare(rec, PROCESSING_RATE)
    x = r.samples
    if use_denoise and len(x) >= 32:
        den, snr = denoise(x)
    else:
        den, snr = x, float("nan")
    if cycles is None:
        if len(x) < PROCESSING_RATE * 2:
            cycles = []
        else:
            cycles, _ = segment_signal(x, emissions if emissions is not None else default_emissions())
    return Prepared(r.id, x, rec.label, list(cycles), den, snr)


def prepare_all(recs: Sequence[Recording], emissions=None, use_denoise: bool = True,
                cycles_by_id: Optional[Dict[str, List[CardiacCycle]]] = None) -> List[Prepared]:
    em = emissions if emissions is not None else default_emissions()
    return [prepare_recording(r, em, None if cycles_by_id is None else cycles_by_id.get(r.id, []), use_denoise) for r in recs]


def segment_items(prepared: Sequence[Prepared]):
    return [(p.id, p.signal, p.cycles, p.label) for p in prepared]


# ---------------------------------------------------------------- CNN track


@dataclass
class CnnOutcome:
    train: TrainResult
    threshold: float
    predictions: RecordingPredictions
    metrics: Metrics
    retention: float

    def summary(self) -> dict:
        d = self.metrics.to_dict()
        d.update(threshold=self.threshold, best_epoch=self.train.best_epoch,
                 best_val_segment_accuracy=self.train.best_val_accuracy,
                 unsegmentable=len(self.predictions.unsegmentable), segment_retention=self.retention)
        return d


def tune_on_validation(net, val_ds: SegmentDataset, truth: Dict[str, int]) -> float:
    ids = val_ds.recording_ids()
    _, seg_labels = classify_segments(net, val_ds.segments)
    props = abnormal_proportions(val_ds.parents, seg_labels, ids)
    return tune_threshold([props[i] for i in ids], [truth[i] for i in ids])


def train_cnn(train: Sequence[Prepared], config: str = "FCNN-Small", hp: Optional[TrainConfig] = None,
              seed: int = 0, progress=None) -> Tuple[TrainResult, float]:
    """Train on segments of ``train`` and tune the vote threshold on its validation recordings."""
    ds = make_segment_dataset(segment_items(train))
    result = train_segmental_cnn(ds, config, hp, seed, progress=progress)
    truth = {p.id: int(p.label) for p in train}
    return result, tune_on_validation(result.network, ds.subset(result.val_ids, "val"), truth)


def cnn_track(train: Sequence[Prepared], test: Sequence[Prepared], config: str = "FCNN-Small",
              hp: Optional[TrainConfig] = None, seed: int = 0, progress=None) -> CnnOutcome:
    assert_disjoint([p.id for p in train], [p.id for p in test])
    result, threshold = train_cnn(train, config, hp, seed, progress)
    truth = {p.id: int(p.label) for p in test}
    ds = make_segment_dataset(segment_items(train))
    test_ds = make_segment_dataset(segment_items(test), "test")
    preds = predict_recordings(result.network, test_ds, [p.id for p in test], truth, threshold)
    return CnnOutcome(result, threshold, preds, preds.metrics(), ds.retention)


# ---------------------------------------------------------------- feature track


def feature_vector(p: Prepared) -> FeatureVector:
    if not p.cycles:
        return FeatureVector(p.id, np.zeros(N_FEATURES), np.ones(N_FEATURES, dtype=bool))
    return recording_features(p.denoised, p.cycles, p.id, p.snr_db, PROCESSING_RATE)


def feature_matrix(vectors: Sequence[FeatureVector]) -> Tuple[np.ndarray, np.ndarray]:
    return np.vstack([v.values for v in vectors]), np.vstack([v.missing_mask for v in vectors])



@dataclass
class FeatureOutcome:
    pipeline: FittedPipeline
    subset: List[int]
    lambda_star: Optional[float]
    medians: np.ndarray
    metrics: Metrics
    scores: List[float]
    predictions: List[int]

    @property
    def selected_names(self) -> List[str]:
        return [FEATURE_NAMES[i] for i in self.subset]

    def summary(self) -> dict:
        d = self.metrics.to_dict()
        d.update(learner=self.pipeline.learner, hyperparameters=self.pipeline.params, lambda_star=self.lambda_star,
                 selected_features=self.selected_names)
        return d


def feature_track(train_vecs: Sequence[FeatureVector], train_y: Sequence[int], test_vecs: Sequence[FeatureVector],
                  test_y: Sequence[int], learner: str = "logistic", params: Optional[dict] = None,
                  selection: str = "lasso", seed: int = 0, lambda_grid: Optional[Sequence[float]] = None) -> FeatureOutcome:
    Xtr, Mtr = feature_matrix(train_vecs)
    Xtr, medians = impute_median(Xtr, Mtr)
    Xte, Mte = feature_matrix(test_vecs)
    Xte = apply_medians(Xte, Mte, medians)
    ytr = np.asarray(train_y, dtype=int)
    lam = None
    if selection == "lasso":
        subset, lam = lasso_select(Xtr, ytr, lambda_grid, seed)
    elif selection in ("forward", "backward"):
        subset = stepwise_select(selection, Xtr, ytr, seed=seed)
    elif selection == "none":
        subset = list(range(Xtr.shape[1]))
    else:
        raise ValueError(f"unknown selection method {selection!r}")
    if not subset:
        subset = list(range(Xtr.shape[1]))
        log.warning("feature selection kept no features; falling back to all %d", len(subset))
    pipe = fit_pipeline(learner, Xtr, ytr, params, subset, True, seed)
    scores = pipe.scores(Xte)
    pred = pipe.predict(Xte)
    return FeatureOutcome(pipe, subset, lam, medians, evaluate(pred, test_y, scores), list(map(float, scores)), list(map(int, pred)))
