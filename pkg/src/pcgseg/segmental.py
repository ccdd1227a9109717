"""Segment datasets, CNN training with best-validation checkpointing, and recording votes."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ABNORMAL, NORMAL
from .metrics import Metrics, evaluate
from .neuralnet import SEGMENT_LENGTH, Network, NonFiniteGradient, adagrad_step, build_network
from .segmenter import CardiacCycle
from .signal_io import normalize_array

log = logging.getLogger(__name__)

MIN_SEGMENT = 400
MAX_SEGMENT = 1200
THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
UNSEGMENTABLE = -1


@dataclass
class SegmentDataset:
    segments: np.ndarray  # (n, 1200)
    lengths: np.ndarray
    labels: np.ndarray
    parents: List[str]
    split: str = "train"
    total_cycles: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def retention(self) -> float:
        return len(self) / self.total_cycles if self.total_cycles else 0.0

    def subset(self, ids, split: str) -> "SegmentDataset":
        ids = set(ids)
        keep = np.array([p in ids for p in self.parents], dtype=bool)
        return SegmentDataset(self.segments[keep], self.lengths[keep], self.labels[keep],
                              [p for p, k in zip(self.parents, keep) if k], split, int(keep.sum()))

    def recording_ids(self) -> List[str]:
        return list(dict.fromkeys(self.parents))


def pad_segment(x: np.ndarray, length: int = SEGMENT_LENGTH) -> np.ndarray:
    out = np.zeros(length)
    out[: len(x)] = x
    return out


def make_segment_dataset(items: Sequence[Tuple[str, np.ndarray, Sequence[CardiacCycle], Optional[int]]],
                         split: str = "train", min_len: int = MIN_SEGMENT, max_len: int = MAX_SEGMENT) -> SegmentDataset:
    """One zero-padded, normalized segment per cycle whose length lies in ``[min_len, max_len]``.

    ``items`` holds ``(record_id, signal, cycles, label)`` tuples; segments
    inherit their recording's label (``-1`` when unlabelled).
    """
    segs, lengths, labels, parents = [], [], [], []
    total = 0
    for rid, signal, cycles, label in items:
        for c in cycles:
            total += 1
            n = c.cycle_end - c.s1_start
            if n < min_len or n > max_len or c.cycle_end > len(signal):
                continue
            segs.append(pad_segment(normalize_array(signal[c.s1_start : c.cycle_end]), max_len))
            lengths.append(n)
            labels.append(-1 if label is None else int(label))
            parents.append(rid)
    seg_arr = np.vstack(segs) if segs else np.zeros((0, max_len))
    return SegmentDataset(seg_arr, np.array(lengths, dtype=int), np.array(labels, dtype=int), parents, split, total)


def split_recordings(ids: Sequence[str], labels: Sequence[int], val_fraction: float = 0.1, seed: int = 0) -> Tuple[List[str], List[str]]:
    """Stratified recording-level split into (train, validation) id lists."""
    ids = list(ids)
    labels = np.asarray(labels, dtype=int)
    if len(ids) < 2:
        raise ValueError("need at least two recordings to hold out a validation split")
    rng = np.random.default_rng(seed)
    val = []
    for cls in (NORMAL, ABNORMAL):
        members = [ids[i] for i in np.flatnonzero(labels == cls)]
        if not members:
            continue
        members = [members[i] for i in rng.permutation(len(members))]
        k = int(round(val_fraction * len(members)))
        if len(members) > 1:
            k = max(1, min(k, len(members) - 1))
        val += members[:k]
    val_set = set(val)
    train = [i for i in ids if i not in val_set]
    if not train or not val:
        raise ValueError("train/validation split left one side empty")
    return train, [i for i in ids if i in val_set]


def assert_disjoint(*splits: Sequence[str]) -> None:
    seen: Dict[str, int] = {}
    for k, ids in enumerate(splits):
        for rid in set(ids):
            if rid in seen and seen[rid] != k:
                raise ValueError(f"recording {rid} appears in more than one split")
            seen[rid] = k


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.01
    l2: float = 1e-4
    dropout: float = 0.5
    class_weighting: bool = True
    val_fraction: float = 0.1


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    network: Network
    best_epoch: int
    best_val_accuracy: float
    log: List[EpochLog]
    train_ids: List[str]
    val_ids: List[str]
    config: TrainConfig

    def checkpoint(self) -> dict:
        state = self.network.state_dict()
        state.update(epoch=self.best_epoch, val_accuracy=self.best_val_accuracy,
                     hyperparameters=asdict(self.config), train_ids=self.train_ids, val_ids=self.val_ids)
        return state


def segment_accuracy(net: Network, ds: SegmentDataset) -> float:
    if len(ds) == 0:
        return 0.0
    pred = np.argmax(net.predict_proba(ds.segments), axis=1)
    return float(np.mean(pred == ds.labels))


def train_segmental_cnn(dataset: SegmentDataset, config: str = "FCNN-Small", hp: Optional[TrainConfig] = None,
                        seed: int = 0, val_dataset: Optional[SegmentDataset] = None, progress=None) -> TrainResult:
    """Shuffled mini-batch AdaGrad; keeps the parameters of the epoch with the best validation accuracy.

    Without ``val_dataset`` the recordings are split 90/10 (stratified, by
    recording) before training.
    """
    hp = hp or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty segment dataset")
    if val_dataset is None:
        ids = dataset.recording_ids()
        if len(ids) < 2:
            raise ValueError("cannot split a dataset from fewer than two recordings into train/validation")
        first = {}
        for p, lab in zip(dataset.parents, dataset.labels):
            first.setdefault(p, lab)
        train_ids, val_ids = split_recordings(ids, [first[i] for i in ids], hp.val_fraction, seed)
        train_ds, val_ds = dataset.subset(train_ids, "train"), dataset.subset(val_ids, "val")
    else:
        train_ds, val_ds = dataset, val_dataset
        train_ids, val_ids = train_ds.recording_ids(), val_ds.recording_ids()
    assert_disjoint(train_ids, val_ids)
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train or validation split holds no segments")

    net = build_network(config, seed, dataset.segments.shape[1], hp.dropout)
    rng = np.random.default_rng(seed)
    y = train_ds.labels
    if hp.class_weighting and np.any(y == ABNORMAL) and np.any(y == NORMAL):
        weights = np.where(y == ABNORMAL, np.sum(y == NORMAL) / np.sum(y == ABNORMAL), 1.0)
    else:
        weights = np.ones(len(y))
    params = net.parameters()
    exempt = net.bias_keys()
    best_acc, best_epoch, best_params = -1.0, 0, None
    history: List[EpochLog] = []
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(train_ds))
        total, count = 0.0, 0
        for start in range(0, len(order), hp.batch_size):
            idx = order[start : start + hp.batch_size]
            loss = net.loss_and_grad(train_ds.segments[idx], y[idx], weights[idx], train=True, rng=rng)
            if not np.isfinite(loss):
                raise NonFiniteGradient(f"training diverged at epoch {epoch} (loss {loss})")
            try:
                adagrad_step(params, net.gradients(), net.accumulators, hp.lr, hp.l2, exempt)
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(f"training diverged at epoch {epoch}: {exc}") from None
            total += loss * len(idx)
            count += len(idx)
        val_acc = segment_accuracy(net, val_ds)
        history.append(EpochLog(epoch, total / count, val_acc))
        if progress:
            progress(history[-1])
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, total / count, val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_params = {k: v.copy() for k, v in params.items()}
            best_acc_state = {k: v.copy() for k, v in net.accumulators.items()}
    for k, v in best_params.items():
        params[k][...] = v
    for k, v in best_acc_state.items():
        net.accumulators[k][...] = v
    return TrainResult(net, best_epoch, best_acc, history, train_ids, val_ids, hp)


def classify_segments(net: Network, segments) -> Tuple[np.ndarray, np.ndarray]:
    """Abnormal probability and argmax label per segment (eval mode)."""
    segs = np.atleast_2d(np.asarray(segments, dtype=np.float64))
    if segs.shape[1] != net.input_length:
        raise ValueError(f"segments of length {segs.shape[1]} do not match network input {net.input_length}")
    p = net.predict_proba(segs)
    return p[:, ABNORMAL], np.argmax(p, axis=1)


def vote(segment_labels: Sequence[int], threshold: float) -> int:
    """Abnormal iff the abnormal proportion strictly exceeds ``threshold``; -1 when there are no segments."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    labels = np.asarray(segment_labels, dtype=int)
    if len(labels) == 0:
        return UNSEGMENTABLE
    return ABNORMAL if np.mean(labels == ABNORMAL) > threshold else NORMAL


def abnormal_proportions(parents: Sequence[str], segment_labels: Sequence[int], ids: Sequence[str]) -> Dict[str, Optional[float]]:
    """Per-recording share of abnormal segments (None for recordings without segments)."""
    counts: Dict[str, List[int]] = {}
    for p, lab in zip(parents, segment_labels):
        counts.setdefault(p, []).append(int(lab))
    return {rid: (float(np.mean(np.array(counts[rid]) == ABNORMAL)) if rid in counts else None) for rid in ids}


def tune_threshold(proportions: Sequence[float], truth: Sequence[int], grid: Sequence[float] = THRESHOLD_GRID) -> float:
    """Vote threshold from ``grid`` maximizing recording accuracy; ties go to the lower threshold."""
    props = np.asarray(proportions, dtype=np.float64)
    t = np.asarray(truth, dtype=int)
    if len(props) == 0:
        raise ValueError("empty validation set")
    best_thr, best_acc = None, -1.0
    for thr in grid:
        acc = float(np.mean((props > thr).astype(int) == t))
        if acc > best_acc:
            best_thr, best_acc = float(thr), acc
    return best_thr


@dataclass
class RecordingPredictions:
    ids: List[str]
    scores: List[float]
    labels: List[int]
    truth: List[int]
    unsegmentable: List[str] = field(default_factory=list)

    def metrics(self) -> Metrics:
        return evaluate(self.labels, self.truth, self.scores)


def predict_recordings(net: Network, ds: SegmentDataset, ids: Sequence[str], truth: Dict[str, int], threshold: float) -> RecordingPredictions:
    _, seg_labels = classify_segments(net, ds.segments) if len(ds) else (None, np.zeros(0, dtype=int))
    props = abnormal_proportions(ds.parents, seg_labels, ids)
    out = RecordingPredictions([], [], [], [])
    for rid in ids:
        p = props[rid]
        if p is None:
            out.unsegmentable.append(rid)
            continue
        out.ids.append(rid)
        out.scores.append(p)
        out.labels.append(ABNORMAL if p > threshold else NORMAL)
        out.truth.append(int(truth[rid]))
    return out


def write_predictions_csv(path, preds: RecordingPredictions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "score", "label", "truth"])
        for rid, s, lab, t in zip(preds.ids, preds.scores, preds.labels, preds.truth):
            w.writerow([rid, repr(float(s)), lab, t])


def read_predictions_csv(path) -> RecordingPredictions:
    out = RecordingPredictions([], [], [], [])
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.ids.append(row["id"])
            out.scores.append(float(row["score"]))
            out.labels.append(int(row["label"]))
            out.truth.append(int(row["truth"]))
    return out


def write_training_log(path, history: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_accuracy"])
        for e in history:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_accuracy)])
