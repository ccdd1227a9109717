"""Loading, resampling and normalizing heart sound recordings."""
from __future__ import annotations

import csv
import wave
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import ABNORMAL, NORMAL

PROCESSING_RATE = 1000


class FormatError(ValueError):
    """Raised when an input file does not match the expected format."""


@dataclass(frozen=True)
class Recording:
    id: str
    samples: np.ndarray
    sample_rate: int
    label: Optional[int] = None

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if len(self.samples) == 0:
            raise ValueError("empty recording")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def load_wav(path, record_id: Optional[str] = None) -> Recording:
    """Read a 16-bit PCM mono WAV file, scaling samples to [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: unreadable WAV file ({exc})") from exc
    if channels != 1:
        raise FormatError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    if n == 0:
        raise FormatError(f"{path}: empty recording")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Recording(record_id or path.stem, samples, rate)


def write_wav(path, recording: Recording) -> None:
    """Write a recording as 16-bit PCM mono; values are clipped to the int16 range."""
    ints = np.clip(np.round(recording.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(recording.sample_rate))
        wf.writeframes(ints.tobytes())


def resample(r: Recording, target_rate: int) -> Recording:
    """Linear-interpolation resampling to ``target_rate``."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == r.sample_rate:
        return r
    n_in = len(r.samples)
    n_out = max(1, int(round(n_in * target_rate / r.sample_rate)))
    t_out = np.arange(n_out) / target_rate
    t_in = np.arange(n_in) / r.sample_rate
    out = np.interp(t_out, t_in, r.samples)
    return replace(r, samples=out, sample_rate=int(target_rate))


def normalize_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.max() == x.min():
        # constant input; the rounded mean may leave a spurious residue
        return np.zeros_like(x)
    # already normalized: return unchanged so that normalization is idempotent bit for bit
    if np.max(np.abs(x)) == 1.0 and abs(x.mean()) < 1e-12:
        return x.copy()
    centered = x - x.mean()
    peak = np.max(np.abs(centered))
    if peak == 0:
        return centered
    return centered / peak


def normalize(r: Recording) -> Recording:
    """Remove the mean and scale to unit peak magnitude. All-zero input is returned as is."""
    return replace(r, samples=normalize_array(r.samples))


def load_labels(path) -> Dict[str, int]:
    """Read a ``name,label`` CSV where 1 is abnormal and -1 is normal."""
    labels: Dict[str, int] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            if len(row) < 2:
                raise FormatError(f"{path}:{lineno}: expected 'name,label'")
            name, value = row[0].strip(), row[1].strip()
            if value not in ("1", "-1"):
                if lineno == 1:
                    continue  # header row
                raise FormatError(f"{path}:{lineno}: label must be 1 or -1, got {value!r}")
            if name in labels:
                raise FormatError(f"{path}:{lineno}: duplicate record id {name!r}")
            labels[name] = ABNORMAL if value == "1" else NORMAL
    return labels


def write_labels(path, labels: Dict[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for name, lab in labels.items():
            w.writerow([name, 1 if lab == ABNORMAL else -1])


def load_csv_signal(path, sample_rate: int = PROCESSING_RATE, record_id: Optional[str] = None) -> Recording:
    """Read a one-column CSV of amplitudes."""
    path = Path(path)
    values = np.loadtxt(path, delimiter=",", ndmin=1, dtype=np.float64)
    if values.ndim != 1:
        raise FormatError(f"{path}: expected a single column")
    return Recording(record_id or path.stem, values, sample_rate)


def write_csv_signal(path, samples: np.ndarray) -> None:
    np.savetxt(path, np.asarray(samples, dtype=np.float64), fmt="%.17g")


def prepare(r: Recording, rate: int = PROCESSING_RATE) -> Recording:
    """Resample to the processing rate and normalize."""
    return normalize(resample(r, rate))
