"""Deterministic synthetic phonocardiograms with exact cycle annotations."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.signal import butter, sosfiltfilt

from . import ABNORMAL, NORMAL
from .segmenter import CardiacCycle, write_cycles
from .signal_io import PROCESSING_RATE, Recording, write_labels, write_wav

RATE = PROCESSING_RATE


@dataclass(frozen=True)
class SynthSpec:
    heart_rate_bpm: float = 75.0
    duration_s: float = 8.0
    s1_freq: float = 50.0
    s2_freq: float = 70.0
    s1_ms: float = 120.0
    s2_ms: float = 100.0
    s1_amp: float = 1.0
    s2_amp: float = 0.8
    # S1 onset to S2 onset, as a fraction of the cycle
    systolic_fraction: float = 0.375
    murmur_amp: float = 0.0
    murmur_band: Tuple[float, float] = (150.0, 400.0)
    noise_sd: float = 0.0
    # delay of the first S1 onset, as a fraction of the cycle
    phase: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not 50.0 <= self.heart_rate_bpm <= 150.0:
            raise ValueError(f"heart_rate_bpm must lie in [50, 150], got {self.heart_rate_bpm}")
        nyq = RATE / 2
        for name, f in (("s1_freq", self.s1_freq), ("s2_freq", self.s2_freq)):
            if not 0 < f < nyq:
                raise ValueError(f"{name} must lie in (0, {nyq}) Hz")
        lo, hi = self.murmur_band
        if not 0 < lo < hi < nyq:
            raise ValueError(f"murmur_band must satisfy 0 < low < high < {nyq}")
        if self.noise_sd < 0 or self.murmur_amp < 0:
            raise ValueError("noise_sd and murmur_amp must be non-negative")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if not 0 <= self.phase < 1:
            raise ValueError("phase must lie in [0, 1)")
        cycle_ms = 60000.0 / self.heart_rate_bpm
        sys_ms = self.systolic_fraction * cycle_ms
        if self.s1_ms >= sys_ms or self.s2_ms >= cycle_ms - sys_ms:
            raise ValueError("S1/S2 durations do not fit within the cycle")

    @property
    def label(self) -> int:
        return ABNORMAL if self.murmur_amp > 0 else NORMAL


@dataclass
class SyntheticRecord:
    recording: Recording
    cycles: List[CardiacCycle]
    label: int
    spec: SynthSpec


def _burst(n: int, freq: float, amp: float) -> np.ndarray:
    t = np.arange(n)
    centre = (n - 1) / 2
    sigma = n / 4
    env = np.exp(-0.5 * ((t - centre) / sigma) ** 2)
    return amp * env * np.sin(2 * np.pi * freq * t / RATE)


def generate_recording(spec: SynthSpec, record_id: str = "synth") -> SyntheticRecord:
    spec.validate()
    n = int(round(spec.duration_s * RATE))
    cycle = 60.0 * RATE / spec.heart_rate_bpm
    s1_len = int(round(spec.s1_ms * RATE / 1000))
    s2_len = int(round(spec.s2_ms * RATE / 1000))
    murmur_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))

    x = np.zeros(n)
    murmur_mask = np.zeros(n)
    cycles: List[CardiacCycle] = []
    # start one cycle early so that a leading partial cycle is also drawn
    k = -1
    while True:
        onset = int(round((k + spec.phase) * cycle))
        if onset >= n:
            break
        s2_on = int(round((k + spec.phase + spec.systolic_fraction) * cycle))
        end = int(round((k + 1 + spec.phase) * cycle))
        for start, length, f, a in ((onset, s1_len, spec.s1_freq, spec.s1_amp), (s2_on, s2_len, spec.s2_freq, spec.s2_amp)):
            b = _burst(length, f, a)
            lo, hi = max(start, 0), min(start + length, n)
            if hi > lo:
                x[lo:hi] += b[lo - start : hi - start]
        sys_lo, sys_hi = max(onset + s1_len, 0), min(s2_on, n)
        if sys_hi > sys_lo:
            m = sys_hi - sys_lo
            taper = np.ones(m)
            ramp = min(10, m // 2)
            if ramp:
                taper[:ramp] = np.linspace(0, 1, ramp)
                taper[-ramp:] = np.linspace(1, 0, ramp)
            murmur_mask[sys_lo:sys_hi] = taper
        if onset >= 0 and end <= n:
            cycles.append(CardiacCycle(onset, onset + s1_len, s2_on, s2_on + s2_len, end))
        k += 1

    if spec.murmur_amp > 0:
        sos = butter(4, spec.murmur_band, btype="bandpass", fs=RATE, output="sos")
        band = sosfiltfilt(sos, murmur_rng.standard_normal(n))
        band /= np.std(band)
        x += spec.murmur_amp * spec.s1_amp * band * murmur_mask
    if spec.noise_sd > 0:
        x += noise_rng.normal(0.0, spec.noise_sd, n)
    return SyntheticRecord(Recording(record_id, x, RATE, spec.label), cycles, spec.label, spec)


@dataclass(frozen=True)
class SpecRanges:
    """Uniform sampling ranges for ``generate_dataset``."""

    heart_rate_bpm: Tuple[float, float] = (55.0, 110.0)
    duration_s: Tuple[float, float] = (7.0, 10.0)
    s1_freq: Tuple[float, float] = (40.0, 60.0)
    s2_freq: Tuple[float, float] = (60.0, 80.0)
    s1_amp: Tuple[float, float] = (0.8, 1.2)
    s2_amp: Tuple[float, float] = (0.6, 1.0)
    systolic_fraction: Tuple[float, float] = (0.34, 0.40)
    murmur_amp: Tuple[float, float] = (0.15, 0.35)
    noise_sd: Tuple[float, float] = (0.02, 0.08)


# Noisier recordings with fainter murmurs than the defaults; used by the
# end-to-end experiments.
MODERATE = SpecRanges(murmur_amp=(0.1, 0.3), noise_sd=(0.03, 0.12))


def generate_dataset(
    n: int, abnormal_fraction: float, ranges: Optional[SpecRanges] = None, seed: int = 0, prefix: str = "s"
) -> List[SyntheticRecord]:
    """Draw ``n`` recordings, exactly ``round(n * abnormal_fraction)`` of them abnormal."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0.0 <= abnormal_fraction <= 1.0:
        raise ValueError("abnormal_fraction must lie in [0, 1]")
    ranges = ranges or SpecRanges()
    rng = np.random.default_rng(seed)
    n_abn = int(round(n * abnormal_fraction))
    abnormal = np.zeros(n, dtype=bool)
    abnormal[rng.permutation(n)[:n_abn]] = True
    out = []
    for i in range(n):
        u = lambda lohi: float(rng.uniform(*lohi))  # noqa: E731
        spec = SynthSpec(
            heart_rate_bpm=u(ranges.heart_rate_bpm),
            duration_s=round(u(ranges.duration_s), 3),
            s1_freq=u(ranges.s1_freq),
            s2_freq=u(ranges.s2_freq),
            s1_amp=u(ranges.s1_amp),
            s2_amp=u(ranges.s2_amp),
            systolic_fraction=u(ranges.systolic_fraction),
            noise_sd=u(ranges.noise_sd),
            phase=float(rng.uniform(0, 1)),
            seed=int(rng.integers(2**31)),
        )
        mur = u(ranges.murmur_amp)
        if abnormal[i]:
            spec = replace(spec, murmur_amp=mur)
        out.append(generate_recording(spec, f"{prefix}{i:04d}"))
    return out


def write_dataset(records: List[SyntheticRecord], out_dir) -> Dict[str, Path]:
    """Write WAVs, ``REFERENCE.csv`` labels and ``cycles.csv`` ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        x = rec.recording.samples
        peak = np.max(np.abs(x))
        scaled = x * (0.9 / peak) if peak > 0 else x
        write_wav(out / f"{rec.recording.id}.wav", replace(rec.recording, samples=scaled))
    write_labels(out / "REFERENCE.csv", {r.recording.id: r.label for r in records})
    write_cycles(out / "cycles.csv", {r.recording.id: r.cycles for r in records})
    return {"labels": out / "REFERENCE.csv", "cycles": out / "cycles.csv"}
