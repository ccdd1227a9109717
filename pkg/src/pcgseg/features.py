"""Per-cycle time, frequency and transform-domain descriptors.

Each cardiac cycle yields 58 descriptors; a recording is summarized by the
mean and sample SD of every descriptor over its cycles (116 values).
Descriptors that cannot be computed are masked rather than filled, and
masked entries are later imputed with training-set medians.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .segmenter import CardiacCycle

WINDOWS = ("s1", "sys", "s2", "dia", "cycle")
STATES = WINDOWS[:4]
MIN_WINDOW = 8
CEPSTRUM_MIN_QUEFRENCY_S = 0.002
MIN_NFFT = 1000


def _descriptor_names() -> List[str]:
    names = [f"dur_{w}" for w in WINDOWS]
    names += [f"ratio_{w}_cycle" for w in STATES]
    names += ["ratio_sys_dia", "ratio_s1_s2", "ratio_s1s2_cycle", "heart_rate_bpm",
              "int_s1_to_s2", "int_s2_to_end", "ratio_s1_to_s2_cycle"]
    names += [f"abs_amp_{w}" for w in WINDOWS]
    names += [f"power_{w}" for w in WINDOWS]
    names += ["zcr_cycle"]
    names += [f"amp_at_peak_{w}" for w in WINDOWS]
    names += [f"peak_freq_{w}" for w in WINDOWS]
    names += [f"bw3_{w}" for w in WINDOWS] + [f"bw6_{w}" for w in STATES]
    names += [f"q3_{w}" for w in WINDOWS] + [f"q6_{w}" for w in STATES]
    names += ["thd_cycle", "cepstrum_peak_cycle", "snr_dwt"]
    return names


DESCRIPTOR_NAMES: Tuple[str, ...] = tuple(_descriptor_names())
N_DESCRIPTORS = len(DESCRIPTOR_NAMES)
FEATURE_NAMES: Tuple[str, ...] = tuple(f"{n}_{stat}" for n in DESCRIPTOR_NAMES for stat in ("mean", "sd"))
N_FEATURES = len(FEATURE_NAMES)

# feature-type groups, keyed by descriptor-name prefix
FEATURE_TYPES = {
    "interval": ("dur_", "ratio_", "heart_rate", "int_"),
    "absolute_amplitude": ("abs_amp_",),
    "total_power": ("power_",),
    "zero_crossing_rate": ("zcr_",),
    "amplitude_at_peak": ("amp_at_peak_",),
    "peak_frequency": ("peak_freq_",),
    "bandwidth": ("bw3_", "bw6_"),
    "q_factor": ("q3_", "q6_"),
    "thd": ("thd_",),
    "cepstrum": ("cepstrum_",),
    "snr": ("snr_",),
}
DOMAINS = {
    "time": ("interval", "absolute_amplitude", "total_power", "zero_crossing_rate", "amplitude_at_peak"),
    "frequency": ("peak_frequency", "bandwidth", "q_factor", "thd"),
    "transform": ("cepstrum", "snr"),
}


def feature_type(name: str) -> str:
    for kind, prefixes in FEATURE_TYPES.items():
        if name.startswith(prefixes):
            return kind
    raise KeyError(name)


def feature_domain(name: str) -> str:
    kind = feature_type(name)
    return next(d for d, kinds in DOMAINS.items() if kind in kinds)


@dataclass
class PowerSpectrum:
    frequencies: np.ndarray
    power: np.ndarray

    @property
    def resolution(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])


def spectrum(signal, rate: float, nfft: Optional[int] = None) -> PowerSpectrum:
    """One-sided Hann-windowed periodogram.

    Scaled so that a unit-amplitude sine on a bin centre has peak power 1/2
    regardless of length.
    """
    x = np.asarray(signal, dtype=np.float64)
    n = len(x)
    if n < MIN_WINDOW:
        raise ValueError(f"signal too short for a spectrum ({n} < {MIN_WINDOW} samples)")
    nfft = max(n, nfft or n)
    w = np.hanning(n + 2)[1:-1]  # no zero end points, so short windows keep all samples
    X = np.fft.rfft(x * w, nfft)
    p = np.abs(X) ** 2 / w.sum() ** 2
    p[1:] *= 2
    if nfft % 2 == 0:
        p[-1] /= 2
    return PowerSpectrum(np.fft.rfftfreq(nfft, 1.0 / rate), p)


def _crossing(freqs, power, peak, level, step):
    """Interpolated frequency where power falls below ``level`` walking from ``peak`` by ``step``."""
    i = peak
    while 0 <= i + step < len(power) and power[i + step] >= level:
        i += step
    j = i + step
    if not 0 <= j < len(power):
        return None
    # linear interpolation between bin i (>= level) and bin j (< level)
    frac = (power[i] - level) / (power[i] - power[j])
    return freqs[i] + frac * (freqs[j] - freqs[i])


def bandwidth(spec: PowerSpectrum, peak_index: int, drop_db: float) -> Optional[float]:
    """Width of the contiguous region around the peak within ``drop_db`` of it."""
    level = spec.power[peak_index] * 10 ** (-drop_db / 10)
    hi = _crossing(spec.frequencies, spec.power, peak_index, level, 1)
    lo = _crossing(spec.frequencies, spec.power, peak_index, level, -1)
    if hi is None:
        return None
    if lo is None:
        # peak region runs into DC: mirror the upper edge
        lo = -hi if peak_index == 0 else None
        if lo is None:
            return None
    return float(hi - lo)


def real_cepstrum(x: np.ndarray) -> np.ndarray:
    mag = np.abs(np.fft.fft(x))
    return np.real(np.fft.ifft(np.log(mag + 1e-12)))


@dataclass
class CycleDescriptor:
    values: np.ndarray
    missing_mask: np.ndarray

    def __post_init__(self):
        if len(self.values) != N_DESCRIPTORS or len(self.missing_mask) != N_DESCRIPTORS:
            raise ValueError(f"a cycle descriptor holds exactly {N_DESCRIPTORS} values")

    def __getitem__(self, name: str) -> float:
        i = DESCRIPTOR_NAMES.index(name)
        return float("nan") if self.missing_mask[i] else float(self.values[i])


def compute_cycle_descriptors(signal, cycle: CardiacCycle, rate: float = 1000.0, snr_db: float = float("nan")) -> CycleDescriptor:
    x = np.asarray(signal, dtype=np.float64)
    if cycle.cycle_end > len(x):
        raise ValueError("cycle extends beyond the signal")
    b = cycle.boundaries
    bounds = {"s1": (b[0], b[1]), "sys": (b[1], b[2]), "s2": (b[2], b[3]), "dia": (b[3], b[4]), "cycle": (b[0], b[4])}
    d = {}
    dur = {w: (hi - lo) / rate for w, (lo, hi) in bounds.items()}
    for w in WINDOWS:
        d[f"dur_{w}"] = dur[w]
    for w in STATES:
        d[f"ratio_{w}_cycle"] = dur[w] / dur["cycle"]
    d["ratio_sys_dia"] = dur["sys"] / dur["dia"]
    d["ratio_s1_s2"] = dur["s1"] / dur["s2"]
    d["ratio_s1s2_cycle"] = (dur["s1"] + dur["s2"]) / dur["cycle"]
    d["heart_rate_bpm"] = 60.0 / dur["cycle"]
    d["int_s1_to_s2"] = (b[2] - b[0]) / rate
    d["int_s2_to_end"] = (b[4] - b[2]) / rate
    d["ratio_s1_to_s2_cycle"] = d["int_s1_to_s2"] / dur["cycle"]

    peak_freq = {}
    for w, (lo, hi) in bounds.items():
        seg = x[lo:hi]
        d[f"abs_amp_{w}"] = float(np.mean(np.abs(seg)))
        d[f"power_{w}"] = float(np.mean(seg**2))
        if len(seg) < MIN_WINDOW:
            continue
        spec = spectrum(seg, rate, MIN_NFFT)
        k = int(np.argmax(spec.power))
        d[f"amp_at_peak_{w}"] = float(spec.power[k])
        if spec.power[k] <= 0:
            continue
        f0 = float(spec.frequencies[k])
        peak_freq[w] = (f0, k, spec)
        d[f"peak_freq_{w}"] = f0
        drops = (3.0, 6.0) if w in STATES else (3.0,)
        for db in drops:
            bw = bandwidth(spec, k, db)
            tag = "bw3" if db == 3.0 else "bw6"
            if bw is not None:
                d[f"{tag}_{w}"] = bw
                if bw > 0:
                    d[f"q{tag[2]}_{w}"] = f0 / bw

    seg = x[b[0] : b[4]]
    signs = np.sign(seg)
    signs = signs[signs != 0]
    d["zcr_cycle"] = float(np.count_nonzero(np.diff(signs)) / (len(seg) - 1)) if len(seg) > 1 else 0.0
    if "cycle" in peak_freq and peak_freq["cycle"][0] > 0:
        f0, k, spec = peak_freq["cycle"]
        harm = []
        for h in range(2, 6):
            fh = h * f0
            if fh <= spec.frequencies[-1]:
                harm.append(spec.power[int(round(fh / spec.resolution))])
        d["thd_cycle"] = math.sqrt(sum(harm)) / math.sqrt(spec.power[k])
    if np.any(seg):
        ceps = real_cepstrum(seg)
        q0 = int(math.ceil(CEPSTRUM_MIN_QUEFRENCY_S * rate))
        half = len(seg) // 2
        if half > q0:
            d["cepstrum_peak_cycle"] = float(np.max(ceps[q0 : half + 1]))
    if snr_db is not None and np.isfinite(snr_db):
        d["snr_dwt"] = float(snr_db)

    values = np.zeros(N_DESCRIPTORS)
    mask = np.ones(N_DESCRIPTORS, dtype=bool)
    for i, name in enumerate(DESCRIPTOR_NAMES):
        v = d.get(name)
        if v is not None and np.isfinite(v):
            values[i], mask[i] = v, False
    return CycleDescriptor(values, mask)


@dataclass
class FeatureVector:
    id: str
    values: np.ndarray
    missing_mask: np.ndarray


def aggregate_features(descriptors: Sequence[CycleDescriptor], record_id: str) -> FeatureVector:
    """Mean and sample SD of every descriptor over the cycles where it is present."""
    if not descriptors:
        raise ValueError(f"{record_id}: no cycle descriptors to aggregate")
    V = np.vstack([c.values for c in descriptors])
    M = np.vstack([c.missing_mask for c in descriptors])
    values = np.zeros(N_FEATURES)
    mask = np.zeros(N_FEATURES, dtype=bool)
    for j in range(N_DESCRIPTORS):
        col = V[~M[:, j], j]
        if len(col) == 0:
            mask[2 * j] = mask[2 * j + 1] = True
            continue
        values[2 * j] = col.mean()
        values[2 * j + 1] = col.std(ddof=1) if len(col) > 1 else 0.0
    return FeatureVector(record_id, values, mask)


def recording_features(signal, cycles: Sequence[CardiacCycle], record_id: str, snr_db: float, rate: float = 1000.0) -> FeatureVector:
    return aggregate_features([compute_cycle_descriptors(signal, c, rate, snr_db) for c in cycles], record_id)


def impute_median(X: np.ndarray, mask: np.ndarray, names: Sequence[str] = FEATURE_NAMES):
    """Fill masked entries with per-column medians of the unmasked rows.

    Returns ``(completed, medians)``.
    """
    X = np.array(X, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    medians = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        present = X[~mask[:, j], j]
        if len(present) == 0:
            label = names[j] if j < len(names) else f"column {j}"
            raise ValueError(f"feature {label} is missing in every training row")
        medians[j] = np.median(present)
    return apply_medians(X, mask, medians), medians


def apply_medians(X: np.ndarray, mask: np.ndarray, medians: np.ndarray) -> np.ndarray:
    X = np.array(X, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, medians[None, :], X) if X.ndim == 2 else np.where(mask, medians, X)


def write_feature_csv(path, vectors: Sequence[FeatureVector]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", *FEATURE_NAMES])
        for fv in vectors:
            w.writerow([fv.id] + ["" if m else repr(float(v)) for v, m in zip(fv.values, fv.missing_mask)])


def read_feature_csv(path) -> List[FeatureVector]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[1:]) != FEATURE_NAMES:
            raise ValueError(f"{path}: unexpected feature header")
        for row in reader:
            cells = row[1:]
            mask = np.array([c == "" for c in cells])
            vals = np.array([0.0 if c == "" else float(c) for c in cells])
            out.append(FeatureVector(row[0], vals, mask))
    return out


def write_medians_csv(path, medians: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "median"])
        for name, m in zip(FEATURE_NAMES, medians):
            w.writerow([name, repr(float(m))])


def read_medians_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["median"]) for r in rows])
