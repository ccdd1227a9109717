"""Duration-dependent hidden semi-Markov segmentation of heart sounds.

Frames are 20 ms long (50 Hz). States follow the fixed cycle
S1 -> systole -> S2 -> diastole, so the decoder only weighs segment
durations against per-frame Gaussian emission likelihoods.
"""
from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import butter, filtfilt, hilbert, sosfiltfilt

from .denoise import dwt_forward, dwt_inverse

FEATURE_RATE = 50
SIGNAL_RATE = 1000
DECIMATION = SIGNAL_RATE // FEATURE_RATE
STATE_NAMES = ("S1", "systole", "S2", "diastole")
N_STATES = 4
ENVELOPE_NAMES = ("homomorphic", "hilbert", "band_40_60", "dwt_level3")

S1_MS = 120.0
S2_MS = 100.0
DURATION_CV = 0.25
EMISSION_SD_FLOOR = 0.05


@dataclass(frozen=True)
class CardiacCycle:
    s1_start: int
    sys_start: int
    s2_start: int
    dia_start: int
    cycle_end: int

    def __post_init__(self):
        b = self.boundaries
        if any(b[i] >= b[i + 1] for i in range(4)) or b[0] < 0:
            raise ValueError(f"cycle boundaries must be non-negative and strictly increasing: {b}")

    @property
    def boundaries(self) -> Tuple[int, int, int, int, int]:
        return (self.s1_start, self.sys_start, self.s2_start, self.dia_start, self.cycle_end)

    @property
    def length(self) -> int:
        return self.cycle_end - self.s1_start


@dataclass
class EnvelopeFeatures:
    data: np.ndarray  # (frames, 4)
    feature_rate: int = FEATURE_RATE

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, ENVELOPE_NAMES.index(name)]


@dataclass
class HsmmParams:
    duration_mean: np.ndarray
    duration_sd: np.ndarray
    emission_mean: np.ndarray  # (states, features)
    emission_sd: np.ndarray

    def __post_init__(self):
        self.duration_mean = np.asarray(self.duration_mean, dtype=np.float64)
        self.duration_sd = np.asarray(self.duration_sd, dtype=np.float64)
        self.emission_mean = np.atleast_2d(np.asarray(self.emission_mean, dtype=np.float64))
        self.emission_sd = np.atleast_2d(np.asarray(self.emission_sd, dtype=np.float64))
        k = len(self.duration_mean)
        if len(self.duration_sd) != k or self.emission_mean.shape[0] != k or self.emission_sd.shape != self.emission_mean.shape:
            raise ValueError("HSMM parameter shapes disagree")
        if np.any(self.duration_sd <= 0) or np.any(self.emission_sd <= 0):
            raise ValueError("duration and emission standard deviations must be positive")

    @property
    def n_states(self) -> int:
        return len(self.duration_mean)

    def support(self, state: int) -> Tuple[int, int]:
        m, s = self.duration_mean[state], self.duration_sd[state]
        lo = max(1, int(math.ceil(m - 3 * s - 1e-9)))
        hi = max(lo, int(math.floor(m + 3 * s + 1e-9)))
        return lo, hi


# ---------------------------------------------------------------- envelopes


def _lowpass(x: np.ndarray, cutoff: float, order: int = 1) -> np.ndarray:
    b, a = butter(order, cutoff, btype="lowpass", fs=SIGNAL_RATE)
    return filtfilt(b, a, x)


def raw_envelopes(signal: np.ndarray) -> Dict[str, np.ndarray]:
    """The four envelopes at the signal rate, before decimation and standardization."""
    x = np.asarray(signal, dtype=np.float64)
    homomorphic = np.exp(_lowpass(np.log(np.abs(x) + 1e-8), 8.0))
    hilb = np.abs(hilbert(x))
    sos = butter(2, (40.0, 60.0), btype="bandpass", fs=SIGNAL_RATE, output="sos")
    band_power = sosfiltfilt(sos, x) ** 2
    levels = min(3, int(math.floor(math.log2(len(x)))))
    coeffs = dwt_forward(x, "db4", levels)
    coeffs.details = [d if i == levels - 1 else np.zeros_like(d) for i, d in enumerate(coeffs.details)]
    coeffs.approximation = np.zeros_like(coeffs.approximation)
    dwt_env = np.abs(dwt_inverse(coeffs))
    return {"homomorphic": homomorphic, "hilbert": hilb, "band_40_60": band_power, "dwt_level3": dwt_env}


def _decimate_mean(x: np.ndarray) -> np.ndarray:
    n = len(x) // DECIMATION
    return x[: n * DECIMATION].reshape(n, DECIMATION).mean(axis=1)


def _standardize(col: np.ndarray) -> np.ndarray:
    col = np.where(np.isfinite(col), col, 0.0)
    sd = col.std()
    if sd < 1e-12:
        return np.zeros_like(col)
    return (col - col.mean()) / sd


def extract_envelopes(signal: np.ndarray) -> EnvelopeFeatures:
    """Standardized 50 Hz observation features for a 1000 Hz signal."""
    x = np.asarray(signal, dtype=np.float64)
    if len(x) < SIGNAL_RATE:
        raise ValueError(f"signal too short for segmentation ({len(x)} samples, need >= {SIGNAL_RATE})")
    env = raw_envelopes(x)
    cols = [_standardize(_decimate_mean(env[name])) for name in ENVELOPE_NAMES]
    return EnvelopeFeatures(np.column_stack(cols))


# ---------------------------------------------------------------- heart rate


@dataclass(frozen=True)
class HeartRateEstimate:
    cycle_frames: float
    systole_fraction: float
    fallback: bool = False

    @property
    def bpm(self) -> float:
        return 60.0 * FEATURE_RATE / self.cycle_frames


def _autocorrelation(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    n = len(x)
    spec = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(spec * np.conj(spec))[:n]
    if acf[0] <= 0:
        return np.zeros(n)
    return acf / acf[0]


def estimate_heart_rate(env: EnvelopeFeatures, min_peak: float = 0.2) -> HeartRateEstimate:
    """Cycle length (frames) and systolic fraction from the homomorphic envelope autocorrelation.

    Falls back to a 0.8 s cycle with systolic fraction 0.3 and ``fallback=True``
    when no autocorrelation peak of height ``min_peak`` exists in the search range.
    """
    rate = env.feature_rate
    if env.n_frames < 2 * rate:
        raise ValueError(f"need at least {2 * rate} frames to estimate heart rate, got {env.n_frames}")
    fallback = HeartRateEstimate(0.8 * rate, 0.3, True)
    acf = _autocorrelation(env.column("homomorphic"))
    lo, hi = int(math.ceil(0.33 * rate)), min(int(math.floor(2.0 * rate)), len(acf) - 2)
    if hi <= lo:
        return fallback
    lag = lo + int(np.argmax(acf[lo : hi + 1]))
    is_local_peak = acf[lag] >= acf[lag - 1] and acf[lag] >= acf[lag + 1]
    if acf[lag] < min_peak or not is_local_peak:
        return fallback
    s_lo, s_hi = int(math.ceil(0.2 * lag)), int(math.floor(0.5 * lag))
    # highest local peak in the window; the raw maximum can sit on the tail of the lag-0 lobe
    peaks = [j for j in range(max(s_lo, 1), s_hi + 1) if acf[j] >= acf[j - 1] and acf[j] >= acf[j + 1]]
    frac = max(peaks, key=lambda j: (acf[j], -j)) / lag if peaks else 0.3
    return HeartRateEstimate(float(lag), float(np.clip(frac, 0.25, 0.45)), False)


def duration_params(hr: HeartRateEstimate, rate: int = FEATURE_RATE) -> Tuple[np.ndarray, np.ndarray]:
    """Per-state duration mean and SD in frames."""
    s1 = S1_MS / 1000 * rate
    s2 = S2_MS / 1000 * rate
    sys = max(hr.systole_fraction * hr.cycle_frames - s1, 1.0)
    dia = max(hr.cycle_frames - hr.systole_fraction * hr.cycle_frames - s2, 1.0)
    mean = np.array([s1, sys, s2, dia])
    return mean, DURATION_CV * mean


# ---------------------------------------------------------------- emissions


def states_from_cycles(cycles: Sequence[CardiacCycle], n_frames: int) -> np.ndarray:
    """Ground-truth state per frame (state at the frame centre); -1 outside annotated cycles."""
    states = np.full(n_frames, -1, dtype=int)
    centres = np.arange(n_frames) * DECIMATION + DECIMATION // 2
    for c in cycles:
        b = c.boundaries
        for s in range(N_STATES):
            states[(centres >= b[s]) & (centres < b[s + 1])] = s
    return states


def fit_emissions(labeled: Iterable[Tuple[EnvelopeFeatures, np.ndarray]], n_states: int = N_STATES,
                  min_frames: int = 10):
    """Per-state, per-feature Gaussian mean and sample SD (floored) from labelled frames.

    Every state must be observed in at least ``min_frames`` frames (and never fewer than two).

    Returns ``(emission_mean, emission_sd)``, each of shape (states, features).
    """
    feats, labels = [], []
    for env, states in labeled:
        states = np.asarray(states)
        if len(states) != env.n_frames:
            raise ValueError("state sequence length does not match the frame count")
        feats.append(env.data)
        labels.append(states)
    if not feats:
        raise ValueError("no labelled recordings supplied")
    X = np.vstack(feats)
    y = np.concatenate(labels)
    mean = np.zeros((n_states, X.shape[1]))
    sd = np.zeros_like(mean)
    for s in range(n_states):
        rows = X[y == s]
        if len(rows) < max(2, min_frames):
            name = STATE_NAMES[s] if n_states == N_STATES else str(s)
            raise ValueError(f"state {name} observed in {len(rows)} frames; need at least {max(2, min_frames)}")
        mean[s] = rows.mean(axis=0)
        sd[s] = np.maximum(rows.std(axis=0, ddof=1), EMISSION_SD_FLOOR)
    return mean, sd


def emission_loglik(env_data: np.ndarray, params: HsmmParams) -> np.ndarray:
    """(frames, states) log-likelihood under diagonal Gaussians."""
    x = np.atleast_2d(np.asarray(env_data, dtype=np.float64))
    if x.shape[0] == 1 and params.emission_mean.shape[1] != 1 and x.shape[1] != params.emission_mean.shape[1]:
        x = x.T
    mu, sd = params.emission_mean, params.emission_sd
    z = (x[:, None, :] - mu[None]) / sd[None]
    return np.sum(-0.5 * z**2 - np.log(sd)[None] - 0.5 * math.log(2 * math.pi), axis=2)


# ---------------------------------------------------------------- decoding


def _duration_tables(params: HsmmParams):
    """log density on the support and log survival for censored edge segments."""
    tables = []
    for s in range(params.n_states):
        lo, hi = params.support(s)
        m, sd = params.duration_mean[s], params.duration_sd[s]
        d = np.arange(1, hi + 1, dtype=np.float64)
        logpdf = -0.5 * ((d - m) / sd) ** 2 - math.log(sd) - 0.5 * math.log(2 * math.pi)
        inside = d >= lo
        pmf = np.where(inside, np.exp(logpdf - logpdf[inside].max()), 0.0)
        pmf /= pmf.sum()
        surv = np.cumsum(pmf[::-1])[::-1]
        with np.errstate(divide="ignore"):
            log_surv = np.log(surv)
        logdens = np.where(inside, logpdf, -np.inf)
        tables.append((lo, hi, logdens, log_surv))
    return tables


def segment_score(states_runs: Sequence[Tuple[int, int]], loglik: np.ndarray, params: HsmmParams) -> float:
    """Objective for a run-length segmentation ``[(state, duration), ...]``.

    Interior segments contribute the Gaussian log duration density; the first
    and last segments are censored by the recording edges and contribute the
    log survival probability instead. Returns -inf for sequences that break
    the cyclic order or leave the duration supports.
    """
    tables = _duration_tables(params)
    k = params.n_states
    total, t = 0.0, 0
    last = len(states_runs) - 1
    for i, (s, d) in enumerate(states_runs):
        if i > 0 and s != (states_runs[i - 1][0] + 1) % k:
            return -math.inf
        lo, hi, logdens, log_surv = tables[s]
        if d < 1 or d > hi:
            return -math.inf
        if i == 0 or i == last:
            total += log_surv[d - 1]
        else:
            if d < lo:
                return -math.inf
            total += logdens[d - 1]
        total += loglik[t : t + d, s].sum()
        t += d
    return total


def hsmm_decode(env, params: HsmmParams) -> np.ndarray:
    """Most probable per-frame state sequence under the cyclic explicit-duration model.

    ``env`` is an :class:`EnvelopeFeatures` or a (frames, states) log-likelihood
    array passed as ``("loglik", array)``. Ties prefer shorter durations, then
    lower state indices.
    """
    if isinstance(env, tuple) and env[0] == "loglik":
        loglik = np.asarray(env[1], dtype=np.float64)
    else:
        loglik = emission_loglik(env.data, params)
    T, k = loglik.shape
    if T < 1:
        raise ValueError("need at least one frame")
    tables = _duration_tables(params)
    cum = np.vstack([np.zeros((1, k)), np.cumsum(loglik, axis=0)])

    # best[t, s]: best score of frames [0, t) whose last segment has state s and ends at t
    best = np.full((T + 1, k), -np.inf)
    back = np.zeros((T + 1, k), dtype=int)
    final = np.full(k, -np.inf)
    final_d = np.zeros(k, dtype=int)

    for t in range(1, T + 1):
        for s in range(k):
            lo, hi, logdens, log_surv = tables[s]
            prev = (s - 1) % k
            dmax = min(hi, t)
            d = np.arange(1, dmax + 1)
            emis = cum[t, s] - cum[t - d, s]
            starts = t - d
            pred = np.where(starts == 0, 0.0, best[starts, prev])
            interior = np.where(starts == 0, log_surv[d - 1], logdens[d - 1])
            cand = pred + interior + emis
            j = int(np.argmax(cand))
            best[t, s], back[t, s] = cand[j], d[j]
            if t == T:
                closing = np.where(starts == 0, 0.0, best[starts, prev]) + log_surv[d - 1] + emis
                j = int(np.argmax(closing))
                final[s], final_d[s] = closing[j], d[j]

    s = int(np.argmax(final))
    out = np.empty(T, dtype=int)
    t, d = T, int(final_d[s])
    while True:
        out[t - d : t] = s
        t -= d
        if t == 0:
            break
        s = (s - 1) % k
        d = int(back[t, s])
    return out


def brute_force_decode(loglik: np.ndarray, params: HsmmParams) -> Tuple[np.ndarray, float]:
    """Exhaustive search over every run-length segmentation. Exponential; tests only."""
    T, k = loglik.shape
    best_score, best_runs = -math.inf, None

    def rec(runs, used):
        nonlocal best_score, best_runs
        if used == T:
            sc = segment_score(runs, loglik, params)
            if sc > best_score:
                best_score, best_runs = sc, list(runs)
            return
        states = range(k) if not runs else [(runs[-1][0] + 1) % k]
        for s in states:
            for d in range(1, T - used + 1):
                runs.append((s, d))
                rec(runs, used + d)
                runs.pop()

    rec([], 0)
    seq = np.concatenate([np.full(d, s, dtype=int) for s, d in best_runs])
    return seq, best_score


def check_cyclic(states: np.ndarray, n_states: int = N_STATES) -> bool:
    changes = np.flatnonzero(np.diff(states))
    return bool(np.all(states[changes + 1] == (states[changes] + 1) % n_states))


def cycles_from_states(states: Sequence[int], feature_rate: int = FEATURE_RATE, n_samples: Optional[int] = None) -> List[CardiacCycle]:
    """Complete S1-systole-S2-diastole runs as sample-index cycles at 1000 Hz."""
    states = np.asarray(states, dtype=int)
    if len(states) == 0:
        return []
    scale = SIGNAL_RATE // feature_rate
    change = np.flatnonzero(np.diff(states)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [len(states)]])
    run_states = states[starts]
    cycles = []
    for i in range(len(run_states) - 3):
        if tuple(run_states[i : i + 4]) == (0, 1, 2, 3):
            b = [int(starts[i + j] * scale) for j in range(4)] + [int(ends[i + 3] * scale)]
            if n_samples is not None and b[4] > n_samples:
                continue
            cycles.append(CardiacCycle(*b))
    return cycles


# ---------------------------------------------------------------- pipeline


def params_for(env: EnvelopeFeatures, emission_mean: np.ndarray, emission_sd: np.ndarray) -> Tuple[HsmmParams, HeartRateEstimate]:
    hr = estimate_heart_rate(env)
    mean, sd = duration_params(hr, env.feature_rate)
    return HsmmParams(mean, sd, emission_mean, emission_sd), hr


def segment_signal(signal: np.ndarray, emissions: Tuple[np.ndarray, np.ndarray]) -> Tuple[List[CardiacCycle], HeartRateEstimate]:
    """Envelopes, heart-rate-seeded durations, decoding and cycle extraction for one 1000 Hz signal."""
    env = extract_envelopes(signal)
    params, hr = params_for(env, *emissions)
    states = hsmm_decode(env, params)
    return cycles_from_states(states, env.feature_rate, len(signal)), hr


@functools.lru_cache(maxsize=4)
def default_emissions(n: int = 24, seed: int = 2016) -> Tuple[np.ndarray, np.ndarray]:
    """Emission parameters fitted on a seeded synthetic training set."""
    from .signal_io import normalize_array
    from .synthgen import generate_dataset

    labeled = []
    for rec in generate_dataset(n, 0.25, seed=seed, prefix="train"):
        x = normalize_array(rec.recording.samples)
        env = extract_envelopes(x)
        labeled.append((env, states_from_cycles(rec.cycles, env.n_frames)))
    return fit_emissions(labeled)


def save_emissions(path, emissions: Tuple[np.ndarray, np.ndarray]) -> None:
    mean, sd = emissions
    with open(path, "w") as fh:
        json.dump({"features": list(ENVELOPE_NAMES), "states": list(STATE_NAMES),
                   "emission_mean": mean.tolist(), "emission_sd": sd.tolist()}, fh, indent=2)


def load_emissions(path) -> Tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        obj = json.load(fh)
    return np.array(obj["emission_mean"], dtype=np.float64), np.array(obj["emission_sd"], dtype=np.float64)


# ---------------------------------------------------------------- CSV


CYCLE_HEADER = ["record_id", "s1_start", "sys_start", "s2_start", "dia_start", "cycle_end"]


def write_cycles(path, cycles_by_record: Dict[str, Sequence[CardiacCycle]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CYCLE_HEADER)
        for rid, cycles in cycles_by_record.items():
            for c in cycles:
                w.writerow([rid, *c.boundaries])


def read_cycles(path) -> Dict[str, List[CardiacCycle]]:
    out: Dict[str, List[CardiacCycle]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["record_id"], []).append(CardiacCycle(*(int(row[h]) for h in CYCLE_HEADER[1:])))
    return out
