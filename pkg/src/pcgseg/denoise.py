"""Multi-level discrete wavelet transform and wavelet-shrinkage denoising.

The transform is orthogonal and non-expansive: each level maps a sequence of
length ``n`` to ``ceil(n / 2)`` approximation and detail coefficients. Odd
lengths are first extended by one mirrored sample, then filtered circularly,
which keeps reconstruction exact for any filter length.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

SNR_SENTINEL_DB = 300.0

_SQRT2_INV = 1.0 / math.sqrt(2.0)

# Lowpass decomposition filters (orthonormal, sum to sqrt(2)).
WAVELETS = {
    "haar": np.array([_SQRT2_INV, _SQRT2_INV]),
    "db4": np.array([
        -0.010597401785069032,
        0.0328830116668852,
        0.030841381835560764,
        -0.18703481171909309,
        -0.027983769416859854,
        0.6308807679298589,
        0.7148465705529157,
        0.2303778133088965,
    ]),
}
_ALIASES = {"haar": "haar", "db1": "haar", "db4": "db4", "daubechies4": "db4"}


def _filters(wavelet: str) -> Tuple[np.ndarray, np.ndarray]:
    try:
        lo = WAVELETS[_ALIASES[wavelet.lower()]]
    except KeyError:
        raise ValueError(f"unknown wavelet {wavelet!r}; choose 'haar' or 'db4'") from None
    # quadrature mirror highpass
    hi = lo[::-1] * np.array([(-1) ** k for k in range(len(lo))])
    return lo, hi


@dataclass
class WaveletCoefficients:
    """Details are ordered finest first; ``lengths`` holds the input length at each level."""

    details: List[np.ndarray]
    approximation: np.ndarray
    original_length: int
    wavelet: str = "db4"
    lengths: List[int] = field(default_factory=list)

    @property
    def levels(self) -> int:
        return len(self.details)


def _analysis_matrix_step(x: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    n = len(x)
    k = np.arange(len(lo))
    idx = (2 * np.arange(n // 2)[:, None] + k[None, :]) % n
    taps = x[idx]
    return taps @ lo, taps @ hi


def _synthesis_step(a: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    half = len(a)
    n = 2 * half
    out = np.zeros(n)
    k = np.arange(len(lo))
    idx = (2 * np.arange(half)[:, None] + k[None, :]) % n
    np.add.at(out, idx, a[:, None] * lo[None, :] + d[:, None] * hi[None, :])
    return out


def max_levels(n: int) -> int:
    return int(math.floor(math.log2(n))) if n >= 2 else 0


def dwt_forward(signal, wavelet: str = "db4", levels: int = 5) -> WaveletCoefficients:
    x = np.asarray(signal, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("signal must have at least 2 samples")
    if levels < 1 or levels > max_levels(n):
        raise ValueError(f"levels must be in [1, {max_levels(n)}] for a signal of length {n}, got {levels}")
    lo, hi = _filters(wavelet)
    details, lengths = [], []
    a = x
    for _ in range(levels):
        lengths.append(len(a))
        if len(a) % 2:
            a = np.append(a, a[-1])
        a, d = _analysis_matrix_step(a, lo, hi)
        details.append(d)
    return WaveletCoefficients(details, a, n, wavelet, lengths)


def dwt_inverse(coeffs: WaveletCoefficients) -> np.ndarray:
    lo, hi = _filters(coeffs.wavelet)
    if not coeffs.details or len(coeffs.lengths) != len(coeffs.details):
        raise ValueError("inconsistent wavelet coefficients: level bookkeeping missing")
    a = np.asarray(coeffs.approximation, dtype=np.float64)
    for d, length in zip(reversed(coeffs.details), reversed(coeffs.lengths)):
        expected = (length + 1) // 2
        if len(a) != expected or len(d) != expected:
            raise ValueError(
                f"inconsistent wavelet coefficients: expected {expected} values at a level of length {length}, "
                f"got approximation {len(a)} / detail {len(d)}"
            )
        a = _synthesis_step(a, np.asarray(d, dtype=np.float64), lo, hi)[:length]
    if len(a) != coeffs.original_length:
        raise ValueError("inconsistent wavelet coefficients: original length mismatch")
    return a


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def universal_threshold(finest_detail: np.ndarray, n: int) -> float:
    sigma = np.median(np.abs(finest_detail)) / 0.6745
    return float(sigma * math.sqrt(2.0 * math.log(n)))


def snr_db(signal: np.ndarray, denoised: np.ndarray) -> float:
    residual = np.mean((signal - denoised) ** 2)
    power = np.mean(denoised**2)
    if residual < 1e-20 or power == 0:
        return SNR_SENTINEL_DB if residual < 1e-20 else -SNR_SENTINEL_DB
    return float(10.0 * math.log10(power / residual))


def _shrink_once(x: np.ndarray, wavelet: str, levels: int, threshold: float | None) -> np.ndarray:
    coeffs = dwt_forward(x, wavelet, levels)
    t = universal_threshold(coeffs.details[0], len(x)) if threshold is None else threshold
    coeffs.details = [soft_threshold(d, t) for d in coeffs.details]
    return dwt_inverse(coeffs)


def denoise(signal, wavelet: str = "db4", levels: int = 5, threshold: float | None = None, shifts: int | None = None):
    """Soft-threshold every detail band and reconstruct, averaged over circular shifts.

    A single decimated transform is shift-variant and distorts tones that fall
    inside a detail band, so the shrinkage is repeated for ``shifts`` circular
    shifts (default ``2 ** levels``, i.e. every distinct alignment) and the
    reconstructions are averaged.

    Returns ``(denoised, snr_db)``. ``threshold`` overrides the universal
    threshold estimated from the finest detail band.
    """
    x = np.asarray(signal, dtype=np.float64)
    if len(x) < 32:
        raise ValueError(f"signal too short for denoising ({len(x)} < 32 samples)")
    levels = min(levels, max_levels(len(x)))
    if shifts is None:
        shifts = 2**levels
    shifts = max(1, min(shifts, len(x)))
    acc = np.zeros_like(x)
    for k in range(shifts):
        acc += np.roll(_shrink_once(np.roll(x, k), wavelet, levels, threshold), -k)
    out = acc / shifts
    return out, snr_db(x, out)
