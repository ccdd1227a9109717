"""Acceptance criteria 1-10.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion. The synthetic experiments (criteria 6-8) run
in a subprocess twice so that criterion 10 can compare their outputs byte
for byte.
"""
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from pcgseg.denoise import dwt_forward, dwt_inverse, denoise
from pcgseg.metrics import evaluate
from pcgseg.neuralnet import (
    Conv1D,
    Dense,
    FilterBank,
    LocalMaxPool,
    MaxOverTime,
    build_network,
    conv1d_forward,
    grad_check,
    softmax_xent,
)
from pcgseg.segmental import make_segment_dataset
from pcgseg.segmenter import CardiacCycle, HsmmParams, brute_force_decode, hsmm_decode

criterion = pytest.mark.criterion
SAMPLES_PER_LAYER = 200


def _detail(record_property, text):
    record_property("detail", text)


# ---------------------------------------------------------------- 1 gradients


def _sampled_layer_error(layer, x, rng, eps=1e-6):
    """Worst relative error over >= 200 sampled coordinates of the input and each parameter tensor."""
    out = layer.forward(x)
    r = [rng.normal(size=o.shape) for o in out] if isinstance(out, list) else rng.normal(size=out.shape)

    def loss():
        o = layer.forward(x)
        return sum(float(np.sum(a * b)) for a, b in zip(o, r)) if isinstance(o, list) else float(np.sum(o * r))

    loss()
    dx = layer.backward(r)
    grads = {k: g.copy() for k, g in layer.grads.items()}
    worst, sampled = 0.0, 0
    for arr, grad in [(x, dx)] + [(layer.params[k], grads[k]) for k in layer.params]:
        flat, g = arr.reshape(-1), grad.reshape(-1)
        idx = rng.choice(flat.size, size=min(SAMPLES_PER_LAYER, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-8))
        sampled += len(idx)
    return worst, sampled


@criterion(1, "gradient correctness")
def test_c1_layer_gradients(record_property):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    layers = {
        "Conv1D": (Conv1D(2, 12, 9, rng), rng.normal(size=(2, 2, 40))),
        "FilterBank": (FilterBank(1, [5, 9], 16, rng), rng.normal(size=(2, 1, 40))),
        "MaxOverTime": (MaxOverTime(), rng.normal(size=(2, 10, 30))),
        "LocalMaxPool": (LocalMaxPool(2), rng.normal(size=(2, 8, 31))),
        "Dense": (Dense(30, 8, rng, activation=False), rng.normal(size=(3, 30))),
        "Dense+ReLU": (Dense(30, 8, rng, activation=True), rng.normal(size=(3, 30))),
    }
    for layer, _ in layers.values():
        for k in layer.params:
            if k.startswith("b"):
                layer.params[k][...] = rng.normal(scale=0.1, size=layer.params[k].shape)
    errors = {}
    for name, (layer, x) in layers.items():
        err, sampled = _sampled_layer_error(layer, x, rng)
        assert sampled >= SAMPLES_PER_LAYER, name
        errors[name] = err

    # loss layer: near-saturated logits give gradients of order 1e-6, where a
    # 1e-6 step drowns in the rounding of the log-sum-exp; 1e-4 keeps the
    # truncation error far below the tolerance
    worst, h = 0.0, 1e-4
    for _ in range(SAMPLES_PER_LAYER):
        z, y, w = rng.normal(scale=3, size=2), int(rng.integers(2)), float(rng.uniform(0.5, 3))
        _, g = softmax_xent(z, y, w)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            num = (softmax_xent(z + e, y, w)[0] - softmax_xent(z - e, y, w)[0]) / (2 * h)
            worst = max(worst, abs(num - g[j]) / max(abs(num), abs(g[j]), 1e-8))
    errors["softmax_xent"] = worst

    fcnn = build_network("Conv([5,9]*50), MP, FC", seed=1, input_length=64)
    dcnn = build_network("Conv([11]*20), MP, Conv([5]*20), MP, FC(100), FC", seed=1, input_length=64)
    for name, net in (("FCNN-tiny", fcnn), ("DCNN-tiny", dcnn)):
        for p in net.parameters().values():
            assert p.size >= SAMPLES_PER_LAYER or p.ndim == 1
        errors[name] = grad_check(net, rng.normal(size=64), int(rng.integers(2)), per_layer=SAMPLES_PER_LAYER)
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"max rel err {max(errors.values()):.1e}, {elapsed:.1f} s")
    assert max(errors.values()) < 1e-5, {k: float(v) for k, v in errors.items()}
    assert elapsed < 60


# ---------------------------------------------------------------- 2 convolution oracle


def _double_loop(x, W, b):
    B, C, L = x.shape
    F, _, w = W.shape
    out = np.empty((B, F, L - w + 1))
    for n in range(B):
        for f in range(F):
            for i in range(L - w + 1):
                out[n, f, i] = b[f] + sum(W[f, c, j] * x[n, c, i + j] for c in range(C) for j in range(w))
    return out


@criterion(2, "convolution oracle")
def test_c2_convolution_oracle(record_property):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        C, F, w = (int(v) for v in rng.integers(1, 4, size=3))
        w = int(rng.integers(1, 8))
        L = int(rng.integers(w, 24))
        x, W, b = rng.normal(size=(2, C, L)), rng.normal(size=(F, C, w)), rng.normal(size=F)
        worst = max(worst, float(np.max(np.abs(conv1d_forward(x, W, b) - _double_loop(x, W, b)))))
    _detail(record_property, f"max abs diff {worst:.1e} over 100 instances")
    assert worst < 1e-12


# ---------------------------------------------------------------- 3 DWT


@criterion(3, "DWT round trip and denoising")
@pytest.mark.parametrize("wavelet", ["haar", "db4"])
@pytest.mark.parametrize("n", [64, 100, 1000])
def test_c3_round_trip(wavelet, n):
    x = np.random.default_rng(n).normal(size=n)
    assert np.max(np.abs(dwt_inverse(dwt_forward(x, wavelet, 5)) - x)) < 1e-8


@criterion(3, "DWT round trip and denoising")
def test_c3_denoising_improves_correlation(record_property):
    t = np.arange(4000) / 1000
    clean = np.sin(2 * np.pi * 50 * t)
    noisy = clean + np.random.default_rng(3).normal(0, 0.3, t.size)
    den, _ = denoise(noisy)
    before, after = np.corrcoef(noisy, clean)[0, 1], np.corrcoef(den, clean)[0, 1]
    _detail(record_property, f"correlation {before:.3f} -> {after:.3f}")
    assert after > before


# ---------------------------------------------------------------- 4 architecture


@criterion(4, "architecture fidelity")
def test_c4_presets(record_property):
    expected = {"FCNN-Small": 200, "FCNN-Medium": 600, "FCNN-Large": 1500, "DCNN-Shallow": 75, "DCNN-Deep": 125}
    got = {name: build_network(name).n_filters for name in expected}
    assert got == expected
    assert build_network("FCNN-Small").hidden_size == 200
    _detail(record_property, ", ".join(f"{k} {v}" for k, v in got.items()))


# ---------------------------------------------------------------- 5 segment contract


@criterion(5, "segment contract")
def test_c5_segment_lengths():
    sig = np.random.default_rng(5).normal(size=4000)
    lengths = [399, 400, 1200, 1201]
    starts = np.cumsum([0] + lengths[:-1])
    cycles = [CardiacCycle(s, s + n // 4, s + n // 2, s + 3 * n // 4, s + n) for s, n in zip(starts, lengths)]
    ds = make_segment_dataset([("r", sig, cycles, 1)])
    assert ds.lengths.tolist() == [400, 1200]
    assert ds.segments.shape == (2, 1200)
    assert np.all(ds.segments[0, 400:] == 0.0) and np.all(ds.segments[0, :400] != 0.0)
    assert np.all(ds.segments[1] != 0.0)


# ---------------------------------------------------------------- experiments (6-8, 10)


def _run_experiment(out):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pcgseg.experiment", "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    return _run_experiment(tmp_path_factory.mktemp("experiment1"))


@pytest.fixture(scope="module")
def second_run(tmp_path_factory):
    return _run_experiment(tmp_path_factory.mktemp("experiment2"))


def _load(run, name):
    return json.loads((run[0] / name).read_text())


def _random_hsmm(rng, k=4):
    mean = rng.uniform(1.0, 4.0, size=k)
    return HsmmParams(mean, rng.uniform(0.2, 0.5, size=k) * mean, np.zeros((k, 1)), np.ones((k, 1)))


@criterion(6, "HSMM quality")
def test_c6_decoder_equals_brute_force(record_property):
    rng = np.random.default_rng(6)
    instances = 0
    for T in range(1, 9):
        for _ in range(25):
            params = _random_hsmm(rng)
            loglik = rng.normal(scale=2.0, size=(T, 4))
            decoded = hsmm_decode(("loglik", loglik), params)
            brute, best = brute_force_decode(loglik, params)
            assert np.array_equal(decoded, brute), (T, decoded, brute)
            assert math.isfinite(best)
            instances += 1
    _detail(record_property, f"{instances} toy instances with up to 8 frames")


@criterion(6, "HSMM quality")
def test_c6_onset_accuracy(first_run, record_property):
    seg = _load(first_run, "segmentation.json")
    _detail(record_property, f"{seg['fraction_within_tolerance']:.3f} of {seg['decoded_onsets']} onsets within 20 ms")
    assert seg["recordings"] == 50 and seg["tolerance_ms"] == 20
    # decoded cycles cover most of the material (roughly 10 cycles per recording)
    assert seg["decoded_onsets"] >= 2 * 50 * 8
    assert seg["fraction_within_tolerance"] >= 0.95


@criterion(7, "end-to-end synthetic CNN experiment")
def test_c7_cnn_experiment(first_run, record_property):
    cnn = _load(first_run, "cnn_metrics.json")
    timing = _load(first_run, "timing.json")
    log = cnn["training_log"]
    assert len(log) == 50
    accs = [row[2] for row in log]
    assert cnn["best_epoch"] == accs.index(max(accs)) + 1
    assert cnn["tp"] + cnn["tn"] + cnn["fp"] + cnn["fn"] + cnn["unsegmentable"] == 40
    _detail(record_property, f"accuracy {cnn['accuracy']:.3f}, threshold {cnn['threshold']}, "
                             f"{timing['cnn_end_to_end_s'] / 60:.1f} min")
    assert cnn["accuracy"] >= 0.90
    assert timing["cnn_end_to_end_s"] < 15 * 60


@criterion(8, "feature track with Lasso selection")
def test_c8_feature_experiment(first_run, record_property):
    feats = _load(first_run, "feature_metrics.json")
    chosen = feats["selected_features"]
    spectral = [n for n in chosen if n.split("_sys_")[0] in ("peak_freq", "bw3", "bw6", "q3", "q6") and "_sys_" in n]
    _detail(record_property, f"accuracy {feats['accuracy']:.3f}, systolic spectral picks {spectral}")
    assert feats["learner"] == "logistic" and feats["lambda_star"] is not None
    assert feats["accuracy"] >= 0.85
    assert spectral


# ---------------------------------------------------------------- 9 metrics


def _concordance(scores, truth):
    pos, neg = scores[truth == 1], scores[truth == 0]
    diff = pos[:, None] - neg[None, :]
    return (np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size


@criterion(9, "metrics oracle")
def test_c9_auc_and_balanced_identity(record_property):
    rng = np.random.default_rng(9)
    worst_auc = worst_id = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        truth = rng.integers(0, 2, size=n)
        truth[:2] = [0, 1]
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))
        m = evaluate((scores > 0.5).astype(int), truth, scores)
        worst_auc = max(worst_auc, abs(m.auc - _concordance(scores, truth)))

        half = int(rng.integers(1, 20))
        bt = np.array([1] * half + [0] * half)
        bp = rng.integers(0, 2, size=2 * half)
        mb = evaluate(bp, bt)
        worst_id = max(worst_id, abs(mb.accuracy - (mb.sensitivity + mb.specificity) / 2))
    _detail(record_property, f"max AUC gap {worst_auc:.1e}, max identity gap {worst_id:.1e}")
    assert worst_auc < 1e-9 and worst_id < 1e-9


# ---------------------------------------------------------------- 10 determinism


@criterion(10, "determinism")
def test_c10_repeat_is_bitwise_identical(first_run, second_run, record_property):
    names = ["segmentation.json", "cnn_metrics.json", "feature_metrics.json"]
    for name in names:
        assert (first_run[0] / name).read_bytes() == (second_run[0] / name).read_bytes(), name
    _detail(record_property, f"{len(names)} metrics files identical across two runs")
