import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcgseg.neuralnet import (
    Conv1D,
    Dense,
    Dropout,
    FilterBank,
    LocalMaxPool,
    MaxOverTime,
    NonFiniteGradient,
    adagrad_step,
    build_network,
    conv1d_forward,
    dropout,
    grad_check,
    load_network,
    preset_layer_count,
    save_network,
    softmax,
    softmax_xent,
)


def _direct_conv(x, W, b):
    # double-loop oracle over batch, filter, position
    B, C, L = x.shape
    F, _, w = W.shape
    out = np.zeros((B, F, L - w + 1))
    for n in range(B):
        for f in range(F):
            for i in range(L - w + 1):
                s = b[f]
                for c in range(C):
                    for j in range(w):
                        s += W[f, c, j] * x[n, c, i + j]
                out[n, f, i] = s
    return out


def _layer_fd(layer, x, rng, eps=1e-6):
    """Relative errors of input and parameter gradients for loss = sum(r * layer(x))."""
    out = layer.forward(x)
    r = [rng.normal(size=o.shape) for o in out] if isinstance(out, list) else rng.normal(size=out.shape)

    def loss():
        o = layer.forward(x)
        return sum(np.sum(a * b) for a, b in zip(o, r)) if isinstance(o, list) else float(np.sum(o * r))

    loss()
    dx = layer.backward(r)
    analytic = {k: g.copy() for k, g in layer.grads.items()}
    worst = 0.0
    targets = [("x", x, dx)] + [(k, layer.params[k], analytic[k]) for k in layer.params]
    for name, arr, grad in targets:
        if grad is None:
            continue
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            denom = max(abs(num), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(num - gflat[i]) / denom)
    return worst


# ---------------------------------------------------------------- convolution


def test_identity_filter():
    x = np.array([[[0.2, -0.5, 0.7]]])
    W, b = np.ones((1, 1, 1)), np.zeros(1)
    assert np.allclose(conv1d_forward(x, W, b)[0, 0], [0.2, -0.5, 0.7])
    conv = Conv1D(1, 1, 1)
    conv.params["W"][...] = 1.0
    assert np.allclose(conv.forward(x)[0, 0], [0.2, 0.0, 0.7])


def test_difference_filter_on_constant():
    W = np.array([[[1.0, -1.0]]])
    assert np.all(conv1d_forward(np.full((1, 1, 10), 3.3), W, np.zeros(1)) == 0)


def test_conv_matches_double_loop(rng):
    for _ in range(20):
        C, F, w, L = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 6), rng.integers(6, 20)
        x = rng.normal(size=(2, C, L))
        W, b = rng.normal(size=(F, C, w)), rng.normal(size=F)
        assert np.max(np.abs(conv1d_forward(x, W, b) - _direct_conv(x, W, b))) < 1e-12


def test_conv_gradients(rng):
    conv = Conv1D(1, 3, 4, rng)
    conv.params["b"][...] = rng.normal(size=3)
    assert _layer_fd(conv, rng.normal(size=(1, 1, 16)), rng) < 1e-6


def test_multichannel_conv_gradients(rng):
    conv = Conv1D(3, 2, 3, rng)
    assert _layer_fd(conv, rng.normal(size=(2, 3, 11)), rng) < 1e-6


def test_filter_bank_gradients(rng):
    bank = FilterBank(1, [3, 5], 2, rng)
    assert _layer_fd(bank, rng.normal(size=(2, 1, 12)), rng) < 1e-6


def test_filter_too_long():
    with pytest.raises(ValueError, match="longer than input"):
        Conv1D(1, 1, 5).forward(np.zeros((1, 1, 4)))


@given(st.integers(1, 30), st.integers(1, 10), st.integers(0, 40), st.integers(1, 40), st.integers(0, 2**31))
def test_zero_tail_does_not_change_pooled_activations(n, w, extra1, extra2, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    # every window straddling the end of the signal already fits in L1
    L1 = n + w - 1 + extra1
    bank = FilterBank(1, [w], 3, rng)  # zero biases
    pool = MaxOverTime()
    a = pool.forward(bank.forward(np.pad(x, (0, L1 - n))[None, None]))
    b = pool.forward(bank.forward(np.pad(x, (0, L1 + extra2 - n))[None, None]))
    assert np.array_equal(a, b)


def test_single_window_conv_may_flatten_into_dense():
    net = build_network("Conv([10]*5), FC", input_length=30)
    assert net.hidden_size == 5 * 21


def test_valid_convolution_length(rng):
    for L, w in [(1200, 50), (1200, 500), (33, 33)]:
        assert Conv1D(1, 2, w, rng).forward(np.zeros((1, 1, L))).shape == (1, 2, L - w + 1)


# ---------------------------------------------------------------- pooling


def test_max_over_time_examples():
    pool = MaxOverTime()
    assert pool.forward(np.array([[[3.0, 1.0, 2.0]]])).tolist() == [[3.0]]
    out = pool.forward(np.array([[[0.5, 0.5]]]))
    assert out.tolist() == [[0.5]]
    assert pool.backward(np.ones((1, 1))).tolist() == [[[1.0, 0.0]]]


def test_max_over_time_random(rng):
    m = rng.normal(size=(3, 4, 9))
    assert np.array_equal(MaxOverTime().forward(m), m.max(axis=2))
    assert _layer_fd(MaxOverTime(), m, rng) < 1e-6


def test_max_over_time_empty():
    with pytest.raises(ValueError, match="empty"):
        MaxOverTime().forward(np.zeros((1, 1, 0)))


def test_local_max_pool_examples():
    pool = LocalMaxPool(2)
    assert pool.forward(np.array([[[1.0, 5.0, 2.0, 2.0]]])).tolist() == [[[5.0, 2.0]]]
    assert pool.forward(np.arange(5.0).reshape(1, 1, 5)).shape == (1, 1, 2)


def test_local_max_pool_random(rng):
    m = rng.normal(size=(2, 3, 9))
    out = LocalMaxPool(2).forward(m)
    for c in range(3):
        for i in range(4):
            assert out[1, c, i] == max(m[1, c, 2 * i], m[1, c, 2 * i + 1])
    assert _layer_fd(LocalMaxPool(2), m, rng) < 1e-6


# ---------------------------------------------------------------- dense, loss


def test_dense_identity_and_bias():
    d = Dense(3, 3)
    d.params["W"][...] = np.eye(3)
    x = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(d.forward(x), x)
    d.params["W"][...] = 0
    d.params["b"][...] = [0.5, -1.0, 2.0]
    assert d.forward(x).tolist() == [[0.5, -1.0, 2.0]]


@pytest.mark.parametrize("activation", [False, True])
def test_dense_gradients(activation, rng):
    d = Dense(5, 4, rng, activation)
    d.params["b"][...] = rng.normal(size=4)
    assert _layer_fd(d, rng.normal(size=(3, 5)), rng) < 1e-6


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        Dense(3, 2).forward(np.zeros((1, 4)))


def test_softmax_xent_examples():
    for label in (0, 1):
        loss, _ = softmax_xent([0.0, 0.0], label)
        assert loss == pytest.approx(math.log(2))
    loss, _ = softmax_xent([100.0, -100.0], 0)
    assert loss < 1e-8


def test_softmax_xent_gradient(rng):
    for _ in range(20):
        z = rng.normal(scale=3, size=2)
        y, wt = int(rng.integers(2)), float(rng.uniform(0.5, 3))
        _, g = softmax_xent(z, y, wt)
        assert np.allclose(g, wt * (softmax(z) - np.eye(2)[y]))
        for j in range(2):
            e = np.zeros(2)
            e[j] = 1e-6
            num = (softmax_xent(z + e, y, wt)[0] - softmax_xent(z - e, y, wt)[0]) / 2e-6
            assert num == pytest.approx(g[j], rel=1e-6, abs=1e-9)


@given(st.lists(st.floats(-700, 700), min_size=2, max_size=2))
def test_softmax_sums_to_one(z):
    p = softmax(np.array(z))
    assert abs(p.sum() - 1) < 1e-9 and np.all(p >= 0)


# ---------------------------------------------------------------- dropout


def test_dropout_identities(rng):
    h = rng.normal(size=100)
    assert np.array_equal(dropout(h, 0.0, True, rng)[0], h)
    assert np.array_equal(dropout(h, 0.7, False, rng)[0], h)


def test_dropout_statistics():
    h = np.full(100_000, 2.0)
    out, _ = dropout(h, 0.5, True, np.random.default_rng(42))
    assert abs(np.mean(out != 0) - 0.5) < 0.01
    assert out.mean() == pytest.approx(2.0, rel=0.02)
    assert set(np.unique(out)) == {0.0, 4.0}


def test_dropout_rate_bounds():
    with pytest.raises(ValueError):
        dropout(np.ones(3), 1.0, True)
    with pytest.raises(ValueError):
        Dropout(-0.1)


# ---------------------------------------------------------------- AdaGrad


def test_adagrad_unit_gradient():
    p, acc = {"w": np.array([1.0])}, {"w": np.array([0.0])}
    adagrad_step(p, {"w": np.array([1.0])}, acc, lr=0.1)
    assert p["w"][0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)
    first = p["w"][0]
    adagrad_step(p, {"w": np.array([1.0])}, acc, lr=0.1)
    assert first - p["w"][0] == pytest.approx(0.1 / math.sqrt(2), abs=1e-9)
    assert acc["w"][0] == 2.0


def test_adagrad_zero_gradient():
    p, acc = {"w": np.array([0.3, -0.2])}, {"w": np.array([0.5, 0.0])}
    adagrad_step(p, {"w": np.zeros(2)}, acc, lr=0.1)
    assert p["w"].tolist() == [0.3, -0.2] and acc["w"].tolist() == [0.5, 0.0]


def test_adagrad_l2_spares_biases():
    p = {"W": np.array([2.0]), "b": np.array([2.0])}
    acc = {"W": np.zeros(1), "b": np.zeros(1)}
    adagrad_step(p, {"W": np.zeros(1), "b": np.zeros(1)}, acc, lr=0.1, l2=0.5, exempt=["b"])
    assert p["b"][0] == 2.0 and p["W"][0] < 2.0 and acc["W"][0] == 1.0


def test_adagrad_rejects_non_finite():
    with pytest.raises(NonFiniteGradient):
        adagrad_step({"w": np.zeros(1)}, {"w": np.array([np.inf])}, {"w": np.zeros(1)}, lr=0.1)
    with pytest.raises(ValueError):
        adagrad_step({}, {}, {}, lr=0.0)


# ---------------------------------------------------------------- presets


@pytest.mark.parametrize("name,filters,layers", [
    ("FCNN-Small", 200, 3), ("FCNN-Medium", 600, 3), ("FCNN-Large", 1500, 3),
    ("DCNN-Shallow", 75, 6), ("DCNN-Deep", 125, 8),
])
def test_preset_sizes(name, filters, layers):
    net = build_network(name, seed=0)
    assert net.n_filters == filters
    assert preset_layer_count(name) == layers
    probs = net.predict_proba(np.zeros((1, 1200)))
    assert probs.shape == (1, 2) and abs(probs.sum() - 1) < 1e-9


def test_fcnn_small_layout():
    net = build_network("FCNN-Small")
    bank = net.layers[0]
    assert bank.windows == list(range(50, 501, 50)) and bank.per_window == 20
    assert net.hidden_size == 200


def test_dcnn_deep_shape_chain():
    net = build_network("DCNN-Deep")
    convs = [l for l in net.layers if isinstance(l, Conv1D)]
    assert [c.params["W"].shape[0] for c in convs] == [25, 50, 50]
    # 1200 -> 1191 -> 595 -> 586 -> 293 -> 284 -> 142 steps of 50 channels
    assert net.hidden_size == 142 * 50


def test_glorot_bounds():
    net = build_network("Conv([7]*5), MP, FC", seed=4, input_length=40)
    W = net.layers[0].params["W"]
    r = math.sqrt(6 / (1 * 7 + 5 * 7))
    assert np.all(np.abs(W) <= r) and np.abs(W).max() > 0.8 * r


@pytest.mark.parametrize("bad", ["", "Conv([10]*5)", "FC, FC", "Conv([10,20]*5), FC", "Pool, FC", "Conv([a]*2), MP, FC"])
def test_malformed_configs(bad):
    with pytest.raises(ValueError):
        build_network(bad, input_length=100)


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(3, 1200))
    a = build_network("FCNN-Tiny", seed=9)
    b = build_network("FCNN-Tiny", seed=9)
    assert np.array_equal(a.forward(x), b.forward(x))
    ta = a.forward(x, train=True, rng=np.random.default_rng(1))
    tb = b.forward(x, train=True, rng=np.random.default_rng(1))
    assert np.array_equal(ta, tb)


def test_checkpoint_round_trip(tmp_path, rng):
    net = build_network("Conv([5]*3), MP, FC(4), FC", seed=2, input_length=30)
    x = rng.normal(size=(4, 30))
    net.loss_and_grad(x, np.array([0, 1, 1, 0]))
    adagrad_step(net.parameters(), net.gradients(), net.accumulators, 0.1)
    p = tmp_path / "net.json"
    save_network(p, net, {"epoch": 3})
    back, state = load_network(p)
    assert state["epoch"] == 3
    assert np.array_equal(back.forward(x), net.forward(x))
    for k, v in net.accumulators.items():
        assert np.array_equal(back.accumulators[k], v)


# ---------------------------------------------------------------- gradient check


def test_grad_check_tiny_fcnn(rng):
    net = build_network("Conv([4,6]*2), MP, FC", seed=1, input_length=32)
    assert grad_check(net, rng.normal(size=32), 1, per_layer=200) < 1e-5


def test_grad_check_tiny_dcnn(rng):
    net = build_network("Conv([3]*3), MP, Conv([3]*4), MP, FC(5), FC", seed=1, input_length=32)
    assert grad_check(net, rng.normal(size=32), 0, per_layer=200) < 1e-5


def test_grad_check_rejects_zero_epsilon():
    net = build_network("Conv([4]*2), MP, FC", input_length=16)
    with pytest.raises(ValueError, match="epsilon"):
        grad_check(net, np.zeros(16), 0, epsilon=0.0)


def test_grad_check_detects_a_broken_backward(rng, monkeypatch):
    net = build_network("Conv([4,6]*2), MP, FC", seed=1, input_length=32)
    dense = net.layers[-1]
    original = dense.backward

    def broken(dout):
        g = original(dout)
        dense.grads["W"] = dense.grads["W"] * 1.01
        return g

    monkeypatch.setattr(dense, "backward", broken)
    assert grad_check(net, rng.normal(size=32), 1) > 1e-3
