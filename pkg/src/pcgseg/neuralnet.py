"""A small 1-D convolutional network engine with hand-written backpropagation.

Tensors are float64 arrays shaped ``(batch, channels, length)`` between
convolutional layers and ``(batch, features)`` after pooling/flattening.
Every layer caches what it needs during ``forward`` and returns the input
gradient from ``backward`` while filling ``self.grads``.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SEGMENT_LENGTH = 1200

PRESETS = {
    "FCNN-Small": "Conv([50-500,50]*20), MP, FC",
    "FCNN-Medium": "Conv([25-500,25]*30), MP, FC",
    "FCNN-Large": "Conv([20-600,20]*50), MP, FC",
    "DCNN-Shallow": "Conv([10]*25), MP, Conv([10]*50), MP, FC(256), FC",
    "DCNN-Deep": "Conv([10]*25), MP, Conv([10]*50), MP, Conv([10]*50), MP, FC(256), FC",
    # reduced filter bank used for desk-scale experiments
    "FCNN-Tiny": "Conv([50,100,150]*8), MP, FC",
}


class NonFiniteGradient(FloatingPointError):
    pass


def relu(z):
    return np.maximum(z, 0.0)


# ---------------------------------------------------------------- layers


class Layer:
    trainable = False

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def forward(self, x, train: bool = False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def signature(self) -> Tuple:
        """Discrete routing state of the last forward pass (ReLU masks, argmax picks)."""
        return ()

    def describe(self) -> str:
        return type(self).__name__


def _glorot(rng, shape, fan_in, fan_out):
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


def conv1d_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid cross-correlation: ``(B, C, L) x (F, C, w) -> (B, F, L - w + 1)`` pre-activations."""
    F, C, w = W.shape
    if x.shape[2] < w:
        raise ValueError(f"filter window {w} longer than input length {x.shape[2]}")
    cols = sliding_window_view(x, w, axis=2)  # (B, C, L', w)
    B, _, Lp, _ = cols.shape
    cols = cols.transpose(0, 2, 1, 3).reshape(B * Lp, C * w)
    z = cols @ W.reshape(F, C * w).T + b
    return z.reshape(B, Lp, F).transpose(0, 2, 1)


class Conv1D(Layer):
    """Valid 1-D convolution over all input channels, followed by a rectifier."""

    trainable = True

    def __init__(self, in_channels: int, filters: int, window: int, rng=None, activation: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.window = window
        self.activation = activation
        self.params["W"] = _glorot(rng, (filters, in_channels, window), in_channels * window, filters * window)
        self.params["b"] = np.zeros(filters)
        self.need_input_grad = True

    def forward(self, x, train=False, rng=None):
        W, b = self.params["W"], self.params["b"]
        F, C, w = W.shape
        if x.shape[2] < w:
            raise ValueError(f"filter window {w} longer than input length {x.shape[2]}")
        cols = sliding_window_view(x, w, axis=2)
        B, _, Lp, _ = cols.shape
        cols = cols.transpose(0, 2, 1, 3).reshape(B * Lp, C * w)
        z = (cols @ W.reshape(F, C * w).T + b).reshape(B, Lp, F).transpose(0, 2, 1)
        self._cache = (cols, x.shape, z > 0 if self.activation else None)
        self.preact = z
        return relu(z) if self.activation else z

    def backward(self, dout):
        cols, xshape, mask = self._cache
        W = self.params["W"]
        F, C, w = W.shape
        B, _, L = xshape
        dz = dout * mask if mask is not None else dout
        Lp = dz.shape[2]
        dz_rows = dz.transpose(0, 2, 1).reshape(B * Lp, F)
        self.grads["W"] = (dz_rows.T @ cols).reshape(F, C, w)
        self.grads["b"] = dz.sum(axis=(0, 2))
        if not self.need_input_grad:
            return None
        # full correlation of dz with the flipped filters
        pad = np.pad(dz, ((0, 0), (0, 0), (w - 1, w - 1)))
        win = sliding_window_view(pad, w, axis=2)  # (B, F, L, w)
        win = win.transpose(0, 2, 1, 3).reshape(B * L, F * w)
        Wf = W[:, :, ::-1].transpose(0, 2, 1).reshape(F * w, C)
        return (win @ Wf).reshape(B, L, C).transpose(0, 2, 1)

    def signature(self):
        return (self._cache[2].tobytes(),) if self.activation else ()

    def describe(self):
        F, C, w = self.params["W"].shape
        return f"Conv(window={w}, filters={F}, in={C})"


class FilterBank(Layer):
    """Parallel convolutions with different window sizes over the same input.

    Produces a list of feature maps, one ``(B, k, L - w + 1)`` array per window.
    """

    trainable = True

    def __init__(self, in_channels: int, windows: Sequence[int], per_window: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.windows = list(windows)
        self.per_window = per_window
        self.convs = [Conv1D(in_channels, per_window, w, rng) for w in self.windows]
        for i, c in enumerate(self.convs):
            self.params[f"W{i}"] = c.params["W"]
            self.params[f"b{i}"] = c.params["b"]
        self.need_input_grad = True

    def _sync(self):
        for i, c in enumerate(self.convs):
            c.params["W"] = self.params[f"W{i}"]
            c.params["b"] = self.params[f"b{i}"]
            c.need_input_grad = self.need_input_grad

    def forward(self, x, train=False, rng=None):
        self._sync()
        return [c.forward(x) for c in self.convs]

    def backward(self, douts):
        dx = None
        for i, (c, d) in enumerate(zip(self.convs, douts)):
            g = c.backward(d)
            self.grads[f"W{i}"] = c.grads["W"]
            self.grads[f"b{i}"] = c.grads["b"]
            if g is not None:
                dx = g if dx is None else dx + g
        return dx

    def signature(self):
        return tuple(s for c in self.convs for s in c.signature())

    @property
    def n_filters(self) -> int:
        return len(self.windows) * self.per_window

    def describe(self):
        return f"FilterBank(windows={self.windows}, per_window={self.per_window})"


class MaxOverTime(Layer):
    """Global max over the time axis of each feature map; ties route to the earliest index."""

    def forward(self, x, train=False, rng=None):
        maps = x if isinstance(x, list) else [x]
        for m in maps:
            if m.shape[2] == 0:
                raise ValueError("empty feature map")
        self._idx = [np.argmax(m, axis=2) for m in maps]
        self._shapes = [m.shape for m in maps]
        self._list = isinstance(x, list)
        return np.concatenate([np.take_along_axis(m, i[:, :, None], axis=2)[:, :, 0] for m, i in zip(maps, self._idx)], axis=1)

    def backward(self, dout):
        outs, start = [], 0
        for shape, idx in zip(self._shapes, self._idx):
            B, k, L = shape
            g = np.zeros(shape)
            np.put_along_axis(g, idx[:, :, None], dout[:, start : start + k, None], axis=2)
            outs.append(g)
            start += k
        return outs if self._list else outs[0]

    def signature(self):
        return tuple(i.tobytes() for i in self._idx)

    def describe(self):
        return "MaxOverTime"


class LocalMaxPool(Layer):
    """Non-overlapping max pooling over ``window`` steps per channel; a ragged tail is dropped."""

    def __init__(self, window: int = 2):
        super().__init__()
        self.window = window

    def forward(self, x, train=False, rng=None):
        B, C, L = x.shape
        w = self.window
        if L < w:
            raise ValueError(f"pooling window {w} longer than input length {L}")
        n = L // w
        blocks = x[:, :, : n * w].reshape(B, C, n, w)
        self._idx = np.argmax(blocks, axis=3)
        self._shape = x.shape
        return np.take_along_axis(blocks, self._idx[..., None], axis=3)[..., 0]

    def backward(self, dout):
        B, C, L = self._shape
        w = self.window
        n = L // w
        g = np.zeros((B, C, n, w))
        np.put_along_axis(g, self._idx[..., None], dout[..., None], axis=3)
        out = np.zeros(self._shape)
        out[:, :, : n * w] = g.reshape(B, C, n * w)
        return out

    def signature(self):
        return (self._idx.tobytes(),)

    def describe(self):
        return f"MaxPool({self.window})"


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    """Affine map, optionally followed by a rectifier."""

    trainable = True

    def __init__(self, n_in: int, n_out: int, rng=None, activation: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.activation = activation
        self.params["W"] = _glorot(rng, (n_in, n_out), n_in, n_out)
        self.params["b"] = np.zeros(n_out)

    def forward(self, x, train=False, rng=None):
        W = self.params["W"]
        if x.shape[1] != W.shape[0]:
            raise ValueError(f"dense layer expects {W.shape[0]} inputs, got {x.shape[1]}")
        self._x = x
        z = x @ W + self.params["b"]
        self._mask = z > 0 if self.activation else None
        self.preact = z
        return relu(z) if self.activation else z

    def backward(self, dout):
        dz = dout * self._mask if self._mask is not None else dout
        self.grads["W"] = self._x.T @ dz
        self.grads["b"] = dz.sum(axis=0)
        return dz @ self.params["W"].T

    def signature(self):
        return (self._mask.tobytes(),) if self._mask is not None else ()

    def describe(self):
        n_in, n_out = self.params["W"].shape
        return f"FC({n_in}->{n_out}{', relu' if self.activation else ''})"


def dropout(h: np.ndarray, rate: float, train: bool, rng=None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Inverted dropout. Returns ``(output, scale mask)``; the mask is None when it is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not train or rate == 0.0:
        return h, None
    rng = rng if rng is not None else np.random.default_rng(0)
    mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
    return h * mask, mask


class Dropout(Layer):
    def __init__(self, rate: float = 0.5):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        out, self._mask = dropout(x, self.rate, train, rng)
        return out

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask

    def describe(self):
        return f"Dropout({self.rate})"


# ---------------------------------------------------------------- loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels, weights=None):
    """Per-example weighted cross-entropy and its gradient on the logits.

    Accepts a single example (1-D logits, scalar label) or a batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    L = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels, dtype=int))
    w = np.ones(len(y)) if weights is None else np.atleast_1d(np.asarray(weights, dtype=np.float64))
    z = L - L.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = w * (logsum - z[np.arange(len(y)), y])
    p = np.exp(z - logsum[:, None])
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    grad = w[:, None] * (p - onehot)
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


# ---------------------------------------------------------------- optimizer


def adagrad_step(params: Dict, grads: Dict, accumulators: Dict, lr: float, l2: float = 0.0,
                 exempt: Sequence = (), eps: float = 1e-8) -> None:
    """In-place AdaGrad update; keys listed in ``exempt`` (biases) skip the L2 term."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for key, p in params.items():
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {key}")
        if l2 and key not in exempt:
            g = g + l2 * p
        acc = accumulators[key]
        acc += g * g
        p -= lr * g / (np.sqrt(acc) + eps)


# ---------------------------------------------------------------- network


@dataclass
class Network:
    layers: List[Layer]
    config: str
    seed: int = 0
    input_length: int = SEGMENT_LENGTH
    accumulators: Dict[Tuple[int, str], np.ndarray] = field(default_factory=dict)
    n_config_layers: int = 0

    def __post_init__(self):
        for key, p in self.parameters().items():
            self.accumulators.setdefault(key, np.zeros_like(p))
        first = self.layers[0]
        if hasattr(first, "need_input_grad"):
            first.need_input_grad = False

    def parameters(self) -> Dict[Tuple[int, str], np.ndarray]:
        return {(i, k): v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def gradients(self) -> Dict[Tuple[int, str], np.ndarray]:
        return {(i, k): v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def bias_keys(self):
        return [key for key in self.parameters() if key[1].startswith("b")]

    @property
    def n_filters(self) -> int:
        n = 0
        for layer in self.layers:
            if isinstance(layer, FilterBank):
                n += layer.n_filters
            elif isinstance(layer, Conv1D):
                n += layer.params["W"].shape[0]
        return n

    @property
    def hidden_size(self) -> int:
        """Width of the representation entering the first dense layer."""
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.params["W"].shape[0]
        raise ValueError("network has no dense layer")

    def forward(self, x, train: bool = False, rng=None) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, None, :]
        elif h.ndim == 2:
            h = h[:, None, :]
        for layer in self.layers:
            h = layer.forward(h, train, rng)
        return h

    def activations(self, x) -> List[Tuple[str, np.ndarray]]:
        """Eval-mode outputs of every layer for a single input."""
        h = np.asarray(x, dtype=np.float64)[None, None, :]
        out = []
        for layer in self.layers:
            h = layer.forward(h, False, None)
            out.append((layer.describe(), h))
        return out

    def predict_proba(self, X, batch_size: int = 64) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = [softmax(self.forward(X[i : i + batch_size])) for i in range(0, len(X), batch_size)]
        return np.vstack(out) if out else np.zeros((0, 2))

    def backward(self, dlogits):
        g = dlogits
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                break

    def loss_and_grad(self, X, y, weights=None, train: bool = False, rng=None) -> float:
        """Mean weighted cross-entropy of a batch; parameter gradients are left in the layers."""
        logits = self.forward(X, train, rng)
        loss, dlogits = softmax_xent(logits, y, weights)
        n = len(np.atleast_1d(y))
        self.backward(dlogits / n)
        return float(np.sum(loss) / n)

    def signature(self):
        return tuple(layer.signature() for layer in self.layers)

    def describe(self) -> str:
        return " -> ".join(layer.describe() for layer in self.layers)

    # -- serialization

    def state_dict(self) -> dict:
        params = self.parameters()
        return {
            "config": self.config,
            "seed": self.seed,
            "input_length": self.input_length,
            "params": [{"layer": i, "name": k, "shape": list(v.shape), "values": v.ravel().tolist()} for (i, k), v in params.items()],
            "accumulators": [{"layer": i, "name": k, "values": self.accumulators[(i, k)].ravel().tolist()} for (i, k) in params],
        }

    def load_state(self, state: dict) -> None:
        params = self.parameters()
        for entry in state["params"]:
            key = (entry["layer"], entry["name"])
            if key not in params or list(params[key].shape) != entry["shape"]:
                raise ValueError(f"checkpoint parameter {key} does not match the network built from its config")
            params[key][...] = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for entry in state.get("accumulators", []):
            key = (entry["layer"], entry["name"])
            self.accumulators[key][...] = np.array(entry["values"], dtype=np.float64).reshape(params[key].shape)
        for layer in self.layers:
            if isinstance(layer, FilterBank):
                layer._sync()


# ---------------------------------------------------------------- configuration grammar

_TOKEN = re.compile(r"\s*(Conv\(\s*\[[^\]]*\]\s*(?:\*\s*\d+)?\s*\)|MP|MOT|FC(?:\(\s*\d+\s*\))?)\s*(?:,|$)")


def _split_tokens(config: str) -> List[str]:
    tokens, pos = [], 0
    config = config.strip()
    while pos < len(config):
        m = _TOKEN.match(config, pos)
        if not m:
            raise ValueError(f"malformed network configuration near {config[pos:]!r}")
        tokens.append(m.group(1).replace(" ", ""))
        pos = m.end()
    if not tokens:
        raise ValueError("empty network configuration")
    return tokens


def _parse_conv(token: str) -> Tuple[List[int], int, bool]:
    """``Conv([lo-hi,step]*k)``, ``Conv([a,b,c]*k)``, ``Conv([w]*k)`` or ``Conv([w*k])``."""
    m = re.fullmatch(r"Conv\(\[([^\]]*)\](?:\*(\d+))?\)", token)
    if not m:
        raise ValueError(f"malformed convolution token {token!r}")
    body, count = m.group(1), m.group(2)
    if count is None:
        inner = re.fullmatch(r"(\d+)\*(\d+)", body)
        if not inner:
            raise ValueError(f"convolution token {token!r} lacks a filter count")
        return [int(inner.group(1))], int(inner.group(2)), False
    k = int(count)
    rng = re.fullmatch(r"(\d+)-(\d+),(\d+)", body)
    if rng:
        lo, hi, step = (int(g) for g in rng.groups())
        if step <= 0 or hi < lo:
            raise ValueError(f"bad window range in {token!r}")
        return list(range(lo, hi + 1, step)), k, True
    try:
        windows = [int(v) for v in body.split(",")]
    except ValueError:
        raise ValueError(f"bad window list in {token!r}") from None
    return windows, k, len(windows) > 1


def build_network(config: str, seed: int = 0, input_length: int = SEGMENT_LENGTH, dropout_rate: float = 0.5,
                  n_classes: int = 2) -> Network:
    """Build a network from a preset name or a configuration string.

    A multi-window ``Conv`` is a filter bank whose ``MP`` is max-over-time; a
    single-window ``Conv`` is an ordinary convolution whose ``MP`` pools pairs
    of steps. ``FC(n)`` is a hidden rectified layer, the final bare ``FC`` the
    softmax output, preceded by dropout.
    """
    text = PRESETS.get(config, config)
    tokens = _split_tokens(text)
    if not tokens[-1] == "FC":
        raise ValueError("configuration must end with the output layer 'FC'")
    if any(t == "FC" for t in tokens[:-1]):
        raise ValueError("only the last fully-connected layer may omit its width")
    rng = np.random.default_rng(seed)
    layers: List[Layer] = []
    shape: Tuple = (1, input_length)  # (channels, length) or (features,)
    pending_bank = False
    for tok in tokens:
        if tok.startswith("Conv"):
            if len(shape) != 2 or pending_bank:
                raise ValueError("a convolution must follow the input or a pooling layer")
            windows, k, bank = _parse_conv(tok)
            C, L = shape
            if max(windows) > L:
                raise ValueError(f"window {max(windows)} exceeds input length {L}")
            if bank:
                layers.append(FilterBank(C, windows, k, rng))
                pending_bank = True
                shape = ("bank", len(windows) * k)
            else:
                layers.append(Conv1D(C, k, windows[0], rng))
                shape = (k, L - windows[0] + 1)
        elif tok in ("MP", "MOT"):
            if pending_bank or tok == "MOT":
                layers.append(MaxOverTime())
                n = shape[1] if pending_bank else shape[0]
                shape = (n,)
                pending_bank = False
            else:
                C, L = shape
                layers.append(LocalMaxPool(2))
                shape = (C, L // 2)
        else:  # FC
            if pending_bank:
                raise ValueError("a filter bank must be pooled before a dense layer")
            if len(shape) == 2:
                layers.append(Flatten())
                shape = (shape[0] * shape[1],)
            m = re.fullmatch(r"FC\((\d+)\)", tok)
            if m:
                n = int(m.group(1))
                layers.append(Dense(shape[0], n, rng, activation=True))
                shape = (n,)
            else:
                layers.append(Dropout(dropout_rate))
                layers.append(Dense(shape[0], n_classes, rng, activation=False))
                shape = (n_classes,)
    return Network(layers, config, seed, input_length, n_config_layers=len(tokens))


def preset_layer_count(config: str) -> int:
    """Layer count as tabulated for the presets (one per configuration token)."""
    return len(_split_tokens(PRESETS.get(config, config)))


# ---------------------------------------------------------------- gradient check


def grad_check(net: Network, x, label: int, epsilon: float = 1e-6, per_layer: int = 200, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Runs in eval mode (dropout off). Coordinates whose +/- perturbation changes
    any ReLU mask or pooling choice straddle a kink and are skipped.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(label)
    net.loss_and_grad(X, y)
    base_sig = net.signature()
    analytic = {k: g.copy() for k, g in net.gradients().items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for key, p in net.parameters().items():
        flat = p.reshape(-1)
        n = min(per_layer, flat.size)
        idx = rng.choice(flat.size, size=n, replace=False)
        ga = analytic[key].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + epsilon
            lp = _loss(net, X, y)
            sp = net.signature()
            flat[i] = old - epsilon
            lm = _loss(net, X, y)
            sm = net.signature()
            flat[i] = old
            if sp != base_sig or sm != base_sig:
                continue
            num = (lp - lm) / (2 * epsilon)
            a = ga[i]
            denom = max(abs(a), abs(num))
            if denom < 1e-10:
                continue
            worst = max(worst, abs(a - num) / denom)
    return worst


def _loss(net, X, y):
    loss, _ = softmax_xent(net.forward(X), y)
    return float(np.mean(loss))


def save_network(path, net: Network, extra: Optional[dict] = None) -> None:
    state = net.state_dict()
    state.update(extra or {})
    with open(path, "w") as fh:
        json.dump(state, fh)


def load_network(path_or_state) -> Tuple[Network, dict]:
    if isinstance(path_or_state, dict):
        state = path_or_state
    else:
        with open(path_or_state) as fh:
            state = json.load(fh)
    try:
        net = build_network(state["config"], state.get("seed", 0), state.get("input_length", SEGMENT_LENGTH),
                            state.get("hyperparameters", {}).get("dropout", 0.5))
        net.load_state(state)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed checkpoint: missing {exc}") from exc
    return net, state
