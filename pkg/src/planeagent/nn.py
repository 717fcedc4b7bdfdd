"""A small numpy network substrate with hand-written backprop.

Networks are fixed layer sequences described by a JSON-serialisable :class:`NetworkSpec`.
There is no autograd graph: ``forward`` caches what each layer needs and ``backward``
walks the sequence in reverse.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ShapeMismatch(ValueError):
    pass


class SpecMismatch(ValueError):
    pass


class NoForwardCache(RuntimeError):
    pass


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        pass

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _need_cache(self):
        if self._cache is None:
            raise NoForwardCache(f"{self.kind}: backward called before forward")
        return self._cache


class Dense(Layer):
    """Affine map over the last axis; leading axes are treated as batch."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out

    def init_params(self, rng, dtype):
        bound = math.sqrt(6.0 / self.n_in)
        self.params["W"] = rng.uniform(-bound, bound, (self.n_in, self.n_out)).astype(dtype)
        self.params["b"] = np.zeros(self.n_out, dtype)

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"dense expects last dim {self.n_in}, got {x.shape}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        x = self._need_cache()
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.grads["W"] += x2.T @ dy2
        self.grads["b"] += dy2.sum(axis=0)
        return dy @ self.params["W"].T


class Conv2D(Layer):
    """2D convolution (cross-correlation) on (B, C, H, W) with zero padding."""

    kind = "conv"

    def __init__(self, n_in: int, n_out: int, kernel: int = 3, stride: int = 1, pad: int | None = None):
        super().__init__()
        self.n_in, self.n_out, self.k, self.stride = n_in, n_out, kernel, stride
        self.pad = kernel // 2 if pad is None else pad

    def init_params(self, rng, dtype):
        fan_in = self.n_in * self.k * self.k
        bound = math.sqrt(6.0 / fan_in)
        self.params["W"] = rng.uniform(-bound, bound, (self.n_out, self.n_in, self.k, self.k)).astype(dtype)
        self.params["b"] = np.zeros(self.n_out, dtype)

    def out_hw(self, h, w):
        s, k, p = self.stride, self.k, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.n_in:
            raise ShapeMismatch(f"conv expects (B, {self.n_in}, H, W), got {x.shape}")
        B, C, H, W = x.shape
        k, s, p = self.k, self.stride, self.pad
        Ho, Wo = self.out_hw(H, W)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((B, C, k, k, Ho, Wo), x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i : i + s * Ho : s, j : j + s * Wo : s]
        cols = cols.reshape(B, C * k * k, Ho * Wo)
        self._cache = (x.shape, cols)
        out = np.matmul(self.params["W"].reshape(self.n_out, -1), cols)
        out += self.params["b"][:, None]
        return out.reshape(B, self.n_out, Ho, Wo)

    def backward(self, dy, need_dx=True):
        (B, C, H, W), cols = self._need_cache()
        k, s, p = self.k, self.stride, self.pad
        Ho, Wo = dy.shape[2:]
        dy3 = dy.reshape(B, self.n_out, Ho * Wo)
        self.grads["W"] += np.einsum("bfn,bkn->fk", dy3, cols, optimize=True).reshape(self.params["W"].shape)
        self.grads["b"] += dy3.sum(axis=(0, 2))
        if not need_dx:
            return None
        dcols = np.matmul(self.params["W"].reshape(self.n_out, -1).T, dy3).reshape(B, C, k, k, Ho, Wo)
        dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[:, :, i, j]
        return dxp[:, :, p : p + H, p : p + W] if p else dxp


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, dy):
        return dy * self._need_cache()


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._need_cache())


class Recurrent(Layer):
    """Vanilla (tanh) or LSTM recurrence over (B, T, D), returning all hidden states (B, T, H)."""

    kind = "recurrent"

    def __init__(self, n_in: int, hidden: int, cell: str = "lstm"):
        super().__init__()
        if cell not in ("vanilla", "lstm"):
            raise ValueError(f"unknown cell kind {cell!r}")
        self.n_in, self.hidden, self.cell = n_in, hidden, cell

    @property
    def n_gates(self):
        return 4 if self.cell == "lstm" else 1

    def init_params(self, rng, dtype):
        H, G = self.hidden, self.n_gates
        bound = 1.0 / math.sqrt(H)
        self.params["Wx"] = rng.uniform(-bound, bound, (self.n_in, G * H)).astype(dtype)
        self.params["Wh"] = rng.uniform(-bound, bound, (H, G * H)).astype(dtype)
        b = np.zeros(G * H, dtype)
        if self.cell == "lstm":
            b[H : 2 * H] = 1.0  # forget gate
        self.params["b"] = b

    def forward(self, x):
        if x.ndim != 3 or x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"recurrent expects (B, T, {self.n_in}), got {x.shape}")
        B, T, _ = x.shape
        H = self.hidden
        Wh = self.params["Wh"]
        zx = x @ self.params["Wx"] + self.params["b"]
        hs = np.zeros((B, T + 1, H), x.dtype)
        if self.cell == "vanilla":
            for t in range(T):
                hs[:, t + 1] = np.tanh(zx[:, t] + hs[:, t] @ Wh)
            self._cache = (x, hs, None)
        else:
            cs = np.zeros((B, T + 1, H), x.dtype)
            gates = np.empty((B, T, 4 * H), x.dtype)
            for t in range(T):
                z = zx[:, t] + hs[:, t] @ Wh
                i = _sigmoid(z[:, :H])
                f = _sigmoid(z[:, H : 2 * H])
                g = np.tanh(z[:, 2 * H : 3 * H])
                o = _sigmoid(z[:, 3 * H :])
                cs[:, t + 1] = f * cs[:, t] + i * g
                hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
                gates[:, t] = np.concatenate([i, f, g, o], axis=1)
            self._cache = (x, hs, (cs, gates))
        return hs[:, 1:]

    def backward(self, dh_out):
        x, hs, extra = self._need_cache()
        B, T, _ = x.shape
        H = self.hidden
        Wh = self.params["Wh"]
        dz = np.zeros((B, T, self.n_gates * H), x.dtype)
        dh_next = np.zeros((B, H), x.dtype)
        if self.cell == "vanilla":
            for t in reversed(range(T)):
                dh = dh_out[:, t] + dh_next
                dz[:, t] = dh * (1.0 - hs[:, t + 1] ** 2)
                dh_next = dz[:, t] @ Wh.T
        else:
            cs, gates = extra
            dc_next = np.zeros((B, H), x.dtype)
            for t in reversed(range(T)):
                i, f, g, o = np.split(gates[:, t], 4, axis=1)
                tc = np.tanh(cs[:, t + 1])
                dh = dh_out[:, t] + dh_next
                do = dh * tc
                dc = dh * o * (1.0 - tc**2) + dc_next
                di = dc * g
                dg = dc * i
                df = dc * cs[:, t]
                dc_next = dc * f
                dz[:, t] = np.concatenate(
                    [di * i * (1 - i), df * f * (1 - f), dg * (1 - g**2), do * o * (1 - o)], axis=1
                )
                dh_next = dz[:, t] @ Wh.T
        dz2 = dz.reshape(B * T, -1)
        self.grads["Wx"] += x.reshape(B * T, -1).T @ dz2
        self.grads["Wh"] += hs[:, :-1].reshape(B * T, H).T @ dz2
        self.grads["b"] += dz2.sum(axis=0)
        return dz @ self.params["Wx"].T


_LAYER_KINDS = {"dense": Dense, "conv": Conv2D, "relu": ReLU, "flatten": Flatten, "recurrent": Recurrent}


@dataclass(frozen=True)
class NetworkSpec:
    """Input shape (without batch) plus an ordered list of layer descriptors."""

    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(dict(d) for d in self.layers))
        if not self.layers:
            raise ValueError("a network needs at least one layer")

    def to_record(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [dict(d) for d in self.layers]}

    @classmethod
    def from_record(cls, rec: dict) -> "NetworkSpec":
        return cls(tuple(rec["input_shape"]), tuple(rec["layers"]))

    def __eq__(self, other):
        return isinstance(other, NetworkSpec) and self.to_record() == other.to_record()

    def __hash__(self):
        return hash(json.dumps(self.to_record(), sort_keys=True))


def q_network_spec(n_frames: int = 3, size: int = 64, n_actions: int = 8) -> NetworkSpec:
    """Three stride-2 convolutions, a 128-wide hidden layer and one output per action."""
    flat = 32 * (size // 8) ** 2
    return NetworkSpec(
        (n_frames, size, size),
        (
            {"kind": "conv", "n_in": n_frames, "n_out": 8, "kernel": 3, "stride": 2},
            {"kind": "relu"},
            {"kind": "conv", "n_in": 8, "n_out": 16, "kernel": 3, "stride": 2},
            {"kind": "relu"},
            {"kind": "conv", "n_in": 16, "n_out": 32, "kernel": 3, "stride": 2},
            {"kind": "relu"},
            {"kind": "flatten"},
            {"kind": "dense", "n_in": flat, "n_out": 128},
            {"kind": "relu"},
            {"kind": "dense", "n_in": 128, "n_out": n_actions},
        ),
    )


class Network:
    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.layers = []
        rng = np.random.default_rng(seed)
        for desc in spec.layers:
            desc = dict(desc)
            kind = desc.pop("kind")
            layer = _LAYER_KINDS[kind](**desc)
            layer.init_params(rng, self.dtype)
            layer.zero_grad()
            self.layers.append(layer)

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        # a 0 in input_shape accepts any extent (sequence length)
        want = self.spec.input_shape
        if x.ndim != len(want) + 1 or any(w and w != s for w, s in zip(want, x.shape[1:])):
            raise ShapeMismatch(f"expected input (B, {want}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, dy, need_input_grad=True):
        dy = np.asarray(dy, dtype=self.dtype)
        for n, layer in enumerate(reversed(self.layers)):
            if n == len(self.layers) - 1 and not need_input_grad and isinstance(layer, Conv2D):
                return layer.backward(dy, need_dx=False)
            dy = layer.backward(dy)
        return dy

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self):
        return [(f"{i}.{k}", layer.params[k]) for i, layer in enumerate(self.layers) for k in sorted(layer.params)]

    def params(self):
        return [p for _, p in self.named_params()]

    def grads(self):
        return [layer.grads[k] for layer in self.layers for k in sorted(layer.params)]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def clone(self) -> "Network":
        other = copy.deepcopy(self)
        for layer in other.layers:
            layer._cache = None
        return other


def copy_params(src: Network, dst: Network) -> None:
    """Overwrite ``dst`` parameters with an independent copy of ``src``'s."""
    if src.spec != dst.spec:
        raise SpecMismatch("source and destination networks have different specs")
    for s, d in zip(src.params(), dst.params()):
        d[...] = s


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred, target, mask=None):
    """Mean squared error over unmasked entries; returns (loss, d loss / d pred)."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(target, dtype=pred.dtype)
    m = np.ones_like(diff) if mask is None else np.broadcast_to(mask, diff.shape).astype(diff.dtype)
    n = max(float(m.sum()), 1.0)
    return float(np.sum(m * diff**2) / n), (2.0 * m * diff / n).astype(pred.dtype)


def l1_loss(pred, target, mask=None):
    """Mean absolute error over unmasked entries; returns (loss, subgradient)."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(target, dtype=pred.dtype)
    m = np.ones_like(diff) if mask is None else np.broadcast_to(mask, diff.shape).astype(diff.dtype)
    n = max(float(m.sum()), 1.0)
    return float(np.sum(m * np.abs(diff)) / n), (m * np.sign(diff) / n).astype(pred.dtype)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    def clone(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_step(params, grads, state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimiser moments differ in count")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"parameter {p.shape} vs gradient {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: Network, step: int = 0, extra: dict | None = None) -> None:
    """JSON header line followed by the raw little-endian parameter payload."""
    payload = b"".join(np.ascontiguousarray(p, dtype=p.dtype.newbyteorder("<")).tobytes() for p in net.params())
    header = {
        "spec": net.spec.to_record(),
        "seed": net.seed,
        "step": int(step),
        "dtype": net.dtype.str.lstrip("<>=|"),
        "payload_bytes": len(payload),
        "extra": extra or {},
    }
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + payload)


def load_checkpoint(path, expected_spec: NetworkSpec | None = None):
    """Returns (network, header). Raises SpecMismatch if ``expected_spec`` differs."""
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    spec = NetworkSpec.from_record(header["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise SpecMismatch("checkpoint spec differs from the expected network")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    net = Network(spec, header["seed"], dtype=dtype.newbyteorder("="))
    buf = raw[nl + 1 :]
    if len(buf) != header["payload_bytes"]:
        raise ValueError("checkpoint payload is truncated")
    offset = 0
    for p in net.params():
        n = p.size * dtype.itemsize
        p[...] = np.frombuffer(buf[offset : offset + n], dtype=dtype).reshape(p.shape)
        offset += n
    return net, header


# ---------------------------------------------------------------------------
# gradient verification


def gradient_check(net: Network, x, loss_fn, n_coords: int = 20, eps: float = 1e-6, seed: int = 0) -> float:
    """Max relative error between backprop and central differences on random coordinates.

    ``loss_fn(output) -> (loss, d loss / d output)``. Also checks the input gradient.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=net.dtype)
    net.zero_grad()
    loss, dout = loss_fn(net.forward(x))
    dx = net.backward(dout)

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    worst = 0.0
    for p, g in zip(net.params(), net.grads()):
        for _ in range(n_coords):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            old = p[idx]
            p[idx] = old + eps
            lp, _ = loss_fn(net.forward(x))
            p[idx] = old - eps
            lm, _ = loss_fn(net.forward(x))
            p[idx] = old
            worst = max(worst, rel(g[idx], (lp - lm) / (2 * eps)))
    for _ in range(n_coords):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        num = (loss_fn(net.forward(xp))[0] - loss_fn(net.forward(xm))[0]) / (2 * eps)
        worst = max(worst, rel(dx[idx], num))
    return worst
