"""Minimal neural-network kit: dense and 2-D convolution layers with manual
backpropagation, Adam, and a binary checkpoint format.

Dense layers take ``(N, F)`` inputs; conv layers take ``(N, C, H, W)`` and use
"same" padding. Conv padding ``"sphere"`` wraps the column (azimuth) axis and
clamps the row (polar) axis, which is the topology of the direction square.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .core import InvalidArgument, InvalidState, Rng

ACTIVATIONS = ("identity", "relu", "softplus")


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softplus":
        return softplus(z)
    return z


def _act_grad(name, z):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "softplus":
        return sigmoid(z)
    return np.ones_like(z)


@dataclass
class Dense:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    @property
    def shape_in(self):
        return self.W.shape[0]

    @property
    def shape_out(self):
        return self.W.shape[1]


@dataclass
class Conv2d:
    W: np.ndarray  # (cout, cin, k, k)
    b: np.ndarray
    activation: str = "identity"
    padding: str = "zero"
    _gather: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def shape_in(self):
        return self.W.shape[1]

    @property
    def shape_out(self):
        return self.W.shape[0]

    def gather_matrix(self, h, w):
        """Sparse ``(h*w*k*k, h*w)`` matrix mapping an image to its patches."""
        key = (h, w)
        if key not in self._gather:
            k = self.W.shape[-1]
            p = k // 2
            idx = np.arange(h * w).reshape(h, w)
            if self.padding == "sphere":
                idx = np.pad(idx, ((0, 0), (p, p)), mode="wrap")
                idx = np.pad(idx, ((p, p), (0, 0)), mode="edge")
            else:
                idx = np.pad(idx, p, mode="constant", constant_values=-1)
            rows, cols = [], []
            r = 0
            for i in range(h):
                for j in range(w):
                    patch = idx[i:i + k, j:j + k].ravel()
                    for q, c in enumerate(patch):
                        if c >= 0:
                            rows.append(r + q)
                            cols.append(c)
                    r += k * k
            g = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(h * w * k * k, h * w))
            self._gather[key] = g
        return self._gather[key]


class Network:
    """Ordered layer stack (the parameter container of a model)."""

    def __init__(self, layers):
        self.layers = list(layers)
        self.version = 0
        for a, b in zip(self.layers, self.layers[1:]):
            if a.shape_out != b.shape_in:
                raise InvalidArgument(f"layer shapes incompatible: {a.shape_out} -> {b.shape_in}")
        for l in self.layers:
            if l.activation not in ACTIVATIONS:
                raise InvalidArgument(f"unknown activation {l.activation!r}")

    def params(self):
        out = []
        for l in self.layers:
            out += [l.W, l.b]
        return out

    @property
    def n_params(self):
        return int(sum(p.size for p in self.params()))

    def copy(self):
        layers = []
        for l in self.layers:
            if isinstance(l, Dense):
                layers.append(Dense(l.W.copy(), l.b.copy(), l.activation))
            else:
                layers.append(Conv2d(l.W.copy(), l.b.copy(), l.activation, l.padding))
        return Network(layers)

    def touch(self):
        self.version += 1


def mlp(sizes, rng: Rng, hidden="relu", out="identity", zero_last=False) -> Network:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        W = rng.normal(0.0, np.sqrt(2.0 / a), (a, b))
        if last and zero_last:
            W = np.zeros((a, b))
        layers.append(Dense(W, np.zeros(b), out if last else hidden))
    return Network(layers)


def convnet(channels, rng: Rng, k=3, hidden="relu", out="identity", padding="zero", zero_last=False) -> Network:
    layers = []
    for i, (a, b) in enumerate(zip(channels[:-1], channels[1:])):
        last = i == len(channels) - 2
        W = rng.normal(0.0, np.sqrt(2.0 / (a * k * k)), (b, a, k, k))
        if last and zero_last:
            W = np.zeros((b, a, k, k))
        layers.append(Conv2d(W, np.zeros(b), out if last else hidden, padding))
    return Network(layers)


@dataclass
class Cache:
    version: int
    net_id: int
    inputs: list
    pre: list
    shapes: list


def _conv_forward(layer: Conv2d, x):
    n, c, h, w = x.shape
    k = layer.W.shape[-1]
    g = layer.gather_matrix(h, w)
    # (n*c, h*w) @ g.T -> (n*c, h*w*k*k)
    cols = (g @ x.reshape(n * c, h * w).T).T.reshape(n, c, h * w, k * k)
    cols = cols.transpose(0, 2, 1, 3).reshape(n, h * w, c * k * k)
    wm = layer.W.reshape(layer.W.shape[0], -1)
    z = cols @ wm.T + layer.b
    return z.transpose(0, 2, 1).reshape(n, -1, h, w), cols


def forward(net: Network, x):
    """Evaluate the network; returns ``(output, cache)`` for :func:`backward`."""
    x = np.asarray(x, dtype=np.float64)
    first = net.layers[0]
    if isinstance(first, Dense):
        if x.ndim != 2 or x.shape[1] != first.shape_in:
            raise InvalidArgument(f"input shape {x.shape} does not match dense input {first.shape_in}")
    elif x.ndim != 4 or x.shape[1] != first.shape_in:
        raise InvalidArgument(f"input shape {x.shape} does not match conv input channels {first.shape_in}")
    inputs, pre, shapes = [], [], []
    a = x
    for l in net.layers:
        shapes.append(a.shape)
        if isinstance(l, Dense):
            inputs.append(a)
            z = a @ l.W + l.b
        else:
            z, cols = _conv_forward(l, a)
            inputs.append(cols)
        pre.append(z)
        a = _act(l.activation, z)
    return a, Cache(net.version, id(net), inputs, pre, shapes)


def predict(net: Network, x):
    return forward(net, x)[0]


def backward(net: Network, cache: Cache, grad_out):
    """Parameter gradients ``[dW0, db0, dW1, db1, ...]`` and input gradient."""
    if cache.version != net.version or cache.net_id != id(net):
        raise InvalidState("cache does not belong to the current parameters; run forward again")
    g = np.asarray(grad_out, dtype=np.float64)
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        l = net.layers[i]
        gz = g * _act_grad(l.activation, cache.pre[i])
        if isinstance(l, Dense):
            a = cache.inputs[i]
            grads[2 * i] = a.T @ gz
            grads[2 * i + 1] = gz.sum(axis=0)
            g = gz @ l.W.T
        else:
            n, co, h, w = gz.shape
            ci, k = l.W.shape[1], l.W.shape[-1]
            gm = gz.reshape(n, co, h * w).transpose(0, 2, 1)  # (n, hw, co)
            cols = cache.inputs[i]
            grads[2 * i] = np.einsum("npo,npq->oq", gm, cols).reshape(l.W.shape)
            grads[2 * i + 1] = gm.sum(axis=(0, 1))
            gcols = gm @ l.W.reshape(co, -1)  # (n, hw, ci*k*k)
            gcols = gcols.reshape(n, h * w, ci, k * k).transpose(0, 2, 1, 3).reshape(n * ci, h * w * k * k)
            gx = (l.gather_matrix(h, w).T @ gcols.T).T
            g = gx.reshape(n, ci, h, w)
    return grads, g


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, net: Network):
        return cls([np.zeros_like(p) for p in net.params()], [np.zeros_like(p) for p in net.params()])


def adam_step(net: Network, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> bool:
    """In-place Adam update with bias correction. Returns False (and skips the
    step) when any gradient is non-finite."""
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return False
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(net.params(), grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    net.touch()
    return True


# --------------------------------------------------------------------------- checkpoints
#
# Little-endian: magic "LFGN" | u16 version | u16 n_layers
# per layer: u8 kind (1 dense, 2 conv) | u8 activation index | u8 padding (0 zero, 1 sphere) | u8 pad
#            dense: u32 in | u32 out ; conv: u32 cout | u32 cin | u32 k
#            f64 weights (row-major) | f64 bias
# trailer: u32 length of a UTF-8 JSON metadata blob, then the blob

NN_MAGIC = b"LFGN"
NN_VERSION = 1


def to_bytes(net: Network, meta: str = "{}") -> bytes:
    out = [NN_MAGIC, struct.pack("<HH", NN_VERSION, len(net.layers))]
    for l in net.layers:
        act = ACTIVATIONS.index(l.activation)
        if isinstance(l, Dense):
            out.append(struct.pack("<BBBBII", 1, act, 0, 0, *l.W.shape))
        else:
            pad = 1 if l.padding == "sphere" else 0
            out.append(struct.pack("<BBBBIII", 2, act, pad, 0, l.W.shape[0], l.W.shape[1], l.W.shape[2]))
        out.append(l.W.astype("<f8").tobytes())
        out.append(l.b.astype("<f8").tobytes())
    blob = meta.encode()
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    return b"".join(out)


def from_bytes(buf: bytes):
    """Returns ``(network, metadata_json_string)``."""
    if buf[:4] != NN_MAGIC:
        raise InvalidArgument("not an LFGN checkpoint")
    version, nl = struct.unpack_from("<HH", buf, 4)
    if version != NN_VERSION:
        raise InvalidArgument(f"unsupported checkpoint version {version}")
    pos = 8
    layers = []
    for _ in range(nl):
        kind, act, pad, _ = struct.unpack_from("<BBBB", buf, pos)
        pos += 4
        if kind == 1:
            a, b = struct.unpack_from("<II", buf, pos)
            pos += 8
            shape = (a, b)
            nb = b
        else:
            co, ci, k = struct.unpack_from("<III", buf, pos)
            pos += 12
            shape = (co, ci, k, k)
            nb = co
        nw = int(np.prod(shape))
        W = np.frombuffer(buf, "<f8", nw, pos).reshape(shape).copy()
        pos += nw * 8
        bias = np.frombuffer(buf, "<f8", nb, pos).copy()
        pos += nb * 8
        if kind == 1:
            layers.append(Dense(W, bias, ACTIVATIONS[act]))
        else:
            layers.append(Conv2d(W, bias, ACTIVATIONS[act], "sphere" if pad else "zero"))
    (ml,) = struct.unpack_from("<I", buf, pos)
    meta = buf[pos + 4:pos + 4 + ml].decode()
    return Network(layers), meta


def save(net: Network, path, meta: str = "{}"):
    with open(path, "wb") as f:
        f.write(to_bytes(net, meta))


def load(path):
    with open(path, "rb") as f:
        return from_bytes(f.read())
