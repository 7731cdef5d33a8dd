"""Shared building blocks for the learned models.

Parameters live in plain ``{name: float32 ndarray}`` dicts so the
optimizer, the checkpoint format, and the checksum helper all work on
one representation.  Graph-side layers bind those dicts to tape leaves
through :class:`Leaves`, which also routes gradients back by name.
"""

import zlib

import numpy as np

from . import tensor as T

DTYPE = np.float32


# ---------------------------------------------------------------------------
# initialization


def he_normal(rng, shape, fan_in):
    """Kaiming init for layers feeding a ReLU."""
    std = np.sqrt(2.0 / fan_in)
    return (std * rng.standard_normal(shape)).astype(DTYPE)


def glorot_normal(rng, shape, fan_in, fan_out):
    """Balanced init for linear output heads."""
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return (std * rng.standard_normal(shape)).astype(DTYPE)


def conv_params(params, rng, name, kh, kw, cin, cout):
    params[name + ".w"] = he_normal(rng, (kh, kw, cin, cout), kh * kw * cin)
    params[name + ".b"] = np.zeros(cout, DTYPE)


def fc_params(params, rng, name, n_in, n_out, head=False):
    if head:
        params[name + ".w"] = glorot_normal(rng, (n_in, n_out), n_in, n_out)
    else:
        params[name + ".w"] = he_normal(rng, (n_in, n_out), n_in)
    params[name + ".b"] = np.zeros(n_out, DTYPE)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params, grads):
        """Update ``params`` in place from ``grads`` (missing keys skip)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1 ** self.t
        correct2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if g is None:
                continue
            g = np.asarray(g, np.float64)
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self._m[name] = m
                self._v[name] = np.zeros_like(g)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (self.lr * (m / correct1)
                      / (np.sqrt(v / correct2) + self.eps))
            params[name] = (params[name].astype(np.float64)
                            - update).astype(DTYPE)


# ---------------------------------------------------------------------------
# parameter dict utilities


def clone_params(params):
    return {k: v.copy() for k, v in params.items()}


def params_checksum(params):
    """Order-independent CRC over names and exact float bytes."""
    crc = 0
    for name in sorted(params):
        crc = zlib.crc32(name.encode(), crc)
        arr = np.ascontiguousarray(params[name], dtype=DTYPE)
        crc = zlib.crc32(arr.tobytes(), crc)
    return crc


def save_params(path, params):
    T.write_checkpoint(path, params)


def load_params(path):
    return T.read_checkpoint(path)


# ---------------------------------------------------------------------------
# graph-side layers


class Leaves:
    """Binds a parameter dict to graph leaves, one per first use."""

    def __init__(self, graph, params, trainable=True):
        self.graph = graph
        self.params = params
        self.trainable = bool(trainable)
        self.nodes = {}

    def __getitem__(self, name):
        node = self.nodes.get(name)
        if node is None:
            node = self.graph.leaf(
                T.Tensor(self.params[name], requires_grad=self.trainable))
            self.nodes[name] = node
        return node

    def grads(self, grad_by_idx):
        """Map a backward() result back to parameter names."""
        out = {}
        for name, node in self.nodes.items():
            g = grad_by_idx.get(node.idx)
            if g is not None:
                out[name] = g
        return out


def conv_block(g, x, leaves, name, stride=1, padding=0, act="relu"):
    """conv2d + bias (+ activation) on NHWC input."""
    y = g.conv2d(x, leaves[name + ".w"], stride=stride, padding=padding)
    y = g.add(y, g.bcast(leaves[name + ".b"], y.shape))
    if act == "relu":
        y = g.relu(y)
    elif act == "sigmoid":
        y = g.sigmoid(y)
    elif act is not None:
        raise ValueError("unknown activation %r" % (act,))
    return y


def fc_block(g, x, leaves, name, act="relu"):
    """matmul + bias (+ activation) on (batch, features) input."""
    y = g.matmul(x, leaves[name + ".w"])
    y = g.add(y, g.bcast(leaves[name + ".b"], y.shape))
    if act == "relu":
        y = g.relu(y)
    elif act == "sigmoid":
        y = g.sigmoid(y)
    elif act is not None:
        raise ValueError("unknown activation %r" % (act,))
    return y


def avg_pool(g, x, k):
    """Non-overlapping k-by-k mean pooling of a single-channel image."""
    if x.shape[3] != 1:
        raise ValueError("avg_pool expects one channel, got %r"
                         % (x.shape,))
    if k == 1:
        return x
    filt = g.constant(np.full((k, k, 1, 1), 1.0 / (k * k), DTYPE))
    return g.conv2d(x, filt, stride=k, padding=0)
