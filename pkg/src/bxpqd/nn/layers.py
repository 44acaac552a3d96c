"""Layer kernels with hand-written reverse-mode rules.

Activations are channels-last, ``(batch, length, channels)`` for sequence
layers and ``(batch, features)`` after flattening. Each layer is stateless:
parameters and buffers are passed in, and ``forward`` returns a cache that
``backward`` consumes. ``backward(..., per_sample=True)`` keeps a leading
batch axis on parameter gradients (used for curvature estimates).
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


class Layer:
    kind = ""
    local = True  # output position p depends only on a bounded input range

    def param_shapes(self, in_shape):
        return {}

    def buffer_shapes(self, in_shape):
        return {}

    def out_shape(self, in_shape):
        return in_shape

    # receptive-field bookkeeping for sequence layers: (kernel, stride)
    def span(self):
        return 1, 1

    def forward(self, params, x, *, train=False, buffers=None, need_cache=True):
        raise NotImplementedError

    def backward(self, params, cache, gy, *, per_sample=False):
        raise NotImplementedError


def _strided(x, start, count, step):
    return x[:, start : start + step * (count - 1) + 1 : step]


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, kernel, channels, stride=1):
        self.k, self.c_out, self.s = int(kernel), int(channels), int(stride)

    def span(self):
        return self.k, self.s

    def param_shapes(self, in_shape):
        L, C = in_shape
        return {"W": (self.k, C, self.c_out), "b": (self.c_out,)}

    def out_shape(self, in_shape):
        L, C = in_shape
        if L < self.k:
            raise ShapeError(f"conv1d kernel {self.k} longer than input {L}")
        return ((L - self.k) // self.s + 1, self.c_out)

    def forward(self, params, x, *, train=False, buffers=None, need_cache=True):
        W, b = params["W"], params["b"]
        B, L, C = x.shape
        K, _, O = W.shape
        L2 = (L - K) // self.s + 1
        Y = (x.reshape(B * L, C) @ W.transpose(1, 0, 2).reshape(C, K * O)).reshape(B, L, K, O)
        out = _strided(Y[:, :, 0], 0, L2, self.s) + b
        for k in range(1, K):
            out += _strided(Y[:, :, k], k, L2, self.s)
        return out, (x if need_cache else None)

    def backward(self, params, x, gy, *, per_sample=False):
        W = params["W"]
        B, L, C = x.shape
        K, _, O = W.shape
        L2 = gy.shape[1]
        if per_sample:
            gW = np.stack([np.einsum("blc,blo->bco", _strided(x, k, L2, self.s), gy) for k in range(K)], axis=1)
            gb = gy.sum(1)
        else:
            g2 = gy.reshape(B * L2, O)
            gW = np.stack([_strided(x, k, L2, self.s).reshape(B * L2, C).T @ g2 for k in range(K)])
            gb = gy.sum((0, 1))
        Z = (gy.reshape(B * L2, O) @ W.transpose(2, 0, 1).reshape(O, K * C)).reshape(B, L2, K, C)
        gx = np.zeros_like(x)
        for k in range(K):
            gx[:, k : k + self.s * (L2 - 1) + 1 : self.s] += Z[:, :, k]
        return gx, {"W": gW, "b": gb}


class ReLU(Layer):
    kind = "relu"

    def forward(self, params, x, *, train=False, buffers=None, need_cache=True):
        y = np.maximum(x, 0)
        return y, (x > 0 if need_cache else None)

    def backward(self, params, mask, gy, *, per_sample=False):
        return gy * mask, {}


class MaxPool1d(Layer):
    kind = "maxpool1d"

    def __init__(self, kernel, stride=None):
        self.k = int(kernel)
        self.s = int(stride if stride is not None else kernel)

    def span(self):
        return self.k, self.s

    def out_shape(self, in_shape):
        L, C = in_shape
        if L < self.k:
            raise ShapeError(f"maxpool kernel {self.k} longer than input {L}")
        return ((L - self.k) // self.s + 1, C)

    def forward(self, params, x, *, train=False, buffers=None, need_cache=True):
        L2 = (x.shape[1] - self.k) // self.s + 1
        best = _strided(x, 0, L2, self.s).copy()
        arg = np.zeros(best.shape, dtype=np.int8) if need_cache else None
        for j in range(1, self.k):
            cand = _strided(x, j, L2, self.s)
            if need_cache:
                upd = cand > best  # ties keep the earliest position
                arg[upd] = j
                np.maximum(best, cand, out=best)
            else:
                np.maximum(best, cand, out=best)
        return best, ((x.shape, arg) if need_cache else None)

    def backward(self, params, cache, gy, *, per_sample=False):
        shape, arg = cache
        gx = np.zeros(shape, dtype=gy.dtype)
        L2 = gy.shape[1]
        for j in range(self.k):
            gx[:, j : j + self.s * (L2 - 1) + 1 : self.s] += np.where(arg == j, gy, 0)
        return gx, {}


class GlobalMaxPool(Layer):
    kind = "global_maxpool"
    local = False

    def out_shape(self, in_shape):
        return (in_shape[1],)

    def forward(self, params, x, *, train=False, buffers=None, need_cache=True):
        if not need_cache:
            return x.max(1), None
        idx = x.argmax(1)
        y = np.take_along_axis(x, idx[:, None, :], 1)[:, 0]
        return y, (x.shape, idx)

    def backward(self, params, cache, gy, *, per_sample=False):
        shape, idx = cache
        gx = np.zeros(shape, dtype=gy.dtype)
        np.put_along_axis(gx, idx[:, None, :], gy[:, None, :], 1)
        return gx, {}


class Flatten(Layer):
    kind = "flatten"
    local = False

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x, *, train=False, buffers=None, need_cache=True):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, shape, gy, *, per_sample=False):
        return gy.reshape(shape), {}


class Dense(Layer):
    kind = "dense"
    local = False

    def __init__(self, features, bias=True):
        self.o = int(features)
        self.bias = bool(bias)

    def param_shapes(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError("dense expects a flat input; add flatten or global_maxpool")
        shapes = {"W": (in_shape[0], self.o)}
        if self.bias:
            shapes["b"] = (self.o,)
        return shapes

    def out_shape(self, in_shape):
        return (self.o,)

    def forward(self, params, x, *, train=False, buffers=None, need_cache=True):
        y = x @ params["W"]
        if self.bias:
            y = y + params["b"]
        return y, x

    def backward(self, params, x, gy, *, per_sample=False):
        if per_sample:
            grads = {"W": x[:, :, None] * gy[:, None, :]}
            if self.bias:
                grads["b"] = gy
        else:
            grads = {"W": x.T @ gy}
            if self.bias:
                grads["b"] = gy.sum(0)
        return gy @ params["W"].T, grads


class BatchNorm(Layer):
    """Normalizes the last axis; statistics pool over all other axes."""

    kind = "batchnorm"

    def __init__(self, features, momentum=0.1, eps=1e-5):
        self.f = int(features)
        self.momentum, self.eps = momentum, eps

    def param_shapes(self, in_shape):
        if in_shape[-1] != self.f:
            raise ShapeError(f"batchnorm features {self.f} != input channels {in_shape[-1]}")
        return {"gamma": (self.f,), "beta": (self.f,)}

    def buffer_shapes(self, in_shape):
        return {"running_mean": (self.f,), "running_var": (self.f,)}

    def forward(self, params, x, *, train=False, buffers=None, need_cache=True):
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axes)
            var = x.var(axes)
            if buffers is not None:
                m = int(np.prod([x.shape[a] for a in axes]))
                unbiased = var * m / max(m - 1, 1)
                buffers["running_mean"][...] = (1 - self.momentum) * buffers["running_mean"] + self.momentum * mean
                buffers["running_var"][...] = (1 - self.momentum) * buffers["running_var"] + self.momentum * unbiased
        else:
            mean, var = buffers["running_mean"], buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        y = params["gamma"] * xhat + params["beta"]
        return y, ((xhat, inv, train) if need_cache else None)

    def backward(self, params, cache, gy, *, per_sample=False):
        xhat, inv, train = cache
        axes = tuple(range(gy.ndim - 1))
        if per_sample:
            if train:
                raise ValueError("per-sample gradients are undefined for batch statistics")
            inner = tuple(range(1, gy.ndim - 1))
            grads = {"gamma": (gy * xhat).sum(inner) if inner else gy * xhat,
                     "beta": gy.sum(inner) if inner else gy.copy()}
        else:
            grads = {"gamma": (gy * xhat).sum(axes), "beta": gy.sum(axes)}
        gxhat = gy * params["gamma"]
        if not train:
            return gxhat * inv, grads
        m = int(np.prod([gy.shape[a] for a in axes]))
        gx = inv / m * (m * gxhat - gxhat.sum(axes) - xhat * (gxhat * xhat).sum(axes))
        return gx, grads


class Softmax(Layer):
    """Terminal marker; the model applies softmax to the preceding logits."""

    kind = "softmax"
    local = False


LAYER_TYPES = {
    "conv1d": lambda d: Conv1d(d["kernel"], d["channels"], d.get("stride", 1)),
    "relu": lambda d: ReLU(),
    "maxpool1d": lambda d: MaxPool1d(d["kernel"], d.get("stride")),
    "global_maxpool": lambda d: GlobalMaxPool(),
    "batchnorm": lambda d: BatchNorm(d["features"]),
    "flatten": lambda d: Flatten(),
    "dense": lambda d: Dense(d["features"], d.get("bias", True)),
    "softmax": lambda d: Softmax(),
}


def build_layer(desc: dict) -> Layer:
    try:
        make = LAYER_TYPES[desc["type"]]
    except KeyError:
        raise ShapeError(f"unknown layer type {desc.get('type')!r}") from None
    return make(desc)


def softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))
