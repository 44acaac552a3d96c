"""Architecture descriptors, flat parameter vectors and the network pass."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..binio import Reader, Writer, sha256_bytes
from ..errors import ShapeError, TrainingDivergenceError
from .layers import build_layer, log_softmax, softmax


@dataclass(frozen=True)
class ArchDescriptor:
    layers: tuple
    input_length: int = 640
    in_channels: int = 1

    def to_json(self) -> dict:
        return {"input_length": self.input_length, "in_channels": self.in_channels, "layers": [dict(l) for l in self.layers]}

    @classmethod
    def from_json(cls, d) -> "ArchDescriptor":
        if isinstance(d, str):
            d = json.loads(d)
        return cls(tuple(dict(l) for l in d["layers"]), d["input_length"], d.get("in_channels", 1))

    @property
    def is_classifier(self) -> bool:
        return bool(self.layers) and self.layers[-1]["type"] == "softmax"


def desk_arch(n_classes=16, input_length=640, kernel=3, pool=4) -> ArchDescriptor:
    conv = lambda c: {"type": "conv1d", "kernel": kernel, "channels": c, "stride": 1}  # noqa: E731
    relu = {"type": "relu"}
    mp = {"type": "maxpool1d", "kernel": pool, "stride": pool}
    layers = [
        conv(16), relu, conv(16), relu, mp,
        conv(32), relu, conv(32), relu, mp,
        {"type": "global_maxpool"},
        {"type": "dense", "features": 64}, relu,
        {"type": "dense", "features": n_classes},
        {"type": "softmax"},
    ]
    return ArchDescriptor(tuple(layers), input_length)


def table1_arch(n_classes=16, input_length=640) -> ArchDescriptor:
    conv = lambda c: {"type": "conv1d", "kernel": 3, "channels": c, "stride": 1}  # noqa: E731
    relu = {"type": "relu"}
    mp = {"type": "maxpool1d", "kernel": 3, "stride": 1}
    bn = lambda f: {"type": "batchnorm", "features": f}  # noqa: E731
    layers = [
        conv(32), relu, conv(32), relu, mp, bn(32),
        conv(64), relu, conv(64), relu, mp, bn(64),
        conv(128), relu, conv(128), relu,
        {"type": "global_maxpool"}, bn(128),
        {"type": "flatten"},
        {"type": "dense", "features": 256}, relu,
        {"type": "dense", "features": 128}, relu, bn(128),
        {"type": "dense", "features": n_classes},
        {"type": "softmax"},
    ]
    return ArchDescriptor(tuple(layers), input_length)


PRESETS = {"desk": desk_arch, "table1": table1_arch}


@dataclass
class Slot:
    layer: int
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class Network:
    """Compiled view of an ArchDescriptor: layer objects, shapes, layouts."""

    def __init__(self, arch: ArchDescriptor):
        self.arch = arch
        self.layers = [build_layer(d) for d in arch.layers]
        if any(l.kind == "softmax" for l in self.layers[:-1]):
            raise ShapeError("softmax may only appear as the final layer")
        self.shapes = [(arch.input_length, arch.in_channels)]
        self.param_slots: list[Slot] = []
        self.buffer_slots: list[Slot] = []
        p_off = b_off = 0
        for i, layer in enumerate(self.layers):
            shape = self.shapes[-1]
            for name, s in layer.param_shapes(shape).items():
                slot = Slot(i, name, tuple(s), p_off)
                self.param_slots.append(slot)
                p_off += slot.size
            for name, s in layer.buffer_shapes(shape).items():
                slot = Slot(i, name, tuple(s), b_off)
                self.buffer_slots.append(slot)
                b_off += slot.size
            self.shapes.append(layer.out_shape(shape))
        self.n_params, self.n_buffers = p_off, b_off
        # prefix of position-local sequence layers, used by the occlusion path
        self.n_local = 0
        for layer, shape in zip(self.layers, self.shapes):
            if not layer.local or len(shape) != 2:
                break
            self.n_local += 1
        J, R = 1, 1
        for layer in self.layers[: self.n_local]:
            k, s = layer.span()
            R += (k - 1) * J
            J *= s
        self.jump, self.field = J, R

    def unflatten(self, vec, slots):
        out = [dict() for _ in self.layers]
        for s in slots:
            out[s.layer][s.name] = vec[s.offset : s.offset + s.size].reshape(s.shape)
        return out

    def default_buffers(self, dtype=np.float64):
        buf = np.zeros(self.n_buffers, dtype)
        for s in self.buffer_slots:
            if s.name == "running_var":
                buf[s.offset : s.offset + s.size] = 1.0
        return buf


_NETS: dict = {}


def network(arch: ArchDescriptor) -> Network:
    key = json.dumps(arch.to_json(), sort_keys=True)
    net = _NETS.get(key)
    if net is None:
        net = _NETS[key] = Network(arch)
    return net


@dataclass(frozen=True, eq=False)
class ModelParams:
    theta: np.ndarray
    arch: ArchDescriptor
    buffers: np.ndarray = field(default=None)

    def __post_init__(self):
        net = network(self.arch)
        if self.theta.ndim != 1 or len(self.theta) != net.n_params:
            raise ShapeError(f"theta has {self.theta.shape}, architecture needs {net.n_params}")
        if self.buffers is None:
            object.__setattr__(self, "buffers", net.default_buffers(self.theta.dtype))
        if len(self.buffers) != net.n_buffers:
            raise ShapeError("buffer vector does not match the architecture")

    @property
    def net(self) -> Network:
        return network(self.arch)

    @property
    def dtype(self):
        return self.theta.dtype

    def with_theta(self, theta) -> "ModelParams":
        return ModelParams(np.asarray(theta, dtype=self.theta.dtype), self.arch, self.buffers)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.theta.astype(dtype), self.arch, self.buffers.astype(dtype))

    @property
    def param_layout(self) -> list:
        return [(s.layer, s.name, s.offset, s.shape) for s in self.net.param_slots]

    @cached_property
    def _views(self):
        net = self.net
        return net.unflatten(self.theta, net.param_slots), net.unflatten(self.buffers, net.buffer_slots)


def init_params(arch: ArchDescriptor, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-normal weights, zero biases, unit batchnorm scale."""
    net = network(arch)
    rng = np.random.default_rng(seed)
    theta = np.zeros(net.n_params, np.float64)
    for s in net.param_slots:
        sl = slice(s.offset, s.offset + s.size)
        if s.name == "W":
            fan_in = int(np.prod(s.shape[:-1]))
            theta[sl] = rng.normal(0.0, np.sqrt(2.0 / fan_in), s.size)
        elif s.name == "gamma":
            theta[sl] = 1.0
    return ModelParams(theta.astype(dtype), arch, net.default_buffers(dtype))


def _as_batch(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=params.dtype)
    arch = params.arch
    if x.ndim == 1:
        x = x[None]
    if x.ndim == 2:
        x = x[:, :, None] if arch.in_channels == 1 else x[None]
    if x.shape[1:] != (arch.input_length, arch.in_channels):
        raise ShapeError(f"input shape {x.shape[1:]} != ({arch.input_length}, {arch.in_channels})")
    return x


def run_layers(params: ModelParams, h, lo, hi, *, train=False, buffers=None, caches=None):
    net = params.net
    pviews, bviews = params._views
    if buffers is not None:
        bviews = net.unflatten(buffers, net.buffer_slots)
    for i in range(lo, hi):
        layer = net.layers[i]
        if layer.kind == "softmax":
            break
        h, cache = layer.forward(pviews[i], h, train=train, buffers=bviews[i], need_cache=caches is not None)
        if caches is not None:
            caches.append(cache)
    return h


def logits(params: ModelParams, x, *, train=False, buffers=None, caches=None) -> np.ndarray:
    h = _as_batch(params, x)
    return run_layers(params, h, 0, len(params.net.layers), train=train, buffers=buffers, caches=caches)


def forward(params: ModelParams, x, mode: str = "eval") -> np.ndarray:
    """Class probabilities (or raw outputs for non-classifier architectures).

    A single input vector gives a 1-D result; a batch gives ``(B, K)``.
    In ``train`` mode batchnorm uses batch statistics and buffers are left
    untouched.
    """
    single = np.asarray(x).ndim == 1
    z = logits(params, x, train=(mode == "train"))
    out = softmax(z) if params.arch.is_classifier else z
    return out[0] if single else out


def backprop(params: ModelParams, caches, gz, *, per_sample=False):
    """Pull ``gz`` (gradient w.r.t. final outputs) back to a flat gradient."""
    net = params.net
    pviews, _ = params._views
    n_layers = len(caches)
    B = gz.shape[0]
    grad = np.zeros((B, net.n_params) if per_sample else net.n_params, dtype=gz.dtype)
    gviews = [dict() for _ in net.layers]
    g = gz
    for i in reversed(range(n_layers)):
        g, gp = net.layers[i].backward(pviews[i], caches[i], g, per_sample=per_sample)
        gviews[i] = gp
    for s in net.param_slots:
        gv = gviews[s.layer].get(s.name)
        if gv is None:
            continue
        if per_sample:
            grad[:, s.offset : s.offset + s.size] = gv.reshape(B, -1)
        else:
            grad[s.offset : s.offset + s.size] = gv.ravel()
    return grad


def value_and_grad(params: ModelParams, X, y, l2_coeff=0.0, *, train=True, buffers=None, sigma=1.0):
    """Summed negative log-likelihood plus ``l2/2 * |theta|^2`` and its gradient.

    For classifiers the likelihood is categorical; otherwise Gaussian with
    standard deviation ``sigma``.
    """
    caches: list = []
    z = logits(params, X, train=train, buffers=buffers, caches=caches)
    if params.arch.is_classifier:
        y = np.asarray(y, dtype=np.int64)
        lsm = log_softmax(z)
        nll = -lsm[np.arange(len(y)), y].sum()
        gz = np.exp(lsm)
        gz[np.arange(len(y)), y] -= 1.0
    else:
        r = z - np.asarray(y, dtype=z.dtype).reshape(z.shape)
        nll = 0.5 * float((r**2).sum()) / sigma**2
        gz = r / sigma**2
    theta = params.theta
    loss = float(nll) + 0.5 * l2_coeff * float(theta @ theta)
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss {loss}")
    grad = backprop(params, caches, gz.astype(theta.dtype)) + l2_coeff * theta
    return loss, grad


def loss_and_grad(params: ModelParams, batch, l2_coeff=0.0, mode="train"):
    X, y = batch
    if len(X) == 0:
        raise ValueError("empty batch")
    return value_and_grad(params, X, y, l2_coeff, train=(mode == "train"))


def predict_class(params: ModelParams, x) -> np.ndarray | int:
    p = forward(params, x)
    # argmax returns the first maximum, i.e. the lowest class id on ties
    return int(np.argmax(p)) if p.ndim == 1 else np.argmax(p, axis=-1)


def predictive_entropy(probs) -> np.ndarray | float:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    h = terms.sum(-1)
    return float(h) if h.ndim == 0 else h


def predict_batched(params: ModelParams, X, batch_size=512) -> np.ndarray:
    out = [forward(params, X[i : i + batch_size]) for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.net.shapes[-1][0]))


# ----------------------------------------------------------- occlusion path


def occluded_outputs(params: ModelParams, x, starts, width, fill) -> np.ndarray:
    """Outputs for ``x`` and for each occluded copy of it.

    Row 0 is the unoccluded input; row ``t + 1`` has ``x[s:s+width]``
    replaced by ``fill[s:s+width]`` for ``s = starts[t]``. Position-local
    leading layers are recomputed only over the positions a window can
    reach, then spliced into the unoccluded feature map.
    """
    net = params.net
    x = np.asarray(x, dtype=params.dtype)
    fill = np.asarray(fill, dtype=params.dtype)
    starts = np.asarray(starts, dtype=np.int64)
    n_loc = net.n_local
    N = x.shape[0]
    if n_loc == 0 or len(starts) == 0:
        X = np.repeat(x[None], len(starts) + 1, axis=0)
        for t, s in enumerate(starts):
            X[t + 1, s : s + width] = fill[s : s + width]
        return forward(params, X)

    J, R = net.jump, net.field
    Lf = net.shapes[n_loc][0]
    h0 = run_layers(params, _as_batch(params, x), 0, n_loc)  # (1, Lf, C)
    # feature positions p see input [p*J, p*J + R - 1]
    first = -((R - 1 - starts) // J)  # ceil((s - R + 1) / J)
    first = np.maximum(first, 0)
    last = np.minimum((starts + width - 1) // J, Lf - 1)
    P = int((last - first).max()) + 1
    p0 = np.clip(first, 0, Lf - P)
    span = (P - 1) * J + R
    idx = p0[:, None] * J + np.arange(span)[None, :]
    crops = x[idx]
    pos = np.arange(span)[None, :] + (p0 * J)[:, None]
    occ = (pos >= starts[:, None]) & (pos < starts[:, None] + width)
    crops = np.where(occ, fill[np.minimum(pos, N - 1)], crops)
    hc = run_layers(params, crops[:, :, None], 0, n_loc)  # (T, P, C)
    H = np.repeat(h0, len(starts) + 1, axis=0)
    rows = np.arange(len(starts))[:, None] + 1
    H[rows, p0[:, None] + np.arange(P)[None, :]] = hc
    z = run_layers(params, H, n_loc, len(net.layers))
    return softmax(z) if params.arch.is_classifier else z


# ----------------------------------------------------------- checkpoint file

CKPT_MAGIC = b"PQCK"
CKPT_VERSION = 1


def checkpoint_bytes(params: ModelParams, log=None) -> bytes:
    w = Writer(CKPT_MAGIC, CKPT_VERSION)
    w.json(params.arch.to_json())
    w.pack("<I", len(params.theta))
    w.array(params.theta, "f4")
    w.pack("<I", len(params.buffers))
    w.array(params.buffers, "f4")
    w.json(log if log is not None else {})
    return w.getvalue()


def save_checkpoint(params: ModelParams, path, log=None) -> str:
    data = checkpoint_bytes(params, log)
    with open(path, "wb") as fh:
        fh.write(data)
    return sha256_bytes(data)


def load_checkpoint(path, dtype=np.float32):
    """Returns ``(params, log, sha256)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = Reader(data, CKPT_MAGIC, (CKPT_VERSION,))
    arch = ArchDescriptor.from_json(r.json())
    (n,) = r.unpack("<I")
    theta = r.array("f4", n).astype(dtype)
    (nb,) = r.unpack("<I")
    buffers = r.array("f4", nb).astype(dtype)
    log = r.json()
    return ModelParams(theta, arch, buffers), log, sha256_bytes(data)
