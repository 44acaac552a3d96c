"""Independent reference implementations used only by the tests."""

import numpy as np

from bxpqd.nn.model import ArchDescriptor, forward, logits, value_and_grad


def naive_relevance(params, x, window, stride, target, baseline):
    """Double loop over windows then indices; no shared code with the fast path."""
    n = len(x)
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] + window < n:
        starts.append(n - window)
    p0 = forward(params, x)[target]
    scores = []
    for s in starts:
        occ = np.array(x, dtype=np.float64)
        for i in range(s, s + window):
            occ[i] = baseline[i]
        scores.append(p0 - forward(params, occ)[target])
    r = np.zeros(n)
    for i in range(n):
        covering = [v for s, v in zip(starts, scores) if s <= i < s + window]
        r[i] = sum(covering) / len(covering)
    return r


def random_arch(rng, n_classes=4, batchnorm=True, length=None) -> ArchDescriptor:
    """Small conv/pool/bn/dense stack with random hyperparameters."""
    L = int(rng.integers(24, 48)) if length is None else int(length)
    c1 = int(rng.integers(2, 5))
    layers = [{"type": "conv1d", "kernel": int(rng.integers(2, 4)), "channels": c1, "stride": int(rng.integers(1, 3))},
              {"type": "relu"}]
    if rng.random() < 0.6:
        layers.append({"type": "maxpool1d", "kernel": int(rng.integers(2, 4)), "stride": int(rng.integers(1, 3))})
    if batchnorm and rng.random() < 0.6:
        layers.append({"type": "batchnorm", "features": c1})
    layers += [{"type": "conv1d", "kernel": 2, "channels": int(rng.integers(2, 5))}, {"type": "relu"}]
    layers.append({"type": "global_maxpool"} if rng.random() < 0.5 else {"type": "flatten"})
    layers.append({"type": "dense", "features": 6})
    if batchnorm and rng.random() < 0.5:
        layers.append({"type": "batchnorm", "features": 6})
    layers += [{"type": "relu"}, {"type": "dense", "features": n_classes}, {"type": "softmax"}]
    return ArchDescriptor(tuple(layers), L)


PIECEWISE = ("relu", "maxpool1d", "global_maxpool")


def activation_signature(params, X, train):
    """Branch choices of every piecewise layer: ReLU masks and pool argmaxes."""
    caches = []
    logits(params, X, train=train, caches=caches)
    sig = []
    for layer, cache in zip(params.net.layers, caches):
        if layer.kind == "relu":
            sig.append(np.asarray(cache).copy())
        elif layer.kind in ("maxpool1d", "global_maxpool"):
            sig.append(np.asarray(cache[1]).copy())
    return sig


def same_signature(a, b):
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def fd_check(params, X, y, l2, train, h=1e-3, coords=None):
    """Central differences against the reverse-mode gradient.

    A coordinate whose +-h stencil changes any branch choice (ReLU sign,
    pool winner) straddles a kink, where a central difference is not an
    estimate of the derivative; such coordinates get NaN.
    Returns ``(rel_errors, n_kink)`` with one error per requested coordinate.
    """
    _, g = value_and_grad(params, X, y, l2, train=train)
    theta = params.theta
    coords = range(len(theta)) if coords is None else coords
    errs, kinks = [], 0
    for i in coords:
        e = np.zeros_like(theta)
        e[i] = h
        plus, minus = params.with_theta(theta + e), params.with_theta(theta - e)
        if not same_signature(activation_signature(plus, X, train), activation_signature(minus, X, train)):
            kinks += 1
            errs.append(np.nan)
            continue
        lp, _ = value_and_grad(plus, X, y, l2, train=train)
        lm, _ = value_and_grad(minus, X, y, l2, train=train)
        fd = (lp - lm) / (2 * h)
        errs.append(abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6))
    return np.asarray(errs), kinks
