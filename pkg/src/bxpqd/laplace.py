"""Post-hoc diagonal Laplace approximation around a trained parameter vector."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .binio import Reader, Writer, sha256_bytes
from .errors import ConfigurationError, HashMismatchError, SingularityError, ValidationError
from .nn.layers import softmax
from .nn.model import ModelParams, backprop, logits, predict_batched

log = logging.getLogger(__name__)

CURVATURE_KINDS = ("empirical_fisher", "ggn_diag")
_KIND_ALIASES = {"fisher": "empirical_fisher", "ggn": "ggn_diag"}


@dataclass(frozen=True, eq=False)
class LaplacePosterior:
    model: ModelParams  # MAP parameters, buffers and architecture
    variance: np.ndarray
    prior_precision: float
    curvature_kind: str = "empirical_fisher"
    dataset_fingerprint: str = ""
    curvature: np.ndarray | None = None

    def __post_init__(self):
        if self.variance.shape != self.model.theta.shape:
            raise ValidationError("variance length must match theta_map")
        # zero entries are accepted so that a point-mass posterior can be expressed
        if not np.all(np.isfinite(self.variance)) or np.any(self.variance < 0):
            raise ValidationError("variances must be finite and non-negative")
        if self.curvature_kind not in CURVATURE_KINDS:
            raise ValidationError(f"unknown curvature kind {self.curvature_kind!r}")

    @property
    def theta_map(self) -> np.ndarray:
        return self.model.theta

    def with_prior_precision(self, prior_precision: float) -> "LaplacePosterior":
        if self.curvature is None:
            raise ValueError("posterior was built without its curvature vector")
        return LaplacePosterior(
            self.model, posterior_variance(self.curvature, prior_precision), float(prior_precision),
            self.curvature_kind, self.dataset_fingerprint, self.curvature,
        )


def fingerprint(X, y) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(y).astype(np.float64).tobytes())
    return h.hexdigest()


def diag_curvature(params: ModelParams, X, y, kind="empirical_fisher", *, sigma=1.0, batch_size=128) -> np.ndarray:
    """Summed per-sample diagonal curvature of the negative log-likelihood.

    ``empirical_fisher`` sums squared per-sample gradients. ``ggn_diag``
    uses the factorisation of the output Hessian ``diag(p) - p p^T =
    A A^T`` with ``A = diag(sqrt p) - p sqrt(p)^T`` (identity / sigma for a
    Gaussian likelihood) and sums the squared Jacobian-vector products.
    Batchnorm runs on its stored statistics.
    """
    kind = _KIND_ALIASES.get(kind, kind)
    if kind not in CURVATURE_KINDS:
        raise ConfigurationError(f"unknown curvature kind {kind!r}")
    work = params.astype(np.float64)
    classifier = params.arch.is_classifier
    out = np.zeros(work.net.n_params)
    for i in range(0, len(X), batch_size):
        Xb = np.asarray(X[i : i + batch_size], dtype=np.float64)
        yb = np.asarray(y[i : i + batch_size])
        caches: list = []
        z = logits(work, Xb, caches=caches)
        if kind == "empirical_fisher":
            if classifier:
                gz = softmax(z)
                gz[np.arange(len(yb)), yb.astype(np.int64)] -= 1.0
            else:
                gz = (z - yb.reshape(z.shape)) / sigma**2
            g = backprop(work, caches, gz, per_sample=True)
            out += (g * g).sum(0)
        else:
            K = z.shape[1]
            if classifier:
                p = softmax(z)
                sq = np.sqrt(p)
                # columns of A: A[:, c] = sqrt(p_c) e_c - p sqrt(p_c)
                cols = [np.eye(K)[c][None, :] * sq[:, c : c + 1] - p * sq[:, c : c + 1] for c in range(K)]
            else:
                cols = [np.tile(np.eye(K)[c] / sigma, (len(Xb), 1)) for c in range(K)]
            for gz in cols:
                g = backprop(work, caches, gz, per_sample=True)
                out += (g * g).sum(0)
    return out


def posterior_variance(curvature, prior_precision) -> np.ndarray:
    prec = np.asarray(curvature, dtype=np.float64) + prior_precision
    if np.any(prec <= 0):
        raise SingularityError("zero curvature with zero prior precision; posterior is improper")
    return 1.0 / prec


def fit_laplace(params: ModelParams, train_data, prior_precision: float, kind="empirical_fisher", *, sigma=1.0):
    """Diagonal Gaussian N(theta_map, 1 / (curvature + prior_precision))."""
    if prior_precision < 0:
        raise ConfigurationError("prior precision must be non-negative")
    kind = _KIND_ALIASES.get(kind, kind)
    X, y = train_data
    curv = diag_curvature(params, X, y, kind, sigma=sigma)
    var = posterior_variance(curv, prior_precision)
    return LaplacePosterior(params, var, float(prior_precision), kind, fingerprint(X, y), curv)


def sample_theta(post: LaplacePosterior, s: int, seed: int) -> np.ndarray:
    z = np.random.default_rng([seed, s]).standard_normal(len(post.variance))
    theta = post.theta_map.astype(np.float64) + np.sqrt(post.variance) * z
    return theta.astype(post.theta_map.dtype)


def sample_params(post: LaplacePosterior, n: int, seed: int, start: int = 0) -> list[ModelParams]:
    """``n`` draws; draw ``s`` depends only on ``(seed, s)``."""
    if n < 1:
        raise ValueError("need at least one sample")
    m = post.model
    return [ModelParams(sample_theta(post, s, seed), m.arch, m.buffers) for s in range(start, start + n)]


def ensemble_accuracy(post: LaplacePosterior, X, y, n_samples: int, seed: int):
    """Per-sample accuracies and the accuracy of the averaged predictive."""
    accs = []
    avg = None
    for theta_s in sample_params(post, n_samples, seed):
        p = predict_batched(theta_s, X)
        accs.append(float((p.argmax(1) == y).mean()))
        avg = p if avg is None else avg + p
    bma = float((avg.argmax(1) == y).mean())
    return np.array(accs), bma


# prior precisions tried when tuning; they scale with the sum-convention loss
DEFAULT_GRID = (1e3, 3e3, 1e4, 3e4, 1e5, 1e6)


def tune_prior_precision(post: LaplacePosterior, val_data, grid, *, n_samples=20, seed=0, tolerance=0.0):
    """Grid value with the best mean sampled-model validation accuracy.

    Any value within ``tolerance`` of the best counts as a tie; ties go to
    the smaller precision. Returns ``(precision, table)``.
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("empty grid")
    X, y = val_data
    table = []
    for lam in grid:
        accs, bma = ensemble_accuracy(post.with_prior_precision(lam), X, y, n_samples, seed)
        table.append({"prior_precision": lam, "mean_acc": float(accs.mean()), "std_acc": float(accs.std()), "bma_acc": bma})
        log.info("prior precision %.3g: mean acc %.4f bma %.4f", lam, accs.mean(), bma)
    best = max(r["mean_acc"] for r in table)
    chosen = next(r["prior_precision"] for r in table if r["mean_acc"] >= best - tolerance)
    return chosen, table


# ------------------------------------------------------------ posterior file

LA_MAGIC = b"PQLA"
LA_VERSION = 1


def posterior_bytes(post: LaplacePosterior, ckpt_hash: str) -> bytes:
    w = Writer(LA_MAGIC, LA_VERSION)
    w.pack("<dB", post.prior_precision, CURVATURE_KINDS.index(post.curvature_kind))
    w.pack("<I", len(post.variance))
    w.array(post.variance, "f4")
    raw = bytes.fromhex(ckpt_hash)
    w.pack("<B", len(raw))
    w.buf.write(raw)
    return w.getvalue()


def save_posterior(post: LaplacePosterior, path, ckpt_hash: str) -> str:
    data = posterior_bytes(post, ckpt_hash)
    with open(path, "wb") as fh:
        fh.write(data)
    return sha256_bytes(data)


def load_posterior(path, model: ModelParams, ckpt_hash: str | None = None) -> LaplacePosterior:
    with open(path, "rb") as fh:
        r = Reader(fh.read(), LA_MAGIC, (LA_VERSION,))
    prior, kind = r.unpack("<dB")
    (n,) = r.unpack("<I")
    var = r.array("f4", n).astype(np.float64)
    (hl,) = r.unpack("<B")
    stored = bytes(r.take(hl)).hex()
    if ckpt_hash is not None and stored != ckpt_hash:
        raise HashMismatchError("posterior was fitted on a different checkpoint")
    return LaplacePosterior(model, var, prior, CURVATURE_KINDS[kind])
