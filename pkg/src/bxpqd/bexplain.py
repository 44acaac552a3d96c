"""Explanation distributions from posterior draws, and their summaries.

A draw from the weight posterior is pushed through the occlusion operator
to give one relevance row; S rows form an ensemble. Statistics of the
ensemble (mean, 1/S variance, per-index percentiles) estimate the
corresponding statistics of the explanation distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .binio import Reader, Writer, sha256_bytes
from .errors import ConfigurationError
from .kmeans import kmeans
from .laplace import LaplacePosterior, sample_params
from .nn.model import forward
from .occlusion import OcclusionConfig, relevance_map, resolve_target

DEFAULT_ALPHAS = (5, 25, 50, 75, 95)


@dataclass
class ExplanationEnsemble:
    samples: np.ndarray  # (S, N)
    seed: int
    cfg: OcclusionConfig
    target_class: int
    posterior_ref: str = ""

    @property
    def S(self) -> int:
        return self.samples.shape[0]


@dataclass
class BExplanation:
    mean: np.ndarray
    variance: np.ndarray | None
    percentiles: dict

    def to_json(self) -> str:
        return json.dumps({
            "mean": self.mean.tolist(),
            "variance": None if self.variance is None else self.variance.tolist(),
            "percentiles": {str(a): v.tolist() for a, v in self.percentiles.items()},
        })


@dataclass
class ClusterResult:
    k: int
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    projection2d: np.ndarray
    history: list

    def to_json(self) -> str:
        return json.dumps({
            "k": self.k, "assignment": self.assignment.tolist(), "centroids": self.centroids.tolist(),
            "inertia": self.inertia, "inertia_history": self.history, "projection2d": self.projection2d.tolist(),
        })


def posterior_ref(post: LaplacePosterior) -> str:
    return sha256_bytes(post.variance.tobytes() + np.float64(post.prior_precision).tobytes())[:16]


def sample_explanations(
    post: LaplacePosterior, x, S: int = 100, cfg: OcclusionConfig = OcclusionConfig(), seed: int = 0,
    *, target_class: int | None = None, baseline=None, label=None, start: int = 0,
) -> ExplanationEnsemble:
    """Row ``s`` is the relevance map of posterior draw ``start + s``.

    The target class is resolved once (under the MAP parameters for the
    default policy) and held fixed across rows, except for the
    ``per_sample_prediction`` policy.
    """
    if S < 1:
        raise ConfigurationError("S must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    fixed = target_class
    if fixed is None and cfg.target_policy != "per_sample_prediction":
        fixed = resolve_target(post.model, x, cfg, label=label, map_params=post.model)
    rows = ensemble_rows(sample_params(post, S, seed, start), x, cfg, fixed, baseline, label)
    tc = fixed if fixed is not None else int(np.argmax(forward(post.model, x)))
    return ExplanationEnsemble(rows, seed, cfg, int(tc), posterior_ref(post))


def ensemble_rows(draws, x, cfg: OcclusionConfig, target_class=None, baseline=None, label=None) -> np.ndarray:
    """Stack the relevance maps of pre-drawn parameter sets."""
    return np.stack([
        relevance_map(d, x, cfg, target_class=target_class, baseline=baseline, label=label).r for d in draws
    ])


def summarize(ens: ExplanationEnsemble | np.ndarray, alphas=DEFAULT_ALPHAS, *, variance=True) -> BExplanation:
    R = ens.samples if isinstance(ens, ExplanationEnsemble) else np.asarray(ens, dtype=np.float64)
    S = R.shape[0]
    if variance and S < 2:
        raise ValueError("variance needs at least two samples")
    for a in alphas:
        if not 0 < a < 100:
            raise ValueError(f"percentile {a} outside (0, 100)")
    # shifting by the first row keeps identical rows bit-exact
    dev = R - R[0]
    mean = R[0] + dev.mean(0)
    var = ((R - mean) ** 2).mean(0) if variance else None
    # linear interpolation between the closest order statistics
    pct = {a: np.percentile(R, a, axis=0, method="linear") for a in alphas}
    return BExplanation(mean, var, pct)


def mc_convergence_probe(
    post: LaplacePosterior, x, cfg: OcclusionConfig, S_list, seed: int = 0, **kw
) -> list[dict]:
    """Distance of the S-sample mean explanation from the largest-S mean.

    Rows are shared across S (prefixes of one stream of draws).
    """
    S_list = list(S_list)
    if S_list != sorted(S_list):
        raise ValueError("S_list must be ascending")
    ens = sample_explanations(post, x, S_list[-1], cfg, seed, **kw)
    ref = ens.samples.mean(0)
    return [{"S": S, "error": float(np.linalg.norm(ens.samples[:S].mean(0) - ref))} for S in S_list]


def standard_error_curve(post: LaplacePosterior, x, cfg: OcclusionConfig, S_list, n_repeats=20, seed=0, **kw):
    """Empirical std-error of the mean explanation for each S.

    ``n_repeats`` independent streams of ``max(S_list)`` draws are made; for
    each S the spread (over streams) of the S-prefix mean is averaged over
    time indices. Returns ``{S: se}``.
    """
    S_max = max(S_list)
    means = {S: [] for S in S_list}
    for rep in range(n_repeats):
        ens = sample_explanations(post, x, S_max, cfg, seed, start=rep * S_max, **kw)
        for S in S_list:
            means[S].append(ens.samples[:S].mean(0))
    return {S: float(np.sqrt(np.stack(m).var(0, ddof=1).mean())) for S, m in means.items()}


def pca_2d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    C = R - R.mean(0)
    if R.shape[0] < 2 or not np.any(C):
        return np.zeros((R.shape[0], 2))
    U, s, Vt = np.linalg.svd(C, full_matrices=False)
    comps = Vt[:2]
    # fix the sign so the largest loading of each component is positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(1)])
    proj = C @ (comps * signs[:, None]).T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def cluster_explanations(ens: ExplanationEnsemble | np.ndarray, k: int = 5, seed: int = 0) -> ClusterResult:
    R = ens.samples if isinstance(ens, ExplanationEnsemble) else np.asarray(ens, dtype=np.float64)
    if k > R.shape[0]:
        raise ConfigurationError(f"k={k} exceeds the number of samples {R.shape[0]}")
    res = kmeans(R, k, seed)
    return ClusterResult(k, res.assignment, res.centroids, res.inertia, pca_2d(R), res.history)


# ------------------------------------------------------------ ensemble file

EX_MAGIC = b"PQEX"
EX_VERSION = 1


def ensemble_bytes(ens: ExplanationEnsemble) -> bytes:
    w = Writer(EX_MAGIC, EX_VERSION)
    S, N = ens.samples.shape
    w.pack("<II", S, N)
    w.array(ens.samples, "f4")
    w.json({"cfg": ens.cfg.to_json(), "seed": ens.seed, "target_class": ens.target_class,
            "posterior_ref": ens.posterior_ref})
    return w.getvalue()


def save_ensemble(ens: ExplanationEnsemble, path) -> str:
    data = ensemble_bytes(ens)
    with open(path, "wb") as fh:
        fh.write(data)
    return sha256_bytes(data)


def load_ensemble(path) -> ExplanationEnsemble:
    with open(path, "rb") as fh:
        r = Reader(fh.read(), EX_MAGIC, (EX_VERSION,))
    S, N = r.unpack("<II")
    samples = r.array("f4", S * N).astype(np.float64).reshape(S, N)
    meta = r.json()
    return ExplanationEnsemble(samples, meta["seed"], OcclusionConfig(**meta["cfg"]), meta["target_class"],
                               meta["posterior_ref"])
