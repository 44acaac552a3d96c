"""Occlusion-sensitivity relevance for a single parameter realization."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError
from .nn.model import ModelParams, forward, occluded_outputs

BASELINE_KINDS = ("zeros", "nominal_sine", "constant")
TARGET_POLICIES = ("map_prediction", "true_label", "per_sample_prediction")


@dataclass(frozen=True)
class OcclusionConfig:
    window: int = 64
    stride: int = 8
    baseline_kind: str = "zeros"
    baseline_value: float = 0.0  # used by the constant baseline
    target_policy: str = "map_prediction"

    def validate(self, n: int) -> None:
        if not 1 <= self.window <= n:
            raise ConfigurationError(f"window {self.window} outside [1, {n}]")
        if not 1 <= self.stride <= self.window:
            raise ConfigurationError("stride must lie in [1, window] so every index is covered")
        if self.baseline_kind not in BASELINE_KINDS:
            raise ConfigurationError(f"unknown baseline kind {self.baseline_kind!r}")
        if self.target_policy not in TARGET_POLICIES:
            raise ConfigurationError(f"unknown target policy {self.target_policy!r}")

    def to_json(self) -> dict:
        return {"window": self.window, "stride": self.stride, "baseline_kind": self.baseline_kind,
                "baseline_value": self.baseline_value, "target_policy": self.target_policy}


@dataclass
class RelevanceVector:
    r: np.ndarray
    target_class: int
    model_tag: str = "map"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "value"])
        for i, v in enumerate(self.r):
            w.writerow([i, repr(float(v))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"target_class": self.target_class, "model_tag": self.model_tag,
                           "relevance": [float(v) for v in self.r]})


def window_starts(n: int, window: int, stride: int) -> np.ndarray:
    """Regular starts ``stride * t``; a final window ending at ``n - 1`` is
    appended when the regular grid stops short of the end."""
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] + window < n:
        starts.append(n - window)
    return np.asarray(starts, dtype=np.int64)


def coverage_counts(n: int, starts, window: int) -> np.ndarray:
    cnt = np.zeros(n + 1, dtype=np.int64)
    np.add.at(cnt, starts, 1)
    np.add.at(cnt, np.asarray(starts) + window, -1)
    return np.cumsum(cnt)[:n]


def baseline_values(cfg: OcclusionConfig, x, nominal=None) -> np.ndarray:
    n = len(x)
    if cfg.baseline_kind == "zeros":
        return np.zeros(n)
    if cfg.baseline_kind == "constant":
        return np.full(n, float(cfg.baseline_value))
    if nominal is None:
        raise ConfigurationError("nominal_sine baseline needs the record's nominal waveform")
    nominal = np.asarray(nominal, dtype=np.float64)
    if nominal.shape != (n,):
        raise ShapeError("nominal baseline length must match the signal")
    return nominal


def resolve_target(params: ModelParams, x, cfg: OcclusionConfig, *, label=None, map_params=None) -> int:
    if cfg.target_policy == "true_label":
        if label is None:
            raise ConfigurationError("true_label policy needs the record label")
        return int(label)
    ref = map_params if (cfg.target_policy == "map_prediction" and map_params is not None) else params
    return int(np.argmax(forward(ref, x)))


def occlude_once(params: ModelParams, x, t: int, cfg: OcclusionConfig, target_class: int, baseline=None) -> float:
    """Drop in the target-class probability when window ``t`` is occluded."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    cfg.validate(n)
    starts = window_starts(n, cfg.window, cfg.stride)
    if not 0 <= t < len(starts):
        raise IndexError(f"window index {t} out of range [0, {len(starts)})")
    b = baseline_values(cfg, x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    s = starts[t]
    occ = x.copy()
    occ[s : s + cfg.window] = b[s : s + cfg.window]
    p = forward(params, np.stack([x, occ]))
    return float(p[0, target_class] - p[1, target_class])


def window_scores(params: ModelParams, x, cfg: OcclusionConfig, target_class: int, baseline=None):
    """``(starts, R)`` with ``R[t]`` the relevance of window ``t``."""
    x = np.asarray(x, dtype=np.float64)
    cfg.validate(len(x))
    starts = window_starts(len(x), cfg.window, cfg.stride)
    b = baseline_values(cfg, x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    p = occluded_outputs(params, x, starts, cfg.window, b)
    pc = p[:, target_class].astype(np.float64)
    return starts, pc[0] - pc[1:]


def spread_windows(n: int, starts, window: int, scores) -> np.ndarray:
    """Per-index mean of the scores of all windows that cover the index."""
    total = np.zeros(n)
    for s, v in zip(starts, scores):
        total[s : s + window] += v
    return total / coverage_counts(n, starts, window)


def relevance_map(
    params: ModelParams, x, cfg: OcclusionConfig = OcclusionConfig(), *, target_class: int | None = None,
    baseline=None, label=None, map_params=None, model_tag="map",
) -> RelevanceVector:
    x = np.asarray(x, dtype=np.float64)
    if target_class is None:
        target_class = resolve_target(params, x, cfg, label=label, map_params=map_params)
    starts, scores = window_scores(params, x, cfg, target_class, baseline)
    return RelevanceVector(spread_windows(len(x), starts, cfg.window, scores), int(target_class), model_tag)
