"""Localisation scores against ground-truth masks and their aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bexplain import DEFAULT_ALPHAS, ensemble_rows, summarize
from .errors import ShapeError, ValidationError
from .laplace import LaplacePosterior, sample_params
from .nn.model import ModelParams, predict_batched, predictive_entropy
from .occlusion import OcclusionConfig, relevance_map, resolve_target
from .synth import CLASS_NAMES, NORMAL_ID, GroundTruthMask

UNDEFINED = float("nan")

CONVENTIONS = (
    "rma: negative relevance clipped to 0 before mass computation",
    "iou: top-L indices of raw relevance, L = mask size, ties to the lower index",
    "undefined scores (zero mass, L=0, L=N) are excluded and counted",
    "per-class std: population (1/n) over scored records",
    "totals: unweighted mean over disturbance classes, Normal excluded; total std is the mean per-class std",
    "percentiles: per-index linear interpolation between order statistics",
)


def _mask_array(mask) -> np.ndarray:
    m = mask.mask if isinstance(mask, GroundTruthMask) else mask
    return np.asarray(m).astype(bool)


def rma(relevance, mask) -> float:
    """Share of the non-negative relevance mass inside the mask; NaN when the mass is zero."""
    r = np.clip(np.asarray(relevance, dtype=np.float64), 0.0, None)
    m = _mask_array(mask)
    if r.shape != m.shape:
        raise ShapeError("relevance and mask lengths differ")
    total = r.sum()
    if not total > 0:
        return UNDEFINED
    return float(min(r[m].sum() / total, 1.0))


def top_l(relevance, L: int) -> np.ndarray:
    """Indices of the ``L`` largest values; equal values go to the lower index."""
    order = np.argsort(-np.asarray(relevance, dtype=np.float64), kind="stable")
    return order[:L]


def iou(relevance, mask) -> float:
    r = np.asarray(relevance, dtype=np.float64)
    m = _mask_array(mask)
    if r.shape != m.shape:
        raise ShapeError("relevance and mask lengths differ")
    L = int(m.sum())
    if L == 0 or L == len(m):
        return UNDEFINED
    pred = np.zeros(len(m), dtype=bool)
    pred[top_l(r, L)] = True
    return float((pred & m).sum() / (pred | m).sum())


def _stats(values) -> dict:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    n_undef = len(values) - len(v)
    if len(v) == 0:
        return {"mean": UNDEFINED, "std": UNDEFINED, "n": 0, "n_undefined": n_undef}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(len(v)), "n_undefined": n_undef}


def variant_name(alpha) -> str:
    return "map" if alpha is None else f"p{alpha:g}"


@dataclass
class EvalReport:
    variants: list
    per_class: dict  # class_id -> variant -> {"rma": stats, "iou": stats}
    totals: dict  # variant -> {"rma": {"mean", "std"}, "iou": {...}}
    n_records: dict
    config: dict
    accuracy: dict = field(default_factory=dict)
    records: list = field(default_factory=list)  # per-record scores

    def to_csv(self) -> str:
        buf = io.StringIO()
        for line in CONVENTIONS:
            buf.write(f"# {line}\n")
        buf.write(f"# config {json.dumps(self.config, sort_keys=True)}\n")
        for k in sorted(self.accuracy):
            buf.write(f"# {k} {self.accuracy[k]!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "class_name", "variant", "n_records", "rma_mean", "rma_std", "rma_undefined",
                    "iou_mean", "iou_std", "iou_undefined"])
        for cid in sorted(self.per_class):
            for v in self.variants:
                a, b = self.per_class[cid][v]["rma"], self.per_class[cid][v]["iou"]
                w.writerow([cid, CLASS_NAMES[cid], v, self.n_records[cid], repr(a["mean"]), repr(a["std"]),
                            a["n_undefined"], repr(b["mean"]), repr(b["std"]), b["n_undefined"]])
        for v in self.variants:
            a, b = self.totals[v]["rma"], self.totals[v]["iou"]
            w.writerow(["", "Total", v, sum(self.n_records.values()), repr(a["mean"]), repr(a["std"]), "",
                        repr(b["mean"]), repr(b["std"]), ""])
        return buf.getvalue()

    def to_json(self) -> str:
        def clean(o):
            if isinstance(o, float) and math.isnan(o):
                return None
            if isinstance(o, dict):
                return {str(k): clean(v) for k, v in o.items()}
            if isinstance(o, list):
                return [clean(v) for v in o]
            return o

        return json.dumps(clean({
            "conventions": list(CONVENTIONS), "config": self.config, "variants": self.variants,
            "accuracy": self.accuracy, "n_records": self.n_records, "per_class": self.per_class,
            "totals": self.totals,
        }), sort_keys=True, indent=1)

    def score(self, class_id: int, variant: str, metric: str) -> float:
        return self.per_class[class_id][variant][metric]["mean"]

    def total(self, variant: str, metric: str) -> float:
        return self.totals[variant][metric]["mean"]


def aggregate(records: list, variants: list, config: dict | None = None, accuracy: dict | None = None) -> EvalReport:
    """Build a report from per-record rows ``{"class_id", variant: {"rma", "iou"}}``."""
    classes = sorted({r["class_id"] for r in records})
    per_class, n_records = {}, {}
    for cid in classes:
        rows = [r for r in records if r["class_id"] == cid]
        n_records[cid] = len(rows)
        per_class[cid] = {
            v: {m: _stats([r[v][m] for r in rows]) for m in ("rma", "iou")} for v in variants
        }
    totals = {}
    for v in variants:
        totals[v] = {}
        for m in ("rma", "iou"):
            means = [per_class[c][v][m]["mean"] for c in classes if c != NORMAL_ID]
            stds = [per_class[c][v][m]["std"] for c in classes if c != NORMAL_ID]
            means = [x for x in means if not math.isnan(x)]
            stds = [x for x in stds if not math.isnan(x)]
            totals[v][m] = {
                "mean": float(np.mean(means)) if means else UNDEFINED,
                "std": float(np.mean(stds)) if stds else UNDEFINED,
                "n_classes": len(means),
            }
    return EvalReport(variants, per_class, totals, n_records, config or {}, accuracy or {}, records)


def evaluate(
    params: ModelParams, posterior: LaplacePosterior | None, records: list, alphas=DEFAULT_ALPHAS,
    cfg: OcclusionConfig = OcclusionConfig(), *, S: int = 100, seed: int = 0,
) -> EvalReport:
    """Score MAP relevance and, with a posterior, each B-explanation percentile."""
    if not records:
        raise ValidationError("evaluation split is empty")
    alphas = tuple(alphas) if posterior is not None else ()
    variants = ["map"] + [variant_name(a) for a in alphas]
    draws = sample_params(posterior, S, seed) if posterior is not None else []
    X = np.stack([r.x for r in records]).astype(np.float64)
    y = np.array([r.label for r in records])
    probs = predict_batched(params, X)
    accuracy = {
        "map_accuracy": float((probs.argmax(1) == y).mean()),
        "map_mean_entropy": float(np.mean(predictive_entropy(probs))),
    }
    if draws:
        accs, avg = [], np.zeros_like(probs)
        for d in draws:
            p = predict_batched(d, X)
            accs.append(float((p.argmax(1) == y).mean()))
            avg += p
        avg /= len(draws)
        accuracy.update({
            "ensemble_mean_accuracy": float(np.mean(accs)), "ensemble_std_accuracy": float(np.std(accs)),
            "bma_accuracy": float((avg.argmax(1) == y).mean()),
            "bma_mean_entropy": float(np.mean(predictive_entropy(avg))),
        })
    rows = []
    for rec in records:
        mask = rec.mask
        base = rec.baseline if cfg.baseline_kind == "nominal_sine" else None
        target = resolve_target(params, rec.x, cfg, label=rec.label, map_params=params)
        row = {"class_id": int(rec.label)}
        r_map = relevance_map(params, rec.x, cfg, target_class=target, baseline=base).r
        row["map"] = {"rma": rma(r_map, mask), "iou": iou(r_map, mask)}
        if draws:
            fixed = None if cfg.target_policy == "per_sample_prediction" else target
            ens = ensemble_rows(draws, rec.x, cfg, fixed, base, rec.label)
            summ = summarize(ens, alphas, variance=False)
            for a in alphas:
                pa = summ.percentiles[a]
                row[variant_name(a)] = {"rma": rma(pa, mask), "iou": iou(pa, mask)}
        rows.append(row)
    config = {"alphas": list(alphas), "occlusion": cfg.to_json(), "S": S if draws else 0, "seed": seed,
              "prior_precision": posterior.prior_precision if posterior is not None else None}
    return aggregate(rows, variants, config, accuracy)
