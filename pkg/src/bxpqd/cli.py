"""Command-line entry point: gen, train, laplace, explain, eval, cluster, verify.

Settings resolve as flags > ``--config`` JSON file > built-in defaults. A
config file may hold settings at top level or under a key named after the
subcommand. Every successful command appends one JSON line to
``manifest.jsonl`` in the run directory (``$BXPQD_RUN_DIR`` or the
directory of ``--out``) listing the settings used and the sha256 of every
input and output file. Failures print a single line
``error: code=<code> msg=<message>`` on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .bexplain import (
    cluster_explanations, load_ensemble, sample_explanations, save_ensemble, summarize,
)
from .binio import sha256_file
from .errors import BxpqdError, ConfigurationError, HashMismatchError
from .laplace import DEFAULT_GRID, fit_laplace, load_posterior, save_posterior, tune_prior_precision
from .metrics import evaluate
from .nn.model import PRESETS, load_checkpoint, save_checkpoint
from .nn.train import TrainConfig, train
from .occlusion import OcclusionConfig, relevance_map
from .svg import render
from .synth import CorpusConfig, corpus_dataset, load_dataset, save_dataset

RUN_DIR_ENV = "BXPQD_RUN_DIR"
MANIFEST = "manifest.jsonl"

DEFAULTS = {
    "gen": {"per_class": 200, "seed": 0, "snr_min": 20.0, "snr_max": 50.0, "epsilon": 1e-3,
            "splits": "0.8,0.1,0.1"},
    "train": {"arch": "desk", "epochs": 30, "lr": 0.01, "l2": 1e-4, "halving": 10, "batch_size": 64, "seed": 0},
    "laplace": {"prior_precision": "auto", "kind": "fisher", "grid": ",".join(f"{g:g}" for g in DEFAULT_GRID),
                "tune_samples": 20, "tolerance": 0.01, "seed": 0},
    "explain": {"split": "test", "index": 0, "S": 100, "seed": 0, "alphas": "5,25,50,75,95", "window": 64,
                "stride": 8, "baseline": "zeros", "target_policy": "map_prediction"},
    "eval": {"split": "test", "S": 100, "seed": 0, "alphas": "5,25,50,75,95", "window": 64, "stride": 8,
             "baseline": "zeros", "target_policy": "map_prediction", "limit": 0},
    "cluster": {"k": 5, "seed": 0},
    "verify": {},
}


class UsageError(BxpqdError):
    code = "usage"


class MissingFileError(BxpqdError):
    code = "missing_file"


REQUIRED = {
    "gen": ("out",), "train": ("data", "out"), "laplace": ("ckpt", "data", "out"),
    "explain": ("ckpt", "data", "out"), "eval": ("ckpt", "data", "out"), "cluster": ("ensemble", "out"),
    "verify": ("manifest",),
}
PATH_KEYS = ("out", "data", "ckpt", "la", "json", "svg", "ensemble", "manifest")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text) -> tuple:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bxpqd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    def cmd(name, help_):
        c = sub.add_parser(name, help=help_, argument_default=S)
        c.add_argument("--config", help="JSON settings file")
        c.add_argument("--verbose", action="store_true")
        return c

    c = cmd("gen", "generate a synthetic corpus")
    c.add_argument("--per-class", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--snr-min", type=float)
    c.add_argument("--snr-max", type=float)
    c.add_argument("--snr", help="lo:hi shorthand for --snr-min/--snr-max")
    c.add_argument("--epsilon", type=float)
    c.add_argument("--splits")
    c.add_argument("--out")

    c = cmd("train", "train a classifier")
    c.add_argument("--data")
    c.add_argument("--arch", choices=sorted(PRESETS))
    c.add_argument("--epochs", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--l2", type=float)
    c.add_argument("--halving", type=int)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", "--ckpt", dest="out")

    c = cmd("laplace", "fit a diagonal Laplace posterior")
    c.add_argument("--ckpt")
    c.add_argument("--data")
    c.add_argument("--prior-precision")
    c.add_argument("--kind", choices=["fisher", "ggn"])
    c.add_argument("--grid")
    c.add_argument("--tune-samples", type=int)
    c.add_argument("--tolerance", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--out")

    def occ_flags(c):
        c.add_argument("--alphas")
        c.add_argument("--window", type=int)
        c.add_argument("--stride", type=int)
        c.add_argument("--baseline", choices=["zeros", "nominal_sine", "constant"])
        c.add_argument("--baseline-value", type=float)
        c.add_argument("--target-policy", choices=["map_prediction", "true_label", "per_sample_prediction"])
        c.add_argument("--S", type=int)
        c.add_argument("--seed", type=int)
        c.add_argument("--split")

    c = cmd("explain", "explain one record (MAP, or B-explanation with --la)")
    c.add_argument("--ckpt")
    c.add_argument("--la")
    c.add_argument("--data")
    c.add_argument("--index", type=int)
    occ_flags(c)
    c.add_argument("--json")
    c.add_argument("--svg")
    c.add_argument("--out")

    c = cmd("eval", "RMA/IoU report over a split")
    c.add_argument("--ckpt")
    c.add_argument("--la")
    c.add_argument("--data")
    c.add_argument("--limit", type=int, help="records per class, 0 for all")
    occ_flags(c)
    c.add_argument("--out")

    c = cmd("cluster", "k-means over an explanation ensemble")
    c.add_argument("--ensemble")
    c.add_argument("--k", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--out")

    c = cmd("verify", "recheck the hashes recorded in a manifest")
    c.add_argument("--manifest")
    return p


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge defaults, config-file values and explicit flags, in that order.

    The config file may also be a single manifest line, whose recorded
    settings are then replayed.
    """
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    settings = dict(DEFAULTS[args.command])
    if getattr(args, "config", None):
        cfg = json.loads(_require(args.config).read_text())
        if "command" in cfg and isinstance(cfg.get("config"), dict):
            if cfg["command"] != args.command:
                raise ConfigurationError(f"manifest entry is for {cfg['command']!r}, not {args.command!r}")
            cfg = cfg["config"]
        known = set(settings) | _dests(parser, args.command)
        scoped = cfg.get(args.command) if isinstance(cfg.get(args.command), dict) else {}
        top = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
        for src in (top, scoped):
            for k, v in src.items():
                key = k.replace("-", "_")
                if key not in known:
                    raise ConfigurationError(f"unknown config key {k!r} for {args.command}")
                settings[key] = v
    settings.update(flags)
    missing = [k for k in REQUIRED[args.command] if not settings.get(k)]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return settings


def _dests(parser, command) -> set:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return {a.dest for a in sub.choices[command]._actions} - {"help", "config", "verbose"}


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"no such file: {path}")
    return p


@contextlib.contextmanager
def locked(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / ".bxpqd.lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _occ_cfg(s) -> OcclusionConfig:
    return OcclusionConfig(int(s["window"]), int(s["stride"]), s["baseline"], float(s.get("baseline_value", 0.0)),
                           s["target_policy"])


def _load_model(s):
    params, _, ckpt_hash = load_checkpoint(_require(s["ckpt"]))
    post = load_posterior(_require(s["la"]), params, ckpt_hash) if s.get("la") else None
    return params, post


# ------------------------------------------------------------------ commands


def cmd_gen(s):
    if s.get("snr"):
        lo, _, hi = str(s.pop("snr")).partition(":")
        s["snr_min"], s["snr_max"] = float(lo), float(hi or lo)
    frac = _floats(s["splits"])
    cfg = CorpusConfig(per_class=int(s["per_class"]), snr_range=(float(s["snr_min"]), float(s["snr_max"])),
                       seed=int(s["seed"]), epsilon=float(s["epsilon"]), splits=frac)
    cfg.validate()
    save_dataset(corpus_dataset(cfg), s["out"])
    return [], [s["out"]]


def cmd_train(s):
    ds = load_dataset(_require(s["data"]))
    arch = PRESETS[s["arch"]](ds.n_classes, ds.n_samples)
    cfg = TrainConfig(lr0=float(s["lr"]), lr_halving_period_epochs=int(s["halving"]), l2_coeff=float(s["l2"]),
                      epochs=int(s["epochs"]), batch_size=int(s["batch_size"]), seed=int(s["seed"]))
    val = ds.arrays("val")
    params, log = train(arch, ds.arrays("train"), val, cfg)
    save_checkpoint(params, s["out"], log)
    return [s["data"]], [s["out"]]


def cmd_laplace(s):
    params, _, ckpt_hash = load_checkpoint(_require(s["ckpt"]))
    ds = load_dataset(_require(s["data"]))
    pp = str(s["prior_precision"])
    start = 1.0 if pp == "auto" else float(pp)
    post = fit_laplace(params, ds.arrays("train"), start, s["kind"])
    if pp == "auto":
        lam, table = tune_prior_precision(post, ds.arrays("val"), _floats(s["grid"]), n_samples=int(s["tune_samples"]),
                                          seed=int(s["seed"]), tolerance=float(s["tolerance"]))
        post = post.with_prior_precision(lam)
        extra = {"tuning": table, "chosen_prior_precision": lam}
    else:
        extra = {}
    save_posterior(post, s["out"], ckpt_hash)
    return [s["ckpt"], s["data"]], [s["out"]], extra


def cmd_explain(s):
    params, post = _load_model(s)
    ds = load_dataset(_require(s["data"]))
    recs = ds.split(s["split"])
    idx = int(s["index"])
    if not 0 <= idx < len(recs):
        raise ConfigurationError(f"index {idx} outside split {s['split']!r} of size {len(recs)}")
    rec = recs[idx]
    cfg = _occ_cfg(s)
    base = rec.baseline if cfg.baseline_kind == "nominal_sine" else None
    r_map = relevance_map(params, rec.x, cfg, baseline=base, label=rec.label)
    outputs = [s["out"]]
    strips = {"MAP": r_map.r}
    if post is None:
        Path(s["out"]).write_text(r_map.to_csv())
        summary = {"map": r_map.r.tolist(), "target_class": r_map.target_class}
    else:
        ens = sample_explanations(post, rec.x, int(s["S"]), cfg, int(s["seed"]), baseline=base, label=rec.label)
        save_ensemble(ens, s["out"])
        alphas = _floats(s["alphas"])
        bx = summarize(ens, tuple(int(a) if a == int(a) else a for a in alphas), variance=ens.S >= 2)
        summary = json.loads(bx.to_json())
        summary.update({"map": r_map.r.tolist(), "target_class": ens.target_class})
        strips.update({f"p{a:g}": v for a, v in bx.percentiles.items()})
    if s.get("json"):
        Path(s["json"]).write_text(json.dumps(summary))
        outputs.append(s["json"])
    if s.get("svg"):
        Path(s["svg"]).write_text(render(rec.x, strips, title=f"{s['split']}[{idx}] label {rec.label}"))
        outputs.append(s["svg"])
    return [p for p in (s["ckpt"], s.get("la"), s["data"]) if p], outputs


def cmd_eval(s):
    params, post = _load_model(s)
    ds = load_dataset(_require(s["data"]))
    recs = ds.split(s["split"])
    limit = int(s["limit"])
    if limit > 0:
        kept, counts = [], {}
        for r in recs:
            counts[r.label] = counts.get(r.label, 0) + 1
            if counts[r.label] <= limit:
                kept.append(r)
        recs = kept
    alphas = tuple(int(a) if a == int(a) else a for a in _floats(s["alphas"]))
    rep = evaluate(params, post, recs, alphas, _occ_cfg(s), S=int(s["S"]), seed=int(s["seed"]))
    out = Path(s["out"])
    out.write_text(rep.to_csv())
    mirror = out.with_suffix(".json")
    mirror.write_text(rep.to_json())
    return [p for p in (s["ckpt"], s.get("la"), s["data"]) if p], [str(out), str(mirror)]


def cmd_cluster(s):
    ens = load_ensemble(_require(s["ensemble"]))
    res = cluster_explanations(ens, int(s["k"]), int(s["seed"]))
    Path(s["out"]).write_text(res.to_json())
    return [s["ensemble"]], [s["out"]]


def cmd_verify(s):
    path = _require(s["manifest"])
    base = path.parent
    checked = 0
    for line in path.read_text().splitlines():
        entry = json.loads(line)
        for name, digest in {**entry["inputs"], **entry["outputs"]}.items():
            f = base / name
            if not f.is_file():
                raise MissingFileError(f"{name} listed in manifest is missing")
            if sha256_file(f) != digest:
                raise HashMismatchError(f"{name} does not match its recorded hash")
            checked += 1
    print(f"ok: {checked} hashes verified")
    return [], []


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "laplace": cmd_laplace, "explain": cmd_explain,
            "eval": cmd_eval, "cluster": cmd_cluster, "verify": cmd_verify}


def _rel(path, base: Path) -> str:
    return os.path.relpath(Path(path).resolve(), base.resolve())


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    settings = resolve(args, parser)
    if args.command == "verify":
        COMMANDS["verify"](settings)
        return 0
    run_dir = Path(os.environ.get(RUN_DIR_ENV) or Path(settings["out"]).resolve().parent)
    out_dir = Path(settings["out"]).resolve().parent
    with locked(out_dir):
        t0 = time.perf_counter()
        inputs, outputs, *extra = COMMANDS[args.command](settings)
        wall = time.perf_counter() - t0
        entry = {
            "command": args.command, "version": __version__, "seed": settings.get("seed"),
            "config": settings,
            "inputs": {_rel(p, run_dir): sha256_file(p) for p in inputs},
            "outputs": {_rel(p, run_dir): sha256_file(p) for p in outputs},
            "wall_time_s": round(wall, 3),
        }
        if extra:
            entry["details"] = extra[0]
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / MANIFEST, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except BxpqdError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: code={exc.code} msg={msg}", file=sys.stderr)
        return 1 if exc.code != "usage" else 2
    except (OSError, ValueError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: code={type(exc).__name__} msg={msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
