"""Synthetic power-quality-disturbance (PQD) signals with analytic ground truth.

Every record is built from a nominal sine plus one of 16 parametric
disturbance models. The noise-free disturbed waveform is kept next to the
noise-free baseline so that the disturbance mask can be computed exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .binio import Reader, Writer
from .errors import ConfigurationError, FormatError, ValidationError

CLASS_NAMES = (
    "Sag",
    "Swell",
    "Interruption",
    "Harmonics",
    "Flicker",
    "OscillatoryTransient",
    "ImpulsiveTransient",
    "Notch",
    "Spike",
    "SagHarmonics",
    "SwellHarmonics",
    "InterruptionHarmonics",
    "FlickerHarmonics",
    "FlickerSag",
    "FlickerSwell",
    "Normal",
)
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
N_CLASSES = len(CLASS_NAMES)
NORMAL_ID = CLASS_IDS["Normal"]

DEFAULT_EPSILON = 1e-3

# Sampling ranges per parameter; durations are in cycles of the fundamental,
# fractions of a cycle for the sub-cycle events.
PARAM_RANGES = {
    "sag_depth": (0.1, 0.9),
    "swell_magnitude": (1.1, 1.8),
    "interruption_magnitude": (0.0, 0.1),
    "event_cycles": (1.0, 9.0),
    "harmonic_coeff": (0.05, 0.15),
    "flicker_hz": (8.0, 25.0),
    "flicker_magnitude": (0.1, 0.2),
    "osc_magnitude": (0.1, 0.8),
    "osc_hz": (300.0, 900.0),
    "osc_decay": (25.0, 125.0),
    "impulse_magnitude": (0.5, 1.5),
    "impulse_decay": (1000.0, 5000.0),
    "notch_depth": (0.1, 0.4),
    "spike_magnitude": (0.1, 0.4),
    "notch_width_cycles": (0.02, 0.06),
    "notch_offset_cycles": (0.0, 0.45),
}

HARMONIC_ORDERS = (3, 5, 7)


@dataclass(frozen=True)
class WaveformSpec:
    amplitude_pu: float = 1.0
    frequency_hz: float = 50.0
    phase_rad: float = 0.0
    sample_rate_hz: float = 3200.0
    n_cycles: int = 10

    def __post_init__(self):
        if self.frequency_hz <= 0 or self.sample_rate_hz <= 2 * self.frequency_hz:
            raise ConfigurationError("sample rate must exceed twice the frequency")
        if self.n_samples <= 0:
            raise ConfigurationError("waveform must have at least one sample")

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.n_cycles / self.frequency_hz))

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def time(self) -> np.ndarray:
        return np.arange(self.n_samples) / self.sample_rate_hz


@dataclass(frozen=True)
class DisturbanceSpec:
    class_id: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.class_id < N_CLASSES:
            raise ValidationError(f"class_id {self.class_id} outside [0, {N_CLASSES - 1}]")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]

    @classmethod
    def named(cls, name: str, **params) -> "DisturbanceSpec":
        return cls(CLASS_IDS[name], dict(params))


@dataclass
class SignalRecord:
    x: np.ndarray
    baseline: np.ndarray
    label: int
    spec: DisturbanceSpec
    snr_db: float
    noise_sigma: float
    wave: WaveformSpec = field(default_factory=WaveformSpec)
    clean: np.ndarray | None = None
    mask: np.ndarray | None = None
    split: str = ""

    def clean_waveform(self) -> np.ndarray:
        if self.clean is None:
            self.clean = disturbance_transform(self.wave, self.spec)
        return self.clean


@dataclass
class GroundTruthMask:
    mask: np.ndarray
    epsilon: float

    @property
    def disturbed_count(self) -> int:
        return int(self.mask.sum())


def synth_baseline(spec: WaveformSpec) -> np.ndarray:
    t = spec.time()
    return spec.amplitude_pu * np.sin(2 * np.pi * spec.frequency_hz * t + spec.phase_rad)


def _window(t, start, end):
    return ((t >= start) & (t < end)).astype(float)


def _harmonics(wave, p, t):
    w = 2 * np.pi * wave.frequency_hz
    out = np.zeros_like(t)
    for h in HARMONIC_ORDERS:
        a = p.get(f"h{h}", 0.0)
        out += wave.amplitude_pu * a * np.sin(h * (w * t + wave.phase_rad) + p.get(f"h{h}_phase", 0.0))
    return out


def _envelope(kind, p, t):
    """Amplitude multiplier of the fundamental for interval events."""
    win = _window(t, p["start_time"], p["end_time"])
    if kind == "sag":
        return 1.0 - p["depth"] * win
    if kind == "swell":
        return 1.0 + (p["magnitude"] - 1.0) * win
    # interruption keeps a residual magnitude inside the interval
    return 1.0 - (1.0 - p["magnitude"]) * win


def _flicker(p, t):
    return 1.0 + p["flicker_magnitude"] * np.sin(2 * np.pi * p["flicker_hz"] * t + p.get("flicker_phase", 0.0))


def _periodic_pulses(wave, p, t):
    """Indicator of one short pulse per cycle at a fixed carrier phase."""
    period = 1.0 / wave.frequency_hz
    # carrier phase of each sample, in cycles, shifted so pulses sit at a fixed
    # position relative to the (possibly phase-shifted) sine
    pos = np.mod(t + wave.phase_rad / (2 * np.pi * wave.frequency_hz), period) / period
    lo = p["offset_cycles"]
    return ((pos >= lo) & (pos < lo + p["width_cycles"])).astype(float)


def disturbance_transform(wave: WaveformSpec, dist: DisturbanceSpec) -> np.ndarray:
    """Noise-free disturbed waveform for ``dist`` on top of ``wave``."""
    t = wave.time()
    p = dist.params
    base = synth_baseline(wave)
    name = dist.class_name
    A = wave.amplitude_pu
    if name == "Normal":
        return base.copy()
    if name in ("Sag", "Swell", "Interruption"):
        return _envelope(name.lower(), p, t) * base
    if name == "Harmonics":
        return base + _harmonics(wave, p, t)
    if name == "Flicker":
        return _flicker(p, t) * base
    if name == "OscillatoryTransient":
        tau = t - p["start_time"]
        on = tau >= 0
        burst = np.zeros_like(t)
        burst[on] = p["magnitude"] * np.exp(-p["decay"] * tau[on]) * np.sin(2 * np.pi * p["osc_hz"] * tau[on])
        return base + A * burst
    if name == "ImpulsiveTransient":
        tau = t - p["start_time"]
        on = tau >= 0
        pulse = np.zeros_like(t)
        pulse[on] = p["magnitude"] * np.exp(-p["decay"] * tau[on])
        return base + A * p.get("polarity", 1.0) * pulse
    if name in ("Notch", "Spike"):
        pulses = _periodic_pulses(wave, p, t)
        sign = -1.0 if name == "Notch" else 1.0
        return base + sign * A * p["depth"] * np.sign(base) * pulses
    if name in ("SagHarmonics", "SwellHarmonics", "InterruptionHarmonics"):
        kind = name[: -len("Harmonics")].lower()
        return _envelope(kind, p, t) * base + _harmonics(wave, p, t)
    if name == "FlickerHarmonics":
        return _flicker(p, t) * base + _harmonics(wave, p, t)
    if name in ("FlickerSag", "FlickerSwell"):
        kind = name[len("Flicker") :].lower()
        return _flicker(p, t) * _envelope(kind, p, t) * base
    raise ValidationError(f"unknown class {name}")  # pragma: no cover


def _check(p, key, rng_key):
    lo, hi = PARAM_RANGES[rng_key]
    v = p.get(key)
    if v is None:
        raise ValidationError(f"missing parameter {key!r}")
    if not lo - 1e-12 <= v <= hi + 1e-12:
        raise ValidationError(f"{key}={v} outside [{lo}, {hi}]")


def validate_disturbance(wave: WaveformSpec, dist: DisturbanceSpec) -> None:
    p = dist.params
    name = dist.class_name
    dur = wave.duration_s
    cycle = 1.0 / wave.frequency_hz

    def interval():
        s, e = p.get("start_time"), p.get("end_time")
        if s is None or e is None or not 0 <= s < e <= dur + 1e-12:
            raise ValidationError(f"need 0 <= start_time < end_time <= {dur}")
        lo, hi = PARAM_RANGES["event_cycles"]
        if not lo * cycle - 1e-9 <= e - s <= hi * cycle + 1e-9:
            raise ValidationError("event duration outside configured cycle range")

    def harmonics():
        for h in HARMONIC_ORDERS:
            _check(p, f"h{h}", "harmonic_coeff")

    def flicker():
        _check(p, "flicker_hz", "flicker_hz")
        _check(p, "flicker_magnitude", "flicker_magnitude")

    if name in ("Sag", "SagHarmonics", "FlickerSag"):
        interval()
        _check(p, "depth", "sag_depth")
    if name in ("Swell", "SwellHarmonics", "FlickerSwell"):
        interval()
        _check(p, "magnitude", "swell_magnitude")
    if name in ("Interruption", "InterruptionHarmonics"):
        interval()
        _check(p, "magnitude", "interruption_magnitude")
    if "Harmonics" in name:
        harmonics()
    if "Flicker" in name:
        flicker()
    if name == "OscillatoryTransient":
        _check(p, "magnitude", "osc_magnitude")
        _check(p, "osc_hz", "osc_hz")
        _check(p, "decay", "osc_decay")
    if name == "ImpulsiveTransient":
        _check(p, "magnitude", "impulse_magnitude")
        _check(p, "decay", "impulse_decay")
    if name in ("OscillatoryTransient", "ImpulsiveTransient"):
        s = p.get("start_time")
        if s is None or not 0 <= s < dur:
            raise ValidationError("transient start_time outside the signal")
    if name in ("Notch", "Spike"):
        _check(p, "depth", "notch_depth" if name == "Notch" else "spike_magnitude")
        _check(p, "width_cycles", "notch_width_cycles")
        _check(p, "offset_cycles", "notch_offset_cycles")


def noise_sigma_for(clean: np.ndarray, snr_db: float) -> float:
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    rms = float(np.sqrt(np.mean(clean**2)))
    return rms / 10 ** (snr_db / 20)


def synth_disturbed(
    wave: WaveformSpec, dist: DisturbanceSpec, snr_db: float, seed: int, *, validate: bool = True
) -> SignalRecord:
    if validate:
        validate_disturbance(wave, dist)
    baseline = synth_baseline(wave)
    clean = disturbance_transform(wave, dist)
    sigma = noise_sigma_for(clean, snr_db)
    x = clean.copy()
    if sigma > 0:
        x += np.random.default_rng(seed).normal(0.0, sigma, size=clean.shape)
    return SignalRecord(
        x=x, baseline=baseline, label=dist.class_id, spec=dist, snr_db=float(snr_db),
        noise_sigma=sigma, wave=wave, clean=clean,
    )


def ground_truth_mask(record: SignalRecord, epsilon: float = DEFAULT_EPSILON) -> GroundTruthMask:
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    dev = np.abs(record.clean_waveform() - record.baseline)
    return GroundTruthMask((dev > epsilon).astype(np.uint8), float(epsilon))


def sample_params(class_id: int, wave: WaveformSpec, rng: np.random.Generator) -> dict:
    """Draw disturbance parameters for ``class_id`` from the configured ranges."""
    name = CLASS_NAMES[class_id]
    R = PARAM_RANGES
    u = lambda key: float(rng.uniform(*R[key]))  # noqa: E731
    cycle = 1.0 / wave.frequency_hz
    p: dict = {}

    def interval():
        dur = u("event_cycles") * cycle
        start = float(rng.uniform(0.0, wave.duration_s - dur))
        p["start_time"], p["end_time"] = start, start + dur

    if name in ("Sag", "SagHarmonics", "FlickerSag"):
        interval()
        p["depth"] = u("sag_depth")
    if name in ("Swell", "SwellHarmonics", "FlickerSwell"):
        interval()
        p["magnitude"] = u("swell_magnitude")
    if name in ("Interruption", "InterruptionHarmonics"):
        interval()
        p["magnitude"] = u("interruption_magnitude")
    if "Harmonics" in name:
        for h in HARMONIC_ORDERS:
            p[f"h{h}"] = u("harmonic_coeff")
            p[f"h{h}_phase"] = float(rng.uniform(0, 2 * np.pi))
    if "Flicker" in name:
        p["flicker_hz"] = u("flicker_hz")
        p["flicker_magnitude"] = u("flicker_magnitude")
        p["flicker_phase"] = float(rng.uniform(0, 2 * np.pi))
    if name == "OscillatoryTransient":
        p["start_time"] = float(rng.uniform(0.0, 0.7 * wave.duration_s))
        p["magnitude"] = u("osc_magnitude")
        p["osc_hz"] = u("osc_hz")
        p["decay"] = u("osc_decay")
    if name == "ImpulsiveTransient":
        p["start_time"] = float(rng.uniform(0.0, 0.9 * wave.duration_s))
        p["magnitude"] = u("impulse_magnitude")
        p["decay"] = u("impulse_decay")
        p["polarity"] = float(rng.choice([-1.0, 1.0]))
    if name in ("Notch", "Spike"):
        p["depth"] = u("notch_depth" if name == "Notch" else "spike_magnitude")
        p["width_cycles"] = u("notch_width_cycles")
        p["offset_cycles"] = u("notch_offset_cycles")
    return p


# ---------------------------------------------------------------- corpus


@dataclass
class CorpusConfig:
    per_class: int = 200
    snr_range: tuple = (20.0, 50.0)
    seed: int = 0
    epsilon: float = DEFAULT_EPSILON
    splits: tuple = (0.8, 0.1, 0.1)
    random_phase: bool = True
    classes: tuple = tuple(range(N_CLASSES))
    wave: WaveformSpec = field(default_factory=WaveformSpec)

    def validate(self):
        if self.per_class < 1:
            raise ValidationError("per_class must be >= 1")
        if len(self.splits) != 3 or any(f < 0 for f in self.splits) or abs(sum(self.splits) - 1) > 1e-9:
            raise ValidationError("split fractions must be three non-negative numbers summing to 1")
        lo, hi = self.snr_range
        if lo > hi:
            raise ValidationError("snr range must be lo <= hi")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")


SPLIT_NAMES = ("train", "val", "test")


def split_counts(k: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * k))
    n_val = int(round(fractions[1] * k))
    n_val = min(n_val, k - n_train)
    return n_train, n_val, k - n_train - n_val


def make_record(cfg: CorpusConfig, class_id: int, index: int) -> SignalRecord:
    rng = np.random.default_rng([cfg.seed, class_id, index])
    phase = float(rng.uniform(0, 2 * np.pi)) if cfg.random_phase else cfg.wave.phase_rad
    wave = WaveformSpec(
        cfg.wave.amplitude_pu, cfg.wave.frequency_hz, phase, cfg.wave.sample_rate_hz, cfg.wave.n_cycles
    )
    params = sample_params(class_id, wave, rng)
    lo, hi = cfg.snr_range
    snr = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    noise_seed = int(rng.integers(0, 2**63 - 1))
    rec = synth_disturbed(wave, DisturbanceSpec(class_id, params), snr, noise_seed)
    rec.mask = ground_truth_mask(rec, cfg.epsilon).mask
    return rec


def generate_corpus(cfg: CorpusConfig) -> list[SignalRecord]:
    """Stratified corpus; records are ordered by split, then class, then index."""
    cfg.validate()
    counts = split_counts(cfg.per_class, cfg.splits)
    by_split: dict[str, list[SignalRecord]] = {s: [] for s in SPLIT_NAMES}
    for c in cfg.classes:
        order = np.random.default_rng([cfg.seed, c, 2**31]).permutation(cfg.per_class)
        bounds = np.cumsum((0,) + counts)
        for s, name in enumerate(SPLIT_NAMES):
            for i in sorted(order[bounds[s] : bounds[s + 1]]):
                rec = make_record(cfg, c, int(i))
                rec.split = name
                by_split[name].append(rec)
    return [r for s in SPLIT_NAMES for r in by_split[s]]


# ---------------------------------------------------------------- dataset file

DATASET_MAGIC = b"PQDS"
DATASET_VERSION = 1


@dataclass
class Dataset:
    records: list
    n_samples: int
    n_classes: int = N_CLASSES
    sample_rate: float = 3200.0
    epsilon: float = DEFAULT_EPSILON

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def arrays(self, name: str | None = None, dtype=np.float32):
        recs = self.records if name is None else self.split(name)
        X = np.stack([r.x for r in recs]).astype(dtype) if recs else np.zeros((0, self.n_samples), dtype)
        y = np.array([r.label for r in recs], dtype=np.int64)
        return X, y


def _spec_json(rec: SignalRecord) -> dict:
    return {
        "class_id": rec.spec.class_id,
        "class_name": rec.spec.class_name,
        "params": rec.spec.params,
        "wave": asdict(rec.wave),
        "noise_sigma": rec.noise_sigma,
        "split": rec.split,
    }


def dataset_bytes(ds: Dataset) -> bytes:
    w = Writer(DATASET_MAGIC, DATASET_VERSION)
    w.pack("<IIHdd", len(ds.records), ds.n_samples, ds.n_classes, ds.sample_rate, ds.epsilon)
    for rec in ds.records:
        if len(rec.x) != ds.n_samples:
            raise ValidationError("record length does not match dataset header")
        mask = rec.mask if rec.mask is not None else ground_truth_mask(rec, ds.epsilon).mask
        w.pack("<Bf", rec.label, rec.snr_db)
        w.array(rec.x, "f4")
        w.array(rec.baseline, "f4")
        w.array(mask, "u1")
        w.json(_spec_json(rec))
    return w.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    r = Reader.open(path, DATASET_MAGIC, (DATASET_VERSION,))
    n_rec, n, n_classes, fs, eps = r.unpack("<IIHdd")
    records = []
    for _ in range(n_rec):
        label, snr = r.unpack("<Bf")
        x = r.array("f4", n)
        base = r.array("f4", n)
        mask = r.array("u1", n)
        meta = r.json()
        wave = WaveformSpec(**meta["wave"])
        records.append(
            SignalRecord(
                x=x, baseline=base, label=label, spec=DisturbanceSpec(meta["class_id"], meta["params"]),
                snr_db=float(snr), noise_sigma=meta["noise_sigma"], wave=wave, mask=mask, split=meta["split"],
            )
        )
    if not r.at_end():
        raise FormatError("trailing bytes after last record")
    return Dataset(records, n, n_classes, fs, eps)


def corpus_dataset(cfg: CorpusConfig) -> Dataset:
    recs = generate_corpus(cfg)
    return Dataset(recs, cfg.wave.n_samples, N_CLASSES, cfg.wave.sample_rate_hz, cfg.epsilon)


def config_json(cfg: CorpusConfig) -> str:
    d = asdict(cfg)
    return json.dumps(d, sort_keys=True)
