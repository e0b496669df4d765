"""Synthetic PMU voltage records with labelled faults.

The generator stands in for an electromechanical grid simulation: each record
is a unit 60 Hz sinusoid multiplied by a per-fault amplitude envelope, plus
white Gaussian ambient noise on the instantaneous samples.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

ONSETS_S = (0.3, 0.4, 0.5, 0.6, 0.7)


class ConfigError(ValueError):
    """Raised when a configuration violates one of its bounds."""


class FaultType(str, enum.Enum):
    GT = "GeneratorTrip"
    LL = "LineToLine"
    LG = "LineToGround"
    LLG = "LineToLineToGround"
    THREE_PHASE = "ThreePhase"
    NONE = "None"

    @property
    def short(self) -> str:
        return _SHORT[self]

    @classmethod
    def parse(cls, text: str) -> "FaultType":
        key = text.strip()
        for ft in cls:
            if key.lower() in (ft.value.lower(), ft.short.lower(), ft.name.lower()):
                return ft
        raise ConfigError(f"unknown fault type {text!r}")


_SHORT = {
    FaultType.GT: "GT",
    FaultType.LL: "LL",
    FaultType.LG: "LG",
    FaultType.LLG: "LLG",
    FaultType.THREE_PHASE: "3P",
    FaultType.NONE: "None",
}

FAULT_TYPES = (FaultType.GT, FaultType.LL, FaultType.LG, FaultType.LLG, FaultType.THREE_PHASE)


@dataclass(frozen=True)
class FaultShape:
    """Amplitude/frequency distortion applied while a fault is active.

    Short-circuit faults sag to ``residual`` for the fault duration and ramp
    back over ``recovery_cycles``.  A generator trip drops to ``residual`` and
    then rings at ``ring_hz`` with exponential decay ``decay_s``; the
    frequency swings by up to ``freq_dev_hz`` with the same ring.
    """

    residual: float
    recovery_cycles: float = 1.0
    ring_hz: float = 0.0
    decay_s: float = 0.0
    freq_dev_hz: float = 0.0


DEFAULT_FAULT_SHAPES: dict[FaultType, FaultShape] = {
    FaultType.LL: FaultShape(residual=0.6),
    FaultType.LG: FaultShape(residual=0.7),
    FaultType.LLG: FaultShape(residual=0.5),
    FaultType.THREE_PHASE: FaultShape(residual=0.3),
    FaultType.GT: FaultShape(residual=0.75, ring_hz=1.0, decay_s=0.1, freq_dev_hz=0.2),
}


@dataclass(frozen=True)
class SignalConfig:
    sample_rate_hz: float = 600.0
    duration_s: float = 2.0
    fault_onset_s: float = 0.5
    fault_duration_s: float = 0.1
    noise_level: float = 0.05
    nominal_freq_hz: float = 60.0
    nominal_amplitude: float = 1.0
    severity: float = 1.0
    fault_params: dict[FaultType, FaultShape] = field(
        default_factory=lambda: dict(DEFAULT_FAULT_SHAPES)
    )
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.duration_s))

    def validate(self) -> None:
        if not self.sample_rate_hz > 0:
            raise ConfigError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        if not self.duration_s > 0:
            raise ConfigError(f"duration_s must be > 0, got {self.duration_s}")
        n = self.sample_rate_hz * self.duration_s
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigError(
                f"sample_rate_hz * duration_s must be an integer sample count, got {n}"
            )
        if not self.fault_duration_s > 0:
            raise ConfigError(f"fault_duration_s must be > 0, got {self.fault_duration_s}")
        if self.fault_onset_s < 0:
            raise ConfigError(f"fault_onset_s must be >= 0, got {self.fault_onset_s}")
        if not self.fault_onset_s + self.fault_duration_s < self.duration_s:
            raise ConfigError(
                "fault_onset_s + fault_duration_s must be < duration_s "
                f"({self.fault_onset_s} + {self.fault_duration_s} >= {self.duration_s})"
            )
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError(f"noise_level must lie in [0, 1], got {self.noise_level}")
        if not self.nominal_freq_hz > 0:
            raise ConfigError(f"nominal_freq_hz must be > 0, got {self.nominal_freq_hz}")
        if not self.nominal_amplitude > 0:
            raise ConfigError(f"nominal_amplitude must be > 0, got {self.nominal_amplitude}")
        if self.severity < 0:
            raise ConfigError(f"severity must be >= 0, got {self.severity}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fault_params"] = {ft.short: asdict(shape) for ft, shape in self.fault_params.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SignalConfig":
        d = dict(d)
        if "fault_params" in d:
            d["fault_params"] = {
                FaultType.parse(k): FaultShape(**v) for k, v in d["fault_params"].items()
            }
        return cls(**d)


@dataclass
class WaveformRecord:
    t: np.ndarray
    v: np.ndarray
    labels: list[tuple[float, float, FaultType]]
    config: SignalConfig

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.t.shape != self.v.shape or self.t.ndim != 1:
            raise ValueError("t and v must be 1-D arrays of equal length")

    def __len__(self) -> int:
        return len(self.v)

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.t.tolist(), self.v.tolist()))

    @property
    def sample_rate_hz(self) -> float:
        return self.config.sample_rate_hz

    @property
    def fault(self) -> FaultType:
        return self.labels[0][2] if self.labels else FaultType.NONE

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "v"])
            for ti, vi in zip(self.t, self.v):
                w.writerow([repr(float(ti)), repr(float(vi))])

    def labels_json(self) -> dict:
        return {
            "labels": [[a, b, ft.value] for a, b, ft in self.labels],
            "config": self.config.to_dict(),
        }

    def save(self, csv_path) -> Path:
        """Write ``<name>.csv`` plus a ``<name>.json`` label sidecar."""
        csv_path = Path(csv_path)
        self.to_csv(csv_path)
        sidecar = csv_path.with_suffix(".json")
        sidecar.write_text(json.dumps(self.labels_json(), indent=2, sort_keys=True) + "\n")
        return sidecar

    @classmethod
    def load(cls, csv_path) -> "WaveformRecord":
        csv_path = Path(csv_path)
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        sidecar = csv_path.with_suffix(".json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
            labels = [(float(a), float(b), FaultType(ft)) for a, b, ft in meta["labels"]]
            config = SignalConfig.from_dict(meta["config"])
        else:
            labels = []
            fs = 1.0 / (data[1, 0] - data[0, 0]) if len(data) > 1 else 600.0
            config = SignalConfig(
                sample_rate_hz=round(fs, 9),
                duration_s=len(data) / round(fs, 9),
                fault_onset_s=0.0,
                fault_duration_s=min(0.1, 0.5 * len(data) / round(fs, 9)),
            )
        return cls(t=data[:, 0], v=data[:, 1], labels=labels, config=config)


def _envelope(cfg: SignalConfig, fault: FaultType, t: np.ndarray):
    """Return (amplitude multiplier, instantaneous frequency) arrays."""
    amp = np.ones_like(t)
    freq = np.full_like(t, cfg.nominal_freq_hz)
    if fault is FaultType.NONE:
        return amp, freq
    shape = cfg.fault_params[fault]
    depth = cfg.severity * (1.0 - shape.residual)
    start = cfg.fault_onset_s
    end = start + cfg.fault_duration_s
    if fault is FaultType.GT:
        dt = t - start
        on = dt >= 0
        decay = np.exp(-dt[on] / shape.decay_s) if shape.decay_s > 0 else np.ones(on.sum())
        ring = 2 * np.pi * shape.ring_hz * dt[on]
        amp[on] = 1.0 - depth * decay * np.cos(ring)
        freq[on] = cfg.nominal_freq_hz - cfg.severity * shape.freq_dev_hz * decay * np.sin(ring)
        return amp, freq
    during = (t >= start) & (t < end)
    amp[during] = 1.0 - depth
    ramp = shape.recovery_cycles / cfg.nominal_freq_hz
    if ramp > 0:
        rec = (t >= end) & (t < end + ramp)
        amp[rec] = 1.0 - depth * (1.0 - (t[rec] - end) / ramp)
    return amp, freq


def generate_record(config: SignalConfig, fault: FaultType) -> WaveformRecord:
    config.validate()
    fault = FaultType(fault)
    n = config.n_samples
    t = np.arange(n) / config.sample_rate_hz
    amp, freq = _envelope(config, fault, t)
    if fault is FaultType.GT:
        # integrate the instantaneous frequency; the pre-event phase stays exactly 2*pi*f0*t
        phase = 2 * np.pi * config.nominal_freq_hz * t
        extra = np.cumsum(freq - config.nominal_freq_hz) / config.sample_rate_hz
        phase = phase + 2 * np.pi * extra
    else:
        phase = 2 * np.pi * config.nominal_freq_hz * t
    v = config.nominal_amplitude * amp * np.sin(phase)
    if config.noise_level > 0:
        rng = np.random.default_rng(config.rng_seed)
        v = v + rng.normal(0.0, config.noise_level * config.nominal_amplitude, n)
    labels = []
    if fault is not FaultType.NONE:
        labels.append(
            (config.fault_onset_s, config.fault_onset_s + config.fault_duration_s, fault)
        )
    return WaveformRecord(t=t, v=v, labels=labels, config=config)


def record_seed(seed: int, *key: int) -> int:
    """Derive an independent 64-bit seed for a named substream."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_dataset(
    n_per_fault: int,
    noise_level: float,
    seed: int,
    base: SignalConfig | None = None,
    severity_range: tuple[float, float] = (0.75, 1.25),
) -> list[WaveformRecord]:
    """``n_per_fault`` records per fault type followed by ``n_per_fault`` normal records.

    Onsets cycle through 0.3 ... 0.7 s; fault severity is drawn uniformly from
    ``severity_range`` per record.
    """
    if n_per_fault < 1:
        raise ConfigError(f"n_per_fault must be >= 1, got {n_per_fault}")
    base = base or SignalConfig()
    rng = np.random.default_rng(record_seed(seed, 0))
    records = []
    for fi, fault in enumerate(FAULT_TYPES + (FaultType.NONE,)):
        for i in range(n_per_fault):
            severity = float(rng.uniform(*severity_range))
            cfg = replace(
                base,
                noise_level=noise_level,
                fault_onset_s=ONSETS_S[i % len(ONSETS_S)],
                severity=severity if fault is not FaultType.NONE else 1.0,
                rng_seed=record_seed(seed, 1, fi, i),
            )
            records.append(generate_record(cfg, fault))
    return records


def downsample(record: WaveformRecord, factor: int) -> WaveformRecord:
    """Keep every ``factor``-th sample from index 0, dropping any remainder."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ConfigError(f"downsample factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return record
    n = (len(record) // factor) * factor
    idx = np.arange(0, n, factor)
    cfg = record.config
    new_fs = cfg.sample_rate_hz / factor
    new_cfg = replace(cfg, sample_rate_hz=new_fs, duration_s=len(idx) / new_fs)
    return WaveformRecord(t=record.t[idx], v=record.v[idx], labels=list(record.labels), config=new_cfg)


def magnitude_track(record: WaveformRecord) -> WaveformRecord:
    """Causal one-cycle DFT amplitude of the fundamental at every sample.

    This is the voltage magnitude a PMU reports.  The first cycle, where the
    trailing window is incomplete, repeats the first full-window value.
    """
    cfg = record.config
    cyc = cfg.sample_rate_hz / cfg.nominal_freq_hz
    w = int(round(cyc))
    if abs(cyc - w) > 1e-9 or w < 2:
        raise ConfigError("magnitude_track needs an integer number (>= 2) of samples per cycle")
    v = record.v
    if len(v) < w:
        raise ConfigError(f"record shorter than one cycle ({len(v)} < {w})")
    k = np.arange(len(v))
    rot = v * np.exp(-2j * np.pi * k / w)
    c = np.concatenate([[0.0], np.cumsum(rot)])
    win = c[w:] - c[:-w]
    mag = np.abs(win) * 2.0 / w
    out = np.empty_like(v)
    out[w - 1 :] = mag
    out[: w - 1] = mag[0]
    return WaveformRecord(t=record.t.copy(), v=out, labels=list(record.labels), config=cfg)


def concatenate(records: list[WaveformRecord]) -> WaveformRecord:
    """Join records end to end, shifting timestamps and labels."""
    if not records:
        raise ConfigError("nothing to concatenate")
    fs = records[0].sample_rate_hz
    vs, labels = [], []
    offset = 0.0
    for r in records:
        if r.sample_rate_hz != fs:
            raise ConfigError("records must share one sample rate")
        vs.append(r.v)
        labels.extend((a + offset, b + offset, ft) for a, b, ft in r.labels)
        offset += len(r) / fs
    cfg = replace(records[0].config, duration_s=offset)
    t = np.arange(sum(len(r) for r in records)) / fs
    return WaveformRecord(t=t, v=np.concatenate(vs), labels=labels, config=cfg)


def check_record(record: WaveformRecord) -> None:
    """Assert the structural invariants of a record."""
    dt = np.diff(record.t)
    if len(dt) and (np.any(dt <= 0) or not np.allclose(dt, 1.0 / record.sample_rate_hz)):
        raise ValueError("timestamps must be strictly increasing with uniform spacing")
    dur = len(record) / record.sample_rate_hz
    for a, b, ft in record.labels:
        if ft is FaultType.NONE:
            raise ValueError("None never labels a fault interval")
        if not (0 <= a <= b <= dur + 1e-12):
            raise ValueError(f"label interval ({a}, {b}) outside [0, {dur}]")

