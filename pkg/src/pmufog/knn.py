"""Window features and k-nearest-neighbour normal/fault classification."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signalgen import ConfigError, FaultType, WaveformRecord

EPS = 1e-12
RENYI_ALPHA = 0.4
FEATURE_NAMES = (
    "harmonic_mean",
    "std",
    "mean_deviation",
    "kurtosis",
    "log_energy_entropy",
    "shannon_entropy",
    "renyi_entropy",
    "rms",
    "peak",
    "peak_to_peak",
    "thd",
    "h1",
    "h2",
    "h3",
    "h4",
    "h5",
)
MODEL_VERSION = 1


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]

    def __getitem__(self, i: int) -> float:
        """1-based access, ``fv[6]`` is the Shannon entropy."""
        if not 1 <= i <= 16:
            raise IndexError(f"feature index {i} outside 1..16")
        return self.values[i - 1]

    def __getattr__(self, name: str) -> float:
        if name.startswith("f") and name[1:].isdigit():
            return self[int(name[1:])]
        raise AttributeError(name)

    def as_array(self) -> np.ndarray:
        return np.array(self.values)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values))


@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    window_len: int = 10
    selected_features: tuple[int, ...] = (6, 8, 9, 10)
    standardize: bool = True
    min_consecutive: int = 2  # fault windows in a row before a record-level flag

    def __post_init__(self):
        if self.min_consecutive < 1:
            raise ConfigError(f"min_consecutive must be >= 1, got {self.min_consecutive}")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"k must be odd and >= 1, got {self.k}")
        if self.window_len < 2:
            raise ConfigError(f"window_len must be >= 2, got {self.window_len}")
        feats = tuple(int(f) for f in self.selected_features)
        if not feats or any(not 1 <= f <= 16 for f in feats):
            raise ConfigError(f"selected_features must be a non-empty subset of 1..16, got {feats}")
        object.__setattr__(self, "selected_features", feats)


def dft(window) -> np.ndarray:
    """D_k = sum_{j=1}^{N} d_j exp(-i 2 pi k j / N), k = 0 .. N-1."""
    d = np.asarray(window, dtype=float)
    n = len(d)
    k = np.arange(n)
    # 1-based sample index: the j=N term has the phase of j=0, so this is fft * exp(-i 2 pi k / N)
    return np.fft.fft(d) * np.exp(-2j * np.pi * k / n)


def feature_matrix(windows) -> np.ndarray:
    """All 16 features for each row of a 2-D array of windows."""
    W = np.atleast_2d(np.asarray(windows, dtype=float))
    n = W.shape[1]
    if n < 2:
        raise ConfigError(f"feature windows need at least 2 samples, got {n}")
    a = np.maximum(np.abs(W), EPS)
    mean = W.mean(axis=1, keepdims=True)
    dev = W - mean
    m2 = np.mean(dev**2, axis=1)
    out = np.empty((W.shape[0], 16))
    out[:, 0] = n / np.sum(1.0 / a, axis=1)
    out[:, 1] = np.sqrt(np.sum(dev**2, axis=1) / (n - 1))
    out[:, 2] = np.mean(np.abs(dev), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        # m4 / m2^2 from normalised deviations; m2^2 underflows for tiny windows
        kurt = np.mean((dev / np.sqrt(m2)[:, None]) ** 4, axis=1)
    out[:, 3] = np.where(m2 > 0, kurt, 0.0)
    a2 = a * a
    out[:, 4] = np.sum(np.log(a2), axis=1)
    out[:, 5] = -np.sum(a2 * np.log(a2), axis=1)
    out[:, 6] = np.log(np.sum(a**RENYI_ALPHA, axis=1)) / (1.0 - RENYI_ALPHA)
    out[:, 7] = np.sqrt(np.mean(np.abs(W), axis=1))
    out[:, 8] = W.max(axis=1)
    out[:, 9] = W.max(axis=1) - W.min(axis=1)
    mag = np.abs(np.fft.fft(W, axis=1))
    # k = 2 .. N; D_N is the k = 0 bin by periodicity
    harm = np.sum(mag[:, 2:] ** 2, axis=1) + mag[:, 0] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        thd = np.sqrt(harm) / mag[:, 1]
    out[:, 10] = np.where(mag[:, 1] > 0, thd, 0.0)
    for h in range(1, 6):
        out[:, 10 + h] = mag[:, h] if h < n else 0.0
    return out


def extract_features(window) -> FeatureVector:
    return FeatureVector(tuple(float(x) for x in feature_matrix(window)[0]))


def windows_of(record: WaveformRecord, window_len: int):
    """Non-overlapping windows from index 0 with their start/end times and labels."""
    n_win = len(record) // window_len
    if n_win == 0:
        return np.zeros((0, window_len)), np.zeros(0), np.zeros(0), np.zeros(0, bool)
    W = record.v[: n_win * window_len].reshape(n_win, window_len)
    tt = record.t[: n_win * window_len].reshape(n_win, window_len)
    start, end = tt[:, 0], tt[:, -1]
    fault = np.zeros(n_win, bool)
    for a, b, _ in record.labels:
        fault |= (start < b) & (end >= a)
    return W, start, end, fault


@dataclass
class KnnModel:
    points: np.ndarray  # standardised selected features
    labels: np.ndarray  # True = fault
    mean: np.ndarray
    scale: np.ndarray
    cfg: KnnConfig = field(default_factory=KnnConfig)

    def transform(self, features: np.ndarray) -> np.ndarray:
        sel = np.array(self.cfg.selected_features) - 1
        return (np.atleast_2d(features)[:, sel] - self.mean) / self.scale

    def save(self, path) -> None:
        doc = {
            "version": MODEL_VERSION,
            "config": {
                "k": self.cfg.k,
                "window_len": self.cfg.window_len,
                "selected_features": list(self.cfg.selected_features),
                "standardize": self.cfg.standardize,
                "min_consecutive": self.cfg.min_consecutive,
            },
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "points": self.points.tolist(),
            "labels": [int(x) for x in self.labels],
        }
        Path(path).write_text(json.dumps(doc) + "\n")

    @classmethod
    def load(cls, path) -> "KnnModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported KNN model version {doc.get('version')!r}")
        cfg = KnnConfig(**{**doc["config"], "selected_features": tuple(doc["config"]["selected_features"])})
        return cls(
            points=np.array(doc["points"], dtype=float).reshape(-1, len(cfg.selected_features)),
            labels=np.array(doc["labels"], dtype=bool),
            mean=np.array(doc["mean"], dtype=float),
            scale=np.array(doc["scale"], dtype=float),
            cfg=cfg,
        )


def fit(features: np.ndarray, labels, cfg: KnnConfig) -> KnnModel:
    """Build a model from raw 16-feature rows and boolean fault labels."""
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise ValueError("training set must contain both normal and fault windows")
    sel = np.array(cfg.selected_features) - 1
    X = np.atleast_2d(features)[:, sel]
    if cfg.standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        zero = scale == 0
        if zero.any():
            bad = [cfg.selected_features[i] for i in np.flatnonzero(zero)]
            warnings.warn(f"features {bad} have zero variance; scale set to 1", stacklevel=2)
            scale = np.where(zero, 1.0, scale)
    else:
        mean = np.zeros(X.shape[1])
        scale = np.ones(X.shape[1])
    return KnnModel(points=(X - mean) / scale, labels=labels, mean=mean, scale=scale, cfg=cfg)


def train(records, cfg: KnnConfig | None = None) -> KnnModel:
    cfg = cfg or KnnConfig()
    feats, labels = [], []
    for r in records:
        W, _, _, fault = windows_of(r, cfg.window_len)
        if len(W):
            feats.append(feature_matrix(W))
            labels.append(fault)
    if not feats:
        raise ValueError("no training windows")
    return fit(np.vstack(feats), np.concatenate(labels), cfg)


def _vote(model: KnnModel, Z: np.ndarray, chunk: int = 2048):
    k = min(model.cfg.k, len(model.points))
    P = model.points
    pn = np.sum(P * P, axis=1)
    fault_votes = np.empty(len(Z), dtype=int)
    for s in range(0, len(Z), chunk):
        z = Z[s : s + chunk]
        d2 = np.sum(z * z, axis=1)[:, None] - 2 * z @ P.T + pn[None, :]
        # stable sort keeps training order among equal distances
        nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
        fault_votes[s : s + chunk] = model.labels[nn].sum(axis=1)
    normal_votes = k - fault_votes
    is_fault = fault_votes >= normal_votes
    margin = np.abs(fault_votes - normal_votes) / k
    return is_fault, margin


def classify(model: KnnModel, window) -> tuple[bool, float]:
    """(is_fault, vote margin) for a single raw window."""
    z = model.transform(feature_matrix(window))
    is_fault, margin = _vote(model, z)
    return bool(is_fault[0]), float(margin[0])


def classify_features(model: KnnModel, features: np.ndarray):
    return _vote(model, model.transform(features))


def persistent(flags, min_run: int) -> np.ndarray:
    """Keep only runs of at least ``min_run`` consecutive True values."""
    flags = np.asarray(flags, dtype=bool)
    out = np.zeros_like(flags)
    run = 0
    for i, f in enumerate(flags):
        run = run + 1 if f else 0
        if run >= min_run:
            out[i - min_run + 1 : i + 1] = True
    return out


def classify_record(model: KnnModel, record: WaveformRecord):
    """Per-window decisions for a record: (start_t, end_t, is_fault).

    Isolated fault windows shorter than ``cfg.min_consecutive`` are dropped.
    """
    W, start, end, _ = windows_of(record, model.cfg.window_len)
    if not len(W):
        return start, end, np.zeros(0, bool)
    is_fault, _ = classify_features(model, feature_matrix(W))
    return start, end, persistent(is_fault, model.cfg.min_consecutive)


def evaluate(model: KnnModel, dataset) -> dict[str, dict]:
    """Record-level TPR/FPR per fault type (see ``evaluation.score_record``)."""
    from .evaluation import rates, score_record

    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    guard = model.cfg.window_len / dataset[0].sample_rate_hz
    outcomes = []
    for r in dataset:
        start, end, flags = classify_record(model, r)
        outcomes.append((r.fault, score_record(start[flags], end[flags], r.labels, guard)))
    return rates(outcomes)


def select_training(records, per_class: int, rng=None) -> tuple[list, list]:
    """Split records into (train, test) with ``per_class`` training records per fault type."""
    by_class: dict[FaultType, list] = {}
    for r in records:
        by_class.setdefault(r.fault, []).append(r)
    train_set, test_set = [], []
    for ft in sorted(by_class, key=lambda f: f.value):
        recs = by_class[ft]
        order = np.arange(len(recs)) if rng is None else rng.permutation(len(recs))
        chosen = set(order[:per_class].tolist())
        for i, r in enumerate(recs):
            (train_set if i in chosen else test_set).append(r)
    return train_set, test_set
