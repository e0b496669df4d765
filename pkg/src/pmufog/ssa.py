"""Singular spectrum analysis change-point detection.

A target window of ``N`` samples is embedded into an ``M x K`` Hankel matrix
whose leading ``l`` left singular vectors span the "normal" signal subspace.
Lagged vectors from a later test window are projected onto that subspace and
the summed squared residual is the change statistic.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .signalgen import ConfigError, WaveformRecord, downsample, magnitude_track

NOISELESS_THRESHOLD_RATIO = 9e6  # suited to noise-free simulated data only
DEFAULT_THRESHOLD_RATIO = 5.0


class WindowError(ValueError):
    """The series is too short for the requested window."""


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SsaConfig:
    N: int = 36
    M: int = 18
    p: int = 18
    q: int = 30
    l: int = 6
    threshold_ratio: float = DEFAULT_THRESHOLD_RATIO
    baseline_distance: float | None = None
    decimation: int = 5
    use_magnitude: bool = True
    mode: str = "streaming"

    def __post_init__(self):
        if not 1 <= self.M <= self.N:
            raise ConfigError(f"need 1 <= M <= N, got M={self.M}, N={self.N}")
        if not 0 <= self.l < self.M:
            raise ConfigError(f"need 0 <= l < M, got l={self.l}, M={self.M}")
        if not 0 <= self.p <= self.q:
            raise ConfigError(f"need 0 <= p <= q, got p={self.p}, q={self.q}")
        if not self.threshold_ratio >= 0:
            raise ConfigError(f"threshold_ratio must be >= 0, got {self.threshold_ratio}")
        if self.baseline_distance is not None and not self.baseline_distance > 0:
            raise ConfigError("baseline_distance must be positive")
        if self.decimation < 1:
            raise ConfigError(f"decimation must be >= 1, got {self.decimation}")
        if self.mode not in ("streaming", "batch"):
            raise ConfigError(f"mode must be 'streaming' or 'batch', got {self.mode!r}")

    @property
    def K(self) -> int:
        return self.N - self.M + 1

    @property
    def n_test(self) -> int:
        return self.q - self.p + 1

    @property
    def span(self) -> int:
        """Samples needed for one detection point (target start .. attributed time)."""
        return self.M + self.q + 1


@dataclass(frozen=True)
class EigenTriples:
    sigma: np.ndarray  # (d,) descending
    U: np.ndarray  # (M, d)
    V: np.ndarray  # (K, d)

    def __len__(self) -> int:
        return len(self.sigma)

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]


@dataclass
class DetectionSeries:
    index: np.ndarray  # 1-based sample index n+M+q+1 in the prepared series
    t: np.ndarray
    distance: np.ndarray  # normalised by the baseline
    raw: np.ndarray
    is_anomaly: np.ndarray
    threshold_ratio: float
    seconds_per_window: float = 0.0
    sample_rate_hz: float = 120.0
    footprint_s: float = field(default=0.0)

    def __len__(self) -> int:
        return len(self.index)

    def flagged_times(self) -> np.ndarray:
        return self.t[self.is_anomaly]


def embed(series, M: int) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    if M < 1 or len(x) < M:
        raise WindowError(f"series of length {len(x)} cannot be embedded with window {M}")
    K = len(x) - M + 1
    return np.lib.stride_tricks.sliding_window_view(x, M)[:K].T.copy()


def is_hankel(X: np.ndarray, atol: float = 0.0) -> bool:
    M, K = X.shape
    for s in range(M + K - 1):
        diag = np.array([X[i, s - i] for i in range(max(0, s - K + 1), min(M, s + 1))])
        if np.max(np.abs(diag - diag[0])) > atol:
            return False
    return True


def svd(X: np.ndarray) -> EigenTriples:
    X = np.asarray(X, dtype=float)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        M, K = X.shape
        return EigenTriples(np.zeros(0), np.zeros((M, 0)), np.zeros((K, 0)))
    tol = max(X.shape) * np.finfo(float).eps * s[0]
    d = int(np.sum(s > tol))
    return EigenTriples(sigma=s[:d], U=U[:, :d], V=Vt[:d].T)


def hankelize(X: np.ndarray) -> np.ndarray:
    """Diagonal averaging: mean of each anti-diagonal of an M x K matrix."""
    M, K = X.shape
    N = M + K - 1
    total = np.zeros(N)
    count = np.zeros(N)
    for i in range(M):
        total[i : i + K] += X[i]
        count[i : i + K] += 1
    return total / count


def reconstruct(triples: EigenTriples, I, N: int) -> np.ndarray:
    """Series for the eigentriple subset ``I`` (1-based indices)."""
    M, K = triples.shape
    if M + K - 1 != N:
        raise WindowError(f"triples of shape {M}x{K} reconstruct length {M + K - 1}, not {N}")
    idx = sorted(set(I))
    if not idx:
        return np.zeros(N)
    if idx[0] < 1 or idx[-1] > len(triples):
        raise ValueError(f"eigentriple indices must lie in 1..{len(triples)}")
    sel = np.array(idx) - 1
    X_I = (triples.U[:, sel] * triples.sigma[sel]) @ triples.V[:, sel].T
    return hankelize(X_I)


def build_target(series, n: int, cfg: SsaConfig) -> np.ndarray:
    """Leading ``l`` left singular vectors of the target matrix starting after sample n."""
    x = np.asarray(series, dtype=float)
    if n < 0 or len(x) < n + cfg.N:
        raise WindowError(f"target window needs {n + cfg.N} samples, have {len(x)}")
    triples = svd(embed(x[n : n + cfg.N], cfg.M))
    return triples.U[:, : min(cfg.l, len(triples))]


def build_test(series, n: int, cfg: SsaConfig) -> np.ndarray:
    """Test matrix whose i-th column is (x[n+p+i], ..., x[n+p+i+M-1]), 1-based."""
    x = np.asarray(series, dtype=float)
    if n < 0 or len(x) < n + cfg.M + cfg.q + 1:
        raise WindowError(f"test window needs {n + cfg.M + cfg.q + 1} samples, have {len(x)}")
    start = n + cfg.p
    return embed(x[start : start + cfg.M + cfg.q - cfg.p], cfg.M)


def distance(test: np.ndarray, U: np.ndarray) -> float:
    test = np.atleast_2d(np.asarray(test, dtype=float))
    U = np.asarray(U, dtype=float).reshape(test.shape[0], -1)
    if U.shape[0] != test.shape[0]:
        raise ValueError(f"dimension mismatch: test has {test.shape[0]} rows, U has {U.shape[0]}")
    # explicit residual, not energy minus projection: avoids cancellation near zero
    resid = test - U @ (U.T @ test)
    return float(np.sum(resid * resid))


def prepare(record: WaveformRecord, cfg: SsaConfig) -> WaveformRecord:
    """Magnitude track (optional) followed by decimation."""
    rec = magnitude_track(record) if cfg.use_magnitude else record
    return downsample(rec, cfg.decimation)


def _sliding_distances(x: np.ndarray, cfg: SsaConfig) -> np.ndarray:
    """Raw distance for every n with the target sliding alongside the test window."""
    n_pts = len(x) - cfg.span + 1
    if n_pts < 1:
        raise WindowError(f"series of length {len(x)} shorter than {cfg.span} samples")
    tgt = np.lib.stride_tricks.sliding_window_view(x, cfg.N)[:n_pts]
    X = np.lib.stride_tricks.sliding_window_view(tgt, cfg.M, axis=1)  # (n, K, M)
    U, _, _ = np.linalg.svd(np.swapaxes(X, 1, 2), full_matrices=False)
    U = U[:, :, : cfg.l]
    lag = np.lib.stride_tricks.sliding_window_view(x, cfg.M)
    tests = np.stack([lag[n + cfg.p : n + cfg.q + 1] for n in range(n_pts)])  # (n, cols, M)
    proj = np.einsum("ncm,nml->ncl", tests, U)
    resid = tests - np.einsum("ncl,nml->ncm", proj, U)
    return np.einsum("ncm,ncm->n", resid, resid)


def raw_distances(series, cfg: SsaConfig) -> np.ndarray:
    """Unnormalised distance at every detection point, target sliding with n."""
    return _sliding_distances(np.asarray(series, dtype=float), cfg)


def calibrate_baseline(records, cfg: SsaConfig) -> float:
    """Mean distance over every window of every (normal) record."""
    records = list(records)
    if not records:
        raise CalibrationError("calibration needs at least one normal record")
    values = [raw_distances(prepare(r, cfg).v, cfg) for r in records]
    baseline = float(np.mean(np.concatenate(values)))
    if baseline < 1e-15:
        warnings.warn(f"SSA baseline distance {baseline:.3g} is numerically zero", stacklevel=2)
    return baseline


def detect_series(x, cfg: SsaConfig, baseline: float, sliding: np.ndarray | None = None):
    """(raw distances, normalised distances, anomaly flags) for a prepared series.

    ``sliding`` may carry precomputed ``raw_distances(x, cfg)``; it does not
    depend on the threshold, so threshold sweeps reuse it.
    """
    x = np.asarray(x, dtype=float)
    thr = cfg.threshold_ratio
    if cfg.mode == "batch":
        U = build_target(x, 0, cfg)
        n_pts = len(x) - cfg.span + 1
        if n_pts < 1:
            raise WindowError(f"series of length {len(x)} shorter than {cfg.span} samples")
        raw = np.array([distance(build_test(x, n, cfg), U) for n in range(n_pts)])
        dist = raw / baseline
        return raw, dist, dist > thr
    raw = _sliding_distances(x, cfg) if sliding is None else sliding
    dist = raw / baseline
    flags = dist > thr
    if not flags.any():
        return raw, dist, flags
    # streaming: once a point is flagged, keep the last normal target until the
    # sliding target no longer overlaps any sample seen by a flagged test window
    raw = raw.copy()
    U = None
    hold_until = -1
    for n in range(len(raw)):
        if U is not None and n <= hold_until:
            raw[n] = distance(build_test(x, n, cfg), U)
        elif U is not None:
            U = None
        flags[n] = raw[n] / baseline > thr
        if flags[n]:
            if U is None:
                U = build_target(x, n, cfg)
            hold_until = n + cfg.M + cfg.q
    return raw, raw / baseline, flags


def detect(record: WaveformRecord, cfg: SsaConfig) -> DetectionSeries:
    if cfg.baseline_distance is None:
        raise CalibrationError("SSA detector has no calibrated baseline distance")
    prep = prepare(record, cfg)
    if len(prep) < cfg.span:
        raise WindowError(f"record has {len(prep)} prepared samples, need at least {cfg.span}")
    return _detect_prepared(prep, cfg)


def _detect_prepared(prep: WaveformRecord, cfg: SsaConfig, sliding=None) -> DetectionSeries:
    t0 = time.perf_counter()
    raw, dist, flags = detect_series(prep.v, cfg, cfg.baseline_distance, sliding)
    elapsed = time.perf_counter() - t0
    pos = np.arange(len(raw)) + cfg.M + cfg.q  # 0-based position of sample n+M+q+1
    fs = prep.sample_rate_hz
    return DetectionSeries(
        index=pos + 1,
        t=prep.t[pos],
        distance=dist,
        raw=raw,
        is_anomaly=flags,
        threshold_ratio=cfg.threshold_ratio,
        seconds_per_window=elapsed / len(raw),
        sample_rate_hz=fs,
        footprint_s=(cfg.span - 1) / fs,
    )


@dataclass(frozen=True)
class SsaDetector:
    """Calibrated detector; immutable once built."""

    cfg: SsaConfig

    @classmethod
    def calibrate(cls, normal_records, cfg: SsaConfig | None = None) -> "SsaDetector":
        cfg = cfg or SsaConfig()
        return cls(replace(cfg, baseline_distance=calibrate_baseline(normal_records, cfg)))

    def detect(self, record: WaveformRecord) -> DetectionSeries:
        return detect(record, self.cfg)

    def with_threshold(self, ratio: float) -> "SsaDetector":
        return SsaDetector(replace(self.cfg, threshold_ratio=ratio))


def score(series: DetectionSeries, record: WaveformRecord, guard_s: float | None = None):
    from .evaluation import score_record

    if guard_s is None:
        guard_s = 2.0 / record.config.nominal_freq_hz
    ends = series.t[series.is_anomaly]
    return score_record(ends - series.footprint_s, ends, record.labels, guard_s)


def evaluate(detector: SsaDetector, dataset) -> dict[str, dict]:
    """Record-level TPR/FPR per fault type."""
    from .evaluation import rates

    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    return rates([(r.fault, score(detector.detect(r), r)) for r in dataset])


def roc(detector: SsaDetector, dataset, thresholds) -> list[tuple[float, float, float]]:
    """(threshold, TPR, FPR) over all records for each threshold ratio."""
    from .evaluation import rates

    cfg = detector.cfg
    if cfg.baseline_distance is None:
        raise CalibrationError("SSA detector has no calibrated baseline distance")
    prepared = []
    for r in dataset:
        prep = prepare(r, cfg)
        sliding = raw_distances(prep.v, cfg) if cfg.mode == "streaming" else None
        prepared.append((r, prep, sliding))
    pts = []
    for thr in thresholds:
        c = replace(cfg, threshold_ratio=float(thr))
        table = rates([(r.fault, score(_detect_prepared(p, c, sl), r)) for r, p, sl in prepared])
        pts.append((float(thr), table["all"]["tpr"], table["all"]["fpr"]))
    return pts
