"""Delay statistics, completeness curves and report files from simulation logs."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .netsim import Hop, Packet, SimResult

COMPONENTS = ("lan_cc", "wan", "lan_ss")


@dataclass(frozen=True)
class DelayStats:
    """Per-PMU ETE delay in milliseconds.

    ``mean_ms`` is the mean transit to the PDC plus the mean PDC-to-server
    transit; the component means sum to it.
    """

    pmu: str
    qos: bool
    n: int
    mean_ms: float
    median_ms: float
    p99_ms: float
    lan_cc_ms: float
    wan_ms: float
    lan_ss_ms: float
    server_ms: float
    pdc_wait_ms: float

    @property
    def components_ms(self) -> float:
        return self.lan_cc_ms + self.wan_ms + self.lan_ss_ms + self.server_ms


@dataclass(frozen=True)
class CompletenessCurve:
    label: str
    points: tuple[tuple[float, float], ...]  # (T_TO seconds, fraction)

    @property
    def ttos(self) -> list[float]:
        return [t for t, _ in self.points]

    @property
    def values(self) -> list[float]:
        return [c for _, c in self.points]

    def is_monotone(self) -> bool:
        v = self.values
        return all(b >= a for a, b in zip(v, v[1:]))


# --------------------------------------------------------------------------- event logs


def _num(s: str) -> float:
    return math.nan if s == "" else float(s)


def read_event_log(text: str) -> list[Packet]:
    """Parse the CSV written by ``netsim.event_log_csv`` back into packets."""
    packets = []
    for r in csv.DictReader(io.StringIO(text)):
        hops = []
        for h in r["hops"].split(";") if r["hops"] else []:
            link, times = h.split("@")
            ends, kind = link.split(":")
            node, nxt = ends.split(">")
            enq, start, end, arrive = (_num(x) for x in times.split("/"))
            hops.append(Hop(node, nxt, kind, enq, start, end, arrive))
        packets.append(Packet(
            id=int(r["packet_id"]),
            size_bytes=int(r["size_bytes"]),
            dscp=int(r["dscp"]),
            created_at=_num(r["created_at"]),
            pmu=r["pmu"],
            seq=int(r["seq"]),
            timestamp=_num(r["timestamp"]),
            marked=r["marked"] == "1",
            hops=hops,
            delivered_at=_num(r["delivered_at"]),
            dropped=r["dropped"] == "1",
            kind=r["kind"],
        ))
    return packets


def _packets(source) -> list[Packet]:
    if isinstance(source, SimResult):
        return source.packets + source.server_packets
    if isinstance(source, str):
        return read_event_log(source)
    return list(source)


# --------------------------------------------------------------------------- delay


def hop_components(pkt: Packet) -> dict[str, float]:
    """Seconds spent on each link kind (queueing + serialization + propagation)."""
    out = dict.fromkeys(COMPONENTS, 0.0)
    for h in pkt.hops:
        out[h.kind] += h.arrive - h.enqueued
    return out


def ete_delay(log, marked_only: bool = False, qos: bool | None = None) -> dict[str, DelayStats]:
    """Per-PMU delay statistics from an event log, SimResult or packet list.

    With ``marked_only`` only frames the fog detector marked are counted.
    """
    packets = _packets(log)
    if isinstance(log, SimResult) and qos is None:
        qos = log.scenario.qos_enabled
    frames = [p for p in packets if p.kind == "pmu" and p.delivered and (p.marked or not marked_only)]
    if not frames:
        raise ValueError("event log contains no delivered frames")
    server = [p.delay for p in packets if p.kind == "pdc" and p.delivered]
    server_s = float(np.mean(server)) if server else 0.0
    waits = {}
    if isinstance(log, SimResult):
        for rel in log.releases:
            for pmu, w in rel.waits:
                waits[(pmu, rel.timestamp)] = w
    stats = {}
    for pmu in sorted({p.pmu for p in frames}, key=_pmu_key):
        mine = [p for p in frames if p.pmu == pmu]
        d = np.array([p.delay for p in mine])
        comp = [hop_components(p) for p in mine]
        w = [waits[(pmu, p.timestamp)] for p in mine if (pmu, p.timestamp) in waits]
        stats[pmu] = DelayStats(
            pmu=pmu,
            qos=bool(qos),
            n=len(mine),
            mean_ms=(float(d.mean()) + server_s) * 1e3,
            median_ms=(float(np.median(d)) + server_s) * 1e3,
            p99_ms=(float(np.percentile(d, 99)) + server_s) * 1e3,
            lan_cc_ms=float(np.mean([c["lan_cc"] for c in comp])) * 1e3,
            wan_ms=float(np.mean([c["wan"] for c in comp])) * 1e3,
            lan_ss_ms=float(np.mean([c["lan_ss"] for c in comp])) * 1e3,
            server_ms=server_s * 1e3,
            pdc_wait_ms=float(np.mean(w)) * 1e3 if w else math.nan,
        )
    return stats


def _pmu_key(name: str):
    digits = "".join(ch for ch in name if ch.isdigit())
    return (int(digits) if digits else 0, name)


# --------------------------------------------------------------------------- completeness


def completeness(log, ttos, marked_only: bool = False, label: str = "") -> CompletenessCurve:
    """Fraction of (timestamp, PMU) slots that reach the PDC within each timeout.

    A slot counts as present when its frame arrived no later than timestamp +
    T_TO; dropped and late frames are missing.  Monotone in T_TO by
    construction.
    """
    ttos = [float(t) for t in ttos]
    if any(t < 0 or not math.isfinite(t) for t in ttos):
        raise ValueError("timeouts must be finite and >= 0")
    frames = [p for p in _packets(log) if p.kind == "pmu" and (p.marked or not marked_only)]
    lat = np.array([p.delivered_at - p.timestamp if p.delivered else math.inf for p in frames])
    points = []
    for t in sorted(ttos):
        frac = float(np.mean(lat <= t)) if len(lat) else 1.0
        points.append((t, frac))
    return CompletenessCurve(label, tuple(points))


# --------------------------------------------------------------------------- reports


def delay_table(pair, marked_only: bool = True) -> list[dict]:
    """Rows of PMU x {no QoS, QoS} mean delays (ms) for a (qos off, qos on) pair."""
    off, on = pair
    a = ete_delay(off, marked_only, qos=False)
    b = ete_delay(on, marked_only, qos=True)
    return [
        {"pmu": p, "no_qos_ms": a[p].mean_ms, "qos_ms": b[p].mean_ms}
        for p in sorted(set(a) & set(b), key=_pmu_key)
    ]


def properties(pairs: dict[int, tuple], curves: dict[str, CompletenessCurve]) -> dict[str, bool]:
    """Pass/fail of the acceptance properties checkable from these results."""
    out: dict[str, bool] = {}
    tables = {}
    for sid, pair in pairs.items():
        try:
            tables[sid] = delay_table(pair)
        except ValueError:
            continue
    if 1 in tables and tables[1]:
        out["scenario1_qos_lowers_every_pmu"] = all(r["qos_ms"] < r["no_qos_ms"] for r in tables[1])
    if 1 in tables and 2 in tables and tables[1] and tables[2]:
        t2 = {r["pmu"]: r for r in tables[2]}
        out["scenario1_slower_than_scenario2"] = all(
            r["no_qos_ms"] > t2[r["pmu"]]["no_qos_ms"] and r["qos_ms"] > t2[r["pmu"]]["qos_ms"]
            for r in tables[1] if r["pmu"] in t2
        )
    for name, c in curves.items():
        out[f"completeness_monotone_{name}"] = c.is_monotone()
    for name in curves:
        if name.endswith("_qos_off"):
            base = name[: -len("_qos_off")]
            on = curves.get(base + "_qos_on")
            if on is not None and on.ttos == curves[name].ttos:
                diff = [b - a for a, b in zip(curves[name].values, on.values)]
                out[f"completeness_qos_dominates_{base}"] = all(d >= 0 for d in diff) and any(
                    d > 0 for d in diff
                )
    return out


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def report(pairs: dict[int, tuple], curves: dict[str, CompletenessCurve], out_dir, fmt: str = "csv") -> dict:
    """Write delay tables, completeness curves and a JSON summary into ``out_dir``.

    ``pairs`` maps scenario id to a (qos off, qos on) SimResult pair and
    ``curves`` maps a label to a CompletenessCurve.  Returns the summary.
    """
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables, stats = {}, {}
    for sid, (off, on) in sorted(pairs.items()):
        try:
            tables[sid] = delay_table((off, on))
            stats[sid] = {
                "qos_off": {p: asdict(s) for p, s in ete_delay(off, qos=False).items()},
                "qos_on": {p: asdict(s) for p, s in ete_delay(on, qos=True).items()},
            }
        except ValueError:
            tables[sid], stats[sid] = [], {}
    props = properties(pairs, curves)
    summary = {
        "delay_tables_ms": {str(k): v for k, v in tables.items()},
        "all_frame_stats": {str(k): v for k, v in stats.items()},
        "completeness": {k: [list(p) for p in c.points] for k, c in sorted(curves.items())},
        "counts": {str(k): {"qos_off": off.counts, "qos_on": on.counts} for k, (off, on) in sorted(pairs.items())},
        "properties": props,
        "passed": all(props.values()),
    }
    if fmt == "csv":
        for sid, rows in tables.items():
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["pmu", "no_qos_ms", "qos_ms"])
            for r in rows:
                w.writerow([r["pmu"], _fmt(r["no_qos_ms"]), _fmt(r["qos_ms"])])
            _write_atomic(out / f"delay_scenario{sid}.csv", buf.getvalue())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["curve", "tto_s", "completeness"])
        for name, c in sorted(curves.items()):
            for t, v in c.points:
                w.writerow([name, _fmt(t), _fmt(v)])
        _write_atomic(out / "completeness.csv", buf.getvalue())
    _write_atomic(out / "summary.json", json.dumps(_clean(summary), indent=2, sort_keys=True, default=_json_default) + "\n")
    return summary


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x
