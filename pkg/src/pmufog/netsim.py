"""Discrete-event simulation of a wide-area PMU network with DiffServ/WFQ.

Seven PMUs stream 112-byte data frames at 30 frames/s through substation
routers, two meshed core subnets and a control-centre LAN to a PDC, which
aligns frames by timestamp and forwards each released set to a WAMC server.
Frames that the fog detector marks anomalous travel as EF; everything else
is AF23.  Every output port runs packet-by-packet WFQ with an exact GPS
virtual clock.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
from collections import deque
from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np

from . import frame_codec
from .signalgen import (
    FAULT_TYPES,
    ONSETS_S,
    ConfigError,
    FaultType,
    SignalConfig,
    WaveformRecord,
    concatenate,
    generate_dataset,
    generate_record,
    magnitude_track,
    record_seed,
)

DSCP_EF = 46
DSCP_AF23 = 22
DSCP_BE = 0
PMU_DSCPS = (DSCP_EF, DSCP_AF23)

LIGHT_SPEED_FIBER_KM_S = 2.0e5
DEFAULT_DISTANCES_KM = (50.0, 80.0, 150.0, 220.0, 380.0, 600.0, 500.0)
DEFAULT_WEIGHTS = {DSCP_EF: 4.0, DSCP_AF23: 1.0, DSCP_BE: 1.0}

# seed substreams
_GEN, _SIM, _DETECT = 1, 2, 3


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Link:
    a: str
    b: str
    bandwidth_bps: float
    length_km: float
    kind: str  # lan_cc | wan | lan_ss

    def __post_init__(self):
        if not self.bandwidth_bps > 0:
            raise ConfigError(f"link {self.a}-{self.b}: bandwidth must be > 0")
        if self.length_km < 0:
            raise ConfigError(f"link {self.a}-{self.b}: length must be >= 0")


@dataclass
class Topology:
    nodes: list[str]
    links: list[Link]
    pmus: list[str]
    pdc: str = "PDC"
    server: str = "WAMC"
    velocity_km_s: float = LIGHT_SPEED_FIBER_KM_S
    background_links: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        g = self.graph()
        if not nx.is_connected(g):
            raise ConfigError("topology graph is not connected")
        for p in self.pmus:
            if not nx.has_path(g, p, self.pdc):
                raise ConfigError(f"{p} has no path to {self.pdc}")

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        for ln in self.links:
            g.add_edge(ln.a, ln.b, link=ln, weight=ln.length_km + 1e-9)
        return g

    def route(self, src: str, dst: str) -> list[str]:
        return nx.shortest_path(self.graph(), src, dst, weight="weight")

    def link(self, a: str, b: str) -> Link:
        for ln in self.links:
            if {ln.a, ln.b} == {a, b}:
                return ln
        raise KeyError((a, b))

    def path_length_km(self, src: str, dst: str) -> float:
        path = self.route(src, dst)
        return sum(self.link(u, v).length_km for u, v in zip(path, path[1:]))


@dataclass(frozen=True)
class Scenario:
    id: int
    wan_bandwidth_bps: float
    background_bps: float = 0.0
    qos_enabled: bool = True
    detector: str = "ssa"
    duration_s: float = 20.0
    seed: int = 0
    reporting_rate: float = 30.0
    payload_bytes: int = frame_codec.FRAME_SIZE
    overhead_bytes: int = 54
    background_packet_bytes: int = 1500
    weights: tuple[tuple[int, float], ...] = tuple(DEFAULT_WEIGHTS.items())
    buffer_bytes: int = 64 * 1024
    pdc_timeout_s: float = 0.020
    processing_jitter_s: float = 0.002
    companion_streams: int = 15
    hold_s: float = 0.1
    noise_level: float = 0.05
    event_probability: float = 0.6
    event_visibility: float = 0.6
    drain_s: float = 1.0

    def __post_init__(self):
        if self.id not in (1, 2, 3):
            raise ConfigError(f"unknown scenario id {self.id}")
        if self.id == 3 and (self.wan_bandwidth_bps != 100e6 or self.background_bps != 45e6):
            raise ConfigError("scenario 3 requires 100 Mbps links with 45 Mbps background")
        if self.detector not in ("ssa", "knn", "oracle", "none"):
            raise ConfigError(f"unknown detector {self.detector!r}")
        if self.duration_s < 0:
            raise ConfigError("duration_s must be >= 0")
        if self.reporting_rate <= 0:
            raise ConfigError("reporting_rate must be > 0")
        if self.pdc_timeout_s < 0:
            raise ConfigError("pdc_timeout_s must be >= 0")
        if self.companion_streams < 0:
            raise ConfigError("companion_streams must be >= 0")

    @property
    def frame_bytes(self) -> int:
        return self.payload_bytes + self.overhead_bytes

    def weight_map(self) -> dict[int, float]:
        return dict(self.weights)


def build_scenario(
    id: int,
    distances_km=DEFAULT_DISTANCES_KM,
    lan_km: float = 1.0,
    core_link_km: float = 10.0,
    **overrides,
) -> tuple[Topology, Scenario]:
    """Topology and knobs for scenario 1 (10 Mbps), 2 (100 Mbps) or 3 (100 Mbps + 45 Mbps background)."""
    if id not in (1, 2, 3):
        raise ConfigError(f"unknown scenario id {id}")
    wan = 10e6 if id == 1 else 100e6
    bg = 45e6 if id == 3 else 0.0
    scen = Scenario(id=id, wan_bandwidth_bps=overrides.pop("wan_bandwidth_bps", wan),
                    background_bps=overrides.pop("background_bps", bg), **overrides)
    distances = [float(d) for d in distances_km]
    if len(distances) != 7:
        raise ConfigError(f"need 7 PMU distances, got {len(distances)}")
    core_km = min(core_link_km, min(distances) / 2)
    lan = 100e6
    nodes, links = [], []
    pmus = [f"PMU{i}" for i in range(1, 8)]
    core = ["C1A", "C1B", "C2A", "C2B"]
    nodes += pmus + [f"SUB{i}" for i in range(1, 8)] + core + ["CCR", "SW", "PDC", "WAMC"]
    for i, d in enumerate(distances, start=1):
        entry = "C1A" if i <= 4 else "C2A"
        links.append(Link(f"PMU{i}", f"SUB{i}", lan, lan_km, "lan_cc"))
        links.append(Link(f"SUB{i}", entry, scen.wan_bandwidth_bps, d - 2 * core_km, "wan"))
    for a, b in (("C1A", "C1B"), ("C2A", "C2B"), ("C1A", "C2A"), ("C1B", "C2B"),
                 ("C1B", "CCR"), ("C2B", "CCR")):
        links.append(Link(a, b, scen.wan_bandwidth_bps, core_km, "wan"))
    ss_km = min(lan_km, 0.1)
    for a, b in (("CCR", "SW"), ("SW", "PDC"), ("SW", "WAMC")):
        links.append(Link(a, b, lan, ss_km, "lan_ss"))
    topo = Topology(nodes=nodes, links=links, pmus=pmus)
    if bg > 0:
        seen = []
        for p in pmus:
            path = topo.route(f"SUB{p[3:]}", "CCR")
            for u, v in zip(path, path[1:]):
                if (u, v) not in seen:
                    seen.append((u, v))
        topo.background_links = seen
    return topo, scen


# --------------------------------------------------------------------------- packets


@dataclass
class Hop:
    node: str
    next: str
    kind: str
    enqueued: float
    start: float = math.nan
    end: float = math.nan
    arrive: float = math.nan

    @property
    def queueing(self) -> float:
        return self.start - self.enqueued

    @property
    def serialization(self) -> float:
        return self.end - self.start

    @property
    def propagation(self) -> float:
        return self.arrive - self.end


@dataclass
class Packet:
    id: int
    size_bytes: int
    dscp: int
    created_at: float
    pmu: str = ""
    seq: int = -1
    timestamp: float = math.nan
    marked: bool = False
    payload: bytes = b""
    route: list[str] = field(default_factory=list)
    hops: list[Hop] = field(default_factory=list)
    delivered_at: float = math.nan
    dropped: bool = False
    kind: str = "pmu"  # pmu | aux | bg | pdc

    @property
    def delivered(self) -> bool:
        return not math.isnan(self.delivered_at)

    @property
    def delay(self) -> float:
        return self.delivered_at - self.created_at


# --------------------------------------------------------------------------- WFQ


class WfqPort:
    """Packet-by-packet WFQ (PGPS) over DSCP classes with per-class tail drop."""

    def __init__(self, rate_bps: float, weights: dict[int, float], buffer_bytes: int):
        self.rate = float(rate_bps)
        self.weights = dict(weights)
        self.buffer_bytes = buffer_bytes
        self.queues: dict[int, deque] = {c: deque() for c in self.weights}
        self.backlog = {c: 0 for c in self.weights}
        self.last_finish = {c: 0.0 for c in self.weights}
        self.V = 0.0
        self.t_last = 0.0
        self.busy = False
        self._n = 0

    def _advance(self, now: float) -> None:
        t = self.t_last
        while t < now:
            active = [c for c, f in self.last_finish.items() if f > self.V]
            if not active:
                break
            W = sum(self.weights[c] for c in active)
            f_min = min(self.last_finish[c] for c in active)
            dt = (f_min - self.V) * W / self.rate
            if t + dt <= now:
                self.V = f_min
                t += dt
            else:
                self.V += (now - t) * self.rate / W
                t = now
        self.t_last = now

    def enqueue(self, pkt: Packet, now: float) -> bool:
        """Queue ``pkt``; False when the class buffer would overflow."""
        c = pkt.dscp if pkt.dscp in self.queues else DSCP_BE
        if self.backlog[c] + pkt.size_bytes > self.buffer_bytes:
            return False
        self._advance(now)
        start = max(self.V, self.last_finish[c])
        finish = start + pkt.size_bytes * 8 / self.weights[c]
        self.last_finish[c] = finish
        self._n += 1
        self.queues[c].append((finish, self._n, pkt))
        self.backlog[c] += pkt.size_bytes
        return True

    def dequeue(self):
        best = None
        for c, q in self.queues.items():
            if q and (best is None or q[0][:2] < self.queues[best][0][:2]):
                best = c
        if best is None:
            return None
        _, _, pkt = self.queues[best].popleft()
        self.backlog[best] -= pkt.size_bytes
        return pkt

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues.values())


# --------------------------------------------------------------------------- PDC


@dataclass(frozen=True)
class Release:
    timestamp: float
    release_at: float
    present: tuple[str, ...]
    waits: tuple[tuple[str, float], ...]  # per-PMU T_PDC for PMUs in time
    t_theta: float  # max T_WAN over the PMUs in time
    missing: tuple[str, ...] = ()

    @property
    def complete(self) -> bool:
        return not self.missing

    def wait_of(self, pmu: str) -> float:
        return dict(self.waits)[pmu]


class PdcState:
    """Timestamp alignment buffer; each set is released exactly once.

    A set is released when the last expected PMU arrives or when the timeout
    measured from the frame timestamp expires, whichever comes first.
    """

    def __init__(self, pmus, timeout_s: float):
        self.pmus = tuple(pmus)
        self.timeout = float(timeout_s)
        self.buffers: dict[float, dict[str, float]] = {}
        self.released: dict[float, Release] = {}
        self.late: list[tuple[str, float, float]] = []
        self.log: list[Release] = []

    def _release(self, ts: float, now: float, full: bool) -> Release:
        arr = self.buffers.pop(ts, {})
        present = tuple(p for p in self.pmus if p in arr)
        t_wan = {p: arr[p] - ts for p in present}
        t_theta = max(t_wan.values()) if t_wan else math.nan
        # a full set before the timeout waits for the slowest PMU, otherwise for the timeout
        ref = t_theta if full else self.timeout
        waits = tuple((p, max(ref - t_wan[p], 0.0)) for p in present)
        missing = tuple(p for p in self.pmus if p not in arr)
        rel = Release(ts, now, present, waits, t_theta, missing)
        self.released[ts] = rel
        self.log.append(rel)
        return rel

    def arrive(self, pmu: str, ts: float, now: float) -> Release | None:
        if pmu not in self.pmus:
            raise ProtocolError(f"unexpected PMU {pmu!r}")
        if ts in self.released:
            if pmu in self.released[ts].present or any(p == pmu and t == ts for p, t, _ in self.late):
                raise ProtocolError(f"duplicate frame ({pmu}, {ts})")
            self.late.append((pmu, ts, now))
            return None
        buf = self.buffers.setdefault(ts, {})
        if pmu in buf:
            raise ProtocolError(f"duplicate frame ({pmu}, {ts})")
        if now > ts + self.timeout:
            # timer has fired in the event loop already unless this is a standalone replay
            self.late.append((pmu, ts, now))
            return self.expire(ts, ts + self.timeout)
        buf[pmu] = now
        if len(buf) == len(self.pmus):
            return self._release(ts, now, full=True)
        return None

    def expire(self, ts: float, now: float) -> Release | None:
        if ts in self.released:
            return None
        return self._release(ts, now, full=False)


def pdc_wait(t_wan: dict[str, float], timeout: float) -> tuple[float, dict[str, float], set[str]]:
    """Closed-form alignment wait per PMU for one timestamp.

    Returns (release offset after the timestamp, {pmu: wait}, missing PMUs).
    Waits of PMUs later than the timeout are floored at 0 and those PMUs are
    counted missing.
    """
    t_theta = max(t_wan.values())
    if t_theta < timeout:
        return t_theta, {p: t_theta - t for p, t in t_wan.items()}, set()
    waits = {p: max(timeout - t, 0.0) for p, t in t_wan.items()}
    return timeout, waits, {p for p, t in t_wan.items() if t > timeout}


def pdc_align(pmus, timeout_s: float, arrivals) -> list[Release]:
    """Replay (pmu, timestamp, arrival_time) tuples through a PdcState.

    Arrivals after the timeout count as missing.  Duplicate (pmu, timestamp)
    pairs raise ProtocolError.
    """
    state = PdcState(pmus, timeout_s)
    arrivals = sorted(arrivals, key=lambda a: (a[2], a[1], a[0]))
    seen = set()
    for pmu, ts, _ in arrivals:
        if (pmu, ts) in seen:
            raise ProtocolError(f"duplicate frame ({pmu}, {ts})")
        seen.add((pmu, ts))
    timers = sorted({ts for _, ts, _ in arrivals})
    ti = 0
    for pmu, ts, t in arrivals:
        while ti < len(timers) and timers[ti] + timeout_s < t:
            state.expire(timers[ti], timers[ti] + timeout_s)
            ti += 1
        state.arrive(pmu, ts, t)
    for ts in timers:
        state.expire(ts, ts + timeout_s)
    return sorted(state.log, key=lambda r: r.timestamp)


# --------------------------------------------------------------------------- fog marking


def flag_intervals(detector, record: WaveformRecord) -> list[tuple[float, float]]:
    """Intervals during which ``detector`` reports an anomaly on ``record``.

    ``detector`` is "oracle" (ground-truth labels), "none", an SsaDetector or
    a KnnModel.  Each flag is the instant the decision becomes available.
    """
    from .knn import KnnModel, classify_record
    from .ssa import SsaDetector

    if detector == "oracle":
        return [(a, b) for a, b, _ in record.labels]
    if detector is None or detector == "none":
        return []
    if isinstance(detector, SsaDetector):
        t = detector.detect(record).flagged_times()
        return [(x, x) for x in t.tolist()]
    if isinstance(detector, KnnModel):
        _, end, flags = classify_record(detector, record)
        return [(x, x) for x in end[flags].tolist()]
    raise TypeError(f"unsupported detector {detector!r}")


def fog_mark(detector, record: WaveformRecord, frame_times, hold_s: float = 0.1) -> np.ndarray:
    """DSCP per frame: EF from each detection until ``hold_s`` after it, else AF23."""
    frame_times = np.asarray(frame_times, dtype=float)
    ef = np.zeros(len(frame_times), bool)
    tol = 1e-9
    for a, b in flag_intervals(detector, record):
        ef |= (frame_times >= a - tol) & (frame_times <= b + hold_s + tol)
    return np.where(ef, DSCP_EF, DSCP_AF23)


def pmu_streams(scen: Scenario, pmus) -> dict[str, WaveformRecord]:
    """Per-PMU voltage streams built from 2 s segments sharing system events.

    Each segment carries a system event with probability ``event_probability``;
    each PMU sees it (with its own severity draw) with probability
    ``event_visibility``.  The first event of a run is wide-area and seen by
    every PMU, so each PMU produces data of interest.
    """
    seg_s = 2.0
    n_seg = max(1, math.ceil(scen.duration_s / seg_s))
    rng = np.random.default_rng(record_seed(scen.seed, _GEN))
    streams: dict[str, list] = {p: [] for p in pmus}
    first_event = True
    for s in range(n_seg):
        event = rng.random() < scen.event_probability
        fault = FAULT_TYPES[rng.integers(len(FAULT_TYPES))]
        onset = ONSETS_S[rng.integers(len(ONSETS_S))]
        for i, p in enumerate(pmus):
            # draw before the override so the substream is consumed identically
            sees = event and (rng.random() < scen.event_visibility or first_event)
            cfg = SignalConfig(
                noise_level=scen.noise_level,
                fault_onset_s=onset,
                severity=float(rng.uniform(0.75, 1.25)),
                rng_seed=record_seed(scen.seed, _GEN, s, i),
            )
            streams[p].append(generate_record(cfg, fault if sees else FaultType.NONE))
        first_event = first_event and not event
    return {p: concatenate(segs) for p, segs in streams.items()}


def build_detector(scen: Scenario):
    """Calibrate/train the scenario's detector on independent records."""
    from .knn import select_training, train
    from .ssa import SsaDetector

    if scen.detector in ("oracle", "none"):
        return scen.detector
    seed = record_seed(scen.seed, _DETECT)
    data = generate_dataset(5, scen.noise_level, seed)
    if scen.detector == "ssa":
        return SsaDetector.calibrate([r for r in data if r.fault is FaultType.NONE])
    train_set, _ = select_training(data, 5)
    return train(train_set)


# --------------------------------------------------------------------------- event loop


@dataclass
class SimResult:
    scenario: Scenario
    packets: list[Packet]  # PMU data packets in emission order
    releases: list[Release]
    server_packets: list[Packet]
    counts: dict[str, int]
    late: list[tuple[str, float, float]]

    def event_log_csv(self) -> str:
        return event_log_csv(self.packets + self.server_packets)


_PREFIX = {"pmu": "", "aux": "aux_", "bg": "bg_", "pdc": "pdc_"}


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def event_log_csv(packets) -> str:
    """CSV with one row per packet; hops are ``node>next:kind@enqueue/start/end/arrive``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["packet_id", "kind", "pmu", "seq", "timestamp", "size_bytes", "dscp", "marked",
                "created_at", "delivered_at", "dropped", "hops"])
    for p in packets:
        hops = ";".join(
            f"{h.node}>{h.next}:{h.kind}@{_fmt(h.enqueued)}/{_fmt(h.start)}/{_fmt(h.end)}/{_fmt(h.arrive)}"
            for h in p.hops
        )
        w.writerow([p.id, p.kind, p.pmu, p.seq, _fmt(p.timestamp), p.size_bytes, p.dscp, int(p.marked),
                    _fmt(p.created_at), _fmt(p.delivered_at), int(p.dropped), hops])
    return buf.getvalue()


class Simulator:
    def __init__(self, topo: Topology, scen: Scenario, marks: dict[str, np.ndarray] | None = None,
                 phasors: dict[str, np.ndarray] | None = None):
        self.topo = topo
        self.scen = scen
        self.marks = marks or {}
        self.phasors = phasors or {}
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self._pid = 0
        self.ports: dict[tuple[str, str], WfqPort] = {}
        self.links: dict[tuple[str, str], Link] = {}
        for ln in topo.links:
            for u, v in ((ln.a, ln.b), (ln.b, ln.a)):
                self.links[(u, v)] = ln
                self.ports[(u, v)] = WfqPort(ln.bandwidth_bps, scen.weight_map(), scen.buffer_bytes)
        g = topo.graph()
        self.routes = {p: nx.shortest_path(g, p, topo.pdc, weight="weight") for p in topo.pmus}
        self.server_route = (
            nx.shortest_path(g, topo.pdc, topo.server, weight="weight") if topo.server in g else None
        )
        self.pdc = PdcState(topo.pmus, scen.pdc_timeout_s)
        self.packets: list[Packet] = []
        self.server_packets: list[Packet] = []
        self.counts = {f"{pre}{what}": 0 for pre in ("", "aux_", "bg_", "pdc_")
                       for what in ("emitted", "delivered", "dropped")}
        self.rng = np.random.default_rng(record_seed(scen.seed, _SIM))

    def _push(self, t: float, kind: str, *args) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, args))

    def _new_packet(self, **kw) -> Packet:
        self._pid += 1
        return Packet(id=self._pid, **kw)

    # events -----------------------------------------------------------------

    def _schedule_pmu_frames(self) -> None:
        sc = self.scen
        n_frames = int(math.floor(sc.duration_s * sc.reporting_rate + 1e-9))
        for i, pmu in enumerate(self.topo.pmus):
            marks = self.marks.get(pmu)
            jitter = self.rng.uniform(0.0, sc.processing_jitter_s, (n_frames, 1 + sc.companion_streams))
            for k in range(n_frames):
                ts = k / sc.reporting_rate
                marked = bool(marks is not None and marks[k] == DSCP_EF)
                dscp = DSCP_EF if (marked and sc.qos_enabled) else DSCP_AF23
                self._push(ts + jitter[k, 0], "emit", pmu, i, k, ts, marked, dscp)
                for j in range(1, 1 + sc.companion_streams):
                    self._push(ts + jitter[k, j], "aux", pmu, ts)

    def _frame_payload(self, idx: int, seq: int, ts: float, marked: bool) -> bytes:
        soc, frac = frame_codec.split_timestamp(ts)
        mags = self.phasors.get(self.topo.pmus[idx])
        mag = float(mags[seq]) if mags is not None and seq < len(mags) else 1.0
        ph = (complex(mag, 0.0),) + (0j,) * (frame_codec.N_PHASORS - 1)
        fr = frame_codec.DataFrame(id_code=idx + 1, soc=soc, fracsec=frac, phasors=ph)
        return frame_codec.encode(fr.with_anomaly(marked))

    def _emit(self, pmu, idx, seq, ts, marked, dscp) -> None:
        pkt = self._new_packet(
            size_bytes=self.scen.frame_bytes, dscp=dscp, created_at=self.now, pmu=pmu, seq=seq,
            timestamp=ts, marked=marked, payload=self._frame_payload(idx, seq, ts, marked),
            route=self.routes[pmu],
        )
        self.packets.append(pkt)
        self.counts["emitted"] += 1
        self._push(ts + self.scen.pdc_timeout_s, "timeout", ts)
        self._arrive(pkt, pmu)

    def _aux(self, pmu, ts) -> None:
        pkt = self._new_packet(size_bytes=self.scen.frame_bytes, dscp=DSCP_AF23, created_at=self.now,
                               pmu=pmu, timestamp=ts, route=self.routes[pmu], kind="aux")
        self.counts["aux_emitted"] += 1
        self._arrive(pkt, pmu)

    def _bg(self, u, v, interval) -> None:
        if self.now >= self.scen.duration_s:
            return
        pkt = self._new_packet(size_bytes=self.scen.background_packet_bytes, dscp=DSCP_BE,
                               created_at=self.now, route=[u, v], kind="bg")
        self.counts["bg_emitted"] += 1
        self._arrive(pkt, u)
        self._push(self.now + interval, "bg", u, v, interval)

    def _arrive(self, pkt: Packet, node: str) -> None:
        route = pkt.route
        if node == route[-1]:
            pkt.delivered_at = self.now
            self._deliver(pkt)
            return
        nxt = route[route.index(node) + 1]
        port = self.ports[(node, nxt)]
        hop = Hop(node, nxt, self.links[(node, nxt)].kind, self.now)
        if not port.enqueue(pkt, self.now):
            pkt.dropped = True
            self.counts[_PREFIX[pkt.kind] + "dropped"] += 1
            pkt.hops.append(hop)
            return
        pkt.hops.append(hop)
        if not port.busy:
            self._start(node, nxt)

    def _start(self, u: str, v: str) -> None:
        port = self.ports[(u, v)]
        pkt = port.dequeue()
        if pkt is None:
            port.busy = False
            return
        port.busy = True
        ln = self.links[(u, v)]
        hop = pkt.hops[-1]
        hop.start = self.now
        hop.end = self.now + pkt.size_bytes * 8 / ln.bandwidth_bps
        hop.arrive = hop.end + ln.length_km / self.topo.velocity_km_s
        self._push(hop.end, "txdone", u, v)
        self._push(hop.arrive, "arrive", pkt, v)

    def _deliver(self, pkt: Packet) -> None:
        if pkt.kind != "pmu":
            self.counts[_PREFIX[pkt.kind] + "delivered"] += 1
            return
        self.counts["delivered"] += 1
        frame = frame_codec.decode(pkt.payload)
        if frame.id_code != self.topo.pmus.index(pkt.pmu) + 1:
            raise ProtocolError(f"frame IDCODE {frame.id_code} does not match {pkt.pmu}")
        rel = self.pdc.arrive(pkt.pmu, pkt.timestamp, self.now)
        if rel is not None:
            self._forward(rel)

    def _timeout(self, ts: float) -> None:
        rel = self.pdc.expire(ts, self.now)
        if rel is not None:
            self._forward(rel)

    def _forward(self, rel: Release) -> None:
        if self.server_route is None:
            return
        size = len(rel.present) * self.scen.payload_bytes + self.scen.overhead_bytes
        pkt = self._new_packet(size_bytes=max(size, self.scen.overhead_bytes), dscp=DSCP_AF23,
                               created_at=self.now, timestamp=rel.timestamp,
                               route=self.server_route, kind="pdc")
        self.server_packets.append(pkt)
        self.counts["pdc_emitted"] += 1
        self._arrive(pkt, self.topo.pdc)

    # main loop --------------------------------------------------------------

    def run(self) -> SimResult:
        sc = self.scen
        self._schedule_pmu_frames()
        if sc.background_bps > 0 and sc.duration_s > 0:
            interval = sc.background_packet_bytes * 8 / sc.background_bps
            for u, v in self.topo.background_links:
                self._push(float(self.rng.uniform(0, interval)), "bg", u, v, interval)
        horizon = sc.duration_s + sc.drain_s
        while self._heap:
            t, _, kind, args = self._heap[0]
            if t > horizon:
                break
            heapq.heappop(self._heap)
            self.now = t
            if kind == "arrive":
                self._arrive(*args)
            elif kind == "txdone":
                self._start(*args)
            elif kind == "emit":
                self._emit(*args)
            elif kind == "aux":
                self._aux(*args)
            elif kind == "bg":
                self._bg(*args)
            elif kind == "timeout":
                self._timeout(*args)
        counts = dict(self.counts)
        for pre in ("", "aux_", "bg_", "pdc_"):
            counts[pre + "in_flight"] = (
                counts[pre + "emitted"] - counts[pre + "delivered"] - counts[pre + "dropped"]
            )
        return SimResult(sc, self.packets, sorted(self.pdc.log, key=lambda r: r.timestamp),
                         self.server_packets, counts, list(self.pdc.late))


def frame_times(scen: Scenario) -> np.ndarray:
    n = int(math.floor(scen.duration_s * scen.reporting_rate + 1e-9))
    return np.arange(n) / scen.reporting_rate


def prepare_marks(topo: Topology, scen: Scenario, detector=None):
    """Fog marking and reported magnitudes for every PMU's frame stream."""
    ft = frame_times(scen)
    if len(ft) == 0:
        return {}, {}, {}
    streams = pmu_streams(scen, topo.pmus)
    detector = build_detector(scen) if detector is None else detector
    marks, phasors = {}, {}
    for p, rec in streams.items():
        marks[p] = fog_mark(detector, rec, ft, scen.hold_s)
        mag = magnitude_track(rec)
        idx = np.minimum(np.round(ft * rec.sample_rate_hz).astype(int), len(rec) - 1)
        phasors[p] = mag.v[idx].astype(np.float32)
    return marks, phasors, streams


def run(topo: Topology, scen: Scenario, marks=None, phasors=None) -> SimResult:
    """Simulate one scenario.  Marks are derived from the scenario's detector unless given."""
    if marks is None:
        marks, phasors, _ = prepare_marks(topo, scen)
    return Simulator(topo, scen, marks, phasors).run()


def run_pair(topo: Topology, scen: Scenario, detector=None) -> tuple[SimResult, SimResult]:
    """(qos off, qos on) runs sharing identical streams, marks and jitter."""
    marks, phasors, _ = prepare_marks(topo, scen, detector)
    off = Simulator(topo, replace(scen, qos_enabled=False), marks, phasors).run()
    on = Simulator(topo, replace(scen, qos_enabled=True), marks, phasors).run()
    return off, on
