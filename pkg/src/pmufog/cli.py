"""Command-line entry point: generate, detect, simulate, sweep, report.

Exit codes: 0 when every embedded acceptance property passes, 1 when one
fails, 2 for usage, configuration or input errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import re
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, knn, metrics, netsim, ssa
from .evaluation import rates, score_record, youden_best
from .signalgen import ConfigError, FaultType, WaveformRecord, generate_dataset, record_seed

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2

SSA_MIN_TPR, SSA_MAX_FPR = 0.95, 0.20
KNN_MIN_TPR, KNN_MAX_FPR = 0.78, 0.05


class CliError(Exception):
    pass


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    config_path: str | None
    seed: int
    out_dir: str
    version: str
    config_hash: str
    args: dict

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "manifest.json"
        _write(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _manifest(args, config_bytes: bytes | None) -> RunManifest:
    recorded = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "out")
    }
    if config_bytes is None:
        config_bytes = json.dumps(recorded, sort_keys=True).encode()
    return RunManifest(
        subcommand=args.command,
        config_path=str(args.config) if getattr(args, "config", None) else None,
        seed=args.seed,
        out_dir=str(args.out),
        version=__version__,
        config_hash=hashlib.sha256(config_bytes).hexdigest(),
        args=recorded,
    )


def _load_config(path) -> tuple[dict, bytes | None]:
    if not path:
        return {}, None
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON config ({exc})") from exc
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a JSON object")
    return doc, raw


_TIME = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(ms|s|us)?\s*$")


def parse_time(text: str) -> float:
    """Seconds from ``"5ms"``, ``"0.01s"``, ``"250us"`` or a bare number of seconds."""
    m = _TIME.match(text)
    if not m:
        raise CliError(f"cannot parse time value {text!r}")
    scale = {"ms": 1e-3, "us": 1e-6, "s": 1.0, None: 1.0}[m.group(2)]
    return float(m.group(1)) * scale


def parse_tto(text: str) -> list[float]:
    """Timeout list: ``"5ms,10ms"`` or a range ``"2ms..20ms"`` (step 2 ms) or ``"2ms..20ms:1ms"``."""
    out = []
    for part in text.split(","):
        if ".." in part:
            rng, _, step = part.partition(":")
            lo, hi = (parse_time(x) for x in rng.split(".."))
            st = parse_time(step) if step else 2e-3
            if st <= 0 or hi < lo:
                raise CliError(f"bad timeout range {part!r}")
            n = int(round((hi - lo) / st))
            out.extend(round(lo + i * st, 12) for i in range(n + 1))
        else:
            out.append(parse_time(part))
    if any(t < 0 for t in out):
        raise CliError("timeouts must be >= 0")
    return sorted(set(out))


# --------------------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    out = Path(args.out)
    _manifest(args, None).write(out)
    records = generate_dataset(args.per_fault, args.noise, args.seed)
    counts: dict[str, int] = {}
    for r in records:
        key = r.fault.short
        counts[key] = counts.get(key, 0) + 1
        r.save(out / f"{key}_{counts[key]:03d}.csv")
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


def load_dataset(path) -> list[WaveformRecord]:
    d = Path(path)
    if not d.is_dir():
        raise CliError(f"dataset directory {d} does not exist")
    files = sorted(p for p in d.glob("*.csv"))
    return [WaveformRecord.load(p) for p in files]


# --------------------------------------------------------------------------- detect


def _rates_ok(table: dict, min_tpr: float, max_fpr: float) -> bool:
    rows = [v for k, v in table.items() if k != "all"]
    return bool(rows) and all(
        (v["tpr"] is None or v["tpr"] >= min_tpr) and v["fpr"] <= max_fpr for v in rows
    )


def _rates_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "n", "tpr", "fpr"])
    for k, v in table.items():
        w.writerow([k, v["n"], "" if v["tpr"] is None else repr(v["tpr"]), repr(v["fpr"])])
    return buf.getvalue()


def cmd_detect(args) -> int:
    out = Path(args.out)
    if args.data:
        dataset = load_dataset(args.data)
    else:
        dataset = generate_dataset(args.per_fault, args.noise, args.seed)
    if not dataset:
        raise CliError("dataset is empty")
    _manifest(args, None).write(out)
    summary: dict = {"method": args.method, "n_records": len(dataset)}
    if args.method == "ssa":
        normals = [r for r in dataset if r.fault is FaultType.NONE]
        if len(normals) < args.calibration:
            raise CliError(f"SSA calibration needs {args.calibration} normal records, found {len(normals)}")
        calib = normals[: args.calibration]
        test = [r for r in dataset if not any(r is c for c in calib)]
        det = ssa.SsaDetector.calibrate(calib, ssa.SsaConfig(threshold_ratio=args.threshold))
        rows = []
        outcomes = []
        for i, r in enumerate(test):
            s = ssa.score(det.detect(r), r)
            outcomes.append((r.fault, s))
            rows.append([i, r.fault.short, int(s.tp), int(s.fp)])
        table = rates(outcomes)
        thresholds = np.geomspace(args.roc_min, args.roc_max, args.roc_points)
        pts = ssa.roc(det, test, thresholds)
        summary.update(threshold=args.threshold, baseline=det.cfg.baseline_distance, rates=table,
                       roc=[list(p) for p in pts], best=list(youden_best(pts) or ()))
        ok = _rates_ok(table, SSA_MIN_TPR, SSA_MAX_FPR)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "tpr", "fpr"])
        for p in pts:
            w.writerow([repr(x) for x in p])
        _write(out / "roc.csv", buf.getvalue())
    else:
        rng = np.random.default_rng(record_seed(args.seed, 3))
        by_size = {}
        for size in range(1, args.max_train + 1):
            train_set, test = knn.select_training(dataset, size, np.random.default_rng(rng.integers(2**63)))
            if not test:
                break
            model = knn.train(train_set, knn.KnnConfig(k=args.k))
            by_size[size] = knn.evaluate(model, test)
        train_set, test = knn.select_training(dataset, args.train_per_class)
        if not test or len({r.fault for r in train_set}) < 2:
            raise CliError(f"not enough records to train with {args.train_per_class} per class")
        model = knn.train(train_set, knn.KnnConfig(k=args.k))
        model.save(out / "knn_model.json")
        rows = []
        outcomes = []
        guard = model.cfg.window_len / test[0].sample_rate_hz
        for i, r in enumerate(test):
            start, end, flags = knn.classify_record(model, r)
            s = score_record(start[flags], end[flags], r.labels, guard)
            outcomes.append((r.fault, s))
            rows.append([i, r.fault.short, int(s.tp), int(s.fp)])
        table = rates(outcomes)
        summary.update(k=args.k, train_per_class=args.train_per_class, rates=table,
                       training_size_sweep={str(k): v for k, v in by_size.items()})
        ok = _rates_ok(table, KNN_MIN_TPR, KNN_MAX_FPR)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["record", "class", "tp", "fp"])
    w.writerows(rows)
    _write(out / "records.csv", buf.getvalue())
    _write(out / "rates.csv", _rates_csv(table))
    summary["passed"] = ok
    _write(out / "summary.json", json.dumps(metrics._clean(summary), indent=2, sort_keys=True) + "\n")
    print(_rates_csv(table), end="")
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------- simulate / sweep


_SCENARIO_FIELDS = {f.name for f in fields(netsim.Scenario)} - {"id"}


def _scenario(args, cfg: dict):
    over = dict(cfg.get("scenario", {}))
    unknown = set(over) - _SCENARIO_FIELDS
    if unknown:
        raise CliError(f"unknown scenario keys: {sorted(unknown)}")
    if args.duration is not None:
        over["duration_s"] = args.duration
    if args.detector is not None:
        over["detector"] = args.detector
    over["seed"] = args.seed
    topo_kw = {k: cfg[k] for k in ("distances_km", "lan_km", "core_link_km") if k in cfg}
    sid = args.scenario if args.scenario is not None else cfg.get("id", 1)
    return netsim.build_scenario(int(sid), **topo_kw, **over)


def _qos_modes(text: str) -> list[bool]:
    return {"on": [True], "off": [False], "both": [False, True]}[text]


def _simulate_pair(topo, scen, modes):
    marks, phasors, _ = netsim.prepare_marks(topo, scen)
    return {q: netsim.Simulator(topo, replace(scen, qos_enabled=q), marks, phasors).run() for q in modes}


def cmd_simulate(args, sweep: bool = False) -> int:
    cfg, raw = _load_config(args.config)
    out = Path(args.out)
    topo, scen = _scenario(args, cfg)
    ttos = parse_tto(args.tto) if args.tto else [float(t) for t in cfg.get("tto", [scen.pdc_timeout_s])]
    _manifest(args, raw).write(out)
    results = _simulate_pair(topo, scen, _qos_modes(args.qos))
    for q, res in results.items():
        _write(out / f"events_scenario{scen.id}_qos_{'on' if q else 'off'}.csv", res.event_log_csv())
    curves = {}
    for q, res in results.items():
        name = f"scenario{scen.id}_qos_{'on' if q else 'off'}"
        curves[name] = metrics.completeness(res, ttos, marked_only=True, label=name)
    pairs = {scen.id: (results[False], results[True])} if len(results) == 2 else {}
    summary = metrics.report(pairs, curves if (sweep or len(ttos) > 1) else {}, out, fmt=args.format)
    if not pairs:
        (res,) = results.values()
        try:
            stats = metrics.ete_delay(res, marked_only=False)
        except ValueError:
            stats = {}
        rows = [asdict(s) for s in stats.values()]
        _write(out / "delay_stats.json", json.dumps(metrics._clean(rows), indent=2, sort_keys=True) + "\n")
    for name, ok in summary["properties"].items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if summary["passed"] else EXIT_FAIL


def cmd_sweep(args) -> int:
    if not args.tto:
        args.tto = "2ms..20ms"
    return cmd_simulate(args, sweep=True)


def cmd_report(args) -> int:
    d = Path(args.logs)
    if not d.is_dir():
        raise CliError(f"log directory {d} does not exist")
    _manifest(args, None).write(Path(args.out))
    ttos = parse_tto(args.tto)
    logs: dict[int, dict[bool, str]] = {}
    for p in sorted(d.glob("events_scenario*_qos_*.csv")):
        m = re.match(r"events_scenario(\d)_qos_(on|off)\.csv$", p.name)
        if m:
            logs.setdefault(int(m.group(1)), {})[m.group(2) == "on"] = p.read_text()
    curves, tables = {}, {}
    for sid, by_q in sorted(logs.items()):
        for q, text in sorted(by_q.items()):
            name = f"scenario{sid}_qos_{'on' if q else 'off'}"
            curves[name] = metrics.completeness(text, ttos, marked_only=True, label=name)
        if len(by_q) == 2:
            try:
                a = metrics.ete_delay(by_q[False], marked_only=True, qos=False)
                b = metrics.ete_delay(by_q[True], marked_only=True, qos=True)
                tables[sid] = [{"pmu": p, "no_qos_ms": a[p].mean_ms, "qos_ms": b[p].mean_ms} for p in a if p in b]
            except ValueError:
                tables[sid] = []
    props = {f"completeness_monotone_{k}": c.is_monotone() for k, c in curves.items()}
    if tables.get(1):
        props["scenario1_qos_lowers_every_pmu"] = all(r["qos_ms"] < r["no_qos_ms"] for r in tables[1])
    summary = {"delay_tables_ms": {str(k): v for k, v in tables.items()},
               "completeness": {k: [list(p) for p in c.points] for k, c in curves.items()},
               "properties": props, "passed": all(props.values())}
    out = Path(args.out)
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "pmu", "no_qos_ms", "qos_ms"])
        for sid, rows in tables.items():
            for r in rows:
                w.writerow([sid, r["pmu"], repr(r["no_qos_ms"]), repr(r["qos_ms"])])
        _write(out / "delay_tables.csv", buf.getvalue())
    _write(out / "report.json", json.dumps(metrics._clean(summary), indent=2, sort_keys=True) + "\n")
    for name, ok in props.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if summary["passed"] else EXIT_FAIL


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pmufog", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--seed", type=int, default=0, help="64-bit root seed")
        p.add_argument("--out", type=Path, default=Path(out_default), help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="csv")

    g = sub.add_parser("generate", help="write a labelled waveform dataset")
    common(g, "dataset")
    g.add_argument("--per-fault", type=int, default=37, help="records per fault type (and normal)")
    g.add_argument("--noise", type=float, default=0.05, help="noise level relative to amplitude")
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("detect", help="evaluate the SSA or KNN detector on a dataset")
    common(d, "detect_out")
    d.add_argument("method", choices=("ssa", "knn"))
    d.add_argument("--data", type=Path, help="dataset directory from 'generate' (default: generate in memory)")
    d.add_argument("--per-fault", type=int, default=30)
    d.add_argument("--noise", type=float, default=0.05)
    d.add_argument("--threshold", type=float, default=ssa.DEFAULT_THRESHOLD_RATIO)
    d.add_argument("--calibration", type=int, default=5, help="normal records held out for SSA calibration")
    d.add_argument("--roc-min", type=float, default=2.0)
    d.add_argument("--roc-max", type=float, default=20.0)
    d.add_argument("--roc-points", type=int, default=11)
    d.add_argument("--k", type=int, default=5)
    d.add_argument("--train-per-class", type=int, default=5)
    d.add_argument("--max-train", type=int, default=7, help="largest training size in the KNN sweep")
    d.set_defaults(func=cmd_detect)

    for name, func, helptext in (("simulate", cmd_simulate, "run one scenario"),
                                 ("sweep", cmd_sweep, "completeness versus PDC timeout")):
        s = sub.add_parser(name, help=helptext)
        common(s, f"{name}_out")
        s.add_argument("--scenario", type=int, choices=(1, 2, 3))
        s.add_argument("--qos", choices=("on", "off", "both"), default="both")
        s.add_argument("--tto", help="timeouts, e.g. 5ms,10ms or 2ms..20ms[:1ms]")
        s.add_argument("--duration", type=float, help="simulated seconds")
        s.add_argument("--detector", choices=("ssa", "knn", "oracle", "none"))
        s.add_argument("--config", type=Path, help="JSON scenario file")
        s.set_defaults(func=func)

    r = sub.add_parser("report", help="rebuild tables and curves from saved event logs")
    common(r, "report_out")
    r.add_argument("--logs", type=Path, required=True, help="directory holding events_*.csv")
    r.add_argument("--tto", default="2ms..20ms")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
