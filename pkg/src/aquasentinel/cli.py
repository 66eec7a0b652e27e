"""Command-line entry point: ``aquasentinel <subcommand> ...``.

Exit codes: 0 success, 1 input error, 2 runtime failure (for ``evaluate``:
at least one case failed, the batch still completes).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .augmentation import augment_series, channel_scales
from .harness import (
    KINDS,
    ExperimentConfig,
    config_from_dict,
    demand_patterns,
    detect_stream,
    evaluate,
    load_config,
    run_batch,
    select_scenarios,
)
from .hydraulics import (
    CHANNELS,
    LeakScenario,
    TimeSeries,
    read_states_csv,
    simulate,
    timeseries_from_csv,
)
from .localization import LocalizationResult, coanomalous, localize
from .network import Network, NetworkError, bundled_network, read_network
from .placement import PlacementConfig, score_nodes, select_sensors
from .reporting import HttpTextGenerator, TemplateError, render_report
from .rtca import AnomalyEvent

log = logging.getLogger("aquasentinel")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class InputError(Exception):
    pass


# -- helpers ---------------------------------------------------------------


def _network(args, cfg: ExperimentConfig) -> Network:
    path = args.network or cfg.network_path
    return bundled_network() if path is None else read_network(path)


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _series(path: str, net: Network, dt: float = 600.0):
    return timeseries_from_csv(_read_text(path), net.node_ids, dt)


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)
    return path


def _baseline(net: Network, cfg: ExperimentConfig, seed_offset: int = 0):
    seq = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(7, seed_offset))
    return simulate(net, demand_patterns(net, cfg.demand, seq), cfg.steps)


def _events_from_json(text: str) -> list[AnomalyEvent]:
    doc = json.loads(text)
    if isinstance(doc, dict):
        doc = doc.get("events", [])
    return [AnomalyEvent(**e) for e in doc]


# -- subcommands -----------------------------------------------------------


def cmd_simulate(args, cfg, doc):
    net = _network(args, cfg)
    scenario = LeakScenario.from_json(_read_text(args.scenario)) if args.scenario else None
    steps = args.steps or cfg.steps
    seq = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(7, 0))
    series = simulate(net, demand_patterns(net, cfg.demand, seq), steps, scenario)
    _write(args.out, "states.csv", series.to_csv())
    return EXIT_OK


def cmd_place_sensors(args, cfg, doc):
    net = _network(args, cfg)
    baseline = _series(args.baseline, net) if args.baseline else _baseline(net, cfg)
    pcfg = cfg.placement or PlacementConfig.for_network(net)
    scores = score_nodes(net, baseline, pcfg)
    placement = select_sensors(scores, net, pcfg)
    doc_out = {
        "selected": list(placement.selected),
        "requested": placement.requested,
        "short": placement.short,
        "scores": [asdict(s) for s in scores],
    }
    _write(args.out, "placement.json", json.dumps(doc_out, indent=2))
    return EXIT_OK


def cmd_augment(args, cfg, doc):
    net = _network(args, cfg)
    rows_by_step = read_states_csv(_read_text(args.readings), net.node_ids)
    steps = sorted(rows_by_step)
    if not steps:
        raise InputError("readings file has no rows")
    if steps != list(range(len(steps))):
        raise InputError("reading steps must be contiguous from 0")
    sensors = sorted({v for frame in rows_by_step.values() for v in frame}, key=net.index)
    data = np.full((len(steps), len(net.nodes), 3), np.nan)
    for t in steps:
        for v, state in rows_by_step[t].items():
            data[t, net.index(v)] = state
    sparse = TimeSeries(net.node_ids, data)
    rows = [net.index(v) for v in sensors]
    acfg = replace(cfg.augmentation, channel_scale=channel_scales(data[:, rows]))
    demands = np.tile([n.base_demand for n in net.nodes], (len(steps), 1))
    full, frames = augment_series(net, sparse, sensors, demands, acfg)
    prov = np.array([[f.provenance[v] for v in net.node_ids] for f in frames])
    _write(args.out, "augmented.csv", full.to_csv(extra={"provenance": prov}))
    if not all(f.converged for f in frames):
        log.warning("%d frame(s) did not converge", sum(not f.converged for f in frames))
    return EXIT_OK


def _train_and_observed(args, net):
    if not args.observed:
        raise InputError("--observed is required")
    observed = _series(args.observed, net)
    train = _series(args.train, net) if args.train else None
    if train is None:
        raise InputError("--train is required (leak-free series to fit the forecaster)")
    return train, observed


def cmd_forecast(args, cfg, doc):
    net = _network(args, cfg)
    train, observed = _train_and_observed(args, net)
    predicted, _, _ = detect_stream(
        net, train.data, observed.data, cfg.gate, cfg.rtca, cfg.demand.period
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "node_id", "channel", "predicted", "actual"])
    for t in range(len(observed)):
        for i, v in enumerate(net.node_ids):
            for ch, name in enumerate(CHANNELS):
                w.writerow([t, v, name, repr(float(predicted[t, i, ch])),
                            repr(float(observed.data[t, i, ch]))])
    _write(args.out, "forecast.csv", buf.getvalue())
    return EXIT_OK


def cmd_detect(args, cfg, doc):
    net = _network(args, cfg)
    train, observed = _train_and_observed(args, net)
    _, events, records = detect_stream(
        net, train.data, observed.data, cfg.gate, cfg.rtca, cfg.demand.period, keep_records=True
    )
    _write(args.out, "events.json", json.dumps([e.to_dict() for e in events], indent=2))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "node_id", "e_rt", "e_c", "tau_rt", "tau_c", "status"])
    for recs in records:
        for v, r in zip(net.node_ids, recs):
            w.writerow([r.t, v, repr(r.e_rt), repr(r.e_c), repr(r.tau_rt), repr(r.tau_c),
                        r.status.value])
    _write(args.out, "status.csv", buf.getvalue())
    return EXIT_OK


def cmd_localize(args, cfg, doc):
    net = _network(args, cfg)
    events = _events_from_json(_read_text(args.events))
    if not events:
        result = localize(net, [])
    else:
        t0 = min(e.detected_at for e in events)
        anomalous = coanomalous(events, t0, cfg.rtca.t_persist)
        flows = None
        if args.states:
            series = _series(args.states, net)
            t = min(t0, len(series) - 1)
            flows = dict(zip(net.node_ids, series.data[t, :, 0]))
        result = localize(net, anomalous, flows)
    _write(args.out, "localization.json", json.dumps(result.to_dict(), indent=2))
    return EXIT_OK


def cmd_report(args, cfg, doc):
    net = _network(args, cfg)
    events = _events_from_json(_read_text(args.events))
    loc = None
    if args.localization:
        loc = LocalizationResult.from_dict(json.loads(_read_text(args.localization)))
    template = _read_text(args.template) if args.template else None
    report_doc = doc.get("report", {})
    endpoint = args.endpoint or report_doc.get("endpoint")
    client = None
    if endpoint:
        client = HttpTextGenerator(endpoint, args.model or report_doc.get("model", "default"))
    report = render_report(events, loc, net, template, client=client)
    _write(args.out, "report.txt", report.text)
    meta = {
        "inputs_digest": report.inputs_digest,
        "items": [{**asdict(it), "severity": it.severity.value} for it in report.items],
    }
    _write(args.out, "report.json", json.dumps(meta, indent=2))
    return EXIT_OK


def cmd_evaluate(args, cfg, doc):
    net = cfg.network()
    if args.sparse:
        cfg = replace(cfg, sparse=True)
    if args.kinds:
        cfg = replace(cfg, kinds=tuple(args.kinds))
    scenarios = select_scenarios(cfg, net)
    cases = run_batch(cfg, scenarios, workers=args.workers)
    report = evaluate(cases)

    buf = io.StringIO()
    rows = [c.row() for c in cases]
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write(args.out, "cases.csv", buf.getvalue())
    _write(args.out, "summary.json", json.dumps(report.to_dict(), indent=2))

    for k, s in report.per_kind.items():
        delay = "-" if s.mean_delay is None else f"{s.mean_delay:.2f}"
        print(f"{k:<16} detected {s.detected}/{s.cases}  mean delay {delay}  "
              f"within 10: {s.within_10_rate:.2%}")
    print(f"overall          detected {report.detected}/{report.cases}  "
          f"within 10 (of detected): {report.within_10_of_detected:.2%}")
    if report.failed_cases:
        log.error("%d case(s) failed; see cases.csv", report.failed_cases)
        return EXIT_RUNTIME
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--network", help="network JSON (default: bundled 23-node network)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="aquasentinel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a time series")
    s.add_argument("--scenario", help="leak scenario JSON")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("place-sensors", parents=[common], help="score nodes and select sensors")
    s.add_argument("--baseline", help="baseline states CSV (default: simulate one)")
    s.set_defaults(func=cmd_place_sensors)

    s = sub.add_parser("augment", parents=[common], help="fill unmonitored nodes from readings")
    s.add_argument("--readings", required=True, help="sparse readings CSV")
    s.set_defaults(func=cmd_augment)

    for name, func, helptext in (
        ("forecast", cmd_forecast, "one-step forecasts for an observed series"),
        ("detect", cmd_detect, "run the RTCA detectors over an observed series"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--train", help="leak-free states CSV used to fit the forecaster")
        s.add_argument("--observed", help="states CSV to forecast/monitor")
        s.set_defaults(func=func)

    s = sub.add_parser("localize", parents=[common], help="localize confirmed anomalies")
    s.add_argument("--events", required=True, help="events JSON from `detect`")
    s.add_argument("--states", help="observed states CSV (flows rank candidates)")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("report", parents=[common], help="render a maintenance report")
    s.add_argument("--events", required=True)
    s.add_argument("--localization", help="localization JSON from `localize`")
    s.add_argument("--template")
    s.add_argument("--endpoint", help="text-generation endpoint URL (optional)")
    s.add_argument("--model")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("evaluate", parents=[common], help="run the leak-scenario batch")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--sparse", action="store_true", help="sparse sensors + augmentation")
    s.add_argument("--kinds", nargs="+", choices=[k.value for k in KINDS])
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.config:
            cfg, doc = load_config(args.config)
        else:
            cfg, doc = config_from_dict({}), {}
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.network:
            cfg = replace(cfg, network_path=args.network)
        return args.func(args, cfg, doc)
    except (InputError, NetworkError, TemplateError, ValueError, KeyError,
            json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
