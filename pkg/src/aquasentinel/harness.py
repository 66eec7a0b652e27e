"""Seeded leak-scenario experiments and their evaluation.

A case simulates a leak-free training week and an evaluation week with
one leak, fits the forecaster on the training week, streams the
evaluation week through the forecaster and the RTCA detectors, and
localizes on the first confirmation after the leak starts.
"""

from __future__ import annotations

import logging
import math
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .augmentation import AugmentationConfig, augment_series, channel_scales
from .forecasting import MixtureOfExperts
from .hydraulics import (
    CHANNELS,
    FLOW,
    MAGNITUDE_BANDS,
    RAMP_END_MAX,
    RAMP_START_BAND,
    DemandPattern,
    LeakKind,
    LeakScenario,
    Ramp,
    TimeSeries,
    simulate,
)
from .localization import LocalizationResult, coanomalous, localize
from .network import Network, bundled_network, read_network
from .placement import PlacementConfig, score_nodes, select_sensors
from .rtca import AnomalyEvent, NetworkDetector, RtcaConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

KINDS = tuple(LeakKind)
DEFAULT_START_STEP = 432  # day 3 at 10-minute steps
RAMP_STEPS = 144


@dataclass(frozen=True)
class DemandConfig:
    diurnal_amplitude: float = 0.3
    period: int = 144
    noise_std: float = 1e-4


@dataclass(frozen=True)
class GateConfig:
    lambda_gate: float = 5.0
    ema_beta: float = 0.1
    window: int = 12
    experts: tuple[str, ...] = ("diurnal_profile", "seasonal_naive")


@dataclass(frozen=True)
class ExperimentConfig:
    network_path: str | None = None
    steps: int = 1008
    seed: int = 0
    start_step: int = DEFAULT_START_STEP
    sparse: bool = False
    kinds: tuple[str, ...] | None = None
    demand: DemandConfig = field(default_factory=DemandConfig)
    rtca: RtcaConfig = field(default_factory=RtcaConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    augmentation: AugmentationConfig = field(
        default_factory=lambda: AugmentationConfig(lambda_smooth=1e-3, max_iters=200)
    )
    placement: PlacementConfig | None = None

    def __post_init__(self):
        if self.steps < self.rtca.warmup_steps + self.rtca.t_persist:
            raise ValueError("steps must cover the RTCA warm-up plus the persistence window")

    def network(self) -> Network:
        return _load_network(self.network_path)


_NET_CACHE: dict[str | None, Network] = {}


def _load_network(path: str | None) -> Network:
    if path not in _NET_CACHE:
        _NET_CACHE[path] = bundled_network() if path is None else read_network(path)
    return _NET_CACHE[path]


# -- config file -----------------------------------------------------------


def _build(cls, table: Mapping[str, Any] | None, where: str):
    table = dict(table or {})
    names = {f.name for f in fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ValueError(f"[{where}] unknown keys: {sorted(unknown)}")
    for k, v in table.items():
        if isinstance(v, list):
            table[k] = tuple(v)
    return cls(**table)


def config_from_dict(doc: Mapping[str, Any]) -> ExperimentConfig:
    known = {"experiment", "demand", "rtca", "gate", "augmentation", "placement", "report"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    exp = dict(doc.get("experiment", {}))
    if "network" in exp:
        exp["network_path"] = exp.pop("network")
    if "kinds" in exp:
        exp["kinds"] = tuple(LeakKind(k).value for k in exp["kinds"])
    return ExperimentConfig(
        **exp,
        demand=_build(DemandConfig, doc.get("demand"), "demand"),
        rtca=_build(RtcaConfig, doc.get("rtca"), "rtca"),
        gate=_build(GateConfig, doc.get("gate"), "gate"),
        augmentation=_build(
            AugmentationConfig,
            {"lambda_smooth": 1e-3, "max_iters": 200, **doc.get("augmentation", {})},
            "augmentation",
        ),
        placement=_build(PlacementConfig, doc["placement"], "placement")
        if "placement" in doc else None,
    )


def load_config(path: str | Path) -> tuple[ExperimentConfig, dict]:
    """Read a TOML config; returns the experiment config and the raw document."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return config_from_dict(doc), doc


# -- seeds and scenarios ---------------------------------------------------


def _seq(root: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=root, spawn_key=tuple(int(k) for k in key))


def _scenario_key(scenario: LeakScenario | None, control_index: int = 0) -> tuple[int, int]:
    if scenario is None:
        return (0xC0FFEE, control_index)
    return (zlib.crc32(scenario.conduit_id.encode()), KINDS.index(scenario.kind) + 1)


def generate_scenarios(
    net: Network, seed: int, start_step: int = DEFAULT_START_STEP
) -> list[LeakScenario]:
    """One scenario per (conduit, leak kind), magnitudes drawn per case."""
    out = []
    for c in net.conduits:
        for kind in KINDS:
            rng = np.random.default_rng(_seq(seed, 1, zlib.crc32(c.id.encode()), KINDS.index(kind)))
            if kind is LeakKind.DYNAMIC_RAMP:
                lo, hi = RAMP_START_BAND
                ramp = Ramp(float(rng.uniform(lo, hi)), RAMP_END_MAX, RAMP_STEPS)
                out.append(LeakScenario(c.id, kind, RAMP_END_MAX, start_step, ramp))
            else:
                lo, hi = MAGNITUDE_BANDS[kind]
                out.append(LeakScenario(c.id, kind, float(rng.uniform(lo, hi)), start_step))
    return out


# -- single case -----------------------------------------------------------


@dataclass(frozen=True)
class CaseResult:
    scenario: LeakScenario | None
    detected: bool
    detection_delay: int
    within_10: bool
    localization_hit: str | None  # "exact" | "adjacent" | "miss" | None when undetected
    false_alarms_pre_leak: int
    first_node: str | None = None
    segments: tuple[str, ...] = ()
    n_events: int = 0
    error: str | None = None

    @property
    def kind(self) -> str:
        return self.scenario.kind.value if self.scenario else "Control"

    def row(self) -> dict:
        s = self.scenario
        return {
            "conduit_id": s.conduit_id if s else "",
            "kind": self.kind,
            "magnitude_fraction": s.magnitude_fraction if s else 0.0,
            "start_step": s.start_step if s else -1,
            "detected": int(self.detected),
            "detection_delay": self.detection_delay,
            "within_10": int(self.within_10),
            "localization_hit": self.localization_hit or "",
            "false_alarms_pre_leak": self.false_alarms_pre_leak,
            "first_node": self.first_node or "",
            "segments": ";".join(self.segments),
            "n_events": self.n_events,
            "error": self.error or "",
        }


def demand_patterns(net: Network, cfg: DemandConfig, seq: np.random.SeedSequence):
    seeds = seq.generate_state(len(net.nodes), dtype=np.uint32)
    return {
        n.id: DemandPattern(
            base=n.base_demand,
            diurnal_amplitude=cfg.diurnal_amplitude,
            period=cfg.period,
            noise_std=cfg.noise_std,
            seed=int(s),
        )
        for n, s in zip(net.nodes, seeds)
    }


def expected_demands(net: Network, patterns: Mapping[str, DemandPattern], steps: int, start: int):
    return np.column_stack([patterns[n.id].expected(steps, start) for n in net.nodes])


@dataclass
class Trace:
    """Full per-step output of one pipeline run (kept for CLI and debugging)."""

    train: TimeSeries
    observed: TimeSeries
    predicted: np.ndarray  # (steps, n, 3)
    events: list[AnomalyEvent]
    status: list  # per step list of StepRecord
    sensors: tuple[str, ...] | None = None


def run_pipeline(
    cfg: ExperimentConfig,
    scenario: LeakScenario | None,
    net: Network | None = None,
    control_index: int = 0,
    keep_records: bool = False,
) -> Trace:
    net = net or cfg.network()
    case_seq = _seq(cfg.seed, 2, *_scenario_key(scenario, control_index))
    train_seq, eval_seq = case_seq.spawn(2)
    steps = cfg.steps
    train_patterns = demand_patterns(net, cfg.demand, train_seq)
    eval_patterns = demand_patterns(net, cfg.demand, eval_seq)

    train = simulate(net, train_patterns, steps)
    observed = simulate(net, eval_patterns, steps, scenario, start=steps)

    sensors = None
    if cfg.sparse:
        pcfg = cfg.placement or PlacementConfig.for_network(net)
        sensors = select_sensors(score_nodes(net, train, pcfg), net, pcfg).selected
        rows = [net.index(v) for v in sensors]
        acfg = replace(cfg.augmentation, channel_scale=channel_scales(train.data[:, rows]))
        train, _ = augment_series(
            net, train, sensors, expected_demands(net, train_patterns, steps, 0), acfg
        )
        observed, _ = augment_series(
            net, observed, sensors, expected_demands(net, eval_patterns, steps, steps), acfg
        )

    predicted, events, records = detect_stream(
        net, train.data, observed.data, cfg.gate, cfg.rtca, cfg.demand.period, keep_records
    )
    return Trace(train, observed, predicted, events, records, sensors)


def detect_stream(
    net: Network,
    train: np.ndarray,
    observed: np.ndarray,
    gate: GateConfig = GateConfig(),
    rtca: RtcaConfig = RtcaConfig(),
    period: int = 144,
    keep_records: bool = False,
) -> tuple[np.ndarray, list[AnomalyEvent], list]:
    """Fit the ensemble on ``train`` and stream ``observed`` through forecaster and detectors.

    Both arrays are (steps, n, 3); ``observed`` is taken to follow ``train``
    directly in time. Returns the one-step predictions, the confirmed
    events and (optionally) the per-step detector records.
    """
    moe = MixtureOfExperts.from_names(
        gate.experts,
        lambda_gate=gate.lambda_gate,
        ema_beta=gate.ema_beta,
        period=period,
        window=gate.window,
    ).fit(train, net)

    ch = CHANNELS.index(rtca.channel)
    history = np.concatenate([train, observed], axis=0)
    offset = len(train)
    detector = NetworkDetector(net.node_ids, rtca)
    predicted = np.empty_like(observed)
    records = []
    for t in range(len(observed)):
        fc = moe.predict(history[: offset + t], net)
        predicted[t] = fc.combined
        actual = observed[t]
        recs = detector.step(t, actual[:, ch], fc.combined[:, ch])
        if keep_records:
            records.append(recs)
        # gate adaptation pauses while any node is suspect or confirmed
        if not detector.any_alert:
            moe.update(fc, actual)
    return predicted, detector.events, records


def _hit(net: Network, leak_conduit: str, segment: str | None) -> str:
    if segment is None:
        return "miss"
    if segment == leak_conduit:
        return "exact"
    a, b = net.conduit(leak_conduit), net.conduit(segment)
    if {a.from_node, a.to_node} & {b.from_node, b.to_node}:
        return "adjacent"
    return "miss"


def summarize_trace(
    cfg: ExperimentConfig, scenario: LeakScenario | None, net: Network, trace: Trace
) -> tuple[CaseResult, LocalizationResult | None]:
    start = scenario.start_step if scenario else cfg.steps
    pre = [e for e in trace.events if e.detected_at < start]
    post = [e for e in trace.events if e.detected_at >= start]
    if scenario is None or not post:
        return CaseResult(scenario, False, -1, False, None, len(pre), n_events=len(trace.events)), None

    first = min(post, key=lambda e: (e.detected_at, e.node_id))
    anomalous = coanomalous(post, first.detected_at, cfg.rtca.t_persist)
    flows = dict(zip(net.node_ids, trace.observed.data[first.detected_at, :, FLOW]))
    loc = localize(net, anomalous, flows)
    top = loc.ranked_candidates[0][0] if loc.ranked_candidates else None
    delay = first.detected_at - start
    return (
        CaseResult(
            scenario,
            detected=True,
            detection_delay=delay,
            within_10=delay <= 10,
            localization_hit=_hit(net, scenario.conduit_id, top),
            false_alarms_pre_leak=len(pre),
            first_node=first.node_id,
            segments=loc.segments,
            n_events=len(trace.events),
        ),
        loc,
    )


def run_case(
    cfg: ExperimentConfig,
    scenario: LeakScenario | None,
    net: Network | None = None,
    control_index: int = 0,
) -> CaseResult:
    """Run one scenario (or a leak-free control when ``scenario`` is None)."""
    net = net or cfg.network()
    if scenario is not None:
        net.conduit(scenario.conduit_id)
    trace = run_pipeline(cfg, scenario, net, control_index)
    return summarize_trace(cfg, scenario, net, trace)[0]


def _safe_case(args) -> CaseResult:
    cfg, scenario, control_index = args
    try:
        return run_case(cfg, scenario, control_index=control_index)
    except Exception as exc:  # noqa: BLE001 - a failing case is recorded, the batch goes on
        log.exception("case %s failed", scenario)
        return CaseResult(scenario, False, -1, False, None, 0, error=f"{type(exc).__name__}: {exc}")


def run_batch(
    cfg: ExperimentConfig,
    scenarios: Sequence[LeakScenario | None],
    workers: int = 1,
) -> list[CaseResult]:
    """Run cases independently; results keep the input order.

    ``None`` entries are leak-free controls, numbered in order of appearance.
    """
    args = []
    controls = 0
    for s in scenarios:
        args.append((cfg, s, controls if s is None else 0))
        if s is None:
            controls += 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_safe_case, args, chunksize=4))
    return [_safe_case(a) for a in args]


def select_scenarios(cfg: ExperimentConfig, net: Network) -> list[LeakScenario]:
    scenarios = generate_scenarios(net, cfg.seed, cfg.start_step)
    if cfg.kinds:
        wanted = {LeakKind(k) for k in cfg.kinds}
        scenarios = [s for s in scenarios if s.kind in wanted]
    return scenarios


# -- evaluation ------------------------------------------------------------


@dataclass(frozen=True)
class KindSummary:
    kind: str
    cases: int
    detected: int
    detection_rate: float
    mean_delay: float | None
    within_10: int
    within_10_rate: float


@dataclass(frozen=True)
class EvaluationReport:
    per_kind: dict[str, KindSummary]
    cases: int
    detected: int
    detection_rate: float
    within_10_rate: float
    within_10_of_detected: float
    localization_exact: float | None
    localization_exact_or_adjacent: float | None
    false_alarms: int
    failed_cases: int

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["per_kind"] = {k: asdict(v) for k, v in self.per_kind.items()}
        return doc


def _summarize(kind: str, group: list[CaseResult]) -> KindSummary:
    det = [c for c in group if c.detected]
    w10 = sum(c.within_10 for c in group)
    return KindSummary(
        kind=kind,
        cases=len(group),
        detected=len(det),
        detection_rate=len(det) / len(group),
        mean_delay=float(np.mean([c.detection_delay for c in det])) if det else None,
        within_10=w10,
        within_10_rate=w10 / len(group),
    )


def evaluate(cases: Iterable[CaseResult]) -> EvaluationReport:
    """Aggregate case results per leak kind and overall.

    Leak-free control cases only contribute to the false-alarm count.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("no cases to evaluate")
    leak_cases = [c for c in cases if c.scenario is not None]
    groups: dict[str, list[CaseResult]] = {}
    for c in leak_cases:
        groups.setdefault(c.kind, []).append(c)
    order = [k.value for k in KINDS]
    per_kind = {k: _summarize(k, groups[k]) for k in sorted(groups, key=order.index)}

    detected = [c for c in leak_cases if c.detected]
    n = len(leak_cases)
    hits = [c.localization_hit for c in detected]
    return EvaluationReport(
        per_kind=per_kind,
        cases=n,
        detected=len(detected),
        detection_rate=len(detected) / n if n else math.nan,
        within_10_rate=sum(c.within_10 for c in leak_cases) / n if n else math.nan,
        within_10_of_detected=(
            sum(c.within_10 for c in detected) / len(detected) if detected else math.nan
        ),
        localization_exact=hits.count("exact") / len(hits) if hits else None,
        localization_exact_or_adjacent=(
            (hits.count("exact") + hits.count("adjacent")) / len(hits) if hits else None
        ),
        false_alarms=sum(c.false_alarms_pre_leak for c in cases)
        + sum(c.n_events for c in cases if c.scenario is None),
        failed_cases=sum(c.error is not None for c in cases),
    )
