"""Severity triage, maintenance priority and structured report rendering.

The report body is filled deterministically from a plain-text template
with ``{{placeholder}}`` fields. Sections may optionally be passed through
a text-generation client; the default client returns its input unchanged.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from .localization import LocalizationResult
from .network import Network, betweenness, downstream_set
from .rtca import AnomalyEvent

SECTIONS = ("executive_summary", "technical_details", "resources", "safety_notes")
_PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")


class TemplateError(ValueError):
    pass


class Severity(str, enum.Enum):
    CRITICAL = "Critical"
    MAJOR = "Major"
    MINOR = "Minor"

    @property
    def rank(self) -> int:
        return {"Critical": 2, "Major": 1, "Minor": 0}[self.value]


def classify_severity(conf: float, e_rt: float) -> Severity:
    if conf > 0.9 and e_rt > 0.3:
        return Severity.CRITICAL
    if conf > 0.7 and e_rt > 0.15:
        return Severity.MAJOR
    return Severity.MINOR


def priority(conf: float, centrality: float, impact: float) -> float:
    if min(conf, centrality, impact) < 0:
        raise ValueError("priority factors must be >= 0")
    return conf * centrality * impact


def impact(net: Network, v: str) -> float:
    """Fraction of the network's nodes lying downstream of ``v``."""
    return len(downstream_set(net, v)) / len(net.nodes)


@dataclass(frozen=True)
class MaintenanceItem:
    node_id: str
    severity: Severity
    priority: float
    impact: float
    centrality: float
    confidence: float
    detected_at: int


@dataclass(frozen=True)
class Report:
    executive_summary: str
    technical_details: str
    resources: str
    safety_notes: str
    items: tuple[MaintenanceItem, ...]
    inputs_digest: str
    text: str


class TextGenerator(Protocol):
    def generate(self, prompt: str) -> str: ...


class NullTextGenerator:
    """Default client: passes section text through untouched."""

    def generate(self, prompt: str) -> str:
        return prompt


class HttpTextGenerator:
    """POST ``{"model": ..., "prompt": ...}`` and read ``{"text": ...}`` back.

    Only constructed when a report endpoint is configured explicitly.
    """

    def __init__(self, url: str, model: str, timeout: float = 30.0):
        self.url = url
        self.model = model
        self.timeout = timeout

    def generate(self, prompt: str) -> str:
        body = json.dumps({"model": self.model, "prompt": prompt}).encode()
        req = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            doc = json.loads(resp.read().decode("utf-8"))
        return str(doc["text"])


def default_template_path() -> Path:
    return Path(__file__).parent / "data" / "report_template.txt"


def default_template() -> str:
    return default_template_path().read_text(encoding="utf-8")


def validate_template(template: str) -> list[str]:
    names = _PLACEHOLDER.findall(template)
    missing = [s for s in SECTIONS if s not in names]
    if missing:
        raise TemplateError(f"template lacks required sections: {missing}")
    unknown = sorted(set(names) - set(SECTIONS) - {"items_table"})
    if unknown:
        raise TemplateError(f"template has unknown placeholders: {unknown}")
    if template.count("{{") != template.count("}}") or template.count("{{") != len(names):
        raise TemplateError("template has unbalanced or malformed braces")
    return names


def maintenance_items(
    events: Sequence[AnomalyEvent],
    net: Network,
    centrality: Mapping[str, float] | None = None,
) -> list[MaintenanceItem]:
    """One item per anomalous node (its strongest event), sorted by priority."""
    centrality = centrality if centrality is not None else betweenness(net)
    best: dict[str, AnomalyEvent] = {}
    for e in events:
        cur = best.get(e.node_id)
        if cur is None or (e.confidence, -e.detected_at) > (cur.confidence, -cur.detected_at):
            best[e.node_id] = e
    items = []
    for v, e in best.items():
        cb = float(centrality.get(v, 0.0))
        imp = impact(net, v)
        items.append(MaintenanceItem(
            node_id=v,
            severity=classify_severity(e.confidence, e.e_rt),
            priority=priority(e.confidence, cb, imp),
            impact=imp,
            centrality=cb,
            confidence=e.confidence,
            detected_at=e.detected_at,
        ))
    items.sort(key=lambda it: (-it.priority, -it.severity.rank, it.node_id))
    return items


def _digest(events, localization, net, history, template) -> str:
    doc = {
        "events": [e.to_dict() for e in events],
        "localization": localization.to_dict() if localization else None,
        "network": net.to_dict(),
        "history": history,
        "template": template,
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _items_table(items) -> str:
    if not items:
        return "(none)"
    lines = ["rank  node      severity  priority   confidence  impact  centrality  step"]
    for r, it in enumerate(items, 1):
        lines.append(
            f"{r:<5} {it.node_id:<9} {it.severity.value:<9} {it.priority:<10.4f} "
            f"{it.confidence:<11.3f} {it.impact:<7.3f} {it.centrality:<11.2f} {it.detected_at}"
        )
    return "\n".join(lines)


def render_report(
    events: Sequence[AnomalyEvent],
    localization: LocalizationResult | None,
    net: Network,
    template: str | None = None,
    *,
    history: Sequence[Mapping] = (),
    centrality: Mapping[str, float] | None = None,
    client: TextGenerator | None = None,
) -> Report:
    template = default_template() if template is None else template
    validate_template(template)
    client = client or NullTextGenerator()
    items = maintenance_items(events, net, centrality)

    if not items:
        summary = "No anomalies confirmed in the monitored period. No field action required."
        details = "All monitored nodes stayed within their adaptive thresholds."
        resources = "None."
        safety = "Routine inspection schedule applies."
    else:
        top = items[0]
        n_crit = sum(it.severity is Severity.CRITICAL for it in items)
        srcs = sorted(localization.sources) if localization else []
        segs = list(localization.segments) if localization else []
        summary = (
            f"{len(items)} node(s) confirmed anomalous; {n_crit} critical. "
            f"Highest priority: {top.node_id} ({top.severity.value}, first confirmed at step "
            f"{top.detected_at})."
        )
        if segs:
            summary += f" Suspected leak segment(s): {', '.join(segs)}."
        detail_lines = [
            f"Upstream-minimal source node(s): {', '.join(srcs) or 'n/a'}.",
            f"Candidate conduits (most likely first): {', '.join(segs) or 'n/a'}.",
            "Events:",
        ]
        for e in sorted(events, key=lambda e: (e.detected_at, e.node_id)):
            detail_lines.append(
                f"  step {e.detected_at}: node {e.node_id} e_rt={e.e_rt:.4f} "
                f"e_c={e.e_c:.4f} confidence={e.confidence:.3f}"
            )
        if history:
            detail_lines.append(f"Prior incidents on record: {len(history)}.")
        details = "\n".join(detail_lines)
        crews = "1 inspection crew" if n_crit == 0 else f"{n_crit + 1} crews incl. excavation"
        resources = (
            f"{crews}; CCTV pipe inspection for {', '.join(segs) or top.node_id}; "
            "flow meter for post-repair verification."
        )
        safety = (
            "Confined-space entry permit and gas monitoring required at manholes. "
            "Traffic control where the segment runs under roadway."
        )

    sections = {
        "executive_summary": client.generate(summary),
        "technical_details": client.generate(details),
        "resources": client.generate(resources),
        "safety_notes": client.generate(safety),
        "items_table": _items_table(items),
    }
    text = _PLACEHOLDER.sub(lambda m: sections[m.group(1)], template)
    return Report(
        executive_summary=sections["executive_summary"],
        technical_details=sections["technical_details"],
        resources=sections["resources"],
        safety_notes=sections["safety_notes"],
        items=tuple(items),
        inputs_digest=_digest(events, localization, net, list(history), template),
        text=text,
    )
