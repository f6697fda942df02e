"""Stage 2: prompt construction, the deterministic template summarizer, the
remote summarizer boundary and the four-field summary parser.

The template engine is a pure stand-in for a hosted language model so the
pipeline stays testable offline; a remote model attaches through
:class:`SummarizerBinding` and the documented JSON wire format.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import requests

from .core import DefectClass, DeficiencyRecord, Pose, StructuredSummary


class InconsistentContext(ValueError):
    pass


class SummarizerTimeout(RuntimeError):
    pass


class MalformedResponse(RuntimeError):
    pass


class MissingSection(ValueError):
    def __init__(self, missing: Sequence[str]):
        self.missing = tuple(missing)
        super().__init__(f"summary text missing sections: {', '.join(missing)}")


#: Human-readable display names used in prompts and summaries.
CLASS_DISPLAY = {
    DefectClass.CRACKS: "cracks",
    DefectClass.ROOTS: "root intrusion",
    DefectClass.HOLES: "holes",
    DefectClass.JOINT_PROBLEMS: "joint problems",
    DefectClass.DEFORMATION: "deformation",
    DefectClass.FRACTURE: "fracture",
    DefectClass.EROSION_DEPOSITS: "erosion and deposits",
    DefectClass.LOOSE_GASKET: "loose gasket",
    DefectClass.NO_DEFECT: "no defect",
}

_CONDITION_PHRASES = {
    DefectClass.CRACKS: "Cracking of the pipe wall is visible in the inspected section",
    DefectClass.ROOTS: "Root intrusion has penetrated the pipe interior",
    DefectClass.HOLES: "A hole has formed through the pipe wall",
    DefectClass.JOINT_PROBLEMS: "A displaced or open joint is present between pipe sections",
    DefectClass.DEFORMATION: "The pipe cross-section shows deformation from its design shape",
    DefectClass.FRACTURE: "A fracture with visible wall separation is present",
    DefectClass.EROSION_DEPOSITS: "Erosion of the invert and accumulated deposits are present",
    DefectClass.LOOSE_GASKET: "A loose or displaced gasket is visible at a joint",
}

_IMPLICATION_PHRASES = {
    DefectClass.CRACKS: "Unaddressed cracking can propagate and admit infiltration, weakening the surrounding bedding",
    DefectClass.ROOTS: "Continued root growth can block flow and widen the entry point, risking backups",
    DefectClass.HOLES: "Soil migration through the opening can create voids and surface settlement above the pipe",
    DefectClass.JOINT_PROBLEMS: "Deterioration of the joint could result in sanitary failures, contamination and service disruptions",
    DefectClass.DEFORMATION: "Progressive deformation can lead to structural collapse of the affected section",
    DefectClass.FRACTURE: "The fracture may progress to collapse under load, interrupting service",
    DefectClass.EROSION_DEPOSITS: "Ongoing erosion reduces wall thickness while deposits restrict hydraulic capacity",
    DefectClass.LOOSE_GASKET: "A compromised gasket seal permits exfiltration and infiltration at the joint",
}

#: Per-class median region area (px^2), used by the severity heuristic.
CLASS_MEDIAN_AREA_PX = {c: 400 for c in DefectClass.defect_classes()}


@dataclass(frozen=True)
class ConditioningContext:
    """Context handed to the summarizer alongside the imagery."""

    labels: tuple[DefectClass, ...]
    chainage_start_m: float
    chainage_end_m: float
    pipe_material: str = "concrete"
    pipe_diameter_class: str = "medium"
    severity_hint: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.labels:
            raise ValueError("conditioning context needs at least one defect label")

    def to_dict(self) -> dict:
        return {
            "labels": [c.value for c in self.labels],
            "chainage_start_m": self.chainage_start_m,
            "chainage_end_m": self.chainage_end_m,
            "pipe_material": self.pipe_material,
            "pipe_diameter_class": self.pipe_diameter_class,
            "severity_hint": self.severity_hint,
        }


@dataclass(frozen=True)
class Prompt:
    """Structured prompt: instruction text plus imagery references and context."""

    instruction: str
    context: ConditioningContext
    image_ref: Optional[str] = None
    mask_ref: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "prompt": self.instruction,
            "image_path": self.image_ref,
            "mask_path": self.mask_ref,
            "context": self.context.to_dict(),
        }


@dataclass(frozen=True)
class SummarizerBinding:
    """Where summaries come from: the local template engine or a remote model."""

    kind: str = "template"  # template | remote
    endpoint: Optional[str] = None
    timeout_s: float = 10.0

    def __post_init__(self) -> None:
        if self.kind not in ("template", "remote"):
            raise ValueError(f"unknown summarizer kind: {self.kind!r}")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote binding requires an endpoint")
        if self.timeout_s <= 0:
            raise ValueError("timeout must be > 0")


def context_for_record(record: DeficiencyRecord, pipe_material: str = "concrete") -> ConditioningContext:
    """Build the default conditioning context for one record."""
    return ConditioningContext(
        labels=(record.defect_class,),
        chainage_start_m=record.first_pose.chainage,
        chainage_end_m=record.last_pose.chainage,
        pipe_material=pipe_material,
    )


def build_prompt(record: DeficiencyRecord, ctx: ConditioningContext) -> Prompt:
    """Render the fixed instruction template for one deficiency record.

    Deterministic: identical inputs give byte-identical prompts.
    """
    if record.defect_class not in ctx.labels:
        raise InconsistentContext(
            f"context labels {[c.value for c in ctx.labels]} do not include "
            f"record class {record.defect_class.value}"
        )
    label = CLASS_DISPLAY[record.defect_class]
    instruction = (
        f"You are an infrastructure inspection assistant. A {label} deficiency was "
        f"detected between chainage {ctx.chainage_start_m:g} m and {ctx.chainage_end_m:g} m "
        f"of a {ctx.pipe_diameter_class} {ctx.pipe_material} pipe "
        f"(confidence {record.representative.confidence:.2f}, "
        f"{record.member_count} sightings). "
        "Describe the condition of the pipe at this location. "
        "State the location of the deficiency within the pipe segment. "
        "Assess the severity so repairs can be prioritized by urgency. "
        "Explain the implications if the deficiency is left unaddressed. "
        "Answer with four labeled sections: Condition, Location, Severity, Implications."
    )
    return Prompt(
        instruction=instruction,
        context=ctx,
        image_ref=record.image_ref,
        mask_ref=record.mask_ref,
    )


def _clock_sector(pose: Pose) -> str:
    eps = 1e-9
    vert = "upper" if pose.vertical > eps else "lower" if pose.vertical < -eps else ""
    lat = "right" if pose.lateral > eps else "left" if pose.lateral < -eps else ""
    sector = " ".join(p for p in (vert, lat) if p)
    return sector or "central axis"


def severity_level(record: DeficiencyRecord) -> str:
    """Severity heuristic: high needs confidence >= 0.9 and a region at
    least twice the class median area; medium needs confidence >= 0.6."""
    rep = record.representative
    median = CLASS_MEDIAN_AREA_PX[record.defect_class]
    if rep.confidence >= 0.9 and rep.region.area_px >= 2 * median:
        return "high"
    if rep.confidence >= 0.6:
        return "medium"
    return "low"


_SEVERITY_PROSE = {
    "high": "high severity; repair should be prioritized urgently",
    "medium": "medium severity; schedule repair in the near term",
    "low": "low severity; monitor during routine inspections",
}


def template_summarize(record: DeficiencyRecord, ctx: ConditioningContext) -> StructuredSummary:
    """Deterministic four-field summary from the class phrase tables."""
    if record.defect_class not in ctx.labels:
        raise InconsistentContext("record class missing from context labels")
    sector = _clock_sector(record.representative.pose)
    side = "side of the pipe" if sector != "central axis" else "of the pipe"
    condition = f"{_CONDITION_PHRASES[record.defect_class]}."
    location = (
        f"Detected on the {sector} {side} at chainage "
        f"{record.first_pose.chainage:g} m"
        + (
            f" extending to {record.last_pose.chainage:g} m."
            if record.last_pose.chainage > record.first_pose.chainage
            else "."
        )
    )
    level = severity_level(record)
    severity = f"Assessed as {level} severity: {_SEVERITY_PROSE[level].split('; ')[1]}."
    implications = f"{_IMPLICATION_PHRASES[record.defect_class]}."
    return _assemble(condition, location, severity, implications, source="template")


def _assemble(
    condition: str, location: str, severity: str, implications: str, source: str
) -> StructuredSummary:
    full_text = (
        f"Condition: {condition}\n"
        f"Location: {location}\n"
        f"Severity: {severity}\n"
        f"Implications: {implications}"
    )
    return StructuredSummary(
        condition=condition,
        location=location,
        severity=severity,
        implications=implications,
        full_text=full_text,
        source=source,
    )


_SECTION_RE = re.compile(
    r"^\s*(condition|location|severity|implications)\s*:\s*",
    re.IGNORECASE | re.MULTILINE,
)

_REQUIRED_SECTIONS = ("condition", "location", "severity", "implications")


def parse_summary(text: str, source: str = "remote-model") -> StructuredSummary:
    """Split model text on the four labeled section headers.

    Header order does not matter; a repeated header keeps its first
    occurrence. Raises :class:`MissingSection` listing every absent header.
    """
    sections: dict[str, str] = {}
    matches = list(_SECTION_RE.finditer(text))
    for i, m in enumerate(matches):
        name = m.group(1).lower()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        if name not in sections:
            sections[name] = text[m.end() : end].strip()
    missing = [s for s in _REQUIRED_SECTIONS if not sections.get(s)]
    if missing:
        raise MissingSection(missing)
    return _assemble(
        sections["condition"],
        sections["location"],
        sections["severity"],
        sections["implications"],
        source=source,
    )


class RemoteSummarizer:
    """Record-level summarizer backed by a remote endpoint.

    Remote failures are never fatal to a run: with fallback enabled (the
    default) a timeout or malformed response degrades to the template
    engine for that record.
    """

    def __init__(self, binding: SummarizerBinding, fallback_to_template: bool = True):
        self.binding = binding
        self.fallback_to_template = fallback_to_template

    def __call__(self, record: DeficiencyRecord) -> StructuredSummary:
        ctx = context_for_record(record)
        prompt = build_prompt(record, ctx)
        try:
            return remote_summarize(prompt, self.binding)
        except (SummarizerTimeout, MalformedResponse):
            if self.fallback_to_template:
                return template_summarize(record, ctx)
            raise


def remote_summarize(prompt: Prompt, binding: SummarizerBinding) -> StructuredSummary:
    """Request a summary from the configured remote endpoint.

    Wire format: POST JSON {prompt, image_path, mask_path, context}; the
    response is JSON {"text": ...} parsed through :func:`parse_summary`.
    Timeouts and malformed responses surface as errors; callers treat them
    as per-record failures, never fatal to the run.
    """
    if binding.kind != "remote":
        raise ValueError("remote_summarize needs a remote binding")
    try:
        resp = requests.post(
            binding.endpoint, json=prompt.to_dict(), timeout=binding.timeout_s
        )
    except requests.Timeout as exc:
        raise SummarizerTimeout(f"summarizer endpoint timed out after {binding.timeout_s}s") from exc
    try:
        payload = resp.json()
        text = payload["text"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedResponse(f"summarizer response is not {{'text': ...}}: {exc}") from exc
    try:
        return parse_summary(text, source="remote-model")
    except MissingSection as exc:
        raise MalformedResponse(str(exc)) from exc
