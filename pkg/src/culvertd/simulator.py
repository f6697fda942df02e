"""Deterministic scenario generation, replay and scoring.

Scenarios are fully determined by (seed, parameters): the same seed always
yields the same planted deficiencies, the same frame stream and, with a
noiseless detector, the same report. Frames are procedurally textured
placeholders; the planted ground truth, not the RGB content, drives the
stub detector. Real imagery attaches through the same scenario format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .core import (
    DefectClass,
    DeficiencyRecord,
    Detection,
    Frame,
    InspectionReport,
    Pose,
    Region,
    StructuredSummary,
    parse_defect_class,
)
from .metrics import MetricReport, evaluate_corpus, tokenize
from .summarize import context_for_record, template_summarize

SCENARIO_VERSION = 1

#: Class sampling weights: the per-class sample counts of the source
#: inspection dataset.
CLASS_SAMPLE_COUNTS = {
    DefectClass.CRACKS: 1661,
    DefectClass.ROOTS: 295,
    DefectClass.HOLES: 87,
    DefectClass.JOINT_PROBLEMS: 1631,
    DefectClass.DEFORMATION: 131,
    DefectClass.FRACTURE: 1661,
    DefectClass.EROSION_DEPOSITS: 106,
    DefectClass.LOOSE_GASKET: 133,
}

#: How far ahead of the robot a planted deficiency is visible (meters).
VIEW_AHEAD_M = 1.0

FRAME_HEIGHT = 48
FRAME_WIDTH = 64


def _region_for_extent(extent_m: float) -> Region:
    # Square placeholder region whose pixel area scales with physical extent.
    side = max(4, int(round(extent_m * 40)))
    return Region(
        centroid_row=FRAME_HEIGHT / 2,
        centroid_col=FRAME_WIDTH / 2,
        bbox=(0, 0, side - 1, side - 1),
        area_px=side * side,
    )


def _plant(
    cls_: DefectClass, pose: Pose, extent_m: float, confidence: float
) -> "PlantedDeficiency":
    det = Detection(
        defect_class=cls_,
        confidence=confidence,
        region=_region_for_extent(extent_m),
        pose=pose,
        frame_id=-1,
    )
    record = DeficiencyRecord(
        record_id=0,
        defect_class=cls_,
        representative=det,
        member_count=1,
        first_pose=pose,
        last_pose=pose,
    )
    summary = template_summarize(record, context_for_record(record))
    return PlantedDeficiency(
        defect_class=cls_,
        pose=pose,
        extent_m=extent_m,
        confidence=confidence,
        canonical_summary=summary,
    )


@dataclass(frozen=True)
class PlantedDeficiency:
    """Ground truth: one planted defect with its canonical reference summary."""

    defect_class: DefectClass
    pose: Pose
    extent_m: float
    confidence: float
    canonical_summary: StructuredSummary

    def to_detection(self, frame_id: int = -1) -> Detection:
        return Detection(
            defect_class=self.defect_class,
            confidence=self.confidence,
            region=_region_for_extent(self.extent_m),
            pose=self.pose,
            frame_id=frame_id,
        )

    def to_record(self, record_id: int = 0) -> DeficiencyRecord:
        det = self.to_detection()
        return DeficiencyRecord(
            record_id=record_id,
            defect_class=self.defect_class,
            representative=det,
            member_count=1,
            first_pose=self.pose,
            last_pose=self.pose,
        )

    def to_dict(self) -> dict:
        return {
            "class": self.defect_class.value,
            "pose": self.pose.to_dict(),
            "extent_m": self.extent_m,
            "confidence": self.confidence,
            "canonical_summary": self.canonical_summary.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedDeficiency":
        return cls(
            defect_class=parse_defect_class(d["class"]),
            pose=Pose.from_dict(d["pose"]),
            extent_m=float(d["extent_m"]),
            confidence=float(d["confidence"]),
            canonical_summary=StructuredSummary.from_dict(d["canonical_summary"]),
        )


@dataclass(frozen=True)
class Scenario:
    """A synthetic culvert run."""

    seed: int
    pipe_length_m: float
    fps: float = 15.0
    robot_speed_mps: float = 0.3
    planted: tuple[PlantedDeficiency, ...] = ()
    difficulty: str = "normal"
    scenario_version: int = SCENARIO_VERSION

    def __post_init__(self) -> None:
        if self.pipe_length_m <= 0 or self.fps <= 0 or self.robot_speed_mps <= 0:
            raise ValueError("length, fps and speed must all be positive")
        for p in self.planted:
            if not 0.0 <= p.pose.chainage <= self.pipe_length_m:
                raise ValueError("planted pose outside the pipe")

    @property
    def frame_count(self) -> int:
        return round(self.pipe_length_m / self.robot_speed_mps * self.fps)

    def to_dict(self) -> dict:
        return {
            "scenario_version": self.scenario_version,
            "seed": self.seed,
            "pipe_length_m": self.pipe_length_m,
            "fps": self.fps,
            "robot_speed_mps": self.robot_speed_mps,
            "difficulty": self.difficulty,
            "planted": [p.to_dict() for p in self.planted],
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        version = int(d.get("scenario_version", SCENARIO_VERSION))
        if version != SCENARIO_VERSION:
            raise ValueError(f"unsupported scenario_version {version}")
        return cls(
            seed=int(d["seed"]),
            pipe_length_m=float(d["pipe_length_m"]),
            fps=float(d.get("fps", 15.0)),
            robot_speed_mps=float(d.get("robot_speed_mps", 0.3)),
            planted=tuple(PlantedDeficiency.from_dict(p) for p in d.get("planted", [])),
            difficulty=d.get("difficulty", "normal"),
        )

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


def generate_scenario(
    seed: int,
    length_m: float,
    defect_density_per_10m: float = 2.0,
    difficulty: str = "normal",
    min_separation_m: float = 1.0,
) -> Scenario:
    """Plant a Poisson number of deficiencies along the pipe.

    Class frequencies follow the dataset sample counts; placements keep a
    minimum chainage separation so consolidation cannot merge distinct
    plants. Each plant carries a canonical template summary used later as
    the scoring reference.
    """
    if defect_density_per_10m < 0:
        raise ValueError("density must be >= 0")
    rng = np.random.default_rng(seed)
    classes = list(CLASS_SAMPLE_COUNTS)
    weights = np.array([CLASS_SAMPLE_COUNTS[c] for c in classes], dtype=np.float64)
    weights /= weights.sum()
    n = int(rng.poisson(defect_density_per_10m * length_m / 10.0))
    chainages: list[float] = []
    for _ in range(n):
        for _attempt in range(200):
            c = float(rng.uniform(0.0, length_m))
            if all(abs(c - other) >= min_separation_m for other in chainages):
                chainages.append(c)
                break
    chainages.sort()
    planted = []
    for c in chainages:
        cls_ = classes[int(rng.choice(len(classes), p=weights))]
        pose = Pose(
            chainage=c,
            lateral=float(rng.uniform(-0.05, 0.05)),
            vertical=float(rng.uniform(-0.05, 0.05)),
            timestamp=0.0,
        )
        extent = float(rng.uniform(0.1, 0.6))
        confidence = float(rng.uniform(0.9, 1.0))
        planted.append(_plant(cls_, pose, extent, confidence))
    return Scenario(
        seed=seed,
        pipe_length_m=length_m,
        planted=tuple(planted),
        difficulty=difficulty,
    )


def _frame_image(seed: int, frame_id: int) -> np.ndarray:
    rng = np.random.default_rng([seed, frame_id])
    return rng.integers(0, 256, size=(FRAME_HEIGHT, FRAME_WIDTH, 3), dtype=np.uint8)


def replay(
    scenario: Scenario, realtime: bool = False
) -> Iterator[tuple[Frame, list[Detection]]]:
    """Yield the frame stream with its per-frame visible ground truth.

    Poses advance by speed / fps per frame; realtime mode sleeps between
    frames, fast mode does not. The frame content is identical in both
    modes.
    """
    import time as _time

    step = scenario.robot_speed_mps / scenario.fps
    period = 1.0 / scenario.fps
    for i in range(scenario.frame_count):
        if realtime and i > 0:
            _time.sleep(period)
        chainage = i * step
        pose = Pose(chainage=chainage, timestamp=i / scenario.fps)
        frame = Frame(
            frame_id=i,
            image=_frame_image(scenario.seed, i),
            pose=pose,
            capture_time=i / scenario.fps,
        )
        visible = [
            p.to_detection(frame_id=i)
            for p in scenario.planted
            if 0.0 <= p.pose.chainage - chainage <= VIEW_AHEAD_M
        ]
        yield frame, visible


@dataclass(frozen=True)
class RunScore:
    """How a finished run compares against its scenario's ground truth."""

    precision: float
    recall: float
    per_class_precision: dict[DefectClass, float]
    per_class_recall: dict[DefectClass, float]
    record_count_error: int
    localization_mae_m: float
    summary_metrics: Optional[MetricReport]
    matched: int
    zero_predictions: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.precision <= 1.0 and 0.0 <= self.recall <= 1.0):
            raise ValueError("precision/recall must be in [0, 1]")


def greedy_match(
    records: list[DeficiencyRecord],
    planted: list[PlantedDeficiency],
    match_radius_m: float,
) -> list[tuple[int, int, float]]:
    """Nearest-first one-to-one matching of records to plants.

    Candidate pairs require equal class and distance within the radius;
    pairs are consumed in increasing distance order. Returns
    (record index, plant index, distance) triples.
    """
    from .core import pose_distance

    candidates = []
    for i, rec in enumerate(records):
        for j, plant in enumerate(planted):
            if rec.defect_class != plant.defect_class:
                continue
            dist = pose_distance(rec.first_pose, plant.pose)
            if dist <= match_radius_m:
                candidates.append((dist, i, j))
    candidates.sort()
    used_r: set[int] = set()
    used_p: set[int] = set()
    matches = []
    for dist, i, j in candidates:
        if i in used_r or j in used_p:
            continue
        used_r.add(i)
        used_p.add(j)
        matches.append((i, j, dist))
    return matches


def score_run(
    report: InspectionReport, scenario: Scenario, match_radius_m: float = 0.5
) -> RunScore:
    """Score a report against the scenario's planted ground truth.

    Precision with zero predictions is reported as 1.0 and flagged;
    per-class scores use the same convention.
    """
    records = report.records
    planted = list(scenario.planted)
    matches = greedy_match(records, planted, match_radius_m)
    matched_r = {i for i, _, _ in matches}
    matched_p = {j for _, j, _ in matches}

    def ratio(num: int, den: int) -> float:
        return num / den if den else 1.0

    per_class_p: dict[DefectClass, float] = {}
    per_class_r: dict[DefectClass, float] = {}
    for cls_ in DefectClass.defect_classes():
        rec_idx = [i for i, r in enumerate(records) if r.defect_class == cls_]
        pl_idx = [j for j, p in enumerate(planted) if p.defect_class == cls_]
        if not rec_idx and not pl_idx:
            continue
        hits = sum(1 for i, j, _ in matches if records[i].defect_class == cls_)
        per_class_p[cls_] = ratio(hits, len(rec_idx))
        per_class_r[cls_] = ratio(hits, len(pl_idx))

    summary_metrics = None
    pairs = []
    for i, j, _ in matches:
        produced = next(
            (s for r, s in report.entries if r.record_id == records[i].record_id), None
        )
        if produced is not None:
            pairs.append(
                (tokenize(produced.full_text), [tokenize(planted[j].canonical_summary.full_text)])
            )
    if len(pairs) >= 2:
        summary_metrics = evaluate_corpus(pairs)

    mae = (
        sum(d for _, _, d in matches) / len(matches) if matches else 0.0
    )
    return RunScore(
        precision=ratio(len(matched_r), len(records)),
        recall=ratio(len(matched_p), len(planted)),
        per_class_precision=per_class_p,
        per_class_recall=per_class_r,
        record_count_error=len(records) - len(planted),
        localization_mae_m=mae,
        summary_metrics=summary_metrics,
        matched=len(matches),
        zero_predictions=not records,
    )


def brute_force_match_count(
    records: list[DeficiencyRecord],
    planted: list[PlantedDeficiency],
    match_radius_m: float,
) -> int:
    """Exhaustive optimal one-to-one assignment size; oracle for small n."""
    from .core import pose_distance

    edges: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        edges[i] = [
            j
            for j, plant in enumerate(planted)
            if rec.defect_class == plant.defect_class
            and pose_distance(rec.first_pose, plant.pose) <= match_radius_m
        ]

    best = 0

    def explore(i: int, used: set[int], count: int) -> None:
        nonlocal best
        if count + (len(records) - i) <= best:
            return
        if i == len(records):
            best = max(best, count)
            return
        explore(i + 1, used, count)
        for j in edges[i]:
            if j not in used:
                used.add(j)
                explore(i + 1, used, count + 1)
                used.remove(j)

    explore(0, set(), 0)
    return best


#: Preset scenarios: the 60 ft lab pipe and one 65 ft field pipe.
PRESETS = {
    "lab-60ft": dict(seed=66, length_m=18.3),
    "field-65ft": dict(seed=74, length_m=19.8),
}


def make_preset(name: str, density_per_10m: float = 2.0) -> Scenario:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    p = PRESETS[name]
    return generate_scenario(p["seed"], p["length_m"], density_per_10m)
