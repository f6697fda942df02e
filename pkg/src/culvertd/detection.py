"""Stage 1: pluggable detector interface plus spatial consolidation of
repeated sightings into unique deficiency records.

The bundled detector is a deterministic stub driven by ground truth and a
noise profile; real detectors attach through the same call signature
(frame in, detections out). Consolidation is transitive: a record's
membership is a connected component of the same-class proximity graph, so
the resulting partition is independent of arrival order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    DefectClass,
    DeficiencyRecord,
    Detection,
    Frame,
    Region,
    pose_distance,
)

#: Stub detector metadata: reported parameter count of the stage-1 model.
DETECTOR_PARAM_COUNT = 640_000


@dataclass(frozen=True)
class DetectorProfile:
    """Noise model for the stub detector.

    recall and false_positive_rate may be a single float (applied to every
    class) or a per-class mapping; delay_s emulates inference cost.
    """

    name: str = "noiseless"
    recall: float | dict[DefectClass, float] = 1.0
    false_positive_rate: float | dict[DefectClass, float] = 0.0
    confidence_sigma: float = 0.0
    delay_s: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for value in self._per_class(self.recall).values():
            if not 0.0 <= value <= 1.0:
                raise ValueError("recall must be in [0, 1]")
        for value in self._per_class(self.false_positive_rate).values():
            if value < 0:
                raise ValueError("false-positive rate must be >= 0")
        if not 0.0 <= self.confidence_sigma <= 1.0:
            raise ValueError("confidence sigma must be in [0, 1]")
        if self.delay_s < 0:
            raise ValueError("delay must be >= 0")

    @staticmethod
    def _per_class(value: float | dict) -> dict[DefectClass, float]:
        if isinstance(value, dict):
            return value
        return {c: value for c in DefectClass.defect_classes()}

    def recall_for(self, cls_: DefectClass) -> float:
        return self._per_class(self.recall).get(cls_, 0.0)

    def fp_rate_for(self, cls_: DefectClass) -> float:
        return self._per_class(self.false_positive_rate).get(cls_, 0.0)


def detect(
    frame: Frame,
    truth: Optional[Sequence[Detection]],
    profile: DetectorProfile,
) -> list[Detection]:
    """Run the stub detector on one frame.

    Deterministic given (profile.seed, frame.frame_id): each ground-truth
    detection is emitted with probability equal to its class recall, with
    confidence jittered by confidence_sigma and clamped to [0, 1]; false
    positives are drawn per class at the configured per-frame rate. Sleeps
    delay_s to emulate inference cost.
    """
    if profile.delay_s > 0:
        time.sleep(profile.delay_s)
    rng = np.random.default_rng([profile.seed, frame.frame_id])
    out: list[Detection] = []
    for d in truth or ():
        if rng.random() >= profile.recall_for(d.defect_class):
            continue
        conf = d.confidence
        if profile.confidence_sigma > 0:
            conf += rng.normal(0.0, profile.confidence_sigma)
        out.append(replace(d, confidence=float(np.clip(conf, 0.0, 1.0)), frame_id=frame.frame_id))
    h, w = frame.image.shape[:2]
    for cls_ in DefectClass.defect_classes():
        n_fp = rng.poisson(profile.fp_rate_for(cls_))
        for _ in range(n_fp):
            row = int(rng.integers(0, h))
            col = int(rng.integers(0, w))
            out.append(
                Detection(
                    defect_class=cls_,
                    confidence=float(rng.uniform(0.2, 0.9)),
                    region=Region(
                        centroid_row=float(row),
                        centroid_col=float(col),
                        bbox=(row, col, row, col),
                        area_px=1,
                    ),
                    pose=frame.pose,
                    frame_id=frame.frame_id,
                )
            )
    return out


@dataclass(frozen=True)
class DedupPolicy:
    """Spatial consolidation policy for repeated sightings."""

    proximity_threshold_m: float = 0.5
    require_same_class: bool = True

    def __post_init__(self) -> None:
        if self.proximity_threshold_m <= 0:
            raise ValueError("proximity threshold must be > 0")


@dataclass
class _OpenRecord:
    """Mutable record under construction; frozen into DeficiencyRecord on demand."""

    record_id: int
    defect_class: DefectClass
    representative: Detection
    members: list[Detection] = field(default_factory=list)

    def freeze(self) -> DeficiencyRecord:
        first = min(self.members, key=lambda d: d.pose.chainage)
        last = max(self.members, key=lambda d: d.pose.chainage)
        return DeficiencyRecord(
            record_id=self.record_id,
            defect_class=self.defect_class,
            representative=self.representative,
            member_count=len(self.members),
            first_pose=first.pose,
            last_pose=last.pose,
        )


class DeficiencyLog:
    """Single-writer deficiency log applying transitive proximity merging.

    Adding a detection can bridge previously separate records; in that case
    the records fuse (connected-component semantics), so membership never
    depends on arrival order.
    """

    def __init__(self, policy: DedupPolicy | None = None) -> None:
        self.policy = policy or DedupPolicy()
        self._open: list[_OpenRecord] = []
        self._next_id = 0
        self._total = 0

    def __len__(self) -> int:
        return len(self._open)

    @property
    def total_detections(self) -> int:
        return self._total

    def add(self, d: Detection) -> _OpenRecord:
        """Consolidate one detection; returns the record it landed in."""
        self._total += 1
        near = [
            rec
            for rec in self._open
            if (not self.policy.require_same_class or rec.defect_class == d.defect_class)
            and any(
                pose_distance(m.pose, d.pose) <= self.policy.proximity_threshold_m
                for m in rec.members
            )
        ]
        if not near:
            rec = _OpenRecord(record_id=self._next_id, defect_class=d.defect_class, representative=d)
            self._next_id += 1
            rec.members.append(d)
            self._open.append(rec)
            return rec
        # Fuse all bridged records into the earliest one.
        target, rest = near[0], near[1:]
        for other in rest:
            target.members.extend(other.members)
            self._open.remove(other)
        target.members.append(d)
        target.representative = _pick_representative(target.members)
        return target

    def records(self) -> list[DeficiencyRecord]:
        """Snapshot of the consolidated log, ordered by first chainage."""
        frozen = [rec.freeze() for rec in self._open]
        frozen.sort(key=lambda r: (r.first_pose.chainage, r.record_id))
        return frozen

    def memberships(self) -> list[list[Detection]]:
        return [list(rec.members) for rec in self._open]


def _pick_representative(members: Sequence[Detection]) -> Detection:
    # Highest confidence wins; ties keep the earliest timestamp.
    return max(members, key=lambda d: (d.confidence, -d.pose.timestamp))


def consolidate(
    log: DeficiencyLog, d: Detection, policy: DedupPolicy | None = None
) -> DeficiencyLog:
    """Fold one detection into the log (see :meth:`DeficiencyLog.add`)."""
    if policy is not None and policy != log.policy:
        raise ValueError("policy does not match the log it was created with")
    log.add(d)
    return log


def finalize_log(
    detections: Iterable[Detection], policy: DedupPolicy | None = None
) -> list[DeficiencyRecord]:
    """Consolidate a full arrival sequence into deficiency records."""
    log = DeficiencyLog(policy)
    for d in detections:
        log.add(d)
    return log.records()
